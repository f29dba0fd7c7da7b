use nalgebra::DVector;
use wqms_core::control::*;
use wqms_core::engine::*;
use wqms_core::fixtures::{self, Scenario};
use wqms_core::network::Species;
use wqms_core::transport::*;

fn report(s: &Scenario) -> (DiscretizationPlan, ControllabilityReport) {
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, &plan);
    let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
    let op = OperatingPoint::from_state(&layout, &x0, 0.0);
    let r = booster_weights(
        &s.topology,
        &s.trace,
        &plan,
        &params,
        &s.targets,
        &[op],
        &WeightOptions::default(),
    )
    .unwrap();
    (plan, r)
}

fn flags(r: &ControllabilityReport, booster: &str) -> Vec<bool> {
    r.results
        .iter()
        .filter(|g| g.booster == booster)
        .map(|g| g.full_rank)
        .collect()
}

#[test]
fn single_booster_takes_all_weight() {
    let (_, r) = report(&fixtures::single_booster());
    assert!(r.schedule.steps.iter().all(|w| w.r == vec![1.0]));
}

/// Does a unit dose at `booster` move chlorine at `node` within one
/// hydraulic step, judged by simulation?
fn reaches(s: &Scenario, plan: &DiscretizationPlan, booster: usize, node: &str) -> bool {
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, plan);
    let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
    let nb = s.topology.boosters().len();
    let mut u = DVector::zeros(nb);
    u[booster] = 1.0;
    let run = |u: DVector<f64>| {
        simulate_from(
            &s.topology,
            &s.trace,
            plan,
            &params,
            &x0,
            &InputSchedule::Constant(u),
            &EngineOptions::default(),
            0..1,
        )
        .unwrap()
    };
    let base = run(DVector::zeros(nb));
    let hit = run(u);
    let at = layout.index(
        Species::Chlorine,
        layout.node(s.topology.node(node).unwrap()),
    );
    (hit.final_state()[at] - base.final_state()[at]).abs() > 1e-12
}

#[test]
fn downstream_booster_cannot_reach_target() {
    let s = fixtures::booster_line();
    let (plan, r) = report(&s);
    for (j, id) in ["B1", "B2"].iter().enumerate() {
        let oracle = reaches(&s, &plan, j, "J2");
        assert!(flags(&r, id).iter().all(|f| *f == oracle), "{id}");
    }
    assert!(flags(&r, "B1")[0] && !flags(&r, "B2")[0]);
    // All weight goes to the booster that can act.
    for w in &r.schedule.steps {
        assert!(w.scores[1] == 0.0 && w.scores[0] > 0.0);
    }
}

#[test]
fn flow_reversal_moves_the_controllable_window() {
    let (_, a) = report(&fixtures::fos(false));
    let (_, b) = report(&fixtures::fos(true));
    let (fa, fb) = (flags(&a, "B1"), flags(&b, "B1"));
    assert_eq!(fa.len(), 8);
    assert!(fa.iter().any(|f| *f) && fa.iter().any(|f| !*f));
    assert!(fa.iter().zip(&fb).all(|(x, y)| x != y), "{fa:?} {fb:?}");
}

#[test]
fn schedule_and_tiles_serialize() {
    let (_, r) = report(&fixtures::two_booster_dead_end());
    let text = r.schedule.to_toml();
    assert_eq!(WeightSchedule::from_toml(&text, "mem").unwrap(), r.schedule);
    let csv = r.tiles_csv();
    assert_eq!(csv.lines().count(), 1 + r.results.len());
}
