mod common;

use common::*;
use wqms_core::engine::*;
use wqms_core::fixtures;
use wqms_core::transport::*;

#[test]
fn plug_flow_outlet_matches_decay() {
    let s = fixtures::plug_flow();
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    assert_eq!(plan.segments, vec![100]);
    assert!((plan.courant(0, 0) - 1.0).abs() < 1e-12);
    let (_, t) = run(&s, &plan, EngineOptions::default());
    let out = t.series("chlorine:J1").unwrap();
    let ratio = out.last().unwrap() / 1.0;
    let want = (-1e-4f64 * 1000.0 / 0.1).exp();
    assert!((ratio - want).abs() / want < 0.01, "{ratio} vs {want}");
}

#[test]
fn stagnant_network_holds_state() {
    let s = fixtures::stagnant();
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    let (_, t) = run(&s, &plan, EngineOptions::default());
    for x in &t.states {
        assert_eq!(x, &t.states[0]);
    }
}

#[test]
fn closed_loop_conserves_mass() {
    let e = loop_mass(SchemeFamily::Explicit);
    let i = loop_mass(SchemeFamily::Implicit);
    println!("explicit {e:e} implicit {i:e}");
    assert!(e < 1e-8 && i < 1e-8);
}

#[test]
fn pulse_matches_advection_diffusion() {
    let s = fixtures::gaussian_pulse();
    let lw = pulse_error(&s.plan);
    let lw_fine = pulse_error(&PlanOptions {
        dt_cap: lw.2 / 4.0,
        dt_min: 0.1,
        ..s.plan
    });
    let be_opts = fixtures::gaussian_implicit_plan();
    let be = pulse_error(&be_opts);
    let be_fine = pulse_error(&PlanOptions {
        dt_cap: be_opts.dt_cap / 2.0,
        dt_min: 0.1,
        segmentation: SegmentationMode::Fixed { segments: 1600 },
        ..be_opts
    });
    for (coarse, fine) in [(lw, lw_fine), (be, be_fine)] {
        assert!(coarse.0 < 0.05, "relative L2 error {}", coarse.0);
        assert!(fine.1 > coarse.1, "refinement did not add segments");
        assert!(
            fine.0 < coarse.0,
            "error grew under refinement: {} -> {}",
            coarse.0,
            fine.0
        );
    }
}

#[test]
fn advective_model_lags_at_the_dead_end() {
    let gaps: Vec<ArrivalGap> = (0..3).map(arrival_gap).collect();
    for g in &gaps {
        assert!(g.window > 0.0 && g.min_gap > 0.0, "{g:?}");
    }
    assert!(
        gaps[0].integral < gaps[1].integral && gaps[1].integral < gaps[2].integral,
        "{gaps:?}"
    );
}

#[test]
fn linearization_error_is_second_order() {
    for r in linearization_ratios(20, 7) {
        assert!(r >= 3.5, "gap ratio {r}");
    }
}

#[test]
fn linear_step_matches_nonlinear_without_reactions() {
    let s = fixtures::closed_loop();
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, &plan);
    let x = layout.initial_state(&s.topology, &s.initial).unwrap();
    let op = OperatingPoint::from_state(&layout, &x, 0.0);
    let mode = AssemblyMode::Linearized(op);
    let mats = assemble_system(
        &s.topology,
        &s.trace,
        &plan,
        &params,
        0,
        0,
        TransportMode::Auto,
        &mode,
    )
    .unwrap();
    let u = nalgebra::DVector::zeros(0);
    let a = step_nonlinear(&mats, &params, &x, &u).unwrap();
    let b = step_linear(&mats, &x, &u).unwrap();
    assert!((a - b).amax() < 1e-12);
}
