//! Built-in scenarios used by tests, benchmarks and the `fixture` command.
//!
//! Every scenario is self-consistent: its trace passes continuity checks and
//! its plan options are the ones the scenario is meant to be run with.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use crate::control::{TargetCategory, TargetSpec};
use crate::engine::ReactionConstants;
use crate::error::Result;
use crate::network::{
    BoosterSpec, HydraulicStep, HydraulicTrace, InitialValue, NetworkFile, NetworkTopology,
    NodeRef, NodeSpec, PipeSpec, ReservoirSpec, Species, SpeciesInitialState, TankSpec,
};
use crate::transport::{PlanOptions, SchemeFamily, SegmentationMode, TransportMode};

/// Network, hydraulics, initial state and run settings of one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub topology: NetworkTopology,
    pub trace: HydraulicTrace,
    pub initial: SpeciesInitialState,
    pub reactions: ReactionConstants,
    pub plan: PlanOptions,
    pub targets: Vec<TargetSpec>,
}

/// Names accepted by [`by_name`].
pub const NAMES: &[&str] = &[
    "plug-flow",
    "gaussian-pulse",
    "dead-end-0",
    "dead-end-1",
    "dead-end-2",
    "closed-loop",
    "stagnant",
    "bla-m",
    "single-booster",
    "booster-line",
    "fos-a",
    "fos-b",
    "two-booster-dead-end",
    "grid",
];

pub fn by_name(name: &str) -> Option<Scenario> {
    Some(match name {
        "plug-flow" => plug_flow(),
        "gaussian-pulse" => gaussian_pulse(),
        "dead-end-0" => dead_end(0),
        "dead-end-1" => dead_end(1),
        "dead-end-2" => dead_end(2),
        "closed-loop" => closed_loop(),
        "stagnant" => stagnant(),
        "bla-m" => bla_m(),
        "single-booster" => single_booster(),
        "booster-line" => booster_line(),
        "fos-a" => fos(false),
        "fos-b" => fos(true),
        "two-booster-dead-end" => two_booster_dead_end(),
        "grid" => grid(10),
        _ => return None,
    })
}

/// Every built-in scenario.
pub fn all() -> Vec<Scenario> {
    NAMES.iter().filter_map(|n| by_name(n)).collect()
}

// ---- construction helpers ------------------------------------------------------

fn junction(id: &str) -> NodeSpec {
    NodeSpec { id: id.into() }
}

fn pipe(id: &str, from: &str, to: &str, length: f64, diameter: f64) -> PipeSpec {
    PipeSpec {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length,
        diameter,
        bulk_rate: 0.0,
        wall_rate: 0.0,
        mass_transfer: 0.0,
        diffusivity: 1e-9,
    }
}

fn reservoir(id: &str, chlorine: f64, reactant: f64, thms: f64) -> ReservoirSpec {
    ReservoirSpec {
        id: id.into(),
        chlorine,
        reactant,
        thms,
    }
}

fn booster(id: &str, node: &str, max: f64) -> BoosterSpec {
    BoosterSpec {
        id: id.into(),
        node: node.into(),
        max_concentration: max,
        species: Species::Chlorine,
    }
}

fn build(file: NetworkFile) -> NetworkTopology {
    NetworkTopology::new(file).expect("built-in network is valid")
}

fn explicit(dt_cap: f64) -> PlanOptions {
    PlanOptions {
        dt_cap,
        ..PlanOptions::default()
    }
}

/// Signed pipe flows meeting `demands` (per junction, m³/s, booster inflow
/// already subtracted) from `source`, over a BFS spanning tree. Pipes off the
/// tree carry `chords[pipe]` (signed, reference orientation), zero if absent.
fn network_flows(
    topo: &NetworkTopology,
    source: NodeRef,
    demands: &[f64],
    chords: &BTreeMap<usize, f64>,
) -> Vec<f64> {
    use crate::network::LinkRef;
    let n = topo.node_count();
    let incidence = topo.incidence();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([topo.node_ordinal(source)]);
    seen[topo.node_ordinal(source)] = true;
    let mut tree = vec![false; topo.pipes().len()];
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &link in &incidence[v] {
            let LinkRef::Pipe(p) = link else { continue };
            if chords.contains_key(&p) {
                continue;
            }
            let (a, b) = topo.pipe_ends(p);
            let (a, b) = (topo.node_ordinal(a), topo.node_ordinal(b));
            let w = if a == v { b } else { a };
            if !seen[w] {
                seen[w] = true;
                tree[p] = true;
                parent[w] = Some(p);
                queue.push_back(w);
            }
        }
    }
    // Net amount each node must pass on: own demand plus chord outflow.
    let mut need = vec![0.0; n];
    for (j, d) in demands.iter().enumerate() {
        need[topo.node_ordinal(NodeRef::Junction(j))] += d;
    }
    let mut flows = vec![0.0; topo.pipes().len()];
    for (&p, &q) in chords {
        let (a, b) = topo.pipe_ends(p);
        need[topo.node_ordinal(a)] += q;
        need[topo.node_ordinal(b)] -= q;
        flows[p] = q;
    }
    for &v in order.iter().rev() {
        let Some(p) = parent[v] else { continue };
        let (a, b) = topo.pipe_ends(p);
        let (a, b) = (topo.node_ordinal(a), topo.node_ordinal(b));
        // Flow from the parent into v equals everything v passes on.
        let into_v = need[v];
        let up = if a == v { b } else { a };
        flows[p] = if b == v { into_v } else { -into_v };
        need[up] += into_v;
    }
    flows
}

fn step_from_flows(
    topo: &NetworkTopology,
    flows: &[f64],
    demands: &[f64],
    boosters: &[f64],
) -> HydraulicStep {
    let mut step = HydraulicStep::zeros(topo);
    for (p, q) in flows.iter().enumerate() {
        step.velocities[p] = q / topo.pipes()[p].area();
    }
    step.demands = demands.to_vec();
    step.booster_flows = boosters.to_vec();
    step
}

fn diurnal(k: usize) -> f64 {
    1.0 + 0.4 * (2.0 * PI * (k as f64 - 6.0) / 24.0).sin()
}

// ---- scenarios -------------------------------------------------------------------

/// Single 1000 m pipe at 0.1 m/s with first-order decay 1e-4 1/s, planned so
/// that upwind runs at unit Courant number.
pub fn plug_flow() -> Scenario {
    let mut p = pipe("P1", "R1", "J1", 1000.0, 0.3);
    p.bulk_rate = 1e-4;
    let topo = build(NetworkFile {
        junctions: vec![junction("J1")],
        reservoirs: vec![reservoir("R1", 1.0, 0.0, 0.0)],
        pipes: vec![p],
        ..Default::default()
    });
    let mut step = HydraulicStep::zeros(&topo);
    step.velocities[0] = 0.1;
    step.balance_demands(&topo);
    Scenario {
        name: "plug-flow".into(),
        trace: HydraulicTrace::repeated(&topo, 3600.0, step, 24),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.0, 0.0, 0.0),
        reactions: ReactionConstants::default(),
        plan: explicit(100.0),
        targets: vec![],
    }
}

/// Centre, width and peak of the initial pulse in [`gaussian_pulse`], m.
pub const PULSE_CENTER: f64 = 100.0;
pub const PULSE_WIDTH: f64 = 20.0;
pub const PULSE_PEAK: f64 = 1.0;

/// Initial pulse profile at distance `x` from the pipe inlet.
pub fn pulse_profile(x: f64) -> f64 {
    PULSE_PEAK * (-(x - PULSE_CENTER).powi(2) / (2.0 * PULSE_WIDTH * PULSE_WIDTH)).exp()
}

/// Advection-diffusion solution for the pulse after time `t`.
pub fn pulse_solution(x: f64, t: f64, velocity: f64, dispersion: f64) -> f64 {
    let var0 = PULSE_WIDTH * PULSE_WIDTH;
    let var = var0 + 2.0 * dispersion * t;
    PULSE_PEAK
        * (var0 / var).sqrt()
        * (-(x - PULSE_CENTER - velocity * t).powi(2) / (2.0 * var)).exp()
}

/// 400 m turbulent pipe carrying an inert pulse for half an hour. The
/// scenario's plan options are for the explicit family; see
/// [`gaussian_implicit_plan`] for the implicit one. The initial state is
/// zero; build the pulse with [`pulse_profile`] on the planned grid.
pub fn gaussian_pulse() -> Scenario {
    let topo = build(NetworkFile {
        junctions: vec![junction("J1")],
        reservoirs: vec![reservoir("R1", 0.0, 0.0, 0.0)],
        pipes: vec![pipe("P1", "R1", "J1", 400.0, 0.5)],
        ..Default::default()
    });
    let mut step = HydraulicStep::zeros(&topo);
    step.velocities[0] = 0.1;
    step.balance_demands(&topo);
    Scenario {
        name: "gaussian-pulse".into(),
        trace: HydraulicTrace::repeated(&topo, 1800.0, step, 1),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.0, 0.0, 0.0),
        reactions: ReactionConstants::default(),
        plan: PlanOptions {
            transport: TransportMode::Adr,
            ..PlanOptions::default()
        },
        targets: vec![],
    }
}

/// Implicit plan for the pulse: 0.5 m segments and a 1 s step.
pub fn gaussian_implicit_plan() -> PlanOptions {
    PlanOptions {
        family: SchemeFamily::Implicit,
        transport: TransportMode::Adr,
        dt_cap: 1.0,
        segmentation: SegmentationMode::Fixed { segments: 800 },
        ..PlanOptions::default()
    }
}

/// Terminal-pipe diameters of the dead-end variants, m. Larger diameters at
/// the same residence time give lower Peclet numbers.
pub const DEAD_END_DIAMETERS: [f64; 3] = [0.003, 0.004, 0.006];

/// Reservoir feeding a turbulent main that branches into a 100 m laminar
/// service line ending at junction `J2`. Residence time in the service line is
/// four hours in every variant; `variant` picks the diameter.
pub fn dead_end(variant: usize) -> Scenario {
    let d = DEAD_END_DIAMETERS[variant.min(2)];
    let mut main = pipe("P1", "R1", "J1", 300.0, 0.1);
    let mut line = pipe("P2", "J1", "J2", 100.0, d);
    for p in [&mut main, &mut line] {
        p.bulk_rate = 2e-5;
    }
    let topo = build(NetworkFile {
        junctions: vec![junction("J1"), junction("J2")],
        reservoirs: vec![reservoir("R1", 2.0, 0.3, 0.01)],
        pipes: vec![main, line],
        ..Default::default()
    });
    let mut step = HydraulicStep::zeros(&topo);
    step.velocities = vec![0.2, 100.0 / 14_400.0];
    step.balance_demands(&topo);
    Scenario {
        name: format!("dead-end-{variant}"),
        trace: HydraulicTrace::repeated(&topo, 3600.0, step, 24),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.0, 0.0, 0.0),
        reactions: ReactionConstants {
            mutual_rate: 1e-5,
            reactant_yield: 1.0,
            thm_yield: 0.05,
        },
        plan: explicit(300.0),
        targets: vec![],
    }
}

/// Closed loop through a tank with circulation reversing every six hours; a
/// reservoir hangs off the loop on a stagnant pipe. No demands, no reactions.
pub fn closed_loop() -> Scenario {
    let topo = build(NetworkFile {
        junctions: vec![junction("J1"), junction("J2"), junction("J3")],
        reservoirs: vec![reservoir("R1", 1.0, 0.0, 0.0)],
        tanks: vec![TankSpec {
            id: "T1".into(),
            min_volume: 100.0,
            max_volume: 1000.0,
            initial_volume: 500.0,
            bulk_rate: 0.0,
        }],
        pipes: vec![
            pipe("P0", "R1", "J1", 50.0, 0.2),
            pipe("P1", "J1", "J2", 300.0, 0.2),
            pipe("P2", "J2", "T1", 200.0, 0.2),
            pipe("P3", "T1", "J3", 250.0, 0.2),
            pipe("P4", "J3", "J1", 150.0, 0.2),
        ],
        ..Default::default()
    });
    let steps = (0..24)
        .map(|k| {
            let sign = if (k / 6) % 2 == 0 { 1.0 } else { -1.0 };
            let v = sign * 0.3 * (1.0 + 0.3 * (k as f64).sin());
            let mut step = HydraulicStep::zeros(&topo);
            step.velocities = vec![0.0, v, v, v, v];
            step
        })
        .collect();
    let mut init = SpeciesInitialState::uniform(0.5, 0.2, 0.0);
    for (id, c) in [
        ("P1", 1.0),
        ("P2", 0.5),
        ("P3", 2.0),
        ("P4", 0.2),
        ("T1", 1.5),
        ("J2", 0.7),
    ] {
        init.set(Species::Chlorine, id, InitialValue::Uniform(c));
        init.set(Species::Reactant, id, InitialValue::Uniform(c / 2.0));
        init.set(Species::Thms, id, InitialValue::Uniform(c / 10.0));
    }
    Scenario {
        name: "closed-loop".into(),
        trace: HydraulicTrace::new(3600.0, steps),
        topology: topo,
        initial: init,
        reactions: ReactionConstants::default(),
        plan: explicit(300.0),
        targets: vec![],
    }
}

/// No flow anywhere; nonuniform initial state.
pub fn stagnant() -> Scenario {
    let topo = build(NetworkFile {
        junctions: vec![junction("J1")],
        reservoirs: vec![reservoir("R1", 1.0, 0.0, 0.0)],
        tanks: vec![TankSpec {
            id: "T1".into(),
            min_volume: 10.0,
            max_volume: 100.0,
            initial_volume: 50.0,
            bulk_rate: 0.0,
        }],
        pipes: vec![
            pipe("P1", "R1", "J1", 200.0, 0.2),
            pipe("P2", "J1", "T1", 100.0, 0.2),
        ],
        ..Default::default()
    });
    let mut init = SpeciesInitialState::uniform(0.8, 0.1, 0.02);
    init.set(Species::Chlorine, "P2", InitialValue::Uniform(1.7));
    init.set(Species::Chlorine, "T1", InitialValue::Uniform(0.3));
    init.set(Species::Reactant, "J1", InitialValue::Uniform(0.6));
    Scenario {
        name: "stagnant".into(),
        trace: HydraulicTrace::repeated(&topo, 3600.0, HydraulicStep::zeros(&topo), 6),
        topology: topo,
        initial: init,
        reactions: ReactionConstants::default(),
        plan: explicit(300.0),
        targets: vec![],
    }
}

/// Tree network with 30 junctions, one reservoir and 30 pipes: a ten-junction
/// trunk and four branches. Boosters at the trunk head and mid-trunk; the
/// branch off J8 carries a reactant intrusion of 0.5 mg/L.
pub fn bla_m() -> Scenario {
    let branches: [(usize, std::ops::RangeInclusive<usize>); 4] =
        [(3, 11..=14), (6, 15..=19), (8, 20..=24), (10, 25..=30)];
    let jid = |i: usize| format!("J{i}");
    let mut pipes = vec![pipe("P1", "R1", "J1", 400.0, 0.3)];
    for i in 2..=10 {
        let len = 250.0 + 50.0 * (i % 3) as f64;
        pipes.push(pipe(&format!("P{i}"), &jid(i - 1), &jid(i), len, 0.25));
    }
    let mut dead_ends = Vec::new();
    for (root, range) in branches.iter().cloned() {
        let last = *range.end();
        let mut prev = root;
        for j in range {
            let d = if j == last { 0.08 } else { 0.15 };
            let len = 150.0 + 40.0 * (j % 4) as f64;
            pipes.push(pipe(&format!("P{j}"), &jid(prev), &jid(j), len, d));
            prev = j;
        }
        dead_ends.push(last);
    }
    for p in &mut pipes {
        p.bulk_rate = 5e-5;
        p.wall_rate = 1e-5;
        p.mass_transfer = 1e-5;
    }
    let topo = build(NetworkFile {
        junctions: (1..=30).map(|i| junction(&jid(i))).collect(),
        reservoirs: vec![reservoir("R1", 0.5, 0.0, 0.0)],
        pipes,
        boosters: vec![booster("B1", "J1", 20.0), booster("B2", "J6", 20.0)],
        ..Default::default()
    });
    let base: Vec<f64> = (1..=30)
        .map(|i| {
            if dead_ends.contains(&i) {
                5e-5
            } else {
                4e-4 + 1e-4 * (i % 3) as f64
            }
        })
        .collect();
    let steps = (0..24)
        .map(|k| {
            let demands: Vec<f64> = base.iter().map(|d| d * diurnal(k)).collect();
            // Booster carrier flows: 5 % of what passes through each host.
            let total: f64 = demands.iter().sum();
            let downstream_of_6: f64 = (6..=10).chain(15..=30).map(|i| demands[i - 1]).sum();
            let boosters = vec![0.05 * total, 0.05 * downstream_of_6];
            let mut net = demands.clone();
            net[0] -= boosters[0];
            net[5] -= boosters[1];
            let flows = network_flows(&topo, NodeRef::Reservoir(0), &net, &BTreeMap::new());
            step_from_flows(&topo, &flows, &demands, &boosters)
        })
        .collect();
    let mut init = SpeciesInitialState::uniform(0.5, 0.0, 0.0);
    for j in 20..=24 {
        init.set(Species::Reactant, &jid(j), InitialValue::Uniform(0.5));
        init.set(
            Species::Reactant,
            &format!("P{j}"),
            InitialValue::Uniform(0.5),
        );
    }
    Scenario {
        name: "bla-m".into(),
        trace: HydraulicTrace::new(3600.0, steps),
        topology: topo,
        initial: init,
        reactions: ReactionConstants {
            mutual_rate: 2e-5,
            reactant_yield: 1.0,
            thm_yield: 0.05,
        },
        plan: explicit(300.0),
        targets: vec![
            TargetSpec::new(
                "dead-ends",
                TargetCategory::DeadEnd,
                3.0,
                &["J14", "J19", "J24", "J30"],
            ),
            TargetSpec::new(
                "intrusion",
                TargetCategory::HighContaminant,
                2.0,
                &["J20", "J22", "J24"],
            ),
            TargetSpec::new("thms", TargetCategory::ElevatedThms, 1.0, &["J24"]),
        ],
    }
}

/// Reservoir, two pipes and one booster at the middle junction.
pub fn single_booster() -> Scenario {
    let mut p1 = pipe("P1", "R1", "J1", 600.0, 0.2);
    let mut p2 = pipe("P2", "J1", "J2", 600.0, 0.2);
    p1.bulk_rate = 5e-5;
    p2.bulk_rate = 5e-5;
    let topo = build(NetworkFile {
        junctions: vec![junction("J1"), junction("J2")],
        reservoirs: vec![reservoir("R1", 0.6, 0.0, 0.0)],
        pipes: vec![p1, p2],
        boosters: vec![booster("B1", "J1", 20.0)],
        ..Default::default()
    });
    let mut step = HydraulicStep::zeros(&topo);
    let q = 0.2 * topo.pipes()[0].area();
    step.velocities = vec![0.2, 0.2 * 1.05];
    step.booster_flows = vec![0.05 * q];
    step.balance_demands(&topo);
    Scenario {
        name: "single-booster".into(),
        trace: HydraulicTrace::repeated(&topo, 3600.0, step, 6),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.6, 0.0, 0.0),
        reactions: ReactionConstants::default(),
        plan: explicit(300.0),
        targets: vec![TargetSpec::new(
            "outlet",
            TargetCategory::DeadEnd,
            1.0,
            &["J2"],
        )],
    }
}

/// Line R1 - J1 - J2 - J3 with boosters at J1 and J3 and target J2; the J3
/// booster sits downstream of the target and cannot reach it.
pub fn booster_line() -> Scenario {
    let topo = build(NetworkFile {
        junctions: vec![junction("J1"), junction("J2"), junction("J3")],
        reservoirs: vec![reservoir("R1", 0.5, 0.0, 0.0)],
        pipes: vec![
            pipe("P1", "R1", "J1", 300.0, 0.2),
            pipe("P2", "J1", "J2", 300.0, 0.2),
            pipe("P3", "J2", "J3", 300.0, 0.2),
        ],
        boosters: vec![booster("B1", "J1", 20.0), booster("B2", "J3", 20.0)],
        ..Default::default()
    });
    let a = topo.pipes()[0].area();
    let mut step = HydraulicStep::zeros(&topo);
    step.velocities = vec![0.25, 0.25 * 1.05, 0.125];
    step.booster_flows = vec![0.05 * 0.25 * a, 0.01 * a];
    step.balance_demands(&topo);
    Scenario {
        name: "booster-line".into(),
        trace: HydraulicTrace::repeated(&topo, 3600.0, step, 4),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.5, 0.0, 0.0),
        reactions: ReactionConstants::default(),
        plan: explicit(300.0),
        targets: vec![TargetSpec::new(
            "middle",
            TargetCategory::LowInitialChlorine,
            1.0,
            &["J2"],
        )],
    }
}

/// Two-source network where target J3 is fed either through the boosted
/// junction J1 or directly from the second reservoir, depending on the hour.
/// The `reversed` trace swaps which hours are which.
pub fn fos(reversed: bool) -> Scenario {
    let topo = build(NetworkFile {
        junctions: vec![junction("J1"), junction("J2"), junction("J3")],
        reservoirs: vec![
            reservoir("R1", 0.5, 0.0, 0.0),
            reservoir("R2", 0.5, 0.0, 0.0),
        ],
        pipes: vec![
            pipe("P1", "R1", "J1", 200.0, 0.2),
            pipe("P2", "J1", "J2", 200.0, 0.2),
            pipe("P3", "J2", "J3", 200.0, 0.2),
            pipe("P4", "R2", "J3", 200.0, 0.2),
        ],
        boosters: vec![booster("B1", "J1", 20.0)],
        ..Default::default()
    });
    let a = topo.pipes()[0].area();
    let steps = (0..8)
        .map(|k| {
            let through_booster = ((k / 2) % 2 == 0) != reversed;
            let mut step = HydraulicStep::zeros(&topo);
            step.velocities = if through_booster {
                vec![0.3, 0.3, 0.3, 0.0]
            } else {
                vec![0.3, 0.3, -0.1, 0.3]
            };
            step.booster_flows = vec![0.05 * 0.3 * a];
            step.balance_demands(&topo);
            step
        })
        .collect();
    Scenario {
        name: if reversed { "fos-b" } else { "fos-a" }.into(),
        trace: HydraulicTrace::new(3600.0, steps),
        topology: topo,
        initial: SpeciesInitialState::uniform(0.5, 0.0, 0.0),
        reactions: ReactionConstants::default(),
        plan: explicit(300.0),
        targets: vec![TargetSpec::new(
            "far",
            TargetCategory::LowInitialChlorine,
            1.0,
            &["J3"],
        )],
    }
}

/// Dead-end network for closed-loop control: trunk J1 - J2 - J3, service
/// branch J3 - J4 - J5 ending in a dead end with a 0.5 mg/L reactant
/// intrusion, and a side branch J2 - J6. Boosters at J1 and J3.
pub fn two_booster_dead_end() -> Scenario {
    let mut pipes = vec![
        pipe("P1", "R1", "J1", 300.0, 0.2),
        pipe("P2", "J1", "J2", 400.0, 0.2),
        pipe("P3", "J2", "J3", 300.0, 0.15),
        pipe("P4", "J3", "J4", 200.0, 0.1),
        pipe("P5", "J4", "J5", 150.0, 0.05),
        pipe("P6", "J2", "J6", 300.0, 0.15),
    ];
    for p in &mut pipes {
        p.bulk_rate = 5e-5;
    }
    let topo = build(NetworkFile {
        junctions: (1..=6).map(|i| junction(&format!("J{i}"))).collect(),
        reservoirs: vec![reservoir("R1", 0.4, 0.0, 0.0)],
        pipes,
        boosters: vec![booster("B1", "J1", 20.0), booster("B2", "J3", 20.0)],
        ..Default::default()
    });
    let base = [1.5e-3, 1.5e-3, 1.0e-3, 5e-4, 1e-4, 2e-3];
    let steps = (0..24)
        .map(|k| {
            let demands: Vec<f64> = base.iter().map(|d| d * diurnal(k)).collect();
            let total: f64 = demands.iter().sum();
            let below_3: f64 = demands[2] + demands[3] + demands[4];
            let boosters = vec![0.05 * total, 0.05 * below_3];
            let mut net = demands.clone();
            net[0] -= boosters[0];
            net[2] -= boosters[1];
            let flows = network_flows(&topo, NodeRef::Reservoir(0), &net, &BTreeMap::new());
            step_from_flows(&topo, &flows, &demands, &boosters)
        })
        .collect();
    let mut init = SpeciesInitialState::uniform(1.0, 0.0, 0.0);
    for id in ["P5", "J5"] {
        init.set(Species::Reactant, id, InitialValue::Uniform(0.5));
    }
    Scenario {
        name: "two-booster-dead-end".into(),
        trace: HydraulicTrace::new(3600.0, steps),
        topology: topo,
        initial: init,
        reactions: ReactionConstants {
            mutual_rate: 2e-5,
            reactant_yield: 1.0,
            thm_yield: 0.05,
        },
        plan: explicit(300.0),
        targets: vec![
            TargetSpec::new("dead-end", TargetCategory::DeadEnd, 3.0, &["J5"]),
            TargetSpec::new(
                "intrusion",
                TargetCategory::HighContaminant,
                2.0,
                &["J4", "J5"],
            ),
            TargetSpec::new("thms", TargetCategory::ElevatedThms, 1.0, &["J5"]),
        ],
    }
}

/// Looped `side × side` grid fed from one corner, with a tank on the far
/// corner, circulation on every cross link, and small laminar-ish service
/// pipes where dispersion matters. The largest built-in scenario.
pub fn grid(side: usize) -> Scenario {
    let id = |r: usize, c: usize| format!("J{r}_{c}");
    let mut junctions = Vec::new();
    let mut pipes = vec![pipe("PS", "R1", &id(0, 0), 300.0, 0.4)];
    for r in 0..side {
        for c in 0..side {
            junctions.push(junction(&id(r, c)));
            if c + 1 < side {
                pipes.push(pipe(
                    &format!("PH{r}_{c}"),
                    &id(r, c),
                    &id(r, c + 1),
                    200.0,
                    0.2,
                ));
            }
            if r + 1 < side {
                pipes.push(pipe(
                    &format!("PV{r}_{c}"),
                    &id(r, c),
                    &id(r + 1, c),
                    200.0,
                    0.2,
                ));
            }
        }
    }
    // Service lines hanging off the last row, each to its own dead end.
    for c in 0..side {
        let end = format!("S{c}");
        junctions.push(junction(&end));
        let mut p = pipe(&format!("PD{c}"), &id(side - 1, c), &end, 60.0, 0.02);
        p.diffusivity = 1e-9;
        pipes.push(p);
    }
    pipes.push(pipe("PT", &id(side - 1, side - 1), "T1", 150.0, 0.2));
    for p in &mut pipes {
        p.bulk_rate = 3e-5;
    }
    let topo = build(NetworkFile {
        junctions,
        reservoirs: vec![reservoir("R1", 1.0, 0.2, 0.0)],
        tanks: vec![TankSpec {
            id: "T1".into(),
            min_volume: 200.0,
            max_volume: 5000.0,
            initial_volume: 2000.0,
            bulk_rate: 1e-5,
        }],
        pipes,
        boosters: vec![booster("B1", &id(0, 0), 20.0)],
        ..Default::default()
    });
    let nj = topo.junctions().len();
    let tank_pipe = topo.pipes().len() - 1;
    let steps: Vec<HydraulicStep> = (0..24)
        .map(|k| {
            let m = diurnal(k);
            let demands: Vec<f64> = (0..nj)
                .map(|j| {
                    if topo.junctions()[j].id.starts_with('S') {
                        2e-6 * m
                    } else {
                        3e-4 * m
                    }
                })
                .collect();
            // Cross links carry a small circulation, and the tank fills by
            // day and drains at night (treated as a chord).
            let mut chords = BTreeMap::new();
            for (p, spec) in topo.pipes().iter().enumerate() {
                if spec.id.starts_with("PV") && !spec.id.ends_with("_0") {
                    chords.insert(p, 2e-4 * (k as f64 * 0.7 + p as f64).cos());
                }
            }
            chords.insert(tank_pipe, 4e-3 * (2.0 * PI * k as f64 / 24.0).sin());
            let mut net = demands.clone();
            let boosters = vec![0.02 * demands.iter().sum::<f64>()];
            net[topo.node("J0_0").map(|n| topo.node_ordinal(n)).unwrap_or(0)] -= boosters[0];
            let flows = network_flows(&topo, NodeRef::Reservoir(0), &net, &chords);
            step_from_flows(&topo, &flows, &demands, &boosters)
        })
        .collect();
    let trace = {
        let mut t = HydraulicTrace::new(3600.0, steps);
        let mut v = topo.tanks()[0].initial_volume;
        for k in 0..t.steps.len() {
            t.steps[k].tank_volumes = vec![v];
            v += t.steps[k].tank_net_inflow(&topo)[0] * 3600.0;
        }
        t
    };
    Scenario {
        name: "grid".into(),
        trace,
        topology: topo,
        initial: SpeciesInitialState::uniform(0.8, 0.2, 0.0),
        reactions: ReactionConstants {
            mutual_rate: 1e-5,
            reactant_yield: 1.0,
            thm_yield: 0.05,
        },
        plan: explicit(300.0),
        targets: vec![TargetSpec::new(
            "far",
            TargetCategory::DeadEnd,
            1.0,
            &["S0"],
        )],
    }
}

/// Writes the scenario's network, hydraulics and initial state to `dir` as
/// `network.toml`, `hydraulics.csv` and `initial.toml`, plus `targets.toml`.
pub fn write_scenario(scenario: &Scenario, dir: &std::path::Path) -> Result<()> {
    use crate::error::Error;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("network.toml", scenario.topology.to_toml()),
        ("hydraulics.csv", scenario.trace.to_csv(&scenario.topology)),
        ("initial.toml", scenario.initial.to_toml()),
        (
            "targets.toml",
            crate::control::targets_to_toml(&scenario.targets),
        ),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
