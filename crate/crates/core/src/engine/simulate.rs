use std::fmt::Write as _;

use nalgebra::DVector;

use crate::engine::assembly::{assemble_system, tank_volumes, AssemblyMode, SystemMatrices};
use crate::engine::layout::StateLayout;
use crate::engine::reaction::{reaction_terms, OperatingPoint, ReactionParams};
use crate::error::{Error, Result};
use crate::linalg::spmv_add;
use crate::network::{HydraulicTrace, NetworkTopology};
use crate::transport::{DiscretizationPlan, Scheme, TransportMode};

/// Values below this are counted when clamped to zero.
pub const CLAMP_REPORT_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub transport: TransportMode,
    /// step the model linearized about the state at the start of every
    /// hydraulic step instead of the nonlinear one
    pub linearized: bool,
    /// clamp negative concentrations to zero after every step
    pub clamp_negative: bool,
    /// refresh the operating point every this many water-quality steps
    /// instead of once per hydraulic step
    pub refresh_every: Option<usize>,
    /// keep every n-th state (and always the last) in the trajectory
    pub record_every: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            transport: TransportMode::Auto,
            linearized: false,
            clamp_negative: true,
            refresh_every: None,
            record_every: 1,
        }
    }
}

/// Booster inputs over a run.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSchedule {
    Constant(DVector<f64>),
    /// one input vector per hydraulic step
    PerHydraulicStep(Vec<DVector<f64>>),
    /// one input vector per water-quality step
    PerStep(Vec<DVector<f64>>),
}

impl InputSchedule {
    pub fn zeros(boosters: usize) -> Self {
        InputSchedule::Constant(DVector::zeros(boosters))
    }

    /// Input during water-quality step `index` (hydraulic step `k`).
    pub fn at(&self, k: usize, index: usize) -> Result<&DVector<f64>> {
        let found = match self {
            InputSchedule::Constant(u) => Some(u),
            InputSchedule::PerHydraulicStep(v) => v.get(k),
            InputSchedule::PerStep(v) => v.get(index),
        };
        found.ok_or_else(|| {
            Error::Dimension(format!("input schedule has no entry for step {index}"))
        })
    }

    fn check(&self, boosters: usize) -> Result<()> {
        let all: Vec<&DVector<f64>> = match self {
            InputSchedule::Constant(u) => vec![u],
            InputSchedule::PerHydraulicStep(v) | InputSchedule::PerStep(v) => v.iter().collect(),
        };
        for u in all {
            if u.len() != boosters {
                return Err(Error::Dimension(format!(
                    "input has {} entries, network has {boosters} boosters",
                    u.len()
                )));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("booster input is not finite".into()));
            }
        }
        Ok(())
    }
}

/// States over a run, one per water-quality step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// input applied over the step ending at each recorded state; one shorter
    /// than `states`
    pub inputs: Vec<DVector<f64>>,
    pub labels: Vec<String>,
    /// scheme per pipe, per hydraulic step
    pub schemes: Vec<Vec<Scheme>>,
    /// number of values below `-CLAMP_REPORT_THRESHOLD` set to zero
    pub clamped: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    /// Column index of a state label such as `chlorine:J1`.
    pub fn column(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn series(&self, label: &str) -> Option<Vec<f64>> {
        let i = self.column(label)?;
        Some(self.states.iter().map(|x| x[i]).collect())
    }

    /// CSV with a `time` column and one column per state, every `stride`-th row
    /// (the final row is always written).
    pub fn to_csv(&self, stride: usize) -> String {
        let stride = stride.max(1);
        let mut out = String::from("time");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        let last = self.states.len() - 1;
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            if i % stride != 0 && i != last {
                continue;
            }
            let _ = write!(out, "{t}");
            for v in x.iter() {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    /// Scheme of every pipe at every hydraulic step, as CSV.
    pub fn scheme_csv(&self, topo: &NetworkTopology) -> String {
        let mut out = String::from("hydraulic_step,pipe,scheme\n");
        for (k, row) in self.schemes.iter().enumerate() {
            for (p, s) in row.iter().enumerate() {
                let _ = writeln!(out, "{k},{},{}", topo.pipes()[p].id, s.tag());
            }
        }
        out
    }
}

fn solve(mats: &SystemMatrices, mut rhs: DVector<f64>) -> Result<DVector<f64>> {
    mats.solve_e(&mut rhs)?;
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "state became non-finite at hydraulic step {}",
            mats.hydraulic_step
        )));
    }
    Ok(rhs)
}

fn check_sizes(mats: &SystemMatrices, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != mats.dim() || u.len() != mats.inputs() {
        return Err(Error::Dimension(format!(
            "state/input of size {}/{} for a system of size {}/{}",
            x.len(),
            u.len(),
            mats.dim(),
            mats.inputs()
        )));
    }
    Ok(())
}

/// One step of `E x' = A x + B u + f(x)` with the full nonlinear reaction.
/// Uses the per-location operators, so it also works on linearized matrices.
pub fn step_nonlinear(
    mats: &SystemMatrices,
    params: &ReactionParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_sizes(mats, x, u)?;
    let local = &mats.local;
    let n = mats.locations();
    let mut rates = vec![0.0; 3 * n];
    for (l, k) in local.rates.iter().enumerate() {
        if let Some(k) = k {
            let r = reaction_terms(x[l], x[n + l], *k, params);
            for s in 0..3 {
                rates[s * n + l] = r[s];
            }
        }
    }
    let mut rhs = DVector::zeros(3 * n);
    for s in 0..3 {
        let out = &mut rhs.as_mut_slice()[s * n..(s + 1) * n];
        spmv_add(&local.a, &x.as_slice()[s * n..(s + 1) * n], out);
        spmv_add(&local.f, &rates[s * n..(s + 1) * n], out);
    }
    for (i, row) in local.b.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            rhs[local.booster_species[j].index() * n + i] += v * u[j];
        }
    }
    solve(mats, rhs)
}

/// One step of the linearized model `E x' = Ã x + B u + Φ`.
pub fn step_linear(
    mats: &SystemMatrices,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if !mats.linearized {
        return Err(Error::Validation(
            "step_linear needs matrices assembled in linearized mode".into(),
        ));
    }
    check_sizes(mats, x, u)?;
    let mut rhs = mats.phi.clone();
    spmv_add(&mats.a, x.as_slice(), rhs.as_mut_slice());
    spmv_add(&mats.b, u.as_slice(), rhs.as_mut_slice());
    solve(mats, rhs)
}

pub(crate) fn clamp(x: &mut DVector<f64>) -> usize {
    let mut count = 0;
    for v in x.iter_mut() {
        if *v < 0.0 {
            if *v < -CLAMP_REPORT_THRESHOLD {
                count += 1;
            }
            *v = 0.0;
        }
    }
    count
}

fn warn_bounds(topo: &NetworkTopology, u: &DVector<f64>, warned: &mut [bool]) {
    for (b, spec) in topo.boosters().iter().enumerate() {
        if !warned[b] && (u[b] < 0.0 || u[b] > spec.max_concentration) {
            log::warn!(
                "booster '{}' input {} outside [0, {}]",
                spec.id,
                u[b],
                spec.max_concentration
            );
            warned[b] = true;
        }
    }
}

/// Runs the whole trace from `x0`.
pub fn simulate(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    plan: &DiscretizationPlan,
    params: &ReactionParams,
    x0: &DVector<f64>,
    inputs: &InputSchedule,
    options: &EngineOptions,
) -> Result<Trajectory> {
    simulate_from(
        topo,
        trace,
        plan,
        params,
        x0,
        inputs,
        options,
        0..trace.len(),
    )
}

/// Runs hydraulic steps `steps` from `x0`; times are absolute.
#[allow(clippy::too_many_arguments)]
pub fn simulate_from(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    plan: &DiscretizationPlan,
    params: &ReactionParams,
    x0: &DVector<f64>,
    inputs: &InputSchedule,
    options: &EngineOptions,
    steps: std::ops::Range<usize>,
) -> Result<Trajectory> {
    let layout = StateLayout::new(topo, plan);
    if x0.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, layout needs {}",
            x0.len(),
            layout.dim()
        )));
    }
    if steps.end > trace.len() {
        return Err(Error::Dimension("step range beyond the trace".into()));
    }
    inputs.check(topo.boosters().len())?;
    let stale = plan.stability_violations(options.transport);
    if plan.family == crate::transport::SchemeFamily::Explicit && !stale.is_empty() {
        return Err(Error::Planning(format!(
            "plan is not stable under the requested transport mode: {}",
            stale.join("; ")
        )));
    }

    let mut traj = Trajectory {
        times: vec![steps.start as f64 * trace.step_length],
        states: vec![x0.clone()],
        inputs: Vec::new(),
        labels: layout.state_labels(topo),
        schemes: Vec::new(),
        clamped: 0,
    };
    let mut warned = vec![false; topo.boosters().len()];
    let mut x = x0.clone();
    let stride = options.record_every.max(1);
    let (first, end) = (steps.start * plan.substeps, steps.end);
    for k in steps {
        let mut mode = AssemblyMode::Nonlinear;
        let mut mats: Option<SystemMatrices> = None;
        for j in 0..plan.substeps {
            let index = k * plan.substeps + j;
            let refresh = options.linearized
                && (j == 0
                    || options
                        .refresh_every
                        .is_some_and(|m| m > 0 && index.is_multiple_of(m)));
            if refresh {
                let t = k as f64 * trace.step_length + j as f64 * plan.dt;
                mode = AssemblyMode::Linearized(OperatingPoint::from_state(&layout, &x, t));
            }
            let rebuild = refresh
                || match &mats {
                    None => true,
                    Some(m) => !m.whole_step,
                };
            if rebuild {
                mats = Some(assemble_system(
                    topo,
                    trace,
                    plan,
                    params,
                    k,
                    j,
                    options.transport,
                    &mode,
                )?);
            }
            let m = mats.as_ref().expect("assembled above");
            if j == 0 {
                traj.schemes.push(m.schemes.clone());
            }
            let u = inputs.at(k, index)?;
            warn_bounds(topo, u, &mut warned);
            x = if options.linearized {
                step_linear(m, &x, u)?
            } else {
                step_nonlinear(m, params, &x, u)?
            };
            if options.clamp_negative {
                traj.clamped += clamp(&mut x);
            }
            let last = k + 1 == end && j + 1 == plan.substeps;
            if (index + 1 - first).is_multiple_of(stride) || last {
                traj.times
                    .push(k as f64 * trace.step_length + (j + 1) as f64 * plan.dt);
                traj.states.push(x.clone());
                traj.inputs.push(u.clone());
            }
        }
    }
    if traj.clamped > 0 {
        log::warn!("{} negative concentrations clamped to zero", traj.clamped);
    }
    Ok(traj)
}

/// Total mass (mg, with volumes in m³ and concentrations in mg/L scaled by
/// 1000) of one species held in pipes and tanks at time index `j` of step `k`.
pub fn stored_mass(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    layout: &StateLayout,
    x: &DVector<f64>,
    species: crate::network::Species,
    k: usize,
    elapsed: f64,
) -> f64 {
    let volumes = layout.location_volumes(topo, &tank_volumes(topo, trace, k, elapsed));
    let base = species.index() * layout.locations();
    volumes
        .iter()
        .enumerate()
        .map(|(l, v)| 1000.0 * v * x[base + l])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::transport::plan_grid;

    #[test]
    fn clamp_counts_only_real_negatives() {
        let mut x = DVector::from_vec(vec![1.0, -1e-12, -0.5, 0.0]);
        assert_eq!(clamp(&mut x), 1);
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn schedules_index_by_step() {
        let a = DVector::from_element(1, 1.0);
        let b = DVector::from_element(1, 2.0);
        let per_hour = InputSchedule::PerHydraulicStep(vec![a.clone(), b.clone()]);
        assert_eq!(per_hour.at(1, 99).unwrap(), &b);
        let per_step = InputSchedule::PerStep(vec![a.clone(), b.clone()]);
        assert_eq!(per_step.at(0, 1).unwrap(), &b);
        assert!(per_step.at(0, 2).is_err());
        assert!(InputSchedule::Constant(DVector::zeros(2)).check(1).is_err());
    }

    #[test]
    fn trajectory_has_one_state_per_boundary() {
        let s = fixtures::single_booster();
        let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
        let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
        let layout = StateLayout::new(&s.topology, &plan);
        let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
        let t = simulate_from(
            &s.topology,
            &s.trace,
            &plan,
            &params,
            &x0,
            &InputSchedule::zeros(1),
            &EngineOptions::default(),
            1..2,
        )
        .unwrap();
        assert_eq!(t.states.len(), plan.substeps + 1);
        assert_eq!(t.inputs.len(), plan.substeps);
        assert_eq!(t.times[0], s.trace.step_length);
        let csv = t.to_csv(plan.substeps);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn recording_stride_keeps_boundaries_and_the_end() {
        let s = fixtures::single_booster();
        let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
        let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
        let layout = StateLayout::new(&s.topology, &plan);
        let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
        let u = InputSchedule::Constant(DVector::from_element(1, 1.0));
        let full = simulate(
            &s.topology,
            &s.trace,
            &plan,
            &params,
            &x0,
            &u,
            &EngineOptions::default(),
        )
        .unwrap();
        let stride = 5;
        let opts = EngineOptions {
            record_every: stride,
            ..Default::default()
        };
        let thin = simulate(&s.topology, &s.trace, &plan, &params, &x0, &u, &opts).unwrap();
        let n = full.states.len() - 1;
        assert_eq!(
            thin.states.len(),
            1 + n / stride + usize::from(!n.is_multiple_of(stride))
        );
        assert_eq!(thin.states[1], full.states[stride]);
        assert_eq!(thin.final_state(), full.final_state());
        assert_eq!(thin.inputs.len() + 1, thin.states.len());
    }

    #[test]
    fn wrong_state_length_is_rejected() {
        let s = fixtures::single_booster();
        let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
        let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
        let r = simulate(
            &s.topology,
            &s.trace,
            &plan,
            &params,
            &DVector::zeros(1),
            &InputSchedule::zeros(1),
            &EngineOptions::default(),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
