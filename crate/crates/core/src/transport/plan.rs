use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{HydraulicTrace, NetworkTopology};
use crate::transport::regime::{FlowRegime, FlowRegimeSample, PhysicalConstants};
use crate::transport::stencil::{Scheme, SchemeFamily};

/// Tolerance used when auditing stability bounds of a finished plan.
pub const STABILITY_TOLERANCE: f64 = 1e-9;

/// Which pipes carry the dispersion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// advection-reaction only
    Ar,
    /// dispersion on every flowing pipe
    Adr,
    /// dispersion where Pe ≤ Pe_th, re-evaluated every hydraulic step
    Auto,
}

impl TransportMode {
    pub fn uses_dispersion(self, sample: &FlowRegimeSample, constants: &PhysicalConstants) -> bool {
        let flowing = sample.flowing(constants) && sample.dispersion > 0.0;
        match self {
            TransportMode::Ar => false,
            TransportMode::Adr => flowing,
            TransportMode::Auto => flowing && sample.dispersion_active,
        }
    }
}

impl FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ar" => Ok(TransportMode::Ar),
            "adr" => Ok(TransportMode::Adr),
            "auto" => Ok(TransportMode::Auto),
            other => Err(Error::Validation(format!(
                "unknown transport mode '{other}'"
            ))),
        }
    }
}

/// Segment counts for the implicit family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SegmentationMode {
    /// same count for every pipe
    Fixed { segments: usize },
    /// s = max(1, round(L / target_length))
    LengthScaled { target_length: f64 },
}

impl Default for SegmentationMode {
    fn default() -> Self {
        SegmentationMode::LengthScaled {
            target_length: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    pub family: SchemeFamily,
    pub peclet_threshold: f64,
    /// upper bound on the water-quality step, s
    pub dt_cap: f64,
    /// smallest acceptable water-quality step, s
    pub dt_min: f64,
    pub segmentation: SegmentationMode,
    pub transport: TransportMode,
    pub constants: PhysicalConstants,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            family: SchemeFamily::Explicit,
            peclet_threshold: 1000.0,
            dt_cap: 300.0,
            dt_min: 1.0,
            segmentation: SegmentationMode::default(),
            transport: TransportMode::Auto,
            constants: PhysicalConstants::default(),
        }
    }
}

/// Water-quality time step and per-pipe grids for a whole trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationPlan {
    pub dt: f64,
    /// water-quality steps per hydraulic step
    pub substeps: usize,
    pub hydraulic_step: f64,
    pub family: SchemeFamily,
    pub peclet_threshold: f64,
    pub transport: TransportMode,
    pub constants: PhysicalConstants,
    pub segments: Vec<usize>,
    pub segment_length: Vec<f64>,
    /// `samples[step][pipe]`
    pub samples: Vec<Vec<FlowRegimeSample>>,
    pub dt_binding: String,
    pub pipe_binding: Vec<String>,
}

impl DiscretizationPlan {
    pub fn total_steps(&self) -> usize {
        self.substeps * self.samples.len()
    }

    pub fn sample(&self, step: usize, pipe: usize) -> &FlowRegimeSample {
        &self.samples[step][pipe]
    }

    pub fn flowing(&self, step: usize, pipe: usize) -> bool {
        self.samples[step][pipe].flowing(&self.constants)
    }

    /// Dispersion flag under `mode` (which may differ from the planning mode).
    pub fn dispersion(&self, step: usize, pipe: usize, mode: TransportMode) -> bool {
        mode.uses_dispersion(&self.samples[step][pipe], &self.constants)
    }

    pub fn courant(&self, step: usize, pipe: usize) -> f64 {
        self.samples[step][pipe].speed * self.dt / self.segment_length[pipe]
    }

    pub fn dispersion_number(&self, step: usize, pipe: usize) -> f64 {
        let dx = self.segment_length[pipe];
        self.samples[step][pipe].dispersion * self.dt / (dx * dx)
    }

    pub fn scheme(&self, step: usize, pipe: usize, mode: TransportMode) -> Scheme {
        if !self.flowing(step, pipe) {
            Scheme::Reaction
        } else {
            Scheme::select(self.family, self.dispersion(step, pipe, mode))
        }
    }

    /// Stability violations of an explicit plan when run under `mode`. Always
    /// empty for the implicit family.
    pub fn stability_violations(&self, mode: TransportMode) -> Vec<String> {
        let mut out = Vec::new();
        if self.family == SchemeFamily::Implicit {
            return out;
        }
        let tol = STABILITY_TOLERANCE;
        for (k, row) in self.samples.iter().enumerate() {
            for (p, s) in row.iter().enumerate() {
                if !s.flowing(&self.constants) {
                    continue;
                }
                let lam = self.courant(k, p);
                if !(lam > 0.0 && lam <= 1.0 + tol) {
                    out.push(format!(
                        "step {k} pipe '{}': Courant {lam} outside (0, 1]",
                        s.pipe
                    ));
                }
                if self.dispersion(k, p, mode) {
                    let alpha = self.dispersion_number(k, p);
                    if lam * lam > 2.0 * alpha * (1.0 + tol) {
                        out.push(format!(
                            "step {k} pipe '{}': Courant^2 {} exceeds 2*alpha {}",
                            s.pipe,
                            lam * lam,
                            2.0 * alpha
                        ));
                    }
                    if 2.0 * alpha > 1.0 + tol {
                        out.push(format!(
                            "step {k} pipe '{}': 2*alpha {} exceeds 1",
                            s.pipe,
                            2.0 * alpha
                        ));
                    }
                    if lam * lam + 2.0 * alpha > 1.0 + tol {
                        out.push(format!(
                            "step {k} pipe '{}': Courant^2 + 2*alpha {} exceeds 1",
                            s.pipe,
                            lam * lam + 2.0 * alpha
                        ));
                    }
                    let grid_peclet = s.speed * self.segment_length[p] / s.dispersion;
                    if grid_peclet > 2.0 + tol {
                        out.push(format!(
                            "step {k} pipe '{}': grid Peclet {grid_peclet} exceeds 2",
                            s.pipe
                        ));
                    }
                }
            }
        }
        out
    }

    /// Structured text summary: step size, per-pipe grids with their binding
    /// constraint and per-step regime and Peclet histograms.
    pub fn report(&self) -> String {
        let pipes = self
            .samples
            .first()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(p, s)| PipeReport {
                        id: s.pipe.clone(),
                        segments: self.segments[p],
                        segment_length: self.segment_length[p],
                        binding: self.pipe_binding[p].clone(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let steps = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let mut r = StepReport {
                    step: k,
                    ..Default::default()
                };
                for s in row {
                    if !s.flowing(&self.constants) {
                        r.stagnant += 1;
                    } else if s.regime == FlowRegime::Laminar {
                        r.laminar += 1;
                    } else {
                        r.turbulent += 1;
                    }
                    if self.transport.uses_dispersion(s, &self.constants) {
                        r.dispersion_active += 1;
                    }
                    *r.peclet_histogram.entry(peclet_bin(s.peclet)).or_default() += 1;
                }
                r
            })
            .collect();
        let report = PlanReport {
            dt: self.dt,
            substeps: self.substeps,
            hydraulic_step: self.hydraulic_step,
            family: self.family,
            transport: self.transport,
            peclet_threshold: self.peclet_threshold,
            dt_binding: self.dt_binding.clone(),
            pipes,
            steps,
        };
        toml::to_string_pretty(&report).expect("plan report serializes")
    }
}

fn peclet_bin(pe: f64) -> String {
    if !pe.is_finite() {
        return "inf".into();
    }
    let e = if pe < 1.0 {
        0
    } else {
        pe.log10().floor() as i32 + 1
    };
    format!("le_1e{:02}", e.min(99))
}

#[derive(Serialize)]
struct PlanReport {
    dt: f64,
    substeps: usize,
    hydraulic_step: f64,
    family: SchemeFamily,
    transport: TransportMode,
    peclet_threshold: f64,
    dt_binding: String,
    pipes: Vec<PipeReport>,
    steps: Vec<StepReport>,
}

#[derive(Serialize)]
struct PipeReport {
    id: String,
    segments: usize,
    segment_length: f64,
    binding: String,
}

#[derive(Serialize, Default)]
struct StepReport {
    step: usize,
    laminar: usize,
    turbulent: usize,
    stagnant: usize,
    dispersion_active: usize,
    peclet_histogram: BTreeMap<String, usize>,
}

/// Chooses the water-quality step and per-pipe grids for `trace`.
///
/// The step is the largest divisor Δt_H/n not above the cap and the
/// dispersion limit 2D/v² of any dispersion-carrying pipe and step. For the
/// explicit family each pipe gets the coarsest grid meeting Courant ≤ 1 and
/// λ² + 2α ≤ 1 on every step; if that grid violates the grid-Peclet bound vΔx/D ≤ 2
/// somewhere, n is increased until it does not.
pub fn plan_grid(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    options: &PlanOptions,
) -> Result<DiscretizationPlan> {
    trace.check_dimensions(topo)?;
    check_options(options)?;
    let consts = &options.constants;
    let mode = options.transport;
    let explicit = options.family == SchemeFamily::Explicit;

    let samples: Vec<Vec<FlowRegimeSample>> = trace
        .steps
        .iter()
        .enumerate()
        .map(|(k, step)| {
            topo.pipes()
                .iter()
                .zip(&step.velocities)
                .map(|(pipe, &v)| {
                    FlowRegimeSample::evaluate(pipe, k, v, options.peclet_threshold, consts)
                })
                .collect()
        })
        .collect();

    // Largest admissible step before divisibility.
    let mut limit = options.dt_cap;
    let mut binding = format!("configured cap {} s", options.dt_cap);
    let mut tighten = |value: f64, why: String| {
        if value < limit {
            limit = value;
            binding = why;
        }
    };
    for row in &samples {
        for (p, s) in row.iter().enumerate() {
            if !s.flowing(consts) {
                continue;
            }
            let pipe = &topo.pipes()[p];
            let active = mode.uses_dispersion(s, consts);
            if active {
                tighten(
                    2.0 * s.dispersion / (s.speed * s.speed),
                    format!("pipe '{}' step {}: dispersion limit 2D/v^2", s.pipe, s.step),
                );
            }
            if explicit {
                tighten(
                    pipe.length / s.speed,
                    format!(
                        "pipe '{}' step {}: Courant limit on a single segment",
                        s.pipe, s.step
                    ),
                );
                if active {
                    let (d, v, l) = (s.dispersion, s.speed, pipe.length);
                    tighten(
                        ((d * d + v * v * l * l).sqrt() - d) / (v * v),
                        format!(
                            "pipe '{}' step {}: dispersion number on a single segment",
                            s.pipe, s.step
                        ),
                    );
                }
            }
        }
    }
    if explicit {
        for (k, step) in trace.steps.iter().enumerate() {
            let after = trace.volumes_after(topo, k);
            let outflow = tank_outflows(topo, step);
            for (t, tank) in topo.tanks().iter().enumerate() {
                if outflow[t] > 0.0 {
                    let v = step.tank_volumes[t].min(after[t]);
                    tighten(
                        v / outflow[t],
                        format!(
                            "tank '{}' step {k}: outflow must not exceed stored volume",
                            tank.id
                        ),
                    );
                }
            }
        }
    }

    let h = trace.step_length;
    let mut n = ((h / limit) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    loop {
        let dt = h / n as f64;
        if dt < options.dt_min {
            return Err(Error::Planning(format!(
                "no feasible water-quality step: {binding} requires dt <= {limit:.6} s \
                 (tried {dt:.6} s), below the minimum of {} s",
                options.dt_min
            )));
        }
        match grids(topo, &samples, dt, options) {
            Ok((segments, segment_length, pipe_binding)) => {
                let plan = DiscretizationPlan {
                    dt,
                    substeps: n,
                    hydraulic_step: h,
                    family: options.family,
                    peclet_threshold: options.peclet_threshold,
                    transport: mode,
                    constants: *consts,
                    segments,
                    segment_length,
                    samples,
                    dt_binding: binding,
                    pipe_binding,
                };
                if !explicit {
                    for (k, row) in plan.samples.iter().enumerate() {
                        for (p, sample) in row.iter().enumerate() {
                            let lam = plan.courant(k, p);
                            if lam > 5.0 {
                                log::warn!(
                                    "step {k} pipe '{}': implicit Courant number {lam:.2} above 5",
                                    sample.pipe
                                );
                            }
                        }
                    }
                }
                return Ok(plan);
            }
            Err(why) => {
                binding = why;
                n += 1;
            }
        }
    }
}

type Grids = (Vec<usize>, Vec<f64>, Vec<String>);

fn grids(
    topo: &NetworkTopology,
    samples: &[Vec<FlowRegimeSample>],
    dt: f64,
    options: &PlanOptions,
) -> std::result::Result<Grids, String> {
    let consts = &options.constants;
    let np = topo.pipes().len();
    let mut segments = Vec::with_capacity(np);
    let mut lengths = Vec::with_capacity(np);
    let mut bindings = Vec::with_capacity(np);
    for (p, pipe) in topo.pipes().iter().enumerate() {
        let l = pipe.length;
        if options.family == SchemeFamily::Implicit {
            let (s, why) = match options.segmentation {
                SegmentationMode::Fixed { segments } => {
                    (segments, format!("fixed count {segments}"))
                }
                SegmentationMode::LengthScaled { target_length } => (
                    ((l / target_length).round() as usize).max(1),
                    format!("target length {target_length} m"),
                ),
            };
            segments.push(s);
            lengths.push(l / s as f64);
            bindings.push(why);
            continue;
        }
        // Explicit: smallest admissible segment and largest allowed one.
        let mut lo = 0.0f64;
        let mut lo_why = String::from("no flow");
        let mut hi = f64::INFINITY;
        let mut hi_why = String::new();
        for row in samples {
            let s = &row[p];
            if !s.flowing(consts) {
                continue;
            }
            let (need, why) = if options.transport.uses_dispersion(s, consts) {
                let bound = 2.0 * s.dispersion / s.speed;
                if bound < hi {
                    hi = bound;
                    hi_why = format!("step {}: grid Peclet", s.step);
                }
                // α + λ²/2 ≤ ½ keeps the combined Lax-Wendroff/diffusion stencil stable
                (
                    (2.0 * s.dispersion * dt + (s.speed * dt).powi(2)).sqrt(),
                    format!("step {}: dispersion number", s.step),
                )
            } else {
                (s.speed * dt, format!("step {}: Courant", s.step))
            };
            if need > lo {
                lo = need;
                lo_why = why;
            }
        }
        let count = if lo > 0.0 {
            ((l / lo) * (1.0 + 1e-12)).floor().max(1.0) as usize
        } else {
            1
        };
        let dx = l / count as f64;
        if dx > hi * (1.0 + STABILITY_TOLERANCE) {
            return Err(format!(
                "pipe '{}' {hi_why}: segment {dx:.4} m exceeds {hi:.4} m",
                pipe.id
            ));
        }
        segments.push(count);
        lengths.push(dx);
        bindings.push(lo_why);
    }
    Ok((segments, lengths, bindings))
}

/// Total flow leaving each tank through links, m³/s.
fn tank_outflows(topo: &NetworkTopology, step: &crate::network::HydraulicStep) -> Vec<f64> {
    use crate::network::NodeRef;
    let mut out = vec![0.0; topo.tanks().len()];
    for link in topo.all_links() {
        let q = step.link_flow(topo, link);
        let (a, b) = topo.link_ends_of(link);
        let src = if q > 0.0 { a } else { b };
        if let NodeRef::Tank(t) = src {
            out[t] += q.abs();
        }
    }
    out
}

fn check_options(o: &PlanOptions) -> Result<()> {
    let bad = |what: &str| Err(Error::Validation(format!("plan option {what}")));
    if !(o.dt_cap > 0.0) {
        return bad("dt_cap must be positive");
    }
    if !(o.dt_min > 0.0) {
        return bad("dt_min must be positive");
    }
    if !(o.peclet_threshold >= 0.0) {
        return bad("peclet_threshold must be nonnegative");
    }
    match o.segmentation {
        SegmentationMode::Fixed { segments: 0 } => bad("fixed segment count must be at least 1"),
        SegmentationMode::LengthScaled { target_length } if !(target_length > 0.0) => {
            bad("target segment length must be positive")
        }
        _ => {
            let c = &o.constants;
            if !(c.density > 0.0 && c.viscosity > 0.0 && c.shear_fraction > 0.0) {
                return bad("physical constants must be positive");
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{HydraulicStep, NetworkTopology};

    fn single_pipe(length: f64, diameter: f64) -> NetworkTopology {
        NetworkTopology::from_toml(
            &format!(
                r#"
[[reservoirs]]
id = "R1"
[[junctions]]
id = "J1"
[[pipes]]
id = "P1"
from = "R1"
to = "J1"
length = {length}
diameter = {diameter}
diffusivity = 1.21e-9
"#
            ),
            "inline",
        )
        .unwrap()
    }

    fn trace(topo: &NetworkTopology, v: f64) -> HydraulicTrace {
        let mut s = HydraulicStep::zeros(topo);
        s.velocities[0] = v;
        s.balance_demands(topo);
        HydraulicTrace::repeated(topo, 3600.0, s, 2)
    }

    #[test]
    fn turbulent_pipe_uses_cap() {
        let topo = single_pipe(1000.0, 0.3);
        let plan = plan_grid(&topo, &trace(&topo, 0.1), &PlanOptions::default()).unwrap();
        assert_eq!(plan.dt, 300.0);
        assert!(plan.dt_binding.contains("cap"));
        assert_eq!(plan.segments[0], 33);
        assert!(plan.stability_violations(TransportMode::Auto).is_empty());
    }

    #[test]
    fn unit_courant_grid() {
        let topo = single_pipe(1000.0, 0.3);
        let opts = PlanOptions {
            dt_cap: 100.0,
            ..Default::default()
        };
        let plan = plan_grid(&topo, &trace(&topo, 0.1), &opts).unwrap();
        assert_eq!(plan.segments[0], 100);
        assert!((plan.courant(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn implicit_fixed_segments() {
        let topo = single_pipe(730.0, 0.3);
        let opts = PlanOptions {
            family: SchemeFamily::Implicit,
            segmentation: SegmentationMode::Fixed { segments: 10 },
            ..Default::default()
        };
        let plan = plan_grid(&topo, &trace(&topo, 0.1), &opts).unwrap();
        assert_eq!(plan.segments, vec![10]);
        assert!((plan.segment_length[0] - 73.0).abs() < 1e-12);
    }

    #[test]
    fn cap_below_minimum_fails_with_binding() {
        let topo = single_pipe(1000.0, 0.3);
        let opts = PlanOptions {
            dt_cap: 0.5,
            ..Default::default()
        };
        let err = plan_grid(&topo, &trace(&topo, 0.1), &opts).unwrap_err();
        assert!(matches!(err, Error::Planning(_)));
        assert!(err.to_string().contains("cap"));
    }

    #[test]
    fn report_is_structured_text() {
        let topo = single_pipe(1000.0, 0.3);
        let plan = plan_grid(&topo, &trace(&topo, 0.1), &PlanOptions::default()).unwrap();
        let parsed: toml::Value = toml::from_str(&plan.report()).unwrap();
        assert_eq!(parsed["dt"].as_float(), Some(300.0));
        assert_eq!(parsed["pipes"][0]["segments"].as_integer(), Some(33));
    }
}
