//! The pipeline commands. Each loads the scenario, runs one stage and writes
//! plain-text results into the output directory.

use std::fmt::Write as _;
use std::path::Path;

use wqms_core::control::{
    booster_weights, load_targets, q_diagonal, TargetSpec, WeightMapping, WeightSchedule,
};
use wqms_core::engine::{
    simulate, EngineOptions, InputSchedule, OperatingPoint, ReactionParams, StateLayout,
};
use wqms_core::fixtures;
use wqms_core::mpc::{run_mpc, ControlInit, Plant, QpStatus};
use wqms_core::network::{
    load_hydraulics, load_initial_state, load_network, validate_scenario, HydraulicTrace,
    NetworkTopology, SpeciesInitialState,
};
use wqms_core::transport::{
    plan_grid, DiscretizationPlan, PlanOptions, SchemeFamily, SegmentationMode, TransportMode,
};
use wqms_core::Error;

use crate::config::ScenarioConfig;
use crate::output::OutputDir;

/// Discretization overrides shared by every command.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct PlanFlags {
    /// explicit or implicit scheme family
    #[arg(long, value_parser = parse::<SchemeFamily>)]
    pub family: Option<SchemeFamily>,
    /// Peclet number at or below which dispersion is modelled
    #[arg(long)]
    pub peclet_threshold: Option<f64>,
    /// upper bound on the water-quality step, s
    #[arg(long)]
    pub dt_cap: Option<f64>,
    /// smallest acceptable water-quality step, s
    #[arg(long)]
    pub dt_min: Option<f64>,
    /// fixed segment count per pipe (implicit family)
    #[arg(long, conflicts_with = "segment_length")]
    pub segments: Option<usize>,
    /// target segment length, m (implicit family)
    #[arg(long)]
    pub segment_length: Option<f64>,
    /// shear velocity as a fraction of the mean velocity
    #[arg(long)]
    pub shear_fraction: Option<f64>,
    /// which pipes carry dispersion: ar, adr or auto
    #[arg(long, value_parser = parse::<TransportMode>)]
    pub transport: Option<TransportMode>,
}

impl PlanFlags {
    pub fn apply(&self, o: &mut PlanOptions) {
        if let Some(v) = self.family {
            o.family = v;
        }
        if let Some(v) = self.peclet_threshold {
            o.peclet_threshold = v;
        }
        if let Some(v) = self.dt_cap {
            o.dt_cap = v;
        }
        if let Some(v) = self.dt_min {
            o.dt_min = v;
        }
        if let Some(segments) = self.segments {
            o.segmentation = SegmentationMode::Fixed { segments };
        }
        if let Some(target_length) = self.segment_length {
            o.segmentation = SegmentationMode::LengthScaled { target_length };
        }
        if let Some(v) = self.shear_fraction {
            o.constants.shear_fraction = v;
        }
        if let Some(v) = self.transport {
            o.transport = v;
        }
    }
}

pub fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn mode_tag(mode: TransportMode) -> &'static str {
    match mode {
        TransportMode::Ar => "ar",
        TransportMode::Adr => "adr",
        TransportMode::Auto => "auto",
    }
}

/// Everything loaded from the config's input files.
pub struct Loaded {
    pub topo: NetworkTopology,
    pub trace: HydraulicTrace,
    pub init: SpeciesInitialState,
    pub targets: Vec<TargetSpec>,
    pub params: ReactionParams,
}

pub fn load(cfg: &ScenarioConfig) -> Result<Loaded, Error> {
    let topo = load_network(&cfg.paths.network)?;
    let trace = load_hydraulics(&cfg.paths.hydraulics, &topo)?;
    let init = load_initial_state(&cfg.paths.initial, &topo)?;
    let report = validate_scenario(&topo.to_file(), &trace, &init);
    if !report.is_valid() {
        return Err(Error::Validation(report.findings.join("; ")));
    }
    let targets = match &cfg.paths.targets {
        Some(p) => load_targets(p)?,
        None => Vec::new(),
    };
    let params = ReactionParams::new(&topo, cfg.reactions)?;
    Ok(Loaded {
        topo,
        trace,
        init,
        targets,
        params,
    })
}

fn plan_for(
    cfg: &ScenarioConfig,
    s: &Loaded,
    transport: TransportMode,
) -> Result<DiscretizationPlan, Error> {
    let opts = PlanOptions {
        transport,
        ..cfg.discretization
    };
    let plan = plan_grid(&s.topo, &s.trace, &opts)?;
    log::info!(
        "dt = {} s ({} substeps), bound by {}",
        plan.dt,
        plan.substeps,
        plan.dt_binding
    );
    Ok(plan)
}

/// One row per (hydraulic step, pipe) with the regime numbers and the scheme.
pub fn samples_csv(plan: &DiscretizationPlan) -> String {
    let mut out = String::from(
        "step,pipe,speed,reynolds,regime,dispersion,peclet,dispersion_active,segments,segment_length,courant,dispersion_number,scheme\n",
    );
    for (k, row) in plan.samples.iter().enumerate() {
        for (p, s) in row.iter().enumerate() {
            let regime = match s.regime {
                wqms_core::transport::FlowRegime::Laminar => "laminar",
                wqms_core::transport::FlowRegime::TransitionalTurbulent => "turbulent",
            };
            let _ = writeln!(
                out,
                "{k},{},{:e},{:e},{regime},{:e},{:e},{},{},{:e},{:e},{:e},{}",
                s.pipe,
                s.speed,
                s.reynolds,
                s.dispersion,
                s.peclet,
                u8::from(s.dispersion_active),
                plan.segments[p],
                plan.segment_length[p],
                plan.courant(k, p),
                plan.dispersion_number(k, p),
                plan.scheme(k, p, plan.transport)
            );
        }
    }
    out
}

pub fn plan(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<String, Error> {
    let s = load(cfg)?;
    let plan = plan_for(cfg, &s, cfg.discretization.transport)?;
    out.write("plan.toml", &plan.report())?;
    out.write("plan_samples.csv", &samples_csv(&plan))?;
    Ok(format!(
        "dt = {} s, {} substeps per {} s hydraulic step; bound by {}",
        plan.dt, plan.substeps, plan.hydraulic_step, plan.dt_binding
    ))
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SimulateFlags {
    /// write every n-th water-quality step
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// step the linearized model instead of the nonlinear one
    #[arg(long)]
    pub linearized: bool,
    /// constant booster inputs, mg/L, one per booster (default zero)
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<f64>,
}

pub fn simulate_cmd(
    cfg: &ScenarioConfig,
    flags: &SimulateFlags,
    out: &mut OutputDir,
) -> Result<String, Error> {
    let s = load(cfg)?;
    let mode = cfg.discretization.transport;
    let plan = plan_for(cfg, &s, mode)?;
    let nb = s.topo.boosters().len();
    let inputs = match flags.inputs.len() {
        0 => InputSchedule::zeros(nb),
        n if n == nb => InputSchedule::Constant(flags.inputs.clone().into()),
        n => {
            return Err(Error::Dimension(format!(
                "{n} inputs given, network has {nb} boosters"
            )))
        }
    };
    let layout = StateLayout::new(&s.topo, &plan);
    let x0 = layout.initial_state(&s.topo, &s.init)?;
    let opts = EngineOptions {
        transport: mode,
        linearized: flags.linearized,
        record_every: flags.stride,
        ..Default::default()
    };
    let t = simulate(&s.topo, &s.trace, &plan, &s.params, &x0, &inputs, &opts)?;
    let tag = mode_tag(mode);
    out.write(&format!("trajectory_{tag}.csv"), &t.to_csv(1))?;
    out.write(&format!("schemes_{tag}.csv"), &t.scheme_csv(&s.topo))?;
    Ok(format!(
        "{} states over {} steps of {} s ({tag}); {} negative values clamped",
        layout.dim(),
        plan.total_steps(),
        plan.dt,
        t.clamped
    ))
}

fn weights(
    cfg: &ScenarioConfig,
    s: &Loaded,
    plan: &DiscretizationPlan,
    weighted: bool,
) -> Result<(WeightSchedule, Option<String>), Error> {
    let layout = StateLayout::new(&s.topo, plan);
    if weighted {
        let x0 = layout.initial_state(&s.topo, &s.init)?;
        let op = OperatingPoint::from_state(&layout, &x0, 0.0);
        let report = booster_weights(
            &s.topo,
            &s.trace,
            plan,
            &s.params,
            &s.targets,
            &[op],
            &cfg.weights,
        )?;
        let tiles = report.tiles_csv();
        Ok((report.schedule, Some(tiles)))
    } else {
        let q = q_diagonal(&layout, &[], &cfg.weights);
        Ok((
            WeightSchedule::uniform(s.trace.len(), s.topo.boosters().len(), q),
            None,
        ))
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct AnalyzeFlags {
    /// how booster scores map to R: literal or inverse
    #[arg(long, value_parser = parse::<WeightMapping>)]
    pub mapping: Option<WeightMapping>,
}

pub fn analyze(
    cfg: &ScenarioConfig,
    flags: &AnalyzeFlags,
    out: &mut OutputDir,
) -> Result<String, Error> {
    let mut cfg = cfg.clone();
    if let Some(m) = flags.mapping {
        cfg.weights.mapping = m;
    }
    let s = load(&cfg)?;
    let plan = plan_for(&cfg, &s, cfg.discretization.transport)?;
    let layout = StateLayout::new(&s.topo, &plan);
    let x0 = layout.initial_state(&s.topo, &s.init)?;
    let op = OperatingPoint::from_state(&layout, &x0, 0.0);
    let report = booster_weights(
        &s.topo,
        &s.trace,
        &plan,
        &s.params,
        &s.targets,
        &[op],
        &cfg.weights,
    )?;
    out.write("tiles.csv", &report.tiles_csv())?;
    out.write("weights.toml", &report.schedule.to_toml())?;
    let mut r = String::from("step");
    for b in s.topo.boosters() {
        let _ = write!(r, ",{}", b.id);
    }
    r.push('\n');
    for (k, step) in report.schedule.steps.iter().enumerate() {
        let _ = write!(r, "{k}");
        for v in &step.r {
            let _ = write!(r, ",{v:e}");
        }
        r.push('\n');
    }
    out.write("booster_weights.csv", &r)?;
    let full = report.results.iter().filter(|g| g.full_rank).count();
    Ok(format!(
        "{} (step, booster, target) triples, {full} full rank; horizon {} steps",
        report.results.len(),
        report.horizon
    ))
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ControlFlags {
    /// weight boosters by controllability (overrides the config)
    #[arg(long, conflicts_with = "unweighted")]
    pub weighted: bool,
    /// uniform booster weights (overrides the config)
    #[arg(long)]
    pub unweighted: bool,
    /// THM cap, mg/L
    #[arg(long, conflicts_with = "no_thm_cap")]
    pub thm_cap: Option<f64>,
    /// drop the THM constraint
    #[arg(long)]
    pub no_thm_cap: bool,
    /// prediction horizon in water-quality steps
    #[arg(long)]
    pub prediction_horizon: Option<usize>,
    /// advance the realized state with the linear model
    #[arg(long)]
    pub linear_plant: bool,
    /// write every n-th state row
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

pub fn control(
    cfg: &ScenarioConfig,
    flags: &ControlFlags,
    out: &mut OutputDir,
) -> Result<String, Error> {
    let mut spec = cfg.control.clone();
    if let Some(c) = flags.thm_cap {
        spec.thm_cap = c;
    }
    if flags.no_thm_cap {
        spec.thm_cap = f64::INFINITY;
    }
    if flags.prediction_horizon.is_some() {
        spec.prediction_horizon = flags.prediction_horizon;
    }
    if flags.linear_plant {
        spec.plant = Plant::Linear;
    }
    spec.validate()?;
    let weighted = (cfg.weighted || flags.weighted) && !flags.unweighted;

    let s = load(cfg)?;
    let plan = plan_for(cfg, &s, spec.transport)?;
    let (schedule, tiles) = weights(cfg, &s, &plan, weighted)?;
    let layout = StateLayout::new(&s.topo, &plan);
    let init = ControlInit {
        state: layout.initial_state(&s.topo, &s.init)?,
        disturbances: None,
    };
    let sol = run_mpc(&s.topo, &s.trace, &plan, &s.params, &schedule, &spec, &init)?;

    let soft = sol
        .reports
        .iter()
        .filter(|r| r.status == QpStatus::InfeasibleSoft)
        .count();
    if soft > 0 {
        log::warn!(
            "{soft} of {} solves needed constraint slack",
            sol.reports.len()
        );
    }
    let capped = sol
        .reports
        .iter()
        .filter(|r| r.status == QpStatus::MaxIter)
        .count();
    if capped > 0 {
        log::warn!("{capped} solves stopped at the iteration limit");
    }
    out.write("control_inputs.csv", &sol.inputs_csv())?;
    out.write("control_states.csv", &sol.states_csv(flags.stride))?;
    out.write("control_summary.txt", &sol.summary())?;
    out.write("weights.toml", &schedule.to_toml())?;
    if let Some(t) = tiles {
        out.write("tiles.csv", &t)?;
    }
    let shares: Vec<String> = sol
        .booster_ids
        .iter()
        .zip(sol.allocation())
        .map(|(id, a)| format!("{id} {a:.4}"))
        .collect();
    Ok(format!(
        "{} solves ({}weighted), slack {:e}, allocation {}",
        sol.reports.len(),
        if weighted { "" } else { "un" },
        sol.slack_total(),
        shares.join(", ")
    ))
}

/// Writes a built-in scenario and a config pointing at it.
pub fn fixture(name: &str, dir: &Path) -> Result<String, Error> {
    let s = fixtures::by_name(name).ok_or_else(|| {
        Error::Validation(format!(
            "unknown fixture '{name}'; known: {}",
            fixtures::NAMES.join(", ")
        ))
    })?;
    fixtures::write_scenario(&s, dir)?;
    let cfg = ScenarioConfig::for_directory(s.plan, s.reactions, !s.targets.is_empty());
    let path = dir.join("scenario.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(format!("wrote '{name}' to {}", dir.display()))
}
