use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::topology::{LinkRef, NetworkTopology, NodeRef};

/// Relative tolerance for junction continuity and tank volume consistency.
pub const CONTINUITY_TOLERANCE: f64 = 1e-6;

/// Hydraulic state held constant over one hydraulic step. Flows are signed
/// relative to each link's reference orientation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HydraulicStep {
    /// m/s per pipe
    pub velocities: Vec<f64>,
    /// m³/s per pump
    pub pump_flows: Vec<f64>,
    /// m³/s per valve
    pub valve_flows: Vec<f64>,
    /// m³/s per junction
    pub demands: Vec<f64>,
    /// m³ per tank at the start of the step
    pub tank_volumes: Vec<f64>,
    /// m³/s per booster; used by junction-hosted boosters
    pub booster_flows: Vec<f64>,
    /// m³ injected over the whole step; used by tank-hosted boosters
    pub booster_volumes: Vec<f64>,
}

impl HydraulicStep {
    /// All-zero step sized for `topo`, with tanks at their initial volumes.
    pub fn zeros(topo: &NetworkTopology) -> Self {
        HydraulicStep {
            velocities: vec![0.0; topo.pipes().len()],
            pump_flows: vec![0.0; topo.pumps().len()],
            valve_flows: vec![0.0; topo.valves().len()],
            demands: vec![0.0; topo.junctions().len()],
            tank_volumes: topo.tanks().iter().map(|t| t.initial_volume).collect(),
            booster_flows: vec![0.0; topo.boosters().len()],
            booster_volumes: vec![0.0; topo.boosters().len()],
        }
    }

    /// Signed flow of a link in its reference orientation, m³/s.
    pub fn link_flow(&self, topo: &NetworkTopology, link: LinkRef) -> f64 {
        match link {
            LinkRef::Pipe(i) => self.velocities[i] * topo.pipes()[i].area(),
            LinkRef::Pump(i) => self.pump_flows[i],
            LinkRef::Valve(i) => self.valve_flows[i],
        }
    }

    /// Net volumetric inflow into every node through links (by node ordinal),
    /// together with the sum of absolute link flows touching it.
    fn link_balance(&self, topo: &NetworkTopology) -> (Vec<f64>, Vec<f64>) {
        let n = topo.node_count();
        let mut net = vec![0.0; n];
        let mut scale = vec![0.0; n];
        for link in topo.all_links() {
            let q = self.link_flow(topo, link);
            let (a, b) = topo.link_ends_of(link);
            let (a, b) = (topo.node_ordinal(a), topo.node_ordinal(b));
            net[a] -= q;
            net[b] += q;
            scale[a] += q.abs();
            scale[b] += q.abs();
        }
        (net, scale)
    }

    /// Sets every junction demand so that continuity holds exactly. Handy for
    /// building traces from pipe velocities alone.
    pub fn balance_demands(&mut self, topo: &NetworkTopology) {
        let (net, _) = self.link_balance(topo);
        for j in 0..topo.junctions().len() {
            let mut supply = net[topo.node_ordinal(NodeRef::Junction(j))];
            for (b, spec) in topo.boosters().iter().enumerate() {
                if topo.node(&spec.node) == Some(NodeRef::Junction(j)) {
                    supply += self.booster_flows[b];
                }
            }
            self.demands[j] = if supply.abs() < 1e-15 { 0.0 } else { supply };
        }
    }

    /// Net inflow rate into each tank through links, m³/s.
    pub fn tank_net_inflow(&self, topo: &NetworkTopology) -> Vec<f64> {
        let (net, _) = self.link_balance(topo);
        (0..topo.tanks().len())
            .map(|t| net[topo.node_ordinal(NodeRef::Tank(t))])
            .collect()
    }

    /// Booster injection volume entering each tank over the whole step, m³.
    pub fn tank_booster_volume(&self, topo: &NetworkTopology) -> Vec<f64> {
        let mut v = vec![0.0; topo.tanks().len()];
        for (b, _) in topo.boosters().iter().enumerate() {
            if let NodeRef::Tank(t) = topo.booster_host(b) {
                v[t] += self.booster_volumes[b];
            }
        }
        v
    }
}

/// Externally computed hydraulics for the whole simulation period.
#[derive(Debug, Clone, PartialEq)]
pub struct HydraulicTrace {
    /// Δt_H in seconds
    pub step_length: f64,
    pub steps: Vec<HydraulicStep>,
}

impl HydraulicTrace {
    pub fn new(step_length: f64, steps: Vec<HydraulicStep>) -> Self {
        HydraulicTrace { step_length, steps }
    }

    /// Repeats one step `count` times, rolling tank volumes forward.
    pub fn repeated(
        topo: &NetworkTopology,
        step_length: f64,
        step: HydraulicStep,
        count: usize,
    ) -> Self {
        let mut steps = Vec::with_capacity(count);
        let mut current = step;
        for _ in 0..count {
            let next_volumes = end_volumes(topo, &current, step_length);
            steps.push(current.clone());
            current.tank_volumes = next_volumes;
        }
        HydraulicTrace { step_length, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Total simulated time in seconds.
    pub fn duration(&self) -> f64 {
        self.step_length * self.steps.len() as f64
    }

    /// Tank volumes at the end of step `k`: start of `k + 1` or, for the last
    /// step, extrapolated from its net inflow.
    pub fn volumes_after(&self, topo: &NetworkTopology, k: usize) -> Vec<f64> {
        match self.steps.get(k + 1) {
            Some(next) => next.tank_volumes.clone(),
            None => end_volumes(topo, &self.steps[k], self.step_length),
        }
    }

    /// Checks the array sizes against the topology.
    pub fn check_dimensions(&self, topo: &NetworkTopology) -> Result<()> {
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(Error::Dimension(
                "hydraulic step length must be positive".into(),
            ));
        }
        if self.steps.is_empty() {
            return Err(Error::Dimension("hydraulic trace has no steps".into()));
        }
        let expect = [
            ("pipe velocities", topo.pipes().len()),
            ("pump flows", topo.pumps().len()),
            ("valve flows", topo.valves().len()),
            ("junction demands", topo.junctions().len()),
            ("tank volumes", topo.tanks().len()),
            ("booster flows", topo.boosters().len()),
            ("booster volumes", topo.boosters().len()),
        ];
        for (k, s) in self.steps.iter().enumerate() {
            let got = [
                s.velocities.len(),
                s.pump_flows.len(),
                s.valve_flows.len(),
                s.demands.len(),
                s.tank_volumes.len(),
                s.booster_flows.len(),
                s.booster_volumes.len(),
            ];
            for ((what, n), g) in expect.iter().zip(got) {
                if *n != g {
                    return Err(Error::Dimension(format!(
                        "step {k}: expected {n} {what}, found {g}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every continuity and volume finding, each naming the step and element.
    pub fn findings(&self, topo: &NetworkTopology) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.check_dimensions(topo) {
            out.push(e.to_string());
            return out;
        }
        for (k, step) in self.steps.iter().enumerate() {
            let values = step
                .velocities
                .iter()
                .chain(&step.pump_flows)
                .chain(&step.valve_flows)
                .chain(&step.demands)
                .chain(&step.tank_volumes)
                .chain(&step.booster_flows)
                .chain(&step.booster_volumes);
            if values.clone().any(|v| !v.is_finite()) {
                out.push(format!("step {k}: non-finite hydraulic value"));
                continue;
            }
            let (net, scale) = step.link_balance(topo);
            for (j, node) in topo.junctions().iter().enumerate() {
                let ord = topo.node_ordinal(NodeRef::Junction(j));
                let mut injected = 0.0;
                for (b, _) in topo.boosters().iter().enumerate() {
                    if topo.booster_host(b) == NodeRef::Junction(j) {
                        injected += step.booster_flows[b];
                    }
                }
                let demand = step.demands[j];
                if demand < 0.0 {
                    out.push(format!(
                        "step {k}: junction '{}' has negative demand {demand}",
                        node.id
                    ));
                }
                let imbalance = net[ord] + injected - demand;
                let size = scale[ord] + injected.abs() + demand.abs();
                if imbalance.abs() > CONTINUITY_TOLERANCE * size.max(1e-12) {
                    out.push(format!(
                        "step {k}: continuity violated at junction '{}' (imbalance {imbalance:.3e} m3/s)",
                        node.id
                    ));
                }
            }
            for (b, spec) in topo.boosters().iter().enumerate() {
                if step.booster_flows[b] < 0.0 || step.booster_volumes[b] < 0.0 {
                    out.push(format!(
                        "step {k}: booster '{}' has a negative injection flow or volume",
                        spec.id
                    ));
                }
            }
            let after = self.volumes_after(topo, k);
            let net_in = step.tank_net_inflow(topo);
            let vb = step.tank_booster_volume(topo);
            for (t, tank) in topo.tanks().iter().enumerate() {
                let v0 = step.tank_volumes[t];
                for v in [v0, after[t]] {
                    if v < tank.min_volume * (1.0 - CONTINUITY_TOLERANCE)
                        || v > tank.max_volume * (1.0 + CONTINUITY_TOLERANCE)
                    {
                        out.push(format!(
                            "step {k}: tank '{}' volume {v} outside [{}, {}]",
                            tank.id, tank.min_volume, tank.max_volume
                        ));
                    }
                }
                let expected = v0 + net_in[t] * self.step_length + vb[t];
                if (after[t] - expected).abs() > CONTINUITY_TOLERANCE * expected.abs().max(1e-12) {
                    out.push(format!(
                        "step {k}: tank '{}' volume update inconsistent with net inflow",
                        tank.id
                    ));
                }
            }
        }
        out
    }

    /// Dimension check followed by continuity validation; fails on the first
    /// finding.
    pub fn validate(&self, topo: &NetworkTopology) -> Result<()> {
        self.check_dimensions(topo)?;
        match self.findings(topo).into_iter().next() {
            Some(f) => Err(Error::Validation(f)),
            None => Ok(()),
        }
    }

    /// Columnar text form: one metadata line, a header, one row per step.
    pub fn to_csv(&self, topo: &NetworkTopology) -> String {
        let header = trace_columns(topo);
        let mut out = format!("# hydraulic_step = {}\n", self.step_length);
        out.push_str("step");
        for h in &header {
            out.push(',');
            out.push_str(&h.label);
        }
        out.push('\n');
        for (k, s) in self.steps.iter().enumerate() {
            let _ = write!(out, "{k}");
            for h in &header {
                let _ = write!(out, ",{}", h.get(s));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, topo: &NetworkTopology, origin: &str) -> Result<Self> {
        let mut step_length = None;
        let mut body = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(meta) = trimmed.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once('=') {
                    if key.trim() == "hydraulic_step" {
                        let v: f64 = value.trim().parse().map_err(|_| {
                            Error::parse(origin, format!("bad hydraulic_step '{}'", value.trim()))
                        })?;
                        step_length = Some(v);
                    }
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            body.push_str(line);
            body.push('\n');
        }
        let step_length = step_length
            .ok_or_else(|| Error::parse(origin, "missing '# hydraulic_step = <seconds>' line"))?;

        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(origin, e))?
            .clone();
        let columns = trace_columns(topo);
        let mut index = Vec::with_capacity(columns.len());
        for col in &columns {
            let pos = headers.iter().position(|h| h == col.label).ok_or_else(|| {
                Error::Dimension(format!("{origin}: missing column '{}'", col.label))
            })?;
            index.push(pos);
        }
        for h in headers.iter() {
            if h != "step" && !columns.iter().any(|c| c.label == h) {
                return Err(Error::Dimension(format!(
                    "{origin}: column '{h}' does not match any element"
                )));
            }
        }

        let mut steps = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(origin, e))?;
            let mut step = HydraulicStep::zeros(topo);
            for (col, &pos) in columns.iter().zip(&index) {
                let raw = record.get(pos).unwrap_or("");
                let v: f64 = raw.parse().map_err(|_| {
                    Error::parse(
                        origin,
                        format!("row {row}, column '{}': bad number '{raw}'", col.label),
                    )
                })?;
                col.set(&mut step, v);
            }
            steps.push(step);
        }
        Ok(HydraulicTrace { step_length, steps })
    }
}

fn end_volumes(topo: &NetworkTopology, step: &HydraulicStep, dt: f64) -> Vec<f64> {
    let net = step.tank_net_inflow(topo);
    let vb = step.tank_booster_volume(topo);
    step.tank_volumes
        .iter()
        .zip(net)
        .zip(vb)
        .map(|((v, q), b)| v + q * dt + b)
        .collect()
}

#[derive(Clone, Copy)]
enum Field {
    Velocity,
    Pump,
    Valve,
    Demand,
    Volume,
    BoosterFlow,
    BoosterVolume,
}

struct Column {
    label: String,
    field: Field,
    index: usize,
}

impl Column {
    fn slot<'a>(&self, s: &'a mut HydraulicStep) -> &'a mut f64 {
        let v = match self.field {
            Field::Velocity => &mut s.velocities,
            Field::Pump => &mut s.pump_flows,
            Field::Valve => &mut s.valve_flows,
            Field::Demand => &mut s.demands,
            Field::Volume => &mut s.tank_volumes,
            Field::BoosterFlow => &mut s.booster_flows,
            Field::BoosterVolume => &mut s.booster_volumes,
        };
        &mut v[self.index]
    }

    fn get(&self, s: &HydraulicStep) -> f64 {
        let v = match self.field {
            Field::Velocity => &s.velocities,
            Field::Pump => &s.pump_flows,
            Field::Valve => &s.valve_flows,
            Field::Demand => &s.demands,
            Field::Volume => &s.tank_volumes,
            Field::BoosterFlow => &s.booster_flows,
            Field::BoosterVolume => &s.booster_volumes,
        };
        v[self.index]
    }

    fn set(&self, s: &mut HydraulicStep, v: f64) {
        *self.slot(s) = v;
    }
}

/// Column order: pipes, pumps, valves, junction demands, tank volumes, then one
/// booster column each (flow for junction hosts, volume for tank hosts).
fn trace_columns(topo: &NetworkTopology) -> Vec<Column> {
    let mut cols = Vec::new();
    let mut push = |label: String, field, index| {
        cols.push(Column {
            label,
            field,
            index,
        })
    };
    for (i, p) in topo.pipes().iter().enumerate() {
        push(format!("v:{}", p.id), Field::Velocity, i);
    }
    for (i, p) in topo.pumps().iter().enumerate() {
        push(format!("q:{}", p.id), Field::Pump, i);
    }
    for (i, p) in topo.valves().iter().enumerate() {
        push(format!("q:{}", p.id), Field::Valve, i);
    }
    for (i, j) in topo.junctions().iter().enumerate() {
        push(format!("demand:{}", j.id), Field::Demand, i);
    }
    for (i, t) in topo.tanks().iter().enumerate() {
        push(format!("volume:{}", t.id), Field::Volume, i);
    }
    for (i, b) in topo.boosters().iter().enumerate() {
        match topo.booster_host(i) {
            NodeRef::Tank(_) => push(format!("vb:{}", b.id), Field::BoosterVolume, i),
            _ => push(format!("qb:{}", b.id), Field::BoosterFlow, i),
        }
    }
    cols
}

/// Reads a trace, checks its dimensions against `topo` and verifies continuity.
pub fn load_hydraulics(path: impl AsRef<Path>, topo: &NetworkTopology) -> Result<HydraulicTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trace = HydraulicTrace::from_csv(&text, topo, &path.display().to_string())?;
    trace.validate(topo)?;
    Ok(trace)
}
