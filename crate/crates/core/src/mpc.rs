//! Receding-horizon chlorine dosing.
//!
//! Each control instant linearizes the network about the current state,
//! condenses the predicted states onto the blocked booster inputs and solves
//! the resulting box- and row-constrained QP with a dense interior-point
//! method. State bounds are soft: one L1 slack per monitored node and
//! constraint class, held over the whole horizon.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{StepWeights, WeightSchedule};
use crate::engine::{
    assemble_system, clamp, step_linear, step_nonlinear, AssemblyMode, OperatingPoint,
    ReactionParams, StateLayout, SystemMatrices,
};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, to_dense};
use crate::network::{HydraulicTrace, NetworkTopology, NodeRef, Species};
use crate::transport::{DiscretizationPlan, TransportMode};

/// Litres per cubic metre; turns mg/L × m³ into mg.
const LITRES: f64 = 1000.0;

/// Required ratio of the slack penalty to the largest per-step injection cost.
pub const SLACK_PENALTY_RATIO: f64 = 1e4;

/// Which model advances the realized state between control instants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plant {
    #[default]
    Nonlinear,
    /// the controller's own linearization; predicted and realized agree
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlProblemSpec {
    /// chlorine band, mg/L
    pub chlorine_min: f64,
    pub chlorine_max: f64,
    /// THM cap, mg/L
    pub thm_cap: f64,
    pub reactant_cap: Option<f64>,
    /// price of injected chlorine, $/mg
    pub unit_cost: f64,
    /// chlorine setpoint on weighted states, mg/L
    pub reference: f64,
    /// prediction horizon in WQ steps; four hydraulic steps when absent
    pub prediction_horizon: Option<usize>,
    /// control horizon in WQ steps; the prediction horizon when absent
    pub control_horizon: Option<usize>,
    /// move-blocking length in WQ steps; a quarter hydraulic step when absent
    pub block: Option<usize>,
    /// WQ steps between solves; one hydraulic step when absent
    pub cadence: Option<usize>,
    /// L1 penalty on constraint slacks, $ per mg/L
    pub slack_penalty: f64,
    /// node ids whose states are constrained; all junctions and tanks when absent
    pub monitored: Option<Vec<String>>,
    pub transport: TransportMode,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub plant: Plant,
}

impl Default for ControlProblemSpec {
    fn default() -> Self {
        ControlProblemSpec {
            chlorine_min: 0.2,
            chlorine_max: 4.0,
            thm_cap: 0.08,
            reactant_cap: None,
            unit_cost: 1e-6,
            reference: 2.1,
            prediction_horizon: None,
            control_horizon: None,
            block: None,
            cadence: None,
            slack_penalty: 1e4,
            monitored: None,
            transport: TransportMode::Auto,
            tolerance: 1e-7,
            max_iterations: 200,
            plant: Plant::Nonlinear,
        }
    }
}

impl ControlProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.chlorine_min >= 0.0 && self.chlorine_min < self.chlorine_max) {
            bad.push(format!(
                "chlorine band [{}, {}]",
                self.chlorine_min, self.chlorine_max
            ));
        }
        if self.thm_cap <= 0.0 || self.reactant_cap.is_some_and(|c| c <= 0.0) {
            bad.push("caps must be positive".to_string());
        }
        if self.unit_cost < 0.0 || self.slack_penalty <= 0.0 {
            bad.push("unit cost must be nonnegative and the slack penalty positive".into());
        }
        for (name, v) in [
            ("prediction_horizon", self.prediction_horizon),
            ("control_horizon", self.control_horizon),
            ("block", self.block),
            ("cadence", self.cadence),
        ] {
            if v == Some(0) {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if let (Some(c), Some(p)) = (self.control_horizon, self.prediction_horizon) {
            if c > p {
                bad.push(format!(
                    "control horizon {c} exceeds prediction horizon {p}"
                ));
            }
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            bad.push("solver tolerance and iteration limit must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    /// Horizon lengths for a plan with `substeps` WQ steps per hydraulic step.
    pub fn horizons(&self, substeps: usize) -> Horizons {
        let prediction = self.prediction_horizon.unwrap_or(4 * substeps);
        let control = self.control_horizon.unwrap_or(prediction).min(prediction);
        Horizons {
            prediction,
            control,
            block: self.block.unwrap_or((substeps / 4).max(1)),
            cadence: self.cadence.unwrap_or(substeps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizons {
    pub prediction: usize,
    pub control: usize,
    pub block: usize,
    pub cadence: usize,
}

/// Constraint families that carry their own slack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlackClass {
    ChlorineLow,
    ChlorineHigh,
    Thms,
    Reactant,
}

impl SlackClass {
    pub const ALL: [SlackClass; 4] = [
        SlackClass::ChlorineLow,
        SlackClass::ChlorineHigh,
        SlackClass::Thms,
        SlackClass::Reactant,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SlackClass::ChlorineLow => "chlorine-low",
            SlackClass::ChlorineHigh => "chlorine-high",
            SlackClass::Thms => "thms",
            SlackClass::Reactant => "reactant",
        }
    }
}

/// Monitored node with the state indices of its three species.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitored {
    pub id: String,
    pub chlorine: usize,
    pub reactant: usize,
    pub thms: usize,
}

pub fn monitored_nodes(
    topo: &NetworkTopology,
    layout: &StateLayout,
    ids: Option<&[String]>,
) -> Result<Vec<Monitored>> {
    let nodes: Vec<NodeRef> = match ids {
        Some(ids) => ids
            .iter()
            .map(|id| {
                topo.node(id)
                    .ok_or_else(|| Error::Validation(format!("unknown monitored node '{id}'")))
            })
            .collect::<Result<_>>()?,
        None => (0..topo.junctions().len())
            .map(NodeRef::Junction)
            .chain((0..topo.tanks().len()).map(NodeRef::Tank))
            .collect(),
    };
    Ok(nodes
        .into_iter()
        .map(|r| {
            let l = layout.node(r);
            Monitored {
                id: topo.node_id(r).to_string(),
                chlorine: layout.index(Species::Chlorine, l),
                reactant: layout.index(Species::Reactant, l),
                thms: layout.index(Species::Thms, l),
            }
        })
        .collect())
}

/// Linearized dynamics over one prediction horizon, one entry per WQ step.
#[derive(Debug, Clone)]
pub struct HorizonModel<'a> {
    pub mats: Vec<&'a SystemMatrices>,
    pub weights: Vec<&'a StepWeights>,
    /// carrier flow of each booster, m³/s
    pub carriers: Vec<Vec<f64>>,
    /// full input vector per step; entries of decision boosters are ignored
    pub disturbances: Vec<DVector<f64>>,
}

/// Decision structure shared by every solve of one run.
#[derive(Debug, Clone)]
pub struct QpStructure {
    /// booster indices that are decision variables
    pub decision: Vec<usize>,
    /// upper bound of each decision booster, mg/L
    pub input_max: Vec<f64>,
    pub monitored: Vec<Monitored>,
    pub block: usize,
    pub control_steps: usize,
}

impl QpStructure {
    pub fn new(topo: &NetworkTopology, monitored: Vec<Monitored>, horizons: Horizons) -> Self {
        let decision: Vec<usize> = topo
            .boosters()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.species == Species::Chlorine)
            .map(|(j, _)| j)
            .collect();
        QpStructure {
            input_max: decision
                .iter()
                .map(|&j| topo.boosters()[j].max_concentration)
                .collect(),
            decision,
            monitored,
            block: horizons.block,
            control_steps: horizons.control,
        }
    }

    pub fn blocks(&self) -> usize {
        self.control_steps.div_ceil(self.block).max(1)
    }

    /// Block driving the input of horizon step `k`.
    pub fn block_of(&self, k: usize) -> usize {
        (k / self.block).min(self.blocks() - 1)
    }

    pub fn input_vars(&self) -> usize {
        self.decision.len() * self.blocks()
    }
}

/// `min ½ zᵀHz + gᵀz + constant` subject to `Gz ≤ h` and `lower ≤ z ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// (class, monitored index) of each slack variable, after the inputs
    pub slacks: Vec<(SlackClass, usize)>,
    /// free response x̄ at horizon steps 1..=N
    pub free: Vec<DVector<f64>>,
    /// input-to-state gains at horizon steps 1..=N
    pub gains: Vec<DMatrix<f64>>,
}

impl QpInstance {
    /// Plain QP without prediction data, as used for solver tests.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        rows: DMatrix<f64>,
        rhs: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Self {
        QpInstance {
            hessian,
            linear,
            constant: 0.0,
            rows,
            rhs,
            lower,
            upper,
            slacks: Vec::new(),
            free: Vec::new(),
            gains: Vec::new(),
        }
    }

    pub fn vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z) + self.constant
    }

    fn check(&self) -> Result<()> {
        let n = self.vars();
        let ok = self.hessian.shape() == (n, n)
            && self.rows.ncols() == n
            && self.rows.nrows() == self.rhs.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !ok {
            return Err(Error::Dimension("QP blocks have inconsistent sizes".into()));
        }
        if (0..n).any(|i| self.lower[i] > self.upper[i]) {
            return Err(Error::Validation(
                "QP variable with lower bound above upper bound".into(),
            ));
        }
        let scale = self.hessian.amax().max(1.0);
        let min_eig = symmetric_eigenvalues(&self.hessian)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if n > 0 && min_eig < -1e-10 * scale {
            return Err(Error::Solver(format!(
                "Hessian is not PSD (eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }
}

/// Slack class, state selector, constraint sign and bound.
type SlackRow = (SlackClass, fn(&Monitored) -> usize, f64, f64);

/// Condensed QP over one horizon.
///
/// Variables are the blocked decision inputs followed by the slacks. Rows whose
/// state is out of the inputs' reach and already inside its bound are dropped.
pub fn build_qp(
    model: &HorizonModel<'_>,
    structure: &QpStructure,
    spec: &ControlProblemSpec,
    x0: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> Result<QpInstance> {
    let steps = model.mats.len();
    if steps == 0
        || model.weights.len() != steps
        || model.carriers.len() != steps
        || model.disturbances.len() != steps
    {
        return Err(Error::Dimension(
            "horizon model pieces differ in length".into(),
        ));
    }
    let dim = model.mats[0].dim();
    if x0.len() != dim {
        return Err(Error::Dimension(format!(
            "state has {} entries, model needs {dim}",
            x0.len()
        )));
    }
    if u_prev.len() != structure.decision.len() {
        return Err(Error::Dimension(
            "previous input does not match the decision boosters".into(),
        ));
    }
    let nd = structure.decision.len();
    let nv = structure.input_vars();

    // Free response and gains.
    let mut free = Vec::with_capacity(steps);
    let mut gains = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut gain = DMatrix::<f64>::zeros(dim, nv);
    let mut dense_b: Option<(*const SystemMatrices, DMatrix<f64>)> = None;
    for k in 0..steps {
        let m = model.mats[k];
        if !m.linearized {
            return Err(Error::Validation(
                "prediction needs linearized matrices".into(),
            ));
        }
        if m.dim() != dim || model.disturbances[k].len() != m.inputs() {
            return Err(Error::Dimension(format!(
                "horizon step {k} has mismatched sizes"
            )));
        }
        if dense_b.as_ref().is_none_or(|(p, _)| !std::ptr::eq(*p, m)) {
            dense_b = Some((m as *const _, to_dense(&m.b)));
        }
        let b = &dense_b.as_ref().expect("set above").1;
        let mut u = model.disturbances[k].clone();
        for &j in &structure.decision {
            u[j] = 0.0;
        }
        let mut next = &m.a * &x + &m.b * &u + &m.phi;
        m.solve_e(&mut next)?;
        x = next;
        let mut g = &m.a * &gain;
        let blk = structure.block_of(k);
        for (d, &j) in structure.decision.iter().enumerate() {
            let mut col = g.column_mut(blk * nd + d);
            col += b.column(j);
        }
        m.solve_e_matrix(&mut g)?;
        gain = g;
        free.push(x.clone());
        gains.push(gain.clone());
    }

    // Slack variables: one per (class, monitored node) that can bind.
    let classes: Vec<SlackRow> = {
        let mut c: Vec<SlackRow> = vec![
            (
                SlackClass::ChlorineLow,
                |m| m.chlorine,
                -1.0,
                -spec.chlorine_min,
            ),
            (
                SlackClass::ChlorineHigh,
                |m| m.chlorine,
                1.0,
                spec.chlorine_max,
            ),
            (SlackClass::Thms, |m| m.thms, 1.0, spec.thm_cap),
        ];
        if let Some(cap) = spec.reactant_cap {
            c.push((SlackClass::Reactant, |m| m.reactant, 1.0, cap));
        }
        c
    };
    // Row margin below which a row is kept even though the inputs cannot move it.
    let mut rows: Vec<(Vec<f64>, f64, usize)> = Vec::new();
    let mut slack_index: BTreeMap<(SlackClass, usize), usize> = BTreeMap::new();
    for k in 0..steps {
        for (mi, mon) in structure.monitored.iter().enumerate() {
            for &(class, state, sign, bound) in &classes {
                let s = state(mon);
                let reach = gains[k].row(s).amax();
                // sign·x ≤ bound
                let margin = bound - sign * free[k][s];
                if reach == 0.0 && margin >= 0.0 {
                    continue;
                }
                // Rows that stay satisfied for every admissible input are dropped too.
                let worst: f64 = gains[k]
                    .row(s)
                    .iter()
                    .enumerate()
                    .map(|(v, g)| (sign * g).max(0.0) * structure.input_max[v % nd])
                    .sum();
                if worst <= margin {
                    continue;
                }
                let next = slack_index.len();
                let slot = *slack_index.entry((class, mi)).or_insert(next);
                let coeffs: Vec<f64> = gains[k].row(s).iter().map(|g| sign * g).collect();
                rows.push((coeffs, margin, slot));
            }
        }
    }
    let mut slacks: Vec<(SlackClass, usize)> =
        vec![(SlackClass::ChlorineLow, 0); slack_index.len()];
    for (&key, &slot) in &slack_index {
        slacks[slot] = key;
    }
    let n = nv + slacks.len();
    let mut g_rows = DMatrix::zeros(rows.len(), n);
    let mut h = DVector::zeros(rows.len());
    for (r, (coeffs, margin, slot)) in rows.iter().enumerate() {
        for (v, c) in coeffs.iter().enumerate() {
            g_rows[(r, v)] = *c;
        }
        g_rows[(r, nv + slot)] = -1.0;
        h[r] = *margin;
    }

    // Cost.
    let mut hess = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    let mut constant = 0.0;
    for k in 0..steps {
        let w = model.weights[k];
        if w.q.len() != dim || w.r.len() != model.mats[k].inputs() {
            return Err(Error::Dimension(format!(
                "weights at horizon step {k} do not match the model"
            )));
        }
        let active: Vec<usize> = (0..dim).filter(|&i| w.q[i] > 0.0).collect();
        if !active.is_empty() {
            let gq = DMatrix::from_fn(active.len(), nv, |r, c| {
                gains[k][(active[r], c)] * w.q[active[r]].sqrt()
            });
            let dev = DVector::from_fn(active.len(), |r, _| {
                (free[k][active[r]] - spec.reference) * w.q[active[r]].sqrt()
            });
            let mut hv = hess.view_mut((0, 0), (nv, nv));
            hv += 2.0 * gq.transpose() * &gq;
            let mut lv = lin.rows_mut(0, nv);
            lv += 2.0 * gq.transpose() * &dev;
            constant += dev.norm_squared();
        }
        let dt = model.mats[k].dt;
        let blk = structure.block_of(k);
        for (d, &j) in structure.decision.iter().enumerate() {
            lin[blk * nd + d] += spec.unit_cost * model.carriers[k][j] * LITRES * dt;
        }
    }
    // Smoothness at block starts: Δu_0 = v_0 − u_prev, Δu_b = v_b − v_{b−1}.
    for blk in 0..structure.blocks() {
        let k = (blk * structure.block).min(steps - 1);
        for (d, &j) in structure.decision.iter().enumerate() {
            let r = model.weights[k].r[j];
            let cur = blk * nd + d;
            hess[(cur, cur)] += 2.0 * r;
            if blk == 0 {
                lin[cur] -= 2.0 * r * u_prev[d];
                constant += r * u_prev[d] * u_prev[d];
            } else {
                let prev = (blk - 1) * nd + d;
                hess[(prev, prev)] += 2.0 * r;
                hess[(cur, prev)] -= 2.0 * r;
                hess[(prev, cur)] -= 2.0 * r;
            }
        }
    }
    for s in 0..slacks.len() {
        lin[nv + s] = spec.slack_penalty;
    }
    let hess = (&hess + hess.transpose()) * 0.5;

    let mut lower = DVector::zeros(n);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for blk in 0..structure.blocks() {
        for d in 0..nd {
            upper[blk * nd + d] = structure.input_max[d];
        }
    }
    lower.rows_mut(nv, slacks.len()).fill(0.0);
    Ok(QpInstance {
        hessian: hess,
        linear: lin,
        constant,
        rows: g_rows,
        rhs: h,
        lower,
        upper,
        slacks,
        free,
        gains,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    /// solved, but some state bound needed slack
    InfeasibleSoft,
}

impl QpStatus {
    pub fn tag(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max-iter",
            QpStatus::InfeasibleSoft => "infeasible-soft",
        }
    }
}

/// Relative KKT residuals of a returned point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    /// multipliers of the general rows
    pub row_multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub objective: f64,
}

/// Mehrotra predictor-corrector on `Gz + s = h, s ≥ 0`, with the variable
/// bounds appended to the general rows.
pub fn solve_qp(qp: &QpInstance, tol: f64, max_iter: usize) -> Result<QpSolution> {
    qp.check()?;
    let n = qp.vars();
    let mut kinds: Vec<(usize, i8)> = (0..qp.rows.nrows()).map(|r| (r, 0)).collect();
    kinds.extend((0..n).filter(|&i| qp.upper[i].is_finite()).map(|i| (i, 1)));
    kinds.extend((0..n).filter(|&i| qp.lower[i].is_finite()).map(|i| (i, -1)));
    let m = kinds.len();
    let mut g = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    for (r, &(i, kind)) in kinds.iter().enumerate() {
        match kind {
            0 => {
                g.row_mut(r).copy_from(&qp.rows.row(i));
                h[r] = qp.rhs[i];
            }
            1 => {
                g[(r, i)] = 1.0;
                h[r] = qp.upper[i];
            }
            _ => {
                g[(r, i)] = -1.0;
                h[r] = -qp.lower[i];
            }
        }
    }
    let gt = g.transpose();
    let scale_d = 1.0 + qp.linear.amax().max(qp.hessian.amax());
    let scale_p = 1.0 + if m > 0 { h.amax() } else { 0.0 };

    let mut z = DVector::from_fn(n, |i, _| {
        let (lo, hi) = (qp.lower[i], qp.upper[i]);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo + 1.0,
            (false, true) => hi - 1.0,
            _ => 0.0,
        }
    });
    let mut s = (&h - &g * &z).map(|v| v.max(1.0));
    let mut lam = DVector::from_element(m, 1.0);

    let residuals_at = |z: &DVector<f64>, lam: &DVector<f64>| {
        let rd = &qp.hessian * z + &qp.linear + &gt * lam;
        let gap = &h - &g * z;
        let primal = gap.iter().fold(0.0f64, |a, v| a.max(-v));
        let comp = gap
            .iter()
            .zip(lam.iter())
            .fold(0.0f64, |a, (s, l)| a.max((s * l).abs()));
        let obj = 1.0 + qp.objective(z).abs();
        KktResiduals {
            stationarity: rd.amax() / scale_d,
            primal: primal / scale_p,
            complementarity: comp / obj.max(scale_p),
        }
    };

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it;
        let rd = &qp.hessian * &z + &qp.linear + &gt * &lam;
        let rp = &g * &z + &s - &h;
        let mu = if m > 0 { s.dot(&lam) / m as f64 } else { 0.0 };
        let res = residuals_at(&z, &lam);
        if rd.amax() / scale_d <= tol
            && (m == 0 || rp.amax() / scale_p <= tol)
            && res.max() <= tol
            && mu <= tol
        {
            status = QpStatus::Optimal;
            break;
        }
        let w = lam.component_div(&s);
        let mut kkt = qp.hessian.clone();
        if m > 0 {
            let gw = DMatrix::from_fn(m, n, |r, c| g[(r, c)] * w[r]);
            kkt += &gt * gw;
        }
        let chol = factor(kkt)?;
        let solve = |rc: &DVector<f64>| {
            // Δλ = W(GΔz + r_p) − r_c/s; (H + GᵀWG)Δz = −r_d − Gᵀ(W r_p − r_c/s)
            let t = w.component_mul(&rp) - rc.component_div(&s);
            let dz = chol.solve(&(-(&rd) - &gt * &t));
            let dlam = w.component_mul(&(&g * &dz + &rp)) - rc.component_div(&s);
            let ds = -(rc + s.component_mul(&dlam)).component_div(&lam);
            (dz, ds, dlam)
        };
        if m == 0 {
            let (dz, _, _) = solve(&DVector::zeros(0));
            z += dz;
            continue;
        }
        let rc_aff = s.component_mul(&lam);
        let (_, ds_a, dl_a) = solve(&rc_aff);
        let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&lam, &dl_a));
        let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&lam + &dl_a * alpha_aff)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc = rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
        let (dz, ds, dl) = solve(&rc);
        let alpha = (0.99 * step_to_boundary(&s, &ds).min(step_to_boundary(&lam, &dl))).min(1.0);
        z += &dz * alpha;
        s += &ds * alpha;
        lam += &dl * alpha;
        iterations = it + 1;
    }
    if status == QpStatus::MaxIter && m == 0 && residuals_at(&z, &lam).max() <= tol {
        status = QpStatus::Optimal;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "interior-point iterate is not finite".into(),
        ));
    }
    // Degenerate bounds leave the iterate ~√μ off the face; an equality solve on
    // the guessed active set snaps it back when that point checks out.
    if status == QpStatus::Optimal && m > 0 {
        if let Some((zp, lp)) = polish(qp, &g, &h, &s, &lam) {
            let before = residuals_at(&z, &lam).max();
            let after = residuals_at(&zp, &lp);
            if after.max() <= before.max(tol)
                && qp.objective(&zp) <= qp.objective(&z) + tol * scale_d
            {
                z = zp;
                lam = lp;
            }
        }
    }
    let residuals = residuals_at(&z, &lam);
    let rows = qp.rows.nrows();
    let mut upper_multipliers = DVector::zeros(n);
    let mut lower_multipliers = DVector::zeros(n);
    let mut row_multipliers = DVector::zeros(rows);
    for (r, &(i, kind)) in kinds.iter().enumerate() {
        match kind {
            0 => row_multipliers[i] = lam[r],
            1 => upper_multipliers[i] = lam[r],
            _ => lower_multipliers[i] = lam[r],
        }
    }
    Ok(QpSolution {
        objective: qp.objective(&z),
        z,
        status,
        iterations,
        residuals,
        row_multipliers,
        lower_multipliers,
        upper_multipliers,
    })
}

/// Equality-constrained solve on rows with `s ≤ λ`; `None` when the guess
/// is inconsistent.
fn polish(
    qp: &QpInstance,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    s: &DVector<f64>,
    lam: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.vars();
    let active: Vec<usize> = (0..s.len()).filter(|&i| s[i] <= lam[i]).collect();
    let k = n + active.len();
    let reg = 1e-13 * (1.0 + qp.hessian.amax());
    let mut kkt = DMatrix::zeros(k, k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    let mut rhs = DVector::zeros(k);
    rhs.rows_mut(0, n).copy_from(&(-&qp.linear));
    for (a, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + a, c)] = g[(i, c)];
            kkt[(c, n + a)] = g[(i, c)];
        }
        kkt[(n + a, n + a)] = -reg;
        rhs[n + a] = h[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z = sol.rows(0, n).into_owned();
    let mut full = DVector::zeros(s.len());
    for (a, &i) in active.iter().enumerate() {
        if sol[n + a] < 0.0 {
            return None;
        }
        full[i] = sol[n + a];
    }
    let feasible = (g * &z - h).iter().all(|v| *v <= 1e-12 * (1.0 + h.amax()));
    feasible.then_some((z, full))
}

fn factor(mut kkt: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = kkt.nrows();
    let scale = kkt.diagonal().amax().max(1.0);
    let mut shift = 0.0;
    for _ in 0..8 {
        if let Some(c) = kkt.clone().cholesky() {
            return Ok(c);
        }
        let add = if shift == 0.0 {
            1e-12 * scale
        } else {
            shift * 9.0
        };
        for i in 0..n {
            kkt[(i, i)] += add;
        }
        shift += add;
    }
    Err(Error::Solver(
        "reduced KKT matrix is not positive definite".into(),
    ))
}

/// Largest α ∈ (0, 1] keeping `v + α·dv ≥ 0`.
fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

/// Diagnostics of one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub time: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    /// summed slack per class, mg/L
    pub slack: BTreeMap<SlackClass, f64>,
    /// horizon actually used, WQ steps
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub injection: f64,
    pub tracking: f64,
    pub smoothness: f64,
    pub slack: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.injection + self.tracking + self.smoothness + self.slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub booster_ids: Vec<String>,
    pub labels: Vec<String>,
    /// time after each WQ step, s
    pub times: Vec<f64>,
    /// applied input per WQ step, all boosters, mg/L
    pub inputs: Vec<DVector<f64>>,
    /// realized states, starting with the initial state
    pub realized: Vec<DVector<f64>>,
    /// condensed-model predictions made at the last control instant, aligned
    /// with `realized[1..]`
    pub predicted: Vec<DVector<f64>>,
    pub reports: Vec<SolveReport>,
    pub cost: CostBreakdown,
    /// injected chlorine per booster, mg
    pub injected: Vec<f64>,
    pub monitored: Vec<Monitored>,
    pub chlorine_band: (f64, f64),
    pub thm_cap: f64,
    pub reactant_cap: Option<f64>,
}

impl ControlSolution {
    /// Booster share of the injected mass; zeros when nothing was injected.
    pub fn allocation(&self) -> Vec<f64> {
        let total: f64 = self.injected.iter().sum();
        self.injected
            .iter()
            .map(|m| if total > 0.0 { m / total } else { 0.0 })
            .collect()
    }

    pub fn slack_total(&self) -> f64 {
        self.reports.iter().flat_map(|r| r.slack.values()).sum()
    }

    /// Realized bound violations per class beyond `tol`, over monitored nodes
    /// and all times after the initial state.
    pub fn violations(&self, tol: f64) -> BTreeMap<SlackClass, usize> {
        let mut out: BTreeMap<SlackClass, usize> =
            SlackClass::ALL.iter().map(|c| (*c, 0)).collect();
        for x in self.realized.iter().skip(1) {
            for m in &self.monitored {
                let c = x[m.chlorine];
                *out.get_mut(&SlackClass::ChlorineLow).expect("class") +=
                    usize::from(c < self.chlorine_band.0 - tol);
                *out.get_mut(&SlackClass::ChlorineHigh).expect("class") +=
                    usize::from(c > self.chlorine_band.1 + tol);
                *out.get_mut(&SlackClass::Thms).expect("class") +=
                    usize::from(x[m.thms] > self.thm_cap + tol);
                if let Some(cap) = self.reactant_cap {
                    *out.get_mut(&SlackClass::Reactant).expect("class") +=
                        usize::from(x[m.reactant] > cap + tol);
                }
            }
        }
        out
    }

    /// Largest |predicted − realized| over the run.
    pub fn model_mismatch(&self) -> f64 {
        self.predicted
            .iter()
            .zip(self.realized.iter().skip(1))
            .map(|(p, r)| (p - r).amax())
            .fold(0.0, f64::max)
    }

    pub fn inputs_csv(&self) -> String {
        let mut out = String::from("time");
        for id in &self.booster_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
        for (t, u) in self.times.iter().zip(&self.inputs) {
            let _ = write!(out, "{t}");
            for v in u.iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Realized states at monitored nodes, every `stride` WQ steps.
    pub fn states_csv(&self, stride: usize) -> String {
        let mut out = String::from("time");
        for m in &self.monitored {
            for sp in Species::ALL {
                let _ = write!(out, ",{}:{}", sp.tag(), m.id);
            }
        }
        out.push('\n');
        let stride = stride.max(1);
        let t0 = self
            .times
            .first()
            .map(|t| t - self.step_length())
            .unwrap_or(0.0);
        for (i, x) in self.realized.iter().enumerate() {
            if i % stride != 0 && i + 1 != self.realized.len() {
                continue;
            }
            let t = if i == 0 { t0 } else { self.times[i - 1] };
            let _ = write!(out, "{t}");
            for m in &self.monitored {
                for idx in [m.chlorine, m.reactant, m.thms] {
                    let _ = write!(out, ",{}", x[idx]);
                }
            }
            out.push('\n');
        }
        out
    }

    fn step_length(&self) -> f64 {
        match self.times.as_slice() {
            [a, b, ..] => b - a,
            [a] => *a,
            [] => 0.0,
        }
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "solves = {}", self.reports.len());
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.reports {
            *counts.entry(r.status.tag()).or_default() += 1;
        }
        for (k, v) in counts {
            let _ = writeln!(out, "status.{k} = {v}");
        }
        for (c, n) in self.violations(1e-9) {
            let _ = writeln!(out, "violations.{} = {n}", c.tag());
        }
        let mut slack: BTreeMap<SlackClass, f64> = BTreeMap::new();
        for r in &self.reports {
            for (c, v) in &r.slack {
                *slack.entry(*c).or_default() += v;
            }
        }
        for c in SlackClass::ALL {
            let _ = writeln!(
                out,
                "slack.{} = {:e}",
                c.tag(),
                slack.get(&c).copied().unwrap_or(0.0)
            );
        }
        let _ = writeln!(out, "cost.injection = {:e}", self.cost.injection);
        let _ = writeln!(out, "cost.tracking = {:e}", self.cost.tracking);
        let _ = writeln!(out, "cost.smoothness = {:e}", self.cost.smoothness);
        let _ = writeln!(out, "cost.slack = {:e}", self.cost.slack);
        let _ = writeln!(out, "cost.total = {:e}", self.cost.total());
        for ((id, mg), share) in self
            .booster_ids
            .iter()
            .zip(&self.injected)
            .zip(self.allocation())
        {
            let _ = writeln!(out, "injected.{id} = {mg:e} mg ({:.4} share)", share);
        }
        let _ = writeln!(out, "model_mismatch = {:e}", self.model_mismatch());
        out
    }
}

/// Carrier flow of each booster during hydraulic step `k`, m³/s.
fn carriers(topo: &NetworkTopology, trace: &HydraulicTrace, k: usize) -> Vec<f64> {
    (0..topo.boosters().len())
        .map(|j| match topo.booster_host(j) {
            NodeRef::Tank(_) => trace.steps[k].booster_volumes[j] / trace.step_length,
            _ => trace.steps[k].booster_flows[j],
        })
        .collect()
}

/// Starting state and exogenous inputs of a control run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInit {
    pub state: DVector<f64>,
    /// full booster input per WQ step for non-decision boosters; zeros when absent
    pub disturbances: Option<Vec<DVector<f64>>>,
}

/// Closed-loop run over the whole trace.
pub fn run_mpc(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    plan: &DiscretizationPlan,
    params: &ReactionParams,
    weights: &WeightSchedule,
    spec: &ControlProblemSpec,
    init: &ControlInit,
) -> Result<ControlSolution> {
    spec.validate()?;
    let layout = StateLayout::new(topo, plan);
    let dim = layout.dim();
    let nb = topo.boosters().len();
    if init.state.len() != dim {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, layout needs {dim}",
            init.state.len()
        )));
    }
    if weights.steps.len() < trace.len() {
        return Err(Error::Validation(format!(
            "weight schedule covers {} hydraulic steps, trace has {}",
            weights.steps.len(),
            trace.len()
        )));
    }
    let sub = plan.substeps;
    let total = trace.len() * sub;
    if let Some(d) = &init.disturbances {
        if d.len() < total || d.iter().any(|u| u.len() != nb) {
            return Err(Error::Dimension(
                "disturbance schedule does not cover the run".into(),
            ));
        }
    }
    let disturbance = |i: usize| {
        init.disturbances
            .as_ref()
            .map(|d| d[i].clone())
            .unwrap_or_else(|| DVector::zeros(nb))
    };
    let max_flow = trace
        .steps
        .iter()
        .flat_map(|s| s.booster_flows.iter().copied())
        .fold(0.0f64, f64::max);
    let max_tank = (0..trace.len())
        .flat_map(|k| carriers(topo, trace, k))
        .fold(0.0f64, f64::max);
    let worst_step_cost = spec.unit_cost * max_flow.max(max_tank) * LITRES * plan.dt;
    if spec.slack_penalty < SLACK_PENALTY_RATIO * worst_step_cost {
        return Err(Error::Validation(format!(
            "slack penalty {} is below {SLACK_PENALTY_RATIO:e} × the largest step injection cost {worst_step_cost:e}",
            spec.slack_penalty
        )));
    }

    let horizons = spec.horizons(sub);
    let monitored = monitored_nodes(topo, &layout, spec.monitored.as_deref())?;
    let structure = QpStructure::new(topo, monitored.clone(), horizons);
    let nd = structure.decision.len();
    let labels = layout.state_labels(topo);

    let mut x = init.state.clone();
    let mut u_prev = DVector::zeros(nd);
    let mut sol = ControlSolution {
        booster_ids: topo.boosters().iter().map(|b| b.id.clone()).collect(),
        labels,
        times: Vec::with_capacity(total),
        inputs: Vec::with_capacity(total),
        realized: vec![x.clone()],
        predicted: Vec::with_capacity(total),
        reports: Vec::new(),
        cost: CostBreakdown::default(),
        injected: vec![0.0; nb],
        monitored,
        chlorine_band: (spec.chlorine_min, spec.chlorine_max),
        thm_cap: spec.thm_cap,
        reactant_cap: spec.reactant_cap,
    };
    let mut plant_cache: Option<((usize, usize), SystemMatrices)> = None;
    let mut truncated = false;
    let mut start = 0;
    while start < total {
        let time = start as f64 * plan.dt;
        let op = OperatingPoint::from_state(&layout, &x, time);
        let mode = AssemblyMode::Linearized(op);
        let steps = horizons.prediction.min(total - start);
        if steps < horizons.prediction && !truncated {
            log::warn!(
                "prediction horizon truncated at the end of the trace ({steps} of {} steps)",
                horizons.prediction
            );
            truncated = true;
        }
        // Assemble the horizon, reusing matrices within a hydraulic step when possible.
        let mut owned: Vec<SystemMatrices> = Vec::new();
        let mut which = Vec::with_capacity(steps);
        let mut last: Option<(usize, usize)> = None;
        for h in 0..steps {
            let i = start + h;
            let (k, j) = (i / sub, i % sub);
            let reuse =
                last.is_some_and(|(lk, _)| lk == k) && owned.last().is_some_and(|m| m.whole_step);
            if !reuse {
                owned.push(assemble_system(
                    topo,
                    trace,
                    plan,
                    params,
                    k,
                    j,
                    spec.transport,
                    &mode,
                )?);
                last = Some((k, j));
            }
            which.push(owned.len() - 1);
        }
        let model = HorizonModel {
            mats: which.iter().map(|&w| &owned[w]).collect(),
            weights: (0..steps)
                .map(|h| &weights.steps[(start + h) / sub])
                .collect(),
            carriers: (0..steps)
                .map(|h| carriers(topo, trace, (start + h) / sub))
                .collect(),
            disturbances: (0..steps).map(|h| disturbance(start + h)).collect(),
        };
        let qp = build_qp(&model, &structure, spec, &x, &u_prev)?;
        let res = solve_qp(&qp, spec.tolerance, spec.max_iterations)?;
        let mut slack: BTreeMap<SlackClass, f64> = BTreeMap::new();
        let nv = structure.input_vars();
        let mut slack_cost = 0.0;
        for (s, (class, _)) in qp.slacks.iter().enumerate() {
            let v = res.z[nv + s].max(0.0);
            let v = if v <= 1e-9 { 0.0 } else { v };
            *slack.entry(*class).or_default() += v;
            slack_cost += spec.slack_penalty * v;
        }
        let status = if res.status == QpStatus::Optimal && slack.values().any(|v| *v > 0.0) {
            QpStatus::InfeasibleSoft
        } else {
            res.status
        };
        if status != QpStatus::Optimal {
            log::warn!("control instant t={time}: {}", status.tag());
        }
        sol.reports.push(SolveReport {
            time,
            status,
            iterations: res.iterations,
            residuals: res.residuals,
            slack,
            horizon: steps,
        });
        sol.cost.slack += slack_cost;

        let apply = horizons.cadence.min(steps);
        let inputs = DVector::from_fn(nv, |v, _| res.z[v].clamp(0.0, structure.input_max[v % nd]));
        for h in 0..apply {
            let i = start + h;
            let (k, j) = (i / sub, i % sub);
            let blk = structure.block_of(h);
            let mut u = disturbance(i);
            for (d, &b) in structure.decision.iter().enumerate() {
                // Exact box: interior iterates may sit a hair outside.
                u[b] = inputs[blk * nd + d];
            }
            let predicted = &qp.free[h] + &qp.gains[h] * &inputs;
            x = match spec.plant {
                Plant::Linear => step_linear(model.mats[h], &x, &u)?,
                Plant::Nonlinear => {
                    let key = (k, j);
                    let stale = match &plant_cache {
                        None => true,
                        Some((ck, m)) => ck.0 != k || (!m.whole_step && ck.1 != j),
                    };
                    if stale {
                        let m = assemble_system(
                            topo,
                            trace,
                            plan,
                            params,
                            k,
                            j,
                            spec.transport,
                            &AssemblyMode::Nonlinear,
                        )?;
                        plant_cache = Some((key, m));
                    }
                    let m = &plant_cache.as_ref().expect("assembled above").1;
                    let mut next = step_nonlinear(m, params, &x, &u)?;
                    clamp(&mut next);
                    next
                }
            };
            // Realized cost terms.
            let w = &weights.steps[k];
            let flows = carriers(topo, trace, k);
            for &b in &structure.decision {
                let mg = flows[b] * LITRES * plan.dt * u[b];
                sol.injected[b] += mg;
                sol.cost.injection += spec.unit_cost * mg;
            }
            let prev_u = sol
                .inputs
                .last()
                .cloned()
                .unwrap_or_else(|| DVector::zeros(nb));
            for &b in &structure.decision {
                let du = u[b] - prev_u[b];
                sol.cost.smoothness += w.r[b] * du * du;
            }
            for (i, q) in w.q.iter().enumerate() {
                if *q > 0.0 {
                    sol.cost.tracking += q * (x[i] - spec.reference).powi(2);
                }
            }
            sol.times.push((i + 1) as f64 * plan.dt);
            sol.inputs.push(u);
            sol.predicted.push(predicted);
            sol.realized.push(x.clone());
        }
        let last_u = sol.inputs.last().expect("applied at least one step");
        u_prev = DVector::from_fn(nd, |d, _| last_u[structure.decision[d]]);
        start += apply;
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_qp(h: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> QpInstance {
        let n = g.len();
        QpInstance::new(
            DMatrix::from_row_slice(n, n, h),
            DVector::from_row_slice(g),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DVector::from_row_slice(lo),
            DVector::from_row_slice(hi),
        )
    }

    #[test]
    fn unconstrained_scalar() {
        let qp = box_qp(&[1.0], &[-1.0], &[f64::NEG_INFINITY], &[f64::INFINITY]);
        let s = solve_qp(&qp, 1e-9, 50).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn active_upper_bound_multiplier() {
        let qp = box_qp(&[1.0], &[-10.0], &[f64::NEG_INFINITY], &[2.0]);
        let s = solve_qp(&qp, 1e-9, 100).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 2.0).abs() < 1e-7);
        assert!((s.upper_multipliers[0] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn linear_cost_sits_on_lower_bound() {
        let qp = box_qp(
            &[0.0, 0.0, 0.0, 0.0],
            &[1e-3, 2.0],
            &[0.0, 0.0],
            &[5.0, 5.0],
        );
        let s = solve_qp(&qp, 1e-9, 100).unwrap();
        assert!(s.z.amax() < 1e-7, "{}", s.z);
    }

    #[test]
    fn general_rows_are_respected() {
        // min ½|z|² − z₀ − z₁  s.t. z₀ + z₁ ≤ 1
        let qp = QpInstance::new(
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[-1.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_row_slice(&[1.0]),
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_element(2, f64::INFINITY),
        );
        let s = solve_qp(&qp, 1e-9, 100).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-7 && (s.z[1] - 0.5).abs() < 1e-7);
        assert!((s.row_multipliers[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let qp = box_qp(&[-1.0], &[0.0], &[0.0], &[1.0]);
        assert!(matches!(solve_qp(&qp, 1e-9, 10), Err(Error::Solver(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(ControlProblemSpec::default().validate().is_ok());
        let bad = ControlProblemSpec {
            chlorine_min: 5.0,
            control_horizon: Some(10),
            prediction_horizon: Some(5),
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("band") && msg.contains("exceeds"), "{msg}");
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ControlProblemSpec {
            reactant_cap: Some(1.0),
            block: Some(3),
            monitored: Some(vec!["J1".into()]),
            ..Default::default()
        };
        let text = toml::to_string(&spec).unwrap();
        let back: ControlProblemSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn blocks_cover_control_horizon() {
        let s = QpStructure {
            decision: vec![0],
            input_max: vec![1.0],
            monitored: Vec::new(),
            block: 4,
            control_steps: 10,
        };
        assert_eq!(s.blocks(), 3);
        assert_eq!(s.block_of(3), 0);
        assert_eq!(s.block_of(9), 2);
        assert_eq!(s.block_of(40), 2);
    }
}
