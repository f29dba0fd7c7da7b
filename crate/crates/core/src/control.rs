//! Controllability analysis and booster weighting.
//!
//! The dense functions ([`controllability_matrix`], [`gramian`],
//! [`target_gramian`], [`controllable_decomposition`]) work on any discrete
//! system `x' = A x + B u`. [`booster_weights`] applies the same ideas to the
//! assembled network model without forming dense n×n matrices: only the
//! columns `A_d^τ b_j` and their target rows are ever built.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{assemble_system, AssemblyMode, OperatingPoint, ReactionParams, StateLayout};
use crate::error::{Error, Result};
use crate::linalg::{
    columns_to_matrix, complete_basis, range_basis, singular_values, spmv, symmetric_eigenvalues,
    RANK_TOLERANCE,
};
use crate::network::{HydraulicTrace, NetworkTopology, NodeRef, Species};
use crate::transport::DiscretizationPlan;

// ---- dense analysis ------------------------------------------------------------

/// `[B, AB, A²B, …, A^(horizon-1) B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let (n, m) = b.shape();
    let mut out = DMatrix::zeros(n, m * horizon);
    let mut block = b.clone();
    for k in 0..horizon {
        out.columns_mut(k * m, m).copy_from(&block);
        if k + 1 < horizon {
            block = a * &block;
        }
    }
    out
}

/// Finite-horizon Gramian `Σ_{τ<horizon} A^τ B Bᵀ (Aᵀ)^τ`, by the Stein
/// recursion `W ← A W Aᵀ + B Bᵀ`.
pub fn gramian(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let bbt = b * b.transpose();
    let mut w = DMatrix::zeros(a.nrows(), a.nrows());
    for _ in 0..horizon {
        w = a * &w * a.transpose() + &bbt;
    }
    0.5 * (&w + w.transpose())
}

/// `C_T W Cᵀ_T` for the unit selector of `targets`.
pub fn target_gramian(w: &DMatrix<f64>, targets: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(targets.len(), targets.len(), |i, j| {
        w[(targets[i], targets[j])]
    })
}

/// Orthogonal change of basis separating the reachable subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `T`, orthogonal; `T A Tᵀ` is block upper triangular
    pub transform: DMatrix<f64>,
    /// dimension of the controllable part
    pub controllable: usize,
}

impl Decomposition {
    /// `(T A T⁻¹, T B)`.
    pub fn apply(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = &self.transform;
        (t * a * t.transpose(), t * b)
    }

    /// Controllable block `(Ā₁₁, B̄₁)`.
    pub fn controllable_part(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.controllable;
        let (at, bt) = self.apply(a, b);
        (
            at.view((0, 0), (k, k)).into_owned(),
            bt.rows(0, k).into_owned(),
        )
    }
}

/// Orthonormal columns spanning `m`'s range, keeping directions with singular
/// value above `cutoff`.
/// Splits the state space into reachable and unreachable parts. The reachable
/// span is grown one power of `A` at a time, re-orthonormalized at each step;
/// directions count when their singular value exceeds `1e-10·σ_max`.
pub fn controllable_decomposition(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Decomposition {
    let n = a.nrows();
    let sigma_b = singular_values(b).first().copied().unwrap_or(0.0);
    let mut basis: Vec<DVector<f64>> = if sigma_b > 0.0 {
        range_basis(b, RANK_TOLERANCE * sigma_b)
    } else {
        Vec::new()
    };
    let mut frontier = basis.clone();
    while !frontier.is_empty() && basis.len() < n {
        let images = columns_to_matrix(&frontier.iter().map(|q| a * q).collect::<Vec<_>>(), n);
        // Remove what is already reachable, twice for stability.
        let mut residual = images.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.transpose() * &residual;
                residual -= q * proj;
            }
        }
        let scale = singular_values(&images).first().copied().unwrap_or(0.0);
        let fresh = range_basis(&residual, RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE));
        let mut added = Vec::new();
        for v in fresh {
            if let Some(q) = crate::linalg::orthogonalize(&basis, &v, 0.5) {
                basis.push(q.clone());
                added.push(q);
            }
        }
        frontier = added;
    }
    let k = basis.len();
    let full = complete_basis(&basis, n);
    Decomposition {
        transform: columns_to_matrix(&full, n).transpose(),
        controllable: k,
    }
}

/// Rank of a symmetric PSD matrix and the sum of its eigenvalues above
/// `cutoff`.
fn rank_and_trace(w: &DMatrix<f64>, cutoff: f64) -> (usize, f64) {
    let eig = symmetric_eigenvalues(w);
    let kept: Vec<f64> = eig.into_iter().filter(|&e| e > cutoff).collect();
    (kept.len(), kept.iter().sum())
}

// ---- targets -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetCategory {
    DeadEnd,
    LowInitialChlorine,
    HighContaminant,
    ElevatedThms,
}

impl TargetCategory {
    pub fn tag(self) -> &'static str {
        match self {
            TargetCategory::DeadEnd => "dead-end",
            TargetCategory::LowInitialChlorine => "low-initial-chlorine",
            TargetCategory::HighContaminant => "high-contaminant",
            TargetCategory::ElevatedThms => "elevated-thms",
        }
    }
}

/// Target set as written in a targets file: element ids, not state indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub id: String,
    pub category: TargetCategory,
    /// priority index η, > 0
    pub priority: f64,
    pub members: Vec<String>,
}

impl TargetSpec {
    pub fn new(id: &str, category: TargetCategory, priority: f64, members: &[&str]) -> Self {
        TargetSpec {
            id: id.into(),
            category,
            priority,
            members: members.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsFile {
    #[serde(default)]
    targets: Vec<TargetSpec>,
}

pub fn targets_from_toml(text: &str, origin: &str) -> Result<Vec<TargetSpec>> {
    let file: TargetsFile = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
    Ok(file.targets)
}

pub fn targets_to_toml(targets: &[TargetSpec]) -> String {
    toml::to_string(&TargetsFile {
        targets: targets.to_vec(),
    })
    .expect("targets serialize")
}

pub fn load_targets(path: impl AsRef<Path>) -> Result<Vec<TargetSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    targets_from_toml(&text, &path.display().to_string())
}

/// Target set resolved against a state layout: chlorine state indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub id: String,
    pub category: TargetCategory,
    pub priority: f64,
    pub members: Vec<usize>,
    /// tank index of each member, if it is a tank
    pub member_tanks: Vec<Option<usize>>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Checks target specs and maps their members to chlorine states.
pub fn resolve_targets(
    specs: &[TargetSpec],
    topo: &NetworkTopology,
    layout: &StateLayout,
) -> Result<Vec<TargetSet>> {
    let lowest_other = specs
        .iter()
        .filter(|s| s.category != TargetCategory::ElevatedThms)
        .map(|s| s.priority)
        .fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        if !(spec.priority > 0.0 && spec.priority.is_finite()) {
            return Err(Error::Validation(format!(
                "target set '{}' needs a positive priority",
                spec.id
            )));
        }
        if spec.members.is_empty() {
            return Err(Error::Validation(format!(
                "target set '{}' is empty",
                spec.id
            )));
        }
        if spec.category == TargetCategory::ElevatedThms && spec.priority > lowest_other {
            return Err(Error::Validation(format!(
                "target set '{}' covers elevated THMs and must carry the lowest priority",
                spec.id
            )));
        }
        let mut members = Vec::new();
        let mut member_tanks = Vec::new();
        for id in &spec.members {
            let locs = layout.locations_of(topo, id).ok_or_else(|| {
                Error::Validation(format!(
                    "target set '{}' references unknown element '{id}'",
                    spec.id
                ))
            })?;
            let tank = match topo.node(id) {
                Some(NodeRef::Tank(t)) => Some(t),
                _ => None,
            };
            for l in locs {
                members.push(layout.index(Species::Chlorine, l));
                member_tanks.push(tank);
            }
        }
        out.push(TargetSet {
            id: spec.id.clone(),
            category: spec.category,
            priority: spec.priority,
            members,
            member_tanks,
        });
    }
    Ok(out)
}

// ---- weights -------------------------------------------------------------------------

/// How booster scores map to the diagonal of R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMapping {
    /// r_j = w_j / Σw
    #[default]
    Literal,
    /// r_j ∝ 1/(w_j + ε₀), normalized
    Inverse,
}

impl FromStr for WeightMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(WeightMapping::Literal),
            "inverse" => Ok(WeightMapping::Inverse),
            other => Err(Error::Validation(format!(
                "unknown weight mapping '{other}'"
            ))),
        }
    }
}

/// Offset in the inverse mapping.
pub const INVERSE_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightOptions {
    pub mapping: WeightMapping,
    /// Q weight of targeted chlorine states, multiplied by the set priority
    pub q_target: f64,
    /// Q weight of every other chlorine state
    pub q_base: f64,
    /// overall Q scale relative to R
    pub q_scale: f64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            mapping: WeightMapping::Literal,
            q_target: 10.0,
            q_base: 1.0,
            q_scale: 1.0,
        }
    }
}

/// Weights for one hydraulic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepWeights {
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub steps: Vec<StepWeights>,
}

impl WeightSchedule {
    /// Uniform R and the given Q at every step; the unweighted baseline.
    pub fn uniform(steps: usize, boosters: usize, q: Vec<f64>) -> Self {
        let r = vec![
            if boosters > 0 {
                1.0 / boosters as f64
            } else {
                0.0
            };
            boosters
        ];
        WeightSchedule {
            steps: (0..steps)
                .map(|_| StepWeights {
                    r: r.clone(),
                    q: q.clone(),
                    scores: vec![0.0; boosters],
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }
}

/// R diagonal from raw scores.
pub fn r_from_scores(scores: &[f64], mapping: WeightMapping) -> Vec<f64> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    match mapping {
        WeightMapping::Literal => scores.iter().map(|w| w / total).collect(),
        WeightMapping::Inverse => {
            let inv: Vec<f64> = scores.iter().map(|w| 1.0 / (w + INVERSE_OFFSET)).collect();
            let s: f64 = inv.iter().sum();
            inv.iter().map(|v| v / s).collect()
        }
    }
}

/// Q diagonal over the full state.
pub fn q_diagonal(
    layout: &StateLayout,
    targets: &[TargetSet],
    options: &WeightOptions,
) -> Vec<f64> {
    let n = layout.locations();
    let mut q = vec![0.0; layout.dim()];
    for l in 0..n {
        q[layout.index(Species::Chlorine, l)] = options.q_base;
    }
    let mut boosted = vec![0.0f64; layout.dim()];
    for t in targets {
        for &m in &t.members {
            boosted[m] = boosted[m].max(t.priority * options.q_target);
        }
    }
    for (qi, b) in q.iter_mut().zip(boosted) {
        if b > 0.0 {
            *qi = b;
        }
        *qi *= options.q_scale;
    }
    q
}

/// Rank and trace of one (booster, step, target set) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramianResult {
    pub booster: String,
    pub step: usize,
    pub target: String,
    pub rank: usize,
    /// number of target states considered (tanks drop out while draining)
    pub size: usize,
    pub full_rank: bool,
    pub trace: f64,
    /// trace divided by the squared booster carrier flow
    pub normalized_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityReport {
    pub horizon: usize,
    pub results: Vec<GramianResult>,
    pub schedule: WeightSchedule,
}

impl ControllabilityReport {
    /// One line per (step, booster, target): the tile chart data.
    pub fn tiles_csv(&self) -> String {
        let mut out =
            String::from("step,booster,target,rank,size,full_rank,trace,normalized_trace\n");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:e},{:e}",
                r.step,
                r.booster,
                r.target,
                r.rank,
                r.size,
                r.full_rank as u8,
                r.trace,
                r.normalized_trace
            );
        }
        out
    }

    pub fn result(&self, step: usize, booster: &str, target: &str) -> Option<&GramianResult> {
        self.results
            .iter()
            .find(|r| r.step == step && r.booster == booster && r.target == target)
    }
}

/// Booster scores and MPC weights for every hydraulic step. Each chlorine
/// booster is analysed alone on the model linearized about `ops[k]` (a single
/// entry is reused for every step), over a horizon of one hydraulic step.
#[allow(clippy::too_many_arguments)]
pub fn booster_weights(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    plan: &DiscretizationPlan,
    params: &ReactionParams,
    targets: &[TargetSpec],
    ops: &[OperatingPoint],
    options: &WeightOptions,
) -> Result<ControllabilityReport> {
    let layout = StateLayout::new(topo, plan);
    let sets = resolve_targets(targets, topo, &layout)?;
    if ops.is_empty() || (ops.len() != 1 && ops.len() != trace.len()) {
        return Err(Error::Dimension(format!(
            "need one operating point or one per hydraulic step, got {}",
            ops.len()
        )));
    }
    let horizon = plan.substeps;
    let q = q_diagonal(&layout, &sets, options);
    let nb = topo.boosters().len();
    let mut results = Vec::new();
    let mut steps = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        let op = if ops.len() == 1 { &ops[0] } else { &ops[k] };
        let mats = assemble_system(
            topo,
            trace,
            plan,
            params,
            k,
            0,
            plan.transport,
            &AssemblyMode::Linearized(op.clone()),
        )?;
        let draining: Vec<bool> = trace.steps[k]
            .tank_net_inflow(topo)
            .iter()
            .map(|q| *q < 0.0)
            .collect();
        let mut scores = vec![0.0; nb];
        for (j, spec) in topo.boosters().iter().enumerate() {
            if spec.species != Species::Chlorine {
                continue;
            }
            // Columns A_d^τ b_j, τ < horizon.
            let mut col = DVector::from_fn(mats.dim(), |i, _| {
                let row = mats.b.row(i);
                row.col_indices()
                    .iter()
                    .zip(row.values())
                    .find(|(c, _)| **c == j)
                    .map(|(_, v)| *v)
                    .unwrap_or(0.0)
            });
            mats.solve_e(&mut col)?;
            let mut cols = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut next = DVector::from_vec(spmv(&mats.a, col.as_slice()));
                cols.push(col);
                mats.solve_e(&mut next)?;
                col = next;
            }
            let reach = columns_to_matrix(&cols, mats.dim());
            let sigma = singular_values(&reach).first().copied().unwrap_or(0.0);
            let cutoff = RANK_TOLERANCE * sigma * sigma;
            let carrier = match topo.booster_host(j) {
                NodeRef::Tank(_) => trace.steps[k].booster_volumes[j] / trace.step_length,
                _ => trace.steps[k].booster_flows[j],
            };
            for set in &sets {
                let rows: Vec<usize> = set
                    .members
                    .iter()
                    .zip(&set.member_tanks)
                    .filter(|(_, t)| t.is_none_or(|t| !draining[t]))
                    .map(|(m, _)| *m)
                    .collect();
                let g = DMatrix::from_fn(rows.len(), horizon, |r, c| reach[(rows[r], c)]);
                let w_t = &g * g.transpose();
                let (rank, trace_r) = if sigma > 0.0 {
                    rank_and_trace(&w_t, cutoff)
                } else {
                    (0, 0.0)
                };
                let full = !rows.is_empty() && rank == rows.len();
                let total_trace = if full { w_t.trace() } else { trace_r };
                scores[j] += set.priority * rank as f64 * total_trace;
                results.push(GramianResult {
                    booster: spec.id.clone(),
                    step: k,
                    target: set.id.clone(),
                    rank,
                    size: rows.len(),
                    full_rank: full,
                    trace: total_trace,
                    normalized_trace: if carrier > 0.0 {
                        total_trace / (carrier * carrier)
                    } else {
                        0.0
                    },
                });
            }
        }
        steps.push(StepWeights {
            r: r_from_scores(&scores, options.mapping),
            q: q.clone(),
            scores,
        });
    }
    Ok(ControllabilityReport {
        horizon,
        results,
        schedule: WeightSchedule { steps },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_powers_and_gramian() {
        let a = m(1, 1, &[0.5]);
        let b = m(1, 1, &[1.0]);
        assert_eq!(
            controllability_matrix(&a, &b, 3),
            m(1, 3, &[1.0, 0.5, 0.25])
        );
        assert_eq!(controllability_matrix(&a, &b, 1), b);
        assert!((gramian(&a, &b, 2)[(0, 0)] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn nilpotent_third_block_is_zero() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.3, 0.7]);
        let c = controllability_matrix(&a, &b, 3);
        assert_eq!(c.column(2).norm(), 0.0);
    }

    #[test]
    fn decoupled_modes_split() {
        let a = m(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let b = m(2, 1, &[1.0, 0.0]);
        let d = controllable_decomposition(&a, &b);
        assert_eq!(d.controllable, 1);
        assert!((d.transform[(0, 0)].abs() - 1.0).abs() < 1e-12);
        let zero = controllable_decomposition(&a, &m(2, 1, &[0.0, 0.0]));
        assert_eq!(zero.controllable, 0);
    }

    #[test]
    fn target_gramian_selects() {
        let w = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(target_gramian(&w, &[2]), m(1, 1, &[8.0]));
        assert_eq!(target_gramian(&w, &[0, 1, 2]), w);
    }

    #[test]
    fn r_mappings() {
        assert_eq!(r_from_scores(&[3.0], WeightMapping::Literal), vec![1.0]);
        assert_eq!(
            r_from_scores(&[0.0, 0.0], WeightMapping::Literal),
            vec![0.5, 0.5]
        );
        let lit = r_from_scores(&[1.0, 3.0], WeightMapping::Literal);
        assert_eq!(lit, vec![0.25, 0.75]);
        let inv = r_from_scores(&[1.0, 3.0], WeightMapping::Inverse);
        assert!(inv[0] > inv[1] && (inv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thm_sets_must_have_lowest_priority() {
        let topo = crate::fixtures::single_booster().topology;
        let layout = StateLayout::from_segments(&topo, &[1, 1]);
        let bad = [
            TargetSpec::new("a", TargetCategory::DeadEnd, 1.0, &["J2"]),
            TargetSpec::new("b", TargetCategory::ElevatedThms, 2.0, &["J2"]),
        ];
        assert!(matches!(
            resolve_targets(&bad, &topo, &layout),
            Err(Error::Validation(_))
        ));
        let unknown = [TargetSpec::new("a", TargetCategory::DeadEnd, 1.0, &["J9"])];
        assert!(resolve_targets(&unknown, &topo, &layout).is_err());
        let text = targets_to_toml(&bad);
        assert_eq!(targets_from_toml(&text, "inline").unwrap(), bad.to_vec());
    }
}
