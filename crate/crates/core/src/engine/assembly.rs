use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::engine::layout::StateLayout;
use crate::engine::reaction::{linearized_reaction, OperatingPoint, ReactionParams};
use crate::error::{Error, Result};
use crate::linalg::{block_diagonal, Triplets};
use crate::network::{HydraulicStep, HydraulicTrace, LinkRef, NetworkTopology, NodeRef, Species};
use crate::transport::{
    stencil_coefficients, DiscretizationPlan, Scheme, SchemeFamily, TransportMode,
    STABILITY_TOLERANCE,
};

/// How the reaction term enters the assembled system.
#[derive(Debug, Clone, PartialEq)]
pub enum AssemblyMode {
    /// `f(x)` is evaluated by [`step_nonlinear`](crate::engine::step_nonlinear)
    Nonlinear,
    /// reaction linearized about the operating point and folded into Ã and Φ
    Linearized(OperatingPoint),
}

/// One water-quality step `E x' = A x + B u + f(x)` (or `E x' = Ã x + B u + Φ`)
/// with sensor map `y = C x`.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub e: CsrMatrix<f64>,
    /// A in nonlinear mode, Ã in linearized mode
    pub a: CsrMatrix<f64>,
    pub b: CsrMatrix<f64>,
    pub c: CsrMatrix<f64>,
    /// zero in nonlinear mode
    pub phi: DVector<f64>,
    pub hydraulic_step: usize,
    pub substep: usize,
    /// true when the matrices hold for every substep of the hydraulic step
    pub whole_step: bool,
    pub dt: f64,
    pub family: SchemeFamily,
    pub linearized: bool,
    /// scheme of each pipe
    pub schemes: Vec<Scheme>,
    pub(crate) local: LocalOperators,
}

/// Per-location operators shared by the three species blocks.
#[derive(Debug, Clone)]
pub(crate) struct LocalOperators {
    pub e: CsrMatrix<f64>,
    pub a: CsrMatrix<f64>,
    /// locations × boosters, applied only to the booster's own species
    pub b: CsrMatrix<f64>,
    /// maps reaction rates to rows: f = F·r(x)
    pub f: CsrMatrix<f64>,
    pub rates: Vec<Option<f64>>,
    pub booster_species: Vec<Species>,
    pub lu: Option<faer::sparse::linalg::solvers::Lu<usize, f64>>,
}

impl SystemMatrices {
    pub fn dim(&self) -> usize {
        self.e.nrows()
    }

    pub fn locations(&self) -> usize {
        self.local.e.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Replaces the sensor map with unit selectors of `states`.
    pub fn with_sensors(mut self, states: &[usize]) -> Self {
        let mut t = Triplets::new(states.len(), self.dim());
        for (r, &s) in states.iter().enumerate() {
            t.push(r, s, 1.0);
        }
        self.c = t.to_csr();
        self
    }

    /// Solves `E z = rhs` for all three species blocks at once.
    pub fn solve_e(&self, rhs: &mut DVector<f64>) -> Result<()> {
        let n = self.locations();
        let mut m = DMatrix::from_column_slice(3 * n, 1, rhs.as_slice());
        self.solve_e_matrix(&mut m)?;
        rhs.copy_from(&m.column(0));
        Ok(())
    }

    /// Column-wise `E Z = rhs`.
    pub fn solve_e_matrix(&self, rhs: &mut DMatrix<f64>) -> Result<()> {
        let Some(lu) = &self.local.lu else {
            return Ok(());
        };
        let n = self.locations();
        if rhs.nrows() != 3 * n {
            return Err(Error::Dimension(format!(
                "right-hand side has {} rows, E has {}",
                rhs.nrows(),
                3 * n
            )));
        }
        let cols = rhs.ncols();
        let mut work = faer::Mat::<f64>::from_fn(n, 3 * cols, |i, j| rhs[((j % 3) * n + i, j / 3)]);
        lu.solve_in_place(work.as_mut());
        for j in 0..3 * cols {
            for i in 0..n {
                let v = work[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "singular E at hydraulic step {}",
                        self.hydraulic_step
                    )));
                }
                rhs[((j % 3) * n + i, j / 3)] = v;
            }
        }
        Ok(())
    }
}

/// Default sensors: chlorine at every junction and tank.
pub fn default_sensors(topo: &NetworkTopology, layout: &StateLayout) -> Vec<usize> {
    (0..topo.junctions().len())
        .map(|j| layout.junction(j))
        .chain((0..topo.tanks().len()).map(|t| layout.tank(t)))
        .map(|l| layout.index(Species::Chlorine, l))
        .collect()
}

/// Tank volumes at `substep` of hydraulic step `k`. Volumes change linearly
/// within a hydraulic step.
pub fn tank_volumes(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    k: usize,
    elapsed: f64,
) -> Vec<f64> {
    let step = &trace.steps[k];
    let net = step.tank_net_inflow(topo);
    let vb = step.tank_booster_volume(topo);
    step.tank_volumes
        .iter()
        .enumerate()
        .map(|(t, v)| v + (net[t] + vb[t] / trace.step_length) * elapsed)
        .collect()
}

/// True when some tank volume changes during hydraulic step `k`, so the
/// matrices must be rebuilt every water-quality step.
pub fn volumes_vary(topo: &NetworkTopology, trace: &HydraulicTrace, k: usize) -> bool {
    let step = &trace.steps[k];
    let net = step.tank_net_inflow(topo);
    let vb = step.tank_booster_volume(topo);
    net.iter().zip(&vb).any(|(q, b)| *q != 0.0 || *b != 0.0)
}

#[derive(Debug, Clone, Default)]
struct Row {
    a: Vec<(usize, f64)>,
    b: Vec<(usize, f64)>,
    f: Vec<(usize, f64)>,
}

impl Row {
    fn unit(loc: usize) -> Row {
        Row {
            a: vec![(loc, 1.0)],
            ..Default::default()
        }
    }

    fn add(&mut self, other: &Row, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.a.extend(other.a.iter().map(|&(i, v)| (i, v * scale)));
        self.b.extend(other.b.iter().map(|&(i, v)| (i, v * scale)));
        self.f.extend(other.f.iter().map(|&(i, v)| (i, v * scale)));
    }
}

#[derive(Clone)]
enum Memo {
    Empty,
    Busy,
    Done(Row),
}

struct Builder<'a> {
    topo: &'a NetworkTopology,
    layout: StateLayout,
    plan: &'a DiscretizationPlan,
    step: &'a HydraulicStep,
    k: usize,
    dt: f64,
    transport: TransportMode,
    volume_now: Vec<f64>,
    volume_next: Vec<f64>,
    /// booster volume entering each booster's tank during this water-quality step
    booster_volume: Vec<f64>,
    incidence: Vec<Vec<LinkRef>>,
    boosters_at: Vec<Vec<usize>>,
    schemes: Vec<Scheme>,
    /// explicit family: node values at t, by node ordinal
    now: Vec<Memo>,
    /// explicit family: rows at t+Δt, by location
    next: Vec<Memo>,
}

impl<'a> Builder<'a> {
    fn link_flow(&self, link: LinkRef) -> f64 {
        match link {
            LinkRef::Pipe(p) if !self.plan.flowing(self.k, p) => 0.0,
            _ => self.step.link_flow(self.topo, link),
        }
    }

    /// (upstream, downstream) in the direction of flow.
    fn flow_ends(&self, link: LinkRef) -> (NodeRef, NodeRef) {
        let (a, b) = self.topo.link_ends_of(link);
        if self.link_flow(link) >= 0.0 {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Location carrying the concentration that leaves `link` at its
    /// downstream end.
    fn outlet(&self, link: LinkRef) -> usize {
        match link {
            LinkRef::Pipe(p) => {
                let s = self.layout.segments(p);
                if self.link_flow(link) >= 0.0 {
                    self.layout.segment(p, s - 1)
                } else {
                    self.layout.segment(p, 0)
                }
            }
            LinkRef::Pump(i) => self.layout.pump(i),
            LinkRef::Valve(i) => self.layout.valve(i),
        }
    }

    /// Inflowing links with their flow magnitude, and the mixing denominator
    /// (demand plus outflows).
    fn junction_mixing(&self, j: usize) -> (Vec<(LinkRef, f64)>, f64) {
        let node = NodeRef::Junction(j);
        let ord = self.topo.node_ordinal(node);
        let mut inflow = Vec::new();
        let mut den = self.step.demands[j];
        for &link in &self.incidence[ord] {
            let q = self.link_flow(link);
            if q == 0.0 {
                continue;
            }
            let (up, down) = self.flow_ends(link);
            if down == node {
                inflow.push((link, q.abs()));
            } else if up == node {
                den += q.abs();
            }
        }
        (inflow, den)
    }

    fn junction_boosters(&self, j: usize, den: f64) -> Vec<(usize, f64)> {
        let ord = self.topo.node_ordinal(NodeRef::Junction(j));
        self.boosters_at[ord]
            .iter()
            .map(|&b| (b, self.step.booster_flows[b] / den))
            .filter(|(_, v)| *v != 0.0)
            .collect()
    }

    fn tank_mixing(&self, t: usize) -> (Vec<(LinkRef, f64)>, f64) {
        let node = NodeRef::Tank(t);
        let ord = self.topo.node_ordinal(node);
        let mut inflow = Vec::new();
        let mut out = 0.0;
        for &link in &self.incidence[ord] {
            let q = self.link_flow(link);
            if q == 0.0 {
                continue;
            }
            let (up, down) = self.flow_ends(link);
            if down == node {
                inflow.push((link, q.abs()));
            } else if up == node {
                out += q.abs();
            }
        }
        (inflow, out)
    }

    fn cycle_error(&self, what: String) -> Error {
        Error::Validation(format!(
            "zero-length cycle through {what} at hydraulic step {}",
            self.k
        ))
    }

    // ---- explicit family -------------------------------------------------

    /// Concentration of `node` at time t as a combination of current states and
    /// inputs, using the current step's flows.
    fn node_now(&mut self, node: NodeRef) -> Result<Row> {
        let ord = self.topo.node_ordinal(node);
        match &self.now[ord] {
            Memo::Done(r) => return Ok(r.clone()),
            Memo::Busy => return Err(self.cycle_error(self.topo.node_id(node).to_string())),
            Memo::Empty => {}
        }
        let loc = self.layout.node(node);
        let row = match node {
            NodeRef::Junction(j) => {
                let (inflow, den) = self.junction_mixing(j);
                if den > 0.0 {
                    self.now[ord] = Memo::Busy;
                    let mut row = Row::default();
                    for (link, q) in inflow {
                        let value = self.link_now(link)?;
                        row.add(&value, q / den);
                    }
                    row.b.extend(self.junction_boosters(j, den));
                    row
                } else {
                    Row::unit(loc)
                }
            }
            _ => Row::unit(loc),
        };
        self.now[ord] = Memo::Done(row.clone());
        Ok(row)
    }

    fn link_now(&mut self, link: LinkRef) -> Result<Row> {
        match link {
            LinkRef::Pipe(_) => Ok(Row::unit(self.outlet(link))),
            _ => {
                let (up, _) = self.flow_ends(link);
                self.node_now(up)
            }
        }
    }

    /// Row of location `loc` at t+Δt. Segment, tank and reservoir rows are
    /// filled beforehand; junction and link rows are composed on demand.
    fn row_next(&mut self, loc: usize) -> Result<Row> {
        match &self.next[loc] {
            Memo::Done(r) => return Ok(r.clone()),
            Memo::Busy => return Err(self.cycle_error(format!("location {loc}"))),
            Memo::Empty => {}
        }
        use crate::engine::layout::Element;
        self.next[loc] = Memo::Busy;
        let row = match self.layout.element(loc) {
            Element::Junction(j) => {
                let (inflow, den) = self.junction_mixing(j);
                if den > 0.0 {
                    let mut row = Row::default();
                    for (link, q) in inflow {
                        let inner = self.row_next(self.outlet(link))?;
                        row.add(&inner, q / den);
                    }
                    row.b.extend(self.junction_boosters(j, den));
                    row
                } else {
                    Row::unit(loc)
                }
            }
            Element::Pump(i) => self.link_row_next(LinkRef::Pump(i), loc)?,
            Element::Valve(i) => self.link_row_next(LinkRef::Valve(i), loc)?,
            _ => unreachable!("segment, tank and reservoir rows are prefilled"),
        };
        self.next[loc] = Memo::Done(row.clone());
        Ok(row)
    }

    fn link_row_next(&mut self, link: LinkRef, loc: usize) -> Result<Row> {
        if self.link_flow(link) == 0.0 {
            return Ok(Row::unit(loc));
        }
        let (up, _) = self.flow_ends(link);
        self.row_next(self.layout.node(up))
    }

    // ---- shared ------------------------------------------------------------

    fn check_explicit(&self, p: usize, scheme: Scheme, courant: f64, alpha: f64) -> Result<()> {
        let tol = STABILITY_TOLERANCE;
        let id = &self.topo.pipes()[p].id;
        let ok = match scheme {
            Scheme::ExplicitUpwind => courant <= 1.0 + tol,
            Scheme::LaxWendroff => {
                courant * courant <= 2.0 * alpha * (1.0 + tol)
                    && courant * courant + 2.0 * alpha <= 1.0 + tol
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Planning(format!(
                "plan is unstable for {scheme} on pipe '{id}' at hydraulic step {} \
                 (Courant {courant:.4}, dispersion number {alpha:.4}); plan with this transport mode",
                self.k
            )))
        }
    }
}

/// Assembles the system for water-quality step `substep` of hydraulic step
/// `step`. Matrices are flagged `whole_step` when no tank volume varies, in
/// which case they hold for every substep.
#[allow(clippy::too_many_arguments)]
pub fn assemble_system(
    topo: &NetworkTopology,
    trace: &HydraulicTrace,
    plan: &DiscretizationPlan,
    params: &ReactionParams,
    step: usize,
    substep: usize,
    transport: TransportMode,
    mode: &AssemblyMode,
) -> Result<SystemMatrices> {
    if step >= trace.len() || step >= plan.samples.len() {
        return Err(Error::Dimension(format!(
            "hydraulic step {step} outside trace of {} steps",
            trace.len()
        )));
    }
    if plan.segments.len() != topo.pipes().len() {
        return Err(Error::Dimension(
            "plan does not match the network's pipes".into(),
        ));
    }
    let layout = StateLayout::new(topo, plan);
    let n = layout.locations();
    let nu = topo.boosters().len();
    let hstep = &trace.steps[step];
    let dt = plan.dt;
    let elapsed = substep as f64 * dt;
    let volume_now = tank_volumes(topo, trace, step, elapsed);
    let volume_next = tank_volumes(topo, trace, step, elapsed + dt);
    let booster_volume = hstep
        .booster_volumes
        .iter()
        .map(|v| v * dt / trace.step_length)
        .collect();
    let schemes: Vec<Scheme> = (0..topo.pipes().len())
        .map(|p| plan.scheme(step, p, transport))
        .collect();

    let mut bld = Builder {
        topo,
        layout: layout.clone(),
        plan,
        step: hstep,
        k: step,
        dt,
        transport,
        volume_now,
        volume_next,
        booster_volume,
        incidence: topo.incidence(),
        boosters_at: topo.boosters_at(),
        schemes: schemes.clone(),
        now: vec![Memo::Empty; topo.node_count()],
        next: vec![Memo::Empty; n],
    };

    let mut e = Triplets::new(n, n);
    let mut a = Triplets::new(n, n);
    let mut b = Triplets::new(n, nu);
    let mut f = Triplets::new(n, n);
    match plan.family {
        SchemeFamily::Explicit => explicit_rows(&mut bld, &mut a, &mut b, &mut f)?,
        SchemeFamily::Implicit => implicit_rows(&mut bld, &mut e, &mut a, &mut b, &mut f)?,
    }
    if plan.family == SchemeFamily::Explicit {
        for l in 0..n {
            e.push(l, l, 1.0);
        }
    }

    let local_e = e.to_csr();
    let local_a = a.to_csr();
    let local_b = b.to_csr();
    let local_f = f.to_csr();
    let rates = params.location_rates(&layout);
    let booster_species: Vec<Species> = topo.boosters().iter().map(|b| b.species).collect();

    let lu = match plan.family {
        SchemeFamily::Explicit => None,
        SchemeFamily::Implicit => Some(factor(&local_e, topo, &layout, step)?),
    };

    // Full-size operators.
    let full_e = block_diagonal(&local_e, 3);
    let mut full_b = Triplets::new(3 * n, nu);
    for (i, row) in local_b.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            full_b.push(booster_species[j].index() * n + i, j, v);
        }
    }
    let mut phi = DVector::zeros(3 * n);
    let (full_a, linearized) = match mode {
        AssemblyMode::Nonlinear => (block_diagonal(&local_a, 3), false),
        AssemblyMode::Linearized(op) => {
            if op.chlorine.len() != n || op.reactant.len() != n {
                return Err(Error::Dimension(
                    "operating point does not match the state layout".into(),
                ));
            }
            let mut t = Triplets::new(3 * n, 3 * n);
            for s in 0..3 {
                for (i, row) in local_a.row_iter().enumerate() {
                    for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                        t.push(s * n + i, s * n + j, v);
                    }
                }
            }
            for (i, row) in local_f.row_iter().enumerate() {
                for (&l, &w) in row.col_indices().iter().zip(row.values()) {
                    let Some(k) = rates[l] else { continue };
                    let lin = linearized_reaction(params, k, op.chlorine[l], op.reactant[l]);
                    for s in 0..3 {
                        t.push(s * n + i, l, w * lin.by_chlorine[s]);
                        t.push(s * n + i, n + l, w * lin.by_reactant[s]);
                        phi[s * n + i] += w * lin.constant[s];
                    }
                }
            }
            (t.to_csr(), true)
        }
    };

    let sensors = default_sensors(topo, &layout);
    let mut c = Triplets::new(sensors.len(), 3 * n);
    for (r, &s) in sensors.iter().enumerate() {
        c.push(r, s, 1.0);
    }

    Ok(SystemMatrices {
        e: full_e,
        a: full_a,
        b: full_b.to_csr(),
        c: c.to_csr(),
        phi,
        hydraulic_step: step,
        substep,
        whole_step: !volumes_vary(topo, trace, step),
        dt,
        family: plan.family,
        linearized,
        schemes,
        local: LocalOperators {
            e: local_e,
            a: local_a,
            b: local_b,
            f: local_f,
            rates,
            booster_species,
            lu,
        },
    })
}

fn factor(
    e: &CsrMatrix<f64>,
    topo: &NetworkTopology,
    layout: &StateLayout,
    step: usize,
) -> Result<faer::sparse::linalg::solvers::Lu<usize, f64>> {
    let n = e.nrows();
    let entries: Vec<Triplet<usize, usize, f64>> = e
        .triplet_iter()
        .map(|(r, c, &v)| Triplet::new(r, c, v))
        .collect();
    let singular = |at: usize| {
        Error::Numerical(format!(
            "singular E near row '{}' at hydraulic step {step}",
            layout.label(topo, at.min(n.saturating_sub(1)))
        ))
    };
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &entries).map_err(|err| {
        Error::Numerical(format!("cannot build E at hydraulic step {step}: {err:?}"))
    })?;
    let lu = mat.sp_lu().map_err(|_| singular(0))?;
    // Pivot-free check: a unit probe must come back finite with a small residual.
    let scale = e.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut probe = faer::Mat::<f64>::from_fn(n, 1, |_, _| 1.0);
    lu.solve_in_place(probe.as_mut());
    let z = DVector::from_fn(n, |i, _| probe[(i, 0)]);
    let back = e * &z;
    let (mut worst, mut at) = (0.0f64, 0);
    for i in 0..n {
        let r = if z[i].is_finite() {
            (back[i] - 1.0).abs()
        } else {
            f64::INFINITY
        };
        if r > worst {
            worst = r;
            at = i;
        }
    }
    if n > 0 && (worst > 1e-6 || z.amax() > 1e13 * scale) {
        return Err(singular(at));
    }
    Ok(lu)
}

/// Per-pipe (courant, alpha) for the scheme in use.
fn pipe_numbers(bld: &Builder<'_>, p: usize) -> (f64, f64) {
    let courant = bld.plan.courant(bld.k, p);
    let alpha = if bld.schemes[p].is_dispersive() {
        bld.plan.dispersion_number(bld.k, p)
    } else {
        0.0
    };
    (courant, alpha)
}

/// Segment locations of pipe `p` in flow order, with its upstream and
/// downstream nodes.
fn flow_order(bld: &Builder<'_>, p: usize) -> (Vec<usize>, NodeRef, NodeRef) {
    let s = bld.layout.segments(p);
    let forward = bld.step.velocities[p] >= 0.0;
    let locs: Vec<usize> = if forward {
        (0..s).map(|i| bld.layout.segment(p, i)).collect()
    } else {
        (0..s).rev().map(|i| bld.layout.segment(p, i)).collect()
    };
    let (up, down) = bld.flow_ends(LinkRef::Pipe(p));
    (locs, up, down)
}

fn explicit_rows(
    bld: &mut Builder<'_>,
    a: &mut Triplets,
    b: &mut Triplets,
    f: &mut Triplets,
) -> Result<()> {
    let topo = bld.topo;
    let dt = bld.dt;
    // Pipe segments.
    for p in 0..topo.pipes().len() {
        let scheme = bld.schemes[p];
        if scheme == Scheme::Reaction {
            for s in 0..bld.layout.segments(p) {
                let loc = bld.layout.segment(p, s);
                let mut row = Row::unit(loc);
                row.f.push((loc, dt));
                bld.next[loc] = Memo::Done(row);
            }
            continue;
        }
        let (courant, alpha) = pipe_numbers(bld, p);
        bld.check_explicit(p, scheme, courant, alpha)?;
        let coef = stencil_coefficients(scheme, courant, alpha);
        let (locs, up, down) = flow_order(bld, p);
        let last = locs.len() - 1;
        for (i, &loc) in locs.iter().enumerate() {
            let mut row = Row::default();
            if coef.rhs[0] != 0.0 {
                let upstream = if i == 0 {
                    bld.node_now(up)?
                } else {
                    Row::unit(locs[i - 1])
                };
                row.add(&upstream, coef.rhs[0]);
            }
            row.add(&Row::unit(loc), coef.rhs[1]);
            if coef.rhs[2] != 0.0 {
                let downstream = if i == last {
                    bld.node_now(down)?
                } else {
                    Row::unit(locs[i + 1])
                };
                row.add(&downstream, coef.rhs[2]);
            }
            row.f.push((loc, dt));
            bld.next[loc] = Memo::Done(row);
        }
    }
    // Reservoirs hold their source concentration.
    for r in 0..topo.reservoirs().len() {
        let loc = bld.layout.reservoir(r);
        bld.next[loc] = Memo::Done(Row::unit(loc));
    }
    // Tanks: V'c' = Vc + Σ q_in c_in Δt − Q_out c Δt + V_B u + R V Δt.
    for t in 0..topo.tanks().len() {
        let loc = bld.layout.tank(t);
        let (inflow, out) = bld.tank_mixing(t);
        let v = bld.volume_now[t];
        let v_next = bld.volume_next[t];
        let mut row = Row::default();
        row.a.push((loc, (v - out * dt) / v_next));
        for (link, q) in inflow {
            let value = bld.link_now(link)?;
            row.add(&value, q * dt / v_next);
        }
        let ord = topo.node_ordinal(NodeRef::Tank(t));
        for &bst in &bld.boosters_at[ord] {
            row.b.push((bst, bld.booster_volume[bst] / v_next));
        }
        row.f.push((loc, v * dt / v_next));
        bld.next[loc] = Memo::Done(row);
    }
    // Junctions, pumps and valves follow from the rows above.
    let n = bld.layout.locations();
    for loc in 0..n {
        let row = bld.row_next(loc)?;
        for (j, v) in row.a {
            a.push(loc, j, v);
        }
        for (j, v) in row.b {
            b.push(loc, j, v);
        }
        for (j, v) in row.f {
            f.push(loc, j, v);
        }
    }
    Ok(())
}

fn implicit_rows(
    bld: &mut Builder<'_>,
    e: &mut Triplets,
    a: &mut Triplets,
    b: &mut Triplets,
    f: &mut Triplets,
) -> Result<()> {
    let topo = bld.topo;
    let layout = bld.layout.clone();
    let dt = bld.dt;
    for p in 0..topo.pipes().len() {
        let scheme = bld.schemes[p];
        if scheme == Scheme::Reaction {
            for s in 0..layout.segments(p) {
                let loc = layout.segment(p, s);
                e.push(loc, loc, 1.0);
                a.push(loc, loc, 1.0);
                f.push(loc, loc, dt);
            }
            continue;
        }
        let (courant, alpha) = pipe_numbers(bld, p);
        let coef = stencil_coefficients(scheme, courant, alpha);
        let (locs, up, down) = flow_order(bld, p);
        let last = locs.len() - 1;
        for (i, &loc) in locs.iter().enumerate() {
            let upstream = if i == 0 { layout.node(up) } else { locs[i - 1] };
            let downstream = if i == last {
                layout.node(down)
            } else {
                locs[i + 1]
            };
            e.push(loc, upstream, coef.lhs[0]);
            e.push(loc, loc, coef.lhs[1]);
            e.push(loc, downstream, coef.lhs[2]);
            a.push(loc, loc, coef.rhs[1]);
            f.push(loc, loc, dt);
        }
    }
    for r in 0..topo.reservoirs().len() {
        let loc = layout.reservoir(r);
        e.push(loc, loc, 1.0);
        a.push(loc, loc, 1.0);
    }
    for j in 0..topo.junctions().len() {
        let loc = layout.junction(j);
        let (inflow, den) = bld.junction_mixing(j);
        e.push(loc, loc, 1.0);
        if den > 0.0 {
            for (link, q) in inflow {
                e.push(loc, bld.outlet(link), -q / den);
            }
            for (bst, v) in bld.junction_boosters(j, den) {
                b.push(loc, bst, v);
            }
        } else {
            a.push(loc, loc, 1.0);
        }
    }
    let links: Vec<(LinkRef, usize)> = (0..topo.pumps().len())
        .map(|i| (LinkRef::Pump(i), layout.pump(i)))
        .chain((0..topo.valves().len()).map(|i| (LinkRef::Valve(i), layout.valve(i))))
        .collect();
    for (link, loc) in links {
        e.push(loc, loc, 1.0);
        if bld.link_flow(link) == 0.0 {
            a.push(loc, loc, 1.0);
        } else {
            let (up, _) = bld.flow_ends(link);
            e.push(loc, layout.node(up), -1.0);
        }
    }
    // Tanks, implicit in the exchanged concentrations so that mass balances
    // close exactly.
    for t in 0..topo.tanks().len() {
        let loc = layout.tank(t);
        let (inflow, out) = bld.tank_mixing(t);
        let v = bld.volume_now[t];
        let v_next = bld.volume_next[t];
        e.push(loc, loc, 1.0 + out * dt / v_next);
        for (link, q) in inflow {
            e.push(loc, bld.outlet(link), -q * dt / v_next);
        }
        a.push(loc, loc, v / v_next);
        let ord = topo.node_ordinal(NodeRef::Tank(t));
        for &bst in &bld.boosters_at[ord] {
            b.push(loc, bst, bld.booster_volume[bst] / v_next);
        }
        f.push(loc, loc, v * dt / v_next);
    }
    let _ = bld.transport;
    Ok(())
}
