//! Scenario runners shared by the engine tests and the acceptance report.
#![allow(dead_code)]

use nalgebra::DVector;
use wqms_core::engine::*;
use wqms_core::fixtures;
use wqms_core::network::Species;
use wqms_core::transport::*;

pub fn run(
    s: &fixtures::Scenario,
    plan: &DiscretizationPlan,
    opts: EngineOptions,
) -> (StateLayout, Trajectory) {
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, plan);
    let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
    let u = InputSchedule::zeros(s.topology.boosters().len());
    let t = simulate(&s.topology, &s.trace, plan, &params, &x0, &u, &opts).unwrap();
    (layout, t)
}

pub fn loop_mass(family: SchemeFamily) -> f64 {
    let s = fixtures::closed_loop();
    let opts = PlanOptions { family, ..s.plan };
    let plan = plan_grid(&s.topology, &s.trace, &opts).unwrap();
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, &plan);
    let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
    let t = simulate(
        &s.topology,
        &s.trace,
        &plan,
        &params,
        &x0,
        &InputSchedule::zeros(0),
        &EngineOptions::default(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for sp in Species::ALL {
        let m0 = stored_mass(&s.topology, &s.trace, &layout, &x0, sp, 0, 0.0);
        let last = s.trace.len() - 1;
        let m1 = stored_mass(
            &s.topology,
            &s.trace,
            &layout,
            t.final_state(),
            sp,
            last,
            s.trace.step_length,
        );
        worst = worst.max(((m1 - m0) / m0).abs());
    }
    worst
}

/// Relative L2 error of the pulse against the analytic solution, with the
/// segment count and step used.
pub fn pulse_error(opts: &PlanOptions) -> (f64, usize, f64) {
    let s = fixtures::gaussian_pulse();
    let plan = plan_grid(&s.topology, &s.trace, opts).unwrap();
    let params = ReactionParams::inert(&s.topology);
    let layout = StateLayout::new(&s.topology, &plan);
    let mut x0 = DVector::zeros(layout.dim());
    let n = plan.segments[0];
    let dx = plan.segment_length[0];
    for i in 0..n {
        x0[layout.segment(0, i)] = fixtures::pulse_profile((i as f64 + 0.5) * dx);
    }
    let eo = EngineOptions {
        transport: TransportMode::Adr,
        ..Default::default()
    };
    let t = simulate(
        &s.topology,
        &s.trace,
        &plan,
        &params,
        &x0,
        &InputSchedule::zeros(0),
        &eo,
    )
    .unwrap();
    let d = plan.samples[0][0].dispersion;
    let time = s.trace.duration();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let exact = fixtures::pulse_solution((i as f64 + 0.5) * dx, time, 0.1, d);
        let got = t.final_state()[layout.segment(0, i)];
        num += (got - exact).powi(2);
        den += exact * exact;
    }
    ((num / den).sqrt(), n, plan.dt)
}

/// Chlorine at the dead end, sampled every WQ step, and the step length.
pub fn dead_end_series(variant: usize, transport: TransportMode) -> (Vec<f64>, f64) {
    let s = fixtures::dead_end(variant);
    let opts = PlanOptions {
        transport,
        ..s.plan
    };
    let plan = plan_grid(&s.topology, &s.trace, &opts).unwrap();
    let eo = EngineOptions {
        transport,
        ..Default::default()
    };
    let (_, t) = run(&s, &plan, eo);
    (t.series("chlorine:J2").unwrap(), plan.dt)
}

/// Front-arrival comparison at the dead end.
#[derive(Debug, Clone, Copy)]
pub struct ArrivalGap {
    /// time-integrated (dispersive - advective) concentration over the window, mg·s/L
    pub integral: f64,
    /// smallest pointwise gap inside the window
    pub min_gap: f64,
    /// window length, s
    pub window: f64,
}

/// The window opens when the dispersive run first passes 1% of its final
/// value and closes when the advective front does.
pub fn arrival_gap(variant: usize) -> ArrivalGap {
    let (ar, dt_ar) = dead_end_series(variant, TransportMode::Ar);
    let (adr, dt_adr) = dead_end_series(variant, TransportMode::Auto);
    let at = |xs: &[f64], dt: f64, t: f64| {
        let pos = t / dt;
        let i = (pos.floor() as usize).min(xs.len() - 2);
        let w = pos - i as f64;
        xs[i] * (1.0 - w) + xs[i + 1] * w
    };
    let first_above = |xs: &[f64], dt: f64| {
        let level = 0.01 * xs.last().unwrap();
        xs.iter().position(|&c| c > level).unwrap() as f64 * dt
    };
    let open = first_above(&adr, dt_adr);
    let close = first_above(&ar, dt_ar) - dt_ar;
    let h = dt_ar.min(dt_adr);
    let (mut integral, mut min_gap, mut t) = (0.0, f64::INFINITY, open);
    while t < close {
        let gap = at(&adr, dt_adr, t) - at(&ar, dt_ar, t);
        integral += gap * h;
        min_gap = min_gap.min(gap);
        t += h;
    }
    ArrivalGap {
        integral,
        min_gap,
        window: close - open,
    }
}

/// For `count` random operating points on the reactive network, the ratio of
/// the one-step linear-vs-nonlinear gap at perturbation size `h` to the gap
/// at `h / 2`.
pub fn linearization_ratios(count: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let s = fixtures::two_booster_dead_end();
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, &plan);
    let n = layout.locations();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u = DVector::zeros(s.topology.boosters().len());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut xo = DVector::zeros(layout.dim());
        for l in 0..n {
            xo[layout.index(Species::Chlorine, l)] = rng.gen_range(0.5..2.0);
            xo[layout.index(Species::Reactant, l)] = rng.gen_range(0.1..0.8);
            xo[layout.index(Species::Thms, l)] = rng.gen_range(0.0..0.05);
        }
        let dir = DVector::from_fn(layout.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let op = OperatingPoint::from_state(&layout, &xo, 0.0);
        let mats = assemble_system(
            &s.topology,
            &s.trace,
            &plan,
            &params,
            0,
            0,
            TransportMode::Auto,
            &AssemblyMode::Linearized(op),
        )
        .unwrap();
        let gap = |h: f64| {
            let x = &xo + &dir * h;
            let nl = step_nonlinear(&mats, &params, &x, &u).unwrap();
            let lin = step_linear(&mats, &x, &u).unwrap();
            (nl - lin).amax()
        };
        out.push(gap(0.2) / gap(0.1));
    }
    out
}

/// Closed-loop run on the two-booster dead end, with the controllability
/// schedule or the uniform one.
pub fn two_booster_control(
    weighted: bool,
    spec: &wqms_core::mpc::ControlProblemSpec,
) -> wqms_core::mpc::ControlSolution {
    use wqms_core::control::*;
    use wqms_core::mpc::*;
    let s = fixtures::two_booster_dead_end();
    let plan = plan_grid(&s.topology, &s.trace, &s.plan).unwrap();
    let params = ReactionParams::new(&s.topology, s.reactions).unwrap();
    let layout = StateLayout::new(&s.topology, &plan);
    let x0 = layout.initial_state(&s.topology, &s.initial).unwrap();
    let options = WeightOptions::default();
    let schedule = if weighted {
        let op = OperatingPoint::from_state(&layout, &x0, 0.0);
        booster_weights(
            &s.topology,
            &s.trace,
            &plan,
            &params,
            &s.targets,
            &[op],
            &options,
        )
        .unwrap()
        .schedule
    } else {
        let q = q_diagonal(&layout, &[], &options);
        WeightSchedule::uniform(s.trace.len(), s.topology.boosters().len(), q)
    };
    let init = ControlInit {
        state: x0,
        disturbances: None,
    };
    run_mpc(
        &s.topology,
        &s.trace,
        &plan,
        &params,
        &schedule,
        spec,
        &init,
    )
    .unwrap()
}

pub mod systems {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal<R: Rng>(rng: &mut R) -> f64 {
        StandardNormal.sample(rng)
    }

    pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| normal(rng))
    }

    pub fn orthogonal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
        gaussian(rng, n, n).qr().q()
    }

    /// `(A, B)` with reachable dimension exactly `k` (for a long enough
    /// horizon), hidden behind a random rotation.
    pub fn with_controllable_dim<R: Rng>(
        rng: &mut R,
        n: usize,
        m: usize,
        k: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let scale = 1.0 / (n as f64).sqrt();
        let mut a = gaussian(rng, n, n) * scale;
        for i in k..n {
            for j in 0..k {
                a[(i, j)] = 0.0;
            }
        }
        let mut b = gaussian(rng, n, m);
        for i in k..n {
            b.row_mut(i).fill(0.0);
        }
        let q = orthogonal(rng, n);
        (&q * a * q.transpose(), &q * b)
    }

    /// Rank of states reached from zero after `horizon` steps under random
    /// input sequences.
    pub fn sampled_reach_rank<R: Rng>(
        rng: &mut R,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        horizon: usize,
    ) -> usize {
        let n = a.nrows();
        let samples = 3 * n + 3;
        let mut finals = DMatrix::zeros(n, samples);
        for c in 0..samples {
            let mut x = DVector::zeros(n);
            for _ in 0..horizon {
                let u = DVector::from_fn(b.ncols(), |_, _| normal(rng));
                x = a * x + b * u;
            }
            finals.set_column(c, &x);
        }
        let s = finals.singular_values();
        let top = s.max();
        s.iter().filter(|v| **v > 1e-8 * top).count()
    }

    /// Box-constrained QP with a well-conditioned PSD Hessian.
    pub struct BoxQp {
        pub h: DMatrix<f64>,
        pub g: DVector<f64>,
        pub lo: DVector<f64>,
        pub hi: DVector<f64>,
    }

    pub fn box_qp<R: Rng>(rng: &mut R, n: usize) -> BoxQp {
        let m = gaussian(rng, n + 3, n);
        let h = m.transpose() * &m / (n as f64) + DMatrix::identity(n, n) * 0.05;
        let g = DVector::from_fn(n, |_, _| 3.0 * normal(rng));
        let lo = DVector::from_fn(n, |_, _| -rng.gen_range(0.0..2.0));
        let hi = DVector::from_fn(n, |i, _| lo[i] + rng.gen_range(0.1..3.0));
        BoxQp { h, g, lo, hi }
    }

    /// Projected gradient with step 1/L, run until the iterate stops moving.
    pub fn projected_gradient(qp: &BoxQp) -> DVector<f64> {
        let lipschitz = qp.h.symmetric_eigenvalues().max();
        let step = 1.0 / lipschitz;
        let clip =
            |z: DVector<f64>| DVector::from_fn(z.len(), |i, _| z[i].clamp(qp.lo[i], qp.hi[i]));
        let mut z = clip(DVector::zeros(qp.g.len()));
        for _ in 0..2_000_000 {
            let next = clip(&z - (&qp.h * &z + &qp.g) * step);
            let moved = (&next - &z).amax();
            z = next;
            if moved < 1e-14 {
                break;
            }
        }
        z
    }
}

/// Re-derives the explicit stability conditions from raw plan data for every
/// fixture and mode that admits an explicit plan. Returns (plans audited,
/// pipe-steps checked, violations).
pub fn stability_audit() -> (usize, usize, Vec<String>) {
    let (mut plans, mut checked, mut bad) = (0, 0, Vec::new());
    for s in fixtures::all() {
        let mut modes = vec![s.plan.transport, TransportMode::Auto, TransportMode::Ar];
        modes.dedup();
        for mode in modes {
            let opts = PlanOptions {
                family: SchemeFamily::Explicit,
                transport: mode,
                ..s.plan
            };
            let plan = match plan_grid(&s.topology, &s.trace, &opts) {
                Ok(plan) => plan,
                // A fixture must plan under its own options; other modes may refuse.
                Err(e) if s.plan.family == SchemeFamily::Explicit && mode == s.plan.transport => {
                    bad.push(format!("{}: own plan infeasible: {e}", s.name));
                    continue;
                }
                Err(_) => continue,
            };
            plans += 1;
            if (s.trace.step_length / plan.dt).fract().abs() > 1e-9 {
                bad.push(format!(
                    "{}: dt {} does not divide the hydraulic step",
                    s.name, plan.dt
                ));
            }
            for (k, row) in plan.samples.iter().enumerate() {
                for (p, sample) in row.iter().enumerate() {
                    let v = sample.speed;
                    if v == 0.0 {
                        continue;
                    }
                    checked += 1;
                    let dx = plan.segment_length[p];
                    let courant = v * plan.dt / dx;
                    let tag = format!("{} {:?} step {k} pipe {}", s.name, mode, sample.pipe);
                    if courant > 1.0 + 1e-12 {
                        bad.push(format!("{tag}: courant {courant}"));
                    }
                    if plan.dispersion(k, p, mode) {
                        let d = sample.dispersion;
                        let alpha = d * plan.dt / (dx * dx);
                        if courant * courant > 2.0 * alpha * (1.0 + 1e-9)
                            || 2.0 * alpha > 1.0 + 1e-12
                        {
                            bad.push(format!("{tag}: courant {courant} alpha {alpha}"));
                        }
                        if v * dx / d > 2.0 + 1e-12 {
                            bad.push(format!("{tag}: grid Peclet {}", v * dx / d));
                        }
                    }
                }
            }
        }
    }
    (plans, checked, bad)
}
