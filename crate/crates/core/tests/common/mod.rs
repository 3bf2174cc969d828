//! Independent reference solutions shared by the integration tests.
#![allow(dead_code)]

use conetank::nmpc::{ocp_cost, rollout, OcpInstance};
use conetank::qp::QuadProgram;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random feasible instance with `H = M'M + I`.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QuadProgram {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(0..=6);
    let mm = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = mm.transpose() * &mm + DMatrix::identity(n, n);
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let z_feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let g_mat = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let g_vec = &g_mat * &z_feas + DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
    let mut qp = QuadProgram::new(h, f).with_inequalities(g_mat, g_vec);
    if rng.gen_bool(0.5) {
        let lower = DVector::from_fn(n, |i, _| z_feas[i] - rng.gen_range(0.0..1.0));
        let upper = DVector::from_fn(n, |i, _| z_feas[i] + rng.gen_range(0.0..1.0));
        qp = qp.with_bounds(lower, upper);
    }
    qp
}

/// Projected gradient ascent on the dual `max_{lam >= 0} d(lam)`, run until
/// the iterates stop moving. Returns the primal point `-H^-1 (f + A' lam)`.
pub fn dual_projected_gradient(qp: &QuadProgram) -> DVector<f64> {
    let n = qp.num_variables();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..qp.num_inequalities() {
        rows.push((
            qp.ineq_matrix.row(i).iter().copied().collect(),
            qp.ineq_bound[i],
        ));
    }
    for j in 0..n {
        if qp.lower[j].is_finite() {
            let mut a = vec![0.0; n];
            a[j] = -1.0;
            rows.push((a, -qp.lower[j]));
        }
        if qp.upper[j].is_finite() {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            rows.push((a, qp.upper[j]));
        }
    }
    let h_inv = qp.hessian.clone().try_inverse().unwrap();
    let primal =
        |lam: &DVector<f64>, a: &DMatrix<f64>| -(&h_inv * (&qp.gradient + a.transpose() * lam));
    if rows.is_empty() {
        return primal(&DVector::zeros(0), &DMatrix::zeros(0, n));
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let dual_hessian = &a * &h_inv * a.transpose();
    let lipschitz = dual_hessian.symmetric_eigenvalues().amax().max(1e-12);
    let step = 1.0 / lipschitz;
    let mut lam = DVector::zeros(rows.len());
    for _ in 0..5_000_000 {
        let z = primal(&lam, &a);
        let grad = &a * &z - &b;
        let next = (&lam + step * grad).map(|v| v.max(0.0));
        let moved = (&next - &lam).amax();
        lam = next;
        if moved < 1e-15 {
            break;
        }
    }
    primal(&lam, &a)
}

/// Cost of an input sequence under the Euler rollout, `None` if the
/// rollout leaves the tank.
pub fn shooting_cost(inst: &OcpInstance, inputs: &[f64]) -> Option<f64> {
    let levels = rollout(&inst.params, inst.initial_level, inputs).ok()?;
    ocp_cost(inst, inputs, &levels).ok()
}

fn rate_ok(inst: &OcpInstance, from: f64, to: f64) -> bool {
    let d = to - from;
    d >= inst.config.rate_min && d <= inst.config.rate_max
}

/// Best `(cost, u0)` of a one-stage instance on a uniform input grid.
pub fn grid_single_stage(inst: &OcpInstance, step: f64) -> (f64, f64) {
    let c = &inst.config;
    let count = ((c.flow_max - c.flow_min) / step).round() as usize;
    let mut best = (f64::INFINITY, f64::NAN);
    for i in 0..=count {
        let u = c.flow_min + i as f64 * step;
        if !rate_ok(inst, inst.previous_input, u) {
            continue;
        }
        if let Some(j) = shooting_cost(inst, &[u]) {
            if j < best.0 {
                best = (j, u);
            }
        }
    }
    best
}

/// Best `(cost, u0, u1)` of a two-stage instance over the rate-feasible
/// points of a uniform grid.
pub fn grid_two_stage(inst: &OcpInstance, step: f64) -> (f64, f64, f64) {
    let c = &inst.config;
    let count = ((c.flow_max - c.flow_min) / step).round() as usize;
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for i in 0..=count {
        let u0 = c.flow_min + i as f64 * step;
        if !rate_ok(inst, inst.previous_input, u0) {
            continue;
        }
        for j in 0..=count {
            let u1 = c.flow_min + j as f64 * step;
            if !rate_ok(inst, u0, u1) {
                continue;
            }
            if let Some(cost) = shooting_cost(inst, &[u0, u1]) {
                if cost < best.0 {
                    best = (cost, u0, u1);
                }
            }
        }
    }
    best
}

/// Central difference with one Richardson extrapolation, error O(h^4).
pub fn richardson_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let central = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

/// One-sided second-order difference; `h < 0` looks to the left.
pub fn one_sided_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-3.0 * f(x) + 4.0 * f(x + h) - f(x + 2.0 * h)) / (2.0 * h)
}
