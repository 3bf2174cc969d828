//! Nonlinear optimal control problem of the level controller and its SQP
//! solver.
//!
//! Decision variables are the inputs `u_0..u_{N-1}`, the predicted levels
//! `x_1..x_N` and one slack `s_k` per level that softens the level bounds.
//! The levels are tied to the inputs by the Euler defects
//!
//! ```text
//! c_k = x_{k+1} - x_k - T_s f(x_k, u_k) = 0,    x_0 fixed
//! ```
//!
//! Each SQP iteration linearizes the defects, eliminates the level steps
//! through the linearized recursion and hands the remaining problem in
//! `(du, ds)` to [`crate::qp::solve_qp`]. The cost is quadratic, so the
//! Gauss-Newton Hessian is exact in the cost and ignores only the curvature
//! of the dynamics. Steps are globalized by Armijo backtracking on the
//! l1 merit `J + rho ||c||_1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpSettings, QpStatus, QuadProgram};
use crate::tank_model::{ModelError, TankParams};

/// Hard lower limit on predicted levels inside the optimizer. Below about
/// 6 mm the Euler map has slope beyond -1 and the linearized predictions
/// grow geometrically along the horizon.
pub const LEVEL_FLOOR: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmpcError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid problem instance: {0}")]
    InvalidInstance(String),
    #[error("sequence length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Initial l1 merit penalty; raised to twice the largest multiplier.
    pub merit_penalty: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub qp_max_iter: usize,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            kkt_tol: 1e-8,
            merit_penalty: 1.0,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            qp_max_iter: 500,
        }
    }
}

/// Horizon, weights and bounds of the receding-horizon problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: usize,
    /// Weight on squared level tracking error [1/m^2].
    pub weight_level: f64,
    /// Weight on squared input increments [1/(m^3/s)^2].
    pub weight_rate: f64,
    pub level_min: f64,
    pub level_max: f64,
    pub flow_min: f64,
    pub flow_max: f64,
    /// Smallest allowed `u_k - u_{k-1}` [m^3/s per sample].
    pub rate_min: f64,
    pub rate_max: f64,
    /// Weight on squared level-bound slacks.
    pub soft_level_penalty: f64,
    pub sqp: SqpSettings,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            weight_level: 1.0,
            weight_rate: 10.0,
            level_min: 0.01,
            level_max: 2.0,
            flow_min: 0.0,
            flow_max: 0.1,
            rate_min: -0.02,
            rate_max: 0.02,
            soft_level_penalty: 1e4,
            sqp: SqpSettings::default(),
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |msg: String| Err(NmpcError::InvalidConfig(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.weight_level >= 0.0 && self.weight_rate >= 0.0) {
            return bad("weights must be non-negative".into());
        }
        if self.weight_level <= 0.0 && self.weight_rate <= 0.0 {
            return bad("at least one of the weights must be positive".into());
        }
        if !(self.level_min < self.level_max) {
            return bad(format!(
                "level bounds [{}, {}] are not ordered",
                self.level_min, self.level_max
            ));
        }
        if !(self.flow_min < self.flow_max)
            || !self.flow_min.is_finite()
            || !self.flow_max.is_finite()
        {
            return bad(format!(
                "flow bounds [{}, {}] must be finite and ordered",
                self.flow_min, self.flow_max
            ));
        }
        if !(self.rate_min <= 0.0 && 0.0 <= self.rate_max) || self.rate_min == self.rate_max {
            return bad(format!(
                "rate bounds [{}, {}] must bracket zero",
                self.rate_min, self.rate_max
            ));
        }
        if !(self.soft_level_penalty > 0.0) {
            return bad("soft level penalty must be positive".into());
        }
        let s = &self.sqp;
        if s.max_iter == 0 || !(s.kkt_tol > 0.0) || !(s.merit_penalty > 0.0) {
            return bad(
                "SQP settings need max_iter >= 1, kkt_tol > 0 and merit_penalty > 0".into(),
            );
        }
        if !(s.armijo_c > 0.0 && s.armijo_c < 1.0)
            || !(s.backtrack_factor > 0.0 && s.backtrack_factor < 1.0)
        {
            return bad("Armijo constant and backtrack factor must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Checks that the configuration fits inside the physical tank limits.
    pub fn validate_for(&self, params: &TankParams) -> Result<(), NmpcError> {
        self.validate()?;
        if self.flow_min < params.q_in_min || self.flow_max > params.q_in_max {
            return Err(NmpcError::InvalidConfig(format!(
                "flow bounds [{}, {}] exceed the tank limits [{}, {}]",
                self.flow_min, self.flow_max, params.q_in_min, params.q_in_max
            )));
        }
        if self.level_min < LEVEL_FLOOR || self.level_max > params.geometry.max_height {
            return Err(NmpcError::InvalidConfig(format!(
                "level bounds [{}, {}] exceed the tank height {}",
                self.level_min, self.level_max, params.geometry.max_height
            )));
        }
        Ok(())
    }
}

/// One receding-horizon problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpInstance {
    pub config: OcpConfig,
    pub params: TankParams,
    pub initial_level: f64,
    pub previous_input: f64,
    /// `reference[k]` is the target for the predicted level `x_{k+1}`.
    pub reference: Vec<f64>,
}

impl OcpInstance {
    pub fn validate(&self) -> Result<(), NmpcError> {
        self.config.validate_for(&self.params)?;
        let c = &self.config;
        if self.reference.len() != c.horizon {
            return Err(NmpcError::LengthMismatch {
                expected: c.horizon,
                got: self.reference.len(),
            });
        }
        let level_ok = |h: f64| h >= c.level_min && h <= c.level_max;
        if !level_ok(self.initial_level) {
            return Err(NmpcError::InvalidInstance(format!(
                "initial level {} outside [{}, {}]",
                self.initial_level, c.level_min, c.level_max
            )));
        }
        if !(self.previous_input >= c.flow_min && self.previous_input <= c.flow_max) {
            return Err(NmpcError::InvalidInstance(format!(
                "previous input {} outside [{}, {}]",
                self.previous_input, c.flow_min, c.flow_max
            )));
        }
        if let Some(r) = self.reference.iter().find(|&&r| !level_ok(r)) {
            return Err(NmpcError::InvalidInstance(format!(
                "reference {r} outside the level bounds"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    IterationLimit,
    QpFailure(QpStatus),
    LineSearchFailure,
}

/// Primal point of the transcribed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpPoint {
    pub inputs: Vec<f64>,
    /// Predicted levels `x_1..x_N`.
    pub levels: Vec<f64>,
    pub slacks: Vec<f64>,
}

/// Multipliers of every constraint of the transcribed problem. Inequality
/// multipliers are non-negative at a KKT point.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpMultipliers {
    pub dynamics: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub rate_lower: Vec<f64>,
    pub rate_upper: Vec<f64>,
    pub soft_lower: Vec<f64>,
    pub soft_upper: Vec<f64>,
    pub floor: Vec<f64>,
    pub ceiling: Vec<f64>,
    pub slack_lower: Vec<f64>,
}

impl OcpMultipliers {
    pub fn zeros(n: usize) -> Self {
        let z = vec![0.0; n];
        Self {
            dynamics: z.clone(),
            input_lower: z.clone(),
            input_upper: z.clone(),
            rate_lower: z.clone(),
            rate_upper: z.clone(),
            soft_lower: z.clone(),
            soft_upper: z.clone(),
            floor: z.clone(),
            ceiling: z.clone(),
            slack_lower: z,
        }
    }

    fn inequality_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.input_lower
            .iter()
            .chain(&self.input_upper)
            .chain(&self.rate_lower)
            .chain(&self.rate_upper)
            .chain(&self.soft_lower)
            .chain(&self.soft_upper)
            .chain(&self.floor)
            .chain(&self.ceiling)
            .chain(&self.slack_lower)
            .copied()
    }
}

/// Merit values around one accepted line-search step, all at the same
/// penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub inputs: Vec<f64>,
    /// Predicted levels `x_1..x_N`.
    pub levels: Vec<f64>,
    pub slacks: Vec<f64>,
    /// Tracking plus increment cost, without the slack penalty.
    pub cost: f64,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub status: SqpStatus,
    pub multipliers: OcpMultipliers,
    pub merit_history: Vec<MeritStep>,
}

impl OcpSolution {
    pub fn point(&self) -> OcpPoint {
        OcpPoint {
            inputs: self.inputs.clone(),
            levels: self.levels.clone(),
            slacks: self.slacks.clone(),
        }
    }

    /// Drops the first stage and repeats the last one, the usual receding
    /// horizon warm start.
    pub fn shifted(&self) -> OcpSolution {
        let shift = |v: &[f64]| -> Vec<f64> {
            let mut out: Vec<f64> = v.iter().skip(1).copied().collect();
            out.push(*v.last().unwrap_or(&0.0));
            out
        };
        OcpSolution {
            inputs: shift(&self.inputs),
            levels: shift(&self.levels),
            slacks: shift(&self.slacks),
            ..self.clone()
        }
    }
}

/// Chained Euler predictions `x_1..x_N` from `x_0`.
pub fn rollout(params: &TankParams, x0: f64, inputs: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut levels = Vec::with_capacity(inputs.len());
    let mut x = x0;
    for &u in inputs {
        x = params.euler_step(x, u)?;
        levels.push(x);
    }
    Ok(levels)
}

/// Tracking and increment cost of an input/level sequence.
pub fn ocp_cost(instance: &OcpInstance, inputs: &[f64], levels: &[f64]) -> Result<f64, NmpcError> {
    let n = instance.config.horizon;
    for len in [inputs.len(), levels.len(), instance.reference.len()] {
        if len != n {
            return Err(NmpcError::LengthMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let c = &instance.config;
    let mut prev = instance.previous_input;
    let mut cost = 0.0;
    for k in 0..n {
        let e = levels[k] - instance.reference[k];
        let du = inputs[k] - prev;
        cost += c.weight_level * e * e + c.weight_rate * du * du;
        prev = inputs[k];
    }
    Ok(cost)
}

/// Full objective including the slack penalty.
fn objective(instance: &OcpInstance, w: &OcpPoint) -> f64 {
    let cost = ocp_cost(instance, &w.inputs, &w.levels).unwrap_or(f64::INFINITY);
    cost + instance.config.soft_level_penalty * w.slacks.iter().map(|s| s * s).sum::<f64>()
}

/// Euler defects `c_k`.
pub fn dynamics_defects(instance: &OcpInstance, w: &OcpPoint) -> Vec<f64> {
    let p = &instance.params;
    let ts = p.sample_time;
    (0..instance.config.horizon)
        .map(|k| {
            let xk = if k == 0 {
                instance.initial_level
            } else {
                w.levels[k - 1]
            };
            w.levels[k] - xk - ts * p.rhs_raw(xk, w.inputs[k])
        })
        .collect()
}

/// Lagrangian `J + lambda' c + mu' (A w - b)` with every inequality written
/// as `lhs <= rhs`.
pub fn lagrangian(instance: &OcpInstance, w: &OcpPoint, m: &OcpMultipliers) -> f64 {
    let c = &instance.config;
    let n = c.horizon;
    let mut value = objective(instance, w);
    let defects = dynamics_defects(instance, w);
    for k in 0..n {
        let u = w.inputs[k];
        let u_prev = if k == 0 {
            instance.previous_input
        } else {
            w.inputs[k - 1]
        };
        let x = w.levels[k];
        let s = w.slacks[k];
        value += m.dynamics[k] * defects[k];
        value += m.input_lower[k] * (c.flow_min - u) + m.input_upper[k] * (u - c.flow_max);
        if c.rate_min.is_finite() {
            value += m.rate_lower[k] * (c.rate_min - (u - u_prev));
        }
        if c.rate_max.is_finite() {
            value += m.rate_upper[k] * ((u - u_prev) - c.rate_max);
        }
        value += m.soft_lower[k] * (c.level_min - x - s) + m.soft_upper[k] * (x - s - c.level_max);
        value += m.floor[k] * (LEVEL_FLOOR - x)
            + m.ceiling[k] * (x - instance.params.geometry.max_height);
        value -= m.slack_lower[k] * s;
    }
    value
}

/// Analytic gradient of [`lagrangian`] with respect to `(inputs, levels,
/// slacks)`.
pub fn lagrangian_gradient(instance: &OcpInstance, w: &OcpPoint, m: &OcpMultipliers) -> OcpPoint {
    let c = &instance.config;
    let p = &instance.params;
    let ts = p.sample_time;
    let n = c.horizon;
    let mut gu = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gs = vec![0.0; n];
    let rate_lo = if c.rate_min.is_finite() {
        m.rate_lower.as_slice()
    } else {
        &[]
    };
    let rate_up = if c.rate_max.is_finite() {
        m.rate_upper.as_slice()
    } else {
        &[]
    };
    let rate_mult = |k: usize| -> f64 {
        rate_up.get(k).copied().unwrap_or(0.0) - rate_lo.get(k).copied().unwrap_or(0.0)
    };
    for k in 0..n {
        let u_prev = if k == 0 {
            instance.previous_input
        } else {
            w.inputs[k - 1]
        };
        let xk = if k == 0 {
            instance.initial_level
        } else {
            w.levels[k - 1]
        };
        let jac = p.jacobian_raw(xk, w.inputs[k]);
        let mut g = 2.0 * c.weight_rate * (w.inputs[k] - u_prev);
        if k + 1 < n {
            g -= 2.0 * c.weight_rate * (w.inputs[k + 1] - w.inputs[k]);
        }
        g -= m.dynamics[k] * ts * jac.d_inflow;
        g += m.input_upper[k] - m.input_lower[k];
        g += rate_mult(k);
        if k + 1 < n {
            g -= rate_mult(k + 1);
        }
        gu[k] = g;
    }
    for j in 0..n {
        // levels[j] is x_{j+1}; it ends defect j and starts defect j + 1
        let x = w.levels[j];
        let mut g = 2.0 * c.weight_level * (x - instance.reference[j]) + m.dynamics[j];
        if j + 1 < n {
            let jac = p.jacobian_raw(x, w.inputs[j + 1]);
            g -= m.dynamics[j + 1] * (1.0 + ts * jac.d_level);
        }
        g += -m.soft_lower[j] + m.soft_upper[j] - m.floor[j] + m.ceiling[j];
        gx[j] = g;
        gs[j] = 2.0 * c.soft_level_penalty * w.slacks[j]
            - m.soft_lower[j]
            - m.soft_upper[j]
            - m.slack_lower[j];
    }
    OcpPoint {
        inputs: gu,
        levels: gx,
        slacks: gs,
    }
}

/// First-order optimality residual (infinity norm) of the transcribed
/// problem at `w` with multipliers `m`.
pub fn ocp_kkt_residual(instance: &OcpInstance, w: &OcpPoint, m: &OcpMultipliers) -> f64 {
    let c = &instance.config;
    let grad = lagrangian_gradient(instance, w, m);
    let stationarity = grad
        .inputs
        .iter()
        .chain(&grad.levels)
        .chain(&grad.slacks)
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let defect = dynamics_defects(instance, w)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));

    let mut primal = 0.0f64;
    let mut compl = 0.0f64;
    let mut check = |mult: f64, lhs_minus_rhs: f64| {
        primal = primal.max(lhs_minus_rhs);
        compl = compl.max((mult * lhs_minus_rhs).abs());
    };
    for k in 0..c.horizon {
        let u = w.inputs[k];
        let u_prev = if k == 0 {
            instance.previous_input
        } else {
            w.inputs[k - 1]
        };
        let x = w.levels[k];
        let s = w.slacks[k];
        check(m.input_lower[k], c.flow_min - u);
        check(m.input_upper[k], u - c.flow_max);
        if c.rate_min.is_finite() {
            check(m.rate_lower[k], c.rate_min - (u - u_prev));
        }
        if c.rate_max.is_finite() {
            check(m.rate_upper[k], (u - u_prev) - c.rate_max);
        }
        check(m.soft_lower[k], c.level_min - x - s);
        check(m.soft_upper[k], x - s - c.level_max);
        check(m.floor[k], LEVEL_FLOOR - x);
        check(m.ceiling[k], x - instance.params.geometry.max_height);
        check(m.slack_lower[k], -s);
    }
    let dual = m.inequality_values().fold(0.0f64, |a, v| a.max(-v));
    stationarity.max(defect).max(primal).max(compl).max(dual)
}

/// Level and input trajectories linearized around an iterate.
struct Linearization {
    /// `A_k = 1 + T_s df/dh(x_k, u_k)` for k = 0..N-1.
    a: Vec<f64>,
    /// Level steps forced by the defects when `du = 0`.
    drift: Vec<f64>,
    /// `dx = gamma du + drift`; row j is the step of `x_{j+1}`.
    gamma: DMatrix<f64>,
}

fn linearize(instance: &OcpInstance, w: &OcpPoint, defects: &[f64]) -> Linearization {
    let p = &instance.params;
    let ts = p.sample_time;
    let n = instance.config.horizon;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for k in 0..n {
        let xk = if k == 0 {
            instance.initial_level
        } else {
            w.levels[k - 1]
        };
        let jac = p.jacobian_raw(xk, w.inputs[k]);
        a.push(1.0 + ts * jac.d_level);
        b.push(ts * jac.d_inflow);
    }
    // dx_{k+1} = A_k dx_k + B_k du_k - c_k with dx_0 = 0
    let mut gamma = DMatrix::zeros(n, n);
    let mut drift = vec![0.0; n];
    for k in 0..n {
        let prev_drift = if k == 0 { 0.0 } else { drift[k - 1] };
        drift[k] = a[k] * prev_drift - defects[k];
        for j in 0..k {
            gamma[(k, j)] = a[k] * gamma[(k - 1, j)];
        }
        gamma[(k, k)] = b[k];
    }
    Linearization { a, drift, gamma }
}

/// Row layout of the condensed QP, in order.
struct RowLayout {
    rate_upper: Vec<Option<usize>>,
    rate_lower: Vec<Option<usize>>,
    soft_lower: Vec<usize>,
    soft_upper: Vec<usize>,
    floor: Vec<usize>,
    ceiling: Vec<usize>,
    count: usize,
}

fn build_subproblem(
    instance: &OcpInstance,
    w: &OcpPoint,
    lin: &Linearization,
) -> (QuadProgram, RowLayout) {
    let c = &instance.config;
    let n = c.horizon;
    let qx = c.weight_level;
    let qu = c.weight_rate;
    let rho_s = c.soft_level_penalty;
    let gamma = &lin.gamma;

    // cost Hessian: 2 Qu D'D + 2 Qx gamma' gamma in du, 2 rho_s in ds
    let mut hessian = DMatrix::zeros(2 * n, 2 * n);
    let mut diff = DMatrix::zeros(n, n);
    for k in 0..n {
        diff[(k, k)] = 1.0;
        if k > 0 {
            diff[(k, k - 1)] = -1.0;
        }
    }
    let h_uu = 2.0 * qu * diff.transpose() * &diff + 2.0 * qx * gamma.transpose() * gamma;
    hessian.view_mut((0, 0), (n, n)).copy_from(&h_uu);
    for k in 0..n {
        hessian[(n + k, n + k)] = 2.0 * rho_s;
    }
    hessian = 0.5 * (&hessian + hessian.transpose());

    let mut grad_u = DVector::zeros(n);
    for k in 0..n {
        let u_prev = if k == 0 {
            instance.previous_input
        } else {
            w.inputs[k - 1]
        };
        let mut g = 2.0 * qu * (w.inputs[k] - u_prev);
        if k + 1 < n {
            g -= 2.0 * qu * (w.inputs[k + 1] - w.inputs[k]);
        }
        grad_u[k] = g;
    }
    let tracking = DVector::from_fn(n, |j, _| {
        2.0 * qx * (w.levels[j] + lin.drift[j] - instance.reference[j])
    });
    grad_u += gamma.transpose() * tracking;
    let mut gradient = DVector::zeros(2 * n);
    gradient.rows_mut(0, n).copy_from(&grad_u);
    for k in 0..n {
        gradient[n + k] = 2.0 * rho_s * w.slacks[k];
    }

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut layout = RowLayout {
        rate_upper: vec![None; n],
        rate_lower: vec![None; n],
        soft_lower: Vec::with_capacity(n),
        soft_upper: Vec::with_capacity(n),
        floor: Vec::with_capacity(n),
        ceiling: Vec::with_capacity(n),
        count: 0,
    };
    for k in 0..n {
        let u_prev = if k == 0 {
            instance.previous_input
        } else {
            w.inputs[k - 1]
        };
        let delta = w.inputs[k] - u_prev;
        let mut a = DVector::zeros(2 * n);
        a[k] = 1.0;
        if k > 0 {
            a[k - 1] = -1.0;
        }
        if c.rate_max.is_finite() {
            layout.rate_upper[k] = Some(rows.len());
            rows.push((a.clone(), c.rate_max - delta));
        }
        if c.rate_min.is_finite() {
            layout.rate_lower[k] = Some(rows.len());
            rows.push((-a, delta - c.rate_min));
        }
    }
    let geometry_max = instance.params.geometry.max_height;
    for j in 0..n {
        let level = w.levels[j] + lin.drift[j];
        let mut g_row = DVector::zeros(2 * n);
        g_row.rows_mut(0, n).copy_from(&gamma.row(j).transpose());
        let mut soft = g_row.clone();
        soft[n + j] = -1.0;
        let mut soft_lo = -g_row.clone();
        soft_lo[n + j] = -1.0;
        layout.soft_lower.push(rows.len());
        rows.push((soft_lo, level + w.slacks[j] - c.level_min));
        layout.soft_upper.push(rows.len());
        rows.push((soft, c.level_max - level + w.slacks[j]));
        layout.floor.push(rows.len());
        rows.push((-g_row.clone(), level - LEVEL_FLOOR));
        layout.ceiling.push(rows.len());
        rows.push((g_row, geometry_max - level));
    }
    layout.count = rows.len();
    let ineq_matrix = DMatrix::from_fn(rows.len(), 2 * n, |i, j| rows[i].0[j]);
    let ineq_bound = DVector::from_fn(rows.len(), |i, _| rows[i].1);

    let lower = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            c.flow_min - w.inputs[i]
        } else {
            -w.slacks[i - n]
        }
    });
    let upper = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            c.flow_max - w.inputs[i]
        } else {
            f64::INFINITY
        }
    });
    let qp = QuadProgram::new(hessian, gradient)
        .with_inequalities(ineq_matrix, ineq_bound)
        .with_bounds(lower, upper);
    (qp, layout)
}

/// Projection of `u` onto the flow box and the
/// rate window around `previous`. The result satisfies the limits in
/// floating point, including the computed difference `u - previous`.
pub fn clamp_input(config: &OcpConfig, previous: f64, u: f64) -> f64 {
    let lo = config.flow_min.max(previous + config.rate_min);
    let hi = config.flow_max.min(previous + config.rate_max);
    if lo > hi {
        return u.clamp(config.flow_min, config.flow_max);
    }
    let mut v = u.clamp(lo, hi);
    while v - previous > config.rate_max && v > config.flow_min {
        v = v.next_down();
    }
    while v - previous < config.rate_min && v < config.flow_max {
        v = v.next_up();
    }
    v
}

/// Moves an input sequence onto the box and rate limits, stage by stage.
fn project_inputs(config: &OcpConfig, previous: f64, inputs: &mut [f64]) {
    let mut prev = previous;
    for u in inputs.iter_mut() {
        *u = clamp_input(config, prev, *u);
        prev = *u;
    }
}

fn slack_for(config: &OcpConfig, level: f64) -> f64 {
    (config.level_min - level)
        .max(level - config.level_max)
        .max(0.0)
}

/// Starting point that satisfies every linear constraint of the problem.
fn initial_point(instance: &OcpInstance, guess: Option<&OcpSolution>) -> OcpPoint {
    let c = &instance.config;
    let n = c.horizon;
    let p = &instance.params;
    let geometry_max = p.geometry.max_height;
    let clamp_level = |x: f64| x.clamp(LEVEL_FLOOR, geometry_max);

    let (mut inputs, levels) = match guess {
        Some(g) if g.inputs.len() == n && g.levels.len() == n => (
            g.inputs.clone(),
            g.levels.iter().map(|&x| clamp_level(x)).collect::<Vec<_>>(),
        ),
        _ => {
            let u = instance.previous_input.clamp(c.flow_min, c.flow_max);
            let mut levels = Vec::with_capacity(n);
            let mut x = instance.initial_level;
            for _ in 0..n {
                x = clamp_level(x + p.sample_time * p.rhs_raw(x, u));
                levels.push(x);
            }
            (vec![u; n], levels)
        }
    };
    project_inputs(c, instance.previous_input, &mut inputs);
    let slacks = levels.iter().map(|&x| slack_for(c, x)).collect();
    OcpPoint {
        inputs,
        levels,
        slacks,
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn axpy(w: &OcpPoint, alpha: f64, step: &OcpPoint) -> OcpPoint {
    let comb = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, d)| x + alpha * d).collect();
    OcpPoint {
        inputs: comb(&w.inputs, &step.inputs),
        levels: comb(&w.levels, &step.levels),
        slacks: comb(&w.slacks, &step.slacks),
    }
}

/// Gradient of the full objective.
fn objective_gradient(instance: &OcpInstance, w: &OcpPoint) -> OcpPoint {
    let zero = OcpMultipliers::zeros(instance.config.horizon);
    lagrangian_gradient(instance, w, &zero)
}

/// Solves the nonlinear problem by SQP. Never panics on solver trouble:
/// non-converged runs come back with a non-`Converged` status and the last
/// iterate.
pub fn sqp_solve(
    instance: &OcpInstance,
    initial_guess: Option<&OcpSolution>,
) -> Result<OcpSolution, NmpcError> {
    instance.validate()?;
    let c = &instance.config;
    let n = c.horizon;
    let settings = &c.sqp;
    let qp_settings = QpSettings {
        tol: 1e-10,
        max_iter: settings.qp_max_iter,
    };

    let mut w = initial_point(instance, initial_guess);
    let mut multipliers = OcpMultipliers::zeros(n);
    let mut penalty = settings.merit_penalty;
    let mut merit_history = Vec::new();
    let mut status = SqpStatus::IterationLimit;
    let mut kkt = f64::INFINITY;
    let mut qp_iterations = 0;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let defects = dynamics_defects(instance, &w);
        let lin = linearize(instance, &w, &defects);
        let (qp, layout) = build_subproblem(instance, &w, &lin);
        let sol = solve_qp(&qp, None, &qp_settings)?;
        qp_iterations += sol.iterations;
        if sol.status != QpStatus::Optimal {
            status = SqpStatus::QpFailure(sol.status);
            break;
        }

        let du: Vec<f64> = sol.z.rows(0, n).iter().copied().collect();
        let ds: Vec<f64> = sol.z.rows(n, n).iter().copied().collect();
        let dx_vec = &lin.gamma * DVector::from_column_slice(&du);
        let dx: Vec<f64> = (0..n).map(|j| dx_vec[j] + lin.drift[j]).collect();
        let step = OcpPoint {
            inputs: du,
            levels: dx,
            slacks: ds,
        };

        let mut m = OcpMultipliers::zeros(n);
        for k in 0..n {
            m.input_lower[k] = sol.lower_multipliers[k];
            m.input_upper[k] = sol.upper_multipliers[k];
            m.slack_lower[k] = sol.lower_multipliers[n + k];
            if let Some(r) = layout.rate_lower[k] {
                m.rate_lower[k] = sol.multipliers[r];
            }
            if let Some(r) = layout.rate_upper[k] {
                m.rate_upper[k] = sol.multipliers[r];
            }
            m.soft_lower[k] = sol.multipliers[layout.soft_lower[k]];
            m.soft_upper[k] = sol.multipliers[layout.soft_upper[k]];
            m.floor[k] = sol.multipliers[layout.floor[k]];
            m.ceiling[k] = sol.multipliers[layout.ceiling[k]];
        }
        debug_assert_eq!(layout.count, qp.num_inequalities());
        // adjoint recursion: stationarity of the QP in the level steps
        let mut lambda_next = 0.0;
        for j in (0..n).rev() {
            let g = 2.0 * c.weight_level * (w.levels[j] + step.levels[j] - instance.reference[j])
                - m.soft_lower[j]
                + m.soft_upper[j]
                - m.floor[j]
                + m.ceiling[j];
            let carry = if j + 1 < n {
                lin.a[j + 1] * lambda_next
            } else {
                0.0
            };
            m.dynamics[j] = carry - g;
            lambda_next = m.dynamics[j];
        }

        let max_lambda = m.dynamics.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        penalty = penalty.max(2.0 * max_lambda);

        let merit =
            |p: &OcpPoint| objective(instance, p) + penalty * l1(&dynamics_defects(instance, p));
        let phi0 = merit(&w);
        let grad = objective_gradient(instance, &w);
        let slope = dot(&grad, &step) - penalty * l1(&defects);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let trial = axpy(&w, alpha, &step);
            let phi = merit(&trial);
            if phi <= phi0 + settings.armijo_c * alpha * slope.min(0.0) {
                accepted = Some((trial, phi));
                break;
            }
            alpha *= settings.backtrack_factor;
        }
        let Some((trial, phi)) = accepted else {
            multipliers = m;
            kkt = ocp_kkt_residual(instance, &w, &multipliers);
            status = if kkt <= settings.kkt_tol {
                SqpStatus::Converged
            } else {
                SqpStatus::LineSearchFailure
            };
            break;
        };
        merit_history.push(MeritStep {
            penalty,
            before: phi0,
            after: phi,
            step_length: alpha,
        });
        w = trial;
        multipliers = m;
        kkt = ocp_kkt_residual(instance, &w, &multipliers);
        if kkt <= settings.kkt_tol {
            status = SqpStatus::Converged;
            break;
        }
    }

    // rounding in the final step can leave inputs an ulp outside the limits
    project_inputs(c, instance.previous_input, &mut w.inputs);
    let cost = ocp_cost(instance, &w.inputs, &w.levels)?;
    Ok(OcpSolution {
        inputs: w.inputs,
        levels: w.levels,
        slacks: w.slacks,
        cost,
        sqp_iterations: iterations,
        qp_iterations,
        kkt_residual: kkt,
        status,
        multipliers,
        merit_history,
    })
}

fn dot(a: &OcpPoint, b: &OcpPoint) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    d(&a.inputs, &b.inputs) + d(&a.levels, &b.levels) + d(&a.slacks, &b.slacks)
}
