//! Receding-horizon level controllers.
//!
//! Both controllers share the same outer loop:
//!
//! 1. correct the disturbance estimate with the latest measurement,
//! 2. start the prediction from the corrected level `h_m - d_hat` and track
//!    the reference shifted by `-d_hat`,
//! 3. apply the first optimal input and keep the rest as a warm start.
//!
//! [`LinearMpc`] predicts with the sampled linearization around a fixed
//! operating point and solves one condensed QP per sample. [`NonlinearMpc`]
//! predicts with the Euler model and calls [`crate::nmpc::sqp_solve`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmpc::{
    clamp_input, sqp_solve, NmpcError, OcpConfig, OcpInstance, OcpSolution, SqpStatus,
};
use crate::qp::{solve_qp, QpSettings, QpStatus, QuadProgram};
use crate::tank_model::{LinearTankModel, ModelError, OperatingPoint, TankParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("reference preview has length {got}, expected {expected}")]
    PreviewLength { expected: usize, got: usize },
    #[error("non-finite controller input")]
    NonFinite,
    #[error("estimator gain {0} outside [0, 1]")]
    InvalidGain(f64),
    #[error("initial input {input} outside the flow bounds [{min}, {max}]")]
    InitialInput { input: f64, min: f64, max: f64 },
    #[error(transparent)]
    Config(#[from] NmpcError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One sample of controller input.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStepInput {
    pub measured_level: f64,
    /// `reference_preview[k]` is the target for the level `k + 1` samples
    /// ahead.
    pub reference_preview: Vec<f64>,
    pub time: f64,
}

/// First-order output-disturbance observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub disturbance: f64,
    pub gain: f64,
    /// Design-model prediction of the next level, without the disturbance.
    pub last_model_prediction: Option<f64>,
    /// Sanity clamp on `|disturbance|`.
    pub limit: f64,
}

impl EstimatorState {
    pub fn new(gain: f64, limit: f64) -> Result<Self, ControllerError> {
        if !(0.0..=1.0).contains(&gain) {
            return Err(ControllerError::InvalidGain(gain));
        }
        Ok(Self {
            disturbance: 0.0,
            gain,
            last_model_prediction: None,
            limit,
        })
    }
}

/// `d_hat+ = d_hat + L (h_m - h_model - d_hat)`, clamped to the limit.
pub fn estimator_update(
    state: EstimatorState,
    measured: f64,
    model_prediction: f64,
) -> EstimatorState {
    let innovation = measured - model_prediction - state.disturbance;
    let d = (state.disturbance + state.gain * innovation).clamp(-state.limit, state.limit);
    EstimatorState {
        disturbance: d,
        ..state
    }
}

/// Which constraints are active in the accepted plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActiveConstraints {
    pub input_bound: bool,
    pub rate_bound: bool,
    pub level_bound: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ControllerDiagnostics {
    pub solve_time: f64,
    /// SQP iterations for the nonlinear controller, QP iterations for the
    /// linear one.
    pub iterations: usize,
    pub cost: f64,
    pub kkt_residual: f64,
    pub active: ActiveConstraints,
    /// The solver failed and the previous input was held.
    pub fail_safe: bool,
}

impl ControllerDiagnostics {
    fn fail_safe(solve_time: f64) -> Self {
        Self {
            solve_time,
            iterations: 0,
            cost: f64::NAN,
            kkt_residual: f64::NAN,
            active: ActiveConstraints::default(),
            fail_safe: true,
        }
    }
}

/// Settings shared by both controller kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    pub ocp: OcpConfig,
    pub estimator_gain: f64,
    /// Use the scheduled future reference instead of holding the current
    /// one over the horizon.
    pub reference_preview: bool,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            ocp: OcpConfig::default(),
            estimator_gain: 0.5,
            reference_preview: true,
        }
    }
}

pub trait Controller {
    fn name(&self) -> &'static str;
    fn settings(&self) -> &ControllerSettings;
    fn previous_input(&self) -> f64;
    fn estimator(&self) -> &EstimatorState;
    fn control_step(
        &mut self,
        input: &ControlStepInput,
    ) -> Result<(f64, ControllerDiagnostics), ControllerError>;
}

fn check_input(input: &ControlStepInput, horizon: usize) -> Result<(), ControllerError> {
    if input.reference_preview.len() != horizon {
        return Err(ControllerError::PreviewLength {
            expected: horizon,
            got: input.reference_preview.len(),
        });
    }
    if !input.measured_level.is_finite() || input.reference_preview.iter().any(|r| !r.is_finite()) {
        return Err(ControllerError::NonFinite);
    }
    Ok(())
}

fn check_initial_input(config: &OcpConfig, u: f64) -> Result<(), ControllerError> {
    if !(u >= config.flow_min && u <= config.flow_max) {
        return Err(ControllerError::InitialInput {
            input: u,
            min: config.flow_min,
            max: config.flow_max,
        });
    }
    Ok(())
}

fn rate_active(config: &OcpConfig, previous: f64, inputs: &[f64]) -> bool {
    let tol = 1e-9;
    let mut prev = previous;
    inputs.iter().any(|&u| {
        let du = u - prev;
        prev = u;
        du >= config.rate_max - tol || du <= config.rate_min + tol
    })
}

fn input_active(config: &OcpConfig, inputs: &[f64]) -> bool {
    let tol = 1e-9;
    inputs
        .iter()
        .any(|&u| u <= config.flow_min + tol || u >= config.flow_max - tol)
}

/// Condensed predictor `X = phi x0 + gamma U` of the sampled linear model in
/// deviation variables, where row k of `X` is the deviation `k + 1` samples
/// ahead.
pub fn prediction_matrices(
    model: &LinearTankModel,
    horizon: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let a = model.a_disc;
    let b = model.b_disc;
    let mut phi = DVector::zeros(horizon);
    let mut gamma = DMatrix::zeros(horizon, horizon);
    let mut power = 1.0;
    for k in 0..horizon {
        power *= a;
        phi[k] = power;
        for j in 0..=k {
            gamma[(k, j)] = a.powi((k - j) as i32) * b;
        }
    }
    (phi, gamma)
}

/// Condensed QP of the linear controller in `z = (U, s)`, the stacked input
/// deviations and level slacks.
pub fn lmpc_build_qp(
    model: &LinearTankModel,
    config: &OcpConfig,
    step: &ControlStepInput,
    u_prev: f64,
    disturbance: f64,
) -> Result<QuadProgram, ControllerError> {
    let n = config.horizon;
    check_input(step, n)?;
    let op = model.operating_point;
    let (phi, gamma) = prediction_matrices(model, n);
    let x0 = step.measured_level - disturbance - op.level;
    let free = &phi * x0;
    let target = DVector::from_fn(n, |k, _| step.reference_preview[k] - disturbance - op.level);
    let du_prev = u_prev - op.inflow;

    let mut diff = DMatrix::zeros(n, n);
    for k in 0..n {
        diff[(k, k)] = 1.0;
        if k > 0 {
            diff[(k, k - 1)] = -1.0;
        }
    }
    let qx = config.weight_level;
    let qu = config.weight_rate;
    let h_uu = 2.0 * qx * gamma.transpose() * &gamma + 2.0 * qu * diff.transpose() * &diff;
    let mut hessian = DMatrix::zeros(2 * n, 2 * n);
    hessian.view_mut((0, 0), (n, n)).copy_from(&h_uu);
    for k in 0..n {
        hessian[(n + k, n + k)] = 2.0 * config.soft_level_penalty;
    }
    hessian = 0.5 * (&hessian + hessian.transpose());

    let mut gradient = DVector::zeros(2 * n);
    let mut g_u = 2.0 * qx * gamma.transpose() * (&free - &target);
    g_u[0] -= 2.0 * qu * du_prev;
    gradient.rows_mut(0, n).copy_from(&g_u);

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for k in 0..n {
        let mut a = DVector::zeros(2 * n);
        a[k] = 1.0;
        if k > 0 {
            a[k - 1] = -1.0;
        }
        let offset = if k == 0 { du_prev } else { 0.0 };
        if config.rate_max.is_finite() {
            rows.push((a.clone(), config.rate_max + offset));
        }
        if config.rate_min.is_finite() {
            rows.push((-a, -config.rate_min - offset));
        }
    }
    for k in 0..n {
        let mut lower = DVector::zeros(2 * n);
        let mut upper = DVector::zeros(2 * n);
        for j in 0..n {
            lower[j] = -gamma[(k, j)];
            upper[j] = gamma[(k, j)];
        }
        lower[n + k] = -1.0;
        upper[n + k] = -1.0;
        rows.push((lower, free[k] - (config.level_min - op.level)));
        rows.push((upper, (config.level_max - op.level) - free[k]));
    }
    let g = DMatrix::from_fn(rows.len(), 2 * n, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let lower = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            config.flow_min - op.inflow
        } else {
            0.0
        }
    });
    let upper = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            config.flow_max - op.inflow
        } else {
            f64::INFINITY
        }
    });
    Ok(QuadProgram::new(hessian, gradient)
        .with_inequalities(g, b)
        .with_bounds(lower, upper))
}

/// Linear MPC around a fixed operating point.
#[derive(Debug, Clone)]
pub struct LinearMpc {
    settings: ControllerSettings,
    model: LinearTankModel,
    estimator: EstimatorState,
    u_prev: f64,
    warm_start: Option<DVector<f64>>,
}

impl LinearMpc {
    pub fn new(
        params: TankParams,
        settings: ControllerSettings,
        operating_level: f64,
        initial_input: f64,
    ) -> Result<Self, ControllerError> {
        params.validate()?;
        settings.ocp.validate_for(&params)?;
        check_initial_input(&settings.ocp, initial_input)?;
        let model = params.linearize(OperatingPoint::at_level(&params, operating_level)?)?;
        Ok(Self {
            settings,
            model,
            estimator: EstimatorState::new(settings.estimator_gain, params.geometry.max_height)?,
            u_prev: initial_input,
            warm_start: None,
        })
    }

    pub fn model(&self) -> &LinearTankModel {
        &self.model
    }

    fn model_prediction(&self, level: f64, u: f64) -> f64 {
        let op = self.model.operating_point;
        op.level + self.model.step(level - op.level, u - op.inflow)
    }
}

impl Controller for LinearMpc {
    fn name(&self) -> &'static str {
        "lmpc"
    }

    fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    fn previous_input(&self) -> f64 {
        self.u_prev
    }

    fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    fn control_step(
        &mut self,
        input: &ControlStepInput,
    ) -> Result<(f64, ControllerDiagnostics), ControllerError> {
        let config = self.settings.ocp;
        let n = config.horizon;
        check_input(input, n)?;
        let start = Instant::now();
        if let Some(prediction) = self.estimator.last_model_prediction {
            self.estimator = estimator_update(self.estimator, input.measured_level, prediction);
        }
        let d = self.estimator.disturbance;
        let op = self.model.operating_point;
        let qp = lmpc_build_qp(&self.model, &config, input, self.u_prev, d)?;
        let solved = solve_qp(&qp, self.warm_start.as_ref(), &QpSettings::default())
            .ok()
            .filter(|s| s.status == QpStatus::Optimal);
        let corrected = input.measured_level - d;
        let Some(sol) = solved else {
            self.warm_start = None;
            self.estimator.last_model_prediction =
                Some(self.model_prediction(corrected, self.u_prev));
            return Ok((
                self.u_prev,
                ControllerDiagnostics::fail_safe(start.elapsed().as_secs_f64()),
            ));
        };

        let inputs: Vec<f64> = (0..n).map(|k| sol.z[k] + op.inflow).collect();
        let u_star = clamp_input(&config, self.u_prev, inputs[0]);

        // tracking and increment cost of the plan, without slack penalty
        let (phi, gamma) = prediction_matrices(&self.model, n);
        let u_dev = DVector::from_fn(n, |k, _| sol.z[k]);
        let x = &phi * (corrected - op.level) + &gamma * &u_dev;
        let mut cost = 0.0;
        let mut prev = self.u_prev;
        for k in 0..n {
            let e = x[k] + op.level + d - input.reference_preview[k];
            cost += config.weight_level * e * e + config.weight_rate * (inputs[k] - prev).powi(2);
            prev = inputs[k];
        }
        let active = ActiveConstraints {
            input_bound: input_active(&config, &inputs),
            rate_bound: rate_active(&config, self.u_prev, &inputs),
            level_bound: (n..2 * n).any(|i| sol.z[i] > 1e-9),
        };

        let mut shifted = sol.z.clone();
        for block in [0, n] {
            for k in 0..n - 1 {
                shifted[block + k] = sol.z[block + k + 1];
            }
        }
        self.warm_start = Some(shifted);
        self.estimator.last_model_prediction = Some(self.model_prediction(corrected, u_star));
        self.u_prev = u_star;
        let diag = ControllerDiagnostics {
            solve_time: start.elapsed().as_secs_f64(),
            iterations: sol.iterations,
            cost,
            kkt_residual: sol.kkt_residual,
            active,
            fail_safe: false,
        };
        Ok((u_star, diag))
    }
}

/// Nonlinear MPC on the Euler design model.
#[derive(Debug, Clone)]
pub struct NonlinearMpc {
    params: TankParams,
    settings: ControllerSettings,
    estimator: EstimatorState,
    u_prev: f64,
    warm_start: Option<OcpSolution>,
}

impl NonlinearMpc {
    pub fn new(
        params: TankParams,
        settings: ControllerSettings,
        initial_input: f64,
    ) -> Result<Self, ControllerError> {
        params.validate()?;
        settings.ocp.validate_for(&params)?;
        check_initial_input(&settings.ocp, initial_input)?;
        Ok(Self {
            params,
            settings,
            estimator: EstimatorState::new(settings.estimator_gain, params.geometry.max_height)?,
            u_prev: initial_input,
            warm_start: None,
        })
    }

    /// Problem solved for `input` under the disturbance estimate
    /// `disturbance`.
    pub fn instance_for(&self, input: &ControlStepInput, disturbance: f64) -> OcpInstance {
        let c = &self.settings.ocp;
        let clamp = |h: f64| h.clamp(c.level_min, c.level_max);
        OcpInstance {
            config: *c,
            params: self.params,
            initial_level: clamp(input.measured_level - disturbance),
            previous_input: self.u_prev,
            reference: input
                .reference_preview
                .iter()
                .map(|&r| clamp(r - disturbance))
                .collect(),
        }
    }

    fn model_prediction(&self, level: f64, u: f64) -> f64 {
        (level + self.params.sample_time * self.params.rhs_raw(level.max(0.0), u)).max(0.0)
    }
}

impl Controller for NonlinearMpc {
    fn name(&self) -> &'static str {
        "nmpc"
    }

    fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    fn previous_input(&self) -> f64 {
        self.u_prev
    }

    fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    fn control_step(
        &mut self,
        input: &ControlStepInput,
    ) -> Result<(f64, ControllerDiagnostics), ControllerError> {
        let config = self.settings.ocp;
        check_input(input, config.horizon)?;
        let start = Instant::now();
        if let Some(prediction) = self.estimator.last_model_prediction {
            self.estimator = estimator_update(self.estimator, input.measured_level, prediction);
        }
        let instance = self.instance_for(input, self.estimator.disturbance);
        let guess = self.warm_start.as_ref().map(OcpSolution::shifted);
        let solved = sqp_solve(&instance, guess.as_ref())
            .ok()
            .filter(|s| s.status == SqpStatus::Converged);
        let Some(sol) = solved else {
            self.warm_start = None;
            self.estimator.last_model_prediction =
                Some(self.model_prediction(instance.initial_level, self.u_prev));
            return Ok((
                self.u_prev,
                ControllerDiagnostics::fail_safe(start.elapsed().as_secs_f64()),
            ));
        };
        let u_star = clamp_input(&config, self.u_prev, sol.inputs[0]);
        let active = ActiveConstraints {
            input_bound: input_active(&config, &sol.inputs),
            rate_bound: rate_active(&config, self.u_prev, &sol.inputs),
            level_bound: sol.slacks.iter().any(|&s| s > 1e-9),
        };
        let diag = ControllerDiagnostics {
            solve_time: start.elapsed().as_secs_f64(),
            iterations: sol.sqp_iterations,
            cost: sol.cost,
            kkt_residual: sol.kkt_residual,
            active,
            fail_safe: false,
        };
        self.estimator.last_model_prediction =
            Some(self.model_prediction(instance.initial_level, u_star));
        self.u_prev = u_star;
        self.warm_start = Some(sol);
        Ok((u_star, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_is_still_without_innovation() {
        let s = EstimatorState::new(0.5, 2.0).unwrap();
        assert_eq!(estimator_update(s, 0.7, 0.7).disturbance, 0.0);
    }

    #[test]
    fn unit_gain_is_deadbeat() {
        let mut s = EstimatorState::new(1.0, 2.0).unwrap();
        s.disturbance = 0.3;
        assert_eq!(estimator_update(s, 0.9, 0.75).disturbance, 0.9 - 0.75);
    }

    #[test]
    fn constant_offset_converges_geometrically() {
        let delta = 0.04;
        let mut s = EstimatorState::new(0.5, 2.0).unwrap();
        for k in 1..=20 {
            s = estimator_update(s, 0.5 + delta, 0.5);
            let expected = delta * (1.0 - 0.5f64.powi(k));
            assert!((s.disturbance - expected).abs() < 1e-15, "k = {k}");
        }
    }

    #[test]
    fn estimate_is_clamped() {
        let s = EstimatorState::new(1.0, 2.0).unwrap();
        assert_eq!(estimator_update(s, 5.0, 0.0).disturbance, 2.0);
        assert!(EstimatorState::new(1.5, 2.0).is_err());
    }

    #[test]
    fn preview_length_is_checked() {
        let params = TankParams::default();
        let q = params.steady_state_flow(0.4).unwrap();
        let mut c = NonlinearMpc::new(params, ControllerSettings::default(), q).unwrap();
        let input = ControlStepInput {
            measured_level: 0.4,
            reference_preview: vec![0.4; 3],
            time: 0.0,
        };
        assert!(matches!(
            c.control_step(&input),
            Err(ControllerError::PreviewLength {
                expected: 10,
                got: 3
            })
        ));
    }
}
