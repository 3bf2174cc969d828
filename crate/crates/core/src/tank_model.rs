//! Conical tank geometry, level dynamics and their linearization.
//!
//! The tank is an inverted frustum of a right cone: the bottom disc has radius
//! `bottom_radius`, the top disc at `max_height` has radius `upper_radius`.
//! Liquid leaves through a valve whose flow is `valve_coeff * sqrt(h)`, so the
//! level obeys
//!
//! ```text
//! dh/dt = (q_in - k_v sqrt(h)) / F(h),    F(h) = pi r_f(h)^2
//! ```
//!
//! All quantities are SI: metres, seconds and cubic metres per second.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used to accept an operating point as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("level {level} m is outside the tank range [{min}, {max}] m")]
    LevelOutOfRange { level: f64, min: f64, max: f64 },
    #[error("step from level {from} m would leave the tank empty (level {to} m)")]
    NegativeLevel { from: f64, to: f64 },
    #[error("jacobian is undefined at level {0} m (square-root singularity)")]
    SingularJacobian(f64),
    #[error("flow {flow} m^3/s is outside the admissible range [{min}, {max}] m^3/s")]
    FlowOutOfRange { flow: f64, min: f64, max: f64 },
    #[error(
        "operating point ({level} m, {inflow} m^3/s) is not an equilibrium (residual {residual})"
    )]
    NotAnEquilibrium {
        level: f64,
        inflow: f64,
        residual: f64,
    },
    #[error("invalid tank parameter: {0}")]
    InvalidParameter(String),
}

/// Frustum dimensions of the tank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankGeometry {
    /// Radius of the top disc `R1` [m].
    pub upper_radius: f64,
    /// Radius of the bottom disc `R2` [m].
    pub bottom_radius: f64,
    /// Height of the frustum [m].
    pub max_height: f64,
}

impl Default for TankGeometry {
    fn default() -> Self {
        Self {
            upper_radius: 1.0,
            bottom_radius: 0.4,
            max_height: 2.0,
        }
    }
}

impl TankGeometry {
    pub fn new(upper_radius: f64, bottom_radius: f64, max_height: f64) -> Result<Self, ModelError> {
        let geometry = Self {
            upper_radius,
            bottom_radius,
            max_height,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.upper_radius)
            || !positive(self.bottom_radius)
            || !positive(self.max_height)
        {
            return Err(ModelError::InvalidParameter(format!(
                "radii and height must be positive and finite (R1 = {}, R2 = {}, h_max = {})",
                self.upper_radius, self.bottom_radius, self.max_height
            )));
        }
        if self.upper_radius < self.bottom_radius {
            return Err(ModelError::InvalidParameter(format!(
                "upper radius {} must not be smaller than bottom radius {}",
                self.upper_radius, self.bottom_radius
            )));
        }
        Ok(())
    }

    fn check_level(&self, h: f64) -> Result<(), ModelError> {
        if !(0.0..=self.max_height).contains(&h) {
            return Err(ModelError::LevelOutOfRange {
                level: h,
                min: 0.0,
                max: self.max_height,
            });
        }
        Ok(())
    }

    /// Radius growth per metre of level, `(R1 - R2) / h_max`.
    fn slope(&self) -> f64 {
        (self.upper_radius - self.bottom_radius) / self.max_height
    }

    pub(crate) fn surface_radius_raw(&self, h: f64) -> f64 {
        self.bottom_radius + self.slope() * h
    }

    pub(crate) fn cross_section_raw(&self, h: f64) -> f64 {
        let r = self.surface_radius_raw(h);
        PI * r * r
    }

    /// Derivative of the cross-section with respect to the level.
    pub(crate) fn cross_section_slope_raw(&self, h: f64) -> f64 {
        2.0 * PI * self.surface_radius_raw(h) * self.slope()
    }

    /// Radius of the liquid surface at level `h`.
    pub fn surface_radius(&self, h: f64) -> Result<f64, ModelError> {
        self.check_level(h)?;
        Ok(self.surface_radius_raw(h))
    }

    /// Liquid volume below level `h`, from the frustum formula with radii
    /// `R2` and `r_f(h)`.
    pub fn frustum_volume(&self, h: f64) -> Result<f64, ModelError> {
        self.check_level(h)?;
        let r = self.surface_radius_raw(h);
        let r2 = self.bottom_radius;
        Ok(PI * h / 3.0 * (r * r + r2 * r + r2 * r2))
    }

    /// Same volume as [`frustum_volume`](Self::frustum_volume), written as a
    /// polynomial in `h`.
    pub fn frustum_volume_expanded(&self, h: f64) -> Result<f64, ModelError> {
        self.check_level(h)?;
        let r2 = self.bottom_radius;
        let c = self.slope();
        Ok(PI * h / 3.0 * (3.0 * r2 * r2 + 3.0 * r2 * c * h + c * c * h * h))
    }

    /// `F(h) = dV/dh`, the area of the liquid surface.
    pub fn cross_section(&self, h: f64) -> Result<f64, ModelError> {
        self.check_level(h)?;
        Ok(self.cross_section_raw(h))
    }
}

/// Physical and sampling parameters of the tank process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankParams {
    pub geometry: TankGeometry,
    /// Outlet valve coefficient `k_v` [m^2.5/s].
    pub valve_coeff: f64,
    pub q_in_min: f64,
    pub q_in_max: f64,
    /// Controller sampling time `T_s` [s].
    pub sample_time: f64,
}

impl Default for TankParams {
    fn default() -> Self {
        Self {
            geometry: TankGeometry::default(),
            valve_coeff: 0.075,
            q_in_min: 0.0,
            q_in_max: 0.1,
            sample_time: 2.0,
        }
    }
}

/// Partial derivatives of the level rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsJacobian {
    /// d(dh/dt)/dh [1/s].
    pub d_level: f64,
    /// d(dh/dt)/dq_in [1/m^2].
    pub d_inflow: f64,
}

impl TankParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.geometry.validate()?;
        if !(self.valve_coeff.is_finite() && self.valve_coeff > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "valve coefficient must be positive, got {}",
                self.valve_coeff
            )));
        }
        if !(self.sample_time.is_finite() && self.sample_time > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "sample time must be positive, got {}",
                self.sample_time
            )));
        }
        if !(self.q_in_min >= 0.0 && self.q_in_min < self.q_in_max && self.q_in_max.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "flow bounds must satisfy 0 <= q_in_min < q_in_max, got [{}, {}]",
                self.q_in_min, self.q_in_max
            )));
        }
        Ok(())
    }

    pub(crate) fn outflow_raw(&self, h: f64) -> f64 {
        self.valve_coeff * h.sqrt()
    }

    /// Level rate without range checks. The frustum is extrapolated beyond
    /// `max_height`; callers keep `h >= 0`.
    pub(crate) fn rhs_raw(&self, h: f64, q_in: f64) -> f64 {
        (q_in - self.outflow_raw(h)) / self.geometry.cross_section_raw(h)
    }

    pub(crate) fn jacobian_raw(&self, h: f64, q_in: f64) -> DynamicsJacobian {
        let area = self.geometry.cross_section_raw(h);
        let sqrt_h = h.sqrt();
        let d_outflow = self.valve_coeff / (2.0 * sqrt_h);
        let imbalance = q_in - self.valve_coeff * sqrt_h;
        let d_area = self.geometry.cross_section_slope_raw(h);
        DynamicsJacobian {
            d_level: (-d_outflow * area - imbalance * d_area) / (area * area),
            d_inflow: 1.0 / area,
        }
    }

    /// Valve outflow `k_v sqrt(h)`.
    pub fn outflow(&self, h: f64) -> Result<f64, ModelError> {
        if h < 0.0 || h.is_nan() {
            return Err(ModelError::LevelOutOfRange {
                level: h,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        Ok(self.outflow_raw(h))
    }

    /// Continuous-time level rate `dh/dt` [m/s].
    pub fn dynamics_rhs(&self, h: f64, q_in: f64) -> Result<f64, ModelError> {
        let area = self.geometry.cross_section(h)?;
        Ok((q_in - self.outflow(h)?) / area)
    }

    /// One forward-Euler step of length `sample_time`. This is the prediction
    /// model of the nonlinear controller.
    pub fn euler_step(&self, h: f64, q_in: f64) -> Result<f64, ModelError> {
        let next = h + self.sample_time * self.dynamics_rhs(h, q_in)?;
        if next < 0.0 {
            return Err(ModelError::NegativeLevel { from: h, to: next });
        }
        Ok(next)
    }

    /// Classical fourth-order Runge-Kutta step of length `dt` with the inflow
    /// held constant. Used as plant truth.
    pub fn rk4_step(&self, h: f64, q_in: f64, dt: f64) -> Result<f64, ModelError> {
        self.geometry.check_level(h)?;
        // an intermediate stage can dip below zero near an empty tank
        let f = |level: f64| self.rhs_raw(level.max(0.0), q_in);
        let k1 = f(h);
        let k2 = f(h + 0.5 * dt * k1);
        let k3 = f(h + 0.5 * dt * k2);
        let k4 = f(h + dt * k3);
        let next = h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next < 0.0 {
            return Err(ModelError::NegativeLevel { from: h, to: next });
        }
        Ok(next)
    }

    /// Analytic partial derivatives of [`dynamics_rhs`](Self::dynamics_rhs).
    pub fn dynamics_jacobian(&self, h: f64, q_in: f64) -> Result<DynamicsJacobian, ModelError> {
        if h <= 0.0 {
            return Err(ModelError::SingularJacobian(h));
        }
        self.geometry.check_level(h)?;
        Ok(self.jacobian_raw(h, q_in))
    }

    /// Inflow that holds the level at `h_l`.
    pub fn steady_state_flow(&self, h_l: f64) -> Result<f64, ModelError> {
        if !(h_l > 0.0 && h_l <= self.geometry.max_height) {
            return Err(ModelError::LevelOutOfRange {
                level: h_l,
                min: 0.0,
                max: self.geometry.max_height,
            });
        }
        Ok(self.outflow_raw(h_l))
    }

    /// Level at which the inflow `q_l` is balanced by the outflow.
    pub fn steady_state_level(&self, q_l: f64) -> Result<f64, ModelError> {
        let q_top = self.outflow_raw(self.geometry.max_height);
        if !(q_l > 0.0 && q_l <= q_top) {
            return Err(ModelError::FlowOutOfRange {
                flow: q_l,
                min: 0.0,
                max: q_top,
            });
        }
        let ratio = q_l / self.valve_coeff;
        Ok(ratio * ratio)
    }

    /// First-order expansion of the dynamics around an equilibrium, with its
    /// zero-order-hold discretization at `sample_time`.
    pub fn linearize(&self, op: OperatingPoint) -> Result<LinearTankModel, ModelError> {
        let residual = op.inflow - self.outflow(op.level)?;
        if residual.abs() > EQUILIBRIUM_TOL {
            return Err(ModelError::NotAnEquilibrium {
                level: op.level,
                inflow: op.inflow,
                residual,
            });
        }
        let jac = self.dynamics_jacobian(op.level, op.inflow)?;
        let a_cont = jac.d_level;
        let b_cont = jac.d_inflow;
        let a_disc = (a_cont * self.sample_time).exp();
        // (e^{aT} - 1) / a, written with exp_m1 for accuracy at small aT
        let b_disc = (a_cont * self.sample_time).exp_m1() / a_cont * b_cont;
        Ok(LinearTankModel {
            a_cont,
            b_cont,
            a_disc,
            b_disc,
            operating_point: op,
            sample_time: self.sample_time,
        })
    }
}

/// Equilibrium pair `(h_L, q_in,L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub level: f64,
    pub inflow: f64,
}

impl OperatingPoint {
    /// Equilibrium at `level`, with the inflow that balances the outflow.
    pub fn at_level(params: &TankParams, level: f64) -> Result<Self, ModelError> {
        Ok(Self {
            level,
            inflow: params.steady_state_flow(level)?,
        })
    }
}

/// Scalar linear model in deviation variables `x = h - h_L`, `u = q_in - q_in,L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTankModel {
    pub a_cont: f64,
    pub b_cont: f64,
    pub a_disc: f64,
    pub b_disc: f64,
    pub operating_point: OperatingPoint,
    pub sample_time: f64,
}

impl LinearTankModel {
    /// Discrete deviation update `x+ = a x + b u`.
    pub fn step(&self, x: f64, u: f64) -> f64 {
        self.a_disc * x + self.b_disc * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TankParams {
        TankParams::default()
    }

    fn q_l() -> f64 {
        0.075 * 0.4f64.sqrt()
    }

    #[test]
    fn surface_radius_examples() {
        let g = TankGeometry::default();
        assert_eq!(g.surface_radius(0.0).unwrap(), 0.4);
        assert!((g.surface_radius(2.0).unwrap() - 1.0).abs() < 1e-15);
        // linear interpolation between the endpoints
        let interp = 0.4 + (1.0 - 0.4) * 0.4 / 2.0;
        assert!((g.surface_radius(0.4).unwrap() - 0.52).abs() < 1e-15);
        assert!((g.surface_radius(0.4).unwrap() - interp).abs() < 1e-15);
        assert!(g.surface_radius(-0.1).is_err());
        assert!(g.surface_radius(2.1).is_err());
    }

    #[test]
    fn frustum_volume_examples() {
        let g = TankGeometry::default();
        assert_eq!(g.frustum_volume(0.0).unwrap(), 0.0);
        // adaptive quadrature of pi r_f(s)^2 over [0, 2] and [0, 0.4]
        assert!((g.frustum_volume(2.0).unwrap() - 3.2672563597333846).abs() < 1e-12);
        assert!((g.frustum_volume(0.4).unwrap() - 0.2674123666735632).abs() < 1e-12);
        let a = g.frustum_volume(0.4).unwrap();
        let b = g.frustum_volume_expanded(0.4).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
        assert!(g.frustum_volume(2.5).is_err());
    }

    #[test]
    fn cross_section_examples() {
        let g = TankGeometry::default();
        assert!((g.cross_section(0.0).unwrap() - PI * 0.16).abs() < 1e-15);
        assert!((g.cross_section(0.4).unwrap() - PI * 0.2704).abs() < 1e-14);
        assert!((g.cross_section(2.0).unwrap() - PI).abs() < 1e-14);
        // central difference of the volume
        let d = 1e-6;
        let fd =
            (g.frustum_volume(0.4 + d).unwrap() - g.frustum_volume(0.4 - d).unwrap()) / (2.0 * d);
        assert!((fd - 0.849487).abs() < 1e-6);
    }

    #[test]
    fn outflow_examples() {
        let p = params();
        assert_eq!(p.outflow(0.0).unwrap(), 0.0);
        assert!((p.outflow(0.4).unwrap() - 0.0474).abs() < 1e-4);
        assert_eq!(p.outflow(1.0).unwrap(), 0.075);
        assert!(p.outflow(-1e-3).is_err());
    }

    #[test]
    fn dynamics_rhs_examples() {
        let p = params();
        assert_eq!(p.dynamics_rhs(0.4, q_l()).unwrap(), 0.0);
        assert!((p.dynamics_rhs(0.4, 0.1).unwrap() - 0.06187953027748875).abs() < 1e-12);
        assert!((p.dynamics_rhs(0.4, 0.0).unwrap() + 0.05583862289699004).abs() < 1e-12);
        assert!(p.dynamics_rhs(2.5, 0.0).is_err());
    }

    #[test]
    fn euler_step_examples() {
        let p = params();
        assert_eq!(p.euler_step(0.4, q_l()).unwrap(), 0.4);
        assert!((p.euler_step(0.4, 0.1).unwrap() - 0.5237590605549776).abs() < 1e-12);
        assert!((p.euler_step(0.4, 0.0).unwrap() - 0.28832275420601994).abs() < 1e-12);
        // draining a nearly empty tank overshoots below zero
        assert!(matches!(
            p.euler_step(0.05, 0.0),
            Err(ModelError::NegativeLevel { .. })
        ));
    }

    #[test]
    fn jacobian_examples() {
        let p = params();
        let j = p.dynamics_jacobian(0.4, q_l()).unwrap();
        assert!((j.d_level + 0.069798).abs() < 1e-6);
        assert!((j.d_inflow - 1.177182).abs() < 1e-6);
        let j1 = p.dynamics_jacobian(1.0, 0.075).unwrap();
        assert!((j1.d_inflow - 1.0 / (PI * 0.49)).abs() < 1e-15);
        assert!((j1.d_inflow - 0.6496120126206307).abs() < 1e-9);
        assert!(matches!(
            p.dynamics_jacobian(0.0, 0.0),
            Err(ModelError::SingularJacobian(_))
        ));
    }

    #[test]
    fn steady_state_examples() {
        let p = params();
        assert!((p.steady_state_flow(0.4).unwrap() - 0.0474).abs() < 1e-4);
        assert_eq!(p.steady_state_level(0.075).unwrap(), 1.0);
        for h in [0.1, 0.4, 1.5] {
            let back = p
                .steady_state_level(p.steady_state_flow(h).unwrap())
                .unwrap();
            assert!((back - h).abs() <= 1e-12 * h);
        }
        assert!(p.steady_state_flow(0.0).is_err());
        assert!(p.steady_state_level(0.2).is_err());
    }

    #[test]
    fn linearize_examples() {
        let p = params();
        let op = OperatingPoint::at_level(&p, 0.4).unwrap();
        let m = p.linearize(op).unwrap();
        assert!((m.a_cont + 0.06979827861575563).abs() < 1e-9);
        assert!((m.b_cont - 1.1771815317459653).abs() < 1e-9);
        // dense RK4 integration of the linear ODE over one sample
        assert!((m.a_disc - 0.8697090424526278).abs() < 1e-9);
        assert!((m.b_disc - 2.1974196501694214).abs() < 1e-9);
        assert_eq!(m.step(0.0, 0.0), 0.0);
        assert!(m.a_cont < 0.0);
    }

    #[test]
    fn linearize_rejects_non_equilibrium() {
        let p = params();
        let op = OperatingPoint {
            level: 0.4,
            inflow: 0.05,
        };
        assert!(matches!(
            p.linearize(op),
            Err(ModelError::NotAnEquilibrium { .. })
        ));
    }

    #[test]
    fn rk4_examples() {
        let p = params();
        let h = p.rk4_step(0.4, q_l(), 0.2).unwrap();
        assert!((h - 0.4).abs() < 1e-12);

        let mut h = 0.4;
        for _ in 0..10 {
            h = p.rk4_step(h, 0.1, 0.2).unwrap();
        }
        // Richardson-extrapolated Euler with dt = 1e-5 / 2e-5
        let euler = |dt: f64| {
            let mut level = 0.4;
            for _ in 0..(2.0 / dt).round() as usize {
                level += dt * p.dynamics_rhs(level, 0.1).unwrap();
            }
            level
        };
        let reference = 2.0 * euler(1e-5) - euler(2e-5);
        assert!((h - reference).abs() < 1e-8, "{h} vs {reference}");

        let coarse = p.euler_step(0.4, 0.1).unwrap();
        assert!((coarse - h).abs() > 1e-3);
    }

    #[test]
    fn rejects_invalid_geometry() {
        assert!(TankGeometry::new(0.3, 0.4, 2.0).is_err());
        assert!(TankGeometry::new(1.0, 0.0, 2.0).is_err());
        let mut p = params();
        p.q_in_max = -1.0;
        assert!(p.validate().is_err());
    }
}
