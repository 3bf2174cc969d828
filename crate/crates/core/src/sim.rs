//! Closed-loop simulation: RK4 plant, zero-order-hold inputs, scheduled
//! reference steps and tracking metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{ControlStepInput, Controller, ControllerError};
use crate::tank_model::TankParams;

/// Band around the reference that counts as settled [m].
pub const SETTLING_BAND: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Reference change to `level` at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub time: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    /// First entry sets the reference at t = 0; later entries are steps.
    pub reference_schedule: Vec<StepEvent>,
    pub initial_level: f64,
    /// Input applied before the first sample; the steady-state flow of the
    /// initial level when absent.
    pub initial_input: Option<f64>,
    pub plant_substeps: usize,
    /// Plant valve coefficient relative to the design value.
    pub valve_scale: f64,
    /// Half-width of uniform measurement noise [m]; zero disables it.
    pub measurement_noise: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration: 400.0,
            reference_schedule: vec![
                StepEvent {
                    time: 0.0,
                    level: 0.4,
                },
                StepEvent {
                    time: 50.0,
                    level: 0.8,
                },
                StepEvent {
                    time: 350.0,
                    level: 0.15,
                },
            ],
            initial_level: 0.4,
            initial_input: None,
            plant_substeps: 10,
            valve_scale: 1.0,
            measurement_noise: 0.0,
        }
    }
}

impl Scenario {
    pub fn validate(&self, params: &TankParams) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let h_max = params.geometry.max_height;
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration {} must be positive", self.duration));
        }
        let Some(first) = self.reference_schedule.first() else {
            return bad("reference schedule is empty".into());
        };
        if first.time != 0.0 {
            return bad(format!(
                "first reference entry must be at t = 0, got {}",
                first.time
            ));
        }
        for w in self.reference_schedule.windows(2) {
            if !(w[1].time > w[0].time) {
                return bad("reference times must be strictly increasing".into());
            }
        }
        for e in &self.reference_schedule {
            if e.time > self.duration {
                return bad(format!("reference step at {} is after the end", e.time));
            }
            if !(0.0..=h_max).contains(&e.level) {
                return bad(format!("reference level {} outside [0, {h_max}]", e.level));
            }
        }
        if !(0.0..=h_max).contains(&self.initial_level) {
            return bad(format!(
                "initial level {} outside [0, {h_max}]",
                self.initial_level
            ));
        }
        if let Some(u) = self.initial_input {
            if !(params.q_in_min..=params.q_in_max).contains(&u) {
                return bad(format!("initial input {u} outside the flow range"));
            }
        }
        if self.plant_substeps == 0 {
            return bad("plant_substeps must be at least 1".into());
        }
        if !(self.valve_scale > 0.0) || !(self.measurement_noise >= 0.0) {
            return bad("valve_scale must be positive and measurement_noise non-negative".into());
        }
        Ok(())
    }

    /// Reference in force at time `t`.
    pub fn reference_at(&self, t: f64) -> f64 {
        self.reference_schedule
            .iter()
            .take_while(|e| e.time <= t)
            .last()
            .or(self.reference_schedule.first())
            .map_or(0.0, |e| e.level)
    }

    /// Input applied before the first sample.
    pub fn initial_flow(&self, params: &TankParams) -> Result<f64, SimError> {
        match self.initial_input {
            Some(u) => Ok(u),
            None => params
                .steady_state_flow(self.initial_level)
                .map_err(|e| SimError::InvalidScenario(e.to_string())),
        }
    }

    pub fn num_samples(&self, sample_time: f64) -> usize {
        (self.duration / sample_time + 1e-9).floor() as usize + 1
    }

    /// Actual step events, without the initial entry.
    pub fn step_events(&self) -> Vec<StepEvent> {
        self.reference_schedule.iter().skip(1).copied().collect()
    }
}

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h_ref: f64,
    pub h_plant: f64,
    pub u: f64,
    pub du: f64,
    pub d_hat: f64,
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub solve_time: f64,
    pub fail_safe: bool,
}

/// Limits the applied inputs are checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputLimits {
    pub flow_min: f64,
    pub flow_max: f64,
    pub rate_min: f64,
    pub rate_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventMetrics {
    pub time: f64,
    pub from: f64,
    pub to: f64,
    /// Largest drop below the new reference after a downward step.
    pub undershoot: f64,
    /// Largest rise above the new reference after an upward step.
    pub overshoot: f64,
    /// Time from the event until the level stays within the settling band
    /// for the rest of the window. The window ends when the next event
    /// enters the preview, or at the end of the run.
    pub settling_time: Option<f64>,
    /// `|h - r|` at the last sample of the event window.
    pub final_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub ise: f64,
    pub iae: f64,
    pub max_undershoot: f64,
    pub max_overshoot: f64,
    pub events: Vec<EventMetrics>,
    pub constraint_violations: usize,
    pub fail_safe_steps: usize,
}

/// Where a run stopped early.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimAbort {
    pub time: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub controller: String,
    pub sample_time: f64,
    pub records: Vec<StepRecord>,
    pub events: Vec<StepEvent>,
    /// How far ahead the controller saw the reference [s]; per-event
    /// metrics stop this long before the next event.
    pub preview_time: f64,
    pub limits: InputLimits,
    pub abort: Option<SimAbort>,
    pub metrics: Metrics,
}

/// Runs the scenario with `controller` in the loop.
///
/// Leaving `[0, h_max]` stops the run; the returned trace then holds the
/// samples up to that point and `abort` records where it happened.
pub fn run_closed_loop(
    scenario: &Scenario,
    controller: &mut dyn Controller,
    params: &TankParams,
    seed: u64,
) -> Result<SimTrace, SimError> {
    params
        .validate()
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    scenario.validate(params)?;
    let ts = params.sample_time;
    let settings = *controller.settings();
    let ocp = settings.ocp;
    let horizon = ocp.horizon;
    let h_max = params.geometry.max_height;

    let mut plant = *params;
    plant.valve_coeff *= scenario.valve_scale;
    let dt = ts / scenario.plant_substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let samples = scenario.num_samples(ts);
    let mut records = Vec::with_capacity(samples);
    let mut h = scenario.initial_level;
    let mut u_prev = controller.previous_input();
    let mut abort = None;

    for k in 0..samples {
        let t = k as f64 * ts;
        let noise = if scenario.measurement_noise > 0.0 {
            rng.gen_range(-scenario.measurement_noise..=scenario.measurement_noise)
        } else {
            0.0
        };
        let preview = (0..horizon)
            .map(|i| {
                if settings.reference_preview {
                    scenario.reference_at(t + (i + 1) as f64 * ts)
                } else {
                    scenario.reference_at(t)
                }
            })
            .collect();
        let input = ControlStepInput {
            measured_level: h + noise,
            reference_preview: preview,
            time: t,
        };
        let (u, diag) = controller.control_step(&input)?;
        records.push(StepRecord {
            t,
            h_ref: scenario.reference_at(t),
            h_plant: h,
            u,
            du: u - u_prev,
            d_hat: controller.estimator().disturbance,
            cost: diag.cost,
            iterations: diag.iterations,
            kkt_residual: diag.kkt_residual,
            solve_time: diag.solve_time,
            fail_safe: diag.fail_safe,
        });
        u_prev = u;
        if k + 1 == samples {
            break;
        }
        let mut next = Some(h);
        for _ in 0..scenario.plant_substeps {
            next = next
                .and_then(|x| plant.rk4_step(x, u, dt).ok())
                .filter(|x| *x <= h_max);
        }
        match next {
            Some(x) => h = x,
            None => {
                log::warn!("plant level left [0, {h_max}] after t = {t}");
                abort = Some(SimAbort {
                    time: t + ts,
                    level: h,
                });
                break;
            }
        }
    }

    let mut trace = SimTrace {
        controller: controller.name().to_string(),
        sample_time: ts,
        records,
        events: scenario.step_events(),
        preview_time: if settings.reference_preview {
            horizon as f64 * ts
        } else {
            0.0
        },
        limits: InputLimits {
            flow_min: ocp.flow_min,
            flow_max: ocp.flow_max,
            rate_min: ocp.rate_min,
            rate_max: ocp.rate_max,
        },
        abort,
        metrics: Metrics {
            ise: 0.0,
            iae: 0.0,
            max_undershoot: 0.0,
            max_overshoot: 0.0,
            events: Vec::new(),
            constraint_violations: 0,
            fail_safe_steps: 0,
        },
    };
    trace.metrics = compute_metrics(&trace);
    Ok(trace)
}

/// Runs independent closed loops in parallel, one thread per controller.
/// Results come back in the order of `controllers`.
pub fn run_batch(
    scenario: &Scenario,
    controllers: Vec<Box<dyn Controller + Send>>,
    params: &TankParams,
    seed: u64,
) -> Vec<Result<SimTrace, SimError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = controllers
            .into_iter()
            .map(|mut c| scope.spawn(move || run_closed_loop(scenario, c.as_mut(), params, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Tracking and constraint metrics of a trace.
pub fn compute_metrics(trace: &SimTrace) -> Metrics {
    let ts = trace.sample_time;
    let records = &trace.records;
    let ise = records
        .iter()
        .map(|r| (r.h_plant - r.h_ref).powi(2) * ts)
        .sum();
    let iae = records
        .iter()
        .map(|r| (r.h_plant - r.h_ref).abs() * ts)
        .sum();
    let lim = &trace.limits;
    let constraint_violations = records
        .iter()
        .filter(|r| {
            !(r.u >= lim.flow_min
                && r.u <= lim.flow_max
                && r.du >= lim.rate_min
                && r.du <= lim.rate_max)
        })
        .count();
    let fail_safe_steps = records.iter().filter(|r| r.fail_safe).count();

    let mut events = Vec::new();
    for (i, event) in trace.events.iter().enumerate() {
        let end = trace
            .events
            .get(i + 1)
            .map_or(f64::INFINITY, |e| e.time - trace.preview_time);
        let window: Vec<&StepRecord> = records
            .iter()
            .filter(|r| r.t >= event.time && (r.t < end || r.t == event.time))
            .collect();
        let from = records
            .iter()
            .filter(|r| r.t < event.time)
            .last()
            .map_or(event.level, |r| r.h_ref);
        let to = event.level;
        let mut undershoot = 0.0f64;
        let mut overshoot = 0.0f64;
        for r in &window {
            if to < from {
                undershoot = undershoot.max(to - r.h_plant);
            } else if to > from {
                overshoot = overshoot.max(r.h_plant - to);
            }
        }
        let settled_from = window
            .iter()
            .rposition(|r| (r.h_plant - to).abs() >= SETTLING_BAND)
            .map_or(0, |p| p + 1);
        let settling_time = window.get(settled_from).map(|r| r.t - event.time);
        let final_error = window.last().map_or(f64::NAN, |r| (r.h_plant - to).abs());
        events.push(EventMetrics {
            time: event.time,
            from,
            to,
            undershoot,
            overshoot,
            settling_time,
            final_error,
        });
    }
    Metrics {
        ise,
        iae,
        max_undershoot: events.iter().map(|e| e.undershoot).fold(0.0, f64::max),
        max_overshoot: events.iter().map(|e| e.overshoot).fold(0.0, f64::max),
        events,
        constraint_violations,
        fail_safe_steps,
    }
}
