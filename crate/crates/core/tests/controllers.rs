use conetank::controllers::{
    estimator_update, lmpc_build_qp, prediction_matrices, ControlStepInput, Controller,
    ControllerSettings, EstimatorState, LinearMpc, NonlinearMpc,
};
use conetank::nmpc::{clamp_input, sqp_solve, OcpConfig};
use conetank::qp::{solve_qp, QpSettings, QpStatus};
use conetank::tank_model::{OperatingPoint, TankParams};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H_L: f64 = 0.4;

fn params() -> TankParams {
    TankParams::default()
}

fn q_l() -> f64 {
    params().steady_state_flow(H_L).unwrap()
}

fn settings(horizon: usize) -> ControllerSettings {
    let mut s = ControllerSettings::default();
    s.ocp.horizon = horizon;
    s
}

fn step(level: f64, preview: Vec<f64>) -> ControlStepInput {
    ControlStepInput {
        measured_level: level,
        reference_preview: preview,
        time: 0.0,
    }
}

fn lmpc(s: ControllerSettings, u0: f64) -> LinearMpc {
    LinearMpc::new(params(), s, H_L, u0).unwrap()
}

fn nmpc(s: ControllerSettings, u0: f64) -> NonlinearMpc {
    NonlinearMpc::new(params(), s, u0).unwrap()
}

/// Minimizer of `qx (a x0 + b u - r)^2 + qu (u - u_prev)^2` over `[lo, hi]`.
fn scalar_oracle(
    a: f64,
    b: f64,
    x0: f64,
    r: f64,
    u_prev: f64,
    qx: f64,
    qu: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let free = (qx * b * (r - a * x0) + qu * u_prev) / (qx * b * b + qu);
    free.clamp(lo, hi)
}

#[test]
fn one_step_lmpc_matches_scalar_closed_form() {
    let p = params();
    let model = p
        .linearize(OperatingPoint::at_level(&p, H_L).unwrap())
        .unwrap();
    let (a, b) = (model.a_disc, model.b_disc);
    let q_l = model.operating_point.inflow;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut clipped = 0;
    for _ in 0..200 {
        let mut config = OcpConfig {
            horizon: 1,
            ..OcpConfig::default()
        };
        config.weight_level = rng.gen_range(0.1..10.0);
        config.weight_rate = rng.gen_range(0.01..20.0);
        let level = rng.gen_range(0.3..0.5);
        let reference = rng.gen_range(0.3..0.5);
        let u_prev = rng.gen_range(0.0..0.1);
        let d = rng.gen_range(-0.02..0.02);
        let qp = lmpc_build_qp(&model, &config, &step(level, vec![reference]), u_prev, d).unwrap();
        let sol = solve_qp(&qp, None, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);

        let dev_prev = u_prev - q_l;
        let lo = (config.flow_min - q_l).max(dev_prev + config.rate_min);
        let hi = (config.flow_max - q_l).min(dev_prev + config.rate_max);
        let x0 = level - d - H_L;
        let r = reference - d - H_L;
        let expected = scalar_oracle(
            a,
            b,
            x0,
            r,
            dev_prev,
            config.weight_level,
            config.weight_rate,
            lo,
            hi,
        );
        if expected == lo || expected == hi {
            clipped += 1;
        }
        assert!(
            (sol.z[0] - expected).abs() <= 1e-9,
            "{} vs {expected}",
            sol.z[0]
        );
        assert!(sol.z[1].abs() <= 1e-12, "slack {}", sol.z[1]);
    }
    assert!(clipped > 10 && clipped < 190, "clipped {clipped}");
}

#[test]
fn condensed_predictor_matches_recursion() {
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for level in [0.1, 0.4, 1.3] {
        let model = p
            .linearize(OperatingPoint::at_level(&p, level).unwrap())
            .unwrap();
        for n in [1, 4, 10, 25] {
            let (phi, gamma) = prediction_matrices(&model, n);
            let x0 = rng.gen_range(-0.2..0.2);
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-0.05..0.05));
            let condensed = &phi * x0 + &gamma * &u;
            let mut x = x0;
            for k in 0..n {
                x = model.step(x, u[k]);
                assert!((condensed[k] - x).abs() <= 1e-12 * (1.0 + x.abs()), "k={k}");
            }
        }
    }
}

#[test]
fn zero_deviation_is_optimal_at_operating_point() {
    let p = params();
    let model = p
        .linearize(OperatingPoint::at_level(&p, H_L).unwrap())
        .unwrap();
    let config = OcpConfig::default();
    let qp = lmpc_build_qp(&model, &config, &step(H_L, vec![H_L; 10]), q_l(), 0.0).unwrap();
    let sol = solve_qp(&qp, None, &QpSettings::default()).unwrap();
    assert!(sol.z.amax() <= 1e-12);
}

#[test]
fn equilibrium_holds_steady_flow() {
    let q = q_l();
    let mut controllers: Vec<Box<dyn Controller>> = vec![
        Box::new(lmpc(settings(10), q)),
        Box::new(nmpc(settings(10), q)),
    ];
    for c in controllers.iter_mut() {
        for _ in 0..5 {
            let (u, diag) = c.control_step(&step(H_L, vec![H_L; 10])).unwrap();
            assert!((u - q).abs() <= 1e-6, "{}: {u}", c.name());
            assert!(!diag.fail_safe);
        }
    }
}

#[test]
fn preview_of_upward_step_raises_input_early() {
    let q = q_l();
    for j in 1..=3 {
        let mut preview = vec![H_L; 10];
        preview[j..].fill(0.8);
        for mut c in [
            Box::new(lmpc(settings(10), q)) as Box<dyn Controller>,
            Box::new(nmpc(settings(10), q)),
        ] {
            let (u, _) = c.control_step(&step(H_L, preview.clone())).unwrap();
            assert!(u > q + 1e-3, "{} step at {j}: {u}", c.name());
        }
    }
}

#[test]
fn nmpc_first_input_is_the_ocp_solution() {
    let q = q_l();
    let c = nmpc(settings(10), q);
    let input = step(H_L, vec![0.8; 10]);
    let instance = c.instance_for(&input, 0.0);
    let direct = sqp_solve(&instance, None).unwrap();
    let mut c = c;
    let (u, diag) = c.control_step(&input).unwrap();
    assert_eq!(u, clamp_input(&instance.config, q, direct.inputs[0]));
    assert_eq!(diag.iterations, direct.sqp_iterations);
    assert!(u > q);
}

#[test]
fn identical_state_gives_identical_input() {
    let q = q_l();
    let inputs = [
        step(0.45, vec![0.6; 10]),
        step(0.47, vec![0.6; 10]),
        step(0.5, vec![0.6; 10]),
    ];
    let mut l = lmpc(settings(10), q);
    let mut n = nmpc(settings(10), q);
    for input in &inputs {
        let (mut l2, mut n2) = (l.clone(), n.clone());
        assert_eq!(
            l.control_step(input).unwrap().0,
            l2.control_step(input).unwrap().0
        );
        assert_eq!(
            n.control_step(input).unwrap().0,
            n2.control_step(input).unwrap().0
        );
    }
}

#[test]
fn controllers_agree_near_operating_point() {
    let q = q_l();
    for k in 0..=20 {
        let level = H_L - 0.01 + 0.001 * k as f64;
        let (ul, _) = lmpc(settings(10), q)
            .control_step(&step(level, vec![H_L; 10]))
            .unwrap();
        let (un, _) = nmpc(settings(10), q)
            .control_step(&step(level, vec![H_L; 10]))
            .unwrap();
        assert!((ul - un).abs() <= 1e-3, "h0={level}: {ul} vs {un}");
    }
}

#[test]
fn unconverged_nmpc_holds_previous_input() {
    let q = q_l();
    let mut s = settings(10);
    s.ocp.sqp.max_iter = 1;
    let mut c = nmpc(s, q);
    let (u, diag) = c.control_step(&step(H_L, vec![0.8; 10])).unwrap();
    assert_eq!(u, q);
    assert!(diag.fail_safe);
    assert_eq!(c.previous_input(), q);
}

#[test]
fn wrong_preview_length_is_rejected() {
    let mut c = lmpc(settings(10), q_l());
    assert!(c.control_step(&step(H_L, vec![H_L; 9])).is_err());
    let mut c = nmpc(settings(10), q_l());
    assert!(c.control_step(&step(H_L, vec![H_L; 11])).is_err());
}

#[test]
fn estimator_state_rejects_gain_outside_unit_interval() {
    assert!(EstimatorState::new(1.5, 2.0).is_err());
    assert!(EstimatorState::new(-0.1, 2.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimator_follows_geometric_recursion(delta in -0.5f64..0.5, gain in 0.05f64..1.0, k in 1usize..30) {
        let mut s = EstimatorState::new(gain, 2.0).unwrap();
        for _ in 0..k {
            s = estimator_update(s, 0.6 + delta, 0.6);
        }
        let expected = delta * (1.0 - (1.0 - gain).powi(k as i32));
        prop_assert!((s.disturbance - expected).abs() <= 1e-12);
    }

    #[test]
    fn applied_inputs_respect_bounds_exactly(
        u0 in 0.0f64..=0.1,
        levels in proptest::collection::vec(0.05f64..1.9, 4),
        refs in proptest::collection::vec(0.05f64..1.9, 10),
    ) {
        let s = settings(10);
        let mut controllers: Vec<Box<dyn Controller>> = vec![Box::new(lmpc(s, u0)), Box::new(nmpc(s, u0))];
        for c in controllers.iter_mut() {
            let mut prev = u0;
            for &h in &levels {
                let (u, _) = c.control_step(&step(h, refs.clone())).unwrap();
                prop_assert!(u >= s.ocp.flow_min && u <= s.ocp.flow_max);
                prop_assert!(u - prev >= s.ocp.rate_min && u - prev <= s.ocp.rate_max, "{} du {}", c.name(), u - prev);
                prev = u;
            }
        }
    }
}
