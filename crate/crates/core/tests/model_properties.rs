use pathmpc::model::*;
use proptest::prelude::*;

fn params() -> ModelParameters {
    ModelParameters::default()
}

fn state_strategy() -> impl Strategy<Value = AircraftState> {
    (
        -100.0..100.0f64,
        -100.0..100.0f64,
        -150.0..-50.0f64,
        -0.7..0.7f64,
        -0.15..0.2f64,
        -3.0..3.0f64,
        20.0..40.0f64,
        -0.15..0.15f64,
        0.0..1.0f64,
    )
        .prop_map(|(n, e, d, phi, theta, chi_a, v_a, gamma_a, delta_t)| AircraftState {
            n,
            e,
            d,
            phi,
            theta,
            chi_a,
            v_a,
            gamma_a,
            delta_t,
        })
}

fn command_strategy() -> impl Strategy<Value = ControlCommand> {
    (-0.78..0.78f64, -0.17..0.17f64, 0.0..1.0f64).prop_map(|(a, b, c)| ControlCommand::new(a, b, c))
}

fn wind_strategy() -> impl Strategy<Value = WindVector> {
    (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64).prop_map(|(a, b, c)| WindVector::new(a, b, c))
}

fn propagate(x0: &AircraftState, u: &ControlCommand, w: &WindVector, horizon: f64, steps: usize) -> [f64; NX] {
    let dt = horizon / steps as f64;
    let mut x = *x0;
    for _ in 0..steps {
        x = rk4_step(&x, u, w, dt, &params()).unwrap();
    }
    x.to_array()
}

fn max_diff(a: &[f64; NX], b: &[f64; NX]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rk4_error_ratio_is_fourth_order() {
    let base = trim(&params(), 25.0, 0.0, 0.0).unwrap().state;
    let scenarios = [
        (0.3, 0.05, 0.7, WindVector::ZERO),
        (-0.5, 0.0, 0.3, WindVector::new(3.0, -2.0, 0.0)),
        (0.6, 0.1, 1.0, WindVector::ZERO),
        (0.0, -0.1, 0.2, WindVector::new(-4.0, 1.0, 0.5)),
        (0.7, 0.15, 0.9, WindVector::ZERO),
        (-0.2, 0.08, 0.5, WindVector::new(1.0, 1.0, 0.0)),
        (0.4, -0.05, 0.6, WindVector::ZERO),
        (-0.7, 0.12, 0.8, WindVector::new(0.0, 5.0, 0.0)),
        (0.1, 0.02, 0.4, WindVector::ZERO),
        (0.5, -0.12, 0.1, WindVector::new(-2.0, -2.0, -0.5)),
    ];
    for (phi_c, theta_c, d_c, w) in scenarios {
        let u = ControlCommand::new(phi_c, theta_c, d_c);
        let reference = propagate(&base, &u, &w, 2.0, 20_000);
        let coarse = max_diff(&propagate(&base, &u, &w, 2.0, 40), &reference);
        let fine = max_diff(&propagate(&base, &u, &w, 2.0, 80), &reference);
        let ratio = coarse / fine;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} for {u:?}");
    }
}

#[test]
fn rk4_agrees_with_fine_euler() {
    let x0 = trim(&params(), 25.0, 0.0, 0.0).unwrap().state;
    let u = ControlCommand::new(0.3, 0.05, 0.7);
    let w = WindVector::new(2.0, -1.0, 0.0);
    let rk = propagate(&x0, &u, &w, 0.1, 10);
    let mut x = x0.to_array();
    let h = 1e-6;
    for _ in 0..100_000 {
        let f = dynamics_generic(&x, &u.to_array(), &w, &params());
        for i in 0..NX {
            x[i] += h * f[i];
        }
    }
    assert!(max_diff(&rk, &x) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobians_match_central_differences(x in state_strategy(), u in command_strategy(), w in wind_strategy()) {
        let dt = 0.1;
        let p = params();
        let (a, b) = discrete_jacobians(&x, &u, &w, dt, &p).unwrap();
        let h = 1e-6;
        let xs = x.to_array();
        let us = u.to_array();
        for c in 0..NX {
            let mut xp = xs;
            let mut xm = xs;
            xp[c] += h;
            xm[c] -= h;
            let fp = rk4_step(&AircraftState::from_array(&xp), &u, &w, dt, &p).unwrap().to_array();
            let fm = rk4_step(&AircraftState::from_array(&xm), &u, &w, dt, &p).unwrap().to_array();
            for r in 0..NX {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                prop_assert!((a[(r, c)] - fd).abs() <= 1e-5, "A[{},{}] {} vs {}", r, c, a[(r, c)], fd);
            }
        }
        for c in 0..NU {
            let mut up = us;
            let mut um = us;
            up[c] += h;
            um[c] -= h;
            let fp = rk4_step(&x, &ControlCommand::from_slice(&up), &w, dt, &p).unwrap().to_array();
            let fm = rk4_step(&x, &ControlCommand::from_slice(&um), &w, dt, &p).unwrap().to_array();
            for r in 0..NX {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                prop_assert!((b[(r, c)] - fd).abs() <= 1e-5, "B[{},{}] {} vs {}", r, c, b[(r, c)], fd);
            }
        }
    }

    #[test]
    fn position_rows_have_unit_self_sensitivity(x in state_strategy(), u in command_strategy(), w in wind_strategy()) {
        let (a, _) = discrete_jacobians(&x, &u, &w, 0.1, &params()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                prop_assert!((a[(r, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn imu_rotation_inverts(x in state_strategy()) {
        let p = params();
        let f = forces(&x, &p);
        let (ax, az) = imu_accels(&f, p.m);
        let (s, c) = (f.alpha.sin(), f.alpha.cos());
        // The body-to-wind rotation is its own inverse.
        let fx = c * ax + s * az;
        let fz = s * ax - c * az;
        prop_assert!((fx - (f.thrust * c - f.drag) / p.m).abs() < 1e-9);
        prop_assert!((fz - (f.thrust * s + f.lift) / p.m).abs() < 1e-9);
    }

    #[test]
    fn zero_throttle_gives_zero_thrust(x in state_strategy()) {
        let s = AircraftState { delta_t: 0.0, ..x };
        prop_assert_eq!(forces(&s, &params()).thrust, 0.0);
    }

    #[test]
    fn throttle_state_stays_in_unit_interval(x in state_strategy(), u in command_strategy()) {
        let mut s = x;
        for _ in 0..20 {
            s = rk4_step(&s, &u, &WindVector::ZERO, 0.01, &params()).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s.delta_t));
        }
    }
}
