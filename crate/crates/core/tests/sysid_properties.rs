use pathmpc::model::{self, ModelParameters, CLOSED_LOOP_NAMES, OPEN_LOOP_NAMES};
use pathmpc::sysid::*;
use pathmpc::table::Table;

fn truth() -> ModelParameters {
    ModelParameters::default()
}

/// Every fitted parameter moved 25% off the truth, alternating sign.
fn guess() -> ModelParameters {
    let t = truth();
    let mut p = t;
    for (i, name) in CLOSED_LOOP_NAMES.iter().chain(&OPEN_LOOP_NAMES).enumerate() {
        let s = if i % 2 == 0 { 1.25 } else { 0.75 };
        p.set(name, t.get(name).unwrap() * s).unwrap();
    }
    p
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noiseless_round_trip_recovers_all_parameters() {
    let data = generate_maneuvers(&truth(), &ManeuverSpec::standard()).unwrap();
    let report = identify(&data, &guess(), &FitOptions::default()).unwrap();
    let t = truth();
    for (name, v) in report.fitted() {
        let e = rel(v, t.get(&name).unwrap());
        assert!(e <= 0.02, "{name}: fitted {v}, truth {}, {:.3}%", t.get(&name).unwrap(), 100.0 * e);
    }
    assert!(report.closed_loop.converged && report.open_loop.converged);
    for name in CLOSED_LOOP_NAMES {
        assert!(rel(report.closed_loop.value(name).unwrap(), t.get(name).unwrap()) <= 0.01);
    }
    let c = report.open_loop.correlation_of("C_T", "k_m").unwrap();
    assert!(c.is_finite() && c.abs() <= 1.0 + 1e-9, "{c}");
}

#[test]
fn noisy_round_trip_stays_within_ten_percent() {
    let t = truth();
    for seed in [4, 17] {
        let mut spec = ManeuverSpec::standard();
        spec.noise = MeasurementNoise::preset();
        spec.seed = seed;
        let data = generate_maneuvers(&t, &spec).unwrap();
        let report = identify(&data, &guess(), &FitOptions::default()).unwrap();
        for (name, v) in report.fitted() {
            let e = rel(v, t.get(&name).unwrap());
            assert!(e <= 0.10, "seed {seed} {name}: {:.3}%", 100.0 * e);
        }
    }
}

#[test]
fn noise_leaves_the_program_unchanged() {
    let clean = generate_maneuvers(&truth(), &ManeuverSpec::standard()).unwrap();
    let mut spec = ManeuverSpec::standard();
    spec.noise = MeasurementNoise::preset();
    let noisy = generate_maneuvers(&truth(), &spec).unwrap();
    for (a, b) in clean.samples.iter().zip(&noisy.samples) {
        assert_eq!(a.command, b.command);
        assert_eq!(a.a_x, b.a_x);
    }
    assert!(clean.samples.iter().zip(&noisy.samples).any(|(a, b)| a.phi != b.phi));
}

#[test]
fn attitude_noise_only_affects_the_attitude_fit_mildly() {
    let mut spec = ManeuverSpec::standard();
    spec.noise.attitude = 0.5f64.to_radians();
    spec.seed = 9;
    let (train, _) = generate_maneuvers(&truth(), &spec).unwrap().split();
    let fit = fit_closed_loop(&train, &guess(), &FitOptions::default()).unwrap();
    for name in CLOSED_LOOP_NAMES {
        assert!(rel(fit.value(name).unwrap(), truth().get(name).unwrap()) <= 0.10);
    }
}

#[test]
fn closed_loop_fit_ignores_open_loop_parameters() {
    let spec = ManeuverSpec::standard();
    let a = generate_maneuvers(&truth(), &spec).unwrap();
    let mut other = truth();
    other.c_d0 *= 1.1;
    other.c_t *= 0.9;
    other.tau_t *= 1.2;
    let b = generate_maneuvers(&other, &spec).unwrap();
    let opts = FitOptions::default();
    let fa = fit_closed_loop(&a.split().0, &guess(), &opts).unwrap();
    let fb = fit_closed_loop(&b.split().0, &guess(), &opts).unwrap();
    assert_eq!(fa.values, fb.values);
    assert_eq!(fa.cost_history, fb.cost_history);
}

#[test]
fn static_data_lacks_excitation() {
    let spec = ManeuverSpec {
        segments: vec![Maneuver::Hold {
            duration: 30.0,
            airspeed: 22.0,
            gamma: 0.0,
            phi: 0.0,
        }],
        ..ManeuverSpec::standard()
    };
    let data = generate_maneuvers(&truth(), &spec).unwrap();
    let err = fit_closed_loop(&data, &guess(), &FitOptions::default()).unwrap_err();
    assert!(matches!(err, SysIdError::InsufficientExcitation { .. }), "{err}");
}

#[test]
fn static_hold_at_trim_gives_constant_outputs() {
    let spec = ManeuverSpec {
        segments: vec![Maneuver::Hold {
            duration: 10.0,
            airspeed: 22.0,
            gamma: 0.0,
            phi: 0.0,
        }],
        ..ManeuverSpec::standard()
    };
    let data = generate_maneuvers(&truth(), &spec).unwrap();
    let first = data.samples[0];
    for s in &data.samples {
        assert!((s.phi - first.phi).abs() < 1e-12);
        assert!((s.theta - first.theta).abs() < 1e-12);
        assert!((s.v_a - first.v_a).abs() < 1e-9);
        assert!((s.gamma_a - first.gamma_a).abs() < 1e-9);
        assert!((s.a_x - first.a_x).abs() < 1e-9);
        assert!((s.a_z - first.a_z).abs() < 1e-9);
    }
}

#[test]
fn roll_doublet_follows_the_first_order_lag() {
    let amp = 0.3;
    let spec = ManeuverSpec {
        segments: vec![
            Maneuver::Hold {
                duration: 1.0,
                airspeed: 22.0,
                gamma: 0.0,
                phi: 0.0,
            },
            Maneuver::Doublet {
                axis: Axis::Roll,
                amplitude: amp,
                unit: 1.0,
            },
        ],
        ..ManeuverSpec::standard()
    };
    let data = generate_maneuvers(&truth(), &spec).unwrap();
    let k = truth().k_phi;
    // Analytic response to the first pulse, which starts at t = 1 s.
    for s in data.samples.iter().filter(|s| s.t > 1.0 && s.t <= 3.0) {
        let expect = amp * (1.0 - (-k * (s.t - 1.0)).exp());
        assert!((s.phi - expect).abs() < 1e-7, "t = {}: {} vs {expect}", s.t, s.phi);
    }
}

#[test]
fn dataset_length_matches_the_program() {
    let spec = ManeuverSpec::standard();
    let data = generate_maneuvers(&truth(), &spec).unwrap();
    assert_eq!(data.samples.len(), (spec.duration() * SAMPLE_RATE).round() as usize);
    assert!((data.duration() - spec.duration()).abs() < 1e-9);
    assert!(spec.duration() >= 240.0 && spec.duration() <= 360.0);
    let (train, val) = data.split();
    assert_eq!(train.samples.len() + val.samples.len(), data.samples.len());
    assert!((train.samples.last().unwrap().t + 1.0 / SAMPLE_RATE - val.samples[0].t).abs() < 1e-9);
    assert!((train.samples.len() as f64 / data.samples.len() as f64 - 0.8).abs() < 1e-3);
}

#[test]
fn dataset_table_round_trips() {
    let mut spec = ManeuverSpec::standard();
    spec.noise = MeasurementNoise::preset();
    let data = generate_maneuvers(&truth(), &spec).unwrap();
    let back = SysIdDataset::from_table(&Table::from_csv(&data.to_table().to_csv()).unwrap()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn validation_is_exact_at_the_truth_and_degrades_off_it() {
    let data = generate_maneuvers(&truth(), &ManeuverSpec::standard()).unwrap();
    let (_, val) = data.split();
    let r = validate_model(&truth(), &val, 2).unwrap();
    for name in OUTPUTS {
        assert!(r.get(name).unwrap() <= 1e-9, "{name}: {}", r.get(name).unwrap());
    }
    let mut off = truth();
    off.c_d0 *= 1.1;
    let r2 = validate_model(&off, &val, 2).unwrap();
    assert!(r2.v_a > r.v_a + 1e-3);
    assert_eq!(OUTPUTS, ["phi", "theta", "v_a", "gamma_a", "a_x", "a_z"]);
}

#[test]
fn accepted_iterations_never_increase_the_cost() {
    let mut spec = ManeuverSpec::standard();
    spec.noise = MeasurementNoise::preset();
    let (train, _) = generate_maneuvers(&truth(), &spec).unwrap().split();
    let fit = fit_open_loop(&train, &guess(), &FitOptions::default()).unwrap();
    assert!(fit.cost_history.len() >= 2);
    for w in fit.cost_history.windows(2) {
        assert!(w[1] <= w[0]);
    }
    let (lo, hi) = (open_loop_bounds()[7].0, open_loop_bounds()[7].1);
    let km = fit.value("k_m").unwrap();
    assert!(km >= lo && km <= hi);
}

#[test]
fn trim_helper_is_consistent_with_generation() {
    let p = truth();
    let t = model::trim(&p, 22.0, 0.0, 0.0).unwrap();
    let data = generate_maneuvers(&p, &ManeuverSpec::standard()).unwrap();
    assert!((data.samples[0].v_a - 22.0).abs() < 1e-12);
    assert_eq!(data.samples[0].command, t.command);
}
