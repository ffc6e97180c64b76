use pathmpc::guidance::{ControllerKind, GUIDANCE_PERIOD};
use pathmpc::model::{self, AircraftState, ControlCommand, ModelParameters, WindVector};
use pathmpc::ocp::FlightEnvelope;
use pathmpc::path::ArcLengthPath;
use pathmpc::sim::*;
use pathmpc::table::Table;

fn straight_points() -> Vec<[f64; 3]> {
    (0..=32).map(|i| [25.0 * i as f64, 0.0, -100.0]).collect()
}

fn straight_scenario(kind: ControllerKind) -> Scenario {
    let mut sc = Scenario::default();
    sc.path = PathSpec::Waypoints {
        points: straight_points(),
        closed: false,
    };
    sc.controller.kind = kind;
    sc.controller.psi_dot_ref = 21.0;
    sc.start_psi = 20.0;
    sc
}

#[test]
fn straight_line_is_tracked_closely() {
    let sc = straight_scenario(ControllerKind::CrMpc);
    let path = sc.path.build().unwrap();
    let log = run_scenario(&sc).unwrap();
    assert!(log.completed && log.diverged.is_none(), "{:?}", log.diverged);
    let m = compute_metrics(&log, &path).unwrap();
    assert!(m.error.mean < 0.5, "{:?}", m.error);
}

/// Wall-clock solve time is the only field allowed to differ between runs.
fn without_timing(log: &SimLog) -> String {
    let mut t = log.to_table();
    let i = t.column_index("solve_time_ms").unwrap();
    for r in t.rows.iter_mut() {
        r[i] = 0.0;
    }
    t.to_csv()
}

fn gusty(kind: ControllerKind, seed: u64) -> Scenario {
    let mut sc = straight_scenario(kind);
    sc.wind = WindModel::Gusty {
        mean: WindVector::new(-2.0, 3.0, 0.5),
        sigma: 1.5,
        tau: 2.0,
        max_magnitude: 12.0,
    };
    sc.estimate_noise = EstimateNoise {
        position: 0.5,
        angle: 0.01,
        airspeed: 0.2,
    };
    sc.plant_factors = mismatch_preset(0.1);
    sc.seed = seed;
    sc
}

#[test]
fn identical_seeds_give_identical_logs() {
    for kind in [ControllerKind::Mpcc, ControllerKind::Lookahead] {
        let a = run_scenario(&gusty(kind, 11)).unwrap();
        let b = run_scenario(&gusty(kind, 11)).unwrap();
        assert_eq!(without_timing(&a), without_timing(&b));
        let c = run_scenario(&gusty(kind, 12)).unwrap();
        assert_ne!(without_timing(&a), without_timing(&c));
    }
}

#[test]
fn controller_never_sees_vertical_wind() {
    let log = run_scenario(&gusty(ControllerKind::Lookahead, 3)).unwrap();
    assert!(log.records.iter().any(|r| r.wind.w_d.abs() > 0.1));
    for r in &log.records {
        assert_eq!(r.wind_estimate.w_d, 0.0);
        assert_eq!(r.wind_estimate.w_n, r.wind.w_n);
        assert_eq!(r.wind_estimate.w_e, r.wind.w_e);
    }
}

#[test]
fn realized_wind_respects_the_bound() {
    let mut sc = gusty(ControllerKind::Lookahead, 5);
    sc.wind = WindModel::Gusty {
        mean: WindVector::new(4.0, 0.0, 0.0),
        sigma: 6.0,
        tau: 1.0,
        max_magnitude: 7.0,
    };
    let log = run_scenario(&sc).unwrap();
    assert!(log.records.iter().all(|r| r.wind.magnitude() <= 7.0 + 1e-12));
}

#[test]
fn gliding_airspeed_does_not_grow() {
    let p = ModelParameters::default();
    let mut x = model::trim(&p, 30.0, 0.0, 0.0).unwrap().state;
    let cmd = ControlCommand::new(0.0, x.theta, 0.0);
    let mut prev = x.v_a;
    for i in 0..3000 {
        x = model::rk4_step(&x, &cmd, &WindVector::ZERO, 0.01, &p).unwrap();
        if i >= 200 {
            assert!(x.v_a <= prev + 1e-9, "t = {}: {} > {prev}", i as f64 * 0.01, x.v_a);
        }
        prev = x.v_a;
    }
    assert!(x.v_a < 30.0);
}

#[test]
fn lap_progress_is_monotone_and_counted_once() {
    let mut sc = Scenario::default();
    sc.controller.kind = ControllerKind::Lookahead;
    sc.path = PathSpec::Preset(pathmpc::path::PathPreset::Path2);
    let log = run_scenario(&sc).unwrap();
    assert!(log.completed);
    assert_eq!(log.lap_times.len(), 2);
    // A lap cannot be flown faster than at the airspeed ceiling.
    let len = sc.path.build().unwrap().total_length();
    assert!(log.lap_times[1] - log.lap_times[0] >= len / sc.controller.envelope.va_max);
    for w in log.records.windows(2) {
        assert!(w[1].progress >= w[0].progress - 5.0, "t = {}: {} -> {}", w[0].t, w[0].progress, w[1].progress);
        assert!(w[1].lap >= w[0].lap);
        assert!((w[1].t - w[0].t - GUIDANCE_PERIOD).abs() < 1e-9);
    }
}

#[test]
fn log_table_round_trips() {
    let log = run_scenario(&gusty(ControllerKind::Lookahead, 9)).unwrap();
    let text = log.to_table().to_csv();
    let back = SimLog::from_table(&Table::from_csv(&text).unwrap(), log.envelope).unwrap();
    assert_eq!(back.records.len(), log.records.len());
    assert_eq!(back.to_table().to_csv(), text);
    assert_eq!(back.lap_times, log.lap_times);
    assert_eq!(back.completed, log.completed);
}

/// A hand-built log of the aircraft flying along a straight path, displaced
/// by `offset` meters east.
fn synthetic_log(path: &ArcLengthPath, offset: f64) -> SimLog {
    let p = ModelParameters::default();
    let base = model::trim(&p, 21.0, 0.0, 0.0).unwrap().state;
    let records = (0..200)
        .map(|i| {
            let psi = 10.0 + 3.0 * i as f64;
            let r = path.position(psi);
            let state = AircraftState {
                n: r[0],
                e: r[1] + offset,
                d: r[2],
                chi_a: 0.0,
                ..base
            };
            TickRecord {
                t: i as f64 * GUIDANCE_PERIOD,
                state,
                estimate: state,
                wind: WindVector::ZERO,
                wind_estimate: WindVector::ZERO,
                command: ControlCommand::new(0.0, 0.0, 0.5),
                psi_dot_c: f64::NAN,
                psi_star: psi,
                path_error: [0.0, offset, 0.0],
                solve_time: 0.002,
                degraded: false,
                progress: psi - 10.0,
                lap: 0,
            }
        })
        .collect();
    SimLog {
        path_name: "line".into(),
        controller: ControllerKind::CrMpc,
        seed: 0,
        envelope: FlightEnvelope::default(),
        records,
        lap_times: vec![],
        completed: true,
        timed_out: false,
        diverged: None,
    }
}

#[test]
fn metrics_of_constructed_logs() {
    let path = ArcLengthPath::build(&straight_points(), false, 1e-3).unwrap();
    let glued = compute_metrics(&synthetic_log(&path, 0.0), &path).unwrap();
    assert!(glued.error.mean < 1e-9 && glued.error.max < 1e-9, "{:?}", glued.error);
    let off = compute_metrics(&synthetic_log(&path, 3.0), &path).unwrap();
    assert!((off.error.mean - 3.0).abs() < 1e-9, "{:?}", off.error);
    assert!((off.error.max - 3.0).abs() < 1e-9);
    assert!((off.feedback_ms.mean - 2.0).abs() < 1e-12);
    assert!((off.airspeed.median - 21.0).abs() < 1e-12);
    assert_eq!(off.airspeed_violation, 0.0);
    assert!(off.error.max >= off.error.median);
}

#[test]
fn empty_log_is_an_error() {
    let path = ArcLengthPath::build(&straight_points(), false, 1e-3).unwrap();
    let mut log = synthetic_log(&path, 0.0);
    log.records.clear();
    assert!(compute_metrics(&log, &path).is_err());
}

#[test]
fn comparison_table_has_one_row_per_metric_block() {
    let mut sc = straight_scenario(ControllerKind::Lookahead);
    sc.laps = 1;
    let path = sc.path.build().unwrap();
    let m = compute_metrics(&run_scenario(&sc).unwrap(), &path).unwrap();
    let cmp = Comparison {
        path: "line".into(),
        runs: vec![m],
        orderings: vec![],
    };
    let text = comparison_csv(&[cmp]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema: pathmpc.comparison/1");
    assert_eq!(lines[1], COMPARISON_COLUMNS.join(","));
    assert_eq!(lines.len(), 2 + METRIC_BLOCKS.len());
    for (line, block) in lines[2..].iter().zip(METRIC_BLOCKS) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), COMPARISON_COLUMNS.len());
        assert_eq!((f[0], f[1], f[2]), ("line", "lookahead", block));
    }
}
