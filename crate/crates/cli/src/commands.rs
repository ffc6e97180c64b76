use std::fs;
use std::path::{Path, PathBuf};

use pathmpc::guidance::ControllerKind;
use pathmpc::model::{CLOSED_LOOP_NAMES, OPEN_LOOP_NAMES};
use pathmpc::path::PathPreset;
use pathmpc::sim::{compare_controllers, comparison_csv, compute_metrics, run_scenario, PathSpec, Scenario};
use pathmpc::sysid::{generate_maneuvers, identify, MeasurementNoise, SysIdError, OUTPUTS};
use pathmpc::table::Table;
use serde_json::{json, Value};

use crate::config::{self, Config};
use crate::{Common, CliError};

pub const SWEEP_SCHEMA: &str = "pathmpc.horizon-sweep/1";
pub const SWEEP_COLUMNS: [&str; 6] = ["horizon", "mean_ms", "median_ms", "p95_ms", "max_ms", "ticks"];
pub const RMSE_SCHEMA: &str = "pathmpc.sysid-rmse/1";
pub const REPORT_SCHEMA: &str = "pathmpc.sysid-report/1";

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    write(dir, name, &text)
}

fn provenance(t: &mut Table, hash: &str, seed: u64) {
    t.meta.insert("config_hash".into(), hash.to_string());
    t.meta.insert("seed".into(), seed.to_string());
}

/// Applies the flags shared by the simulation commands.
fn override_scenario(sc: &mut Scenario, common: &Common) {
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    if let Some(laps) = common.laps {
        sc.laps = laps;
    }
}

/// A single path or controller selected by flag, if any.
fn single<T: Copy>(items: Option<Vec<T>>, what: &str) -> Result<Option<T>, CliError> {
    match items.as_deref() {
        None => Ok(None),
        Some([one]) => Ok(Some(*one)),
        Some(_) => Err(CliError::Config(format!("this command takes exactly one {what}"))),
    }
}

fn flag_paths(common: &Common) -> Result<Option<Vec<PathPreset>>, CliError> {
    common.paths.as_deref().map(|p| config::presets(&config::parse_list(p))).transpose()
}

fn flag_controllers(common: &Common) -> Result<Option<Vec<ControllerKind>>, CliError> {
    common
        .controllers
        .as_deref()
        .map(|c| config::controllers(&config::parse_list(c)))
        .transpose()
}

pub fn simulate(mut cfg: Config, common: &Common, timing: bool) -> Result<(), CliError> {
    override_scenario(&mut cfg.scenario, common);
    if let Some(p) = single(flag_paths(common)?, "path")? {
        cfg.scenario.path = PathSpec::Preset(p);
    }
    if let Some(k) = single(flag_controllers(common)?, "controller")? {
        cfg.scenario.controller.kind = k;
    }
    let sc = &cfg.scenario;
    sc.validate().map_err(config_err)?;
    let path = sc.path.build().map_err(config_err)?;
    let hash = cfg.hash();

    prepare_dir(&common.out_dir)?;
    let log = run_scenario(sc).map_err(runtime_err)?;
    let metrics = compute_metrics(&log, &path).map_err(runtime_err)?;

    let mut table = log.to_table();
    if !timing {
        // Wall-clock columns would make otherwise identical runs differ.
        let i = table.column_index("solve_time_ms").map_err(runtime_err)?;
        table.columns.remove(i);
        for r in table.rows.iter_mut() {
            r.remove(i);
        }
    }
    provenance(&mut table, &hash, sc.seed);
    write(&common.out_dir, "simlog.csv", &table.to_csv())?;

    let mut m = serde_json::to_value(&metrics).map_err(runtime_err)?;
    if !timing {
        if let Value::Object(o) = &mut m {
            o.remove("feedback_ms");
        }
    }
    let doc = json!({ "config_hash": hash, "seed": sc.seed, "metrics": m });
    write_json(&common.out_dir, "metrics.json", &doc)?;

    println!(
        "{} on {}: error mean {:.3} m, median {:.3} m, max {:.3} m; airspeed mean {:.2} m/s; groundspeed max {:.2} m/s",
        metrics.controller.name(),
        metrics.path,
        metrics.error.mean,
        metrics.error.median,
        metrics.error.max,
        metrics.airspeed.mean,
        metrics.groundspeed.max,
    );
    if timing {
        println!("feedback time mean {:.2} ms, max {:.2} ms", metrics.feedback_ms.mean, metrics.feedback_ms.max);
    }
    println!("laps completed: {} of {}", metrics.lap_times.len(), sc.laps);
    if let Some(d) = &log.diverged {
        return Err(CliError::Runtime(format!("plant diverged: {d}")));
    }
    Ok(())
}

pub fn compare(mut cfg: Config, common: &Common) -> Result<(), CliError> {
    override_scenario(&mut cfg.scenario, common);
    if let Some(p) = &common.paths {
        cfg.compare.paths = config::parse_list(p);
    }
    if let Some(c) = &common.controllers {
        cfg.compare.controllers = config::parse_list(c);
    }
    let presets = config::presets(&cfg.compare.paths)?;
    let kinds = config::controllers(&cfg.compare.controllers)?;
    for (name, v) in &cfg.compare.psi_dot_ref {
        PathPreset::from_name(name).map_err(|e| CliError::Config(format!("compare.psi_dot_ref: {e}")))?;
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(CliError::Config(format!("compare.psi_dot_ref.{name} must be non-negative, got {v}")));
        }
    }
    let scenarios: Vec<(PathPreset, Scenario)> = presets
        .iter()
        .map(|p| {
            let mut sc = cfg.scenario.clone();
            sc.path = PathSpec::Preset(*p);
            if let Some(v) = cfg.compare.psi_dot_ref.get(p.name()) {
                sc.controller.psi_dot_ref = *v;
            }
            (*p, sc)
        })
        .collect();
    for (p, sc) in &scenarios {
        for k in &kinds {
            let mut s = sc.clone();
            s.controller.kind = *k;
            s.validate().map_err(|e| CliError::Config(format!("{}/{}: {e}", p.name(), k.name())))?;
        }
    }
    let hash = cfg.hash();
    let seed = cfg.scenario.seed;

    prepare_dir(&common.out_dir)?;
    let mut cmps = Vec::new();
    for (p, sc) in &scenarios {
        cmps.push(compare_controllers(*p, sc, &kinds).map_err(runtime_err)?);
    }
    let csv = comparison_csv(&cmps);
    let (first, rest) = csv.split_once('\n').unwrap_or((&csv, ""));
    let text = format!("{first}\n# config_hash: {hash}\n# seed: {seed}\n{rest}");
    write(&common.out_dir, "comparison.csv", &text)?;
    let doc = json!({
        "schema": "pathmpc.comparison/1",
        "config_hash": hash,
        "seed": seed,
        "comparisons": cmps,
    });
    write_json(&common.out_dir, "comparison.json", &doc)?;

    for c in &cmps {
        for m in &c.runs {
            println!(
                "{:<6} {:<10} error mean {:>7.3} m  max {:>7.3} m  groundspeed max {:>6.2} m/s  feedback mean {:>6.2} ms",
                c.path,
                m.controller.name(),
                m.error.mean,
                m.error.max,
                m.groundspeed.max,
                m.feedback_ms.mean
            );
        }
        for o in &c.orderings {
            println!("{:<6} [{}] {}", c.path, if o.holds { "holds" } else { "fails" }, o.description);
        }
    }
    let diverged: Vec<String> = cmps
        .iter()
        .flat_map(|c| c.runs.iter().filter(|m| m.diverged.is_some()).map(move |m| format!("{}/{}", c.path, m.controller.name())))
        .collect();
    if !diverged.is_empty() {
        return Err(CliError::Runtime(format!("plant diverged in {}", diverged.join(", "))));
    }
    Ok(())
}

pub fn sysid(mut cfg: Config, common: &Common, noise: bool) -> Result<(), CliError> {
    let Some(spec) = cfg.sysid.maneuvers.as_mut() else {
        return Err(CliError::Config("sysid.maneuvers: missing maneuver spec".into()));
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if noise {
        spec.noise = MeasurementNoise::preset();
    }
    spec.validate().map_err(config_err)?;
    let spec = spec.clone();
    let sc = &cfg.sysid;
    sc.fit.validate().map_err(config_err)?;
    sc.truth.validate().map_err(|e| CliError::Config(format!("sysid.truth: {e}")))?;
    if !(0.0..1.0).contains(&sc.guess_offset) {
        return Err(CliError::Config(format!("sysid.guess_offset must lie in [0, 1), got {}", sc.guess_offset)));
    }
    let guess = sc.guess();
    guess.validate().map_err(|e| CliError::Config(format!("sysid initial guess: {e}")))?;
    let hash = cfg.hash();
    // Envelope violations of the program are configuration errors, found
    // before anything is written.
    let data = generate_maneuvers(&sc.truth, &spec).map_err(|e| match e {
        SysIdError::Envelope { .. } | SysIdError::Spec(_) => config_err(e),
        other => runtime_err(other),
    })?;

    prepare_dir(&common.out_dir)?;
    let mut table = data.to_table();
    provenance(&mut table, &hash, spec.seed);
    write(&common.out_dir, "sysid_dataset.csv", &table.to_csv())?;

    let report = identify(&data, &guess, &sc.fit).map_err(runtime_err)?;
    let fitted = report.fitted();
    let mut truth = serde_json::Map::new();
    let mut rel = serde_json::Map::new();
    let mut worst: f64 = 0.0;
    for name in CLOSED_LOOP_NAMES.iter().chain(&OPEN_LOOP_NAMES) {
        let t = sc.truth.get(name).unwrap_or(f64::NAN);
        let e = (fitted[*name] - t).abs() / t.abs();
        worst = worst.max(e);
        truth.insert(name.to_string(), json!(t));
        rel.insert(name.to_string(), json!(e));
    }
    let doc = json!({
        "schema": REPORT_SCHEMA,
        "config_hash": hash,
        "seed": spec.seed,
        "noise": spec.noise,
        "noisy": spec.noise != MeasurementNoise::default(),
        "truth": truth,
        "fitted": fitted,
        "relative_error": rel,
        "max_relative_error": worst,
        "closed_loop": report.closed_loop,
        "open_loop": report.open_loop,
        "validation_rmse": report.validation_rmse,
        "train_samples": report.train_samples,
        "validation_samples": report.validation_samples,
    });
    write_json(&common.out_dir, "sysid_report.json", &doc)?;

    let mut rmse = Table::new(RMSE_SCHEMA, &OUTPUTS);
    rmse.push(OUTPUTS.iter().map(|o| report.validation_rmse.get(o).unwrap_or(f64::NAN)).collect());
    provenance(&mut rmse, &hash, spec.seed);
    write(&common.out_dir, "sysid_rmse.csv", &rmse.to_csv())?;

    if spec.noise != MeasurementNoise::default() {
        let n = spec.noise;
        println!(
            "measurement noise: attitude {:.3} deg, airspeed {:.3} m/s, flight path angle {:.3} deg, accel {:.3} m/s^2",
            n.attitude.to_degrees(),
            n.airspeed,
            n.gamma.to_degrees(),
            n.accel
        );
    } else {
        println!("measurement noise: none");
    }
    for name in CLOSED_LOOP_NAMES.iter().chain(&OPEN_LOOP_NAMES) {
        let t = sc.truth.get(name).unwrap_or(f64::NAN);
        println!("{name:<8} truth {t:>12.6}  fitted {:>12.6}  error {:>7.3}%", fitted[*name], 100.0 * (fitted[*name] - t).abs() / t.abs());
    }
    for o in OUTPUTS {
        println!("rmse {o:<8} {:.5}", report.validation_rmse.get(o).unwrap_or(f64::NAN));
    }
    if !(report.closed_loop.converged && report.open_loop.converged) {
        println!("warning: the fit did not converge");
    }
    Ok(())
}

/// Least-squares slope of log(mean time) against log(N).
pub fn growth_exponent(horizons: &[usize], means: &[f64]) -> f64 {
    let xs: Vec<f64> = horizons.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn horizon_sweep(mut cfg: Config, common: &Common) -> Result<(), CliError> {
    override_scenario(&mut cfg.scenario, common);
    if let Some(list) = &common.horizon_list {
        cfg.sweep.horizons = config::parse_list(list)
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| CliError::Config(format!("bad horizon `{s}` in --horizon-list"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(p) = single(flag_paths(common)?, "path")? {
        cfg.scenario.path = PathSpec::Preset(p);
    }
    if let Some(k) = single(flag_controllers(common)?, "controller")? {
        cfg.scenario.controller.kind = k;
    }
    let sw = &cfg.sweep;
    if sw.horizons.len() < 2 {
        return Err(CliError::Config("sweep.horizons needs at least two entries".into()));
    }
    if !(sw.duration > 0.0) || !sw.duration.is_finite() {
        return Err(CliError::Config(format!("sweep.duration must be positive, got {}", sw.duration)));
    }
    if cfg.scenario.controller.kind.mode().is_none() {
        return Err(CliError::Config("the horizon sweep needs an MPC controller".into()));
    }
    let runs: Vec<Scenario> = sw
        .horizons
        .iter()
        .map(|n| {
            let mut sc = cfg.scenario.clone();
            sc.controller.horizon = *n;
            sc.controller.horizon_time = *n as f64 * sc.controller.dt;
            sc.timeout = Some(sw.duration);
            sc.validate().map_err(|e| CliError::Config(format!("horizon {n}: {e}")))?;
            Ok(sc)
        })
        .collect::<Result<_, CliError>>()?;
    cfg.scenario.path.build().map_err(config_err)?;
    let hash = cfg.hash();

    prepare_dir(&common.out_dir)?;
    let mut table = Table::new(SWEEP_SCHEMA, &SWEEP_COLUMNS);
    let mut means = Vec::new();
    // Sequential on purpose: concurrent runs would distort the timings.
    for sc in &runs {
        let log = run_scenario(sc).map_err(runtime_err)?;
        if let Some(d) = &log.diverged {
            return Err(CliError::Runtime(format!("horizon {}: plant diverged: {d}", sc.controller.horizon)));
        }
        // The cold-start tick runs several iterations; the sweep measures RTI steps.
        let mut t: Vec<f64> = log.records.iter().skip(1).map(|r| r.solve_time * 1e3).collect();
        if t.is_empty() {
            return Err(CliError::Runtime("sweep duration too short to time anything".into()));
        }
        t.sort_by(|a, b| a.total_cmp(b));
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        means.push(mean);
        let row = vec![
            sc.controller.horizon as f64,
            mean,
            quantile(&t, 0.5),
            quantile(&t, 0.95),
            t[t.len() - 1],
            t.len() as f64,
        ];
        println!(
            "N = {:>4}: mean {:>8.3} ms  median {:>8.3} ms  p95 {:>8.3} ms  max {:>8.3} ms",
            row[0] as usize, row[1], row[2], row[3], row[4]
        );
        table.push(row);
    }
    let exponent = growth_exponent(&cfg.sweep.horizons, &means);
    println!("growth exponent of the mean solve time: {exponent:.3}");
    provenance(&mut table, &hash, cfg.scenario.seed);
    table.meta.insert("controller".into(), cfg.scenario.controller.kind.name().into());
    table.meta.insert("path".into(), cfg.scenario.path.name());
    table.meta.insert("growth_exponent".into(), exponent.to_string());
    write(&common.out_dir, "horizon_sweep.csv", &table.to_csv())?;
    Ok(())
}
