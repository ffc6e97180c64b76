use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pathmpc::table::Table;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathmpc")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &str = "[scenario]\nlaps = 1\n[scenario.controller]\nkind = \"lookahead\"\n";

#[test]
fn minimal_simulate_writes_two_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), QUICK);
    let out = tmp.path().join("out");
    let o = run(&["simulate", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["metrics.json", "simlog.csv"]);

    let table = Table::from_csv(&fs::read_to_string(out.join("simlog.csv")).unwrap()).unwrap();
    let doc = json(&out.join("metrics.json"));
    let hash = doc["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(table.meta["config_hash"], hash);
    assert_eq!(table.meta["seed"], "0");
    assert_eq!(doc["seed"], 0);
    assert_eq!(doc["metrics"]["controller"], "lookahead");
    assert!(!table.columns.iter().any(|c| c == "solve_time_ms"));
}

#[test]
fn horizon_mismatch_is_a_config_error_without_side_effects() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[scenario.controller]\nhorizon = 40\ndt = 0.1\nhorizon_time = 5.0\n");
    let out = tmp.path().join("out");
    let o = run(&["simulate", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for field in ["horizon", "dt", "horizon_time"] {
        assert!(err.contains(field), "{err}");
    }
    assert!(!out.exists());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{QUICK}[scenario.wind]\nkind = \"gusty\"\nmean = {{ w_n = 2.0, w_e = -1.0, w_d = 0.0 }}\nsigma = 1.0\ntau = 3.0\n"),
    );
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["7", "7", "8"]) {
        let o = run(&["simulate", "--config", &cfg, "--seed", seed, "--out-dir", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["simlog.csv", "metrics.json"] {
        let a = fs::read(dirs[0].join(name)).unwrap();
        assert_eq!(a, fs::read(dirs[1].join(name)).unwrap(), "{name}");
        assert_ne!(a, fs::read(dirs[2].join(name)).unwrap(), "{name}");
    }
}

#[test]
fn unknown_config_keys_and_unreadable_files_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[scenario]\nlapz = 3\n");
    let o = run(&["simulate", "--config", &cfg, "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lapz"));
    let o = run(&["simulate", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn comparison_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn default_comparison_has_the_full_shape() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["compare", "--laps", "1", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(text.contains("# config_hash: "));
    let rows = comparison_rows(&text);
    assert_eq!(rows.len(), 4 * 3 * 4);
    for path in ["path1", "path2", "path3", "path4"] {
        for ctl in ["cr-mpc", "mpcc", "lookahead"] {
            let blocks: Vec<&str> = rows.iter().filter(|r| r[0] == path && r[1] == ctl).map(|r| r[2].as_str()).collect();
            assert_eq!(blocks, ["path_error_m", "airspeed_mps", "groundspeed_mps", "feedback_time_ms"]);
        }
    }
    let doc = json(&out.join("comparison.json"));
    assert_eq!(doc["comparisons"].as_array().unwrap().len(), 4);
}

#[test]
fn single_path_filter() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(&[
        "compare",
        "--paths",
        "path3",
        "--controllers",
        "lookahead",
        "--laps",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = comparison_rows(&fs::read_to_string(out.join("comparison.csv")).unwrap());
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[0] == "path3" && r[1] == "lookahead"));
}

#[test]
fn unknown_preset_lists_the_valid_ones() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["compare", "--paths", "path1,path7", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("path7") && err.contains("path1, path2, path3, path4"), "{err}");
    assert!(!out.exists());
}

#[test]
fn sysid_round_trips_with_and_without_noise() {
    let tmp = TempDir::new().unwrap();
    for (noise, tol) in [(false, 0.02), (true, 0.10)] {
        let out = tmp.path().join(if noise { "noisy" } else { "clean" });
        let mut args = vec!["sysid", "--out-dir", out.to_str().unwrap()];
        if noise {
            args.push("--noise");
        }
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let doc = json(&out.join("sysid_report.json"));
        assert_eq!(doc["noisy"], noise);
        let worst = doc["max_relative_error"].as_f64().unwrap();
        assert!(worst <= tol, "noise {noise}: {worst}");
        assert_eq!(doc["fitted"].as_object().unwrap().len(), 10);
        let rmse = Table::from_csv(&fs::read_to_string(out.join("sysid_rmse.csv")).unwrap()).unwrap();
        assert_eq!(rmse.columns, ["phi", "theta", "v_a", "gamma_a", "a_x", "a_z"]);
        assert_eq!(rmse.meta["config_hash"], doc["config_hash"].as_str().unwrap());
    }
}

#[test]
fn sysid_section_without_maneuvers_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[sysid]\nguess_offset = 0.1\n");
    let out = tmp.path().join("out");
    let o = run(&["sysid", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("maneuver"));
    assert!(!out.exists());
}

#[test]
fn horizon_sweep_has_one_row_per_horizon() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\nduration = 5.0\n");
    let out = tmp.path().join("out");
    let o = run(&["horizon-sweep", "--config", &cfg, "--horizon-list", "10,20,40", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = Table::from_csv(&fs::read_to_string(out.join("horizon_sweep.csv")).unwrap()).unwrap();
    assert_eq!(t.schema, "pathmpc.horizon-sweep/1");
    assert_eq!(t.columns, ["horizon", "mean_ms", "median_ms", "p95_ms", "max_ms", "ticks"]);
    assert_eq!(t.column("horizon").unwrap(), [10.0, 20.0, 40.0]);
    for r in &t.rows {
        assert!(r[1] > 0.0 && r[3] >= r[2] && r[4] >= r[3]);
    }
    assert!(t.meta.contains_key("growth_exponent"));

    let o = run(&["horizon-sweep", "--controllers", "lookahead", "--out-dir", tmp.path().join("o2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_example_config_is_valid() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.toml");
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["sysid", "--config", cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&["simulate", "--config", cfg, "--controllers", "lookahead", "--laps", "1", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
