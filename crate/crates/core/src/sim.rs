//! Closed-loop simulation of plant and guidance at a fixed 10 Hz tick, with
//! wind, plant-model mismatch, estimate noise and run metrics.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{Controller, ControllerConfig, ControllerKind, GuidanceError, GUIDANCE_PERIOD};
use crate::model::{self, AircraftState, ControlCommand, ModelParameters, WindVector, CLOSED_LOOP_NAMES, OPEN_LOOP_NAMES};
use crate::ocp::FlightEnvelope;
use crate::path::{ArcLengthPath, PathError, PathPreset, DEFAULT_SPEED_TOLERANCE};
use crate::table::{Table, TableError};

pub const SIMLOG_SCHEMA: &str = "pathmpc.simlog/1";
pub const METRICS_SCHEMA: &str = "pathmpc.metrics/1";

/// Column order of the simulation log table.
pub const SIMLOG_COLUMNS: [&str; 41] = [
    "t",
    "n",
    "e",
    "d",
    "phi",
    "theta",
    "chi_a",
    "v_a",
    "gamma_a",
    "delta_t",
    "est_n",
    "est_e",
    "est_d",
    "est_phi",
    "est_theta",
    "est_chi_a",
    "est_v_a",
    "est_gamma_a",
    "est_delta_t",
    "w_n",
    "w_e",
    "w_d",
    "west_n",
    "west_e",
    "west_d",
    "phi_c",
    "theta_c",
    "delta_tc",
    "psi_dot_c",
    "psi_star",
    "err_n",
    "err_e",
    "err_d",
    "err_norm",
    "ground_speed",
    "alpha",
    "solve_time_ms",
    "degraded",
    "progress",
    "lap",
    "tick",
];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("log is empty")]
    EmptyLog,
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Reference path: a shipped preset or a waypoint list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSpec {
    Preset(PathPreset),
    Waypoints { points: Vec<[f64; 3]>, closed: bool },
}

impl PathSpec {
    pub fn name(&self) -> String {
        match self {
            Self::Preset(p) => p.name().to_string(),
            Self::Waypoints { .. } => "custom".to_string(),
        }
    }

    pub fn build(&self) -> Result<ArcLengthPath, PathError> {
        match self {
            Self::Preset(p) => p.build(),
            Self::Waypoints { points, closed } => ArcLengthPath::build(points, *closed, DEFAULT_SPEED_TOLERANCE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WindModel {
    Constant {
        wind: WindVector,
    },
    /// Mean wind plus per-axis Ornstein-Uhlenbeck gusts.
    Gusty {
        mean: WindVector,
        /// Stationary standard deviation per axis, m/s.
        sigma: f64,
        /// Correlation time, s.
        tau: f64,
        /// Realized magnitude bound, m/s.
        #[serde(default = "default_max_wind")]
        max_magnitude: f64,
    },
}

fn default_max_wind() -> f64 {
    12.0
}

impl Default for WindModel {
    fn default() -> Self {
        Self::Constant { wind: WindVector::ZERO }
    }
}

impl WindModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        match self {
            Self::Constant { wind } => {
                if !wind.magnitude().is_finite() {
                    return bad("wind must be finite".into());
                }
            }
            Self::Gusty {
                mean,
                sigma,
                tau,
                max_magnitude,
            } => {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return bad(format!("gust sigma must be non-negative, got {sigma}"));
                }
                if !(*tau > 0.0) || !tau.is_finite() {
                    return bad(format!("gust tau must be positive, got {tau}"));
                }
                if !(*max_magnitude > 0.0) || mean.magnitude() > *max_magnitude {
                    return bad(format!(
                        "mean wind {:.3} m/s exceeds the bound {max_magnitude} m/s",
                        mean.magnitude()
                    ));
                }
            }
        }
        Ok(())
    }

    fn initial(&self) -> WindVector {
        match self {
            Self::Constant { wind } => *wind,
            Self::Gusty { mean, .. } => *mean,
        }
    }

    /// Advances the gust state by `h` seconds.
    fn advance(&self, w: &WindVector, h: f64, rng: &mut ChaCha8Rng) -> WindVector {
        match self {
            Self::Constant { wind } => *wind,
            Self::Gusty {
                mean,
                sigma,
                tau,
                max_magnitude,
            } => {
                let a = (-h / tau).exp();
                let b = sigma * (1.0 - a * a).sqrt();
                let mut axis = |m: f64, cur: f64| {
                    let xi: f64 = StandardNormal.sample(rng);
                    m + a * (cur - m) + b * xi
                };
                let mut next = WindVector::new(axis(mean.w_n, w.w_n), axis(mean.w_e, w.w_e), axis(mean.w_d, w.w_d));
                let mag = next.magnitude();
                if mag > *max_magnitude {
                    let s = max_magnitude / mag;
                    next = WindVector::new(next.w_n * s, next.w_e * s, next.w_d * s);
                }
                next
            }
        }
    }
}

/// Standard deviations of the additive Gaussian noise on the state fed to
/// the controller. Zero disables a channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateNoise {
    /// Meters, per position axis.
    pub position: f64,
    /// Radians, for roll, pitch, course and flight path angle.
    pub angle: f64,
    /// m/s.
    pub airspeed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub path: PathSpec,
    pub controller: ControllerConfig,
    /// Initial plant state; by default trimmed on the path at `start_psi`,
    /// aligned with the tangent.
    pub initial: Option<AircraftState>,
    pub start_psi: f64,
    pub wind: WindModel,
    pub laps: u32,
    /// Multiplicative factors applied to the plant's copy of the model
    /// parameters, keyed by parameter name.
    pub plant_factors: BTreeMap<String, f64>,
    /// Plant integration step, seconds.
    pub substep: f64,
    pub seed: u64,
    /// Simulated-time limit; derived from the path length when absent.
    pub timeout: Option<f64>,
    pub estimate_noise: EstimateNoise,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            path: PathSpec::Preset(PathPreset::Path1),
            controller: ControllerConfig::default(),
            initial: None,
            start_psi: 0.0,
            wind: WindModel::default(),
            laps: 2,
            plant_factors: BTreeMap::new(),
            substep: 0.01,
            seed: 0,
            timeout: None,
            estimate_noise: EstimateNoise::default(),
        }
    }
}

/// Alternating `+fraction, -fraction, ...` factors over the open-loop
/// parameters, in their canonical order.
pub fn mismatch_preset(fraction: f64) -> BTreeMap<String, f64> {
    OPEN_LOOP_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            (n.to_string(), 1.0 + sign * fraction)
        })
        .collect()
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        self.controller.validate()?;
        self.wind.validate()?;
        if self.laps < 1 {
            return bad("laps must be at least 1".into());
        }
        if !(self.substep > 0.0) || self.substep > GUIDANCE_PERIOD {
            return bad(format!("substep must lie in (0, {GUIDANCE_PERIOD}], got {}", self.substep));
        }
        let ratio = GUIDANCE_PERIOD / self.substep;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return bad(format!("substep {} does not divide the {GUIDANCE_PERIOD} s guidance period", self.substep));
        }
        for (name, f) in &self.plant_factors {
            if !OPEN_LOOP_NAMES.contains(&name.as_str()) && !CLOSED_LOOP_NAMES.contains(&name.as_str()) {
                return bad(format!("unknown plant parameter `{name}`"));
            }
            if !(*f > 0.0) || !f.is_finite() {
                return bad(format!("plant factor for `{name}` must be positive, got {f}"));
            }
        }
        if let Some(t) = self.timeout {
            if !(t > 0.0) {
                return bad(format!("timeout must be positive, got {t}"));
            }
        }
        let n = &self.estimate_noise;
        if [n.position, n.angle, n.airspeed].iter().any(|v| !(*v >= 0.0)) {
            return bad("estimate noise levels must be non-negative".into());
        }
        if let Some(x) = &self.initial {
            x.validate().map_err(|e| SimError::Scenario(format!("initial state: {e}")))?;
        }
        Ok(())
    }

    pub fn plant_params(&self) -> ModelParameters {
        let mut p = self.controller.params;
        for (name, f) in &self.plant_factors {
            if let Some(v) = p.get(name) {
                // Names were checked in validate.
                let _ = p.set(name, v * f);
            }
        }
        p
    }

    /// Trimmed state on the path at `start_psi`, heading along the tangent.
    pub fn default_initial(&self, path: &ArcLengthPath) -> Result<AircraftState, SimError> {
        let psi = path.wrap(self.start_psi);
        let (pos, tan) = path.eval_generic(psi);
        let tn = (tan[0] * tan[0] + tan[1] * tan[1] + tan[2] * tan[2]).sqrt();
        let gamma = (-tan[2] / tn).clamp(-1.0, 1.0).asin();
        let cfg = &self.controller;
        let trim = model::trim(&cfg.params, cfg.airspeed_ref, gamma, 0.0)
            .map_err(|e| SimError::Scenario(format!("cannot trim the initial state: {e}")))?;
        let mut x = trim.state;
        x.n = pos[0];
        x.e = pos[1];
        x.d = pos[2];
        x.chi_a = tan[1].atan2(tan[0]);
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub state: AircraftState,
    pub estimate: AircraftState,
    pub wind: WindVector,
    pub wind_estimate: WindVector,
    pub command: ControlCommand,
    /// NaN for controllers without a path-rate command.
    pub psi_dot_c: f64,
    pub psi_star: f64,
    /// Position minus the path point at the controller's closest parameter.
    pub path_error: [f64; 3],
    /// Seconds.
    pub solve_time: f64,
    pub degraded: bool,
    /// Unwrapped arc length travelled along the path.
    pub progress: f64,
    pub lap: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimLog {
    pub path_name: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub envelope: FlightEnvelope,
    pub records: Vec<TickRecord>,
    pub lap_times: Vec<f64>,
    pub completed: bool,
    pub timed_out: bool,
    pub diverged: Option<String>,
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn noisy(x: &AircraftState, n: &EstimateNoise, rng: &mut ChaCha8Rng) -> AircraftState {
    let mut draw = |s: f64| -> f64 {
        if s > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        } else {
            0.0
        }
    };
    let mut y = *x;
    y.n += draw(n.position);
    y.e += draw(n.position);
    y.d += draw(n.position);
    y.phi += draw(n.angle);
    y.theta += draw(n.angle);
    y.chi_a += draw(n.angle);
    y.gamma_a += draw(n.angle);
    y.v_a += draw(n.airspeed);
    y
}

/// Distance from the path beyond which a run counts as diverged.
const DIVERGENCE_DISTANCE: f64 = 500.0;

/// Runs one scenario to completion, timeout or divergence.
pub fn run_scenario(sc: &Scenario) -> Result<SimLog, SimError> {
    sc.validate()?;
    let path = Arc::new(sc.path.build()?);
    let mut ctrl = Controller::new(sc.controller.clone(), path.clone())?;
    let plant = sc.plant_params();
    let mut x = match sc.initial {
        Some(x) => x,
        None => sc.default_initial(&path)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut wind = sc.wind.initial();
    let substeps = (GUIDANCE_PERIOD / sc.substep).round() as usize;
    let h = GUIDANCE_PERIOD / substeps as f64;
    let len = path.total_length();
    let target = if path.is_closed() {
        sc.laps as f64 * len
    } else {
        // Open paths are traversed once, from the start parameter to the end.
        len - path.wrap(sc.start_psi) - 1.0
    };
    let timeout = sc.timeout.unwrap_or(target / 10.0 + 30.0);
    let mut track = path.closest_param_global(&x.position());
    let mut progress = 0.0;
    let mut lap_times = Vec::new();
    let mut records = Vec::new();
    let mut diverged = None;
    let mut completed = false;
    let mut tick: u64 = 0;
    loop {
        let t = tick as f64 * GUIDANCE_PERIOD;
        if t > timeout {
            break;
        }
        let estimate = noisy(&x, &sc.estimate_noise, &mut rng);
        let wind_est = wind.horizontal();
        let q = match ctrl.query(&estimate, &wind_est) {
            Ok(q) => q,
            Err(e) => {
                diverged = Some(format!("guidance query failed at t = {t:.1} s: {e}"));
                break;
            }
        };
        let pos = x.position();
        let rp = path.position(q.psi_star);
        let err = [pos[0] - rp[0], pos[1] - rp[1], pos[2] - rp[2]];
        records.push(TickRecord {
            t,
            state: x,
            estimate,
            wind,
            wind_estimate: wind_est,
            command: q.command,
            psi_dot_c: q.psi_dot_c.unwrap_or(f64::NAN),
            psi_star: q.psi_star,
            path_error: err,
            solve_time: q.solve_time,
            degraded: q.degraded,
            progress,
            lap: lap_times.len() as u32,
        });
        for _ in 0..substeps {
            match model::rk4_step(&x, &q.command, &wind, h, &plant) {
                Ok(next) => x = next,
                Err(e) => {
                    diverged = Some(format!("plant integration failed at t = {t:.2} s: {e}"));
                    break;
                }
            }
            wind = sc.wind.advance(&wind, h, &mut rng);
        }
        if diverged.is_some() {
            break;
        }
        tick += 1;
        let pos = x.position();
        let psi = path.closest_param_local(&pos, track, 2.0 * sc.controller.envelope.va_max * GUIDANCE_PERIOD + 5.0);
        progress += path.param_delta(track, psi);
        track = psi;
        let off = norm3(&{
            let rp = path.position(psi);
            [pos[0] - rp[0], pos[1] - rp[1], pos[2] - rp[2]]
        });
        if off > DIVERGENCE_DISTANCE {
            diverged = Some(format!("aircraft {off:.0} m from the path at t = {:.1} s", tick as f64 * GUIDANCE_PERIOD));
            break;
        }
        while path.is_closed() && lap_times.len() < sc.laps as usize && progress >= (lap_times.len() + 1) as f64 * len {
            lap_times.push(tick as f64 * GUIDANCE_PERIOD);
        }
        if progress >= target {
            completed = true;
            break;
        }
    }
    Ok(SimLog {
        path_name: sc.path.name(),
        controller: sc.controller.kind,
        seed: sc.seed,
        envelope: sc.controller.envelope,
        records,
        lap_times,
        timed_out: !completed && diverged.is_none(),
        completed,
        diverged,
    })
}

impl SimLog {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(SIMLOG_SCHEMA, &SIMLOG_COLUMNS);
        t.meta.insert("controller".into(), self.controller.name().into());
        t.meta.insert("path".into(), self.path_name.clone());
        t.meta.insert("seed".into(), self.seed.to_string());
        t.meta.insert("completed".into(), self.completed.to_string());
        t.meta.insert("timed_out".into(), self.timed_out.to_string());
        t.meta.insert(
            "lap_times".into(),
            self.lap_times.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        );
        if let Some(d) = &self.diverged {
            t.meta.insert("diverged".into(), d.replace('\n', " "));
        }
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![r.t];
            row.extend(r.state.to_array());
            row.extend(r.estimate.to_array());
            row.extend([r.wind.w_n, r.wind.w_e, r.wind.w_d]);
            row.extend([r.wind_estimate.w_n, r.wind_estimate.w_e, r.wind_estimate.w_d]);
            row.extend(r.command.to_array());
            row.push(r.psi_dot_c);
            row.push(r.psi_star);
            row.extend(r.path_error);
            row.push(norm3(&r.path_error));
            row.push(r.state.ground_speed(&r.wind));
            row.push(model::alpha_of(&r.state));
            row.push(r.solve_time * 1e3);
            row.push(if r.degraded { 1.0 } else { 0.0 });
            row.push(r.progress);
            row.push(r.lap as f64);
            row.push(i as f64);
            t.push(row);
        }
        t
    }

    /// Rebuilds a log from its table form. The envelope is not stored in the
    /// table and must be supplied.
    pub fn from_table(t: &Table, envelope: FlightEnvelope) -> Result<Self, SimError> {
        t.expect_schema(SIMLOG_SCHEMA)?;
        let ix: Vec<usize> = SIMLOG_COLUMNS
            .iter()
            .map(|c| t.column_index(c))
            .collect::<Result<_, _>>()?;
        let mut records = Vec::with_capacity(t.rows.len());
        for row in &t.rows {
            let col = |i: usize| row[ix[i]];
            let st = |o: usize| AircraftState::from_array(&std::array::from_fn(|k| col(o + k)));
            records.push(TickRecord {
                t: col(0),
                state: st(1),
                estimate: st(10),
                wind: WindVector::new(col(19), col(20), col(21)),
                wind_estimate: WindVector::new(col(22), col(23), col(24)),
                command: ControlCommand::new(col(25), col(26), col(27)),
                psi_dot_c: col(28),
                psi_star: col(29),
                path_error: [col(30), col(31), col(32)],
                solve_time: col(36) / 1e3,
                degraded: col(37) != 0.0,
                progress: col(38),
                lap: col(39) as u32,
            });
        }
        let meta = |k: &str| t.meta.get(k).cloned().unwrap_or_default();
        let controller = ControllerKind::from_name(&meta("controller"))?;
        Ok(Self {
            path_name: meta("path"),
            controller,
            seed: meta("seed").parse().unwrap_or(0),
            envelope,
            records,
            lap_times: meta("lap_times")
                .split_whitespace()
                .filter_map(|v| v.parse().ok())
                .collect(),
            completed: meta("completed") == "true",
            timed_out: meta("timed_out") == "true",
            diverged: t.meta.get("diverged").cloned(),
        })
    }
}

/// Summary statistics of one quantity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Stat {
    /// Linear-interpolation quantiles. Empty input gives zeros.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            max: v[v.len() - 1],
            q25: q(0.25),
            q75: q(0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema: String,
    pub controller: ControllerKind,
    pub path: String,
    pub seed: u64,
    /// Path-following error, m.
    pub error: Stat,
    /// m/s.
    pub airspeed: Stat,
    /// m/s.
    pub groundspeed: Stat,
    /// Feedback (query) time, ms.
    pub feedback_ms: Stat,
    pub lap_times: Vec<f64>,
    /// Fraction of ticks with airspeed outside the envelope.
    pub airspeed_violation: f64,
    /// Fraction of ticks with angle of attack outside the envelope.
    pub alpha_violation: f64,
    pub degraded_fraction: f64,
    pub ticks: usize,
    pub completed: bool,
    pub diverged: Option<String>,
}

/// Run statistics. The path error is recomputed with a global projection
/// rather than the controller's local search.
pub fn compute_metrics(log: &SimLog, path: &ArcLengthPath) -> Result<Metrics, SimError> {
    if log.records.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let n = log.records.len() as f64;
    let env = &log.envelope;
    let errors: Vec<f64> = log
        .records
        .iter()
        .map(|r| {
            let pos = r.state.position();
            let p = path.position(path.closest_param_global(&pos));
            norm3(&[pos[0] - p[0], pos[1] - p[1], pos[2] - p[2]])
        })
        .collect();
    let va: Vec<f64> = log.records.iter().map(|r| r.state.v_a).collect();
    let vg: Vec<f64> = log.records.iter().map(|r| r.state.ground_speed(&r.wind)).collect();
    let fb: Vec<f64> = log.records.iter().map(|r| r.solve_time * 1e3).collect();
    let frac = |f: &dyn Fn(&TickRecord) -> bool| log.records.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(Metrics {
        schema: METRICS_SCHEMA.to_string(),
        controller: log.controller,
        path: log.path_name.clone(),
        seed: log.seed,
        error: Stat::of(&errors),
        airspeed: Stat::of(&va),
        groundspeed: Stat::of(&vg),
        feedback_ms: Stat::of(&fb),
        lap_times: log.lap_times.clone(),
        airspeed_violation: frac(&|r| !(env.va_min..=env.va_max).contains(&r.state.v_a)),
        alpha_violation: frac(&|r| !(env.alpha_min..=env.alpha_max).contains(&model::alpha_of(&r.state))),
        degraded_fraction: frac(&|r| r.degraded),
        ticks: log.records.len(),
        completed: log.completed,
        diverged: log.diverged.clone(),
    })
}

/// A named ordering between two runs and whether it held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub description: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub path: String,
    pub runs: Vec<Metrics>,
    pub orderings: Vec<OrderingCheck>,
}

impl Comparison {
    pub fn get(&self, kind: ControllerKind) -> Option<&Metrics> {
        self.runs.iter().find(|m| m.controller == kind)
    }
}

/// Runs the given controllers on identical copies of `base` (same seed) on
/// one preset, in parallel.
pub fn compare_controllers(
    preset: PathPreset,
    base: &Scenario,
    kinds: &[ControllerKind],
) -> Result<Comparison, SimError> {
    let path = preset.build()?;
    let runs: Vec<Metrics> = kinds
        .par_iter()
        .map(|k| {
            let mut sc = base.clone();
            sc.path = PathSpec::Preset(preset);
            sc.controller.kind = *k;
            let log = run_scenario(&sc)?;
            compute_metrics(&log, &path)
        })
        .collect::<Result<_, SimError>>()?;
    let mut cmp = Comparison {
        path: preset.name().to_string(),
        runs,
        orderings: Vec::new(),
    };
    let (cr, mpcc, la) = (
        cmp.get(ControllerKind::CrMpc).cloned(),
        cmp.get(ControllerKind::Mpcc).cloned(),
        cmp.get(ControllerKind::Lookahead).cloned(),
    );
    let mut check = |d: &str, holds: bool| {
        cmp.orderings.push(OrderingCheck {
            description: d.to_string(),
            holds,
        })
    };
    if let (Some(c), Some(l)) = (&cr, &la) {
        check("cr-mpc mean error < lookahead mean error", c.error.mean < l.error.mean);
    }
    if let (Some(m), Some(l)) = (&mpcc, &la) {
        check("mpcc mean error < lookahead mean error", m.error.mean < l.error.mean);
    }
    if let (Some(c), Some(m)) = (&cr, &mpcc) {
        check("mpcc max groundspeed > cr-mpc max groundspeed", m.groundspeed.max > c.groundspeed.max);
        check(
            "cr-mpc groundspeed IQR < mpcc groundspeed IQR",
            c.groundspeed.iqr() < m.groundspeed.iqr(),
        );
    }
    Ok(cmp)
}

/// Column order of the comparison table.
pub const COMPARISON_COLUMNS: [&str; 6] = ["path", "controller", "metric", "mean", "median", "max"];

/// Metric blocks of the comparison table, in order.
pub const METRIC_BLOCKS: [&str; 4] = ["path_error_m", "airspeed_mps", "groundspeed_mps", "feedback_time_ms"];

/// Long-form comparison rows: one per path, controller and metric block.
pub fn comparison_rows(cmps: &[Comparison]) -> Vec<(String, String, String, Stat)> {
    let mut rows = Vec::new();
    for c in cmps {
        for m in &c.runs {
            for (block, s) in METRIC_BLOCKS.iter().zip([m.error, m.airspeed, m.groundspeed, m.feedback_ms]) {
                rows.push((c.path.clone(), m.controller.name().to_string(), block.to_string(), s));
            }
        }
    }
    rows
}

/// Comparison rows as comma-separated text with a schema line.
pub fn comparison_csv(cmps: &[Comparison]) -> String {
    let mut out = format!("# schema: pathmpc.comparison/1\n{}\n", COMPARISON_COLUMNS.join(","));
    for (p, c, b, s) in comparison_rows(cmps) {
        out.push_str(&format!("{p},{c},{b},{},{},{}\n", s.mean, s.median, s.max));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_quantiles() {
        let s = Stat::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.max, 5.0);
        assert_eq!(s.iqr(), 2.0);
        assert_eq!(Stat::of(&[]), Stat::default());
    }

    #[test]
    fn substep_must_divide_the_period() {
        let sc = Scenario {
            substep: 0.03,
            ..Scenario::default()
        };
        assert!(sc.validate().unwrap_err().to_string().contains("divide"));
        let sc = Scenario {
            substep: 0.025,
            ..Scenario::default()
        };
        sc.validate().unwrap();
    }

    #[test]
    fn unknown_plant_parameter_is_rejected() {
        let mut sc = Scenario::default();
        sc.plant_factors.insert("C_X".into(), 1.1);
        assert!(sc.validate().is_err());
        sc.plant_factors = mismatch_preset(0.1);
        sc.validate().unwrap();
        let p = sc.plant_params();
        let base = ModelParameters::default();
        assert!((p.tau_t - 1.1 * base.tau_t).abs() < 1e-12);
    }

    #[test]
    fn gust_process_is_bounded_and_stationary() {
        let w = WindModel::Gusty {
            mean: WindVector::new(3.0, -2.0, 0.0),
            sigma: 2.0,
            tau: 3.0,
            max_magnitude: 12.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cur = w.initial();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let n = 200_000;
        for _ in 0..n {
            cur = w.advance(&cur, 0.01, &mut rng);
            assert!(cur.magnitude() <= 12.0 + 1e-9);
            sum += cur.w_e;
            sq += (cur.w_e + 2.0).powi(2);
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64).sqrt();
        assert!((mean + 2.0).abs() < 0.3, "{mean}");
        assert!((sd - 2.0).abs() < 0.4, "{sd}");
    }
}
