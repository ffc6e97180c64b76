//! Grey-box output-error identification of the model parameters.
//!
//! The attitude lags (`K_phi`, `K_theta`) are fitted first from roll and
//! pitch alone; the eight open-loop parameters are then fitted from airspeed,
//! flight path angle and body accelerations with the attitude constants held.
//! Both fits simulate the model over short segments that restart from the
//! measured state, and minimize the unit-variance-weighted output error with
//! a damped Gauss-Newton iteration.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, AircraftState, ControlCommand, ModelError, ModelParameters, WindVector};
use crate::table::{Table, TableError};

pub const DATASET_SCHEMA: &str = "pathmpc.sysid/1";
pub const SAMPLE_RATE: f64 = 40.0;
pub const DATASET_COLUMNS: [&str; 14] = [
    "t", "phi_c", "theta_c", "delta_tc", "phi", "theta", "v_a", "gamma_a", "a_x", "a_z", "delta_t", "w_n", "w_e",
    "w_d",
];
/// Validation outputs, in report order.
pub const OUTPUTS: [&str; 6] = ["phi", "theta", "v_a", "gamma_a", "a_x", "a_z"];
/// Share of the samples used for training; the rest (at the end) validates.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Excitation envelope of the maneuver generator.
const ROLL_LIMIT: f64 = 45.0 * PI / 180.0;
const PITCH_LIMIT: f64 = 20.0 * PI / 180.0;
const AIRSPEED_RANGE: (f64, f64) = (15.0, 40.0);

#[derive(Debug, Error)]
pub enum SysIdError {
    #[error("invalid maneuver spec: {0}")]
    Spec(String),
    #[error("maneuver leaves the excitation envelope at t = {t:.3} s: {what}")]
    Envelope { t: f64, what: String },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("insufficient excitation: sensitivity to {parameter} is {sensitivity:.3e}")]
    InsufficientExcitation { parameter: String, sensitivity: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// One 40 Hz record: the command sent, then what was measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub command: ControlCommand,
    pub phi: f64,
    pub theta: f64,
    pub v_a: f64,
    pub gamma_a: f64,
    pub a_x: f64,
    pub a_z: f64,
    /// Throttle state; used only to initialize simulated segments.
    pub delta_t: f64,
    pub wind: WindVector,
}

impl Sample {
    fn output(&self, i: usize) -> f64 {
        [self.phi, self.theta, self.v_a, self.gamma_a, self.a_x, self.a_z][i]
    }

    fn initial_state(&self) -> AircraftState {
        AircraftState {
            n: 0.0,
            e: 0.0,
            d: 0.0,
            phi: self.phi,
            theta: self.theta,
            chi_a: 0.0,
            v_a: self.v_a,
            gamma_a: self.gamma_a,
            delta_t: self.delta_t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Full,
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SysIdDataset {
    pub samples: Vec<Sample>,
    pub role: SplitRole,
}

impl SysIdDataset {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE
    }

    pub fn check(&self) -> Result<(), SysIdError> {
        if self.samples.len() < 2 {
            return Err(SysIdError::Dataset("fewer than two samples".into()));
        }
        let dt = 1.0 / SAMPLE_RATE;
        for w in self.samples.windows(2) {
            if ((w[1].t - w[0].t) - dt).abs() > 1e-6 {
                return Err(SysIdError::Dataset(format!(
                    "non-uniform sampling between t = {} and t = {}",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(())
    }

    /// Contiguous split: the first 80% trains, the last 20% validates.
    pub fn split(&self) -> (SysIdDataset, SysIdDataset) {
        let cut = (self.samples.len() as f64 * TRAIN_FRACTION).round() as usize;
        (
            SysIdDataset {
                samples: self.samples[..cut].to_vec(),
                role: SplitRole::Train,
            },
            SysIdDataset {
                samples: self.samples[cut..].to_vec(),
                role: SplitRole::Validation,
            },
        )
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(DATASET_SCHEMA, &DATASET_COLUMNS);
        t.meta.insert("sample_rate_hz".into(), SAMPLE_RATE.to_string());
        t.meta.insert(
            "role".into(),
            match self.role {
                SplitRole::Full => "full",
                SplitRole::Train => "train",
                SplitRole::Validation => "validation",
            }
            .into(),
        );
        for s in &self.samples {
            t.push(vec![
                s.t,
                s.command.phi_c,
                s.command.theta_c,
                s.command.delta_tc,
                s.phi,
                s.theta,
                s.v_a,
                s.gamma_a,
                s.a_x,
                s.a_z,
                s.delta_t,
                s.wind.w_n,
                s.wind.w_e,
                s.wind.w_d,
            ]);
        }
        t
    }

    pub fn from_table(t: &Table) -> Result<Self, SysIdError> {
        t.expect_schema(DATASET_SCHEMA)?;
        let ix: Vec<usize> = DATASET_COLUMNS
            .iter()
            .map(|c| t.column_index(c))
            .collect::<Result<_, _>>()?;
        let samples = t
            .rows
            .iter()
            .map(|r| {
                let c = |i: usize| r[ix[i]];
                Sample {
                    t: c(0),
                    command: ControlCommand::new(c(1), c(2), c(3)),
                    phi: c(4),
                    theta: c(5),
                    v_a: c(6),
                    gamma_a: c(7),
                    a_x: c(8),
                    a_z: c(9),
                    delta_t: c(10),
                    wind: WindVector::new(c(11), c(12), c(13)),
                }
            })
            .collect();
        let role = match t.meta.get("role").map(String::as_str) {
            Some("train") => SplitRole::Train,
            Some("validation") => SplitRole::Validation,
            _ => SplitRole::Full,
        };
        let d = Self { samples, role };
        d.check()?;
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Roll,
    Pitch,
    Throttle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Maneuver {
    /// Trim command for the given condition, held.
    Hold {
        duration: f64,
        airspeed: f64,
        #[serde(default)]
        gamma: f64,
        #[serde(default)]
        phi: f64,
    },
    /// 2-1-1 pulse train on one axis around the current trim command,
    /// followed by `unit` seconds of recovery.
    Doublet { axis: Axis, amplitude: f64, unit: f64 },
    /// Sum of random-phase sinusoids below `bandwidth` Hz on all three axes.
    FreeForm {
        duration: f64,
        bandwidth: f64,
        phi_amplitude: f64,
        theta_amplitude: f64,
        throttle_amplitude: f64,
        #[serde(default = "default_tones")]
        tones: usize,
    },
}

fn default_tones() -> usize {
    6
}

impl Maneuver {
    pub fn duration(&self) -> f64 {
        match self {
            Self::Hold { duration, .. } | Self::FreeForm { duration, .. } => *duration,
            Self::Doublet { unit, .. } => 5.0 * unit,
        }
    }
}

/// Standard deviations of additive measurement noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementNoise {
    /// Roll and pitch, rad.
    pub attitude: f64,
    /// m/s.
    pub airspeed: f64,
    /// Flight path angle, rad.
    pub gamma: f64,
    /// m/s^2.
    pub accel: f64,
}

impl MeasurementNoise {
    /// Attitude 0.5 deg and airspeed 0.3 m/s; other channels clean.
    pub fn preset() -> Self {
        Self {
            attitude: 0.5f64.to_radians(),
            airspeed: 0.3,
            gamma: 0.0,
            accel: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeuverSpec {
    /// Level trim airspeed at t = 0, m/s.
    pub initial_airspeed: f64,
    pub segments: Vec<Maneuver>,
    pub noise: MeasurementNoise,
    pub seed: u64,
    /// Integration steps per sample.
    pub substeps: usize,
    /// Model used to trim the commands and the starting state, so the
    /// program does not depend on the aircraft flying it.
    pub trim_model: ModelParameters,
}

impl Default for ManeuverSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl ManeuverSpec {
    /// About five minutes: holds at several airspeeds, doublets on each axis,
    /// then free-form excitation. The last fifth is free-form only.
    pub fn standard() -> Self {
        use Maneuver::*;
        let deg = |v: f64| v.to_radians();
        let hold = |duration: f64, airspeed: f64| Hold {
            duration,
            airspeed,
            gamma: 0.0,
            phi: 0.0,
        };
        let mut segments = vec![hold(10.0, 22.0)];
        for (axis, amplitude) in [(Axis::Roll, deg(25.0)), (Axis::Pitch, deg(5.0)), (Axis::Throttle, 0.25)] {
            segments.push(Doublet { axis, amplitude, unit: 1.5 });
            segments.push(Doublet {
                axis,
                amplitude: -amplitude,
                unit: 1.0,
            });
        }
        for v in [18.0, 26.0, 32.0, 24.0] {
            segments.push(hold(12.0, v));
            segments.push(Doublet {
                axis: Axis::Pitch,
                amplitude: deg(4.0),
                unit: 1.0,
            });
            segments.push(Doublet {
                axis: Axis::Throttle,
                amplitude: -0.2,
                unit: 1.0,
            });
        }
        segments.push(Hold {
            duration: 10.0,
            airspeed: 24.0,
            gamma: deg(4.0),
            phi: 0.0,
        });
        segments.push(Hold {
            duration: 10.0,
            airspeed: 24.0,
            gamma: deg(-4.0),
            phi: deg(20.0),
        });
        // Loaded turns and a dive stretch the angle of attack range.
        for (airspeed, gamma, phi) in [(17.0, 0.0, 40.0), (36.0, -6.0, 0.0), (19.0, 2.0, -35.0)] {
            segments.push(Hold {
                duration: 8.0,
                airspeed,
                gamma: deg(gamma),
                phi: deg(phi),
            });
            segments.push(Doublet {
                axis: Axis::Pitch,
                amplitude: deg(5.0),
                unit: 1.0,
            });
        }
        segments.push(hold(5.0, 24.0));
        segments.push(FreeForm {
            duration: 120.0,
            bandwidth: 0.5,
            phi_amplitude: deg(30.0),
            theta_amplitude: deg(6.0),
            throttle_amplitude: 0.25,
            tones: 6,
        });
        Self {
            initial_airspeed: 22.0,
            segments,
            noise: MeasurementNoise::default(),
            seed: 0,
            substeps: 2,
            trim_model: ModelParameters::default(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(Maneuver::duration).sum()
    }

    pub fn validate(&self) -> Result<(), SysIdError> {
        let bad = |m: String| Err(SysIdError::Spec(m));
        if self.segments.is_empty() {
            return bad("no maneuver segments".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        let in_speed = |v: f64| (AIRSPEED_RANGE.0..=AIRSPEED_RANGE.1).contains(&v);
        if !in_speed(self.initial_airspeed) {
            return bad(format!("initial airspeed {} outside [15, 40] m/s", self.initial_airspeed));
        }
        for (i, m) in self.segments.iter().enumerate() {
            let d = m.duration();
            if !(d > 0.0) || !d.is_finite() {
                return bad(format!("segment {i}: duration must be positive"));
            }
            match m {
                Maneuver::Hold { airspeed, phi, gamma, .. } => {
                    if !in_speed(*airspeed) || phi.abs() > ROLL_LIMIT || gamma.abs() > PITCH_LIMIT {
                        return bad(format!("segment {i}: hold condition outside the excitation envelope"));
                    }
                }
                Maneuver::FreeForm { bandwidth, tones, .. } => {
                    if !(*bandwidth > 0.0) || *tones == 0 {
                        return bad(format!("segment {i}: free-form needs a positive bandwidth and tones"));
                    }
                }
                Maneuver::Doublet { .. } => {}
            }
        }
        let n = [
            self.noise.attitude,
            self.noise.airspeed,
            self.noise.gamma,
            self.noise.accel,
        ];
        if n.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("noise levels must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Command schedule, one entry per sample.
fn command_schedule(spec: &ManeuverSpec, rng: &mut ChaCha8Rng) -> Result<Vec<ControlCommand>, SysIdError> {
    let dt = 1.0 / SAMPLE_RATE;
    let params = &spec.trim_model;
    let mut base = model::trim(params, spec.initial_airspeed, 0.0, 0.0)?.command;
    let mut out = Vec::new();
    for m in &spec.segments {
        let n = (m.duration() * SAMPLE_RATE).round() as usize;
        match m {
            Maneuver::Hold { airspeed, gamma, phi, .. } => {
                base = model::trim(params, *airspeed, *gamma, *phi)?.command;
                out.extend(std::iter::repeat_n(base, n));
            }
            Maneuver::Doublet { axis, amplitude, unit } => {
                for k in 0..n {
                    let tu = k as f64 * dt / unit;
                    let s = match tu {
                        t if t < 2.0 => 1.0,
                        t if t < 3.0 => -1.0,
                        t if t < 4.0 => 1.0,
                        _ => 0.0,
                    };
                    let mut c = base;
                    match axis {
                        Axis::Roll => c.phi_c += s * amplitude,
                        Axis::Pitch => c.theta_c += s * amplitude,
                        Axis::Throttle => c.delta_tc += s * amplitude,
                    }
                    out.push(c);
                }
            }
            Maneuver::FreeForm {
                bandwidth,
                phi_amplitude,
                theta_amplitude,
                throttle_amplitude,
                tones,
                ..
            } => {
                let mut draw = |amp: f64| -> Vec<(f64, f64, f64)> {
                    (0..*tones)
                        .map(|_| {
                            let f = rng.random_range(0.05..bandwidth.max(0.06));
                            let ph = rng.random_range(0.0..2.0 * PI);
                            (amp / *tones as f64, 2.0 * PI * f, ph)
                        })
                        .collect()
                };
                let axes = [draw(*phi_amplitude), draw(*theta_amplitude), draw(*throttle_amplitude)];
                let eval = |tones: &[(f64, f64, f64)], t: f64| tones.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum::<f64>();
                for k in 0..n {
                    let t = k as f64 * dt;
                    // Fade in over the first second to avoid a step.
                    let fade = t.min(1.0);
                    let mut c = base;
                    c.phi_c += fade * eval(&axes[0], t);
                    c.theta_c += fade * eval(&axes[1], t);
                    c.delta_tc += fade * eval(&axes[2], t);
                    out.push(c);
                }
            }
        }
    }
    for (k, c) in out.iter().enumerate() {
        let t = k as f64 * dt;
        if c.phi_c.abs() > ROLL_LIMIT {
            return Err(SysIdError::Envelope {
                t,
                what: format!("roll command {:.1} deg", c.phi_c.to_degrees()),
            });
        }
        if c.theta_c.abs() > PITCH_LIMIT {
            return Err(SysIdError::Envelope {
                t,
                what: format!("pitch command {:.1} deg", c.theta_c.to_degrees()),
            });
        }
        if !(0.0..=1.0).contains(&c.delta_tc) {
            return Err(SysIdError::Envelope {
                t,
                what: format!("throttle command {:.3}", c.delta_tc),
            });
        }
    }
    Ok(out)
}

/// Measured body accelerations of a state.
fn accels(x: &AircraftState, p: &ModelParameters) -> (f64, f64) {
    model::imu_accels(&model::forces(x, p), p.m)
}

/// Simulates the maneuver program at 40 Hz from level trim.
pub fn generate_maneuvers(params: &ModelParameters, spec: &ManeuverSpec) -> Result<SysIdDataset, SysIdError> {
    params.validate()?;
    spec.validate()?;
    spec.trim_model.validate()?;
    // Separate streams keep the program fixed when only the noise changes.
    let mut program = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let commands = command_schedule(spec, &mut program)?;
    let mut x = model::trim(&spec.trim_model, spec.initial_airspeed, 0.0, 0.0)?.state;
    let h = 1.0 / SAMPLE_RATE / spec.substeps as f64;
    let noise = spec.noise;
    let mut gauss = |s: f64| -> f64 {
        if s > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        } else {
            0.0
        }
    };
    let mut samples = Vec::with_capacity(commands.len());
    for (k, c) in commands.iter().enumerate() {
        let t = k as f64 / SAMPLE_RATE;
        if !(AIRSPEED_RANGE.0..=AIRSPEED_RANGE.1).contains(&x.v_a) {
            return Err(SysIdError::Envelope {
                t,
                what: format!("airspeed {:.2} m/s", x.v_a),
            });
        }
        let (a_x, a_z) = accels(&x, params);
        samples.push(Sample {
            t,
            command: *c,
            phi: x.phi + gauss(noise.attitude),
            theta: x.theta + gauss(noise.attitude),
            v_a: x.v_a + gauss(noise.airspeed),
            gamma_a: x.gamma_a + gauss(noise.gamma),
            a_x: a_x + gauss(noise.accel),
            a_z: a_z + gauss(noise.accel),
            delta_t: x.delta_t,
            wind: WindVector::ZERO,
        });
        for _ in 0..spec.substeps {
            x = model::rk4_step(&x, c, &WindVector::ZERO, h, params)?;
        }
    }
    Ok(SysIdDataset {
        samples,
        role: SplitRole::Full,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Length of each simulated segment, seconds.
    pub segment_duration: f64,
    /// Integration steps per sample.
    pub substeps: usize,
    pub max_iterations: usize,
    /// Stop when the relative cost decrease falls below this.
    pub tolerance: f64,
    /// Levenberg-style diagonal damping relative to the mean curvature.
    pub damping: f64,
    /// Relative finite-difference step of the Jacobian.
    pub fd_step: f64,
    /// Minimum RMS sensitivity of the weighted residuals to a relative
    /// parameter change.
    pub excitation_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            segment_duration: 10.0,
            substeps: 2,
            max_iterations: 60,
            tolerance: 1e-12,
            damping: 1e-9,
            fd_step: 1e-6,
            excitation_threshold: 1e-6,
        }
    }
}

/// Per-output root-mean-square errors.
impl FitOptions {
    pub fn validate(&self) -> Result<(), SysIdError> {
        let bad = |m: String| Err(SysIdError::Spec(m));
        if self.substeps == 0 || self.max_iterations == 0 {
            return bad("substeps and max_iterations must be at least 1".into());
        }
        if !(self.segment_duration >= 2.0 / SAMPLE_RATE) || !self.segment_duration.is_finite() {
            return bad(format!("segment_duration must span at least two samples, got {}", self.segment_duration));
        }
        for (name, v) in [
            ("tolerance", self.tolerance),
            ("damping", self.damping),
            ("excitation_threshold", self.excitation_threshold),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.fd_step > 0.0) || self.fd_step >= 0.1 {
            return bad(format!("fd_step must lie in (0, 0.1), got {}", self.fd_step));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseSet {
    pub phi: f64,
    pub theta: f64,
    pub v_a: f64,
    pub gamma_a: f64,
    pub a_x: f64,
    pub a_z: f64,
}

impl RmseSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "phi" => self.phi,
            "theta" => self.theta,
            "v_a" => self.v_a,
            "gamma_a" => self.gamma_a,
            "a_x" => self.a_x,
            "a_z" => self.a_z,
            _ => return None,
        })
    }

    fn from_array(v: [f64; 6]) -> Self {
        Self {
            phi: v[0],
            theta: v[1],
            v_a: v[2],
            gamma_a: v[3],
            a_x: v[4],
            a_z: v[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub initial: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted cost after each accepted iteration, starting point first.
    pub cost_history: Vec<f64>,
    /// Parameter correlation matrix from the Gauss-Newton Hessian.
    pub correlation: Vec<Vec<f64>>,
    /// Filled by [`identify`].
    pub validation_rmse: Option<RmseSet>,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn correlation_of(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.correlation[i][j])
    }
}

/// Segment start indices over `n` samples.
fn segments(n: usize, opts: &FitOptions) -> Vec<(usize, usize)> {
    let len = ((opts.segment_duration * SAMPLE_RATE).round() as usize).max(2);
    (0..n)
        .step_by(len)
        .map(|s| (s, (s + len).min(n)))
        .filter(|(s, e)| e - s >= 2)
        .collect()
}

/// Inverse channel standard deviations, floored.
fn channel_weights(data: &SysIdDataset, channels: &[usize]) -> Vec<f64> {
    const FLOOR: [f64; 6] = [1e-3, 1e-3, 1e-2, 1e-3, 1e-2, 1e-2];
    channels
        .iter()
        .map(|&c| {
            let v: Vec<f64> = data.samples.iter().map(|s| s.output(c)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            1.0 / sd.max(FLOOR[c])
        })
        .collect()
}

/// RK4 of the first-order lag `x' = k (u - x)`, with the same arithmetic as
/// the full-model integrator.
fn lag_rk4(x: f64, u: f64, k: f64, h: f64) -> f64 {
    let f = |y: f64| (u - y) * k;
    let k1 = f(x);
    let k2 = f(x + k1 * (0.5 * h));
    let k3 = f(x + k2 * (0.5 * h));
    let k4 = f(x + k3 * h);
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// A weighted least-squares problem. The first `params` unknowns are model
/// parameters; any further unknowns are per-segment nuisances.
trait Lsq: Sync {
    fn dim(&self) -> usize;
    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>>;

    /// Central-difference derivative of the residuals along unknown `j`.
    fn column(&self, x: &[f64], j: usize, h: f64) -> Option<Vec<f64>> {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (rp, rm) = (self.residuals(&xp)?, self.residuals(&xm)?);
        Some(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    fn scale(&self, x: &[f64], j: usize) -> f64 {
        x[j].abs().max(1e-3)
    }
}

struct ClosedLoopProblem<'a> {
    data: &'a SysIdDataset,
    w: Vec<f64>,
    opts: FitOptions,
}

impl Lsq for ClosedLoopProblem<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn residuals(&self, k: &[f64]) -> Option<Vec<f64>> {
        let opts = &self.opts;
        let h = 1.0 / SAMPLE_RATE / opts.substeps as f64;
        let mut r = Vec::new();
        for (s, e) in segments(self.data.samples.len(), opts) {
            let mut phi = self.data.samples[s].phi;
            let mut theta = self.data.samples[s].theta;
            for i in s..e - 1 {
                let c = &self.data.samples[i].command;
                for _ in 0..opts.substeps {
                    phi = lag_rk4(phi, c.phi_c, k[0], h);
                    theta = lag_rk4(theta, c.theta_c, k[1], h);
                }
                let m = &self.data.samples[i + 1];
                r.push((phi - m.phi) * self.w[0]);
                r.push((theta - m.theta) * self.w[1]);
            }
        }
        Some(r)
    }
}

const OPEN_CHANNELS: [usize; 4] = [2, 3, 4, 5];
/// Nuisance unknowns per segment: initial airspeed and flight path angle offsets.
const NUISANCE: usize = 2;

struct OpenLoopProblem<'a> {
    data: &'a SysIdDataset,
    base: ModelParameters,
    w: Vec<f64>,
    segs: Vec<(usize, usize)>,
    opts: FitOptions,
}

impl OpenLoopProblem<'_> {
    fn params(&self, x: &[f64]) -> ModelParameters {
        let mut p = self.base;
        p.set_open_loop(&x[..8]);
        p
    }

    /// Residuals of one segment, started from the measured state plus the
    /// estimated offsets. The start sample is compared too, which anchors
    /// the offsets to the measurement.
    fn segment(&self, p: &ModelParameters, k: usize, off: &[f64]) -> Option<Vec<f64>> {
        let (s, e) = self.segs[k];
        let h = 1.0 / SAMPLE_RATE / self.opts.substeps as f64;
        let mut x = self.data.samples[s].initial_state();
        x.v_a += off[0];
        x.gamma_a += off[1];
        let mut r = Vec::with_capacity(4 * (e - s));
        for i in s..e {
            let m = &self.data.samples[i];
            let (ax, az) = accels(&x, p);
            r.push((x.v_a - m.v_a) * self.w[0]);
            r.push((x.gamma_a - m.gamma_a) * self.w[1]);
            r.push((ax - m.a_x) * self.w[2]);
            r.push((az - m.a_z) * self.w[3]);
            if i + 1 < e {
                for _ in 0..self.opts.substeps {
                    x = model::rk4_step(&x, &m.command, &m.wind, h, p).ok()?;
                }
            }
        }
        Some(r)
    }

    fn offset(&self, k: usize) -> usize {
        4 * (self.segs[k].0 - self.segs[0].0)
    }
}

impl Lsq for OpenLoopProblem<'_> {
    fn dim(&self) -> usize {
        8 + NUISANCE * self.segs.len()
    }

    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        let p = self.params(x);
        let parts: Vec<Option<Vec<f64>>> = (0..self.segs.len())
            .into_par_iter()
            .map(|k| self.segment(&p, k, &x[8 + NUISANCE * k..8 + NUISANCE * (k + 1)]))
            .collect();
        let mut r = Vec::new();
        for part in parts {
            r.extend(part?);
        }
        Some(r)
    }

    fn column(&self, x: &[f64], j: usize, h: f64) -> Option<Vec<f64>> {
        if j < 8 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (rp, rm) = (self.residuals(&xp)?, self.residuals(&xm)?);
            return Some(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
        }
        // A nuisance only moves its own segment.
        let k = (j - 8) / NUISANCE;
        let p = self.params(x);
        let mut op = x[8 + NUISANCE * k..8 + NUISANCE * (k + 1)].to_vec();
        let mut om = op.clone();
        op[(j - 8) % NUISANCE] += h;
        om[(j - 8) % NUISANCE] -= h;
        let (rp, rm) = (self.segment(&p, k, &op)?, self.segment(&p, k, &om)?);
        let total = 4 * (self.segs.last()?.1 - self.segs[0].0);
        let mut col = vec![0.0; total];
        let o = self.offset(k);
        for (i, (a, b)) in rp.iter().zip(&rm).enumerate() {
            col[o + i] = (a - b) / (2.0 * h);
        }
        Some(col)
    }

    fn scale(&self, x: &[f64], j: usize) -> f64 {
        match j {
            j if j < 8 => x[j].abs().max(1e-3),
            j if (j - 8) % NUISANCE == 0 => 1.0,
            _ => 0.01,
        }
    }
}

struct GnOutcome {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
    cost_history: Vec<f64>,
    correlation: Vec<Vec<f64>>,
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Bound-projected damped Gauss-Newton with backtracking, in scaled
/// variables. `names` labels the leading model parameters; only those are
/// checked for excitation and reported in the correlation matrix.
fn gauss_newton<P: Lsq>(
    prob: &P,
    x0: &[f64],
    bounds: &[(f64, f64)],
    names: &[&str],
    opts: &FitOptions,
) -> Result<GnOutcome, SysIdError> {
    let n = prob.dim();
    let np = names.len();
    let project = |x: &mut Vec<f64>| {
        for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let mut r = prob
        .residuals(&x)
        .ok_or_else(|| SysIdError::Dataset("model simulation fails at the initial guess".into()))?;
    let m = r.len();
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    let mut jz = DMatrix::zeros(m, n);
    for it in 0..=opts.max_iterations {
        let scale: Vec<f64> = (0..n).map(|j| prob.scale(&x, j)).collect();
        let cols: Vec<Option<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|j| prob.column(&x, j, opts.fd_step * scale[j]))
            .collect();
        jz = DMatrix::zeros(m, n);
        for (j, c) in cols.into_iter().enumerate() {
            let c = c.ok_or_else(|| SysIdError::Dataset("model simulation failed in the Jacobian".into()))?;
            for i in 0..m {
                jz[(i, j)] = c[i] * scale[j];
            }
        }
        if it == 0 {
            for j in 0..np {
                let s = jz.column(j).norm() / (m as f64).sqrt();
                if !(s >= opts.excitation_threshold) {
                    return Err(SysIdError::InsufficientExcitation {
                        parameter: names[j].to_string(),
                        sensitivity: s,
                    });
                }
            }
        }
        if it == opts.max_iterations {
            break;
        }
        let rv = DVector::from_vec(r.clone());
        let mut hmat = jz.tr_mul(&jz);
        let g = jz.tr_mul(&rv);
        let mu = opts.damping * hmat.trace() / n as f64;
        for j in 0..n {
            hmat[(j, j)] += mu;
        }
        let Some(ch) = hmat.cholesky() else {
            break;
        };
        let dz = ch.solve(&(-&g));
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut xn: Vec<f64> = (0..n).map(|j| x[j] + alpha * dz[j] * scale[j]).collect();
            project(&mut xn);
            if let Some(rn) = prob.residuals(&xn) {
                let cn = cost_of(&rn);
                if cn.is_finite() && cn < cost {
                    accepted = Some((xn, rn, cn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        iterations = it + 1;
        let Some((xn, rn, cn)) = accepted else {
            // No decrease along the Gauss-Newton direction: stationary to
            // working precision.
            converged = g.norm() <= 1e-6 * (1.0 + cost).sqrt() * (m as f64).sqrt() || cost <= 1e-20;
            break;
        };
        let rel = (cost - cn) / cost.max(1e-300);
        x = xn;
        r = rn;
        cost = cn;
        history.push(cost);
        if rel < opts.tolerance || cost <= 1e-24 {
            converged = true;
            break;
        }
    }
    let cov = jz
        .tr_mul(&jz)
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    let correlation = (0..np)
        .map(|i| (0..np).map(|j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).collect())
        .collect();
    x.truncate(np);
    Ok(GnOutcome {
        x,
        iterations,
        converged,
        cost_history: history,
        correlation,
    })
}

/// Fits `K_phi` and `K_theta` from roll and pitch. Uses only the attitude
/// channels, so the open-loop parameters cannot influence the result.
pub fn fit_closed_loop(train: &SysIdDataset, initial: &ModelParameters, opts: &FitOptions) -> Result<FitResult, SysIdError> {
    train.check()?;
    opts.validate()?;
    let prob = ClosedLoopProblem {
        data: train,
        w: channel_weights(train, &[0, 1]),
        opts: *opts,
    };
    let x0 = initial.closed_loop();
    let bounds = [(1e-6, f64::INFINITY); 2];
    let out = gauss_newton(&prob, &x0, &bounds, &model::CLOSED_LOOP_NAMES, opts)?;
    Ok(result(&model::CLOSED_LOOP_NAMES, &x0, out))
}

/// Bounds of the open-loop parameters, in [`model::OPEN_LOOP_NAMES`] order.
pub fn open_loop_bounds() -> [(f64, f64); 8] {
    let pos = (1e-8, f64::INFINITY);
    [pos, pos, pos, pos, (f64::NEG_INFINITY, f64::INFINITY), pos, pos, (50.0, 300.0)]
}

/// Fits the eight open-loop parameters from airspeed, flight path angle and
/// body accelerations, holding the attitude constants of `initial`. The
/// initial airspeed and flight path angle of every segment are estimated
/// alongside.
pub fn fit_open_loop(train: &SysIdDataset, initial: &ModelParameters, opts: &FitOptions) -> Result<FitResult, SysIdError> {
    train.check()?;
    opts.validate()?;
    initial.validate()?;
    let prob = OpenLoopProblem {
        data: train,
        base: *initial,
        w: channel_weights(train, &OPEN_CHANNELS),
        segs: segments(train.samples.len(), opts),
        opts: *opts,
    };
    let p0 = initial.open_loop();
    let mut x0 = p0.to_vec();
    x0.resize(prob.dim(), 0.0);
    let mut bounds = open_loop_bounds().to_vec();
    bounds.resize(prob.dim(), (f64::NEG_INFINITY, f64::INFINITY));
    let out = gauss_newton(&prob, &x0, &bounds, &model::OPEN_LOOP_NAMES, opts)?;
    Ok(result(&model::OPEN_LOOP_NAMES, &p0, out))
}

fn result(names: &[&str], x0: &[f64], out: GnOutcome) -> FitResult {
    FitResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        values: out.x,
        initial: x0.to_vec(),
        iterations: out.iterations,
        converged: out.converged,
        cost_history: out.cost_history,
        correlation: out.correlation,
        validation_rmse: None,
    }
}

/// Simulates the full model over the validation commands from the first
/// recorded state and reports the RMSE of each output.
pub fn validate_model(params: &ModelParameters, validation: &SysIdDataset, substeps: usize) -> Result<RmseSet, SysIdError> {
    validation.check()?;
    params.validate()?;
    let h = 1.0 / SAMPLE_RATE / substeps.max(1) as f64;
    let mut x = validation.samples[0].initial_state();
    let mut sq = [0.0; 6];
    for (i, m) in validation.samples.iter().enumerate() {
        if i > 0 {
            let prev = &validation.samples[i - 1];
            for _ in 0..substeps.max(1) {
                x = model::rk4_step(&x, &prev.command, &prev.wind, h, params)?;
            }
        }
        let (ax, az) = accels(&x, params);
        let sim = [x.phi, x.theta, x.v_a, x.gamma_a, ax, az];
        for c in 0..6 {
            sq[c] += (sim[c] - m.output(c)).powi(2);
        }
    }
    let n = validation.samples.len() as f64;
    Ok(RmseSet::from_array(sq.map(|s| (s / n).sqrt())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysIdReport {
    pub closed_loop: FitResult,
    pub open_loop: FitResult,
    /// `initial` with both fitted subsets substituted.
    pub params: ModelParameters,
    pub validation_rmse: RmseSet,
    pub train_samples: usize,
    pub validation_samples: usize,
}

impl SysIdReport {
    /// All ten fitted values by name.
    pub fn fitted(&self) -> BTreeMap<String, f64> {
        self.closed_loop
            .names
            .iter()
            .chain(&self.open_loop.names)
            .cloned()
            .zip(self.closed_loop.values.iter().chain(&self.open_loop.values).copied())
            .collect()
    }
}

/// The decoupled procedure: split, fit the attitude constants, fit the
/// open-loop set with them held, validate the combined model.
pub fn identify(data: &SysIdDataset, initial: &ModelParameters, opts: &FitOptions) -> Result<SysIdReport, SysIdError> {
    data.check()?;
    let (train, val) = data.split();
    let mut closed = fit_closed_loop(&train, initial, opts)?;
    let mut p = *initial;
    p.set_closed_loop(&closed.values);
    closed.validation_rmse = Some(validate_model(&p, &val, opts.substeps)?);
    let mut open = fit_open_loop(&train, &p, opts)?;
    p.set_open_loop(&open.values);
    let rmse = validate_model(&p, &val, opts.substeps)?;
    open.validation_rmse = Some(rmse);
    Ok(SysIdReport {
        closed_loop: closed,
        open_loop: open,
        params: p,
        validation_rmse: rmse,
        train_samples: train.samples.len(),
        validation_samples: val.samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_rk4_matches_the_full_integrator() {
        let p = ModelParameters::default();
        let x = model::trim(&p, 22.0, 0.0, 0.0).unwrap().state;
        let c = ControlCommand::new(0.3, 0.1, 0.5);
        let y = model::rk4_step(&x, &c, &WindVector::ZERO, 0.0125, &p).unwrap();
        assert_eq!(y.phi, lag_rk4(x.phi, 0.3, p.k_phi, 0.0125));
        assert_eq!(y.theta, lag_rk4(x.theta, 0.1, p.k_theta, 0.0125));
    }

    #[test]
    fn segments_cover_the_samples() {
        let opts = FitOptions {
            segment_duration: 4.0,
            ..FitOptions::default()
        };
        let s = segments(1000, &opts);
        assert_eq!(s[0], (0, 160));
        assert!(s.windows(2).all(|w| w[0].1 == w[1].0));
        assert_eq!(s.last().unwrap().1, 1000);
    }

    #[test]
    fn envelope_violation_in_spec_is_reported() {
        let mut spec = ManeuverSpec::standard();
        spec.segments.insert(
            1,
            Maneuver::Doublet {
                axis: Axis::Roll,
                amplitude: 1.0,
                unit: 1.0,
            },
        );
        let err = generate_maneuvers(&ModelParameters::default(), &spec).unwrap_err();
        assert!(matches!(err, SysIdError::Envelope { .. }), "{err}");
    }
}
