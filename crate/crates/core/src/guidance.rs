//! Closed-loop guidance policies: CR-MPC, MPCC and a lookahead/PI baseline.
//!
//! Each policy maps the measured state, the wind estimate and the reference
//! path to one command per guidance tick. The MPC policies run one real-time
//! iteration per query, warm-started from the shifted previous solution.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, AircraftState, ControlCommand, ModelError, ModelParameters, WindVector};
use crate::ocp::{assemble, wrap_angle, FlightEnvelope, Mode, OcpError, OcpSpec, StageWeights, PSI_DOT};
use crate::path::ArcLengthPath;
use crate::solver::{cold_start, rti_step, shift_warm_start, OcpSolution, SolverOptions};

/// Guidance tick length, seconds.
pub const GUIDANCE_PERIOD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "cr-mpc")]
    CrMpc,
    #[serde(rename = "mpcc")]
    Mpcc,
    #[serde(rename = "lookahead")]
    Lookahead,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [Self::CrMpc, Self::Mpcc, Self::Lookahead];

    pub fn name(&self) -> &'static str {
        match self {
            Self::CrMpc => "cr-mpc",
            Self::Mpcc => "mpcc",
            Self::Lookahead => "lookahead",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, GuidanceError> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            GuidanceError::Config(format!(
                "unknown controller `{name}`; valid controllers: cr-mpc, mpcc, lookahead"
            ))
        })
    }

    pub fn mode(&self) -> Option<Mode> {
        match self {
            Self::CrMpc => Some(Mode::CrMpc),
            Self::Mpcc => Some(Mode::Mpcc),
            Self::Lookahead => None,
        }
    }
}

/// Gains of the baseline's longitudinal PI loops. These are simulation
/// tunings, not published values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidGains {
    /// Throttle per m/s of airspeed error.
    pub airspeed_kp: f64,
    pub airspeed_ki: f64,
    /// Integrator bound, m/s * s.
    pub airspeed_i_max: f64,
    /// Pitch (rad) per meter of altitude error.
    pub altitude_kp: f64,
    pub altitude_ki: f64,
    /// Integrator bound, m * s.
    pub altitude_i_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            airspeed_kp: 0.08,
            airspeed_ki: 0.02,
            airspeed_i_max: 20.0,
            altitude_kp: 0.03,
            altitude_ki: 0.004,
            altitude_i_max: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Shooting intervals N.
    pub horizon: usize,
    /// Shooting interval length, seconds.
    pub dt: f64,
    /// Horizon length T_f; must equal `horizon * dt`.
    pub horizon_time: f64,
    pub weights: StageWeights,
    pub envelope: FlightEnvelope,
    /// Prediction model (the plant may differ).
    pub params: ModelParameters,
    /// CR-MPC reference path rate, m/s.
    pub psi_dot_ref: f64,
    /// Baseline lookahead time, seconds.
    pub lookahead_time: f64,
    /// Baseline airspeed setpoint, m/s.
    pub airspeed_ref: f64,
    pub pid: PidGains,
    /// Extra margin of the local closest-point window, meters.
    pub window_margin: f64,
    /// Airspeed back-off of the predicted soft bounds, m/s.
    pub va_margin: f64,
    /// Angle-of-attack back-off of the predicted soft bounds, rad.
    pub alpha_margin: f64,
    #[serde(skip)]
    pub solver: SolverOptions,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::CrMpc,
            horizon: 50,
            dt: 0.1,
            horizon_time: 5.0,
            weights: StageWeights::default(),
            envelope: FlightEnvelope::default(),
            params: ModelParameters::default(),
            psi_dot_ref: 25.0,
            lookahead_time: 4.0,
            airspeed_ref: 21.0,
            pid: PidGains::default(),
            window_margin: 5.0,
            va_margin: 0.5,
            alpha_margin: 0.5f64.to_radians(),
            solver: SolverOptions::default(),
        }
    }
}

impl ControllerConfig {
    pub fn with_kind(kind: ControllerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: String| Err(GuidanceError::Config(m));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        for (name, v) in [
            ("dt", self.dt),
            ("horizon_time", self.horizon_time),
            ("lookahead_time", self.lookahead_time),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let tf = self.horizon as f64 * self.dt;
        if (tf - self.horizon_time).abs() > 1e-9 * self.horizon_time.max(1.0) {
            return bad(format!(
                "horizon * dt = {} * {} = {tf} does not match horizon_time = {}",
                self.horizon, self.dt, self.horizon_time
            ));
        }
        if !(self.psi_dot_ref >= 0.0) || !self.psi_dot_ref.is_finite() {
            return bad(format!("psi_dot_ref must be non-negative, got {}", self.psi_dot_ref));
        }
        for (name, v) in [
            ("window_margin", self.window_margin),
            ("va_margin", self.va_margin),
            ("alpha_margin", self.alpha_margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        let g = &self.pid;
        let gains = [
            g.airspeed_kp,
            g.airspeed_ki,
            g.airspeed_i_max,
            g.altitude_kp,
            g.altitude_ki,
            g.altitude_i_max,
        ];
        if gains.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("PID gains and integrator bounds must be finite and non-negative".into());
        }
        self.weights.validate()?;
        self.envelope.validate()?;
        self.prediction_envelope().validate()?;
        self.params.validate()?;
        // Real-axis stability limit of classic RK4 on the fastest first-order lag.
        let fastest = self.params.k_phi.max(self.params.k_theta).max(1.0 / self.params.tau_t);
        if self.dt * fastest > 2.78 {
            return bad(format!(
                "dt = {} s exceeds the integrator stability limit {:.3} s of the model lags",
                self.dt,
                2.78 / fastest
            ));
        }
        if !(self.envelope.va_min..=self.envelope.va_max).contains(&self.airspeed_ref) {
            return bad(format!(
                "airspeed_ref {} outside the envelope [{}, {}]",
                self.airspeed_ref, self.envelope.va_min, self.envelope.va_max
            ));
        }
        Ok(())
    }

    /// Envelope handed to the OCP: the soft bounds shrunk by the margins.
    pub fn prediction_envelope(&self) -> FlightEnvelope {
        let mut e = self.envelope;
        e.va_min += self.va_margin;
        e.va_max -= self.va_margin;
        e.alpha_min += self.alpha_margin;
        e.alpha_max -= self.alpha_margin;
        e
    }

    /// Half-width of the local closest-point search.
    pub fn search_window(&self) -> f64 {
        2.0 * self.envelope.psi_dot_max * GUIDANCE_PERIOD + self.window_margin
    }
}

#[derive(Clone, Debug, Default)]
pub struct ControllerState {
    pub prev: Option<OcpSolution>,
    /// Closest parameter found on the previous query.
    pub psi_hint: Option<f64>,
    pub airspeed_integral: f64,
    pub altitude_integral: f64,
    pub queries: u64,
}

/// Output of one guidance query.
#[derive(Clone, Debug)]
pub struct QueryResult {
    pub command: ControlCommand,
    /// MPCC path-rate command.
    pub psi_dot_c: Option<f64>,
    pub psi_star: f64,
    pub solution: Option<OcpSolution>,
    /// The solver failed and the shifted previous command was used.
    pub degraded: bool,
    /// Wall time of the query, seconds.
    pub solve_time: f64,
}

fn closest(cs: &mut ControllerState, path: &ArcLengthPath, x: &AircraftState, cfg: &ControllerConfig) -> f64 {
    let pos = x.position();
    let psi = match cs.psi_hint {
        Some(h) => path.closest_param_local(&pos, h, cfg.search_window()),
        None => path.closest_param_global(&pos),
    };
    cs.psi_hint = Some(psi);
    psi
}

fn mpc_query(
    mode: Mode,
    cs: &mut ControllerState,
    x: &AircraftState,
    wind: &WindVector,
    path: &Arc<ArcLengthPath>,
    cfg: &ControllerConfig,
) -> Result<QueryResult, GuidanceError> {
    let start = Instant::now();
    x.validate()?;
    let psi_star = closest(cs, path, x, cfg);
    cs.queries += 1;
    let mut nlp = assemble(OcpSpec {
        mode,
        x_init: *x,
        wind: *wind,
        path: path.clone(),
        psi_star,
        weights: cfg.weights,
        envelope: cfg.prediction_envelope(),
        params: cfg.params,
        psi_dot_ref: (mode == Mode::CrMpc).then_some(cfg.psi_dot_ref),
        prev_controls: None,
        horizon: cfg.horizon,
        dt: cfg.dt,
    })?;
    let shifted = cs
        .prev
        .as_ref()
        .and_then(|p| shift_warm_start(p, &nlp).ok());
    let shifted_ok = shifted.is_some();
    let guess = match shifted {
        Some(g) => g,
        None => cold_start(&nlp).map_err(|e| GuidanceError::Config(format!("cold start failed: {e}")))?,
    };
    // Slew is measured against the previous plan stage by stage; a cold
    // start uses its own (trim) controls instead of zeros.
    let slew = match (&cs.prev, shifted_ok) {
        (Some(p), true) => p.traj.u.clone(),
        _ => guess.u.clone(),
    };
    nlp.set_slew_reference(&slew)?;
    let guess = OcpSolution::from_guess(&nlp, guess);
    let solved = rti_step(&nlp, &guess, &cfg.solver)
        .ok()
        .filter(|s| s.traj.u.iter().flatten().chain(s.traj.x.iter().flatten()).all(|v| v.is_finite()));
    let (mut u, solution, degraded) = match solved {
        Some(sol) => (sol.first_control().to_vec(), sol, false),
        None => {
            let mut g = guess;
            g.degraded = true;
            (g.traj.u[0].clone(), g, true)
        }
    };
    cfg.envelope.clamp_command(mode, &mut u);
    cs.prev = Some(solution.clone());
    Ok(QueryResult {
        command: ControlCommand::from_slice(&u),
        psi_dot_c: (mode == Mode::Mpcc).then(|| u[PSI_DOT]),
        psi_star,
        solution: Some(solution),
        degraded,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// One CR-MPC query. Solver failures return the shifted previous plan's
/// first command, flagged degraded.
pub fn cr_mpc_query(
    cs: &mut ControllerState,
    x: &AircraftState,
    wind: &WindVector,
    path: &Arc<ArcLengthPath>,
    cfg: &ControllerConfig,
) -> Result<QueryResult, GuidanceError> {
    mpc_query(Mode::CrMpc, cs, x, wind, path, cfg)
}

/// One MPCC query; also returns the path-rate command.
pub fn mpcc_query(
    cs: &mut ControllerState,
    x: &AircraftState,
    wind: &WindVector,
    path: &Arc<ArcLengthPath>,
    cfg: &ControllerConfig,
) -> Result<QueryResult, GuidanceError> {
    mpc_query(Mode::Mpcc, cs, x, wind, path, cfg)
}

/// PI step with conditional integration: the integrator only moves when the
/// output is unsaturated or the error drives it back inside.
fn pi_step(integral: &mut f64, err: f64, kp: f64, ki: f64, i_max: f64, base: f64, lo: f64, hi: f64) -> f64 {
    let raw = base + kp * err + ki * *integral;
    let saturated_high = raw > hi && err > 0.0;
    let saturated_low = raw < lo && err < 0.0;
    if !saturated_high && !saturated_low {
        *integral = (*integral + err * GUIDANCE_PERIOD).clamp(-i_max, i_max);
    }
    (base + kp * err + ki * *integral).clamp(lo, hi)
}

/// Lookahead baseline: L1-style lateral law toward a point `lookahead_time`
/// groundspeed-seconds ahead of the closest point, PI airspeed-to-throttle
/// and PI altitude-to-pitch loops.
pub fn lookahead_query(
    cs: &mut ControllerState,
    x: &AircraftState,
    wind: &WindVector,
    path: &ArcLengthPath,
    cfg: &ControllerConfig,
) -> Result<QueryResult, GuidanceError> {
    let start = Instant::now();
    x.validate()?;
    let psi_star = closest(cs, path, x, cfg);
    cs.queries += 1;
    let env = &cfg.envelope;
    let g = cfg.params.g;

    let vg = x.ground_velocity(wind);
    let vgh = vg[0].hypot(vg[1]).max(1.0);
    let target = path.position(path.wrap(psi_star + cfg.lookahead_time * vgh));
    let los = [target[0] - x.n, target[1] - x.e];
    let dist = los[0].hypot(los[1]).max(1e-3);
    let eta = wrap_angle(los[1].atan2(los[0]) - vg[1].atan2(vg[0])).clamp(-FRAC_PI_2, FRAC_PI_2);
    let a_lat = 2.0 * vgh * vgh * eta.sin() / dist;
    let phi_c = (a_lat / g).atan().clamp(env.phi_c_min, env.phi_c_max);

    let trim = model::trim(&cfg.params, cfg.airspeed_ref, 0.0, 0.0)?;
    let (pos, tan) = path.eval_generic(path.wrap(psi_star));
    let tnorm = (tan[0] * tan[0] + tan[1] * tan[1] + tan[2] * tan[2]).sqrt();
    let gamma_path = (-tan[2] / tnorm).clamp(-1.0, 1.0).asin();
    // Altitude error is positive when the aircraft is below the path.
    let alt_err = x.d - pos[2];
    let p = &cfg.pid;
    let theta_c = pi_step(
        &mut cs.altitude_integral,
        alt_err,
        p.altitude_kp,
        p.altitude_ki,
        p.altitude_i_max,
        trim.state.theta + gamma_path,
        env.theta_c_min,
        env.theta_c_max,
    );
    let delta_tc = pi_step(
        &mut cs.airspeed_integral,
        cfg.airspeed_ref - x.v_a,
        p.airspeed_kp,
        p.airspeed_ki,
        p.airspeed_i_max,
        trim.command.delta_tc,
        env.delta_tc_min,
        env.delta_tc_max,
    );
    Ok(QueryResult {
        command: ControlCommand::new(phi_c, theta_c, delta_tc),
        psi_dot_c: None,
        psi_star,
        solution: None,
        degraded: false,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// A controller instance: configuration, path and mutable query state.
#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    pub path: Arc<ArcLengthPath>,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(config: ControllerConfig, path: Arc<ArcLengthPath>) -> Result<Self, GuidanceError> {
        config.validate()?;
        Ok(Self {
            config,
            path,
            state: ControllerState::default(),
        })
    }

    pub fn query(&mut self, x: &AircraftState, wind: &WindVector) -> Result<QueryResult, GuidanceError> {
        let (cs, cfg) = (&mut self.state, &self.config);
        match cfg.kind {
            ControllerKind::CrMpc => cr_mpc_query(cs, x, wind, &self.path, cfg),
            ControllerKind::Mpcc => mpcc_query(cs, x, wind, &self.path, cfg),
            ControllerKind::Lookahead => lookahead_query(cs, x, wind, &self.path, cfg),
        }
    }

    pub fn reset(&mut self) {
        self.state = ControllerState::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_mismatch_names_the_fields() {
        let cfg = ControllerConfig {
            horizon: 40,
            ..ControllerConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("horizon") && msg.contains("dt") && msg.contains("horizon_time"), "{msg}");
    }

    #[test]
    fn default_config_is_valid() {
        for k in ControllerKind::ALL {
            ControllerConfig::with_kind(k).validate().unwrap();
        }
        assert_eq!(ControllerConfig::default().search_window(), 14.0);
    }

    #[test]
    fn unstable_interval_is_rejected() {
        let cfg = ControllerConfig {
            horizon: 10,
            dt: 0.5,
            ..ControllerConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("stability"));
    }

    #[test]
    fn controller_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(ControllerKind::from_name(k.name()).unwrap(), k);
        }
        let err = ControllerKind::from_name("pid").unwrap_err().to_string();
        assert!(err.contains("cr-mpc") && err.contains("lookahead"));
    }

    #[test]
    fn pi_integrator_stops_at_saturation() {
        let mut i = 0.0;
        let out = pi_step(&mut i, 5.0, 1.0, 1.0, 100.0, 0.5, 0.0, 1.0);
        assert_eq!(out, 1.0);
        assert_eq!(i, 0.0);
        let out = pi_step(&mut i, -0.1, 1.0, 1.0, 100.0, 0.5, 0.0, 1.0);
        assert!(out < 1.0 && i < 0.0);
    }

    #[test]
    fn pi_integrator_is_bounded() {
        let mut i = 0.0;
        for _ in 0..1000 {
            pi_step(&mut i, 1.0, 0.0, 1e-6, 2.0, 0.0, -1.0, 1.0);
        }
        assert_eq!(i, 2.0);
    }
}
