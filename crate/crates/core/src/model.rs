//! Control-augmented fixed-wing model.
//!
//! Nine states: NED position, roll and pitch regulated by the autopilot as
//! first-order lags, air-relative heading, airspeed, air-relative flight path
//! angle and a first-order virtual throttle. Commands are roll, pitch and
//! throttle setpoints. Side-slip is assumed regulated to zero, which gives
//! `alpha = theta - gamma_a`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{Dual, Real};

pub const NX: usize = 9;
pub const NU: usize = 3;

/// State vector layout.
pub mod idx {
    pub const N: usize = 0;
    pub const E: usize = 1;
    pub const D: usize = 2;
    pub const PHI: usize = 3;
    pub const THETA: usize = 4;
    pub const CHI: usize = 5;
    pub const VA: usize = 6;
    pub const GAMMA: usize = 7;
    pub const DELTA_T: usize = 8;
}

/// Airspeed below which the dynamics are treated as undefined.
pub const MIN_AIRSPEED: f64 = 0.1;
/// Flight path angle magnitude at which the dynamics are treated as undefined.
pub const MAX_FLIGHT_PATH_ANGLE: f64 = 89.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid aircraft state: {0}")]
    InvalidState(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("trim solve failed: {0}")]
    TrimFailed(String),
    #[error("bad parameter file: {0}")]
    Parameters(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AircraftState {
    pub n: f64,
    pub e: f64,
    pub d: f64,
    pub phi: f64,
    pub theta: f64,
    pub chi_a: f64,
    pub v_a: f64,
    pub gamma_a: f64,
    pub delta_t: f64,
}

impl AircraftState {
    pub fn to_array(&self) -> [f64; NX] {
        [
            self.n,
            self.e,
            self.d,
            self.phi,
            self.theta,
            self.chi_a,
            self.v_a,
            self.gamma_a,
            self.delta_t,
        ]
    }

    pub fn from_array(x: &[f64; NX]) -> Self {
        Self {
            n: x[0],
            e: x[1],
            d: x[2],
            phi: x[3],
            theta: x[4],
            chi_a: x[5],
            v_a: x[6],
            gamma_a: x[7],
            delta_t: x[8],
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let mut a = [0.0; NX];
        a.copy_from_slice(&x[..NX]);
        Self::from_array(&a)
    }

    pub fn position(&self) -> [f64; 3] {
        [self.n, self.e, self.d]
    }

    /// Checks the invariants under which the dynamics are defined.
    pub fn validate(&self) -> Result<(), ModelError> {
        check_state(&self.to_array())
    }

    /// Inertial velocity (NED) for the given wind.
    pub fn ground_velocity(&self, wind: &WindVector) -> [f64; 3] {
        let (sg, cg) = self.gamma_a.sin_cos();
        let (sc, cc) = self.chi_a.sin_cos();
        [
            self.v_a * cg * cc + wind.w_n,
            self.v_a * cg * sc + wind.w_e,
            -self.v_a * sg + wind.w_d,
        ]
    }

    pub fn ground_speed(&self, wind: &WindVector) -> f64 {
        let v = self.ground_velocity(wind);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
}

pub(crate) fn check_state(x: &[f64; NX]) -> Result<(), ModelError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidState("non-finite component".into()));
    }
    if x[idx::VA] <= MIN_AIRSPEED {
        return Err(ModelError::InvalidState(format!(
            "airspeed {:.4} m/s at or below {MIN_AIRSPEED} m/s",
            x[idx::VA]
        )));
    }
    if x[idx::GAMMA].abs() >= MAX_FLIGHT_PATH_ANGLE {
        return Err(ModelError::InvalidState(format!(
            "flight path angle {:.4} rad outside (-89 deg, 89 deg)",
            x[idx::GAMMA]
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub phi_c: f64,
    pub theta_c: f64,
    pub delta_tc: f64,
}

impl ControlCommand {
    pub fn new(phi_c: f64, theta_c: f64, delta_tc: f64) -> Self {
        Self {
            phi_c,
            theta_c,
            delta_tc,
        }
    }

    pub fn to_array(&self) -> [f64; NU] {
        [self.phi_c, self.theta_c, self.delta_tc]
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self::new(u[0], u[1], u[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct WindVector {
    pub w_n: f64,
    pub w_e: f64,
    pub w_d: f64,
}

impl WindVector {
    pub const ZERO: WindVector = WindVector {
        w_n: 0.0,
        w_e: 0.0,
        w_d: 0.0,
    };

    pub fn new(w_n: f64, w_e: f64, w_d: f64) -> Self {
        Self { w_n, w_e, w_d }
    }

    pub fn magnitude(&self) -> f64 {
        (self.w_n * self.w_n + self.w_e * self.w_e + self.w_d * self.w_d).sqrt()
    }

    /// Same wind with the vertical component removed.
    pub fn horizontal(&self) -> Self {
        Self::new(self.w_n, self.w_e, 0.0)
    }
}

/// Aerodynamic, propulsive and autopilot-response parameters.
///
/// Field names in serialized form follow the usual symbols (`C_L0`, `K_phi`,
/// ...), so a parameter file is a flat list of `symbol = value` lines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParameters {
    #[serde(rename = "K_phi")]
    pub k_phi: f64,
    #[serde(rename = "K_theta")]
    pub k_theta: f64,
    #[serde(rename = "tau_T")]
    pub tau_t: f64,
    #[serde(rename = "C_L0")]
    pub c_l0: f64,
    #[serde(rename = "C_L1")]
    pub c_l1: f64,
    #[serde(rename = "C_D0")]
    pub c_d0: f64,
    #[serde(rename = "C_D1")]
    pub c_d1: f64,
    #[serde(rename = "C_D2")]
    pub c_d2: f64,
    #[serde(rename = "C_T")]
    pub c_t: f64,
    pub k_m: f64,
    pub m: f64,
    pub g: f64,
    pub rho: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "S_p")]
    pub s_p: f64,
}

impl Default for ModelParameters {
    /// Identified fit values with sea-level density.
    fn default() -> Self {
        Self {
            k_phi: 2.0316,
            k_theta: 2.1498,
            tau_t: 0.1161,
            c_l0: 0.0917,
            c_l1: 2.7493,
            c_d0: 0.0362,
            c_d1: 0.0868,
            c_d2: 0.4459,
            c_t: 0.0233,
            k_m: 143.3052,
            m: 6.65,
            g: 9.81,
            rho: 1.225,
            s: 1.02,
            s_p: 0.0856,
        }
    }
}

/// Names of the eight open-loop parameters, in fitting order.
pub const OPEN_LOOP_NAMES: [&str; 8] = ["tau_T", "C_L0", "C_L1", "C_D0", "C_D1", "C_D2", "C_T", "k_m"];
/// Names of the two closed-loop parameters, in fitting order.
pub const CLOSED_LOOP_NAMES: [&str; 2] = ["K_phi", "K_theta"];

impl ModelParameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("m", self.m),
            ("g", self.g),
            ("rho", self.rho),
            ("S", self.s),
            ("S_p", self.s_p),
            ("tau_T", self.tau_t),
            ("K_phi", self.k_phi),
            ("K_theta", self.k_theta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Parameters(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.k_m > 0.0) {
            return Err(ModelError::Parameters(format!("k_m must be positive, got {}", self.k_m)));
        }
        Ok(())
    }

    pub fn open_loop(&self) -> [f64; 8] {
        [
            self.tau_t, self.c_l0, self.c_l1, self.c_d0, self.c_d1, self.c_d2, self.c_t, self.k_m,
        ]
    }

    pub fn set_open_loop(&mut self, p: &[f64]) {
        self.tau_t = p[0];
        self.c_l0 = p[1];
        self.c_l1 = p[2];
        self.c_d0 = p[3];
        self.c_d1 = p[4];
        self.c_d2 = p[5];
        self.c_t = p[6];
        self.k_m = p[7];
    }

    pub fn closed_loop(&self) -> [f64; 2] {
        [self.k_phi, self.k_theta]
    }

    pub fn set_closed_loop(&mut self, p: &[f64]) {
        self.k_phi = p[0];
        self.k_theta = p[1];
    }

    /// Looks up a parameter by its symbol.
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "K_phi" => self.k_phi,
            "K_theta" => self.k_theta,
            "tau_T" => self.tau_t,
            "C_L0" => self.c_l0,
            "C_L1" => self.c_l1,
            "C_D0" => self.c_d0,
            "C_D1" => self.c_d1,
            "C_D2" => self.c_d2,
            "C_T" => self.c_t,
            "k_m" => self.k_m,
            "m" => self.m,
            "g" => self.g,
            "rho" => self.rho,
            "S" => self.s,
            "S_p" => self.s_p,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, v: f64) -> Result<(), ModelError> {
        let slot = match name {
            "K_phi" => &mut self.k_phi,
            "K_theta" => &mut self.k_theta,
            "tau_T" => &mut self.tau_t,
            "C_L0" => &mut self.c_l0,
            "C_L1" => &mut self.c_l1,
            "C_D0" => &mut self.c_d0,
            "C_D1" => &mut self.c_d1,
            "C_D2" => &mut self.c_d2,
            "C_T" => &mut self.c_t,
            "k_m" => &mut self.k_m,
            "m" => &mut self.m,
            "g" => &mut self.g,
            "rho" => &mut self.rho,
            "S" => &mut self.s,
            "S_p" => &mut self.s_p,
            _ => return Err(ModelError::Parameters(format!("unknown parameter `{name}`"))),
        };
        *slot = v;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ModelError> {
        let p: Self = toml::from_str(s).map_err(|e| ModelError::Parameters(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat f64 table always serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceSet {
    pub lift: f64,
    pub drag: f64,
    pub thrust: f64,
    pub alpha: f64,
    pub v_inf: f64,
    /// The drag polynomial went negative (only possible far outside the
    /// trusted angle-of-attack range). The raw value is still reported.
    pub negative_drag: bool,
}

pub fn alpha_of(state: &AircraftState) -> f64 {
    state.theta - state.gamma_a
}

/// Air-relative flight path angle from the measured sink rate.
pub fn gamma_from_kinematics(d_dot: f64, w_d: f64, v_a: f64) -> Result<f64, ModelError> {
    if !(v_a > 0.0) {
        return Err(ModelError::Domain(format!("airspeed must be positive, got {v_a}")));
    }
    let s = -(d_dot - w_d) / v_a;
    if !(s.abs() <= 1.0) {
        return Err(ModelError::Domain(format!(
            "|(d_dot - w_d)/V_a| = {} exceeds 1",
            s.abs()
        )));
    }
    Ok(s.asin())
}

/// Lift, drag and thrust in generic arithmetic: `(L, D, T)`.
#[inline]
pub(crate) fn forces_generic<T: Real>(
    v_a: T,
    alpha: T,
    delta_t: T,
    p: &ModelParameters,
) -> (T, T, T) {
    let qs = v_a * v_a * (0.5 * p.rho * p.s);
    let lift = qs * (alpha * p.c_l1 + p.c_l0);
    let drag = qs * (alpha * alpha * p.c_d2 + alpha * p.c_d1 + p.c_d0);
    let v_inf = v_a * alpha.cos();
    let slip = -v_inf + p.k_m;
    let thrust = delta_t * (p.rho * p.s_p * p.c_t) * (v_inf + delta_t * slip) * slip;
    (lift, drag, thrust)
}

pub fn forces(state: &AircraftState, p: &ModelParameters) -> ForceSet {
    let alpha = alpha_of(state);
    let (lift, drag, thrust) = forces_generic(state.v_a, alpha, state.delta_t, p);
    ForceSet {
        lift,
        drag,
        thrust,
        alpha,
        v_inf: state.v_a * alpha.cos(),
        negative_drag: drag < 0.0,
    }
}

/// Body-frame specific forces `(a_x, a_z)` seen by the IMU.
pub fn imu_accels(f: &ForceSet, mass: f64) -> (f64, f64) {
    imu_generic(f.lift, f.drag, f.thrust, f.alpha, mass)
}

#[inline]
pub(crate) fn imu_generic<T: Real>(lift: T, drag: T, thrust: T, alpha: T, mass: f64) -> (T, T) {
    let (sa, ca) = (alpha.sin(), alpha.cos());
    let fx = (thrust * ca - drag) / mass;
    let fz = (thrust * sa + lift) / mass;
    (ca * fx + sa * fz, sa * fx - ca * fz)
}

/// Right-hand side of the control-augmented model in generic arithmetic.
/// Performs no validity checks.
#[inline]
pub fn dynamics_generic<T: Real>(
    x: &[T; NX],
    u: &[T; NU],
    w: &WindVector,
    p: &ModelParameters,
) -> [T; NX] {
    let phi = x[idx::PHI];
    let theta = x[idx::THETA];
    let chi = x[idx::CHI];
    let v_a = x[idx::VA];
    let gamma = x[idx::GAMMA];
    let delta_t = x[idx::DELTA_T];
    let alpha = theta - gamma;
    let (lift, drag, thrust) = forces_generic(v_a, alpha, delta_t, p);
    let (sg, cg) = (gamma.sin(), gamma.cos());
    let (sc, cc) = (chi.sin(), chi.cos());
    let (sa, ca) = (alpha.sin(), alpha.cos());
    let normal = thrust * sa + lift;
    [
        v_a * cg * cc + w.w_n,
        v_a * cg * sc + w.w_e,
        -(v_a * sg) + w.w_d,
        (u[0] - phi) * p.k_phi,
        (u[1] - theta) * p.k_theta,
        phi.sin() * normal / (v_a * cg * p.m),
        (thrust * ca - drag) / p.m - sg * p.g,
        (normal * phi.cos() - cg * (p.m * p.g)) / (v_a * p.m),
        (u[2] - delta_t) / p.tau_t,
    ]
}

pub fn continuous_dynamics(
    state: &AircraftState,
    cmd: &ControlCommand,
    wind: &WindVector,
    params: &ModelParameters,
) -> Result<[f64; NX], ModelError> {
    let x = state.to_array();
    check_state(&x)?;
    Ok(dynamics_generic(&x, &cmd.to_array(), wind, params))
}

/// One classical RK4 step with wind held constant. Every stage point is
/// checked against the state invariants.
pub fn rk4_generic<T: Real>(
    x: &[T; NX],
    u: &[T; NU],
    w: &WindVector,
    dt: f64,
    p: &ModelParameters,
) -> Result<[T; NX], ModelError> {
    let stage = |y: &[T; NX]| -> Result<[T; NX], ModelError> {
        check_state(&y.map(|v| v.re()))?;
        Ok(dynamics_generic(y, u, w, p))
    };
    let axpy = |a: &[T; NX], k: &[T; NX], h: f64| -> [T; NX] {
        let mut out = *a;
        for i in 0..NX {
            out[i] = a[i] + k[i] * h;
        }
        out
    };
    let k1 = stage(x)?;
    let k2 = stage(&axpy(x, &k1, 0.5 * dt))?;
    let k3 = stage(&axpy(x, &k2, 0.5 * dt))?;
    let k4 = stage(&axpy(x, &k3, dt))?;
    let mut out = *x;
    for i in 0..NX {
        out[i] = x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
    }
    Ok(out)
}

pub fn rk4_step(
    state: &AircraftState,
    cmd: &ControlCommand,
    wind: &WindVector,
    dt: f64,
    params: &ModelParameters,
) -> Result<AircraftState, ModelError> {
    if dt == 0.0 {
        state.validate()?;
        return Ok(*state);
    }
    let x = rk4_generic(&state.to_array(), &cmd.to_array(), wind, dt, params)?;
    Ok(AircraftState::from_array(&x))
}

/// Sensitivities of [`rk4_step`] with respect to state (`A`) and command (`B`),
/// exact up to round-off (forward-mode differentiation through the stages).
pub fn discrete_jacobians(
    state: &AircraftState,
    cmd: &ControlCommand,
    wind: &WindVector,
    dt: f64,
    params: &ModelParameters,
) -> Result<(SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>), ModelError> {
    let xs = state.to_array();
    let us = cmd.to_array();
    let x: [Dual<12>; NX] = std::array::from_fn(|i| Dual::variable(xs[i], i));
    let u: [Dual<12>; NU] = std::array::from_fn(|i| Dual::variable(us[i], NX + i));
    let next = rk4_generic(&x, &u, wind, dt, params)?;
    let a = SMatrix::<f64, NX, NX>::from_fn(|r, c| next[r].eps[c]);
    let b = SMatrix::<f64, NX, NU>::from_fn(|r, c| next[r].eps[NX + c]);
    Ok((a, b))
}

/// Radius of a coordinated level turn.
pub fn coordinated_turn_radius(v: f64, phi: f64, g: f64) -> Result<f64, ModelError> {
    if !(v > 0.0) {
        return Err(ModelError::Domain(format!("speed must be positive, got {v}")));
    }
    if phi == 0.0 || !(phi.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(ModelError::Domain(format!("roll {phi} rad gives no finite turn radius")));
    }
    Ok(v * v / (g * phi.abs().tan()))
}

/// Equilibrium of the longitudinal rows at a given airspeed, flight path
/// angle and bank angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trim {
    pub state: AircraftState,
    pub command: ControlCommand,
}

pub fn trim(p: &ModelParameters, v_a: f64, gamma_a: f64, phi: f64) -> Result<Trim, ModelError> {
    if !(v_a > MIN_AIRSPEED) {
        return Err(ModelError::TrimFailed(format!("airspeed {v_a} too low")));
    }
    // Unknowns: angle of attack and throttle. Residuals: dV/dt and dgamma/dt.
    let residual = |alpha: Dual<2>, dt: Dual<2>| {
        let va = Dual::<2>::constant(v_a);
        let (lift, drag, thrust) = forces_generic(va, alpha, dt, p);
        let r1 = (thrust * alpha.cos() - drag) / p.m - gamma_a.sin() * p.g;
        let r2 = ((thrust * alpha.sin() + lift) * phi.cos() - Dual::constant(gamma_a.cos() * p.m * p.g))
            / (v_a * p.m);
        (r1, r2)
    };
    let mut z = [0.05, 0.5];
    for _ in 0..50 {
        let (r1, r2) = residual(Dual::variable(z[0], 0), Dual::variable(z[1], 1));
        let j = nalgebra::Matrix2::new(r1.eps[0], r1.eps[1], r2.eps[0], r2.eps[1]);
        let r = nalgebra::Vector2::new(r1.re, r2.re);
        if r.norm() < 1e-13 {
            break;
        }
        let step = j
            .lu()
            .solve(&(-r))
            .ok_or_else(|| ModelError::TrimFailed("singular trim Jacobian".into()))?;
        // Keep Newton inside a sane region; the residuals are smooth there.
        z[0] += step[0].clamp(-0.1, 0.1);
        z[1] += step[1].clamp(-0.3, 0.3);
    }
    let (r1, r2) = residual(Dual::constant(z[0]), Dual::constant(z[1]));
    if (r1.re * r1.re + r2.re * r2.re).sqrt() > 1e-9 || !z[0].is_finite() {
        return Err(ModelError::TrimFailed(format!(
            "no equilibrium found at V_a = {v_a}, gamma = {gamma_a}, phi = {phi}"
        )));
    }
    if !(0.0..=1.0).contains(&z[1]) {
        return Err(ModelError::TrimFailed(format!(
            "equilibrium throttle {:.3} outside [0, 1] at V_a = {v_a}",
            z[1]
        )));
    }
    let state = AircraftState {
        phi,
        theta: gamma_a + z[0],
        v_a,
        gamma_a,
        delta_t: z[1],
        ..Default::default()
    };
    Ok(Trim {
        state,
        command: ControlCommand::new(phi, state.theta, z[1]),
    })
}

/// Convenience for the solver: state vector as an nalgebra column.
pub fn state_vector(s: &AircraftState) -> SVector<f64, NX> {
    SVector::<f64, NX>::from_column_slice(&s.to_array())
}
