//! Multiple-shooting least-squares OCP shared by CR-MPC and MPCC.
//!
//! Decision variables per stage `k`:
//!
//! * state node `x_k` (9 entries, plus the path parameter in MPCC mode),
//! * `v_k = [u_k, s_k]` for `1 <= k < N`, `v_0 = u_0`, `v_N = s_N`.
//!
//! `x_0` is pinned to the measured state, so stage 0 carries neither the
//! state error nor slack; the minimal slack of `x_0` is reported instead.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{Dual, Real};
use crate::model::{
    self, idx, AircraftState, ControlCommand, ModelError, ModelParameters, WindVector, NU, NX,
};
use crate::path::{ArcLengthPath, PathError};

/// Slack entries per stage, ordered `[s_V upper, s_alpha upper, s_V lower, s_alpha lower]`.
pub const NS: usize = 4;
/// Index of the path parameter in the MPCC state.
pub const PSI: usize = 9;
/// Index of the path-rate command in the MPCC control.
pub const PSI_DOT: usize = 3;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid OCP arguments: {0}")]
    Arguments(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "cr-mpc")]
    CrMpc,
    #[serde(rename = "mpcc")]
    Mpcc,
}

impl Mode {
    pub fn nx(&self) -> usize {
        match self {
            Mode::CrMpc => NX,
            Mode::Mpcc => NX + 1,
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            Mode::CrMpc => NU,
            Mode::Mpcc => NU + 1,
        }
    }

    /// Length of the state error vector.
    pub fn ny(&self) -> usize {
        match self {
            Mode::CrMpc => 5,
            Mode::Mpcc => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageWeights {
    pub q_n: f64,
    pub q_e: f64,
    pub q_d: f64,
    pub q_chi: f64,
    pub q_gamma: f64,
    pub b_phidot: f64,
    pub b_thetadot: f64,
    #[serde(rename = "b_deltaTdot")]
    pub b_delta_tdot: f64,
    pub s_alpha: f64,
    #[serde(rename = "s_Va")]
    pub s_va: f64,
    pub r_phi: f64,
    pub r_theta: f64,
    #[serde(rename = "r_deltaT")]
    pub r_delta_t: f64,
    pub r_psidot: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            q_n: 1.0,
            q_e: 1.0,
            q_d: 1.0,
            q_chi: 1.0,
            q_gamma: 1.0,
            b_phidot: 1.0,
            b_thetadot: 20.0,
            b_delta_tdot: 10.0,
            s_alpha: 1e4,
            s_va: 1e4,
            r_phi: 400.0,
            r_theta: 400.0,
            r_delta_t: 400.0,
            r_psidot: 0.1,
            lambda: 0.99,
            mu: 0.001,
        }
    }
}

impl StageWeights {
    pub fn validate(&self) -> Result<(), OcpError> {
        let all = [
            self.q_n,
            self.q_e,
            self.q_d,
            self.q_chi,
            self.q_gamma,
            self.b_phidot,
            self.b_thetadot,
            self.b_delta_tdot,
            self.s_alpha,
            self.s_va,
            self.r_phi,
            self.r_theta,
            self.r_delta_t,
            self.r_psidot,
            self.mu,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(OcpError::Arguments("weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(OcpError::Arguments(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Diagonal of `Q` at stage `k`; `mu` is dropped on the terminal stage.
    pub fn error_weights(&self, mode: Mode, terminal: bool) -> Vec<f64> {
        let mut w = vec![self.q_n, self.q_e, self.q_d, self.q_chi, self.q_gamma];
        if mode == Mode::Mpcc {
            w.push(if terminal { 0.0 } else { self.mu });
        }
        w
    }

    pub fn rate_weights(&self) -> [f64; 3] {
        [self.b_phidot, self.b_thetadot, self.b_delta_tdot]
    }

    /// Undiscounted diagonal of `R`.
    pub fn slew_weights(&self, mode: Mode) -> Vec<f64> {
        let mut w = vec![self.r_phi, self.r_theta, self.r_delta_t];
        if mode == Mode::Mpcc {
            w.push(self.r_psidot);
        }
        w
    }

    pub fn slack_weights(&self) -> [f64; NS] {
        [self.s_va, self.s_alpha, self.s_va, self.s_alpha]
    }
}

/// Admissible flight regime and command boxes. Angles in radians, speeds in m/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlightEnvelope {
    #[serde(rename = "ubar_Va")]
    pub va_min: f64,
    #[serde(rename = "bar_Va")]
    pub va_max: f64,
    #[serde(rename = "ubar_alpha")]
    pub alpha_min: f64,
    #[serde(rename = "bar_alpha")]
    pub alpha_max: f64,
    #[serde(rename = "ubar_phi_c")]
    pub phi_c_min: f64,
    #[serde(rename = "bar_phi_c")]
    pub phi_c_max: f64,
    #[serde(rename = "ubar_theta_c")]
    pub theta_c_min: f64,
    #[serde(rename = "bar_theta_c")]
    pub theta_c_max: f64,
    #[serde(rename = "ubar_deltaT_c")]
    pub delta_tc_min: f64,
    #[serde(rename = "bar_deltaT_c")]
    pub delta_tc_max: f64,
    #[serde(rename = "ubar_psidot_c")]
    pub psi_dot_min: f64,
    #[serde(rename = "bar_psidot_c")]
    pub psi_dot_max: f64,
}

impl Default for FlightEnvelope {
    fn default() -> Self {
        Self {
            va_min: 20.0,
            va_max: 40.0,
            alpha_min: (-6.0f64).to_radians(),
            alpha_max: 12.0f64.to_radians(),
            phi_c_min: (-45.0f64).to_radians(),
            phi_c_max: 45.0f64.to_radians(),
            theta_c_min: (-10.0f64).to_radians(),
            theta_c_max: 10.0f64.to_radians(),
            delta_tc_min: 0.0,
            delta_tc_max: 1.0,
            psi_dot_min: 15.0,
            psi_dot_max: 45.0,
        }
    }
}

impl FlightEnvelope {
    pub fn validate(&self) -> Result<(), OcpError> {
        let pairs = [
            ("V_a", self.va_min, self.va_max),
            ("alpha", self.alpha_min, self.alpha_max),
            ("phi_c", self.phi_c_min, self.phi_c_max),
            ("theta_c", self.theta_c_min, self.theta_c_max),
            ("delta_T_c", self.delta_tc_min, self.delta_tc_max),
            ("psi_dot_c", self.psi_dot_min, self.psi_dot_max),
        ];
        for (name, lo, hi) in pairs {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(OcpError::Arguments(format!(
                    "envelope bounds for {name} must satisfy lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Command box for the given mode.
    pub fn command_bounds(&self, mode: Mode) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.phi_c_min, self.theta_c_min, self.delta_tc_min];
        let mut hi = vec![self.phi_c_max, self.theta_c_max, self.delta_tc_max];
        if mode == Mode::Mpcc {
            lo.push(self.psi_dot_min);
            hi.push(self.psi_dot_max);
        }
        (lo, hi)
    }

    pub fn clamp_command(&self, mode: Mode, u: &mut [f64]) {
        let (lo, hi) = self.command_bounds(mode);
        for i in 0..u.len().min(lo.len()) {
            u[i] = u[i].clamp(lo[i], hi[i]);
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Reference parameters `psi* + rate * k * dt` for `k = 0..=n`, wrapped on closed paths.
pub fn reference_schedule(path: &ArcLengthPath, psi_star: f64, psi_dot_ref: f64, dt: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| path.wrap(psi_star + psi_dot_ref * k as f64 * dt))
        .collect()
}

/// Stage error `[e_n, e_e, e_d, e_chi, e_gamma]` (plus `e_Va` in MPCC mode)
/// in generic arithmetic. `x` holds the first nine state entries.
pub fn stage_error_generic<T: Real>(
    x: &[T],
    psi_hat: T,
    path: &ArcLengthPath,
    wind: &WindVector,
    mode: Mode,
    envelope: &FlightEnvelope,
) -> Vec<T> {
    let (pos, tan) = path.eval_generic(psi_hat);
    let va = x[idx::VA];
    let cg = x[idx::GAMMA].cos();
    let n_dot = va * cg * x[idx::CHI].cos() + wind.w_n;
    let e_dot = va * cg * x[idx::CHI].sin() + wind.w_e;
    let eps_c = e_dot.atan2(n_dot) - tan[1].atan2(tan[0]);
    let eps_chi = eps_c.sin().atan2(eps_c.cos());
    let tnorm = (tan[0] * tan[0] + tan[1] * tan[1] + tan[2] * tan[2]).sqrt();
    let eps_gamma = x[idx::GAMMA] - (-tan[2] / tnorm).asin();
    let mut y = vec![
        x[idx::N] - pos[0],
        x[idx::E] - pos[1],
        x[idx::D] - pos[2],
        eps_chi,
        eps_gamma,
    ];
    if mode == Mode::Mpcc {
        y.push(-va + envelope.va_max);
    }
    y
}

pub fn stage_error(
    state: &AircraftState,
    psi_hat: f64,
    path: &ArcLengthPath,
    wind: &WindVector,
    mode: Mode,
    envelope: &FlightEnvelope,
) -> Result<Vec<f64>, OcpError> {
    state.validate()?;
    if !path.is_closed() && !(0.0..=path.total_length()).contains(&psi_hat) {
        return Err(PathError::OutOfRange {
            psi: psi_hat,
            length: path.total_length(),
        }
        .into());
    }
    let mut y = stage_error_generic(&state.to_array(), psi_hat, path, wind, mode, envelope);
    y[3] = wrap_angle(y[3]);
    Ok(y)
}

/// Left-hand sides of the four soft envelope rows without slack, and the
/// smallest slacks that make them feasible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftRows {
    pub residuals: [f64; NS],
    pub min_slack: [f64; NS],
}

impl SoftRows {
    /// Whether all rows hold with zero slack.
    pub fn feasible_without_slack(&self) -> bool {
        self.residuals.iter().all(|r| *r <= 0.0)
    }
}

pub fn soft_constraint_rows(state: &AircraftState, envelope: &FlightEnvelope) -> SoftRows {
    let alpha = state.theta - state.gamma_a;
    let residuals = [
        state.v_a - envelope.va_max,
        alpha - envelope.alpha_max,
        envelope.va_min - state.v_a,
        envelope.alpha_min - alpha,
    ];
    SoftRows {
        residuals,
        min_slack: residuals.map(|r| r.max(0.0)),
    }
}

/// First-order lag rates `[phi_dot, theta_dot, delta_T_dot]`.
pub fn rate_vector(state: &AircraftState, cmd: &ControlCommand, p: &ModelParameters) -> [f64; 3] {
    rate_generic(&state.to_array(), &cmd.to_array(), p)
}

fn rate_generic<T: Real>(x: &[T], u: &[T], p: &ModelParameters) -> [T; 3] {
    [
        (u[0] - x[idx::PHI]) * p.k_phi,
        (u[1] - x[idx::THETA]) * p.k_theta,
        (u[2] - x[idx::DELTA_T]) / p.tau_t,
    ]
}

/// Primal trajectory over the horizon. `s` has `N + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub s: Vec<[f64; NS]>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Stage variables `v_k` in the layout of the module docs.
    pub fn stage_vars(&self, k: usize) -> Vec<f64> {
        let n = self.horizon();
        let mut v = Vec::new();
        if k < n {
            v.extend_from_slice(&self.u[k]);
        }
        if k >= 1 {
            v.extend_from_slice(&self.s[k]);
        }
        v
    }

    pub fn set_stage_vars(&mut self, k: usize, v: &[f64]) {
        let n = self.horizon();
        let mut off = 0;
        if k < n {
            let nu = self.u[k].len();
            self.u[k].copy_from_slice(&v[..nu]);
            off = nu;
        }
        if k >= 1 {
            self.s[k].copy_from_slice(&v[off..off + NS]);
        }
    }
}

/// The assembled optimal control problem.
#[derive(Clone, Debug)]
pub struct StructuredNlp {
    pub mode: Mode,
    pub horizon: usize,
    pub dt: f64,
    pub x_init: AircraftState,
    /// Closest path parameter at the initial state; pins the MPCC path state.
    pub psi_init: f64,
    pub wind: WindVector,
    pub path: Arc<ArcLengthPath>,
    pub weights: StageWeights,
    pub envelope: FlightEnvelope,
    pub params: ModelParameters,
    /// CR-MPC reference parameters, unwrapped, `N + 1` entries. Empty for MPCC.
    pub psi_ref: Vec<f64>,
    /// Slew reference `u*_{k,i-1}` for `k = 0..N`.
    pub slew_ref: Vec<Vec<f64>>,
}

/// Arguments to [`assemble`].
#[derive(Clone, Debug)]
pub struct OcpSpec<'a> {
    pub mode: Mode,
    pub x_init: AircraftState,
    pub wind: WindVector,
    pub path: Arc<ArcLengthPath>,
    pub psi_star: f64,
    pub weights: StageWeights,
    pub envelope: FlightEnvelope,
    pub params: ModelParameters,
    pub psi_dot_ref: Option<f64>,
    pub prev_controls: Option<&'a [Vec<f64>]>,
    pub horizon: usize,
    pub dt: f64,
}

pub fn assemble(spec: OcpSpec<'_>) -> Result<StructuredNlp, OcpError> {
    let OcpSpec {
        mode,
        x_init,
        wind,
        path,
        psi_star,
        weights,
        envelope,
        params,
        psi_dot_ref,
        prev_controls,
        horizon,
        dt,
    } = spec;
    if horizon < 1 {
        return Err(OcpError::Arguments("horizon must be at least 1".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(OcpError::Arguments(format!("dt must be positive, got {dt}")));
    }
    weights.validate()?;
    envelope.validate()?;
    params.validate()?;
    x_init.validate()?;
    if !psi_star.is_finite() {
        return Err(OcpError::Arguments("psi* must be finite".into()));
    }
    let psi_ref = match (mode, psi_dot_ref) {
        (Mode::CrMpc, Some(rate)) if rate >= 0.0 && rate.is_finite() => {
            (0..=horizon).map(|k| psi_star + rate * k as f64 * dt).collect()
        }
        (Mode::CrMpc, Some(rate)) => {
            return Err(OcpError::Arguments(format!("reference path rate must be non-negative, got {rate}")))
        }
        (Mode::CrMpc, None) => return Err(OcpError::Arguments("CR-MPC requires a reference path rate".into())),
        (Mode::Mpcc, None) => Vec::new(),
        (Mode::Mpcc, Some(_)) => {
            return Err(OcpError::Arguments("MPCC chooses its own path rate; none may be given".into()))
        }
    };
    let nu = mode.nu();
    let slew_ref = match prev_controls {
        Some(prev) => {
            if prev.len() != horizon || prev.iter().any(|u| u.len() != nu) {
                return Err(OcpError::Arguments(format!(
                    "previous controls must be {horizon} x {nu}"
                )));
            }
            prev.to_vec()
        }
        None => vec![vec![0.0; nu]; horizon],
    };
    Ok(StructuredNlp {
        mode,
        horizon,
        dt,
        x_init,
        psi_init: psi_star,
        wind,
        path,
        weights,
        envelope,
        params,
        psi_ref,
        slew_ref,
    })
}

impl StructuredNlp {
    pub fn nx(&self) -> usize {
        self.mode.nx()
    }

    pub fn nu(&self) -> usize {
        self.mode.nu()
    }

    /// Width of `v_k`.
    pub fn nv(&self, k: usize) -> usize {
        let mut n = 0;
        if k < self.horizon {
            n += self.nu();
        }
        if k >= 1 {
            n += NS;
        }
        n
    }

    /// Initial node including the pinned path parameter in MPCC mode.
    pub fn initial_node(&self) -> Vec<f64> {
        let mut x = self.x_init.to_array().to_vec();
        if self.mode == Mode::Mpcc {
            x.push(self.psi_init);
        }
        x
    }

    pub fn set_slew_reference(&mut self, controls: &[Vec<f64>]) -> Result<(), OcpError> {
        if controls.len() != self.horizon || controls.iter().any(|u| u.len() != self.nu()) {
            return Err(OcpError::Arguments("slew reference has the wrong shape".into()));
        }
        self.slew_ref = controls.to_vec();
        Ok(())
    }

    /// Reference parameter used at stage `k` given the stage state.
    fn psi_hat<T: Real>(&self, k: usize, x: &[T]) -> T {
        match self.mode {
            Mode::CrMpc => T::cst(self.psi_ref[k]),
            Mode::Mpcc => x[PSI],
        }
    }

    /// One discrete step of the (possibly augmented) dynamics.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
        let xa: [f64; NX] = std::array::from_fn(|i| x[i]);
        let ua: [f64; NU] = std::array::from_fn(|i| u[i]);
        let next = model::rk4_generic(&xa, &ua, &self.wind, self.dt, &self.params)?;
        let mut out = next.to_vec();
        if self.mode == Mode::Mpcc {
            out.push(x[PSI] + self.dt * u[PSI_DOT]);
        }
        Ok(out)
    }

    /// Next node and the row-major Jacobians `A` (nx x nx) and `B` (nx x nu).
    pub fn step_jacobians(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
        let nx = self.nx();
        let nu = self.nu();
        let xd: [Dual<12>; NX] = std::array::from_fn(|i| Dual::variable(x[i], i));
        let ud: [Dual<12>; NU] = std::array::from_fn(|i| Dual::variable(u[i], NX + i));
        let next = model::rk4_generic(&xd, &ud, &self.wind, self.dt, &self.params)?;
        let mut val = next.map(|d| d.re).to_vec();
        let mut a = vec![0.0; nx * nx];
        let mut b = vec![0.0; nx * nu];
        for r in 0..NX {
            for c in 0..NX {
                a[r * nx + c] = next[r].eps[c];
            }
            for c in 0..NU {
                b[r * nu + c] = next[r].eps[NX + c];
            }
        }
        if self.mode == Mode::Mpcc {
            val.push(x[PSI] + self.dt * u[PSI_DOT]);
            a[PSI * nx + PSI] = 1.0;
            b[PSI * nu + PSI_DOT] = self.dt;
        }
        Ok((val, a, b))
    }

    /// Residual vector of stage `k` (rows: `y`, `s` for `k >= 1`; `b`, `du`
    /// for `k < N`).
    pub fn stage_residual<T: Real>(&self, k: usize, x: &[T], v: &[T]) -> Vec<T> {
        let n = self.horizon;
        let mut out = Vec::with_capacity(20);
        let mut off = 0;
        let u = if k < n {
            off = self.nu();
            Some(&v[..self.nu()])
        } else {
            None
        };
        if k >= 1 {
            let psi = self.psi_hat(k, x);
            out.extend(stage_error_generic(x, psi, &self.path, &self.wind, self.mode, &self.envelope));
            out.extend_from_slice(&v[off..off + NS]);
        }
        if let Some(u) = u {
            out.extend(rate_generic(x, u, &self.params));
            for (ui, ri) in u.iter().zip(&self.slew_ref[k]) {
                out.push(*ui - *ri);
            }
        }
        out
    }

    /// Weights matching [`Self::stage_residual`].
    pub fn stage_weights(&self, k: usize) -> Vec<f64> {
        let n = self.horizon;
        let mut w = Vec::with_capacity(20);
        if k >= 1 {
            w.extend(self.weights.error_weights(self.mode, k == n));
            w.extend(self.weights.slack_weights());
        }
        if k < n {
            w.extend(self.weights.rate_weights());
            let disc = self.weights.lambda.powi(k as i32);
            w.extend(self.weights.slew_weights(self.mode).iter().map(|r| r * disc));
        }
        w
    }

    /// Linear inequality rows `gx x_k + gv v_k <= h` of stage `k` (row-major).
    pub fn stage_inequalities(&self, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let nx = self.nx();
        let nv = self.nv(k);
        let mut gx = Vec::new();
        let mut gv = Vec::new();
        let mut h = Vec::new();
        let mut off = 0;
        if k < self.horizon {
            let (lo, hi) = self.envelope.command_bounds(self.mode);
            for i in 0..self.nu() {
                let mut row = vec![0.0; nv];
                row[i] = 1.0;
                gx.push(vec![0.0; nx]);
                gv.push(row.clone());
                h.push(hi[i]);
                row[i] = -1.0;
                gx.push(vec![0.0; nx]);
                gv.push(row);
                h.push(-lo[i]);
            }
            off = self.nu();
        }
        if k >= 1 {
            for j in 0..NS {
                let mut row = vec![0.0; nv];
                row[off + j] = -1.0;
                gx.push(vec![0.0; nx]);
                gv.push(row);
                h.push(0.0);
            }
            let env = &self.envelope;
            // (state coefficients, slack index, bound)
            let rows: [(&[(usize, f64)], usize, f64); NS] = [
                (&[(idx::VA, 1.0)], 0, env.va_max),
                (&[(idx::THETA, 1.0), (idx::GAMMA, -1.0)], 1, env.alpha_max),
                (&[(idx::VA, -1.0)], 2, -env.va_min),
                (&[(idx::THETA, -1.0), (idx::GAMMA, 1.0)], 3, -env.alpha_min),
            ];
            for (coeffs, slack, bound) in rows {
                let mut rx = vec![0.0; nx];
                for (i, c) in coeffs {
                    rx[*i] = *c;
                }
                let mut rv = vec![0.0; nv];
                rv[off + slack] = -1.0;
                gx.push(rx);
                gv.push(rv);
                h.push(bound);
            }
        }
        (gx, gv, h)
    }

    /// Objective value of a trajectory.
    pub fn cost(&self, traj: &Trajectory) -> f64 {
        (0..=self.horizon)
            .map(|k| {
                let r = self.stage_residual(k, &traj.x[k], &traj.stage_vars(k));
                let w = self.stage_weights(k);
                0.5 * r.iter().zip(&w).map(|(ri, wi)| wi * ri * ri).sum::<f64>()
            })
            .sum()
    }

    /// Largest dynamics defect `|x_{k+1} - F(x_k, u_k)|` and initial-node mismatch.
    pub fn dynamics_defect(&self, traj: &Trajectory) -> Result<f64, ModelError> {
        let mut worst: f64 = self
            .initial_node()
            .iter()
            .zip(&traj.x[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        for k in 0..self.horizon {
            let next = self.step(&traj.x[k], &traj.u[k])?;
            for (a, b) in next.iter().zip(&traj.x[k + 1]) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    /// Smallest feasible slack at a state node.
    pub fn min_slack(&self, x: &[f64]) -> [f64; NS] {
        soft_constraint_rows(&AircraftState::from_slice(&x[..NX]), &self.envelope).min_slack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_path() -> Arc<ArcLengthPath> {
        let pts: Vec<[f64; 3]> = (0..=20).map(|i| [50.0 * i as f64, 0.0, -100.0]).collect();
        Arc::new(ArcLengthPath::build(&pts, false, 1e-3).unwrap())
    }

    fn circle(l: f64) -> ArcLengthPath {
        let r = l / std::f64::consts::TAU;
        let pts: Vec<[f64; 3]> = (0..128)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 128.0;
                [r * t.cos(), r * t.sin(), -100.0]
            })
            .collect();
        ArcLengthPath::build(&pts, true, 1e-3).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let p = line_path();
        let s = reference_schedule(&p, 100.0, 25.0, 0.1, 10);
        assert!((s[10] - 125.0).abs() < 1e-12);
        let s = reference_schedule(&p, 100.0, 0.0, 0.1, 10);
        assert!(s.iter().all(|v| *v == 100.0));
        let c = circle(500.0);
        let l = c.total_length();
        let s = reference_schedule(&c, l - 10.0, 25.0, 0.1, 10);
        assert!((s[10] - 15.0).abs() < 1e-9);
    }

    #[test]
    fn wrap_identity() {
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn zero_error_on_path() {
        let p = line_path();
        let s = AircraftState {
            n: 300.0,
            d: -100.0,
            v_a: 25.0,
            ..Default::default()
        };
        let y = stage_error(&s, 300.0, &p, &WindVector::ZERO, Mode::CrMpc, &FlightEnvelope::default()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9), "{y:?}");
    }

    #[test]
    fn gamma_and_airspeed_errors() {
        let p = line_path();
        let s = AircraftState {
            n: 300.0,
            d: -100.0,
            v_a: 25.0,
            gamma_a: 0.1,
            ..Default::default()
        };
        let y = stage_error(&s, 300.0, &p, &WindVector::ZERO, Mode::Mpcc, &FlightEnvelope::default()).unwrap();
        assert!((y[4] - 0.1).abs() < 1e-9);
        assert!((y[5] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn course_error_includes_wind() {
        let p = line_path();
        let s = AircraftState {
            n: 300.0,
            d: -100.0,
            v_a: 25.0,
            chi_a: -0.2,
            ..Default::default()
        };
        // Crosswind from the left that exactly cancels the crab angle.
        let w = WindVector::new(0.0, 25.0 * 0.2f64.sin(), 0.0);
        let y = stage_error(&s, 300.0, &p, &w, Mode::CrMpc, &FlightEnvelope::default()).unwrap();
        assert!(y[3].abs() < 1e-12);
    }

    #[test]
    fn soft_row_examples() {
        let env = FlightEnvelope::default();
        let mut s = AircraftState {
            v_a: 30.0,
            ..Default::default()
        };
        assert!(soft_constraint_rows(&s, &env).feasible_without_slack());
        s.v_a = 42.0;
        assert!((soft_constraint_rows(&s, &env).min_slack[0] - 2.0).abs() < 1e-12);
        s.v_a = 30.0;
        s.theta = (-8.0f64).to_radians();
        let r = soft_constraint_rows(&s, &env);
        assert!((r.min_slack[3] - 2.0f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        let p = ModelParameters::default();
        let s = AircraftState {
            v_a: 25.0,
            delta_t: 0.3,
            ..Default::default()
        };
        let r = rate_vector(&s, &ControlCommand::new(0.2, 0.0, 0.8), &p);
        assert!((r[0] - 0.40632).abs() < 1e-5);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - 4.307).abs() < 1e-3);
        let eq = rate_vector(&s, &ControlCommand::new(0.0, 0.0, 0.3), &p);
        assert_eq!(eq, [0.0, 0.0, 0.0]);
    }

    fn spec(mode: Mode) -> OcpSpec<'static> {
        OcpSpec {
            mode,
            x_init: AircraftState {
                n: 10.0,
                d: -100.0,
                v_a: 25.0,
                ..Default::default()
            },
            wind: WindVector::ZERO,
            path: line_path(),
            psi_star: 10.0,
            weights: StageWeights::default(),
            envelope: FlightEnvelope::default(),
            params: ModelParameters::default(),
            psi_dot_ref: if mode == Mode::CrMpc { Some(25.0) } else { None },
            prev_controls: None,
            horizon: 50,
            dt: 0.1,
        }
    }

    #[test]
    fn structure_counts() {
        let nlp = assemble(spec(Mode::CrMpc)).unwrap();
        assert_eq!((nlp.nx(), nlp.nu(), nlp.horizon), (9, 3, 50));
        assert_eq!(nlp.psi_ref.len(), 51);
        let nlp = assemble(spec(Mode::Mpcc)).unwrap();
        assert_eq!((nlp.nx(), nlp.nu()), (10, 4));
        assert_eq!(nlp.initial_node()[PSI], 10.0);
    }

    #[test]
    fn mode_argument_consistency() {
        let mut s = spec(Mode::CrMpc);
        s.psi_dot_ref = None;
        assert!(assemble(s).is_err());
        let mut s = spec(Mode::Mpcc);
        s.psi_dot_ref = Some(25.0);
        assert!(assemble(s).is_err());
        let mut s = spec(Mode::CrMpc);
        s.x_init.v_a = 0.0;
        assert!(assemble(s).is_err());
    }

    #[test]
    fn cold_slew_reference_is_zero() {
        let nlp = assemble(spec(Mode::CrMpc)).unwrap();
        let x = nlp.initial_node();
        let mut v = vec![0.1, -0.05, 0.6];
        v.extend([0.0; NS]);
        let r = nlp.stage_residual(3, &x, &v);
        let tail = &r[r.len() - 3..];
        assert_eq!(tail, &[0.1, -0.05, 0.6]);
    }

    #[test]
    fn weights_toml_round_trip() {
        let w = StageWeights::default();
        let text = toml::to_string(&w).unwrap();
        assert!(text.contains("s_Va") && text.contains("r_deltaT") && text.contains("b_deltaTdot"));
        let back: StageWeights = toml::from_str(&text).unwrap();
        assert_eq!(back, w);
        let e = FlightEnvelope::default();
        let back: FlightEnvelope = toml::from_str(&toml::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
        assert!(toml::from_str::<StageWeights>("q_x = 1.0").is_err());
    }
}
