//! Gauss-Newton SQP over the multiple-shooting problem.
//!
//! Every iteration linearizes the stage residuals and the dynamics about the
//! current trajectory, solves the resulting stage-structured QP in step form
//! and takes the full step. [`rti_step`] is a single such iteration.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dual::Dual;
use crate::model::{self, ModelError, NX};
use crate::ocp::{Mode, OcpError, StructuredNlp, Trajectory, NS, PSI, PSI_DOT};
use crate::qp::{self, KktNorms, QpError, QpOptions, QpProblem, QpStage, QpStatus};

/// Independent variables of one stage: at most 10 states plus 4 controls and 4 slacks.
const NZ: usize = 18;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dynamics evaluation failed at node {node}: {source}")]
    Dynamics { node: usize, source: ModelError },
    #[error("guess does not match the problem: {0}")]
    Dimension(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("cold start failed: {0}")]
    ColdStart(ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub qp: QpOptions,
    /// Diagonal added to every Gauss-Newton block.
    pub hessian_regularization: f64,
    /// Steps are scaled down so no state moves more than this many state scales.
    pub trust_radius: f64,
    /// Re-linearize after the step to report KKT residuals at the returned point.
    pub evaluate_kkt: bool,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            qp: QpOptions::default(),
            hessian_regularization: 1e-8,
            trust_radius: 10.0,
            evaluate_kkt: true,
            record_trace: false,
        }
    }
}

/// Per-iteration trace entry.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub kkt: KktNorms,
    pub step_norm: f64,
    pub step_scale: f64,
    pub qp_iterations: usize,
    pub qp_status: QpStatus,
    pub elapsed: f64,
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub traj: Trajectory,
    /// Multipliers of the initial-node and dynamics equalities, one per node.
    pub eq_multipliers: Vec<Vec<f64>>,
    /// Inequality multipliers per stage, in [`StructuredNlp::stage_inequalities`] row order.
    pub ineq_multipliers: Vec<Vec<f64>>,
    pub kkt: KktNorms,
    pub qp_status: QpStatus,
    /// Wall time in seconds.
    pub solve_time: f64,
    pub sqp_iterations: usize,
    /// Largest scaled step component of the last iteration.
    pub step_norm: f64,
    pub converged: bool,
    /// Set when the solution is a shifted fallback rather than a fresh solve.
    pub degraded: bool,
    pub trace: Vec<IterationRecord>,
}

impl OcpSolution {
    /// Wraps a trajectory that has no multipliers yet.
    pub fn from_guess(nlp: &StructuredNlp, traj: Trajectory) -> Self {
        let n = nlp.horizon;
        Self {
            eq_multipliers: vec![vec![0.0; nlp.nx()]; n + 1],
            ineq_multipliers: (0..=n).map(|k| vec![0.0; nlp.stage_inequalities(k).2.len()]).collect(),
            traj,
            kkt: KktNorms::default(),
            qp_status: QpStatus::Converged,
            solve_time: f64::MIN_POSITIVE,
            sqp_iterations: 0,
            step_norm: 0.0,
            converged: false,
            degraded: false,
            trace: Vec::new(),
        }
    }

    /// First control of the horizon.
    pub fn first_control(&self) -> &[f64] {
        &self.traj.u[0]
    }
}

/// Writes trace records as one JSON object per line.
pub fn write_trace<W: Write>(records: &[IterationRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Step scaling used by the trust radius.
fn state_scale(mode: Mode) -> Vec<f64> {
    // n, e, d, phi, theta, chi_a, V_a, gamma_a, delta_T
    let mut s = vec![10.0, 10.0, 10.0, 0.1, 0.1, 0.1, 1.0, 0.1, 0.1];
    if mode == Mode::Mpcc {
        s.push(10.0);
    }
    s
}

fn check_guess(nlp: &StructuredNlp, traj: &Trajectory) -> Result<(), SolverError> {
    let n = nlp.horizon;
    let ok = traj.x.len() == n + 1
        && traj.u.len() == n
        && traj.s.len() == n + 1
        && traj.x.iter().all(|x| x.len() == nlp.nx())
        && traj.u.iter().all(|u| u.len() == nlp.nu());
    if ok {
        Ok(())
    } else {
        Err(SolverError::Dimension(format!(
            "expected {} nodes of {} states and {} controls of {}",
            n + 1,
            nlp.nx(),
            n,
            nlp.nu()
        )))
    }
}

/// Gauss-Newton blocks of one stage: `(H, g)` over `z = [x_k; v_k]`.
pub fn stage_gauss_newton(nlp: &StructuredNlp, k: usize, x: &[f64], v: &[f64], reg: f64) -> (DMatrix<f64>, DVector<f64>) {
    let nx = x.len();
    let nz = nx + v.len();
    debug_assert!(nz <= NZ);
    let xd: Vec<Dual<NZ>> = x.iter().enumerate().map(|(i, &a)| Dual::variable(a, i)).collect();
    let vd: Vec<Dual<NZ>> = v.iter().enumerate().map(|(i, &a)| Dual::variable(a, nx + i)).collect();
    let res = nlp.stage_residual(k, &xd, &vd);
    let w = nlp.stage_weights(k);
    let ny = res.len();
    let j = DMatrix::from_fn(ny, nz, |r, c| res[r].eps[c]);
    let rv = DVector::from_iterator(ny, res.iter().map(|d| d.re));
    let wd = DVector::from_column_slice(&w);
    let wj = DMatrix::from_fn(ny, nz, |r, c| w[r] * j[(r, c)]);
    let mut h = j.transpose() * &wj;
    // Exact symmetry regardless of summation order.
    for a in 0..nz {
        for b in 0..a {
            let m = 0.5 * (h[(a, b)] + h[(b, a)]);
            h[(a, b)] = m;
            h[(b, a)] = m;
        }
        h[(a, a)] += reg;
    }
    let g = j.transpose() * rv.component_mul(&wd);
    (h, g)
}

/// Step-form QP of the problem linearized about `traj`.
pub fn linearize(nlp: &StructuredNlp, traj: &Trajectory, reg: f64) -> Result<QpProblem, SolverError> {
    check_guess(nlp, traj)?;
    let n = nlp.horizon;
    let nx = nlp.nx();
    let nu = nlp.nu();
    let x0 = DVector::from_iterator(nx, nlp.initial_node().iter().zip(&traj.x[0]).map(|(a, b)| a - b));
    let mut stages = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let x = &traj.x[k];
        let v = traj.stage_vars(k);
        let nv = v.len();
        let (h, g) = stage_gauss_newton(nlp, k, x, &v, reg);
        let (gx, gv, hb) = nlp.stage_inequalities(k);
        let m = hb.len();
        let nxn = if k < n { nx } else { 0 };
        let mut st = QpStage::zeros(nx, nv, nxn, m);
        st.q_mat = h.view((0, 0), (nx, nx)).into_owned();
        st.s_mat = h.view((nx, 0), (nv, nx)).into_owned();
        st.r_mat = h.view((nx, nx), (nv, nv)).into_owned();
        st.q = g.rows(0, nx).into_owned();
        st.r = g.rows(nx, nv).into_owned();
        for i in 0..m {
            let mut lhs = 0.0;
            for c in 0..nx {
                st.cx[(i, c)] = gx[i][c];
                lhs += gx[i][c] * x[c];
            }
            for c in 0..nv {
                st.cv[(i, c)] = gv[i][c];
                lhs += gv[i][c] * v[c];
            }
            st.d[i] = hb[i] - lhs;
        }
        if k < n {
            let (next, a, b) = nlp
                .step_jacobians(x, &traj.u[k])
                .map_err(|source| SolverError::Dynamics { node: k, source })?;
            st.a = DMatrix::from_row_slice(nx, nx, &a);
            for r in 0..nx {
                for c in 0..nu {
                    st.b[(r, c)] = b[r * nu + c];
                }
            }
            st.c = DVector::from_iterator(nx, next.iter().zip(&traj.x[k + 1]).map(|(f, x1)| f - x1));
        }
        stages.push(st);
    }
    Ok(QpProblem { x0, stages })
}

/// KKT residuals of the NLP at `traj` for the given multipliers.
pub fn evaluate_kkt(
    nlp: &StructuredNlp,
    traj: &Trajectory,
    eq: &[Vec<f64>],
    ineq: &[Vec<f64>],
    reg: f64,
) -> Result<KktNorms, SolverError> {
    let qp = linearize(nlp, traj, reg)?;
    Ok(kkt_of(&qp, eq, ineq))
}

fn kkt_of(qp: &QpProblem, eq: &[Vec<f64>], ineq: &[Vec<f64>]) -> KktNorms {
    let zx: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.nx())).collect();
    let zv: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.nv())).collect();
    let pi: Vec<DVector<f64>> = eq.iter().map(|p| DVector::from_column_slice(p)).collect();
    let lam: Vec<DVector<f64>> = ineq.iter().map(|l| DVector::from_column_slice(l)).collect();
    qp.kkt_residuals(&zx, &zv, &pi, &lam)
}

/// Applies a QP step scaled by the trust radius. Returns the scaled step norm
/// and the applied scale.
fn apply_step(nlp: &StructuredNlp, traj: &mut Trajectory, sol: &qp::QpSolution, radius: f64) -> (f64, f64) {
    let scale = state_scale(nlp.mode);
    let mut norm: f64 = 0.0;
    for dx in &sol.x {
        for (d, s) in dx.iter().zip(&scale) {
            norm = norm.max(d.abs() / s);
        }
    }
    for dv in &sol.v {
        norm = norm.max(dv.amax());
    }
    let alpha = if norm > radius { radius / norm } else { 1.0 };
    for k in 0..=nlp.horizon {
        for (xi, d) in traj.x[k].iter_mut().zip(sol.x[k].iter()) {
            *xi += alpha * d;
        }
        let mut v = traj.stage_vars(k);
        for (vi, d) in v.iter_mut().zip(sol.v[k].iter()) {
            *vi += alpha * d;
        }
        traj.set_stage_vars(k, &v);
        if k >= 1 {
            for s in traj.s[k].iter_mut() {
                *s = s.max(0.0);
            }
        }
    }
    (norm, alpha)
}

fn to_vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|d| d.iter().cloned().collect()).collect()
}

/// Gauss-Newton SQP with full (trust-capped) steps until the KKT residuals
/// drop below `kkt_tol` or `max_iters` iterations have run.
pub fn sqp_solve(
    nlp: &StructuredNlp,
    guess: &OcpSolution,
    kkt_tol: f64,
    max_iters: usize,
    opts: &SolverOptions,
) -> Result<OcpSolution, SolverError> {
    let start = Instant::now();
    let reg = opts.hessian_regularization;
    let mut traj = guess.traj.clone();
    let mut qp_prob = linearize(nlp, &traj, reg)?;
    let mut out = OcpSolution::from_guess(nlp, traj.clone());
    let mut trace = Vec::new();
    for it in 1..=max_iters.max(1) {
        let sol = qp::solve(&qp_prob, &opts.qp)?;
        let (norm, alpha) = apply_step(nlp, &mut traj, &sol, opts.trust_radius);
        let eq = to_vecs(&sol.pi);
        let ineq = to_vecs(&sol.lam);
        let last = it == max_iters.max(1);
        let kkt = if opts.evaluate_kkt || !last {
            qp_prob = linearize(nlp, &traj, reg)?;
            kkt_of(&qp_prob, &eq, &ineq)
        } else {
            KktNorms::default()
        };
        if opts.record_trace {
            trace.push(IterationRecord {
                iteration: it,
                kkt,
                step_norm: norm,
                step_scale: alpha,
                qp_iterations: sol.iterations,
                qp_status: sol.status,
                elapsed: start.elapsed().as_secs_f64(),
            });
        }
        let converged = opts.evaluate_kkt && kkt.max() <= kkt_tol;
        out = OcpSolution {
            traj: traj.clone(),
            eq_multipliers: eq,
            ineq_multipliers: ineq,
            kkt,
            qp_status: sol.status,
            solve_time: 0.0,
            sqp_iterations: it,
            step_norm: norm,
            converged,
            degraded: false,
            trace: Vec::new(),
        };
        if converged || last {
            break;
        }
    }
    out.trace = trace;
    out.solve_time = start.elapsed().as_secs_f64().max(1e-9);
    Ok(out)
}

/// One real-time iteration: a single linearization, QP and full step.
pub fn rti_step(nlp: &StructuredNlp, guess: &OcpSolution, opts: &SolverOptions) -> Result<OcpSolution, SolverError> {
    sqp_solve(nlp, guess, 0.0, 1, opts)
}

/// Shifts a previous solution one stage forward in time.
///
/// In MPCC mode on a closed path the path states are moved by whole laps so
/// that the first one lands next to the new initial parameter.
pub fn shift_warm_start(prev: &OcpSolution, nlp: &StructuredNlp) -> Result<Trajectory, SolverError> {
    check_guess(nlp, &prev.traj)?;
    let n = nlp.horizon;
    let p = &prev.traj;
    let mut x: Vec<Vec<f64>> = p.x[1..].to_vec();
    let mut u: Vec<Vec<f64>> = p.u[1..].to_vec();
    let u_last = p.u[n - 1].clone();
    let tail = nlp
        .step(&p.x[n], &u_last)
        .map_err(|source| SolverError::Dynamics { node: n, source })?;
    x.push(tail);
    u.push(u_last);
    let mut s: Vec<[f64; NS]> = p.s[1..].to_vec();
    s.push(p.s[n]);
    s[0] = [0.0; NS];
    if nlp.mode == Mode::Mpcc && nlp.path.is_closed() {
        let len = nlp.path.total_length();
        let laps = ((nlp.psi_init - x[0][PSI]) / len).round();
        if laps != 0.0 {
            for node in x.iter_mut() {
                node[PSI] += laps * len;
            }
        }
    }
    Ok(Trajectory { x, u, s })
}

/// Forward simulation from the initial node under the trim command for the
/// current airspeed, clamped to the command boxes.
pub fn cold_start(nlp: &StructuredNlp) -> Result<Trajectory, SolverError> {
    let n = nlp.horizon;
    let env = &nlp.envelope;
    let va = nlp.x_init.v_a.clamp(env.va_min, env.va_max);
    let trim = model::trim(&nlp.params, va, 0.0, 0.0).map_err(SolverError::ColdStart)?;
    let mut u0 = trim.command.to_array().to_vec();
    if nlp.mode == Mode::Mpcc {
        let x = &nlp.x_init;
        let vg_n = x.v_a * x.gamma_a.cos() * x.chi_a.cos() + nlp.wind.w_n;
        let vg_e = x.v_a * x.gamma_a.cos() * x.chi_a.sin() + nlp.wind.w_e;
        u0.push(vg_n.hypot(vg_e));
    }
    env.clamp_command(nlp.mode, &mut u0);
    let mut xs = vec![nlp.initial_node()];
    for k in 0..n {
        let next = nlp
            .step(&xs[k], &u0)
            .map_err(|source| SolverError::Dynamics { node: k, source })?;
        xs.push(next);
    }
    let mut s = vec![[0.0; NS]; n + 1];
    for k in 1..=n {
        s[k] = nlp.min_slack(&xs[k][..NX]);
    }
    debug_assert!(nlp.mode != Mode::Mpcc || u0.len() > PSI_DOT);
    Ok(Trajectory {
        x: xs,
        u: vec![u0; n],
        s,
    })
}
