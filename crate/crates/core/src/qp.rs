//! Stage-structured convex QP solver.
//!
//! ```text
//! min  sum_k 1/2 [x_k; v_k]' [Q_k S_k'; S_k R_k] [x_k; v_k] + q_k' x_k + r_k' v_k
//! s.t. x_0 = x0,  x_{k+1} = A_k x_k + B_k v_k + c_k,  Cx_k x_k + Cv_k v_k <= d_k
//! ```
//!
//! Mehrotra predictor-corrector interior point with centrality correctors.
//! Each Newton system is the equality-constrained QP with the barrier
//! curvature folded into the stage Hessians, solved by a backward Riccati
//! recursion, so an iteration costs O(N) in the horizon length.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("stage {stage}: {msg}")]
    Dimension { stage: usize, msg: String },
    #[error("stage {stage}: inequality rows {row_a} and {row_b} admit no feasible point")]
    InfeasibleBounds { stage: usize, row_a: usize, row_b: usize },
    #[error("stage {0}: reduced Hessian is not positive definite")]
    NotConvex(usize),
    #[error("non-finite values in the QP iterate")]
    NonFinite,
}

#[derive(Clone, Debug)]
pub struct QpStage {
    pub q_mat: DMatrix<f64>,
    pub s_mat: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    /// Dynamics to the next node; zero rows on the last stage.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub cx: DMatrix<f64>,
    pub cv: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl QpStage {
    pub fn nx(&self) -> usize {
        self.q_mat.nrows()
    }

    pub fn nv(&self) -> usize {
        self.r_mat.nrows()
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }

    /// Empty stage of the given shape.
    pub fn zeros(nx: usize, nv: usize, nx_next: usize, m: usize) -> Self {
        Self {
            q_mat: DMatrix::zeros(nx, nx),
            s_mat: DMatrix::zeros(nv, nx),
            r_mat: DMatrix::zeros(nv, nv),
            q: DVector::zeros(nx),
            r: DVector::zeros(nv),
            a: DMatrix::zeros(nx_next, nx),
            b: DMatrix::zeros(nx_next, nv),
            c: DVector::zeros(nx_next),
            cx: DMatrix::zeros(m, nx),
            cv: DMatrix::zeros(m, nv),
            d: DVector::zeros(m),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub x0: DVector<f64>,
    pub stages: Vec<QpStage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Converged,
    MaxIterations,
}

/// Infinity norms of the KKT residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktNorms {
    pub stationarity: f64,
    pub equality: f64,
    pub inequality: f64,
    pub complementarity: f64,
}

impl KktNorms {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    /// Multipliers of the initial-state and dynamics equalities, `pi[k]` for node `k`.
    pub pi: Vec<DVector<f64>>,
    pub lam: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktNorms,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    /// Relative tolerance on primal and dual residuals.
    pub tol: f64,
    /// Absolute tolerance on every complementarity product.
    pub comp_tol: f64,
    pub max_iter: usize,
    pub regularization: f64,
    pub centrality_correctors: usize,
    pub refinement_steps: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            comp_tol: 1e-10,
            max_iter: 60,
            regularization: 1e-10,
            centrality_correctors: 2,
            refinement_steps: 2,
        }
    }
}

impl QpProblem {
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn validate(&self) -> Result<(), QpError> {
        if self.stages.is_empty() {
            return Err(QpError::Dimension {
                stage: 0,
                msg: "no stages".into(),
            });
        }
        let n = self.stages.len();
        let dim_err = |stage: usize, msg: String| QpError::Dimension { stage, msg };
        if self.x0.len() != self.stages[0].nx() {
            return Err(dim_err(0, "x0 length differs from stage state size".into()));
        }
        for (k, st) in self.stages.iter().enumerate() {
            let (nx, nv, m) = (st.nx(), st.nv(), st.m());
            let nxn = if k + 1 < n { self.stages[k + 1].nx() } else { 0 };
            let ok = st.q_mat.ncols() == nx
                && st.s_mat.shape() == (nv, nx)
                && st.r_mat.ncols() == nv
                && st.q.len() == nx
                && st.r.len() == nv
                && st.a.shape() == (nxn, nx)
                && st.b.shape() == (nxn, nv)
                && st.c.len() == nxn
                && st.cx.shape() == (m, nx)
                && st.cv.shape() == (m, nv);
            if !ok {
                return Err(dim_err(k, "inconsistent block shapes".into()));
            }
            // Mirrored rows (g x <= d_a, -g x <= d_b) need d_a + d_b >= 0.
            for i in 0..m {
                for j in i + 1..m {
                    let mirrored = (0..nx).all(|c| st.cx[(i, c)] == -st.cx[(j, c)])
                        && (0..nv).all(|c| st.cv[(i, c)] == -st.cv[(j, c)]);
                    if mirrored && st.d[i] + st.d[j] < 0.0 {
                        return Err(QpError::InfeasibleBounds {
                            stage: k,
                            row_a: i,
                            row_b: j,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Objective value at a primal point.
    pub fn objective(&self, x: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(k, st)| {
                0.5 * x[k].dot(&(&st.q_mat * &x[k]))
                    + v[k].dot(&(&st.s_mat * &x[k]))
                    + 0.5 * v[k].dot(&(&st.r_mat * &v[k]))
                    + st.q.dot(&x[k])
                    + st.r.dot(&v[k])
            })
            .sum()
    }

    /// KKT residuals of a primal-dual point.
    pub fn kkt_residuals(
        &self,
        x: &[DVector<f64>],
        v: &[DVector<f64>],
        pi: &[DVector<f64>],
        lam: &[DVector<f64>],
    ) -> KktNorms {
        let n = self.stages.len();
        let mut out = KktNorms::default();
        out.equality = (&x[0] - &self.x0).amax();
        for (k, st) in self.stages.iter().enumerate() {
            let mut gx = &st.q_mat * &x[k] + st.s_mat.tr_mul(&v[k]) + &st.q + &pi[k] + st.cx.tr_mul(&lam[k]);
            let mut gv = &st.s_mat * &x[k] + &st.r_mat * &v[k] + &st.r + st.cv.tr_mul(&lam[k]);
            if k + 1 < n {
                gx -= st.a.tr_mul(&pi[k + 1]);
                gv -= st.b.tr_mul(&pi[k + 1]);
                let defect = &x[k + 1] - (&st.a * &x[k] + &st.b * &v[k] + &st.c);
                out.equality = out.equality.max(defect.amax());
            }
            out.stationarity = out.stationarity.max(gx.amax()).max(gv.amax());
            let g = &st.cx * &x[k] + &st.cv * &v[k] - &st.d;
            for i in 0..st.m() {
                out.inequality = out.inequality.max(g[i].max(0.0));
                out.complementarity = out.complementarity.max((lam[k][i] * g[i]).abs());
                out.inequality = out.inequality.max((-lam[k][i]).max(0.0));
            }
        }
        out
    }
}

/// Per-stage factor of `[R S; S' Q]` after folding in the cost-to-go:
/// `l11` factors the control block, `l21` couples, and `P = l22 l22'`.
struct StageFactor {
    l11: DMatrix<f64>,
    l21: DMatrix<f64>,
    l22: DMatrix<f64>,
    k_gain: DMatrix<f64>,
}

/// Square-root Riccati factorization of the barrier-augmented equality QP.
/// Working with Cholesky factors keeps every cost-to-go matrix positive
/// semi-definite even when barrier weights span many orders of magnitude.
struct Riccati {
    factors: Vec<StageFactor>,
}

impl Riccati {
    fn factor(qp: &QpProblem, w: &[DVector<f64>], reg: f64) -> Result<Self, QpError> {
        let n = qp.stages.len();
        let mut factors: Vec<StageFactor> = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let st = &qp.stages[k];
            let (nx, nv) = (st.nx(), st.nv());
            let cxw = DMatrix::from_fn(st.m(), nx, |i, j| st.cx[(i, j)] * w[k][i]);
            let cvw = DMatrix::from_fn(st.m(), nv, |i, j| st.cv[(i, j)] * w[k][i]);
            let mut q_t = &st.q_mat + st.cx.tr_mul(&cxw);
            let mut s_t = &st.s_mat + st.cv.tr_mul(&cxw);
            let mut r_t = &st.r_mat + st.cv.tr_mul(&cvw);
            if let Some(next) = factors.last() {
                let la = next.l22.tr_mul(&st.a);
                let lb = next.l22.tr_mul(&st.b);
                q_t += la.tr_mul(&la);
                s_t += lb.tr_mul(&la);
                r_t += lb.tr_mul(&lb);
            }
            let dim = nv + nx;
            let mut m = DMatrix::zeros(dim, dim);
            m.view_mut((0, 0), (nv, nv)).copy_from(&r_t);
            m.view_mut((nv, 0), (nx, nv)).copy_from(&s_t.transpose());
            m.view_mut((0, nv), (nv, nx)).copy_from(&s_t);
            m.view_mut((nv, nv), (nx, nx)).copy_from(&q_t);
            // Retries scale the shift with each diagonal entry, since barrier
            // terms can make the block badly scaled near convergence.
            let mut shift = 0.0;
            let l = loop {
                let mut mm = m.clone();
                for i in 0..dim {
                    mm[(i, i)] += reg + shift * m[(i, i)].abs().max(1.0);
                }
                if let Some(c) = Cholesky::new(mm) {
                    break c.unpack();
                }
                shift = if shift == 0.0 { 1e-14 } else { shift * 100.0 };
                if shift > 1e-2 {
                    return Err(QpError::NotConvex(k));
                }
            };
            let l11 = l.view((0, 0), (nv, nv)).into_owned();
            let l21 = l.view((nv, 0), (nx, nv)).into_owned();
            let l22 = l.view((nv, nv), (nx, nx)).into_owned();
            // K = -R^-1 S = -l11^-T l21'
            let k_gain = if nv > 0 {
                -l11
                    .tr_solve_lower_triangular(&l21.transpose())
                    .expect("triangular factor has a positive diagonal")
            } else {
                DMatrix::zeros(0, nx)
            };
            factors.push(StageFactor {
                l11,
                l21,
                l22,
                k_gain,
            });
        }
        factors.reverse();
        Ok(Self { factors })
    }

    /// Backward/forward sweep for linear terms `q`, `r`, dynamics offsets
    /// `c` and initial state `x_init`. Returns primal values and the
    /// multipliers of the equalities.
    fn solve(
        &self,
        qp: &QpProblem,
        q: &[DVector<f64>],
        r: &[DVector<f64>],
        c: &[DVector<f64>],
        x_init: &DVector<f64>,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = qp.stages.len();
        let mut p_vec: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        let mut kff: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        for k in (0..n).rev() {
            let st = &qp.stages[k];
            let f = &self.factors[k];
            let mut q_t = q[k].clone();
            let mut r_t = r[k].clone();
            if k + 1 < n {
                let l22 = &self.factors[k + 1].l22;
                let m = l22 * (l22.tr_mul(&c[k])) + &p_vec[k + 1];
                q_t += st.a.tr_mul(&m);
                r_t += st.b.tr_mul(&m);
            }
            if st.nv() > 0 {
                let y = f
                    .l11
                    .solve_lower_triangular(&r_t)
                    .expect("triangular factor has a positive diagonal");
                kff[k] = -f
                    .l11
                    .tr_solve_lower_triangular(&y)
                    .expect("triangular factor has a positive diagonal");
                p_vec[k] = q_t - &f.l21 * y;
            } else {
                kff[k] = DVector::zeros(0);
                p_vec[k] = q_t;
            }
        }
        let mut xs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        let mut pis = Vec::with_capacity(n);
        let mut x = x_init.clone();
        for k in 0..n {
            let f = &self.factors[k];
            let v = &f.k_gain * &x + &kff[k];
            pis.push(-(&f.l22 * (f.l22.tr_mul(&x)) + &p_vec[k]));
            let st = &qp.stages[k];
            let next = if k + 1 < n {
                Some(&st.a * &x + &st.b * &v + &c[k])
            } else {
                None
            };
            xs.push(x.clone());
            vs.push(v);
            if let Some(nx) = next {
                x = nx;
            }
        }
        (xs, vs, pis)
    }
}

fn max_step(val: &[DVector<f64>], dir: &[DVector<f64>]) -> f64 {
    let mut alpha: f64 = 1.0;
    for (v, d) in val.iter().zip(dir) {
        for i in 0..v.len() {
            if d[i] < 0.0 {
                alpha = alpha.min(-v[i] / d[i]);
            }
        }
    }
    alpha
}

/// Gradient of the Lagrangian per stage, split into state and stage-variable parts.
fn dual_residual(
    qp: &QpProblem,
    x: &[DVector<f64>],
    v: &[DVector<f64>],
    pi: &[DVector<f64>],
    lam: &[DVector<f64>],
    linear: bool,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = qp.stages.len();
    let mut rx = Vec::with_capacity(n);
    let mut rv = Vec::with_capacity(n);
    for (k, st) in qp.stages.iter().enumerate() {
        let mut gx = &st.q_mat * &x[k] + st.s_mat.tr_mul(&v[k]) + &pi[k] + st.cx.tr_mul(&lam[k]);
        let mut gv = &st.s_mat * &x[k] + &st.r_mat * &v[k] + st.cv.tr_mul(&lam[k]);
        if linear {
            gx += &st.q;
            gv += &st.r;
        }
        if k + 1 < n {
            gx -= st.a.tr_mul(&pi[k + 1]);
            gv -= st.b.tr_mul(&pi[k + 1]);
        }
        rx.push(gx);
        rv.push(gv);
    }
    (rx, rv)
}

/// Solves the QP. A non-converged result is returned with status
/// `MaxIterations` and the best iterate seen.
pub fn solve(qp: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.stages.len();
    let m_total: usize = qp.stages.iter().map(|s| s.m()).sum();
    let rows = |x: &[DVector<f64>], v: &[DVector<f64>]| -> Vec<DVector<f64>> {
        qp.stages
            .iter()
            .enumerate()
            .map(|(k, st)| &st.cx * &x[k] + &st.cv * &v[k])
            .collect()
    };
    let zero_m: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.m())).collect();
    let q0: Vec<DVector<f64>> = qp.stages.iter().map(|s| s.q.clone()).collect();
    let r0: Vec<DVector<f64>> = qp.stages.iter().map(|s| s.r.clone()).collect();
    let c0: Vec<DVector<f64>> = qp.stages.iter().map(|s| s.c.clone()).collect();

    // Equality-constrained minimizer as the starting point.
    let fac = Riccati::factor(qp, &zero_m, opts.regularization.max(1e-10))?;
    let (mut x, mut v, mut pi) = fac.solve(qp, &q0, &r0, &c0, &qp.x0);
    if m_total == 0 {
        let kkt = qp.kkt_residuals(&x, &v, &pi, &zero_m);
        return Ok(QpSolution {
            x,
            v,
            pi,
            lam: zero_m,
            status: QpStatus::Converged,
            iterations: 1,
            kkt,
        });
    }
    let gz0 = rows(&x, &v);
    let mut t: Vec<DVector<f64>> = (0..n).map(|k| (&qp.stages[k].d - &gz0[k]).map(|s| s.max(1.0))).collect();
    let mut lam: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::from_element(s.m(), 1.0)).collect();

    let scale_d = 1.0 + qp.stages.iter().map(|s| s.d.amax()).fold(0.0, f64::max);
    let scale_g = 1.0
        + qp
            .stages
            .iter()
            .map(|s| s.q.amax().max(s.r.amax()))
            .fold(0.0, f64::max);

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut best = (f64::INFINITY, x.clone(), v.clone(), pi.clone(), lam.clone());
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let gz = rows(&x, &v);
        let rp: Vec<DVector<f64>> = (0..n).map(|k| &gz[k] + &t[k] - &qp.stages[k].d).collect();
        let mu: f64 = (0..n).map(|k| lam[k].dot(&t[k])).sum::<f64>() / m_total as f64;
        let (rx, rv) = dual_residual(qp, &x, &v, &pi, &lam, true);
        let rp_norm = rp.iter().map(|r| r.amax()).fold(0.0, f64::max);
        let rd_norm = rx.iter().chain(rv.iter()).map(|r| r.amax()).fold(0.0, f64::max);
        let comp = (0..n)
            .map(|k| lam[k].component_mul(&t[k]).amax())
            .fold(0.0, f64::max);
        let merit = (rp_norm / scale_d / opts.tol)
            .max(rd_norm / scale_g / opts.tol)
            .max(comp / opts.comp_tol);
        if merit < best.0 {
            best = (merit, x.clone(), v.clone(), pi.clone(), lam.clone());
        }
        if merit <= 1.0 {
            status = QpStatus::Converged;
            break;
        }

        let w: Vec<DVector<f64>> = (0..n).map(|k| lam[k].component_div(&t[k])).collect();
        // Near convergence the barrier curvature can swamp the factorization;
        // the best iterate so far is returned in that case.
        let Ok(fac) = Riccati::factor(qp, &w, opts.regularization) else {
            break;
        };
        // Dynamics residuals: steps must close them.
        let mut e: Vec<DVector<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let st = &qp.stages[k];
            if k + 1 < n {
                e.push(&st.a * &x[k] + &st.b * &v[k] + &st.c - &x[k + 1]);
            } else {
                e.push(DVector::zeros(0));
            }
        }
        let e0 = &qp.x0 - &x[0];

        type Step = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);
        let newton = |rx: &[DVector<f64>],
                      rv: &[DVector<f64>],
                      rp: &[DVector<f64>],
                      rc: &[DVector<f64>],
                      e: &[DVector<f64>],
                      e0: &DVector<f64>|
         -> Step {
            let xi: Vec<DVector<f64>> = (0..n)
                .map(|k| w[k].component_mul(&rp[k]) - rc[k].component_div(&t[k]))
                .collect();
            let ql: Vec<DVector<f64>> = (0..n).map(|k| &rx[k] + qp.stages[k].cx.tr_mul(&xi[k])).collect();
            let rl: Vec<DVector<f64>> = (0..n).map(|k| &rv[k] + qp.stages[k].cv.tr_mul(&xi[k])).collect();
            let (dx, dv, dpi) = fac.solve(qp, &ql, &rl, e, e0);
            let gdz = rows(&dx, &dv);
            let dt: Vec<DVector<f64>> = (0..n).map(|k| -&rp[k] - &gdz[k]).collect();
            let dl: Vec<DVector<f64>> = (0..n)
                .map(|k| w[k].component_mul(&(&gdz[k] + &rp[k])) - rc[k].component_div(&t[k]))
                .collect();
            (dx, dv, dpi, dt, dl)
        };
        let refine_floor = 1e-2 * opts.tol * scale_d.min(scale_g);
        // Iterative refinement on the full linearized system; large barrier
        // weights otherwise leak factorization error into stationarity.
        let refined = |rx: &[DVector<f64>],
                       rv: &[DVector<f64>],
                       rp: &[DVector<f64>],
                       rc: &[DVector<f64>],
                       e: &[DVector<f64>],
                       e0: &DVector<f64>|
         -> Step {
            let (mut dx, mut dv, mut dpi, mut dt, mut dl) = newton(rx, rv, rp, rc, e, e0);
            let mut last = f64::INFINITY;
            for _ in 0..opts.refinement_steps {
                let (hx, hv) = dual_residual(qp, &dx, &dv, &dpi, &dl, false);
                let res_x: Vec<DVector<f64>> = (0..n).map(|k| &rx[k] + &hx[k]).collect();
                let res_v: Vec<DVector<f64>> = (0..n).map(|k| &rv[k] + &hv[k]).collect();
                let gdz = rows(&dx, &dv);
                let res_p: Vec<DVector<f64>> = (0..n).map(|k| &rp[k] + &gdz[k] + &dt[k]).collect();
                let res_c: Vec<DVector<f64>> = (0..n)
                    .map(|k| &rc[k] + lam[k].component_mul(&dt[k]) + t[k].component_mul(&dl[k]))
                    .collect();
                let res_e: Vec<DVector<f64>> = (0..n)
                    .map(|k| {
                        let st = &qp.stages[k];
                        if k + 1 < n {
                            &st.a * &dx[k] + &st.b * &dv[k] + &e[k] - &dx[k + 1]
                        } else {
                            DVector::zeros(0)
                        }
                    })
                    .collect();
                let res_e0 = e0 - &dx[0];
                let size = res_x
                    .iter()
                    .chain(&res_v)
                    .chain(&res_e)
                    .map(|r| r.amax())
                    .fold(res_e0.amax(), f64::max);
                if size <= refine_floor || size > 0.5 * last {
                    break;
                }
                last = size;
                let (cx, cv, cpi, ct, cl) = newton(&res_x, &res_v, &res_p, &res_c, &res_e, &res_e0);
                for k in 0..n {
                    dx[k] += &cx[k];
                    dv[k] += &cv[k];
                    dpi[k] += &cpi[k];
                    dt[k] += &ct[k];
                    dl[k] += &cl[k];
                }
            }
            (dx, dv, dpi, dt, dl)
        };
        let direction = |rc: &[DVector<f64>]| refined(&rx, &rv, &rp, rc, &e, &e0);

        let rc_aff: Vec<DVector<f64>> = (0..n).map(|k| lam[k].component_mul(&t[k])).collect();
        let (_, _, _, dt_a, dl_a) = direction(&rc_aff);
        let a_aff = max_step(&t, &dt_a).min(max_step(&lam, &dl_a));
        let mu_aff: f64 = (0..n)
            .map(|k| (&lam[k] + a_aff * &dl_a[k]).dot(&(&t[k] + a_aff * &dt_a[k])))
            .sum::<f64>()
            / m_total as f64;
        // Aiming far below the complementarity tolerance only inflates the
        // barrier weights and costs accuracy elsewhere.
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0).max((0.1 * opts.comp_tol / mu).min(1.0));
        let rc: Vec<DVector<f64>> = (0..n)
            .map(|k| (&rc_aff[k] + dl_a[k].component_mul(&dt_a[k])).map(|c| c - sigma * mu))
            .collect();
        let (mut dx, mut dv, mut dpi, mut dt, mut dl) = direction(&rc);
        let mut ap = (0.995 * max_step(&t, &dt).min(max_step(&lam, &dl))).min(1.0);
        // Centrality correctors: push outlying complementarity products at an
        // enlarged trial step back into a band around the target.
        let (lo, hi) = (0.1 * sigma * mu, 10.0 * sigma * mu);
        for _ in 0..opts.centrality_correctors {
            if ap >= 0.9 {
                break;
            }
            let trial = (2.0 * ap).min(1.0);
            let corr: Vec<DVector<f64>> = (0..n)
                .map(|k| {
                    let prod = (&lam[k] + trial * &dl[k]).component_mul(&(&t[k] + trial * &dt[k]));
                    prod.map(|p| {
                        if p < lo {
                            p - lo
                        } else if p > hi {
                            (p - hi).min(hi)
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let zero_r: Vec<DVector<f64>> = (0..n).map(|k| DVector::zeros(rx[k].len())).collect();
            let zero_v: Vec<DVector<f64>> = (0..n).map(|k| DVector::zeros(rv[k].len())).collect();
            let zero_p: Vec<DVector<f64>> = (0..n).map(|k| DVector::zeros(t[k].len())).collect();
            let zero_e: Vec<DVector<f64>> = e.iter().map(|v| DVector::zeros(v.len())).collect();
            let (cx, cv, cpi, ct, cl) = refined(&zero_r, &zero_v, &zero_p, &corr, &zero_e, &DVector::zeros(e0.len()));
            let ndx: Vec<DVector<f64>> = (0..n).map(|k| &dx[k] + &cx[k]).collect();
            let ndv: Vec<DVector<f64>> = (0..n).map(|k| &dv[k] + &cv[k]).collect();
            let npi: Vec<DVector<f64>> = (0..n).map(|k| &dpi[k] + &cpi[k]).collect();
            let nt: Vec<DVector<f64>> = (0..n).map(|k| &dt[k] + &ct[k]).collect();
            let nl: Vec<DVector<f64>> = (0..n).map(|k| &dl[k] + &cl[k]).collect();
            let a_new = (0.995 * max_step(&t, &nt).min(max_step(&lam, &nl))).min(1.0);
            if a_new < 1.01 * ap {
                break;
            }
            (dx, dv, dpi, dt, dl, ap) = (ndx, ndv, npi, nt, nl, a_new);
        }
        for k in 0..n {
            x[k] += ap * &dx[k];
            v[k] += ap * &dv[k];
            pi[k] += ap * &dpi[k];
            t[k] += ap * &dt[k];
            lam[k] += ap * &dl[k];
        }
        if x.iter().chain(v.iter()).any(|z| z.iter().any(|c| !c.is_finite())) {
            return Err(QpError::NonFinite);
        }
    }
    if status != QpStatus::Converged {
        (_, x, v, pi, lam) = best;
    }
    let kkt = qp.kkt_residuals(&x, &v, &pi, &lam);
    Ok(QpSolution {
        x,
        v,
        pi,
        lam,
        status,
        iterations,
        kkt,
    })
}
