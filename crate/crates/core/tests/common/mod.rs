//! Dense oracle for the structured QP solver.

use nalgebra::{DMatrix, DVector};
use pathmpc::qp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// Random stage-structured QP with a strictly feasible point built in.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5usize);
    let nx = rng.random_range(1..=4usize);
    let mut stages = Vec::new();
    let x0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
    // Feasible trajectory used to place the inequality right-hand sides.
    let mut xf = x0.clone();
    for k in 0..=n {
        let nv = rng.random_range(if k == n { 0..=2usize } else { 1..=3usize });
        let nxn = if k < n { nx } else { 0 };
        let m = rng.random_range(0..=4usize) + 2 * nv;
        let mut st = QpStage::zeros(nx, nv, nxn, m);
        let h = random_psd(&mut rng, nx + nv, 1e-2);
        st.q_mat = h.view((0, 0), (nx, nx)).into_owned();
        st.s_mat = h.view((nx, 0), (nv, nx)).into_owned();
        st.r_mat = h.view((nx, nx), (nv, nv)).into_owned();
        st.q = DVector::from_fn(nx, |_, _| rng.random_range(-3.0..3.0));
        st.r = DVector::from_fn(nv, |_, _| rng.random_range(-3.0..3.0));
        let vf = DVector::from_fn(nv, |_, _| rng.random_range(-0.5..0.5));
        for i in 0..nv {
            st.cv[(2 * i, i)] = 1.0;
            st.cv[(2 * i + 1, i)] = -1.0;
        }
        for i in 2 * nv..m {
            for c in 0..nx {
                st.cx[(i, c)] = rng.random_range(-1.0..1.0);
            }
            for c in 0..nv {
                st.cv[(i, c)] = rng.random_range(-1.0..1.0);
            }
        }
        let g = &st.cx * &xf + &st.cv * &vf;
        for i in 0..m {
            st.d[i] = g[i] + rng.random_range(0.05..1.0);
        }
        if k < n {
            st.a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
            st.b = DMatrix::from_fn(nx, nv, |_, _| rng.random_range(-1.0..1.0));
            st.c = DVector::from_fn(nx, |_, _| rng.random_range(-0.5..0.5));
            xf = &st.a * &xf + &st.b * &vf + &st.c;
        }
        stages.push(st);
    }
    QpProblem { x0, stages }
}

pub struct Dense {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub offsets: Vec<(usize, usize)>,
}

/// Stacks the structured QP into one dense problem over z = [x_0, v_0, x_1, v_1, ...].
pub fn densify(qp: &QpProblem) -> Dense {
    let n = qp.stages.len();
    let mut offsets = Vec::new();
    let mut nz = 0;
    for st in &qp.stages {
        offsets.push((nz, nz + st.nx()));
        nz += st.nx() + st.nv();
    }
    let neq: usize = qp.stages[0].nx() + qp.stages[..n - 1].iter().map(|s| s.a.nrows()).sum::<usize>();
    let mi: usize = qp.stages.iter().map(|s| s.m()).sum();
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    let mut e = DMatrix::zeros(neq, nz);
    let mut f = DVector::zeros(neq);
    let mut c = DMatrix::zeros(mi, nz);
    let mut d = DVector::zeros(mi);
    let (mut er, mut cr) = (0, 0);
    let nx0 = qp.stages[0].nx();
    for i in 0..nx0 {
        e[(i, i)] = 1.0;
        f[i] = qp.x0[i];
    }
    er += nx0;
    for (k, st) in qp.stages.iter().enumerate() {
        let (ox, ov) = offsets[k];
        let (nx, nv) = (st.nx(), st.nv());
        h.view_mut((ox, ox), (nx, nx)).copy_from(&st.q_mat);
        h.view_mut((ov, ox), (nv, nx)).copy_from(&st.s_mat);
        h.view_mut((ox, ov), (nx, nv)).copy_from(&st.s_mat.transpose());
        h.view_mut((ov, ov), (nv, nv)).copy_from(&st.r_mat);
        g.rows_mut(ox, nx).copy_from(&st.q);
        g.rows_mut(ov, nv).copy_from(&st.r);
        if k + 1 < n {
            let (oxn, _) = offsets[k + 1];
            let rows = st.a.nrows();
            for i in 0..rows {
                e[(er + i, oxn + i)] = 1.0;
            }
            e.view_mut((er, ox), (rows, nx)).copy_from(&(-&st.a));
            e.view_mut((er, ov), (rows, nv)).copy_from(&(-&st.b));
            f.rows_mut(er, rows).copy_from(&st.c);
            er += rows;
        }
        let m = st.m();
        c.view_mut((cr, ox), (m, nx)).copy_from(&st.cx);
        c.view_mut((cr, ov), (m, nv)).copy_from(&st.cv);
        d.rows_mut(cr, m).copy_from(&st.d);
        cr += m;
    }
    Dense { h, g, e, f, c, d, offsets }
}

/// Equality-constrained dense KKT solve on a given active set.
pub fn dense_oracle(dq: &Dense, active: &[usize]) -> (DVector<f64>, DVector<f64>) {
    let nz = dq.h.nrows();
    let neq = dq.e.nrows();
    let na = active.len();
    let dim = nz + neq + na;
    let mut k = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    k.view_mut((0, 0), (nz, nz)).copy_from(&dq.h);
    k.view_mut((nz, 0), (neq, nz)).copy_from(&dq.e);
    k.view_mut((0, nz), (nz, neq)).copy_from(&dq.e.transpose());
    for (j, &i) in active.iter().enumerate() {
        for c in 0..nz {
            k[(nz + neq + j, c)] = dq.c[(i, c)];
            k[(c, nz + neq + j)] = dq.c[(i, c)];
        }
        rhs[nz + neq + j] = dq.d[i];
    }
    rhs.rows_mut(0, nz).copy_from(&(-&dq.g));
    rhs.rows_mut(nz, neq).copy_from(&dq.f);
    let sol = k.lu().solve(&rhs).expect("oracle KKT singular");
    (sol.rows(0, nz).into_owned(), sol.rows(nz + neq, na).into_owned())
}

pub fn stack(qp: &QpProblem, sol: &QpSolution, dq: &Dense) -> (DVector<f64>, DVector<f64>) {
    let nz = dq.h.nrows();
    let mut z = DVector::zeros(nz);
    for (k, (ox, ov)) in dq.offsets.iter().enumerate() {
        z.rows_mut(*ox, qp.stages[k].nx()).copy_from(&sol.x[k]);
        z.rows_mut(*ov, qp.stages[k].nv()).copy_from(&sol.v[k]);
    }
    let lam = DVector::from_iterator(dq.d.len(), sol.lam.iter().flat_map(|l| l.iter().cloned()));
    (z, lam)
}
