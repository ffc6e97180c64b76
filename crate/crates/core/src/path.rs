//! Arc-length parameterized C² paths.
//!
//! A path is built from a list of 3D samples in two passes: an interpolating
//! cubic spline in chord length, then a resampling of that curve at uniform
//! arc length and a second interpolating spline with the arc length itself as
//! knot parameter. The second spline is accepted once its speed is within the
//! requested tolerance of one everywhere it is probed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("at least 4 samples are required, got {0}")]
    TooFewPoints(usize),
    #[error("samples {0} and {1} coincide")]
    DegeneratePoints(usize, usize),
    #[error("path parameter {psi} outside [0, {length}] on an open path")]
    OutOfRange { psi: f64, length: f64 },
    #[error("arc-length resampling did not reach unit speed within {0}")]
    NotUnitSpeed(f64),
    #[error("path table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid path specification: {0}")]
    Spec(String),
}

/// Cubic spline through 3D points, C² at interior knots (and at the seam when
/// closed). Segment `j` covers `[knots[j], knots[j+1]]` with local coordinate
/// `tau = s - knots[j]`.
#[derive(Clone, Debug)]
struct Spline3 {
    knots: Vec<f64>,
    coef: Vec<[[f64; 4]; 3]>,
    closed: bool,
    uniform: Option<f64>,
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / m } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Cyclic tridiagonal solve via Sherman-Morrison. `sub[0]` couples row 0 to
/// the last unknown and `sup[n-1]` couples the last row to unknown 0.
fn solve_cyclic(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let alpha = sup[n - 1];
    let beta = sub[0];
    let gamma = -diag[0];
    let mut bb = diag.to_vec();
    bb[0] -= gamma;
    bb[n - 1] -= alpha * beta / gamma;
    let x = solve_tridiagonal(sub, &bb, sup, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = solve_tridiagonal(sub, &bb, sup, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(z.iter()).map(|(xi, zi)| xi - fact * zi).collect()
}

impl Spline3 {
    /// Interpolating spline; natural end conditions when open, periodic when
    /// closed (the closing segment from the last point back to the first is
    /// added implicitly).
    fn fit(points: &[[f64; 3]], knots: &[f64], closed: bool) -> Self {
        let np = points.len();
        let nseg = if closed { np } else { np - 1 };
        let h: Vec<f64> = (0..nseg).map(|j| knots[j + 1] - knots[j]).collect();
        let y = |j: usize, c: usize| points[j % np][c];
        let mut coef = vec![[[0.0; 4]; 3]; nseg];
        for c in 0..3 {
            let second = if closed {
                let mut sub = vec![0.0; np];
                let mut diag = vec![0.0; np];
                let mut sup = vec![0.0; np];
                let mut rhs = vec![0.0; np];
                for j in 0..np {
                    let hp = h[(j + nseg - 1) % nseg];
                    let hn = h[j];
                    sub[j] = hp;
                    diag[j] = 2.0 * (hp + hn);
                    sup[j] = hn;
                    rhs[j] = 6.0 * ((y(j + 1, c) - y(j, c)) / hn - (y(j, c) - y(j + np - 1, c)) / hp);
                }
                let mut m = solve_cyclic(&sub, &diag, &sup, &rhs);
                m.push(m[0]);
                m
            } else {
                let ni = np - 2;
                let mut m = vec![0.0; np];
                if ni > 0 {
                    let mut sub = vec![0.0; ni];
                    let mut diag = vec![0.0; ni];
                    let mut sup = vec![0.0; ni];
                    let mut rhs = vec![0.0; ni];
                    for i in 0..ni {
                        let j = i + 1;
                        sub[i] = h[j - 1];
                        diag[i] = 2.0 * (h[j - 1] + h[j]);
                        sup[i] = h[j];
                        rhs[i] = 6.0 * ((y(j + 1, c) - y(j, c)) / h[j] - (y(j, c) - y(j - 1, c)) / h[j - 1]);
                    }
                    let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);
                    m[1..=ni].copy_from_slice(&inner);
                }
                m
            };
            for j in 0..nseg {
                let (y0, y1) = (y(j, c), y(j + 1, c));
                let (m0, m1) = (second[j], second[j + 1]);
                coef[j][c] = [
                    y0,
                    (y1 - y0) / h[j] - h[j] * (2.0 * m0 + m1) / 6.0,
                    m0 / 2.0,
                    (m1 - m0) / (6.0 * h[j]),
                ];
            }
        }
        let first = h[0];
        let uniform = h
            .iter()
            .all(|hj| (hj - first).abs() <= 1e-9 * first)
            .then_some(first);
        Self {
            knots: knots[..=nseg].to_vec(),
            coef,
            closed,
            uniform,
        }
    }

    fn length(&self) -> f64 {
        self.knots[self.knots.len() - 1] - self.knots[0]
    }

    fn segments(&self) -> usize {
        self.coef.len()
    }

    /// Segment index for an in-range parameter value.
    fn segment(&self, s: f64) -> usize {
        let n = self.segments();
        let j = match self.uniform {
            Some(h) => ((s - self.knots[0]) / h).floor() as isize,
            None => self.knots.partition_point(|k| *k <= s) as isize - 1,
        };
        j.clamp(0, n as isize - 1) as usize
    }

    /// Maps a parameter into the base interval for closed splines.
    fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            let l = self.length();
            let w = s - l * (s / l).floor();
            if w >= l {
                0.0
            } else {
                w
            }
        } else {
            s
        }
    }

    /// Position and first two derivatives at a parameter in generic arithmetic.
    /// Open splines are extended linearly past their ends.
    fn eval_generic<T: Real>(&self, s: T) -> ([T; 3], [T; 3]) {
        let sv = s.re();
        let shift = self.wrap(sv) - sv;
        let s = s + shift;
        let sv = sv + shift;
        let l = self.length();
        if !self.closed && (sv < 0.0 || sv > l) {
            let (end, j, tau_end) = if sv < 0.0 {
                (0.0, 0usize, 0.0)
            } else {
                let j = self.segments() - 1;
                (l, j, self.knots[j + 1] - self.knots[j])
            };
            let mut pos = [T::cst(0.0); 3];
            let mut vel = [T::cst(0.0); 3];
            for c in 0..3 {
                let [a, b, cc, d] = self.coef[j][c];
                let p0 = a + tau_end * (b + tau_end * (cc + tau_end * d));
                let v0 = b + tau_end * (2.0 * cc + 3.0 * tau_end * d);
                pos[c] = (s - end) * v0 + p0;
                vel[c] = T::cst(v0);
            }
            return (pos, vel);
        }
        let j = self.segment(sv);
        let tau = s - self.knots[j];
        let mut pos = [T::cst(0.0); 3];
        let mut vel = [T::cst(0.0); 3];
        for c in 0..3 {
            let [a, b, cc, d] = self.coef[j][c];
            pos[c] = ((tau * d + cc) * tau + b) * tau + a;
            vel[c] = (tau * (3.0 * d) + 2.0 * cc) * tau + b;
        }
        (pos, vel)
    }

    /// Position, first and second derivative at an in-range parameter.
    fn eval3(&self, s: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let s = self.wrap(s).clamp(self.knots[0], self.knots[self.knots.len() - 1]);
        let j = self.segment(s);
        let t = s - self.knots[j];
        let mut p = [0.0; 3];
        let mut v = [0.0; 3];
        let mut a = [0.0; 3];
        for c in 0..3 {
            let [c0, c1, c2, c3] = self.coef[j][c];
            p[c] = c0 + t * (c1 + t * (c2 + t * c3));
            v[c] = c1 + t * (2.0 * c2 + 3.0 * t * c3);
            a[c] = 2.0 * c2 + 6.0 * t * c3;
        }
        (p, v, a)
    }

    fn speed_in_segment(&self, j: usize, tau: f64) -> f64 {
        let mut v2 = 0.0;
        for c in 0..3 {
            let [_, b, cc, d] = self.coef[j][c];
            let v = b + tau * (2.0 * cc + 3.0 * tau * d);
            v2 += v * v;
        }
        v2.sqrt()
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b == a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive_simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 30)
}

/// Position, unit tangent and curvature at a path parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathFrame {
    pub position: [f64; 3],
    pub tangent: [f64; 3],
    pub curvature: f64,
}

/// Default spacing of the dense sample cache used for global projection.
pub const DEFAULT_CACHE_SPACING: f64 = 0.5;
/// Default unit-speed tolerance for path construction.
pub const DEFAULT_SPEED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ArcLengthPath {
    spline: Spline3,
    closed: bool,
    cache_spacing: f64,
    cache: Vec<(f64, [f64; 3])>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl ArcLengthPath {
    /// Builds an arc-length parameterized path through `samples`.
    ///
    /// `tolerance` bounds `| |r'(psi)| - 1 |`. For closed paths the last sample
    /// may repeat the first; it is dropped.
    pub fn build(samples: &[[f64; 3]], closed: bool, tolerance: f64) -> Result<Self, PathError> {
        Self::build_with_cache(samples, closed, tolerance, DEFAULT_CACHE_SPACING)
    }

    pub fn build_with_cache(
        samples: &[[f64; 3]],
        closed: bool,
        tolerance: f64,
        cache_spacing: f64,
    ) -> Result<Self, PathError> {
        let mut pts: Vec<[f64; 3]> = samples.to_vec();
        if closed && pts.len() > 1 && dist2(&pts[0], &pts[pts.len() - 1]) < 1e-18 {
            pts.pop();
        }
        if pts.len() < 4 {
            return Err(PathError::TooFewPoints(pts.len()));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PathError::Spec("non-finite sample".into()));
        }
        if !(tolerance > 0.0) || !(cache_spacing > 0.0) {
            return Err(PathError::Spec("tolerance and cache spacing must be positive".into()));
        }
        let np = pts.len();
        let nseg = if closed { np } else { np - 1 };
        let mut knots = vec![0.0; nseg + 1];
        for j in 0..nseg {
            let d = dist2(&pts[j], &pts[(j + 1) % np]).sqrt();
            if d < 1e-9 {
                return Err(PathError::DegeneratePoints(j, (j + 1) % np));
            }
            knots[j + 1] = knots[j] + d;
        }
        let chord = Spline3::fit(&pts, &knots, closed);

        // Cumulative arc length of the chord spline.
        let mut cum = vec![0.0; nseg + 1];
        for j in 0..nseg {
            let hj = knots[j + 1] - knots[j];
            cum[j + 1] = cum[j] + adaptive_simpson(|t| chord.speed_in_segment(j, t), 0.0, hj, 1e-12 * hj.max(1.0));
        }
        let length = cum[nseg];

        let locate = |s: f64| -> [f64; 3] {
            let j = (cum.partition_point(|c| *c <= s) as isize - 1).clamp(0, nseg as isize - 1) as usize;
            let hj = knots[j + 1] - knots[j];
            let target = s - cum[j];
            let seg_len = cum[j + 1] - cum[j];
            let mut tau = (target / seg_len * hj).clamp(0.0, hj);
            let (mut lo, mut hi) = (0.0, hj);
            for _ in 0..40 {
                let g = adaptive_simpson(|t| chord.speed_in_segment(j, t), 0.0, tau, 1e-13) - target;
                if g.abs() < 1e-12 {
                    break;
                }
                if g > 0.0 {
                    hi = tau;
                } else {
                    lo = tau;
                }
                let next = tau - g / chord.speed_in_segment(j, tau);
                tau = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            }
            chord.eval3(knots[j] + tau).0
        };

        let mut spacing = 1.0f64.min(length / 16.0);
        for _ in 0..6 {
            let m = ((length / spacing).ceil() as usize).max(if closed { 4 } else { 3 });
            let h = length / m as f64;
            let count = if closed { m } else { m + 1 };
            let resampled: Vec<[f64; 3]> = (0..count).map(|i| locate(i as f64 * h)).collect();
            let uknots: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
            let spline = Spline3::fit(&resampled, &uknots, closed);
            let worst = max_speed_error(&spline, 8);
            if worst <= tolerance {
                let mut path = Self {
                    spline,
                    closed,
                    cache_spacing,
                    cache: Vec::new(),
                };
                path.rebuild_cache();
                return Ok(path);
            }
            spacing /= 2.0;
        }
        Err(PathError::NotUnitSpeed(tolerance))
    }

    fn rebuild_cache(&mut self) {
        let l = self.total_length();
        let n = (l / self.cache_spacing).ceil().max(1.0) as usize;
        let step = l / n as f64;
        let count = if self.closed { n } else { n + 1 };
        self.cache = (0..count)
            .map(|i| {
                let psi = i as f64 * step;
                (psi, self.spline.eval3(psi).0)
            })
            .collect();
        self.cache_spacing = step;
    }

    pub fn total_length(&self) -> f64 {
        self.spline.length()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Actual spacing of the dense sample cache.
    pub fn cache_spacing(&self) -> f64 {
        self.cache_spacing
    }

    /// Knot parameters of the arc-length spline.
    pub fn knots(&self) -> &[f64] {
        &self.spline.knots
    }

    /// Wraps a parameter into `[0, L)` on closed paths; identity on open ones.
    pub fn wrap(&self, psi: f64) -> f64 {
        self.spline.wrap(psi)
    }

    /// Signed shortest parameter difference `b - a` (modular on closed paths).
    pub fn param_delta(&self, a: f64, b: f64) -> f64 {
        let d = b - a;
        if self.closed {
            let l = self.total_length();
            d - l * (d / l).round()
        } else {
            d
        }
    }

    /// Position at `psi`; closed paths wrap, open paths extend linearly.
    pub fn position(&self, psi: f64) -> [f64; 3] {
        self.spline.eval_generic(psi).0
    }

    /// Position and first derivative in generic arithmetic. Differentiating
    /// through this gives the path Jacobians used by the contouring problem.
    pub fn eval_generic<T: Real>(&self, psi: T) -> ([T; 3], [T; 3]) {
        self.spline.eval_generic(psi)
    }

    /// Position and first/second derivatives (in-range parameters only; open
    /// paths clamp).
    pub fn derivatives(&self, psi: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        self.spline.eval3(psi)
    }

    pub fn frame_at(&self, psi: f64) -> Result<PathFrame, PathError> {
        let l = self.total_length();
        if !self.closed && !(-1e-9..=l + 1e-9).contains(&psi) {
            return Err(PathError::OutOfRange { psi, length: l });
        }
        if !psi.is_finite() {
            return Err(PathError::OutOfRange { psi, length: l });
        }
        let (p, v, a) = self.spline.eval3(psi);
        let speed = norm(&v);
        let tangent = [v[0] / speed, v[1] / speed, v[2] / speed];
        let cross = [
            v[1] * a[2] - v[2] * a[1],
            v[2] * a[0] - v[0] * a[2],
            v[0] * a[1] - v[1] * a[0],
        ];
        Ok(PathFrame {
            position: p,
            tangent,
            curvature: norm(&cross) / speed.powi(3),
        })
    }

    fn dist2_at(&self, point: &[f64; 3], psi: f64) -> f64 {
        dist2(point, &self.position(psi))
    }

    /// Golden-section refinement on `[a, b]` (unwrapped parameters).
    fn refine(&self, point: &[f64; 3], a: f64, b: f64) -> f64 {
        let (mut a, mut b) = (a, b);
        if !self.closed {
            a = a.max(0.0);
            b = b.min(self.total_length());
        }
        let invphi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - invphi * (b - a);
        let mut d = a + invphi * (b - a);
        let mut fc = self.dist2_at(point, c);
        let mut fd = self.dist2_at(point, d);
        for _ in 0..80 {
            if (b - a).abs() < 1e-11 {
                break;
            }
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - invphi * (b - a);
                fc = self.dist2_at(point, c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + invphi * (b - a);
                fd = self.dist2_at(point, d);
            }
        }
        0.5 * (a + b)
    }

    /// Refines around a coarse candidate and never returns something worse
    /// than the candidate itself.
    fn polish(&self, point: &[f64; 3], candidate: f64, half_width: f64) -> f64 {
        let refined = self.refine(point, candidate - half_width, candidate + half_width);
        let best = if self.dist2_at(point, refined) <= self.dist2_at(point, candidate) {
            refined
        } else {
            candidate
        };
        self.wrap(best)
    }

    /// Globally closest parameter: exhaustive scan of the dense cache, then a
    /// 1-D refinement around the best sample. Ties go to the smallest `psi`.
    pub fn closest_param_global(&self, point: &[f64; 3]) -> f64 {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, (_, p)) in self.cache.iter().enumerate() {
            let d = dist2(point, p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.polish(point, self.cache[best].0, self.cache_spacing)
    }

    /// Closest parameter within `[hint - window, hint + window]`. Falls back to
    /// the global search when the local minimum sits on the window boundary.
    pub fn closest_param_local(&self, point: &[f64; 3], hint: f64, window: f64) -> f64 {
        let l = self.total_length();
        if self.closed && 2.0 * window >= l {
            return self.closest_param_global(point);
        }
        let (mut lo, mut hi) = (hint - window, hint + window);
        let (mut lo_is_boundary, mut hi_is_boundary) = (true, true);
        if !self.closed {
            if lo <= 0.0 {
                lo = 0.0;
                lo_is_boundary = false;
            }
            if hi >= l {
                hi = l;
                hi_is_boundary = false;
            }
        }
        let n = ((hi - lo) / self.cache_spacing).ceil().max(2.0) as usize;
        let step = (hi - lo) / n as f64;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..=n {
            let d = self.dist2_at(point, lo + i as f64 * step);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if (best == 0 && lo_is_boundary) || (best == n && hi_is_boundary) {
            return self.closest_param_global(point);
        }
        self.polish(point, lo + best as f64 * step, step)
    }

    /// Smallest radius of curvature seen on `probes` uniform samples.
    pub fn min_curvature_radius(&self, probes: usize) -> f64 {
        let l = self.total_length();
        let max_k = (0..probes)
            .map(|i| self.frame_at(i as f64 * l / probes as f64).map(|f| f.curvature).unwrap_or(0.0))
            .fold(0.0, f64::max);
        1.0 / max_k
    }

    /// Largest climb or descent angle demanded by the path.
    pub fn max_flight_path_angle(&self, probes: usize) -> f64 {
        let l = self.total_length();
        (0..probes)
            .filter_map(|i| self.frame_at(i as f64 * l / probes as f64).ok())
            .map(|f| {
                let lateral = (f.tangent[0].powi(2) + f.tangent[1].powi(2)).sqrt();
                (f.tangent[2].abs() / lateral).atan()
            })
            .fold(0.0, f64::max)
    }

    /// Largest deviation from unit speed over `probes` uniform samples.
    pub fn max_speed_deviation(&self, probes: usize) -> f64 {
        let l = self.total_length();
        (0..=probes)
            .map(|i| {
                let psi = (i as f64 * l / probes as f64).min(l * (1.0 - 1e-12));
                (norm(&self.spline.eval3(psi).1) - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Samples the path at roughly `spacing` and writes the plain-text table.
    pub fn to_table(&self, spacing: f64) -> String {
        let l = self.total_length();
        let n = (l / spacing).ceil().max(1.0) as usize;
        let count = if self.closed { n } else { n + 1 };
        let mut out = String::new();
        out.push_str(&format!("# closed: {}\n", self.closed));
        out.push_str("# n e d\n");
        for i in 0..count {
            let p = self.position(i as f64 * l / n as f64);
            out.push_str(&format!("{:.6} {:.6} {:.6}\n", p[0], p[1], p[2]));
        }
        out
    }
}

fn max_speed_error(spline: &Spline3, per_segment: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..spline.segments() {
        let h = spline.knots[j + 1] - spline.knots[j];
        for i in 0..=per_segment {
            let tau = h * i as f64 / per_segment as f64;
            worst = worst.max((spline.speed_in_segment(j, tau) - 1.0).abs());
        }
    }
    worst
}

/// Parsed plain-text waypoint table.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointTable {
    pub points: Vec<[f64; 3]>,
    /// Set by a `# closed: true|false` header line when present.
    pub closed: Option<bool>,
}

/// Parses whitespace- or comma-separated `n e d` rows; `#` starts a comment.
pub fn parse_table(text: &str) -> Result<WaypointTable, PathError> {
    let mut points = Vec::new();
    let mut closed = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("closed:") {
                closed = Some(v.trim().parse::<bool>().map_err(|e| PathError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>)
            .collect();
        let vals = vals.map_err(|e| PathError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if vals.len() != 3 {
            return Err(PathError::Parse {
                line: i + 1,
                msg: format!("expected 3 columns (n e d), found {}", vals.len()),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(WaypointTable { points, closed })
}

/// Closed Lissajous figure
/// `n = a_n sin(f_n t + phase)`, `e = a_e sin(f_e t)`,
/// `d = -(alt_offset + a_d sin(f_d t + phase_d))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LissajousSpec {
    pub amp_n: f64,
    pub amp_e: f64,
    pub amp_d: f64,
    pub freq_n: u32,
    pub freq_e: u32,
    pub freq_d: u32,
    pub phase: f64,
    #[serde(default)]
    pub phase_d: f64,
    pub alt_offset: f64,
}

impl LissajousSpec {
    pub fn point(&self, t: f64) -> [f64; 3] {
        [
            self.amp_n * (self.freq_n as f64 * t + self.phase).sin(),
            self.amp_e * (self.freq_e as f64 * t).sin(),
            -(self.alt_offset + self.amp_d * (self.freq_d as f64 * t + self.phase_d).sin()),
        ]
    }
}

pub fn lissajous_path(spec: &LissajousSpec, samples: usize) -> Result<ArcLengthPath, PathError> {
    if !(spec.amp_n > 0.0 && spec.amp_e > 0.0 && spec.amp_d >= 0.0) {
        return Err(PathError::Spec("Lissajous amplitudes must be positive".into()));
    }
    if spec.freq_n == 0 || spec.freq_e == 0 {
        return Err(PathError::Spec("Lissajous frequencies must be positive integers".into()));
    }
    if samples < 64 {
        return Err(PathError::Spec(format!("at least 64 samples required, got {samples}")));
    }
    let pts: Vec<[f64; 3]> = (0..samples)
        .map(|i| spec.point(i as f64 * std::f64::consts::TAU / samples as f64))
        .collect();
    ArcLengthPath::build(&pts, true, DEFAULT_SPEED_TOLERANCE)
}

/// The four shipped test paths. Paths 1 and 2 are flat at 100 m; 3 and 4
/// oscillate between 80 and 120 m.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathPreset {
    #[serde(rename = "path1")]
    Path1,
    #[serde(rename = "path2")]
    Path2,
    #[serde(rename = "path3")]
    Path3,
    #[serde(rename = "path4")]
    Path4,
}

/// Sample count used to build the presets.
pub const PRESET_SAMPLES: usize = 2048;

impl PathPreset {
    pub const ALL: [PathPreset; 4] = [Self::Path1, Self::Path2, Self::Path3, Self::Path4];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Path1 => "path1",
            Self::Path2 => "path2",
            Self::Path3 => "path3",
            Self::Path4 => "path4",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, PathError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                PathError::Spec(format!(
                    "unknown path preset `{name}`; valid presets: path1, path2, path3, path4"
                ))
            })
    }

    /// Target minimum radius of curvature, meters.
    pub fn min_radius_target(&self) -> f64 {
        match self {
            Self::Path1 => 41.7,
            Self::Path2 => 6.9,
            Self::Path3 => 30.2,
            Self::Path4 => 11.9,
        }
    }

    pub fn spec(&self) -> LissajousSpec {
        use std::f64::consts::FRAC_PI_2;
        match self {
            Self::Path1 => LissajousSpec {
                amp_n: 199.755,
                amp_e: 99.878,
                amp_d: 0.0,
                freq_n: 1,
                freq_e: 2,
                freq_d: 1,
                phase: 0.0,
                phase_d: 0.0,
                alt_offset: 100.0,
            },
            Self::Path2 => LissajousSpec {
                amp_n: 76.841,
                amp_e: 76.841,
                amp_d: 0.0,
                freq_n: 3,
                freq_e: 2,
                freq_d: 1,
                phase: FRAC_PI_2,
                phase_d: 0.0,
                alt_offset: 100.0,
            },
            Self::Path3 => LissajousSpec {
                amp_n: 135.440,
                amp_e: 62.567,
                amp_d: 20.0,
                freq_n: 1,
                freq_e: 2,
                freq_d: 1,
                phase: 0.0,
                phase_d: 0.0,
                alt_offset: 100.0,
            },
            Self::Path4 => LissajousSpec {
                amp_n: 112.590,
                amp_e: 56.295,
                amp_d: 20.0,
                freq_n: 2,
                freq_e: 3,
                freq_d: 1,
                phase: 0.0,
                phase_d: FRAC_PI_2,
                alt_offset: 100.0,
            },
        }
    }

    pub fn build(&self) -> Result<ArcLengthPath, PathError> {
        lissajous_path(&self.spec(), PRESET_SAMPLES)
    }
}
