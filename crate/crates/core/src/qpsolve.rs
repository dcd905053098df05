//! Convex QP `min ½xᵀQx + qᵀx  s.t.  Gx ≤ h, Ax = b` solved by a
//! primal-dual interior-point method with Mehrotra predictor-corrector steps.
//!
//! [`assemble_matching_qp`] builds the relaxed graph-matching instance
//! `min xᵀ((n-1)²I - M)x - bᵀx` over the partial doubly-stochastic polytope.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::sparse::SparseMatrix;
use crate::{pair_index, Error, Result};

/// Diagonal ridge added to the matching Hessian.
pub const RIDGE: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

const STEP_FRACTION: f64 = 0.99;
const DIVERGENCE: f64 = 1e14;
const REFINE_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Hessian `Q`, symmetric PSD.
    pub quad: DMatrix<f64>,
    /// Linear term `q`.
    pub lin: DVector<f64>,
    pub g: SparseMatrix,
    pub h: DVector<f64>,
    pub a: SparseMatrix,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        quad: DMatrix<f64>,
        lin: DVector<f64>,
        g: SparseMatrix,
        h: DVector<f64>,
        a: SparseMatrix,
        b_eq: DVector<f64>,
    ) -> Result<Self> {
        let n = lin.len();
        let checks = [
            (n, quad.nrows()),
            (n, quad.ncols()),
            (n, g.ncols()),
            (g.nrows(), h.len()),
            (n, a.ncols()),
            (a.nrows(), b_eq.len()),
        ];
        for (expected, found) in checks {
            if expected != found {
                return Err(Error::DimError { expected, found });
            }
        }
        Ok(Self {
            quad,
            lin,
            g,
            h,
            a,
            b_eq,
        })
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    /// Dual iterates diverged, which signals an empty feasible set.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
    pub dual_nonneg: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.complementarity,
            self.dual_nonneg,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn amax(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Max-norm of each KKT block at `(x, λ, ν)`, with slacks taken as `h - Gx`.
pub fn kkt_residuals(problem: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let p = problem;
    let grad = &p.quad * &sol.x + &p.lin + p.a.tr_mul_vec(&sol.nu) + p.g.tr_mul_vec(&sol.lambda);
    let slack = &p.h - p.g.mul_vec(&sol.x);
    KktResiduals {
        stationarity: amax(&grad),
        primal_eq: amax(&(p.a.mul_vec(&sol.x) - &p.b_eq)),
        primal_ineq: slack.iter().fold(0.0, |m, &s| m.max(-s)),
        complementarity: slack.iter().zip(sol.lambda.iter()).fold(0.0, |m, (s, l)| m.max((s * l).abs())),
        dual_nonneg: sol.lambda.iter().fold(0.0, |m, &l| m.max(-l)),
    }
}

/// Index bookkeeping for a matching QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingShape {
    pub n_d: usize,
    pub n_t: usize,
}

impl MatchingShape {
    /// `max(n_d, n_t)`.
    pub fn n(&self) -> usize {
        self.n_d.max(self.n_t)
    }

    pub fn dim(&self) -> usize {
        self.n_d * self.n_t
    }

    /// Detections carry the equality rows unless tracklets are strictly fewer.
    pub fn detections_equal(&self) -> bool {
        self.n_d <= self.n_t
    }
}

/// Builds `Q = 2((n-1)²I - M) + εI`, `q = -vec(B)` with one equality row per
/// entity on the smaller side and `≤ 1` rows for the larger side plus `-x ≤ 0`.
pub fn assemble_matching_qp(m: &SparseMatrix, b: &DMatrix<f64>) -> Result<QpProblem> {
    let shape = MatchingShape {
        n_d: b.nrows(),
        n_t: b.ncols(),
    };
    if shape.n_d == 0 || shape.n_t == 0 {
        return Err(Error::EmptyProblem {
            n_d: shape.n_d,
            n_t: shape.n_t,
        });
    }
    let dim = shape.dim();
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimError {
            expected: dim,
            found: m.nrows(),
        });
    }
    let base = ((shape.n() - 1) as f64).powi(2);
    let mut quad = DMatrix::from_diagonal_element(dim, dim, 2.0 * base + RIDGE);
    m.add_to_dense(&mut quad, -2.0);
    let lin = DVector::from_fn(dim, |p, _| -b[(p / shape.n_t, p % shape.n_t)]);

    let det_rows = || {
        (0..shape.n_d)
            .flat_map(|i| (0..shape.n_t).map(move |j| (i, pair_index(i, j, shape.n_t), 1.0)))
            .collect::<Vec<_>>()
    };
    let trk_rows = || {
        (0..shape.n_t)
            .flat_map(|j| (0..shape.n_d).map(move |i| (j, pair_index(i, j, shape.n_t), 1.0)))
            .collect::<Vec<_>>()
    };
    let (eq, n_eq, ineq, n_ineq) = if shape.detections_equal() {
        (det_rows(), shape.n_d, trk_rows(), shape.n_t)
    } else {
        (trk_rows(), shape.n_t, det_rows(), shape.n_d)
    };
    let mut g_trip = ineq;
    g_trip.extend((0..dim).map(|p| (n_ineq + p, p, -1.0)));
    let g = SparseMatrix::from_triplets(n_ineq + dim, dim, g_trip);
    let h = DVector::from_fn(n_ineq + dim, |r, _| if r < n_ineq { 1.0 } else { 0.0 });
    let a = SparseMatrix::from_triplets(n_eq, dim, eq);
    QpProblem::new(quad, lin, g, h, a, DVector::from_element(n_eq, 1.0))
}

fn presolve(p: &QpProblem) -> Result<()> {
    let infeasible_empty_row = |m: &SparseMatrix, rhs: &DVector<f64>, bad: fn(f64) -> bool| {
        (0..m.nrows()).any(|r| m.row(r).1.iter().all(|&v| v == 0.0) && bad(rhs[r]))
    };
    if infeasible_empty_row(&p.a, &p.b_eq, |b| b != 0.0) || infeasible_empty_row(&p.g, &p.h, |h| h < 0.0) {
        return Err(Error::Infeasible);
    }
    if !p.lin.iter().chain(p.h.iter()).chain(p.b_eq.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite QP data".into()));
    }
    Ok(())
}

/// Factorized reduced Newton system `[H Aᵀ; A 0]` with `H = Q + GᵀWG`.
struct Reduced {
    chol: Cholesky<f64, Dyn>,
    /// `H⁻¹ Aᵀ`.
    hinv_at: DMatrix<f64>,
    schur: Cholesky<f64, Dyn>,
}

impl Reduced {
    fn factor(p: &QpProblem, w: &DVector<f64>) -> Result<Self> {
        let mut hess = p.quad.clone();
        for r in 0..p.g.nrows() {
            let (cols, vals) = p.g.row(r);
            for (&ci, &vi) in cols.iter().zip(vals) {
                for (&cj, &vj) in cols.iter().zip(vals) {
                    hess[(ci, cj)] += w[r] * vi * vj;
                }
            }
        }
        let chol = match Cholesky::new(hess.clone()) {
            Some(c) => c,
            None => {
                // rounding with huge barrier weights; a tiny relative shift
                // is absorbed by iterative refinement
                let scale = hess.diagonal().amax();
                [1e-14, 1e-12, 1e-10]
                    .into_iter()
                    .find_map(|k| {
                        let mut shifted = hess.clone();
                        for d in 0..shifted.nrows() {
                            shifted[(d, d)] += k * scale;
                        }
                        Cholesky::new(shifted)
                    })
                    .ok_or(Error::Singular)?
            }
        };
        let at = p.a.transpose().to_dense();
        let hinv_at = chol.solve(&at);
        let schur = p.a.to_dense() * &hinv_at;
        let schur = Cholesky::new(schur).ok_or(Error::Singular)?;
        Ok(Self { chol, hinv_at, schur })
    }

    /// Solves `H dx + Aᵀdy = r1`, `A dx = r2`.
    fn solve(&self, p: &QpProblem, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let hinv_r1 = self.chol.solve(r1);
        let dy = self.schur.solve(&(p.a.mul_vec(&hinv_r1) - r2));
        let dx = hinv_r1 - &self.hinv_at * &dy;
        (dx, dy)
    }
}

struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

struct Direction {
    dx: DVector<f64>,
    ds: DVector<f64>,
    dz: DVector<f64>,
    dy: DVector<f64>,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .fold(f64::INFINITY, |a, (&x, &d)| a.min(-x / d))
}

/// Newton direction for the residuals `(r_d, r_p, r_g)` and complementarity
/// target `r_c` (the step drives `s∘z` towards `s∘z - r_c`).
fn direction(
    p: &QpProblem,
    it: &Iterate,
    sys: &Reduced,
    w: &DVector<f64>,
    r: (&DVector<f64>, &DVector<f64>, &DVector<f64>),
    r_c: &DVector<f64>,
) -> Direction {
    let (r_d, r_p, r_g) = r;
    let c_over_s = r_c.component_div(&it.s);
    let inner = w.component_mul(r_g) - &c_over_s;
    let r1 = -r_d - p.g.tr_mul_vec(&inner);
    let (dx, dy) = sys.solve(p, &r1, &-r_p);
    let g_dx = p.g.mul_vec(&dx);
    let ds = -r_g - &g_dx;
    let dz = w.component_mul(&(g_dx + r_g)) - c_over_s;
    Direction { dx, ds, dz, dy }
}

/// [`direction`] followed by iterative refinement against the unreduced
/// Newton system; the reduced Hessian gets badly conditioned as the
/// barrier weights grow.
fn refined_direction(
    p: &QpProblem,
    it: &Iterate,
    sys: &Reduced,
    w: &DVector<f64>,
    r: (&DVector<f64>, &DVector<f64>, &DVector<f64>),
    r_c: &DVector<f64>,
) -> Direction {
    let (r_d, r_p, r_g) = r;
    let mut d = direction(p, it, sys, w, r, r_c);
    for _ in 0..REFINE_STEPS {
        let e_d = r_d + &p.quad * &d.dx + p.a.tr_mul_vec(&d.dy) + p.g.tr_mul_vec(&d.dz);
        let e_p = r_p + p.a.mul_vec(&d.dx);
        let e_g = r_g + p.g.mul_vec(&d.dx) + &d.ds;
        let e_c = r_c + it.z.component_mul(&d.ds) + it.s.component_mul(&d.dz);
        let c = direction(p, it, sys, w, (&e_d, &e_p, &e_g), &e_c);
        d.dx += c.dx;
        d.ds += c.ds;
        d.dz += c.dz;
        d.dy += c.dy;
    }
    d
}

fn candidate(p: &QpProblem, it: &Iterate, iterations: usize, status: QpStatus) -> QpSolution {
    let x = it.x.map(|v| v.clamp(0.0, 1.0));
    let lambda = it.z.map(|v| v.max(0.0));
    QpSolution {
        objective: p.objective(&x),
        x,
        lambda,
        nu: it.y.clone(),
        status,
        iterations,
    }
}

/// Solves the QP; the returned solution has `status == Optimal` exactly when
/// every [`kkt_residuals`] block is at most `tol`. The primal output is
/// clipped to `[0, 1]`, which is the box implied by matching constraints.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let p = problem;
    presolve(p)?;
    let (m_ineq, n_eq) = (p.g.nrows(), p.a.nrows());

    // start from the equality-constrained minimizer of ½xᵀ(Q + GᵀG)x + (q - Gᵀh)ᵀx
    let ones = DVector::from_element(m_ineq, 1.0);
    let sys = Reduced::factor(p, &ones)?;
    let (x, y) = sys.solve(p, &(p.g.tr_mul_vec(&p.h) - &p.lin), &p.b_eq);
    let slack = &p.h - p.g.mul_vec(&x);
    let shift = |v: &DVector<f64>| {
        let lo = v.iter().fold(f64::INFINITY, |m, &a| m.min(a));
        if m_ineq == 0 || lo >= 1.0 {
            v.clone()
        } else {
            v.add_scalar(1.0 - lo)
        }
    };
    let s = shift(&slack);
    let z = shift(&(-&slack));
    let mut it = Iterate { x, s, z, y };
    debug_assert_eq!(it.y.len(), n_eq);

    let mut best: Option<(f64, QpSolution)> = None;
    for iter in 0..=max_iter {
        let out = candidate(p, &it, iter, QpStatus::Optimal);
        let res = kkt_residuals(p, &out).max();
        if res <= tol {
            return Ok(out);
        }
        if best.as_ref().map_or(true, |(r, _)| res < *r) {
            best = Some((res, out));
        }
        if iter == max_iter {
            break;
        }
        if amax(&it.z) > DIVERGENCE || amax(&it.y) > DIVERGENCE {
            return Ok(candidate(p, &it, iter, QpStatus::Infeasible));
        }

        let r_d = &p.quad * &it.x + &p.lin + p.a.tr_mul_vec(&it.y) + p.g.tr_mul_vec(&it.z);
        let r_p = p.a.mul_vec(&it.x) - &p.b_eq;
        let r_g = p.g.mul_vec(&it.x) + &it.s - &p.h;
        let sz = it.s.component_mul(&it.z);
        let mu = if m_ineq == 0 { 0.0 } else { sz.sum() / m_ineq as f64 };
        let w = it.z.component_div(&it.s);
        if !w.iter().all(|v| v.is_finite()) {
            break;
        }
        let Ok(sys) = Reduced::factor(p, &w) else {
            // barrier weights outgrew the factorization
            break;
        };
        let res = (&r_d, &r_p, &r_g);

        let aff = refined_direction(p, &it, &sys, &w, res, &sz);
        let alpha_aff = max_step(&it.s, &aff.ds).min(max_step(&it.z, &aff.dz)).min(1.0);
        let mu_aff = if m_ineq == 0 {
            0.0
        } else {
            (&it.s + alpha_aff * &aff.ds).dot(&(&it.z + alpha_aff * &aff.dz)) / m_ineq as f64
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };

        let r_c = sz + aff.ds.component_mul(&aff.dz) - DVector::from_element(m_ineq, sigma * mu);
        let d = refined_direction(p, &it, &sys, &w, res, &r_c);
        let alpha = (STEP_FRACTION * max_step(&it.s, &d.ds).min(max_step(&it.z, &d.dz))).min(1.0);

        it.x += alpha * d.dx;
        it.s += alpha * d.ds;
        it.z += alpha * d.dz;
        it.y += alpha * d.dy;
    }
    let (_, out) = best.expect("at least one iterate");
    Ok(QpSolution {
        status: QpStatus::MaxIter,
        ..out
    })
}
