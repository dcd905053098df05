//! Differentiable graph-matching layer.
//!
//! The forward pass solves the relaxed matching QP. The backward pass
//! differentiates the KKT conditions at the optimum: with the active
//! constraints `C x = d` held fixed, the adjoint `v` solves
//! `[Q Cᵀ; C 0] [v; w] = [g; 0]`, giving `dL/dq = -v` and `dL/dQ = -v xᵀ`.
//! The system is solved in the null space of `C`, which tolerates the
//! redundant rows that square problems always produce.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::qpsolve::{
    assemble_matching_qp, solve_qp, MatchingShape, QpProblem, QpSolution, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::sparse::SparseMatrix;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 1e-3;
pub const EPS_LOG: f64 = 1e-7;
/// Diagonal shift used when the reduced KKT Hessian is singular.
pub const EPS_KKT: f64 = 1e-10;

/// Everything the backward pass needs from a forward solve.
#[derive(Debug, Clone)]
pub struct MatchCache {
    pub shape: MatchingShape,
    pub m: SparseMatrix,
    pub problem: QpProblem,
    pub solution: QpSolution,
}

#[derive(Debug, Clone)]
pub struct ScoreMap {
    /// `n_d x n_t` scores, `X[i, j] = x[p(i, j)]`.
    pub x: DMatrix<f64>,
    pub cache: MatchCache,
}

impl ScoreMap {
    pub fn status(&self) -> QpStatus {
        self.cache.solution.status
    }
}

pub fn gm_forward(m: &SparseMatrix, b: &DMatrix<f64>) -> Result<ScoreMap> {
    gm_forward_with(m, b, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn gm_forward_with(m: &SparseMatrix, b: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<ScoreMap> {
    let problem = assemble_matching_qp(m, b)?;
    let solution = solve_qp(&problem, tol, max_iter)?;
    let shape = MatchingShape {
        n_d: b.nrows(),
        n_t: b.ncols(),
    };
    let x = DMatrix::from_fn(shape.n_d, shape.n_t, |i, j| solution.x[i * shape.n_t + j]);
    Ok(ScoreMap {
        x,
        cache: MatchCache {
            shape,
            m: m.clone(),
            problem,
            solution,
        },
    })
}

#[derive(Debug, Clone)]
pub struct MatchGradients {
    /// `dL/dM` on the sparsity pattern of `M`; each stored entry is the
    /// derivative for a symmetric perturbation split evenly over `(a, b)` and
    /// `(b, a)`, so the matrix is symmetric.
    pub grad_m: SparseMatrix,
    pub grad_b: DMatrix<f64>,
    /// Some constraint was weakly active (both slack and multiplier small).
    pub degenerate: bool,
    /// The reduced system needed the `EPS_KKT` shift.
    pub regularized: bool,
}

/// Ratio above which `min(λ, s) / max(λ, s)` counts as weakly active.
const DEGENERACY_RATIO: f64 = 1e-3;

pub fn gm_backward(cache: &MatchCache, grad_x: &DMatrix<f64>) -> Result<MatchGradients> {
    let shape = cache.shape;
    if grad_x.shape() != (shape.n_d, shape.n_t) {
        return Err(Error::DimError {
            expected: shape.n_d * shape.n_t,
            found: grad_x.len(),
        });
    }
    if cache.solution.status != QpStatus::Optimal {
        return Err(Error::NotOptimal);
    }
    let p = &cache.problem;
    let sol = &cache.solution;
    let n = p.dim();
    let g = DVector::from_fn(n, |k, _| grad_x[(k / shape.n_t, k % shape.n_t)]);

    let slack = &p.h - p.g.mul_vec(&sol.x);
    let mut degenerate = false;
    let mut rows: Vec<Vec<(usize, f64)>> = (0..p.a.nrows())
        .map(|r| {
            let (c, v) = p.a.row(r);
            c.iter().copied().zip(v.iter().copied()).collect()
        })
        .collect();
    for r in 0..p.g.nrows() {
        let (lam, s) = (sol.lambda[r], slack[r].max(0.0));
        let (lo, hi) = (lam.min(s), lam.max(s));
        if hi > 0.0 && lo / hi > DEGENERACY_RATIO {
            degenerate = true;
        }
        if lam > s {
            let (c, v) = p.g.row(r);
            rows.push(c.iter().copied().zip(v.iter().copied()).collect());
        }
    }

    // null space of the active constraints from the spectrum of CᵀC
    let mut ctc = DMatrix::<f64>::zeros(n, n);
    for row in &rows {
        for &(a, va) in row {
            for &(b, vb) in row {
                ctc[(a, b)] += va * vb;
            }
        }
    }
    let eig = ctc.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let null: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] <= 1e-9 * scale).collect();
    let z = DMatrix::from_fn(n, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);

    let mut regularized = false;
    let v = if null.is_empty() {
        DVector::zeros(n)
    } else {
        let zqz = z.transpose() * &p.quad * &z;
        let zqz = (&zqz + zqz.transpose()) * 0.5;
        let chol = match zqz.clone().cholesky() {
            Some(c) => c,
            None => {
                regularized = true;
                (zqz + DMatrix::identity(null.len(), null.len()) * EPS_KKT)
                    .cholesky()
                    .ok_or(Error::Singular)?
            }
        };
        &z * chol.solve(&(z.transpose() * &g))
    };

    let x = &sol.x;
    let grad_m = cache.m.map_values(|a, b, _| v[a] * x[b] + x[a] * v[b]);
    let grad_b = DMatrix::from_fn(shape.n_d, shape.n_t, |i, j| v[i * shape.n_t + j]);
    if degenerate || regularized {
        log::debug!("gm_backward: degenerate={degenerate} regularized={regularized}");
    }
    Ok(MatchGradients {
        grad_m,
        grad_b,
        degenerate,
        regularized,
    })
}

/// Row-wise softmax of `X / τ`.
pub fn sharpen(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let mut out = x / tau;
    for mut row in out.row_iter_mut() {
        let top = row.max();
        row.apply(|v| *v = (*v - top).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Pulls `dL/dŶ` back through [`sharpen`].
pub fn sharpen_backward(yhat: &DMatrix<f64>, grad_yhat: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(yhat.nrows(), yhat.ncols());
    for r in 0..yhat.nrows() {
        let inner: f64 = (0..yhat.ncols()).map(|c| yhat[(r, c)] * grad_yhat[(r, c)]).sum();
        for c in 0..yhat.ncols() {
            out[(r, c)] = yhat[(r, c)] * (grad_yhat[(r, c)] - inner) / tau;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Gradient with respect to the loss input (`Ŷ` for [`wbce_loss`], `X`
    /// for [`matching_loss`]).
    pub grad: DMatrix<f64>,
}

/// Weighted binary cross entropy with positive weight `k = n_t - 1`.
pub fn wbce_loss(yhat: &DMatrix<f64>, y: &DMatrix<f64>, n_t: usize) -> Result<LossReport> {
    if yhat.shape() != y.shape() {
        return Err(Error::DimError {
            expected: y.len(),
            found: yhat.len(),
        });
    }
    let k = n_t.saturating_sub(1) as f64;
    let count = y.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(y.nrows(), y.ncols());
    for (idx, (&p, &t)) in yhat.iter().zip(y.iter()).enumerate() {
        let pc = p.clamp(EPS_LOG, 1.0 - EPS_LOG);
        loss -= k * t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        if p > EPS_LOG && p < 1.0 - EPS_LOG {
            grad[idx] = -(k * t / pc - (1.0 - t) / (1.0 - pc)) / count;
        }
    }
    Ok(LossReport {
        loss: loss / count,
        grad,
    })
}

/// `wbce_loss(sharpen(X, τ), Y)` with the gradient taken with respect to `X`.
pub fn matching_loss(x: &DMatrix<f64>, y: &DMatrix<f64>, tau: f64) -> Result<LossReport> {
    let yhat = sharpen(x, tau);
    let rep = wbce_loss(&yhat, y, x.ncols())?;
    Ok(LossReport {
        loss: rep.loss,
        grad: sharpen_backward(&yhat, &rep.grad, tau),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub degenerate: bool,
    pub regularized: bool,
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-11;
const FD_MAX_ITER: usize = 300;
const FD_M_SAMPLES: usize = 8;

/// Compares [`gm_backward`] with central differences of `L(X) = Σ R∘X` for a
/// seeded random `R`, over every entry of `B` and a random subset of
/// symmetric entry pairs of `M`.
pub fn finite_diff_check(m: &SparseMatrix, b: &DMatrix<f64>, seed: u64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = DMatrix::from_fn(b.nrows(), b.ncols(), |_, _| rng.gen_range(-1.0..1.0));
    let loss = |m: &SparseMatrix, b: &DMatrix<f64>| -> Result<f64> {
        let s = gm_forward_with(m, b, FD_TOL, FD_MAX_ITER)?;
        if s.status() != QpStatus::Optimal {
            return Err(Error::MaxIter {
                iterations: s.cache.solution.iterations,
            });
        }
        Ok(s.x.component_mul(&weights).sum())
    };

    let fwd = gm_forward_with(m, b, FD_TOL, FD_MAX_ITER)?;
    let grads = gm_backward(&fwd.cache, &weights)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for idx in 0..b.len() {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp[idx] += FD_STEP;
        bm[idx] -= FD_STEP;
        numeric.push((loss(m, &bp)? - loss(m, &bm)?) / (2.0 * FD_STEP));
        analytic.push(grads.grad_b[idx]);
    }

    let mut upper: Vec<(usize, usize)> = m.iter().filter(|&(r, c, _)| r < c).map(|(r, c, _)| (r, c)).collect();
    for k in 0..upper.len().min(FD_M_SAMPLES) {
        let pick = rng.gen_range(k..upper.len());
        upper.swap(k, pick);
    }
    for &(r, c) in upper.iter().take(FD_M_SAMPLES) {
        let shift = |delta: f64| {
            m.map_values(|a, bb, v| if (a, bb) == (r, c) || (a, bb) == (c, r) { v + delta } else { v })
        };
        numeric.push((loss(&shift(FD_STEP), b)? - loss(&shift(-FD_STEP), b)?) / (2.0 * FD_STEP));
        analytic.push(grads.grad_m.get(r, c) + grads.grad_m.get(c, r));
    }

    Ok(FdReport {
        max_rel_error: relative_error(&analytic, &numeric),
        degenerate: grads.degenerate,
        regularized: grads.regularized,
    })
}

/// `max |a - f| / max(max |f|, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1e-6f64, |m, f| m.max(f.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::build_affinity;
    use crate::graphkit::{normalize_feature, Bbox, ViewGraph};
    use rand::Rng;

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ViewGraph {
        let f: Vec<_> = (0..n)
            .map(|_| normalize_feature(&DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).unwrap().vector)
            .collect();
        ViewGraph::from_vertices(&f, vec![Bbox::new(0.0, 0.0, 1.0, 1.0); n]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let s = gm_forward(&SparseMatrix::zeros(4, 4), &DMatrix::identity(2, 2)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]);
        assert!((s.x - expect).amax() < 1e-6);

        let s = gm_forward(&SparseMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 0.2)).unwrap();
        assert!((s.x[(0, 0)] - 1.0).abs() < 1e-9);

        let b = DMatrix::from_row_slice(2, 3, &[0.1, 0.9, 0.0, 0.3, 0.2, 0.1]);
        let s = gm_forward(&SparseMatrix::zeros(6, 6), &b).unwrap();
        assert_eq!(s.x.row(0).transpose().argmax().0, 1);
    }

    #[test]
    fn one_by_one_gradient_is_zero() {
        let s = gm_forward(&SparseMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 0.2)).unwrap();
        let g = gm_backward(&s.cache, &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_eq!(g.grad_b[(0, 0)], 0.0);
    }

    #[test]
    fn two_by_two_matches_finite_differences() {
        let r = finite_diff_check(&SparseMatrix::zeros(4, 4), &DMatrix::identity(2, 2), 3).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn random_instances_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..6 {
            let n_d = rng.gen_range(2..=4);
            let n_t = rng.gen_range(2..=4);
            let a = build_affinity(&random_graph(&mut rng, n_d, 6), &random_graph(&mut rng, n_t, 6)).unwrap();
            let r = finite_diff_check(&a.m, &a.b, seed).unwrap();
            if !r.degenerate {
                assert!(r.max_rel_error <= 1e-4, "{n_d}x{n_t}: {r:?}");
            }
        }
    }

    #[test]
    fn grad_m_is_symmetric_on_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = build_affinity(&random_graph(&mut rng, 3, 5), &random_graph(&mut rng, 3, 5)).unwrap();
        let s = gm_forward(&a.m, &a.b).unwrap();
        let gx = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g = gm_backward(&s.cache, &gx).unwrap();
        assert!(g.grad_m.is_symmetric());
        assert_eq!(g.grad_m.nnz(), a.m.nnz());
    }

    #[test]
    fn sharpen_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[0.6, 0.4]);
        let y = sharpen(&x, 1e-3);
        assert!((y[(0, 0)] - 1.0).abs() < 1e-12 && y[(0, 1)] < 1e-12);
        let y = sharpen(&x, 0.2);
        let e = std::f64::consts::E;
        assert!((y[(0, 0)] - e / (e + 1.0)).abs() < 1e-12);
        let y = sharpen(&DMatrix::from_element(2, 4, 0.3), 0.01);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn wbce_examples() {
        let y = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = wbce_loss(&DMatrix::from_element(1, 2, 0.5), &y, 2).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);

        let r = wbce_loss(&y, &y, 2).unwrap();
        assert!(r.loss <= 1.01e-7 && r.loss >= 0.0);

        // n_t = 1: only the negative term is weighted in
        let r = wbce_loss(&DMatrix::from_element(2, 1, 0.3), &DMatrix::from_element(2, 1, 1.0), 1).unwrap();
        assert_eq!(r.loss, 0.0);
        let r = wbce_loss(&DMatrix::from_element(1, 1, 0.3), &DMatrix::zeros(1, 1), 1).unwrap();
        assert!((r.loss + 0.7f64.ln()).abs() < 1e-15);

        assert!(wbce_loss(&DMatrix::zeros(1, 2), &DMatrix::zeros(2, 1), 1).is_err());
    }

    #[test]
    fn matching_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(3, 4, |_, _| rng.gen::<f64>());
        let mut y = DMatrix::zeros(3, 4);
        y[(0, 1)] = 1.0;
        y[(1, 0)] = 1.0;
        y[(2, 3)] = 1.0;
        let tau = 0.3;
        let rep = matching_loss(&x, &y, tau).unwrap();
        let mut num = Vec::new();
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let f = (matching_loss(&xp, &y, tau).unwrap().loss - matching_loss(&xm, &y, tau).unwrap().loss) / 2e-6;
            num.push(f);
        }
        assert!(relative_error(rep.grad.as_slice(), &num) < 1e-6);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sharpen_keeps_row_argmax(vals in proptest::collection::vec(-1.0f64..1.0, 6), tau in 1e-3f64..10.0) {
            let x = DMatrix::from_row_slice(2, 3, &vals);
            let y = sharpen(&x, tau);
            for r in 0..2 {
                prop_assert_eq!(x.row(r).transpose().argmax().0, y.row(r).transpose().argmax().0);
                prop_assert!((y.row(r).sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn wbce_is_row_permutation_equivariant(vals in proptest::collection::vec(0.01f64..0.99, 9), hot in proptest::collection::vec(0usize..3, 3), perm in Just(vec![2usize, 0, 1])) {
            let yhat = DMatrix::from_row_slice(3, 3, &vals);
            let y = DMatrix::from_fn(3, 3, |r, c| if hot[r] == c { 1.0 } else { 0.0 });
            let py = DMatrix::from_fn(3, 3, |r, c| y[(perm[r], c)]);
            let pyhat = DMatrix::from_fn(3, 3, |r, c| yhat[(perm[r], c)]);
            let a = wbce_loss(&yhat, &y, 3).unwrap().loss;
            let b = wbce_loss(&pyhat, &py, 3).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
