//! Vertex affinity `B`, edge affinity `M_e` and the expanded quadratic
//! affinity `M` over detection-major pair indices.

use nalgebra::{DMatrix, DVector};

use crate::graphkit::ViewGraph;
use crate::sparse::SparseMatrix;
use crate::{pair_index, Error, Result};

#[derive(Debug, Clone)]
pub struct AffinityPair {
    pub b: DMatrix<f64>,
    pub m_e: DMatrix<f64>,
    pub m: SparseMatrix,
    pub n_d: usize,
    pub n_t: usize,
}

impl AffinityPair {
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        pair_index(i, j, self.n_t)
    }
}

fn stack_rows(rows: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c])
}

fn check_dims(g_d: &ViewGraph, g_t: &ViewGraph) -> Result<usize> {
    match (g_d.feature_dim(), g_t.feature_dim()) {
        (Some(a), Some(b)) if a != b => Err(Error::DimError { expected: a, found: b }),
        (a, b) => Ok(a.or(b).unwrap_or(0)),
    }
}

/// `B[i, j] = h_i · h_j`.
pub fn vertex_affinity(g_d: &ViewGraph, g_t: &ViewGraph) -> Result<DMatrix<f64>> {
    let d = check_dims(g_d, g_t)?;
    let hd = stack_rows(&g_d.vertex_features, d);
    let ht = stack_rows(&g_t.vertex_features, d);
    Ok(hd * ht.transpose())
}

/// `M_e[u, v] = h_{i,i'} · h_{j,j'}`, shape `|E_D| x |E_T|`; empty when a
/// graph has fewer than two vertices.
pub fn edge_affinity(g_d: &ViewGraph, g_t: &ViewGraph) -> Result<DMatrix<f64>> {
    let d = check_dims(g_d, g_t)?;
    let ed = stack_rows(&g_d.edge_features, 2 * d);
    let et = stack_rows(&g_t.edge_features, 2 * d);
    let raw = ed * et.transpose();
    // The two orientations give the same dot product up to summation order;
    // averaging makes M_e[u, v] == M_e[rev u, rev v] bit for bit, so M is
    // exactly symmetric.
    let rev_d = reverse_edges(&g_d.edges, g_d.n());
    let rev_t = reverse_edges(&g_t.edges, g_t.n());
    Ok(DMatrix::from_fn(raw.nrows(), raw.ncols(), |u, v| {
        0.5 * (raw[(u, v)] + raw[(rev_d[u], rev_t[v])])
    }))
}

fn reverse_edges(edges: &[(usize, usize)], n: usize) -> Vec<usize> {
    let mut slot = vec![usize::MAX; n * n];
    for (u, &(a, b)) in edges.iter().enumerate() {
        slot[a * n + b] = u;
    }
    edges.iter().map(|&(a, b)| slot[b * n + a]).collect()
}

/// Scatters `M_e` into `M[p(i, j), p(i', j')] = M_e[u, v]` for
/// `e_u = (i, i')`, `e_v = (j, j')`.
pub fn expand_affinity(
    m_e: &DMatrix<f64>,
    edges_d: &[(usize, usize)],
    edges_t: &[(usize, usize)],
    n_d: usize,
    n_t: usize,
) -> Result<SparseMatrix> {
    if m_e.nrows() != edges_d.len() {
        return Err(Error::DimError {
            expected: edges_d.len(),
            found: m_e.nrows(),
        });
    }
    if m_e.ncols() != edges_t.len() {
        return Err(Error::DimError {
            expected: edges_t.len(),
            found: m_e.ncols(),
        });
    }
    let dim = n_d * n_t;
    let mut triplets = Vec::with_capacity(edges_d.len() * edges_t.len());
    for (u, &(i, i2)) in edges_d.iter().enumerate() {
        if i >= n_d || i2 >= n_d || i == i2 {
            return Err(Error::InvalidArgument(format!("detection edge ({i}, {i2}) invalid")));
        }
        for (v, &(j, j2)) in edges_t.iter().enumerate() {
            if j >= n_t || j2 >= n_t || j == j2 {
                return Err(Error::InvalidArgument(format!("tracklet edge ({j}, {j2}) invalid")));
            }
            triplets.push((pair_index(i, j, n_t), pair_index(i2, j2, n_t), m_e[(u, v)]));
        }
    }
    Ok(SparseMatrix::from_triplets(dim, dim, triplets))
}

/// `(n - 1)^2 - max_r sum_c |M[r, c]|`, a Gershgorin lower bound on the
/// smallest eigenvalue of `(n - 1)^2 I - M`.
pub fn convexity_margin(m: &SparseMatrix, n: usize) -> f64 {
    let base = (n.saturating_sub(1) as f64).powi(2);
    base - m.max_abs_row_sum()
}

/// `B`, `M_e` and `M` for a detection/tracklet graph pair.
pub fn build_affinity(g_d: &ViewGraph, g_t: &ViewGraph) -> Result<AffinityPair> {
    let b = vertex_affinity(g_d, g_t)?;
    let m_e = edge_affinity(g_d, g_t)?;
    let m = expand_affinity(&m_e, &g_d.edges, &g_t.edges, g_d.n(), g_t.n())?;
    Ok(AffinityPair {
        b,
        m_e,
        m,
        n_d: g_d.n(),
        n_t: g_t.n(),
    })
}

/// Gradients of the vertex features of both graphs given `dL/dB` and `dL/dM`
/// (the symmetric convention of [`crate::diffmatch::MatchGradients`]).
pub fn affinity_backward(
    g_d: &ViewGraph,
    g_t: &ViewGraph,
    grad_b: &DMatrix<f64>,
    grad_m: &SparseMatrix,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let d = check_dims(g_d, g_t)?;
    let (n_d, n_t) = (g_d.n(), g_t.n());
    if grad_b.shape() != (n_d, n_t) {
        return Err(Error::DimError {
            expected: n_d * n_t,
            found: grad_b.len(),
        });
    }
    let hd = stack_rows(&g_d.vertex_features, d);
    let ht = stack_rows(&g_t.vertex_features, d);
    let mut gd = grad_b * &ht;
    let mut gt = grad_b.transpose() * &hd;

    if !g_d.edges.is_empty() && !g_t.edges.is_empty() {
        // raw[u, v] feeds M_e[u, v] and M_e[rev u, rev v] with weight ½ each;
        // by symmetry of grad_m both halves carry the same value
        let g_raw = DMatrix::from_fn(g_d.edges.len(), g_t.edges.len(), |u, v| {
            let (i, i2) = g_d.edges[u];
            let (j, j2) = g_t.edges[v];
            grad_m.get(pair_index(i, j, n_t), pair_index(i2, j2, n_t))
        });
        let ed = stack_rows(&g_d.edge_features, 2 * d);
        let et = stack_rows(&g_t.edge_features, 2 * d);
        let g_ed = &g_raw * &et;
        let g_et = g_raw.transpose() * &ed;
        edge_feature_backward(g_d, &ed, &g_ed, &mut gd);
        edge_feature_backward(g_t, &et, &g_et, &mut gt);
    }
    let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.transpose()).collect::<Vec<_>>();
    Ok((rows(&gd), rows(&gt)))
}

/// Accumulates into `grad_h` the pullback through `e = [h_i, h_i'] / ‖·‖`.
fn edge_feature_backward(g: &ViewGraph, e: &DMatrix<f64>, grad_e: &DMatrix<f64>, grad_h: &mut DMatrix<f64>) {
    let d = grad_h.ncols();
    for (u, &(i, i2)) in g.edges.iter().enumerate() {
        let norm = (g.vertex_features[i].norm_squared() + g.vertex_features[i2].norm_squared()).sqrt();
        if norm <= crate::graphkit::EPS_NORM {
            continue;
        }
        let eu = e.row(u);
        let ge = grad_e.row(u);
        let proj = eu.dot(&ge);
        for k in 0..d {
            grad_h[(i, k)] += (ge[k] - eu[k] * proj) / norm;
            grad_h[(i2, k)] += (ge[k + d] - eu[k + d] * proj) / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphkit::{normalize_feature, Bbox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(features: &[&[f64]]) -> ViewGraph {
        let f: Vec<_> = features.iter().map(|x| DVector::from_column_slice(x)).collect();
        let boxes = vec![Bbox::new(0.0, 0.0, 1.0, 1.0); f.len()];
        ViewGraph::from_vertices(&f, boxes).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ViewGraph {
        let f: Vec<_> = (0..n)
            .map(|_| normalize_feature(&DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).unwrap().vector)
            .collect();
        ViewGraph::from_vertices(&f, vec![Bbox::new(0.0, 0.0, 1.0, 1.0); n]).unwrap()
    }

    #[test]
    fn vertex_affinity_examples() {
        let g = graph(&[&[1.0, 0.0]]);
        assert_eq!(vertex_affinity(&g, &g).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let b = vertex_affinity(&graph(&[&[1.0, 0.0]]), &graph(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(b[(0, 0)], 0.0);
        let b = vertex_affinity(&graph(&[&[0.6, 0.8]]), &graph(&[&[1.0, 0.0]])).unwrap();
        assert!((b[(0, 0)] - 0.6).abs() < 1e-15);
        assert!(matches!(
            vertex_affinity(&graph(&[&[1.0, 0.0]]), &graph(&[&[1.0, 0.0, 0.0]])),
            Err(Error::DimError { .. })
        ));
    }

    #[test]
    fn edge_affinity_examples() {
        let g = graph(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let me = edge_affinity(&g, &g).unwrap();
        assert_eq!(me.shape(), (2, 2));
        assert!(me.iter().all(|&x| (x - 1.0).abs() < 1e-15));

        // (1,0,0,0)/1 vs (0,1,0,0): edges of graphs whose features are orthogonal
        let a = graph(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = graph(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert!(edge_affinity(&a, &b).unwrap().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let me = edge_affinity(&random_graph(&mut rng, 3, 4), &random_graph(&mut rng, 2, 4)).unwrap();
        assert_eq!(me.shape(), (6, 2));
        let me = edge_affinity(&random_graph(&mut rng, 1, 4), &random_graph(&mut rng, 3, 4)).unwrap();
        assert_eq!(me.shape(), (0, 6));
    }

    #[test]
    fn expand_two_by_two_all_ones() {
        let edges = [(0, 1), (1, 0)];
        let m = expand_affinity(&DMatrix::from_element(2, 2, 1.0), &edges, &edges, 2, 2).unwrap();
        let p = |i, j| pair_index(i, j, 2);
        let mut expect = DMatrix::zeros(4, 4);
        for (a, b) in [(p(0, 0), p(1, 1)), (p(0, 1), p(1, 0))] {
            expect[(a, b)] = 1.0;
            expect[(b, a)] = 1.0;
        }
        assert_eq!(m.to_dense(), expect);
        assert!(m.is_symmetric());
        assert_eq!(convexity_margin(&m, 2), 0.0);

        let z = expand_affinity(&DMatrix::zeros(2, 2), &edges, &edges, 2, 2).unwrap();
        assert!(z.to_dense().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expand_rejects_shape_mismatch() {
        let edges = [(0, 1), (1, 0)];
        assert!(expand_affinity(&DMatrix::zeros(3, 2), &edges, &edges, 2, 2).is_err());
        assert!(expand_affinity(&DMatrix::zeros(2, 2), &edges, &[(0, 0), (1, 0)], 2, 2).is_err());
    }

    #[test]
    fn convexity_margin_examples() {
        assert_eq!(convexity_margin(&SparseMatrix::zeros(9, 9), 3), 4.0);
        // every admissible entry 1 for n_d = n_t = 3
        let n = 3;
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for i2 in (0..n).filter(|&x| x != i) {
                    for j2 in (0..n).filter(|&x| x != j) {
                        trip.push((pair_index(i, j, n), pair_index(i2, j2, n), 1.0));
                    }
                }
            }
        }
        let m = SparseMatrix::from_triplets(n * n, n * n, trip);
        assert_eq!(convexity_margin(&m, n), 0.0);
    }

    #[test]
    fn affinity_structure_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n_d = rng.gen_range(1..6);
            let n_t = rng.gen_range(1..6);
            let a = build_affinity(&random_graph(&mut rng, n_d, 5), &random_graph(&mut rng, n_t, 5)).unwrap();
            assert!(a.b.iter().chain(a.m_e.iter()).all(|x| x.abs() <= 1.0 + 1e-12));
            assert!(a.m.is_symmetric());
            for (r, c, _) in a.m.iter() {
                let (i, j) = (r / n_t, r % n_t);
                let (i2, j2) = (c / n_t, c % n_t);
                assert!(i != i2 && j != j2);
            }
            assert!(convexity_margin(&a.m, n_d.max(n_t)) >= -1e-12);
        }
    }

    /// `(S_D ⊗ S_T) diag(vec M_e) (T_D ⊗ T_T)ᵀ` with row-major `vec`, which
    /// lands directly on detection-major pair indices.
    fn kronecker_oracle(g_d: &ViewGraph, g_t: &ViewGraph, m_e: &DMatrix<f64>) -> DMatrix<f64> {
        let incidence = |g: &ViewGraph, end: bool| {
            DMatrix::from_fn(g.n(), g.edges.len(), |i, u| {
                let (a, b) = g.edges[u];
                if (if end { b } else { a }) == i {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let s = incidence(g_d, false).kronecker(&incidence(g_t, false));
        let t = incidence(g_d, true).kronecker(&incidence(g_t, true));
        let vec_me = DVector::from_fn(m_e.len(), |k, _| m_e[(k / m_e.ncols(), k % m_e.ncols())]);
        s * DMatrix::from_diagonal(&vec_me) * t.transpose()
    }

    #[test]
    fn expand_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let (n_d, n_t) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let g_d = random_graph(&mut rng, n_d, 3);
            let g_t = random_graph(&mut rng, n_t, 3);
            let a = build_affinity(&g_d, &g_t).unwrap();
            assert_eq!(a.m.to_dense(), kronecker_oracle(&g_d, &g_t, &a.m_e));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g_d = random_graph(&mut rng, 3, 4);
        let g_t = random_graph(&mut rng, 2, 4);
        let wb = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let base = build_affinity(&g_d, &g_t).unwrap();
        let wm = base.m.map_values(|_, _, _| 0.0);
        // symmetric weights on M so the convention matches
        let mut trip = Vec::new();
        for (r, c, _) in base.m.iter().filter(|&(r, c, _)| r < c) {
            let w = rng.gen_range(-1.0..1.0);
            trip.push((r, c, w));
            trip.push((c, r, w));
        }
        let wm = if trip.is_empty() { wm } else { SparseMatrix::from_triplets(6, 6, trip) };
        // loss on raw (unnormalized) features so every direction is exercised
        let loss = |fd: &[DVector<f64>], ft: &[DVector<f64>]| {
            let a = build_affinity(
                &ViewGraph::from_vertices(fd, g_d.bboxes.clone()).unwrap(),
                &ViewGraph::from_vertices(ft, g_t.bboxes.clone()).unwrap(),
            )
            .unwrap();
            a.b.component_mul(&wb).sum() + a.m.iter().map(|(r, c, v)| v * wm.get(r, c)).sum::<f64>()
        };
        let (gd, gt) = affinity_backward(&g_d, &g_t, &wb, &wm).unwrap();
        let h = 1e-6;
        for (side, grads) in [(0, &gd), (1, &gt)] {
            let feats = if side == 0 { &g_d.vertex_features } else { &g_t.vertex_features };
            for v in 0..feats.len() {
                // project out the radial direction, which normalization removes
                for k in 0..4 {
                    let mut fp = feats.clone();
                    let mut fm = feats.clone();
                    fp[v][k] += h;
                    fm[v][k] -= h;
                    let num = if side == 0 {
                        (loss(&fp, &g_t.vertex_features) - loss(&fm, &g_t.vertex_features)) / (2.0 * h)
                    } else {
                        (loss(&g_d.vertex_features, &fp) - loss(&g_d.vertex_features, &fm)) / (2.0 * h)
                    };
                    let f = &feats[v];
                    let g = &grads[v];
                    let tangential = g[k] - f[k] * f.dot(g);
                    assert!((tangential - num).abs() < 1e-6, "side {side} v {v} k {k}: {tangential} vs {num}");
                }
            }
        }
    }
}
