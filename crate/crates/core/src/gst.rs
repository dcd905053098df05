//! Gated Search Tree: exact search over gate-consistent partial matchings,
//! split into independent connected components of the gate graph.
//!
//! Costs follow the quadratic assignment objective `L(π) = −πᵀMπ − bᵀπ`.
//! Within a component the interaction with the rest of the graph is replaced
//! by the best edge-to-edge matching around each chosen pair.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::diffmatch::gm_forward;
use crate::sparse::SparseMatrix;
use crate::tracker::greedy_round;
use crate::{pair_index, Error, Result};

/// Default bound on `|V_c^D| + |V_c^T|` for exhaustive enumeration.
pub const DEFAULT_MAX_ENUM: usize = 16;
/// Size bound for [`brute_force_qap`].
pub const ORACLE_LIMIT: usize = 14;

pub type Pair = (usize, usize);

/// Bipartite gate adjacency between detections and tracklets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateGraph {
    n_d: usize,
    n_t: usize,
    /// Sorted tracklet neighbours of each detection.
    det_adj: Vec<Vec<usize>>,
    /// Sorted detection neighbours of each tracklet.
    trk_adj: Vec<Vec<usize>>,
}

impl GateGraph {
    pub fn from_edges(n_d: usize, n_t: usize, edges: impl IntoIterator<Item = Pair>) -> Self {
        let mut det_adj = vec![Vec::new(); n_d];
        let mut trk_adj = vec![Vec::new(); n_t];
        for (i, j) in edges {
            assert!(i < n_d && j < n_t, "gate edge ({i}, {j}) out of bounds");
            det_adj[i].push(j);
            trk_adj[j].push(i);
        }
        for a in det_adj.iter_mut().chain(trk_adj.iter_mut()) {
            a.sort_unstable();
            a.dedup();
        }
        Self { n_d, n_t, det_adj, trk_adj }
    }

    pub fn complete(n_d: usize, n_t: usize) -> Self {
        Self::from_edges(n_d, n_t, (0..n_d).flat_map(|i| (0..n_t).map(move |j| (i, j))))
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.det_adj[i].binary_search(&j).is_ok()
    }

    pub fn tracklets_of(&self, i: usize) -> &[usize] {
        &self.det_adj[i]
    }

    pub fn detections_of(&self, j: usize) -> &[usize] {
        &self.trk_adj[j]
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = Pair> + '_ {
        self.det_adj.iter().enumerate().flat_map(|(i, a)| a.iter().map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.det_adj.iter().map(Vec::len).sum()
    }
}

/// Edge `(i, j)` iff `B > σ`, squared Mahalanobis `< κ` and `IoU > 0`.
pub fn build_gate_graph(b: &DMatrix<f64>, maha: &DMatrix<f64>, iou: &DMatrix<f64>, sigma: f64, kappa: f64) -> GateGraph {
    assert_eq!(b.shape(), maha.shape());
    assert_eq!(b.shape(), iou.shape());
    let (n_d, n_t) = b.shape();
    let edges = (0..n_d)
        .flat_map(|i| (0..n_t).map(move |j| (i, j)))
        .filter(|&(i, j)| b[(i, j)] > sigma && maha[(i, j)] < kappa && iou[(i, j)] > 0.0);
    GateGraph::from_edges(n_d, n_t, edges)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Sorted detection indices.
    pub detections: Vec<usize>,
    /// Sorted tracklet indices.
    pub tracklets: Vec<usize>,
    /// Induced gate edges, lexicographic.
    pub edges: Vec<Pair>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.detections.len() + self.tracklets.len()
    }
}

/// Connected components by depth-first search, largest first; equal sizes
/// keep discovery order (detections scanned before tracklets).
pub fn ficc(gates: &GateGraph) -> Vec<Component> {
    #[derive(Clone, Copy)]
    enum Node {
        Det(usize),
        Trk(usize),
    }
    let mut seen_d = vec![false; gates.n_d];
    let mut seen_t = vec![false; gates.n_t];
    let mut out = Vec::new();
    let starts = (0..gates.n_d).map(Node::Det).chain((0..gates.n_t).map(Node::Trk));
    for start in starts {
        let fresh = match start {
            Node::Det(i) => !std::mem::replace(&mut seen_d[i], true),
            Node::Trk(j) => !std::mem::replace(&mut seen_t[j], true),
        };
        if !fresh {
            continue;
        }
        let (mut dets, mut trks) = (Vec::new(), Vec::new());
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            match node {
                Node::Det(i) => {
                    dets.push(i);
                    for &j in gates.tracklets_of(i) {
                        if !std::mem::replace(&mut seen_t[j], true) {
                            stack.push(Node::Trk(j));
                        }
                    }
                }
                Node::Trk(j) => {
                    trks.push(j);
                    for &i in gates.detections_of(j) {
                        if !std::mem::replace(&mut seen_d[i], true) {
                            stack.push(Node::Det(i));
                        }
                    }
                }
            }
        }
        dets.sort_unstable();
        trks.sort_unstable();
        let edges = dets
            .iter()
            .flat_map(|&i| gates.tracklets_of(i).iter().map(move |&j| (i, j)))
            .collect();
        out.push(Component {
            detections: dets,
            tracklets: trks,
            edges,
        });
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.size()));
    out
}

/// Minimum-cost maximal matching of a rectangular cost matrix. Pairs are
/// returned sorted, the cost is summed in that order.
pub fn hungarian(cost: &DMatrix<f64>) -> (Vec<Pair>, f64) {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return (Vec::new(), 0.0);
    }
    let mut pairs = if rows > cols {
        hungarian_wide(&cost.transpose()).into_iter().map(|(j, i)| (i, j)).collect()
    } else {
        hungarian_wide(cost)
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    (pairs, total)
}

/// Shortest augmenting paths with potentials; requires `rows <= cols`.
fn hungarian_wide(a: &DMatrix<f64>) -> Vec<Pair> {
    let (n, m) = a.shape();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// `L(π) = −πᵀMπ − bᵀπ` for a 0/1 matching given as pairs.
pub fn qap_cost(m: &SparseMatrix, b: &DMatrix<f64>, pairs: &[Pair]) -> f64 {
    let n_t = b.ncols();
    let idx: Vec<usize> = pairs.iter().map(|&(i, j)| pair_index(i, j, n_t)).collect();
    let quad: f64 = idx.iter().map(|&p| idx.iter().map(|&q| m.get(p, q)).sum::<f64>()).sum();
    let lin: f64 = pairs.iter().map(|&(i, j)| b[(i, j)]).sum();
    -quad - lin
}

/// Best total of `M[(i,j),(i',j')]` over partial matchings of the vertices
/// outside the component, for one matched pair `(i, j)`.
fn pair_edge_max(m: &SparseMatrix, n_t: usize, pair: Pair, out_d: &[bool], out_t: &[bool]) -> f64 {
    let (cols, vals) = m.row(pair_index(pair.0, pair.1, n_t));
    let mut entries: Vec<(usize, usize, f64)> = cols
        .iter()
        .zip(vals)
        .map(|(&q, &v)| (q / n_t, q % n_t, v))
        .filter(|&(a, c, v)| out_d[a] && out_t[c] && v > 0.0)
        .collect();
    if entries.is_empty() {
        return 0.0;
    }
    // compress to the rows and columns that carry positive weight
    let mut rows: Vec<usize> = entries.iter().map(|e| e.0).collect();
    let mut cs: Vec<usize> = entries.iter().map(|e| e.1).collect();
    rows.sort_unstable();
    rows.dedup();
    cs.sort_unstable();
    cs.dedup();
    let mut w = DMatrix::zeros(rows.len(), cs.len());
    for e in entries.iter_mut() {
        let r = rows.binary_search(&e.0).unwrap();
        let c = cs.binary_search(&e.1).unwrap();
        w[(r, c)] = e.2;
    }
    let (chosen, _) = hungarian(&(-&w));
    chosen.iter().map(|&(r, c)| w[(r, c)]).sum()
}

fn outside_masks(component: &Component, n_d: usize, n_t: usize) -> (Vec<bool>, Vec<bool>) {
    let mut out_d = vec![true; n_d];
    let mut out_t = vec![true; n_t];
    for &i in &component.detections {
        out_d[i] = false;
    }
    for &j in &component.tracklets {
        out_t[j] = false;
    }
    (out_d, out_t)
}

/// Approximate edge term `−Σ_{(i,j)∈π_c} max_{π_m} π_mᵀ M_l e_(i,j)`, where
/// `π_m` ranges over partial matchings between vertices outside the
/// component. Matching pairs with non-positive affinity never helps, so
/// only positive entries take part.
pub fn edge_cost_approx(pi_c: &[Pair], m: &SparseMatrix, component: &Component, n_d: usize, n_t: usize) -> f64 {
    let (out_d, out_t) = outside_masks(component, n_d, n_t);
    -pi_c.iter().map(|&p| pair_edge_max(m, n_t, p, &out_d, &out_t)).sum::<f64>()
}

/// `−π_cᵀM_cπ_c + 2·edge_term − b_cᵀπ_c` with `edge_term` from
/// [`edge_cost_approx`]. Pairs carry global indices.
pub fn component_cost(pi_c: &[Pair], m: &SparseMatrix, b: &DMatrix<f64>, edge_term: f64) -> f64 {
    qap_cost(m, b, pi_c) + 2.0 * edge_term
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Sorted pairs, each detection and tracklet at most once.
    pub pairs: Vec<Pair>,
    pub cost: f64,
}

/// Strictly better cost, or equal cost and lexicographically smaller pairs.
fn improves(cost: f64, pairs: &[Pair], best: &Option<Assignment>) -> bool {
    match best {
        None => true,
        Some(b) => cost < b.cost || (cost == b.cost && pairs < b.pairs.as_slice()),
    }
}

/// Visits every partial matching in which detection `dets[k]` takes a
/// neighbour from `allowed(dets[k])` or stays unmatched.
fn for_each_matching<'a>(
    dets: &[usize],
    allowed: &dyn Fn(usize) -> &'a [usize],
    used: &mut Vec<usize>,
    current: &mut Vec<Pair>,
    visit: &mut dyn FnMut(&[Pair]),
) {
    let Some((&i, rest)) = dets.split_first() else {
        let mut sorted = current.clone();
        sorted.sort_unstable();
        visit(&sorted);
        return;
    };
    for_each_matching(rest, allowed, used, current, visit);
    for &j in allowed(i) {
        if used.contains(&j) {
            continue;
        }
        used.push(j);
        current.push((i, j));
        for_each_matching(rest, allowed, used, current, visit);
        current.pop();
        used.pop();
    }
}

/// Exhaustive minimization of the component cost over gate-consistent
/// partial matchings.
pub fn enumerate_component(
    component: &Component,
    m: &SparseMatrix,
    b: &DMatrix<f64>,
    gates: &GateGraph,
    max_enum: usize,
    component_id: usize,
) -> Result<Assignment> {
    if component.size() > max_enum {
        return Err(Error::ComponentTooLarge {
            component: component_id,
            size: component.size(),
            limit: max_enum,
        });
    }
    let (n_d, n_t) = b.shape();
    let (out_d, out_t) = outside_masks(component, n_d, n_t);
    let edge_max: std::collections::HashMap<Pair, f64> = component
        .edges
        .iter()
        .map(|&p| (p, pair_edge_max(m, n_t, p, &out_d, &out_t)))
        .collect();
    let mut best: Option<Assignment> = None;
    for_each_matching(
        &component.detections,
        &|i| gates.tracklets_of(i),
        &mut Vec::new(),
        &mut Vec::new(),
        &mut |pairs| {
            let edge_term = -pairs.iter().map(|p| edge_max[p]).sum::<f64>();
            let cost = component_cost(pairs, m, b, edge_term);
            if improves(cost, pairs, &best) {
                best = Some(Assignment {
                    pairs: pairs.to_vec(),
                    cost,
                });
            }
        },
    );
    Ok(best.expect("the empty matching is always visited"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GstConfig {
    pub max_enum: usize,
    /// Solve oversized components with the restricted QP and greedy
    /// rounding instead of failing.
    pub fallback: bool,
}

impl Default for GstConfig {
    fn default() -> Self {
        Self {
            max_enum: DEFAULT_MAX_ENUM,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GstSolution {
    pub matches: Vec<Pair>,
    /// `L(π)` of the union.
    pub cost: f64,
    pub components: usize,
    /// Indices of components solved by the QP fallback.
    pub fallbacks: Vec<usize>,
}

fn restricted_qp(component: &Component, m: &SparseMatrix, b: &DMatrix<f64>, gates: &GateGraph) -> Result<Vec<Pair>> {
    let n_t = b.ncols();
    let (cd, ct) = (&component.detections, &component.tracklets);
    let keep: Vec<usize> = cd
        .iter()
        .flat_map(|&i| ct.iter().map(move |&j| pair_index(i, j, n_t)))
        .collect();
    let sub_m = m.submatrix(&keep);
    let sub_b = DMatrix::from_fn(cd.len(), ct.len(), |a, c| b[(cd[a], ct[c])]);
    let x = gm_forward(&sub_m, &sub_b)?.x;
    let masked = DMatrix::from_fn(cd.len(), ct.len(), |a, c| {
        if gates.has_edge(cd[a], ct[c]) {
            x[(a, c)]
        } else {
            f64::NEG_INFINITY
        }
    });
    let mut pairs: Vec<Pair> = greedy_round(&masked).into_iter().map(|(a, c)| (cd[a], ct[c])).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Union of per-component optima; components are solved concurrently.
pub fn gst_solve(m: &SparseMatrix, b: &DMatrix<f64>, gates: &GateGraph, config: &GstConfig) -> Result<GstSolution> {
    let (n_d, n_t) = b.shape();
    if gates.n_d() != n_d || gates.n_t() != n_t {
        return Err(Error::DimError {
            expected: n_d * n_t,
            found: gates.n_d() * gates.n_t(),
        });
    }
    if m.nrows() != n_d * n_t || m.ncols() != n_d * n_t {
        return Err(Error::DimError {
            expected: n_d * n_t,
            found: m.nrows(),
        });
    }
    let comps: Vec<Component> = ficc(gates).into_iter().filter(|c| !c.edges.is_empty()).collect();
    let solved: Vec<(Vec<Pair>, bool)> = comps
        .par_iter()
        .enumerate()
        .map(|(k, c)| match enumerate_component(c, m, b, gates, config.max_enum, k) {
            Ok(a) => Ok((a.pairs, false)),
            Err(Error::ComponentTooLarge { .. }) if config.fallback => {
                log::debug!("component {k} of size {} solved by restricted QP", c.size());
                restricted_qp(c, m, b, gates).map(|p| (p, true))
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let fallbacks = solved.iter().enumerate().filter(|(_, s)| s.1).map(|(k, _)| k).collect();
    let mut matches: Vec<Pair> = solved.into_iter().flat_map(|s| s.0).collect();
    matches.sort_unstable();
    Ok(GstSolution {
        cost: qap_cost(m, b, &matches),
        matches,
        components: comps.len(),
        fallbacks,
    })
}

/// Exhaustive minimization of `L(π)` over all gate-consistent partial
/// matchings. Oracle for small instances only.
pub fn brute_force_qap(m: &SparseMatrix, b: &DMatrix<f64>, gates: &GateGraph) -> Result<Assignment> {
    let (n_d, n_t) = b.shape();
    if n_d + n_t > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            size: n_d + n_t,
            limit: ORACLE_LIMIT,
        });
    }
    let dets: Vec<usize> = (0..n_d).collect();
    let mut best: Option<Assignment> = None;
    for_each_matching(&dets, &|i| gates.tracklets_of(i), &mut Vec::new(), &mut Vec::new(), &mut |pairs| {
        let cost = qap_cost(m, b, pairs);
        if improves(cost, pairs, &best) {
            best = Some(Assignment {
                pairs: pairs.to_vec(),
                cost,
            });
        }
    });
    Ok(best.expect("the empty matching is always visited"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn gate_graph_examples() {
        let b = dm(2, 2, &[0.9, 0.8, 0.7, 0.95]);
        let ones = DMatrix::from_element(2, 2, 1.0);
        let zeros = DMatrix::zeros(2, 2);
        assert_eq!(build_gate_graph(&(&b * 0.5), &zeros, &ones, 0.6, 9.4877).edge_count(), 0);
        let iou = dm(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let g = build_gate_graph(&b, &zeros, &iou, 0.6, 9.4877);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        // strict inequalities on similarity and Mahalanobis distance
        let g = build_gate_graph(&dm(1, 1, &[0.6]), &dm(1, 1, &[0.0]), &dm(1, 1, &[1.0]), 0.6, 9.4877);
        assert_eq!(g.edge_count(), 0);
        let g = build_gate_graph(&dm(1, 1, &[0.9]), &dm(1, 1, &[9.0]), &dm(1, 1, &[1.0]), 0.6, 9.4877);
        assert_eq!(g.edge_count(), 1);
        let g = build_gate_graph(&dm(1, 1, &[0.9]), &dm(1, 1, &[16.0]), &dm(1, 1, &[1.0]), 0.6, 9.4877);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn ficc_examples() {
        let g = GateGraph::from_edges(3, 1, [(0, 0), (1, 0)]);
        let c = ficc(&g);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].detections.clone(), c[0].tracklets.clone()), (vec![0, 1], vec![0]));
        assert_eq!((c[1].detections.clone(), c[1].tracklets.clone()), (vec![2], vec![]));

        assert_eq!(ficc(&GateGraph::from_edges(3, 3, [])).len(), 6);

        let c = ficc(&GateGraph::from_edges(2, 2, [(1, 1), (0, 0)]));
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].edges, vec![(0, 0)]);
        assert_eq!(c[1].edges, vec![(1, 1)]);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian(&dm(2, 2, &[1.0, 2.0, 2.0, 1.0])), (vec![(0, 0), (1, 1)], 2.0));
        assert_eq!(hungarian(&dm(2, 2, &[4.0, 1.0, 2.0, 3.0])), (vec![(0, 1), (1, 0)], 3.0));
        assert_eq!(hungarian(&dm(1, 3, &[5.0, 2.0, 7.0])), (vec![(0, 1)], 2.0));
        assert_eq!(hungarian(&dm(3, 1, &[5.0, 2.0, 7.0])), (vec![(1, 0)], 2.0));
        assert_eq!(hungarian(&DMatrix::zeros(0, 3)), (vec![], 0.0));
    }

    fn permutations(k: usize, pool: &[usize]) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (idx, &p) in pool.iter().enumerate() {
            let mut rest = pool.to_vec();
            rest.remove(idx);
            for mut tail in permutations(k - 1, &rest) {
                tail.insert(0, p);
                out.push(tail);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn hungarian_matches_enumeration(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-5.0..5.0));
            let (pairs, cost) = hungarian(&c);
            prop_assert_eq!(pairs.len(), rows.min(cols));
            let cols_all: Vec<usize> = (0..cols).collect();
            let rows_all: Vec<usize> = (0..rows).collect();
            let best = if rows <= cols {
                permutations(rows, &cols_all).iter().map(|p| p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum::<f64>()).fold(f64::INFINITY, f64::min)
            } else {
                permutations(cols, &rows_all).iter().map(|p| p.iter().enumerate().map(|(j, &i)| c[(i, j)]).sum::<f64>()).fold(f64::INFINITY, f64::min)
            };
            prop_assert!((cost - best).abs() < 1e-9);
        }
    }

    /// Random symmetric `M` over `n_d*n_t` pairs, dense on `i≠i'`, `j≠j'`.
    fn random_m(rng: &mut ChaCha8Rng, n_d: usize, n_t: usize, keep: impl Fn(Pair, Pair) -> bool) -> SparseMatrix {
        let mut trip = Vec::new();
        for i in 0..n_d {
            for j in 0..n_t {
                for i2 in 0..n_d {
                    for j2 in 0..n_t {
                        let (p, q) = (pair_index(i, j, n_t), pair_index(i2, j2, n_t));
                        if i == i2 || j == j2 || p > q || !keep((i, j), (i2, j2)) {
                            continue;
                        }
                        let v = rng.gen_range(-0.5..1.0);
                        trip.push((p, q, v));
                        trip.push((q, p, v));
                    }
                }
            }
        }
        SparseMatrix::from_triplets(n_d * n_t, n_d * n_t, trip)
    }

    fn random_gates(rng: &mut ChaCha8Rng, n_d: usize, n_t: usize, density: f64) -> GateGraph {
        let edges: Vec<Pair> = (0..n_d)
            .flat_map(|i| (0..n_t).map(move |j| (i, j)))
            .filter(|_| rng.gen_bool(density))
            .collect();
        GateGraph::from_edges(n_d, n_t, edges)
    }

    #[test]
    fn edge_cost_single_outside_pair() {
        // component {d0, t0}; outside d1, t1
        let m = SparseMatrix::from_triplets(4, 4, vec![(0, 3, 0.7), (3, 0, 0.7)]);
        let comp = Component {
            detections: vec![0],
            tracklets: vec![0],
            edges: vec![(0, 0)],
        };
        assert_eq!(edge_cost_approx(&[(0, 0)], &m, &comp, 2, 2), -0.7);
        let whole = Component {
            detections: vec![0, 1],
            tracklets: vec![0, 1],
            edges: vec![(0, 0), (1, 1)],
        };
        assert_eq!(edge_cost_approx(&[(0, 0)], &m, &whole, 2, 2), 0.0);
    }

    /// Best `Σ_{(a,c)∈π_m} M[p, (a,c)]` by enumerating every partial matching
    /// of the outside vertices, summed in row order.
    fn exhaustive_edge_max(m: &SparseMatrix, n_t: usize, p: Pair, out_d: &[usize], out_t: &[usize]) -> f64 {
        let mut best = 0.0f64;
        let gates = GateGraph::from_edges(
            out_d.iter().max().map_or(0, |x| x + 1),
            n_t,
            out_d.iter().flat_map(|&a| out_t.iter().map(move |&c| (a, c))),
        );
        for_each_matching(out_d, &|a| gates.tracklets_of(a), &mut Vec::new(), &mut Vec::new(), &mut |pairs| {
            let v: f64 = pairs.iter().map(|&(a, c)| m.get(pair_index(p.0, p.1, n_t), pair_index(a, c, n_t))).sum();
            best = best.max(v);
        });
        best
    }

    #[test]
    fn edge_cost_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (n_d, n_t) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let m = random_m(&mut rng, n_d, n_t, |_, _| true);
            let comp = Component {
                detections: vec![0],
                tracklets: vec![0],
                edges: vec![(0, 0)],
            };
            let out_d: Vec<usize> = (1..n_d).collect();
            let out_t: Vec<usize> = (1..n_t).collect();
            let expect = -exhaustive_edge_max(&m, n_t, (0, 0), &out_d, &out_t);
            let got = edge_cost_approx(&[(0, 0)], &m, &comp, n_d, n_t);
            assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn component_cost_examples() {
        let m = SparseMatrix::zeros(4, 4);
        let b = dm(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        assert_eq!(component_cost(&[], &m, &b, 0.0), 0.0);
        assert_eq!(component_cost(&[(0, 0)], &SparseMatrix::zeros(4, 4), &b, 0.0), -0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_m(&mut rng, 2, 2, |_, _| true);
        let pi = [(0, 0), (1, 1)];
        assert_eq!(component_cost(&pi, &m, &b, 0.0), qap_cost(&m, &b, &pi));
        // explicit −πᵀMπ − bᵀπ on the 4-vector
        let x = nalgebra::DVector::from_column_slice(&[1.0, 0.0, 0.0, 1.0]);
        let bv = nalgebra::DVector::from_column_slice(&[0.9, 0.1, 0.2, 0.8]);
        assert!((qap_cost(&m, &b, &pi) - (-m.quad_form(&x) - bv.dot(&x))).abs() < 1e-15);
    }

    #[test]
    fn enumerate_examples() {
        let b = dm(2, 2, &[0.9, 0.3, 0.2, 0.8]);
        let m = SparseMatrix::zeros(4, 4);
        let forced = GateGraph::from_edges(2, 2, [(0, 1)]);
        let c = &ficc(&forced)[0];
        assert_eq!(enumerate_component(c, &m, &b, &forced, 16, 0).unwrap().pairs, vec![(0, 1)]);

        // 7 candidates on the complete 2×2 gate graph
        let full = GateGraph::complete(2, 2);
        let c = &ficc(&full)[0];
        let mut count = 0;
        for_each_matching(&c.detections, &|i| full.tracklets_of(i), &mut Vec::new(), &mut Vec::new(), &mut |_| count += 1);
        assert_eq!(count, 7);
        let a = enumerate_component(c, &m, &b, &full, 16, 0).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.cost + 1.7).abs() < 1e-15);

        assert!(matches!(
            enumerate_component(c, &m, &b, &full, 3, 5),
            Err(Error::ComponentTooLarge { component: 5, size: 4, limit: 3 })
        ));
    }

    #[test]
    fn enumerate_matches_independent_reenumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (n_d, n_t) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let gates = random_gates(&mut rng, n_d, n_t, 0.4);
            let m = random_m(&mut rng, n_d, n_t, |_, _| true);
            let b = DMatrix::from_fn(n_d, n_t, |_, _| rng.gen_range(0.0..1.0));
            for (k, c) in ficc(&gates).iter().enumerate() {
                let got = enumerate_component(c, &m, &b, &gates, 16, k).unwrap();
                // every subset of the component's gate edges that is a matching
                let mut best: Option<Assignment> = None;
                for mask in 0u32..(1 << c.edges.len()) {
                    let pairs: Vec<Pair> = (0..c.edges.len()).filter(|e| mask >> e & 1 == 1).map(|e| c.edges[e]).collect();
                    let mut ds: Vec<_> = pairs.iter().map(|p| p.0).collect();
                    let mut ts: Vec<_> = pairs.iter().map(|p| p.1).collect();
                    ds.sort_unstable();
                    ds.dedup();
                    ts.sort_unstable();
                    ts.dedup();
                    if ds.len() != pairs.len() || ts.len() != pairs.len() {
                        continue;
                    }
                    let cost = component_cost(&pairs, &m, &b, edge_cost_approx(&pairs, &m, c, n_d, n_t));
                    assert!(got.cost <= cost);
                    if improves(cost, &pairs, &best) {
                        best = Some(Assignment { pairs, cost });
                    }
                }
                assert_eq!(Some(got), best);
            }
        }
    }

    fn component_of(comps: &[Component], n_d: usize, n_t: usize) -> (Vec<usize>, Vec<usize>) {
        let mut cd = vec![usize::MAX; n_d];
        let mut ct = vec![usize::MAX; n_t];
        for (k, c) in comps.iter().enumerate() {
            for &i in &c.detections {
                cd[i] = k;
            }
            for &j in &c.tracklets {
                ct[j] = k;
            }
        }
        (cd, ct)
    }

    /// Gated instance whose `M` vanishes across components.
    fn separable_instance(rng: &mut ChaCha8Rng, n_d: usize, n_t: usize) -> (SparseMatrix, DMatrix<f64>, GateGraph) {
        let gates = random_gates(rng, n_d, n_t, 0.35);
        let (cd, ct) = component_of(&ficc(&gates), n_d, n_t);
        let m = random_m(rng, n_d, n_t, |(i, j), (i2, j2)| {
            let k = cd[i];
            ct[j] == k && cd[i2] == k && ct[j2] == k
        });
        let b = DMatrix::from_fn(n_d, n_t, |_, _| rng.gen_range(0.0..1.0));
        (m, b, gates)
    }

    #[test]
    fn gst_equals_brute_force_when_components_decouple() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let (n_d, n_t) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let (m, b, gates) = separable_instance(&mut rng, n_d, n_t);
            let gst = gst_solve(&m, &b, &gates, &GstConfig::default()).unwrap();
            let brute = brute_force_qap(&m, &b, &gates).unwrap();
            assert_eq!(gst.matches, brute.pairs);
            assert_eq!(gst.cost, brute.cost);
        }
    }

    #[test]
    fn gst_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_m(&mut rng, 3, 3, |_, _| true);
        let b = DMatrix::from_element(3, 3, 0.9);
        let perfect = GateGraph::from_edges(3, 3, [(0, 2), (1, 0), (2, 1)]);
        let s = gst_solve(&m, &b, &perfect, &GstConfig::default()).unwrap();
        assert_eq!(s.matches, vec![(0, 2), (1, 0), (2, 1)]);
        let empty = GateGraph::from_edges(3, 3, []);
        assert!(gst_solve(&m, &b, &empty, &GstConfig::default()).unwrap().matches.is_empty());
    }

    #[test]
    fn oversized_component_falls_back_or_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_m(&mut rng, 3, 3, |_, _| true).map_values(|_, _, v| v * 0.1);
        let b = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.9 } else { 0.1 });
        let gates = GateGraph::complete(3, 3);
        let tight = GstConfig { max_enum: 4, fallback: false };
        assert!(matches!(gst_solve(&m, &b, &gates, &tight), Err(Error::ComponentTooLarge { component: 0, .. })));
        let s = gst_solve(&m, &b, &gates, &GstConfig { max_enum: 4, fallback: true }).unwrap();
        assert_eq!(s.fallbacks, vec![0]);
        assert_eq!(s.matches, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn brute_force_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // M = 0: linear problem, same as Hungarian on −B over gated entries
        for _ in 0..30 {
            let (n_d, n_t) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let b = DMatrix::from_fn(n_d, n_t, |_, _| rng.gen_range(0.1..1.0));
            let gates = GateGraph::complete(n_d, n_t);
            let brute = brute_force_qap(&SparseMatrix::zeros(n_d * n_t, n_d * n_t), &b, &gates).unwrap();
            let (pairs, cost) = hungarian(&(-&b));
            assert_eq!(brute.pairs, pairs);
            assert!((brute.cost - cost).abs() < 1e-12);
        }
        let one = brute_force_qap(&SparseMatrix::zeros(1, 1), &dm(1, 1, &[0.3]), &GateGraph::complete(1, 1)).unwrap();
        assert_eq!(one.pairs, vec![(0, 0)]);
        let one = brute_force_qap(&SparseMatrix::zeros(1, 1), &dm(1, 1, &[-0.3]), &GateGraph::complete(1, 1)).unwrap();
        assert!(one.pairs.is_empty());
        assert!(matches!(
            brute_force_qap(&SparseMatrix::zeros(64, 64), &DMatrix::zeros(8, 8), &GateGraph::complete(8, 8)),
            Err(Error::OracleTooLarge { size: 16, limit: 14 })
        ));
    }

    #[test]
    fn identical_graphs_choose_identity() {
        use crate::affinity::build_affinity;
        use crate::graphkit::{Bbox, ViewGraph};
        let f: Vec<_> = [[1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.4, 0.0, 1.0]]
            .iter()
            .map(|v| nalgebra::DVector::from_column_slice(v))
            .collect();
        let boxes: Vec<_> = (0..3).map(|k| Bbox::new(k as f64 * 3.0, 0.0, 2.0, 2.0)).collect();
        let g = ViewGraph::from_vertices(&f, boxes).unwrap();
        let aff = build_affinity(&g, &g).unwrap();
        let a = brute_force_qap(&aff.m, &aff.b, &GateGraph::complete(3, 3)).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    proptest! {
        #[test]
        fn components_partition_and_gst_respects_gates(n_d in 1usize..7, n_t in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gates = random_gates(&mut rng, n_d, n_t, 0.4);
            let comps = ficc(&gates);
            let mut ds: Vec<usize> = comps.iter().flat_map(|c| c.detections.clone()).collect();
            let mut ts: Vec<usize> = comps.iter().flat_map(|c| c.tracklets.clone()).collect();
            ds.sort_unstable();
            ts.sort_unstable();
            prop_assert_eq!(ds, (0..n_d).collect::<Vec<_>>());
            prop_assert_eq!(ts, (0..n_t).collect::<Vec<_>>());
            let (cd, ct) = component_of(&comps, n_d, n_t);
            for (i, j) in gates.edges() {
                prop_assert_eq!(cd[i], ct[j]);
            }
            prop_assert_eq!(comps.iter().map(|c| c.edges.len()).sum::<usize>(), gates.edge_count());
            for w in comps.windows(2) {
                prop_assert!(w[0].size() >= w[1].size());
            }

            let m = random_m(&mut rng, n_d, n_t, |_, _| true);
            let b = DMatrix::from_fn(n_d, n_t, |_, _| rng.gen_range(0.0..1.0));
            let s = gst_solve(&m, &b, &gates, &GstConfig::default()).unwrap();
            let mut used_d = vec![false; n_d];
            let mut used_t = vec![false; n_t];
            for &(i, j) in &s.matches {
                prop_assert!(gates.has_edge(i, j));
                prop_assert!(!std::mem::replace(&mut used_d[i], true));
                prop_assert!(!std::mem::replace(&mut used_t[j], true));
            }
        }
    }
}
