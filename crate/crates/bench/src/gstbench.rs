//! Solver timing on random gated instances: GST against the interior-point
//! solve of the full relaxed problem.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gmtrack::affinity::build_affinity;
use gmtrack::diffmatch::gm_forward;
use gmtrack::graphkit::{Bbox, ViewGraph};
use gmtrack::gst::{ficc, gst_solve, GateGraph, GstConfig};
use gmtrack::sparse::SparseMatrix;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GstBenchConfig {
    /// Detections and tracklets per instance.
    pub n: usize,
    /// Target mean of `|V_c^D| + |V_c^T|` over components.
    pub avg_component: f64,
    pub instances: usize,
    pub repeats: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for GstBenchConfig {
    fn default() -> Self {
        Self {
            n: 40,
            avg_component: 4.0,
            instances: 3,
            repeats: 5,
            feature_dim: 32,
            seed: 0,
        }
    }
}

pub struct GatedInstance {
    pub m: SparseMatrix,
    pub b: nalgebra::DMatrix<f64>,
    pub gates: GateGraph,
}

/// Identities are grouped into clusters of `k` look-alikes (`k` from 1 to
/// 3, mean `avg_component / 2`); gates connect detections and tracklets of
/// the same cluster.
pub fn gated_instance(n: usize, avg_component: f64, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<GatedInstance> {
    let mean_k = (avg_component / 2.0).clamp(1.0, 3.0);
    let mut cluster = Vec::with_capacity(n);
    let mut c = 0;
    while cluster.len() < n {
        // k ∈ {1, 2, 3} with mean mean_k
        let k = if mean_k <= 2.0 {
            if rng.gen_bool(mean_k - 1.0) {
                2
            } else {
                1
            }
        } else if rng.gen_bool(mean_k - 2.0) {
            3
        } else {
            2
        };
        for _ in 0..k.min(n - cluster.len()) {
            cluster.push(c);
        }
        c += 1;
    }
    let gaussian = |rng: &mut ChaCha8Rng| DVector::from_fn(feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let centers: Vec<DVector<f64>> = (0..c).map(|_| gaussian(rng).normalize()).collect();
    let ident: Vec<DVector<f64>> = cluster.iter().map(|&k| &centers[k] + gaussian(rng) * 0.05).collect();
    let observe = |rng: &mut ChaCha8Rng, k: usize| &ident[k] + gaussian(rng) * 0.02;
    let trk: Vec<_> = (0..n).map(|k| observe(rng, k)).collect();
    let det: Vec<_> = (0..n).map(|k| observe(rng, k)).collect();
    let boxes = vec![Bbox::new(0.0, 0.0, 1.0, 1.0); n];
    let aff = build_affinity(&ViewGraph::from_vertices(&det, boxes.clone())?, &ViewGraph::from_vertices(&trk, boxes)?)?;
    let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| cluster[i] == cluster[j]);
    Ok(GatedInstance {
        m: aff.m,
        b: aff.b,
        gates: GateGraph::from_edges(n, n, edges),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub instance: usize,
    pub n: usize,
    pub components: usize,
    pub mean_component: f64,
    pub max_component: usize,
    pub gst_seconds: f64,
    pub qp_seconds: f64,
}

impl TimingRow {
    pub const CSV_HEADER: &'static str = "instance,n,components,mean_component,max_component,gst_seconds,qp_seconds,speedup";

    pub fn speedup(&self) -> f64 {
        self.qp_seconds / self.gst_seconds
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{},{:.9},{:.9},{:.2}",
            self.instance,
            self.n,
            self.components,
            self.mean_component,
            self.max_component,
            self.gst_seconds,
            self.qp_seconds,
            self.speedup()
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock seconds of `f` over `repeats` runs.
fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Instances are generated up front; timings run one at a time so the two
/// solvers never compete for cores.
pub fn run_gst_bench(cfg: &GstBenchConfig) -> Result<Vec<TimingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let inst = gated_instance(cfg.n, cfg.avg_component, cfg.feature_dim, &mut rng)?;
        let comps = ficc(&inst.gates);
        let gst_cfg = GstConfig::default();
        let gst_seconds = time_median(cfg.repeats, || {
            gst_solve(&inst.m, &inst.b, &inst.gates, &gst_cfg)?;
            Ok(())
        })?;
        let qp_seconds = time_median(cfg.repeats, || {
            gm_forward(&inst.m, &inst.b)?;
            Ok(())
        })?;
        let row = TimingRow {
            instance,
            n: cfg.n,
            components: comps.len(),
            mean_component: comps.iter().map(|c| c.size()).sum::<usize>() as f64 / comps.len() as f64,
            max_component: comps.iter().map(|c| c.size()).max().unwrap_or(0),
            gst_seconds,
            qp_seconds,
        };
        log::info!("{}", row.csv_row());
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_components_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = gated_instance(20, 4.0, 16, &mut rng).unwrap();
        let comps = ficc(&inst.gates);
        let mean = comps.iter().map(|c| c.size()).sum::<usize>() as f64 / comps.len() as f64;
        assert!(mean <= 4.0 + 1e-12, "{mean}");
        assert!(comps.iter().all(|c| c.size() <= 6));
    }

    #[test]
    fn small_benchmark_runs() {
        let rows = run_gst_bench(&GstBenchConfig {
            n: 6,
            instances: 1,
            repeats: 1,
            ..GstBenchConfig::default()
        })
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].gst_seconds >= 0.0 && rows[0].qp_seconds > 0.0);
    }
}
