//! Toy end-to-end training set: identity features hidden among nuisance
//! dimensions that change on every observation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gmtrack::gcn::{sample_loss, GcnParams, TrainConfig, TrainSample, Trainer};
use gmtrack::graphkit::{Bbox, ViewGraph};
use gmtrack::qpsolve::DEFAULT_TOL;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub identities: usize,
    pub id_dim: usize,
    pub nuisance_dim: usize,
    /// Per-coordinate noise on the identity part.
    pub id_noise: f64,
    /// Per-coordinate scale of the nuisance part.
    pub nuisance_scale: f64,
    pub steps: usize,
    pub batch: usize,
    pub eval_samples: usize,
    pub layers: usize,
    pub init_noise: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            id_dim: 8,
            nuisance_dim: 8,
            id_noise: 0.05,
            nuisance_scale: 0.5,
            steps: 200,
            batch: 4,
            eval_samples: 8,
            layers: 1,
            init_noise: 0.01,
            train: TrainConfig {
                lr: 1e-2,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

pub struct ToyData {
    base: Vec<DVector<f64>>,
}

impl ToyData {
    pub fn new(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = (0..cfg.identities)
            .map(|_| {
                let v = DVector::from_fn(cfg.id_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                v.normalize()
            })
            .collect();
        Self { base }
    }

    fn observe(&self, cfg: &ToyConfig, k: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(cfg.id_dim + cfg.nuisance_dim, |r, _| {
            let z: f64 = rng.sample(StandardNormal);
            if r < cfg.id_dim {
                self.base[k][r] + cfg.id_noise * z
            } else {
                cfg.nuisance_scale * z
            }
        })
    }

    /// Tracklets in identity order, detections a random permutation.
    pub fn sample(&self, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
        let n = cfg.identities;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let boxes = vec![Bbox::new(0.0, 0.0, 1.0, 1.0); n];
        let trk: Vec<_> = (0..n).map(|k| self.observe(cfg, k, rng)).collect();
        let det: Vec<_> = perm.iter().map(|&k| self.observe(cfg, k, rng)).collect();
        Ok(TrainSample {
            det: ViewGraph::from_vertices(&det, boxes.clone())?,
            trk: ViewGraph::from_vertices(&trk, boxes)?,
            y: DMatrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 } else { 0.0 }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone)]
pub struct ToyReport {
    /// Mean loss on the held-out samples before training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<StepRecord>,
    pub all_finite: bool,
    pub params: GcnParams,
}

impl ToyReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

fn mean_loss(params: &GcnParams, samples: &[TrainSample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(params, s, cfg.tau, cfg.use_geo, DEFAULT_TOL)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn train_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = ToyData::new(cfg, &mut rng);
    let eval: Vec<TrainSample> = (0..cfg.eval_samples).map(|_| data.sample(cfg, &mut rng)).collect::<Result<_>>()?;
    let d = cfg.id_dim + cfg.nuisance_dim;
    let params = GcnParams::near_identity(d, d, cfg.layers, cfg.init_noise, cfg.seed);
    let initial_loss = mean_loss(&params, &eval, &cfg.train)?;
    let mut trainer = Trainer::new(params, cfg.train);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut all_finite = true;
    for step in 0..cfg.steps {
        let batch: Vec<TrainSample> = (0..cfg.batch).map(|_| data.sample(cfg, &mut rng)).collect::<Result<_>>()?;
        let r = trainer.train_step(&batch)?;
        all_finite &= !r.rejected && r.grad_norm.is_finite() && r.mean_loss.is_finite();
        curve.push(StepRecord {
            step,
            loss: r.mean_loss,
            grad_norm: r.grad_norm,
            rejected: r.rejected,
        });
        log::debug!("step {step}: loss {:.5} |g| {:.3e}", r.mean_loss, r.grad_norm);
    }
    all_finite &= trainer.params.is_finite();
    let final_loss = mean_loss(&trainer.params, &eval, &cfg.train)?;
    Ok(ToyReport {
        initial_loss,
        final_loss,
        curve,
        all_finite,
        params: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_consistent() {
        let cfg = ToyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = ToyData::new(&cfg, &mut rng);
        let s = data.sample(&cfg, &mut rng).unwrap();
        assert_eq!(s.det.n(), 10);
        assert_eq!(s.y.row_sum().iter().sum::<f64>(), 10.0);
        assert!(s.y.row_sum().iter().all(|&v| v == 1.0));
        assert!(s.y.column_sum().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn short_run_is_finite() {
        let cfg = ToyConfig {
            steps: 3,
            batch: 2,
            eval_samples: 2,
            ..ToyConfig::default()
        };
        let r = train_toy(&cfg).unwrap();
        assert!(r.all_finite);
        assert_eq!(r.curve.len(), 3);
    }
}
