//! Cross-graph GCN feature enhancement and end-to-end training.
//!
//! Each layer sends messages across the two graphs,
//! `m_i = Σ_j w_ij h_j` with `w_ij = cos(h_i, h_j) + IoU(g_i, g_j)`, and
//! updates `h_i ← MLP(h_i + ‖h_i‖ m_i / ‖m_i‖)`. Both sides update from the
//! previous layer's features. An appearance encoder runs first and the final
//! features are l2-normalized.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::affinity::{affinity_backward, build_affinity};
use crate::diffmatch::{gm_backward, gm_forward_with, matching_loss};
use crate::qpsolve::DEFAULT_TOL;
use crate::graphkit::{ViewGraph, EPS_NORM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(d_out, d_in),
            b: DVector::zeros(d_out),
        }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.b
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
struct MlpCache {
    x: DVector<f64>,
    pre: DVector<f64>,
}

impl Mlp {
    /// Hidden width `2 d_out` with `W1 = [P; -P]`, `W2 = [I, -I]`, where `P`
    /// keeps the first `d_out` input coordinates. Since
    /// `relu(a) - relu(-a) = a`, this is exactly the projection `P`;
    /// Gaussian noise of scale `noise` is added to every weight.
    pub fn near_identity(d_in: usize, d_out: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut l1 = Linear::zeros(d_in, 2 * d_out);
        let mut l2 = Linear::zeros(2 * d_out, d_out);
        for k in 0..d_out.min(d_in) {
            l1.w[(k, k)] = 1.0;
            l1.w[(d_out + k, k)] = -1.0;
        }
        for k in 0..d_out {
            l2.w[(k, k)] = 1.0;
            l2.w[(k, d_out + k)] = -1.0;
        }
        if noise > 0.0 {
            for w in l1.w.iter_mut().chain(l2.w.iter_mut()) {
                *w += noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self { l1, l2 }
    }

    pub fn d_in(&self) -> usize {
        self.l1.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.l2.w.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, MlpCache) {
        let pre = self.l1.apply(x);
        let y = self.l2.apply(&pre.map(|v| v.max(0.0)));
        (y, MlpCache { x: x.clone(), pre })
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, cache: &MlpCache, gy: &DVector<f64>, grad: &mut Mlp) -> DVector<f64> {
        let act = cache.pre.map(|v| v.max(0.0));
        grad.l2.w += gy * act.transpose();
        grad.l2.b += gy;
        let g_act = self.l2.w.tr_mul(gy);
        let g_pre = g_act.zip_map(&cache.pre, |g, p| if p > 0.0 { g } else { 0.0 });
        grad.l1.w += &g_pre * cache.x.transpose();
        grad.l1.b += &g_pre;
        self.l1.w.tr_mul(&g_pre)
    }

    fn zeros_like(&self) -> Self {
        Self {
            l1: Linear::zeros(self.l1.w.ncols(), self.l1.w.nrows()),
            l2: Linear::zeros(self.l2.w.ncols(), self.l2.w.nrows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// Appearance encoder `d_a -> d`.
    pub encoder: Mlp,
    /// One update MLP per GCN layer; the count is the layer count.
    pub layers: Vec<Mlp>,
    /// `h ← h + MLP(·)` instead of `h ← MLP(·)`.
    pub residual: bool,
}

impl GcnParams {
    pub fn near_identity(d_a: usize, d: usize, layer_count: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::near_identity(d_a, d, noise, &mut rng);
        let layers = (0..layer_count).map(|_| Mlp::near_identity(d, d, noise, &mut rng)).collect();
        Self {
            encoder,
            layers,
            residual: false,
        }
    }

    /// Exact identity on unit features when cross weights vanish.
    pub fn identity(d: usize, layer_count: usize) -> Self {
        Self::near_identity(d, d, layer_count, 0.0, 0)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.d_in()
    }

    fn linears(&self) -> Vec<&Linear> {
        std::iter::once(&self.encoder)
            .chain(&self.layers)
            .flat_map(|m| [&m.l1, &m.l2])
            .collect()
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        std::iter::once(&mut self.encoder)
            .chain(self.layers.iter_mut())
            .flat_map(|m| [&mut m.l1, &mut m.l2])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.linears().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat view: each linear layer's weights (column-major) then biases.
    pub fn to_vec(&self) -> Vec<f64> {
        self.linears()
            .into_iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_from(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter();
        for l in self.linears_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            layers: self.layers.iter().map(Mlp::zeros_like).collect(),
            residual: self.residual,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// `cos(h_i, h_j) + IoU(g_i, g_j)`, IoU only when `use_geo`.
pub fn cross_weight(
    h_i: &DVector<f64>,
    h_j: &DVector<f64>,
    g_i: &crate::graphkit::Bbox,
    g_j: &crate::graphkit::Bbox,
    use_geo: bool,
) -> f64 {
    let geo = if use_geo { g_i.iou(g_j) } else { 0.0 };
    cosine(h_i, h_j) + geo
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.norm() * b.norm();
    if n <= EPS_NORM {
        0.0
    } else {
        a.dot(b) / n
    }
}

#[derive(Debug, Clone)]
struct SideCache {
    h: Vec<DVector<f64>>,
    m: Vec<DVector<f64>>,
    mlp: Vec<MlpCache>,
    /// Message norm was below `EPS_NORM` and the term was dropped.
    dropped: Vec<bool>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    w: DMatrix<f64>,
    det: SideCache,
    trk: SideCache,
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    enc_det: Vec<MlpCache>,
    enc_trk: Vec<MlpCache>,
    layers: Vec<LayerCache>,
    /// Pre-normalization outputs.
    out_det: Vec<DVector<f64>>,
    out_trk: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct GcnOutput {
    pub det: Vec<DVector<f64>>,
    pub trk: Vec<DVector<f64>>,
    /// Vertices whose message vanished in some layer.
    pub dropped_messages: usize,
    pub cache: GcnCache,
}

fn normalized(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n <= EPS_NORM {
        DVector::zeros(v.len())
    } else {
        v / n
    }
}

/// `‖h‖ m / ‖m‖`, or `None` when the message vanishes.
fn message_term(h: &DVector<f64>, m: &DVector<f64>) -> Option<DVector<f64>> {
    let mn = m.norm();
    (mn > EPS_NORM).then(|| m * (h.norm() / mn))
}

fn update_side(mlp: &Mlp, residual: bool, h: &[DVector<f64>], m: Vec<DVector<f64>>) -> (Vec<DVector<f64>>, SideCache) {
    let mut out = Vec::with_capacity(h.len());
    let mut caches = Vec::with_capacity(h.len());
    let mut dropped = Vec::with_capacity(h.len());
    for (hi, mi) in h.iter().zip(&m) {
        let term = message_term(hi, mi);
        dropped.push(term.is_none());
        let u = match term {
            Some(t) => hi + t,
            None => hi.clone(),
        };
        let (y, c) = mlp.forward_cached(&u);
        out.push(if residual { y + hi } else { y });
        caches.push(c);
    }
    (
        out,
        SideCache {
            h: h.to_vec(),
            m,
            mlp: caches,
            dropped,
        },
    )
}

pub fn gcn_forward(g_d: &ViewGraph, g_t: &ViewGraph, params: &GcnParams, use_geo: bool) -> Result<GcnOutput> {
    let d_a = params.input_dim();
    for f in g_d.vertex_features.iter().chain(&g_t.vertex_features) {
        if f.len() != d_a {
            return Err(Error::DimError {
                expected: d_a,
                found: f.len(),
            });
        }
    }
    let encode = |fs: &[DVector<f64>]| -> (Vec<DVector<f64>>, Vec<MlpCache>) {
        fs.iter().map(|f| params.encoder.forward_cached(f)).unzip()
    };
    let (mut hd, enc_det) = encode(&g_d.vertex_features);
    let (mut ht, enc_trk) = encode(&g_t.vertex_features);

    let mut layers = Vec::with_capacity(params.layers.len());
    let mut dropped_messages = 0;
    for mlp in &params.layers {
        let w = DMatrix::from_fn(hd.len(), ht.len(), |i, j| {
            cross_weight(&hd[i], &ht[j], &g_d.bboxes[i], &g_t.bboxes[j], use_geo)
        });
        let dim = mlp.d_in();
        let md: Vec<_> = (0..hd.len())
            .map(|i| ht.iter().enumerate().fold(DVector::zeros(dim), |acc, (j, h)| acc + h * w[(i, j)]))
            .collect();
        let mt: Vec<_> = (0..ht.len())
            .map(|j| hd.iter().enumerate().fold(DVector::zeros(dim), |acc, (i, h)| acc + h * w[(i, j)]))
            .collect();
        let (nd, det) = update_side(mlp, params.residual, &hd, md);
        let (nt, trk) = update_side(mlp, params.residual, &ht, mt);
        dropped_messages += det.dropped.iter().chain(&trk.dropped).filter(|&&x| x).count();
        layers.push(LayerCache { w, det, trk });
        hd = nd;
        ht = nt;
    }
    Ok(GcnOutput {
        det: hd.iter().map(normalized).collect(),
        trk: ht.iter().map(normalized).collect(),
        dropped_messages,
        cache: GcnCache {
            enc_det,
            enc_trk,
            layers,
            out_det: hd,
            out_trk: ht,
        },
    })
}

#[derive(Debug, Clone)]
pub struct GcnGradients {
    pub params: GcnParams,
    pub input_det: Vec<DVector<f64>>,
    pub input_trk: Vec<DVector<f64>>,
}

fn normalize_backward(x: &DVector<f64>, gy: &DVector<f64>) -> DVector<f64> {
    let n = x.norm();
    if n <= EPS_NORM {
        return DVector::zeros(x.len());
    }
    let y = x / n;
    (gy - &y * y.dot(gy)) / n
}

/// Backward through one side's update. Returns gradients for that side's
/// layer inputs and its messages.
fn side_backward(
    mlp: &Mlp,
    residual: bool,
    side: &SideCache,
    g_out: &[DVector<f64>],
    grad: &mut Mlp,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut g_h = Vec::with_capacity(g_out.len());
    let mut g_m = Vec::with_capacity(g_out.len());
    for k in 0..g_out.len() {
        let g_u = mlp.backward(&side.mlp[k], &g_out[k], grad);
        let mut gh = g_u.clone();
        if residual {
            gh += &g_out[k];
        }
        let (h, m) = (&side.h[k], &side.m[k]);
        let mut gm = DVector::zeros(m.len());
        if !side.dropped[k] {
            let (hn, mn) = (h.norm(), m.norm());
            let m_hat = m / mn;
            let along = m_hat.dot(&g_u);
            if hn > EPS_NORM {
                gh += h * (along / hn);
            }
            gm = (&g_u - &m_hat * along) * (hn / mn);
        }
        g_h.push(gh);
        g_m.push(gm);
    }
    (g_h, g_m)
}

fn cosine_backward(a: &DVector<f64>, b: &DVector<f64>, g: f64) -> (DVector<f64>, DVector<f64>) {
    let (na, nb) = (a.norm(), b.norm());
    if na * nb <= EPS_NORM {
        return (DVector::zeros(a.len()), DVector::zeros(b.len()));
    }
    let c = a.dot(b) / (na * nb);
    let ga = (b / (na * nb) - a * (c / (na * na))) * g;
    let gb = (a / (na * nb) - b * (c / (nb * nb))) * g;
    (ga, gb)
}

/// Exact backprop through [`gcn_forward`] (IoU treated as a constant).
pub fn gcn_backward(
    params: &GcnParams,
    cache: &GcnCache,
    grad_det: &[DVector<f64>],
    grad_trk: &[DVector<f64>],
) -> Result<GcnGradients> {
    if grad_det.len() != cache.out_det.len() || grad_trk.len() != cache.out_trk.len() {
        return Err(Error::DimError {
            expected: cache.out_det.len() + cache.out_trk.len(),
            found: grad_det.len() + grad_trk.len(),
        });
    }
    let mut grads = params.zeros_like();
    let mut gd: Vec<_> = cache.out_det.iter().zip(grad_det).map(|(x, g)| normalize_backward(x, g)).collect();
    let mut gt: Vec<_> = cache.out_trk.iter().zip(grad_trk).map(|(x, g)| normalize_backward(x, g)).collect();

    for (l, (mlp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let (mut ghd, gmd) = side_backward(mlp, params.residual, &lc.det, &gd, &mut grads.layers[l]);
        let (mut ght, gmt) = side_backward(mlp, params.residual, &lc.trk, &gt, &mut grads.layers[l]);
        let (hd, ht) = (&lc.det.h, &lc.trk.h);
        for i in 0..hd.len() {
            for j in 0..ht.len() {
                let w = lc.w[(i, j)];
                // m_i = Σ_j w_ij h_j and m_j = Σ_i w_ij h_i
                ght[j] += &gmd[i] * w;
                ghd[i] += &gmt[j] * w;
                let gw = ht[j].dot(&gmd[i]) + hd[i].dot(&gmt[j]);
                if gw != 0.0 {
                    let (ga, gb) = cosine_backward(&hd[i], &ht[j], gw);
                    ghd[i] += ga;
                    ght[j] += gb;
                }
            }
        }
        gd = ghd;
        gt = ght;
    }

    let input_det = cache
        .enc_det
        .iter()
        .zip(&gd)
        .map(|(c, g)| params.encoder.backward(c, g, &mut grads.encoder))
        .collect();
    let input_trk = cache
        .enc_trk
        .iter()
        .zip(&gt)
        .map(|(c, g)| params.encoder.backward(c, g, &mut grads.encoder))
        .collect();
    Ok(GcnGradients {
        params: grads,
        input_det,
        input_trk,
    })
}

/// One training example: raw-feature graphs of both views plus the 0/1
/// ground-truth assignment.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub det: ViewGraph,
    pub trk: ViewGraph,
    pub y: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub tau: f64,
    pub use_geo: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            tau: crate::diffmatch::DEFAULT_TAU,
            use_geo: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

struct Chain {
    out: GcnOutput,
    gd: ViewGraph,
    gt: ViewGraph,
    score: crate::diffmatch::ScoreMap,
    rep: crate::diffmatch::LossReport,
}

fn forward_chain(params: &GcnParams, sample: &TrainSample, tau: f64, use_geo: bool, tol: f64) -> Result<Chain> {
    let out = gcn_forward(&sample.det, &sample.trk, params, use_geo)?;
    let gd = sample.det.with_vertex_features(&out.det)?;
    let gt = sample.trk.with_vertex_features(&out.trk)?;
    let aff = build_affinity(&gd, &gt)?;
    let score = gm_forward_with(&aff.m, &aff.b, tol, SOLVE_MAX_ITER)?;
    let rep = matching_loss(&score.x, &sample.y, tau)?;
    Ok(Chain { out, gd, gt, score, rep })
}

const SOLVE_MAX_ITER: usize = 200;

/// Loss of one sample through GCN, affinities, QP layer, sharpening and
/// weighted BCE, with the parameter gradient.
pub fn sample_loss_grad(params: &GcnParams, sample: &TrainSample, tau: f64, use_geo: bool) -> Result<(f64, GcnParams)> {
    sample_loss_grad_with(params, sample, tau, use_geo, DEFAULT_TOL)
}

/// As [`sample_loss_grad`] with an explicit QP tolerance.
pub fn sample_loss_grad_with(
    params: &GcnParams,
    sample: &TrainSample,
    tau: f64,
    use_geo: bool,
    tol: f64,
) -> Result<(f64, GcnParams)> {
    let c = forward_chain(params, sample, tau, use_geo, tol)?;
    let mg = gm_backward(&c.score.cache, &c.rep.grad)?;
    let (fd, ft) = affinity_backward(&c.gd, &c.gt, &mg.grad_b, &mg.grad_m)?;
    let grads = gcn_backward(params, &c.out.cache, &fd, &ft)?;
    Ok((c.rep.loss, grads.params))
}

/// Loss only, for finite differences and evaluation.
pub fn sample_loss(params: &GcnParams, sample: &TrainSample, tau: f64, use_geo: bool, tol: f64) -> Result<f64> {
    Ok(forward_chain(params, sample, tau, use_geo, tol)?.rep.loss)
}

/// Summed gradients over samples; merge partial batches with [`GradAccum::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub grad_sum: Vec<f64>,
    pub loss_sum: f64,
    pub count: usize,
}

impl GradAccum {
    pub fn merge(mut self, other: GradAccum) -> GradAccum {
        for (a, b) in self.grad_sum.iter_mut().zip(&other.grad_sum) {
            *a += b;
        }
        self.loss_sum += other.loss_sum;
        self.count += other.count;
        self
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub mean_loss: f64,
    pub grad_norm: f64,
    /// Loss or gradient was non-finite; parameters untouched, lr halved.
    pub rejected: bool,
}

/// Adam state plus the parameters it updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: GcnParams,
    pub config: TrainConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Trainer {
    pub fn new(params: GcnParams, config: TrainConfig) -> Self {
        let n = params.num_params();
        Self {
            params,
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Per-sample backward passes run concurrently; the sum is taken in
    /// sample order so results do not depend on scheduling.
    pub fn accumulate(&self, batch: &[TrainSample]) -> Result<GradAccum> {
        let per: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|s| {
                sample_loss_grad(&self.params, s, self.config.tau, self.config.use_geo).map(|(l, g)| (l, g.to_vec()))
            })
            .collect::<Result<_>>()?;
        let mut acc = GradAccum {
            grad_sum: vec![0.0; self.params.num_params()],
            loss_sum: 0.0,
            count: 0,
        };
        for (l, g) in per {
            acc = acc.merge(GradAccum {
                grad_sum: g,
                loss_sum: l,
                count: 1,
            });
        }
        Ok(acc)
    }

    /// Adam step on the mean gradient of `acc`, with coupled weight decay.
    pub fn apply(&mut self, acc: &GradAccum) -> StepReport {
        let count = acc.count.max(1) as f64;
        let mean_loss = acc.mean_loss();
        let grad: Vec<f64> = acc.grad_sum.iter().map(|g| g / count).collect();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !mean_loss.is_finite() || !grad_norm.is_finite() {
            self.config.lr *= 0.5;
            log::warn!("non-finite loss or gradient, step rejected; lr -> {}", self.config.lr);
            return StepReport {
                mean_loss,
                grad_norm,
                rejected: true,
            };
        }
        let c = self.config;
        self.t += 1;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        let mut theta = self.params.to_vec();
        for k in 0..theta.len() {
            let g = grad[k] + c.weight_decay * theta[k];
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            let (m_hat, v_hat) = (self.m[k] / bc1, self.v[k] / bc2);
            theta[k] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        self.params.set_from(&theta);
        StepReport {
            mean_loss,
            grad_norm,
            rejected: false,
        }
    }

    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        let acc = self.accumulate(batch)?;
        Ok(self.apply(&acc))
    }
}

const PARAM_MAGIC: &[u8; 8] = b"GMPARAM1";
const PARAM_VERSION: u32 = 1;

/// Little-endian checkpoint: magic, version, residual flag, linear-layer
/// count, `(rows, cols)` per layer, then per layer the row-major `f32`
/// weights followed by the biases.
pub fn write_params(mut w: impl Write, params: &GcnParams) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    let linears = params.linears();
    for v in [PARAM_VERSION, params.residual as u32, linears.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for l in &linears {
        w.write_all(&(l.w.nrows() as u32).to_le_bytes())?;
        w.write_all(&(l.w.ncols() as u32).to_le_bytes())?;
    }
    for l in &linears {
        for r in 0..l.w.nrows() {
            for c in 0..l.w.ncols() {
                w.write_all(&(l.w[(r, c)] as f32).to_le_bytes())?;
            }
        }
        for b in l.b.iter() {
            w.write_all(&(*b as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<GcnParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let read_u32 = |r: &mut dyn Read| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != PARAM_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let residual = read_u32(&mut r)? != 0;
    let count = read_u32(&mut r)? as usize;
    if count < 2 || count % 2 != 0 {
        return Err(Error::Format(format!("expected an even number of layers, got {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize));
    }
    let mut linears = Vec::with_capacity(count);
    for &(rows, cols) in &shapes {
        let mut buf = vec![0u8; 4 * (rows * cols + rows)];
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint weights".into()))?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        linears.push(Linear {
            w: DMatrix::from_row_slice(rows, cols, &vals[..rows * cols]),
            b: DVector::from_column_slice(&vals[rows * cols..]),
        });
    }
    let mut mlps = Vec::with_capacity(count / 2);
    let mut it = linears.into_iter();
    while let (Some(l1), Some(l2)) = (it.next(), it.next()) {
        if l1.w.nrows() != l2.w.ncols() {
            return Err(Error::Format("inconsistent layer sizes".into()));
        }
        mlps.push(Mlp { l1, l2 });
    }
    let encoder = mlps.remove(0);
    if mlps.iter().any(|m| m.d_in() != encoder.d_out() || m.d_out() != encoder.d_out()) {
        return Err(Error::Format("GCN layer width does not match encoder output".into()));
    }
    Ok(GcnParams {
        encoder,
        layers: mlps,
        residual,
    })
}
