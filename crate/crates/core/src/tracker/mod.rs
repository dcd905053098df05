//! Online tracking loop: association by graph matching, constraint
//! filtering, IoU fallback and tracklet lifecycle.

mod kalman;

pub use kalman::*;

use nalgebra::DMatrix;

use crate::affinity::build_affinity;
use crate::diffmatch::gm_forward;
use crate::gcn::{gcn_forward, GcnParams};
use crate::graphkit::{build_detection_graph, build_tracklet_graph, Aggregation, Bbox, Detection, Tracklet};
use crate::gst::{build_gate_graph, gst_solve, hungarian, GateGraph, GstConfig, Pair};
use crate::{Error, Result};

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    a.iou(b)
}

/// Repeatedly takes the largest remaining entry and removes its row and
/// column. Ties go to the first entry in row-major order; stops at the
/// first non-finite maximum.
pub fn greedy_round(x: &DMatrix<f64>) -> Vec<Pair> {
    let (rows, cols) = x.shape();
    let mut row_free = vec![true; rows];
    let mut col_free = vec![true; cols];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(Pair, f64)> = None;
        for i in (0..rows).filter(|&i| row_free[i]) {
            for j in (0..cols).filter(|&j| col_free[j]) {
                let v = x[(i, j)];
                if best.map_or(true, |(_, b)| v > b || b.is_nan()) {
                    best = Some(((i, j), v));
                }
            }
        }
        match best {
            Some(((i, j), v)) if v.is_finite() => {
                row_free[i] = false;
                col_free[j] = false;
                out.push((i, j));
            }
            _ => return out,
        }
    }
}

/// Matches failing any of `B > σ`, `d² < κ`, `IoU > 0`.
pub fn apply_constraints(
    matches: &[Pair],
    b: &DMatrix<f64>,
    maha: &DMatrix<f64>,
    iou: &DMatrix<f64>,
    sigma: f64,
    kappa: f64,
) -> (Vec<Pair>, Vec<Pair>) {
    matches
        .iter()
        .partition(|&&(i, j)| b[(i, j)] > sigma && maha[(i, j)] < kappa && iou[(i, j)] > 0.0)
}

/// Hungarian on `1 − IoU`; pairs without overlap are never returned.
pub fn iou_fallback(detections: &[Bbox], tracklets: &[Bbox]) -> Vec<Pair> {
    let overlap = DMatrix::from_fn(detections.len(), tracklets.len(), |i, j| detections[i].iou(&tracklets[j]));
    let (pairs, _) = hungarian(&overlap.map(|v| 1.0 - v));
    pairs.into_iter().filter(|&(i, j)| overlap[(i, j)] > 0.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Qp,
    Gst,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qp" => Ok(Solver::Qp),
            "gst" => Ok(Solver::Gst),
            other => Err(Error::InvalidArgument(format!("unknown solver '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub sigma: f64,
    pub kappa: f64,
    /// Frames without update before a tracklet is retired.
    pub max_age: u32,
    pub solver: Solver,
    /// IoU term in the GCN cross weights.
    pub use_geo: bool,
    pub interpolation: bool,
    /// Drop the quadratic term and match on vertex affinities alone.
    pub bipartite: bool,
    pub aggregation: Aggregation,
    pub kalman: KalmanConfig,
    pub gst: GstConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            sigma: 0.6,
            kappa: CHI2_95_4DOF,
            max_age: 100,
            solver: Solver::Qp,
            use_geo: false,
            interpolation: false,
            bipartite: false,
            aggregation: Aggregation::Mean,
            kalman: KalmanConfig::default(),
            gst: GstConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidArgument(format!("sigma {} outside [-1, 1]", self.sigma)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa {} must be positive", self.kappa)));
        }
        if self.max_age < 1 {
            return Err(Error::InvalidArgument("max_age must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackEvent {
    Matched { id: u64, detection: usize },
    /// Associated by the IoU fallback after constraint filtering.
    FallbackMatched { id: u64, detection: usize },
    Created { id: u64, detection: usize },
    Retired { id: u64 },
    /// The configured solver failed; the frame used gated Hungarian on −B.
    SolverDegraded { reason: String },
}

#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    pub live: Vec<Tracklet>,
    pub finished: Vec<Tracklet>,
    next_id: u64,
}

/// Per-identity boxes sorted by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub boxes: Vec<(u32, Bbox)>,
}

impl TrackerState {
    pub fn new() -> Self {
        Self {
            live: Vec::new(),
            finished: Vec::new(),
            next_id: 1,
        }
    }

    fn spawn(&mut self, det: Detection, cfg: &TrackerConfig) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.live.push(Tracklet {
            id,
            kalman: KalmanState::initiate(&det.bbox, &cfg.kalman),
            agg_feature: det.feature.clone(),
            history: vec![det],
            age_since_update: 0,
        });
        id
    }

    /// Observed boxes of every tracklet so far, sorted by id.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut out: Vec<Trajectory> = self
            .live
            .iter()
            .chain(&self.finished)
            .map(|t| Trajectory {
                id: t.id,
                boxes: t.history.iter().map(|d| (d.frame, d.bbox)).collect(),
            })
            .collect();
        out.sort_by_key(|t| t.id);
        out
    }
}

fn gated_hungarian(b: &DMatrix<f64>, gates: &GateGraph) -> Vec<Pair> {
    let big = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cost = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| if gates.has_edge(i, j) { -b[(i, j)] } else { big });
    hungarian(&cost).0.into_iter().filter(|&(i, j)| gates.has_edge(i, j)).collect()
}

struct Association {
    matches: Vec<Pair>,
    degraded: Option<String>,
}

fn associate(
    detections: &[Detection],
    tracklets: &[Tracklet],
    cfg: &TrackerConfig,
    params: Option<&GcnParams>,
) -> Result<(Association, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let mut g_d = build_detection_graph(detections)?;
    let mut g_t = build_tracklet_graph(tracklets, cfg.aggregation)?;
    if let Some(p) = params {
        let out = gcn_forward(&g_d, &g_t, p, cfg.use_geo)?;
        g_d = g_d.with_vertex_features(&out.det)?;
        g_t = g_t.with_vertex_features(&out.trk)?;
    }
    let mut aff = build_affinity(&g_d, &g_t)?;
    if cfg.bipartite {
        aff.m = aff.m.map_values(|_, _, _| 0.0);
    }
    let maha = DMatrix::from_fn(detections.len(), tracklets.len(), |i, j| {
        tracklets[j].kalman.mahalanobis(&detections[i].bbox, &cfg.kalman)
    });
    let iou = DMatrix::from_fn(detections.len(), tracklets.len(), |i, j| {
        detections[i].bbox.iou(&tracklets[j].kalman.bbox())
    });
    let gates = build_gate_graph(&aff.b, &maha, &iou, cfg.sigma, cfg.kappa);
    let solved = match cfg.solver {
        Solver::Qp => gm_forward(&aff.m, &aff.b).map(|s| greedy_round(&s.x)),
        Solver::Gst => gst_solve(&aff.m, &aff.b, &gates, &cfg.gst).map(|s| s.matches),
    };
    let assoc = match solved {
        Ok(matches) => Association { matches, degraded: None },
        Err(e) => {
            log::warn!("solver failed ({e}); falling back to gated Hungarian");
            Association {
                matches: gated_hungarian(&aff.b, &gates),
                degraded: Some(e.to_string()),
            }
        }
    };
    Ok((assoc, aff.b, maha, iou))
}

/// One frame: predict, associate, filter, IoU fallback, update, spawn,
/// retire. Returns the association events in that order.
pub fn tracker_step(
    state: &mut TrackerState,
    detections: &[Detection],
    cfg: &TrackerConfig,
    params: Option<&GcnParams>,
) -> Result<Vec<TrackEvent>> {
    cfg.validate()?;
    if state.next_id == 0 {
        state.next_id = 1;
    }
    if let Some(d) = detections.first() {
        let dim = d.feature.len();
        let expected = state.live.first().map_or(dim, |t| t.agg_feature.len());
        if let Some(bad) = detections.iter().find(|x| x.feature.len() != expected) {
            return Err(Error::DimError {
                expected,
                found: bad.feature.len(),
            });
        }
    }
    for t in &mut state.live {
        t.kalman = t.kalman.predict(&cfg.kalman);
        t.age_since_update += 1;
    }

    let mut events = Vec::new();
    let mut det_used = vec![false; detections.len()];
    let mut trk_used = vec![false; state.live.len()];
    let mut updates: Vec<(usize, usize, bool)> = Vec::new();

    if !detections.is_empty() && !state.live.is_empty() {
        let (assoc, b, maha, iou) = associate(detections, &state.live, cfg, params)?;
        if let Some(reason) = assoc.degraded {
            events.push(TrackEvent::SolverDegraded { reason });
        }
        let (kept, _) = apply_constraints(&assoc.matches, &b, &maha, &iou, cfg.sigma, cfg.kappa);
        for &(i, j) in &kept {
            det_used[i] = true;
            trk_used[j] = true;
            updates.push((i, j, false));
        }
        let free_d: Vec<usize> = (0..detections.len()).filter(|&i| !det_used[i]).collect();
        let free_t: Vec<usize> = (0..state.live.len()).filter(|&j| !trk_used[j]).collect();
        let boxes_d: Vec<Bbox> = free_d.iter().map(|&i| detections[i].bbox).collect();
        let boxes_t: Vec<Bbox> = free_t.iter().map(|&j| state.live[j].kalman.bbox()).collect();
        for (a, c) in iou_fallback(&boxes_d, &boxes_t) {
            let (i, j) = (free_d[a], free_t[c]);
            det_used[i] = true;
            trk_used[j] = true;
            updates.push((i, j, true));
        }
    }

    updates.sort_unstable();
    for (i, j, fallback) in updates {
        let t = &mut state.live[j];
        let det = detections[i].clone();
        t.kalman = t.kalman.update(&det.bbox, &cfg.kalman);
        t.history.push(det);
        t.agg_feature = crate::graphkit::aggregate_tracklet_feature(&t.history_features(), cfg.aggregation)?;
        t.age_since_update = 0;
        events.push(if fallback {
            TrackEvent::FallbackMatched { id: t.id, detection: i }
        } else {
            TrackEvent::Matched { id: t.id, detection: i }
        });
    }
    for (i, d) in detections.iter().enumerate() {
        if !det_used[i] {
            let id = state.spawn(d.clone(), cfg);
            events.push(TrackEvent::Created { id, detection: i });
        }
    }
    let (keep, retire): (Vec<Tracklet>, Vec<Tracklet>) =
        std::mem::take(&mut state.live).into_iter().partition(|t| t.age_since_update <= cfg.max_age);
    state.live = keep;
    for t in retire {
        events.push(TrackEvent::Retired { id: t.id });
        state.finished.push(t);
    }
    Ok(events)
}

/// Runs the tracker over frames given in order and returns the
/// trajectories, interpolated if configured.
pub fn run_tracker(frames: &[Vec<Detection>], cfg: &TrackerConfig, params: Option<&GcnParams>) -> Result<Vec<Trajectory>> {
    let mut state = TrackerState::new();
    for dets in frames {
        tracker_step(&mut state, dets, cfg, params)?;
    }
    let traj = state.trajectories();
    Ok(if cfg.interpolation { interpolate(&traj) } else { traj })
}

/// Fills gaps between observed frames of each identity linearly.
pub fn interpolate(trajectories: &[Trajectory]) -> Vec<Trajectory> {
    trajectories
        .iter()
        .map(|t| {
            let mut boxes = t.boxes.clone();
            boxes.sort_by_key(|b| b.0);
            let mut out = Vec::with_capacity(boxes.len());
            for w in boxes.windows(2) {
                let ((f0, b0), (f1, b1)) = (w[0], w[1]);
                out.push((f0, b0));
                let (a, c) = (b0.to_array(), b1.to_array());
                for f in f0 + 1..f1 {
                    let s = (f - f0) as f64 / (f1 - f0) as f64;
                    let v: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + s * (y - x)).collect();
                    out.push((f, Bbox::from_slice(&v)));
                }
            }
            out.extend(boxes.last().copied());
            Trajectory { id: t.id, boxes: out }
        })
        .collect()
}
