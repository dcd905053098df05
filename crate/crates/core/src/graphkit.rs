//! Detections, tracklets and the complete directed graphs built over them.

use nalgebra::DVector;

use crate::tracker::KalmanState;
use crate::{Error, Result};

/// Norms at or below this are treated as the zero vector.
pub const EPS_NORM: f64 = 1e-12;

/// Axis-aligned box in center format `(cx, cy, w, h)`, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From top-left corner plus size.
    pub fn from_corner(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self::new(left + 0.5 * w, top + 0.5 * h, w, h)
    }

    pub fn left(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Intersection over union. Zero when either box is degenerate.
    pub fn iou(&self, other: &Bbox) -> f64 {
        let ix = (self.cx + 0.5 * self.w).min(other.cx + 0.5 * other.w) - self.left().max(other.left());
        let iy = (self.cy + 0.5 * self.h).min(other.cy + 0.5 * other.h) - self.top().max(other.top());
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub bbox: Bbox,
    pub feature: DVector<f64>,
}

impl Detection {
    pub fn new(frame: u32, bbox: Bbox, feature: DVector<f64>) -> Self {
        Self { frame, bbox, feature }
    }
}

#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub history: Vec<Detection>,
    pub agg_feature: DVector<f64>,
    pub kalman: KalmanState,
    pub age_since_update: u32,
}

impl Tracklet {
    pub fn last(&self) -> &Detection {
        self.history.last().expect("tracklet history is never empty")
    }

    pub fn history_features(&self) -> Vec<DVector<f64>> {
        self.history.iter().map(|d| d.feature.clone()).collect()
    }
}

/// Result of [`normalize_feature`]; `degenerate` marks a zero input.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: DVector<f64>,
    pub degenerate: bool,
}

pub fn normalize_feature(v: &DVector<f64>) -> Result<Normalized> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidFeature);
    }
    let norm = v.norm();
    if norm > EPS_NORM {
        Ok(Normalized {
            vector: v / norm,
            degenerate: false,
        })
    } else {
        Ok(Normalized {
            vector: DVector::zeros(v.len()),
            degenerate: true,
        })
    }
}

/// `l2([h_i, h_i'])`.
pub fn edge_feature(h_i: &DVector<f64>, h_i2: &DVector<f64>) -> Result<DVector<f64>> {
    if h_i.len() != h_i2.len() {
        return Err(Error::DimError {
            expected: h_i.len(),
            found: h_i2.len(),
        });
    }
    if h_i.iter().chain(h_i2.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidFeature);
    }
    // norm from the two halves so that swapping them is bit-exact
    let norm = (h_i.norm_squared() + h_i2.norm_squared()).sqrt();
    let d = h_i.len();
    if norm <= EPS_NORM {
        return Ok(DVector::zeros(2 * d));
    }
    Ok(DVector::from_fn(2 * d, |k, _| if k < d { h_i[k] } else { h_i2[k - d] } / norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    /// Recursive blend `a <- (1 - alpha) a + alpha f` over the history.
    MovingAverage(f64),
    Last,
}

pub fn aggregate_tracklet_feature(history: &[DVector<f64>], method: Aggregation) -> Result<DVector<f64>> {
    let first = history.first().ok_or(Error::EmptyTracklet)?;
    let dim = first.len();
    if let Some(bad) = history.iter().find(|f| f.len() != dim) {
        return Err(Error::DimError {
            expected: dim,
            found: bad.len(),
        });
    }
    let raw = match method {
        Aggregation::Mean => history.iter().fold(DVector::zeros(dim), |acc, f| acc + f) / history.len() as f64,
        Aggregation::MovingAverage(alpha) => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidArgument(format!("moving-average alpha {alpha} outside (0, 1)")));
            }
            history[1..]
                .iter()
                .fold(first.clone(), |acc, f| acc * (1.0 - alpha) + f * alpha)
        }
        Aggregation::Last => history[history.len() - 1].clone(),
    };
    Ok(normalize_feature(&raw)?.vector)
}

/// Complete directed graph over one view, without self loops.
///
/// Edges are enumerated source-major: for each `i`, every `i' != i` in
/// increasing order. Both orientations of each pair are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub vertex_features: Vec<DVector<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<DVector<f64>>,
    pub bboxes: Vec<Bbox>,
    /// Vertices whose input feature was the zero vector.
    pub degenerate: Vec<bool>,
}

impl ViewGraph {
    pub fn empty() -> Self {
        Self {
            vertex_features: Vec::new(),
            edges: Vec::new(),
            edge_features: Vec::new(),
            bboxes: Vec::new(),
            degenerate: Vec::new(),
        }
    }

    /// Normalizes the vertex features and derives every edge feature.
    pub fn from_vertices(features: &[DVector<f64>], bboxes: Vec<Bbox>) -> Result<Self> {
        if features.len() != bboxes.len() {
            return Err(Error::DimError {
                expected: features.len(),
                found: bboxes.len(),
            });
        }
        let Some(first) = features.first() else {
            return Ok(Self::empty());
        };
        let dim = first.len();
        let mut vertex_features = Vec::with_capacity(features.len());
        let mut degenerate = Vec::with_capacity(features.len());
        for f in features {
            if f.len() != dim {
                return Err(Error::DimError {
                    expected: dim,
                    found: f.len(),
                });
            }
            let n = normalize_feature(f)?;
            vertex_features.push(n.vector);
            degenerate.push(n.degenerate);
        }
        let n = vertex_features.len();
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
        let mut edge_features = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for i2 in (0..n).filter(|&k| k != i) {
                edges.push((i, i2));
                edge_features.push(edge_feature(&vertex_features[i], &vertex_features[i2])?);
            }
        }
        Ok(Self {
            vertex_features,
            edges,
            edge_features,
            bboxes,
            degenerate,
        })
    }

    pub fn n(&self) -> usize {
        self.vertex_features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex_features.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.vertex_features.first().map(|f| f.len())
    }

    /// Same boxes, new vertex features (e.g. after GCN enhancement).
    pub fn with_vertex_features(&self, features: &[DVector<f64>]) -> Result<Self> {
        Self::from_vertices(features, self.bboxes.clone())
    }
}

pub fn build_detection_graph(detections: &[Detection]) -> Result<ViewGraph> {
    let features: Vec<_> = detections.iter().map(|d| d.feature.clone()).collect();
    ViewGraph::from_vertices(&features, detections.iter().map(|d| d.bbox).collect())
}

/// Vertex features are aggregated histories; boxes come from the Kalman mean,
/// so callers predict before building.
pub fn build_tracklet_graph(tracklets: &[Tracklet], method: Aggregation) -> Result<ViewGraph> {
    let features = tracklets
        .iter()
        .map(|t| aggregate_tracklet_feature(&t.history_features(), method))
        .collect::<Result<Vec<_>>>()?;
    ViewGraph::from_vertices(&features, tracklets.iter().map(|t| t.kalman.bbox()).collect())
}
