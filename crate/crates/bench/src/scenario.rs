//! Deterministic synthetic tracking scenarios.
//!
//! Targets move at constant velocity in separate horizontal lanes. A crossing
//! event puts targets 1 and 2 in one lane moving towards each other so they
//! swap sides; an occlusion event drops one target's detections for a range
//! of frames.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gmtrack::graphkit::{Bbox, Detection};

use crate::features::{from_rows, rows_f64, write_features};
use crate::kv::KeyValues;
use crate::mot::{write_mot, MotRecord};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    /// Frame at which the two boxes coincide horizontally.
    pub frame: u32,
    pub speed: f64,
    /// Cosine similarity between the two targets' base appearances.
    pub similarity: f64,
    /// Vertical offset between the two boxes.
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    /// Zero-based target index.
    pub target: usize,
    pub start: u32,
    pub length: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub targets: usize,
    pub frames: u32,
    pub feature_dim: usize,
    pub box_width: f64,
    pub box_height: f64,
    pub lane_spacing: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Standard deviation of detection center noise, pixels.
    pub position_noise: f64,
    /// Per-coordinate standard deviation added to base appearance.
    pub feature_noise: f64,
    pub crossing: Option<Crossing>,
    pub occlusion: Option<Occlusion>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            targets: 4,
            frames: 60,
            feature_dim: 16,
            box_width: 40.0,
            box_height: 80.0,
            lane_spacing: 120.0,
            min_speed: 1.0,
            max_speed: 3.0,
            position_noise: 0.0,
            feature_noise: 0.0,
            crossing: None,
            occlusion: None,
        }
    }
}

const KEYS: &[&str] = &[
    "targets",
    "frames",
    "feature_dim",
    "box_width",
    "box_height",
    "lane_spacing",
    "min_speed",
    "max_speed",
    "position_noise",
    "feature_noise",
    "crossing_frame",
    "crossing_speed",
    "crossing_similarity",
    "crossing_offset",
    "occlusion_target",
    "occlusion_start",
    "occlusion_length",
];

impl ScenarioConfig {
    pub fn no_noise() -> Self {
        Self::default()
    }

    /// Two similar-looking targets swap places mid-sequence.
    pub fn crossing() -> Self {
        Self {
            targets: 4,
            frames: 60,
            position_noise: 1.0,
            feature_noise: 0.08,
            crossing: Some(Crossing {
                frame: 30,
                speed: 3.0,
                similarity: 0.8,
                offset: 10.0,
            }),
            ..Self::default()
        }
    }

    /// Target 1 disappears for `length` frames.
    pub fn occlusion(length: u32) -> Self {
        Self {
            targets: 3,
            frames: 40 + length,
            position_noise: 0.5,
            feature_noise: 0.05,
            occlusion: Some(Occlusion {
                target: 0,
                start: 20,
                length,
            }),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "no-noise" => Some(Self::no_noise()),
            "crossing" => Some(Self::crossing()),
            "occlusion" => Some(Self::occlusion(50)),
            _ => None,
        }
    }

    /// Keys absent from `text` keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_known(KEYS)?;
        let mut c = Self::default();
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        set!(targets, frames, feature_dim, box_width, box_height, lane_spacing, min_speed, max_speed, position_noise, feature_noise);
        if let Some(frame) = kv.get("crossing_frame")? {
            let d = Self::crossing().crossing.unwrap();
            c.crossing = Some(Crossing {
                frame,
                speed: kv.get("crossing_speed")?.unwrap_or(d.speed),
                similarity: kv.get("crossing_similarity")?.unwrap_or(d.similarity),
                offset: kv.get("crossing_offset")?.unwrap_or(d.offset),
            });
        }
        if let Some(length) = kv.get("occlusion_length")? {
            c.occlusion = Some(Occlusion {
                target: kv.get("occlusion_target")?.unwrap_or(0),
                start: kv.get("occlusion_start")?.unwrap_or(20),
                length,
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(gmtrack::Error::InvalidArgument(m.to_string()).into());
        if self.feature_dim == 0 || self.frames == 0 {
            return bad("frames and feature_dim must be positive");
        }
        if self.crossing.is_some() && self.targets < 2 {
            return bad("a crossing needs at least two targets");
        }
        if let Some(o) = self.occlusion {
            if o.target >= self.targets {
                return bad("occlusion target out of range");
            }
        }
        if !(self.box_width > 0.0 && self.box_height > 0.0) {
            return bad("box sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    /// One record per target per frame, ids `1..=targets`.
    pub ground_truth: Vec<MotRecord>,
    /// Emitted detections with id `-1`, frame-ordered.
    pub detections: Vec<MotRecord>,
    /// True identity (1-based) of each detection.
    pub detection_ids: Vec<i64>,
    /// Unit appearance per identity.
    pub base_features: Vec<DVector<f64>>,
    /// Row `k` belongs to `detections[k]`.
    pub detection_features: DMatrix<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

pub fn gen_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base: Vec<DVector<f64>> = (0..c.targets).map(|_| unit(gaussian(&mut rng, c.feature_dim))).collect();
    if let Some(x) = c.crossing {
        // second target's appearance at the configured cosine to the first
        let r = &base[1] - &base[0] * base[0].dot(&base[1]);
        let orth = unit(r);
        base[1] = unit(&base[0] * x.similarity + orth * (1.0 - x.similarity * x.similarity).max(0.0).sqrt());
    }

    // (x(frame), y) per target
    let center_x = 500.0;
    let motion: Vec<(f64, f64, f64)> = (0..c.targets)
        .map(|k| {
            let lane = |l: usize| c.lane_spacing * (l as f64 + 1.0);
            match (c.crossing, k) {
                (Some(x), 0) => (center_x - x.speed * x.frame as f64, x.speed, lane(0)),
                (Some(x), 1) => (center_x + x.speed * x.frame as f64, -x.speed, lane(0) + x.offset),
                (Some(_), _) => {
                    let v = rng.gen_range(c.min_speed..=c.max_speed) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (rng.gen_range(300.0..700.0), v, lane(k - 1))
                }
                (None, _) => {
                    let v = rng.gen_range(c.min_speed..=c.max_speed) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (rng.gen_range(300.0..700.0), v, lane(k))
                }
            }
        })
        .collect();

    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    let mut detection_ids = Vec::new();
    let mut feats = Vec::new();
    for f in 1..=c.frames {
        for (k, &(x0, v, y)) in motion.iter().enumerate() {
            let gt = Bbox::new(x0 + v * f as f64, y, c.box_width, c.box_height);
            ground_truth.push(MotRecord::from_bbox(f, k as i64 + 1, &gt, 1.0));
            let hidden = c
                .occlusion
                .is_some_and(|o| o.target == k && f >= o.start && f < o.start + o.length);
            // draw noise regardless so visibility does not shift the stream
            let dx: f64 = rng.sample::<f64, _>(StandardNormal) * c.position_noise;
            let dy: f64 = rng.sample::<f64, _>(StandardNormal) * c.position_noise;
            let fv = unit(&base[k] + gaussian(&mut rng, c.feature_dim) * c.feature_noise);
            if hidden {
                continue;
            }
            let det = Bbox::new(gt.cx + dx, gt.cy + dy, gt.w, gt.h);
            detections.push(MotRecord::from_bbox(f, -1, &det, 1.0));
            detection_ids.push(k as i64 + 1);
            feats.push(fv);
        }
    }
    Ok(Scenario {
        config: c.clone(),
        seed,
        ground_truth,
        detections,
        detection_ids,
        detection_features: from_rows(&feats, c.feature_dim),
        base_features: base,
    })
}

impl Scenario {
    /// Detections grouped per frame for the tracker.
    pub fn frames(&self) -> Vec<Vec<Detection>> {
        detections_by_frame(&self.detections, &self.detection_features, self.config.frames)
    }

    /// Writes `gt.txt`, `det.txt` and `det.feat` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_mot(dir.join("gt.txt"), &self.ground_truth)?;
        write_mot(dir.join("det.txt"), &self.detections)?;
        write_features(dir.join("det.feat"), &self.detection_features)?;
        Ok(())
    }
}

/// Pairs detection records with feature rows and groups them by frame;
/// `frames` is a lower bound on the number of frames returned.
pub fn detections_by_frame(records: &[MotRecord], features: &DMatrix<f32>, frames: u32) -> Vec<Vec<Detection>> {
    let rows = rows_f64(features);
    let max = records.iter().map(|r| r.frame).max().unwrap_or(0).max(frames) as usize;
    let mut out = vec![Vec::new(); max];
    for (r, f) in records.iter().zip(rows) {
        out[r.frame as usize - 1].push(Detection::new(r.frame, r.bbox(), f));
    }
    out
}
