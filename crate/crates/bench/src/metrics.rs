//! CLEAR MOT counts and IDF1.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;

use gmtrack::gst::hungarian;

use crate::mot::MotRecord;

/// IoU needed for a ground-truth box and a prediction to match.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub idf1: f64,
    pub mota: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt: usize,
    pub idtp: usize,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "idf1,mota,fp,fn,idsw,gt,idtp";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{},{}",
            self.idf1, self.mota, self.fp, self.fn_, self.idsw, self.gt, self.idtp
        )
    }
}

fn by_frame(records: &[MotRecord]) -> BTreeMap<u32, Vec<&MotRecord>> {
    let mut m: BTreeMap<u32, Vec<&MotRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.frame).or_default().push(r);
    }
    m
}

/// Per frame: keep last frame's pairs that still overlap enough, then
/// Hungarian on `1 − IoU` among the rest. An id switch is a ground-truth
/// identity matched to a different prediction id than at its previous
/// match. IDF1 matches identities globally by Hungarian on co-occurrence
/// counts.
///
/// With no ground truth MOTA is 1 when there are no false positives and 0
/// otherwise.
pub fn evaluate(gt: &[MotRecord], pred: &[MotRecord]) -> Metrics {
    let gt_frames = by_frame(gt);
    let pred_frames = by_frame(pred);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    let empty = Vec::new();

    let mut prev_pairs: HashMap<i64, i64> = HashMap::new();
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    let mut overlap: HashMap<(i64, i64), usize> = HashMap::new();
    let (mut fp, mut fn_, mut idsw, mut tp) = (0, 0, 0, 0);

    for f in frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let p = pred_frames.get(&f).unwrap_or(&empty);
        let iou = DMatrix::from_fn(g.len(), p.len(), |i, j| g[i].bbox().iou(&p[j].bbox()));
        for i in 0..g.len() {
            for j in 0..p.len() {
                if iou[(i, j)] >= MATCH_IOU {
                    *overlap.entry((g[i].id, p[j].id)).or_default() += 1;
                }
            }
        }

        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut pairs = Vec::new();
        for i in 0..g.len() {
            if let Some(&pid) = prev_pairs.get(&g[i].id) {
                if let Some(j) = (0..p.len()).find(|&j| !p_used[j] && p[j].id == pid && iou[(i, j)] >= MATCH_IOU) {
                    g_used[i] = true;
                    p_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }
        let free_g: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let free_p: Vec<usize> = (0..p.len()).filter(|&j| !p_used[j]).collect();
        let cost = DMatrix::from_fn(free_g.len(), free_p.len(), |a, b| {
            let v = iou[(free_g[a], free_p[b])];
            if v >= MATCH_IOU {
                1.0 - v
            } else {
                2.0
            }
        });
        for (a, b) in hungarian(&cost).0 {
            let (i, j) = (free_g[a], free_p[b]);
            if iou[(i, j)] >= MATCH_IOU {
                pairs.push((i, j));
            }
        }

        prev_pairs.clear();
        for &(i, j) in &pairs {
            let (gid, pid) = (g[i].id, p[j].id);
            if let Some(&last) = last_match.get(&gid) {
                if last != pid {
                    idsw += 1;
                }
            }
            last_match.insert(gid, pid);
            prev_pairs.insert(gid, pid);
        }
        tp += pairs.len();
        fp += p.len() - pairs.len();
        fn_ += g.len() - pairs.len();
    }
    debug_assert_eq!(tp + fn_, gt.len());

    let gt_ids: Vec<i64> = gt.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<i64> = pred.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let counts = DMatrix::from_fn(gt_ids.len(), pred_ids.len(), |a, b| {
        *overlap.get(&(gt_ids[a], pred_ids[b])).unwrap_or(&0) as f64
    });
    let (assign, _) = hungarian(&(-&counts));
    let idtp: usize = assign.iter().map(|&(a, b)| counts[(a, b)] as usize).sum();
    let denom = gt.len() + pred.len();
    let idf1 = if denom == 0 { 1.0 } else { 2.0 * idtp as f64 / denom as f64 };
    let mota = if gt.is_empty() {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - (fp + fn_ + idsw) as f64 / gt.len() as f64
    };
    Metrics {
        idf1,
        mota,
        fp,
        fn_,
        idsw,
        gt: gt.len(),
        idtp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gmtrack::graphkit::Bbox;

    fn track(id: i64, frames: std::ops::RangeInclusive<u32>, x: f64) -> Vec<MotRecord> {
        frames
            .map(|f| MotRecord::from_bbox(f, id, &Bbox::new(x + f as f64, 50.0, 20.0, 40.0), 1.0))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let gt: Vec<_> = track(1, 1..=10, 0.0).into_iter().chain(track(2, 1..=10, 100.0)).collect();
        let m = evaluate(&gt, &gt);
        assert_eq!((m.idf1, m.mota, m.idsw, m.fp, m.fn_), (1.0, 1.0, 0, 0, 0));
    }

    #[test]
    fn empty_predictions() {
        let gt = track(1, 1..=10, 0.0);
        let m = evaluate(&gt, &[]);
        assert_eq!((m.idf1, m.mota, m.fn_, m.gt), (0.0, 0.0, 10, 10));
    }

    #[test]
    fn split_identity() {
        let gt = track(1, 1..=10, 0.0);
        let pred: Vec<_> = track(7, 1..=5, 0.0).into_iter().chain(track(8, 6..=10, 0.0)).collect();
        let m = evaluate(&gt, &pred);
        assert_eq!(m.idsw, 1);
        assert_eq!(m.idf1, 0.5);
        assert_eq!(m.mota, 1.0 - 1.0 / 10.0);
    }

    #[test]
    fn swapped_identities_count_two_switches() {
        let gt: Vec<_> = track(1, 1..=4, 0.0).into_iter().chain(track(2, 1..=4, 100.0)).collect();
        let mut pred = gt.clone();
        for r in pred.iter_mut().filter(|r| r.frame > 2) {
            r.id = 3 - r.id;
        }
        let m = evaluate(&gt, &pred);
        assert_eq!(m.idsw, 2);
        assert_eq!(m.idf1, 0.5);
    }

    #[test]
    fn mota_identity_holds() {
        let gt: Vec<_> = track(1, 1..=6, 0.0).into_iter().chain(track(2, 3..=8, 100.0)).collect();
        let pred: Vec<_> = track(5, 2..=6, 0.0).into_iter().chain(track(6, 1..=8, 300.0)).collect();
        let m = evaluate(&gt, &pred);
        assert_eq!(m.mota, 1.0 - (m.fp + m.fn_ + m.idsw) as f64 / m.gt as f64);
        assert!((0.0..=1.0).contains(&m.idf1));
    }
}
