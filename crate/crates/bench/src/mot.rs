//! MOT Challenge CSV records.

use std::fmt::Write as _;
use std::path::Path;

use gmtrack::graphkit::Bbox;
use gmtrack::tracker::Trajectory;

use crate::{BenchError, Result};

/// One CSV row: `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`.
/// Boxes keep the file's corner format; [`MotRecord::bbox`] converts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub frame: u32,
    /// `-1` for raw detections.
    pub id: i64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotRecord {
    pub fn from_bbox(frame: u32, id: i64, bbox: &Bbox, conf: f64) -> Self {
        Self {
            frame,
            id,
            bb_left: bbox.left(),
            bb_top: bbox.top(),
            bb_width: bbox.w,
            bb_height: bbox.h,
            conf,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    /// Center-format box.
    pub fn bbox(&self) -> Bbox {
        Bbox::from_corner(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

/// Parses CSV text. Trailing fields may be omitted: `conf` defaults to 1 and
/// `x, y, z` to -1.
pub fn parse_mot(text: &str) -> Result<Vec<MotRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| BenchError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |message: String| BenchError::Parse { line, message };
        if rec.len() < 6 || rec.len() > 10 {
            return Err(err(format!("expected 6 to 10 fields, found {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let s = &rec[k];
            s.parse::<f64>().map_err(|_| err(format!("field {} is not a number: '{s}'", k + 1)))
        };
        let opt = |k: usize, default: f64| if k < rec.len() { num(k) } else { Ok(default) };
        let frame = num(0)?;
        if frame < 1.0 || frame.fract() != 0.0 || frame > u32::MAX as f64 {
            return Err(err(format!("frame must be a positive integer, got {}", &rec[0])));
        }
        let id = num(1)?;
        if id.fract() != 0.0 {
            return Err(err(format!("id must be an integer, got {}", &rec[1])));
        }
        let r = MotRecord {
            frame: frame as u32,
            id: id as i64,
            bb_left: num(2)?,
            bb_top: num(3)?,
            bb_width: num(4)?,
            bb_height: num(5)?,
            conf: opt(6, 1.0)?,
            x: opt(7, -1.0)?,
            y: opt(8, -1.0)?,
            z: opt(9, -1.0)?,
        };
        if !(r.bb_width > 0.0 && r.bb_height > 0.0) {
            return Err(err("box width and height must be positive".into()));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_mot(path: impl AsRef<Path>) -> Result<Vec<MotRecord>> {
    parse_mot(&std::fs::read_to_string(path)?)
}

/// Integers for frame and id, six decimals for every float.
/// Tracker output as MOT records sorted by frame, then id.
pub fn trajectory_records(trajectories: &[Trajectory]) -> Vec<MotRecord> {
    let mut recs: Vec<MotRecord> = trajectories
        .iter()
        .flat_map(|t| t.boxes.iter().map(move |(f, b)| MotRecord::from_bbox(*f, t.id as i64, b, 1.0)))
        .collect();
    recs.sort_by_key(|r| (r.frame, r.id));
    recs
}

pub fn format_mot(records: &[MotRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.frame, r.id, r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf, r.x, r.y, r.z
        )
        .unwrap();
    }
    s
}

pub fn write_mot(path: impl AsRef<Path>, records: &[MotRecord]) -> Result<()> {
    std::fs::write(path, format_mot(records))?;
    Ok(())
}

/// Records grouped by frame `1..=max_frame`, preserving file order within a
/// frame.
pub fn group_by_frame(records: &[MotRecord]) -> Vec<Vec<(usize, MotRecord)>> {
    let max = records.iter().map(|r| r.frame).max().unwrap_or(0) as usize;
    let mut out = vec![Vec::new(); max];
    for (k, r) in records.iter().enumerate() {
        out[r.frame as usize - 1].push((k, *r));
    }
    out
}
