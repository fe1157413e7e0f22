//! MOTChallenge text files: `frame,id,bb_left,bb_top,bb_width,bb_height,conf[,...]`
//! with 1-based frames. Raw detections carry id −1.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::geometry::BoundingBox;
use crate::sequence::SequenceBundle;
use crate::tracklet::{Detection, DetectionId, Trajectory};

/// One parsed line, frame already 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub frame: usize,
    pub id: i64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Parses every record, sorted stably by frame. Blank lines and `#` comments are skipped.
pub fn read_records<R: Read>(r: R, path: &Path) -> Result<Vec<MotRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(err(format!("expected at least 7 comma-separated fields, found {}", fields.len())));
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[k].parse().map_err(|e| err(format!("{name} {:?}: {e}", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("{name} is not finite")))
            }
        };
        let frame: i64 = fields[0].parse().map_err(|e| err(format!("frame {:?}: {e}", fields[0])))?;
        if frame < 1 {
            return Err(err(format!("frame numbers start at 1, found {frame}")));
        }
        let id: i64 = fields[1].parse::<i64>().or_else(|_| num(1, "id").map(|v| v as i64)).map_err(|_| err(format!("id {:?}", fields[1])))?;
        let (w, h) = (num(4, "width")?, num(5, "height")?);
        if w < 0.0 || h < 0.0 {
            return Err(err("negative box size".into()));
        }
        out.push(MotRecord {
            frame: (frame - 1) as usize,
            id,
            bbox: BoundingBox::new(num(2, "left")?, num(3, "top")?, w, h),
            confidence: num(6, "confidence")?,
        });
    }
    out.sort_by_key(|r| r.frame);
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[MotRecord]) -> Result<()> {
    for r in records {
        let b = r.bbox;
        writeln!(w, "{},{},{},{},{},{},{},-1,-1,-1", r.frame + 1, r.id, b.left, b.top, b.width, b.height, r.confidence)?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<MotRecord>> {
    read_records(fs::File::open(path)?, path)
}

pub fn frame_span(records: &[MotRecord]) -> usize {
    records.iter().map(|r| r.frame + 1).max().unwrap_or(0)
}

/// Per-frame detection lists; ids are assigned in file order after sorting by frame.
pub fn detections_from_records(records: &[MotRecord], frames: usize) -> Vec<Vec<Detection>> {
    let mut out = vec![Vec::new(); frames];
    for (i, r) in records.iter().enumerate() {
        out[r.frame].push(Detection::new(r.frame, r.bbox, r.confidence, DetectionId(i as u32)));
    }
    out
}

/// Groups records by id into full-length trajectories. Ids must be positive;
/// rows whose confidence column is 0 (the ground-truth "ignore" flag) are skipped.
pub fn trajectories_from_records(records: &[MotRecord], frames: usize, path: &Path) -> Result<Vec<Trajectory>> {
    let mut by_id: BTreeMap<u32, Trajectory> = BTreeMap::new();
    for r in records {
        if r.confidence == 0.0 {
            continue;
        }
        let id = u32::try_from(r.id)
            .ok()
            .filter(|&id| id > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("{}: trajectory id {} must be positive", path.display(), r.id)))?;
        let t = by_id.entry(id).or_insert_with(|| Trajectory::new(id, frames));
        if !t.columns[r.frame].is_absent() {
            return Err(Error::InvalidParameter(format!("{}: id {id} appears twice in frame {}", path.display(), r.frame + 1)));
        }
        t.columns[r.frame] = r.bbox;
    }
    Ok(by_id.into_values().collect())
}

pub fn trajectories_to_records(trajectories: &[Trajectory]) -> Vec<MotRecord> {
    let mut out = Vec::new();
    for t in trajectories {
        for (n, b) in t.columns.iter().enumerate() {
            if !b.is_absent() {
                out.push(MotRecord {
                    frame: n,
                    id: i64::from(t.id),
                    bbox: *b,
                    confidence: 1.0,
                });
            }
        }
    }
    out.sort_by_key(|r| (r.frame, r.id));
    out
}

pub fn detections_to_records(frames: &[Vec<Detection>]) -> Vec<MotRecord> {
    let mut dets: Vec<&Detection> = frames.iter().flatten().collect();
    dets.sort_by_key(|d| (d.frame, d.id));
    dets.iter()
        .map(|d| MotRecord {
            frame: d.frame,
            id: -1,
            bbox: d.bbox,
            confidence: d.confidence,
        })
        .collect()
}

/// Writes `# key = value` comment lines describing the run.
pub fn write_header<W: Write>(mut w: W, cfg: &RunConfig) -> Result<()> {
    for line in cfg.to_lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

/// Tracker output in MOTChallenge result format, optionally preceded by the run configuration.
pub fn write_results<W: Write>(mut w: W, trajectories: &[Trajectory], header: Option<&RunConfig>) -> Result<()> {
    if let Some(cfg) = header {
        write_header(&mut w, cfg)?;
    }
    write_records(w, &trajectories_to_records(trajectories))
}

pub fn read_results(path: &Path, frames: usize) -> Result<Vec<Trajectory>> {
    let records = load_records(path)?;
    trajectories_from_records(&records, frames.max(frame_span(&records)), path)
}

/// Inputs of a sequence. `frames` extends the sequence beyond the last detection when larger.
pub struct BundleSources<'a> {
    pub detections: &'a Path,
    pub ground_truth: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    pub fps: f64,
    pub image_width: f64,
    pub image_height: f64,
}

pub fn load_bundle(src: &BundleSources<'_>) -> Result<SequenceBundle> {
    let det = load_records(src.detections)?;
    let gt = src.ground_truth.map(load_records).transpose()?;
    let frames = frame_span(&det).max(gt.as_deref().map_or(0, frame_span));
    let mut bundle = SequenceBundle::new(detections_from_records(&det, frames), src.fps, src.image_width, src.image_height);
    if let (Some(path), Some(gt)) = (src.ground_truth, gt) {
        bundle.ground_truth = Some(trajectories_from_records(&gt, frames, path)?);
    }
    if let Some(path) = src.embeddings {
        bundle.embeddings = Some(EmbeddingTable::load(path)?);
    }
    bundle.validate()?;
    Ok(bundle)
}
