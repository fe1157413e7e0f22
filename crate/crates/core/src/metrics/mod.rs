//! Tracklet-level IDF, identity measures and CLEAR-MOT measures.

mod clear;

use std::fmt;

use pathfinding::prelude::{kuhn_munkres, Matrix};

pub use clear::{match_frame, ClearMot, FrameMatch};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tracklet::{Trajectory, Tracklet};

/// A match between a detection and a ground-truth box needs more overlap than this.
pub const MATCH_IOU: f64 = 0.5;

/// `2·|matched frames| / (|tracklet support| + |ground-truth support|)`.
pub fn idf_pair(t: &Tracklet, g: &Trajectory) -> f64 {
    let (mut matched, mut dets, mut gts) = (0usize, 0usize, 0usize);
    for n in 0..t.len().min(g.len()) {
        let d = t.bbox(n);
        let present = !d.is_absent();
        let gp = g.is_present(n);
        dets += present as usize;
        gts += gp as usize;
        if present && gp && iou(&d, &g.columns[n]) > MATCH_IOU {
            matched += 1;
        }
    }
    if dets + gts == 0 {
        0.0
    } else {
        2.0 * matched as f64 / (dets + gts) as f64
    }
}

/// Pairs `(row, column)` of a maximum-weight assignment, keeping only positive-weight pairs.
pub(crate) fn max_weight_pairs(weights: &[Vec<i64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let data: Vec<i64> = (0..r)
        .flat_map(|i| (0..c).map(move |j| if transpose { weights[j][i] } else { weights[i][j] }))
        .collect();
    let m = Matrix::from_vec(r, c, data).expect("rectangular");
    let (_, assign) = kuhn_munkres(&m);
    assign
        .into_iter()
        .enumerate()
        .map(|(i, j)| if transpose { (j, i) } else { (i, j) })
        .filter(|&(i, j)| weights[i][j] > 0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdentityMetrics {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Truth-to-result identity matching maximising correctly identified detections.
pub fn identity_metrics(outputs: &[Trajectory], gt: &[Trajectory]) -> IdentityMetrics {
    let weights: Vec<Vec<i64>> = gt
        .iter()
        .map(|g| {
            outputs
                .iter()
                .map(|h| {
                    (0..g.len().min(h.len()))
                        .filter(|&n| g.is_present(n) && h.is_present(n) && iou(&g.columns[n], &h.columns[n]) > MATCH_IOU)
                        .count() as i64
                })
                .collect()
        })
        .collect();
    let idtp: usize = max_weight_pairs(&weights).iter().map(|&(i, j)| weights[i][j] as usize).sum();
    let gt_total: usize = gt.iter().map(Trajectory::support_len).sum();
    let out_total: usize = outputs.iter().map(Trajectory::support_len).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    IdentityMetrics {
        idf1: ratio(2 * idtp, gt_total + out_total),
        idp: ratio(idtp, out_total),
        idr: ratio(idtp, gt_total),
        idtp,
        idfp: out_total - idtp,
        idfn: gt_total - idtp,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    /// Can be negative when errors outnumber ground-truth detections.
    pub mota: f64,
    pub motp: f64,
    pub faf: f64,
    /// Ground-truth trajectories covered for at least 80% of their life span.
    pub mt: usize,
    /// Ground-truth trajectories covered for at most 20% of their life span.
    pub ml: usize,
    pub fp: usize,
    pub fn_: usize,
    pub id_switches: usize,
    pub frag: usize,
    pub gt_trajectories: usize,
    pub frames: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "IDF1,IDP,IDR,MOTA,MOTP,FAF,MT,ML,FP,FN,IDSw,Frag";

    /// Percentages for the ratio measures, raw values otherwise.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2},{:.2},{:.4},{},{},{},{},{},{}",
            100.0 * self.idf1,
            100.0 * self.idp,
            100.0 * self.idr,
            100.0 * self.mota,
            100.0 * self.motp,
            self.faf,
            self.mt,
            self.ml,
            self.fp,
            self.fn_,
            self.id_switches,
            self.frag
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 12] = [
            ("IDF1", format!("{:.1}", 100.0 * self.idf1)),
            ("IDP", format!("{:.1}", 100.0 * self.idp)),
            ("IDR", format!("{:.1}", 100.0 * self.idr)),
            ("MOTA", format!("{:.1}", 100.0 * self.mota)),
            ("MOTP", format!("{:.1}", 100.0 * self.motp)),
            ("FAF", format!("{:.3}", self.faf)),
            ("MT", format!("{} / {}", self.mt, self.gt_trajectories)),
            ("ML", format!("{} / {}", self.ml, self.gt_trajectories)),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("ID Sw.", self.id_switches.to_string()),
            ("Frag.", self.frag.to_string()),
        ];
        for (name, value) in rows {
            writeln!(f, "{name:<8}{value:>12}")?;
        }
        Ok(())
    }
}

/// Every measure for `outputs` against `gt` over `frames` frames.
pub fn report(outputs: &[Trajectory], gt: &[Trajectory], frames: usize) -> Result<MetricsReport> {
    for t in outputs.iter().chain(gt) {
        if t.len() != frames {
            return Err(Error::FrameCountMismatch {
                expected: frames,
                actual: t.len(),
            });
        }
    }
    let gt_total: usize = gt.iter().map(Trajectory::support_len).sum();
    if gt_total == 0 {
        return Err(Error::NoGroundTruthDetections);
    }
    let clear = ClearMot::evaluate(outputs, gt, frames);
    let id = identity_metrics(outputs, gt);
    Ok(MetricsReport {
        idf1: id.idf1,
        idp: id.idp,
        idr: id.idr,
        mota: 1.0 - (clear.fp + clear.fn_ + clear.id_switches) as f64 / gt_total as f64,
        motp: if clear.matches == 0 { 0.0 } else { clear.iou_sum / clear.matches as f64 },
        faf: if frames == 0 { 0.0 } else { clear.fp as f64 / frames as f64 },
        mt: clear.mostly_tracked,
        ml: clear.mostly_lost,
        fp: clear.fp,
        fn_: clear.fn_,
        id_switches: clear.id_switches,
        frag: clear.frag,
        gt_trajectories: gt.iter().filter(|g| g.support_len() > 0).count(),
        frames,
    })
}

/// One report over several sequences, laid end to end with disjoint identity labels.
pub fn report_many(parts: &[(&[Trajectory], &[Trajectory], usize)]) -> Result<MetricsReport> {
    let total: usize = parts.iter().map(|p| p.2).sum();
    let mut outputs = Vec::new();
    let mut gt = Vec::new();
    let mut offset = 0;
    let mut next_out = 1u32;
    let mut next_gt = 1u32;
    for &(out, g, frames) in parts {
        for (src, dst, next) in [(out, &mut outputs, &mut next_out), (g, &mut gt, &mut next_gt)] {
            for t in src {
                if t.len() != frames {
                    return Err(Error::FrameCountMismatch {
                        expected: frames,
                        actual: t.len(),
                    });
                }
                let mut columns = vec![BoundingBox::ABSENT; total];
                columns[offset..offset + frames].copy_from_slice(&t.columns);
                dst.push(Trajectory { id: *next, columns });
                *next += 1;
            }
        }
        offset += frames;
    }
    report(&outputs, &gt, total)
}
