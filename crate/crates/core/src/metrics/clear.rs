use std::collections::{BTreeMap, HashSet};

use super::{max_weight_pairs, MATCH_IOU};
use crate::geometry::{iou, BoundingBox};
use crate::tracklet::Trajectory;

/// Matching of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(ground-truth id, hypothesis id, IoU)`.
    pub matches: Vec<(u32, u32, f64)>,
    pub fp: usize,
    pub fn_: usize,
    /// Ground-truth ids whose matched hypothesis differs from their previous one.
    pub switches: Vec<u32>,
}

/// Integer weight preferring more matches first and higher IoU second.
fn weight(o: f64) -> i64 {
    if o > MATCH_IOU {
        1_000_000_000_000 + (o * 1e9).round() as i64
    } else {
        0
    }
}

/// Matches one frame: previous correspondences that still overlap enough are
/// kept, the rest are assigned optimally.
pub fn match_frame(hyps: &[(u32, BoundingBox)], gts: &[(u32, BoundingBox)], prior: &BTreeMap<u32, u32>) -> FrameMatch {
    let mut out = FrameMatch::default();
    let mut used_h = HashSet::new();
    let mut used_g = HashSet::new();
    for (gi, (g, gb)) in gts.iter().enumerate() {
        if let Some(&h) = prior.get(g) {
            if let Some((hi, (_, hb))) = hyps.iter().enumerate().find(|(hi, (id, _))| *id == h && !used_h.contains(hi)) {
                let o = iou(gb, hb);
                if o > MATCH_IOU {
                    out.matches.push((*g, h, o));
                    used_h.insert(hi);
                    used_g.insert(gi);
                }
            }
        }
    }
    let free_g: Vec<usize> = (0..gts.len()).filter(|i| !used_g.contains(i)).collect();
    let free_h: Vec<usize> = (0..hyps.len()).filter(|i| !used_h.contains(i)).collect();
    let weights: Vec<Vec<i64>> = free_g
        .iter()
        .map(|&gi| free_h.iter().map(|&hi| weight(iou(&gts[gi].1, &hyps[hi].1))).collect())
        .collect();
    for (r, c) in max_weight_pairs(&weights) {
        let (g, gb) = gts[free_g[r]];
        let (h, hb) = hyps[free_h[c]];
        out.matches.push((g, h, iou(&gb, &hb)));
        used_g.insert(free_g[r]);
        used_h.insert(free_h[c]);
    }
    out.matches.sort_by_key(|m| m.0);
    for &(g, h, _) in &out.matches {
        if prior.get(&g).is_some_and(|&p| p != h) {
            out.switches.push(g);
        }
    }
    out.fp = hyps.len() - used_h.len();
    out.fn_ = gts.len() - used_g.len();
    out
}

/// Accumulated CLEAR-MOT counts over a sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClearMot {
    pub matches: usize,
    pub iou_sum: f64,
    pub fp: usize,
    pub fn_: usize,
    pub id_switches: usize,
    /// Tracked-to-untracked transitions over each ground truth's present frames.
    pub frag: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
}

impl ClearMot {
    pub fn evaluate(outputs: &[Trajectory], gt: &[Trajectory], frames: usize) -> Self {
        let mut acc = ClearMot::default();
        let mut last: BTreeMap<u32, u32> = BTreeMap::new();
        // Per ground truth: (present frames, tracked frames, currently tracked).
        let mut life: BTreeMap<u32, (usize, usize, bool)> = BTreeMap::new();
        for n in 0..frames {
            let hyps: Vec<(u32, BoundingBox)> = outputs.iter().filter(|h| h.is_present(n)).map(|h| (h.id, h.columns[n])).collect();
            let gts: Vec<(u32, BoundingBox)> = gt.iter().filter(|g| g.is_present(n)).map(|g| (g.id, g.columns[n])).collect();
            let m = match_frame(&hyps, &gts, &last);
            acc.fp += m.fp;
            acc.fn_ += m.fn_;
            acc.id_switches += m.switches.len();
            acc.matches += m.matches.len();
            acc.iou_sum += m.matches.iter().map(|x| x.2).sum::<f64>();
            let matched: HashSet<u32> = m.matches.iter().map(|x| x.0).collect();
            for &(g, h, _) in &m.matches {
                last.insert(g, h);
            }
            for (g, _) in &gts {
                let e = life.entry(*g).or_insert((0, 0, false));
                e.0 += 1;
                let tracked = matched.contains(g);
                if tracked {
                    e.1 += 1;
                } else if e.2 {
                    acc.frag += 1;
                }
                e.2 = tracked;
            }
        }
        for &(present, tracked, _) in life.values() {
            let cover = tracked as f64 / present as f64;
            if cover >= 0.8 {
                acc.mostly_tracked += 1;
            }
            if cover <= 0.2 {
                acc.mostly_lost += 1;
            }
        }
        acc
    }
}
