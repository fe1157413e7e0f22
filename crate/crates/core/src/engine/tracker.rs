use std::collections::{BTreeMap, HashMap, HashSet};

use super::pool::{generate, init_pool, GenerateOptions, GrowthStats};
use super::select::select;
use super::{BatchContext, EngineConfig, TrackletScorer};
use crate::error::{Error, Result};
use crate::features::representative_embedding;
use crate::geometry::BoundingBox;
use crate::sequence::SequenceBundle;
use crate::tracklet::{can_merge, Cell, DetectionId, Tracklet, Trajectory};

/// Upper bound on how many of a trajectory's most recent detections feed its
/// representative appearance vector.
const HISTORY_WINDOW: usize = 32;

/// Windows `[start, end)` of length `n` shifted by `n / 3`; the last one is clipped.
pub fn batch_windows(total: usize, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if total == 0 || n == 0 {
        return out;
    }
    let shift = (n / 3).max(1);
    let mut start = 0;
    loop {
        let end = (start + n).min(total);
        out.push((start, end));
        if end == total {
            return out;
        }
        start += shift;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub detections: usize,
    /// Previous-batch trajectories carried into this batch.
    pub seeds: usize,
    /// Seeds with at least one compatible hypothesis in the post-prune pool.
    pub seeds_continued: usize,
    pub growth: GrowthStats,
    pub pool_size: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub trajectories: Vec<Trajectory>,
    pub batches: Vec<BatchReport>,
}

struct Carried {
    id: u32,
    /// Cells keyed by sequence frame index.
    cells: BTreeMap<usize, Cell>,
}

/// Runs generation and selection on overlapping batches and joins identities across them.
pub fn track(seq: &SequenceBundle, scorer: &dyn TrackletScorer, cfg: &EngineConfig) -> Result<TrackOutput> {
    cfg.validate()?;
    seq.validate()?;
    let total = seq.frame_count();
    let windows = batch_windows(total, cfg.batch_frames);
    let empty_gt = Vec::new();
    let mut outputs: BTreeMap<u32, Vec<BoundingBox>> = BTreeMap::new();
    let mut reports = Vec::with_capacity(windows.len());
    let mut carried: Vec<Carried> = Vec::new();
    let mut history: HashMap<DetectionId, Vec<f64>> = HashMap::new();
    let mut assigned: BTreeMap<u32, Vec<DetectionId>> = BTreeMap::new();
    let mut next_id = 1u32;
    let mut prev_end = 0;

    for (b, &(start, end)) in windows.iter().enumerate() {
        if b > 0 && start >= prev_end {
            return Err(Error::BatchBoundary { start, expected: prev_end });
        }
        let len = end - start;
        let frames = seq.window_frames(start, end);
        let gt = if seq.ground_truth.is_some() { seq.window_ground_truth(start, end) } else { empty_gt.clone() };
        let mut pool = init_pool(&frames);
        let mut seeds = Vec::new();
        for c in &carried {
            let mut t = Tracklet::empty(len);
            for (&f, cell) in c.cells.range(start..end) {
                t.set(f - start, Some(*cell));
            }
            if t.support_len() > 0 {
                pool.insert(t.clone())?;
                seeds.push(t);
            }
        }

        let ctx = BatchContext {
            start,
            frames: &frames,
            ground_truth: &gt,
            embeddings: seq.embeddings.as_ref(),
            history: &history,
            image_width: seq.image_width,
            image_height: seq.image_height,
        };
        let batch_scorer = scorer.for_batch(&ctx)?;
        let growth = generate(&mut pool, batch_scorer.as_ref(), GenerateOptions::new(cfg.pruning, cfg.fast_cutoff))?;
        drop(batch_scorer);

        let seeds_continued = seeds
            .iter()
            .filter(|s| {
                let ids: Vec<DetectionId> = s.id_sequence();
                pool.tracklets()
                    .iter()
                    .any(|t| can_merge(t, s) && ids.iter().any(|&id| t.contains(id)))
            })
            .count();

        let selected_idx = select(pool.tracklets(), cfg)?;
        let selected: Vec<&Tracklet> = selected_idx.iter().map(|&i| pool.get(i)).collect();

        // Identity inheritance over the frames shared with the previous batch.
        let overlap = if b == 0 { 0 } else { prev_end.min(end) - start };
        let mut ids: Vec<Option<u32>> = vec![None; selected.len()];
        if overlap > 0 {
            let mut pairs = Vec::new();
            for (x, t) in selected.iter().enumerate() {
                let own: HashSet<DetectionId> = (0..overlap).filter_map(|n| t.cell(n).map(|c| c.id)).collect();
                if own.is_empty() {
                    continue;
                }
                for c in &carried {
                    let shared = c.cells.range(start..start + overlap).filter(|(_, cell)| own.contains(&cell.id)).count();
                    if 2 * shared > own.len() {
                        pairs.push((shared, x, c.id));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut taken = HashSet::new();
            for (_, x, id) in pairs {
                if ids[x].is_none() && !taken.contains(&id) {
                    ids[x] = Some(id);
                    taken.insert(id);
                }
            }
        }
        let ids: Vec<u32> = ids
            .into_iter()
            .map(|id| {
                id.unwrap_or_else(|| {
                    next_id += 1;
                    next_id - 1
                })
            })
            .collect();

        let commit_end = windows.get(b + 1).map_or(total, |w| w.0);
        for (t, &id) in selected.iter().zip(&ids) {
            for n in 0..(commit_end - start) {
                if let Some(c) = t.cell(n) {
                    outputs.entry(id).or_insert_with(|| vec![BoundingBox::ABSENT; total])[start + n] = c.bbox;
                    assigned.entry(id).or_default().push(c.id);
                }
            }
        }

        if let Some(table) = seq.embeddings.as_ref() {
            history.clear();
            let by_id = crate::sequence::detection_index(&seq.frames);
            for (t, &id) in selected.iter().zip(&ids) {
                let mut dets: Vec<DetectionId> = assigned.get(&id).cloned().unwrap_or_default();
                for d in t.id_sequence() {
                    if !dets.contains(&d) {
                        dets.push(d);
                    }
                }
                let recent = &dets[dets.len().saturating_sub(HISTORY_WINDOW)..];
                let vectors: Vec<Vec<f64>> = recent
                    .iter()
                    .filter_map(|d| by_id.get(d).and_then(|det| table.get(det.embedding_key())))
                    .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                    .collect();
                if vectors.is_empty() {
                    continue;
                }
                let rep = representative_embedding(&vectors)?;
                for d in t.id_sequence() {
                    history.insert(d, rep.clone());
                }
            }
        }

        carried = selected
            .iter()
            .zip(&ids)
            .map(|(t, &id)| Carried {
                id,
                cells: t.support().map(|(n, c)| (start + n, *c)).collect(),
            })
            .collect();
        reports.push(BatchReport {
            index: b,
            start,
            end,
            detections: frames.iter().map(Vec::len).sum(),
            seeds: seeds.len(),
            seeds_continued,
            growth,
            pool_size: pool.len(),
            selected: selected.len(),
        });
        prev_end = end;
    }

    let trajectories = outputs
        .into_iter()
        .map(|(id, columns)| Trajectory { id, columns })
        .filter(|t| t.support_len() > 0)
        .collect();
    Ok(TrackOutput {
        trajectories,
        batches: reports,
    })
}
