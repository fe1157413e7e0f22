use super::pool::rank;
use super::{EngineConfig, SelectionMode, SpanRule};
use crate::error::{Error, Result};
use crate::tracklet::{overlap_fraction, Tracklet};

fn score_of(t: &Tracklet) -> f64 {
    t.cached_score.unwrap_or(0.0)
}

fn full_span(t: &Tracklet) -> bool {
    t.span() == t.len()
}

fn eligible<'a>(pool: &'a [Tracklet], cfg: &EngineConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len())
        .filter(|&i| score_of(&pool[i]) >= cfg.c_score)
        .filter(|&i| cfg.span_rule != SpanRule::Literal || full_span(&pool[i]))
        .collect();
    idx.sort_by(|&a, &b| rank(score_of(&pool[a]), &pool[a], score_of(&pool[b]), &pool[b]));
    idx
}

fn conflicts(a: &Tracklet, b: &Tracklet, cfg: &EngineConfig) -> bool {
    if cfg.exclusive_detections && shares_detection(a, b) {
        return true;
    }
    overlap_fraction(a, b) > cfg.c_iou
}

fn shares_detection(a: &Tracklet, b: &Tracklet) -> bool {
    a.cells().iter().zip(b.cells()).any(|(x, y)| matches!((x, y), (Some(x), Some(y)) if x.id == y.id))
}

/// Highest-score-first acceptance of hypotheses that overlap no accepted one
/// by more than `C_iou`. Returns pool indices in acceptance order.
pub fn select_greedy(pool: &[Tracklet], cfg: &EngineConfig) -> Vec<usize> {
    let order = eligible(pool, cfg);
    let passes: Vec<Vec<usize>> = match cfg.span_rule {
        SpanRule::Lenient => {
            let (full, short): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| full_span(&pool[i]));
            vec![full, short]
        }
        SpanRule::Literal | SpanRule::Off => vec![order],
    };
    let mut accepted: Vec<usize> = Vec::new();
    for pass in passes {
        for i in pass {
            if accepted.iter().all(|&j| !conflicts(&pool[i], &pool[j], cfg)) {
                accepted.push(i);
            }
        }
    }
    accepted
}

/// Exact maximiser of the summed score under the same overlap constraint,
/// by branch and bound over the eligible hypotheses.
pub fn select_exact(pool: &[Tracklet], cfg: &EngineConfig) -> Result<Vec<usize>> {
    let order = eligible(pool, cfg);
    let limit = cfg.exact_limit.min(64);
    if order.len() > limit {
        return Err(Error::PoolTooLarge {
            size: order.len(),
            limit,
        });
    }
    let m = order.len();
    let mut conflict = vec![0u64; m];
    for a in 0..m {
        for b in a + 1..m {
            if conflicts(&pool[order[a]], &pool[order[b]], cfg) {
                conflict[a] |= 1 << b;
                conflict[b] |= 1 << a;
            }
        }
    }
    let scores: Vec<f64> = order.iter().map(|&i| score_of(&pool[i])).collect();
    let mut suffix = vec![0.0; m + 1];
    for k in (0..m).rev() {
        suffix[k] = suffix[k + 1] + scores[k].max(0.0);
    }
    struct Search<'a> {
        conflict: &'a [u64],
        scores: &'a [f64],
        suffix: &'a [f64],
        best: f64,
        best_mask: u64,
    }
    impl Search<'_> {
        fn dfs(&mut self, k: usize, mask: u64, value: f64) {
            if value > self.best {
                self.best = value;
                self.best_mask = mask;
            }
            if k == self.scores.len() || value + self.suffix[k] <= self.best {
                return;
            }
            if self.conflict[k] & mask == 0 {
                self.dfs(k + 1, mask | 1 << k, value + self.scores[k]);
            }
            self.dfs(k + 1, mask, value);
        }
    }
    let mut s = Search {
        conflict: &conflict,
        scores: &scores,
        suffix: &suffix,
        best: 0.0,
        best_mask: 0,
    };
    s.dfs(0, 0, 0.0);
    Ok((0..m).filter(|k| s.best_mask >> k & 1 == 1).map(|k| order[k]).collect())
}

pub fn select(pool: &[Tracklet], cfg: &EngineConfig) -> Result<Vec<usize>> {
    match cfg.selection {
        SelectionMode::Greedy => Ok(select_greedy(pool, cfg)),
        SelectionMode::Exact => select_exact(pool, cfg),
    }
}

/// Summed score of the selected hypotheses.
pub fn objective(pool: &[Tracklet], selected: &[usize]) -> f64 {
    selected.iter().map(|&i| score_of(&pool[i])).sum()
}
