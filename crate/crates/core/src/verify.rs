//! Brute-force oracles for the properties the tracker relies on.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    generate, init_pool, objective, select_exact, select_greedy, BatchContext, EngineConfig, GenerateOptions, IouHeuristicScorer, OracleScorer,
    PruningMode, SpanRule, TrackletScorer,
};
use crate::synth::{synth_scene, SynthSpec};
use crate::error::Result;
use crate::geometry::{iou, BoundingBox};
use crate::metrics::{idf_pair, MATCH_IOU};
use crate::scorer::{gradcheck_architecture, gradient_check, score, FramePrediction};
use crate::tracklet::{overlap_fraction, Cell, DetectionId, Trajectory, Tracklet};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Best summed score over every subset of eligible hypotheses whose members
/// pairwise overlap by at most `C_iou`.
pub fn exhaustive_objective(pool: &[Tracklet], cfg: &EngineConfig) -> f64 {
    let eligible: Vec<&Tracklet> = pool
        .iter()
        .filter(|t| t.cached_score.unwrap_or(0.0) >= cfg.c_score)
        .filter(|t| cfg.span_rule != SpanRule::Literal || t.span() == t.len())
        .collect();
    let m = eligible.len();
    assert!(m <= 20, "exhaustive enumeration is limited to 20 hypotheses");
    let mut best = 0.0f64;
    for mask in 0u32..(1 << m) {
        let members: Vec<usize> = (0..m).filter(|k| mask >> k & 1 == 1).collect();
        let ok = members.iter().enumerate().all(|(a, &i)| {
            members[a + 1..].iter().all(|&j| {
                let shared = eligible[i].support().any(|(n, c)| eligible[j].cell(n).is_some_and(|d| d.id == c.id));
                !(cfg.exclusive_detections && shared) && overlap_fraction(eligible[i], eligible[j]) <= cfg.c_iou
            })
        });
        if ok {
            best = best.max(members.iter().map(|&i| eligible[i].cached_score.unwrap_or(0.0)).sum());
        }
    }
    best
}

/// A random scored pool over a few frames with several nearby people per frame.
pub fn random_selection_pool(rng: &mut impl Rng, size: usize) -> Vec<Tracklet> {
    let frames = 6;
    let lanes = 4;
    let boxes: Vec<Vec<BoundingBox>> = (0..frames)
        .map(|f| {
            (0..lanes)
                .map(|l| BoundingBox::new(20.0 * l as f64 + 4.0 * f as f64 + rng.random_range(-3.0..3.0), 50.0, 30.0, 60.0))
                .collect()
        })
        .collect();
    (0..size)
        .map(|_| {
            let mut t = Tracklet::empty(frames);
            let start = rng.random_range(0..frames);
            let end = rng.random_range(start..frames);
            let mut lane = rng.random_range(0..lanes);
            for f in start..=end {
                if rng.random_bool(0.2) {
                    lane = rng.random_range(0..lanes);
                }
                if f == start || f == end || rng.random_bool(0.85) {
                    t.set(
                        f,
                        Some(Cell {
                            id: DetectionId((f * lanes + lane) as u32),
                            bbox: boxes[f][lane],
                            confidence: 1.0,
                        }),
                    );
                }
            }
            t.cached_score = Some(rng.random_range(0.6..1.0));
            t
        })
        .collect()
}

/// Where random selection instances come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSource {
    /// Hypotheses with independent uniform scores over crowded lanes.
    Uniform,
    /// A random subset of the pool the engine grows on a small synthetic scene,
    /// scored against ground truth.
    Engine,
}

/// Up to `max_size` hypotheses sampled from an oracle-scored engine pool.
pub fn engine_selection_pool(rng: &mut impl Rng, max_size: usize) -> Result<Vec<Tracklet>> {
    let spec = SynthSpec {
        persons: rng.random_range(2..=4),
        frames: 6,
        seed: rng.random(),
        ..Default::default()
    };
    let seq = synth_scene(&spec)?;
    let frames = seq.window_frames(0, spec.frames);
    let gt = seq.window_ground_truth(0, spec.frames);
    let history = HashMap::new();
    let ctx = BatchContext {
        start: 0,
        frames: &frames,
        ground_truth: &gt,
        embeddings: None,
        history: &history,
        image_width: seq.image_width,
        image_height: seq.image_height,
    };
    let scorer = OracleScorer.for_batch(&ctx)?;
    let mut pool = init_pool(&frames);
    generate(&mut pool, scorer.as_ref(), GenerateOptions::new(PruningMode::PerSource, None))?;
    let mut all = pool.into_tracklets();
    all.shuffle(rng);
    all.truncate(rng.random_range(1..=max_size));
    Ok(all)
}

/// A random tracklet and ground-truth pair over `n` frames.
pub fn random_pair(rng: &mut impl Rng, n: usize) -> (Tracklet, Trajectory) {
    let mut t = Tracklet::empty(n);
    let mut g = Trajectory::new(1, n);
    for f in 0..n {
        let base = BoundingBox::new(rng.random_range(0.0..500.0), rng.random_range(0.0..300.0), rng.random_range(20.0..80.0), rng.random_range(40.0..160.0));
        if rng.random_bool(0.7) {
            g.columns[f] = base;
        }
        if rng.random_bool(0.7) {
            let s = rng.random_range(0.0..0.6);
            t.set(
                f,
                Some(Cell {
                    id: DetectionId(f as u32),
                    bbox: base.translated(s * base.width, rng.random_range(-0.1..0.1) * base.height),
                    confidence: 1.0,
                }),
            );
        }
    }
    (t, g)
}

/// Predictions a perfect scorer would emit for `t` against `g`.
pub fn oracle_predictions(t: &Tracklet, g: &Trajectory) -> Vec<FramePrediction> {
    (0..t.len())
        .map(|n| FramePrediction {
            lab: if g.is_present(n) { 1.0 } else { 0.0 },
            iou: if iou(&t.bbox(n), &g.columns[n]) > MATCH_IOU { 1.0 } else { 0.0 },
            sft: [0.0; 4],
        })
        .collect()
}

/// Largest |score(oracle predictions) − idf_pair| over `count` random pairs.
pub fn score_metric_gap(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=16);
            let (t, g) = random_pair(&mut rng, n);
            (score(&oracle_predictions(&t, &g), &t) - idf_pair(&t, &g)).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionGap {
    /// `1 − Σ greedy / Σ exact` over all pools.
    pub aggregate_gap: f64,
    /// Mean per-pool relative shortfall of greedy against exact.
    pub mean_gap: f64,
    /// Largest per-pool relative shortfall.
    pub worst_gap: f64,
    /// Pools where greedy fell more than 5% short.
    pub pools_over_5pct: usize,
    /// Instances where exact disagreed with enumeration.
    pub exact_mismatches: usize,
    /// Instances where greedy beat exact.
    pub dominance_violations: usize,
}

pub fn selection_gap(source: PoolSource, seed: u64, pools: usize, max_size: usize) -> Result<SelectionGap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EngineConfig {
        span_rule: SpanRule::Off,
        ..Default::default()
    };
    let mut out = SelectionGap {
        aggregate_gap: 0.0,
        mean_gap: 0.0,
        pools_over_5pct: 0,
        worst_gap: 0.0,
        exact_mismatches: 0,
        dominance_violations: 0,
    };
    let (mut total_greedy, mut total_exact) = (0.0, 0.0);
    for _ in 0..pools {
        let pool = match source {
            PoolSource::Uniform => {
                let size = rng.random_range(1..=max_size);
                random_selection_pool(&mut rng, size)
            }
            PoolSource::Engine => engine_selection_pool(&mut rng, max_size)?,
        };
        let greedy = objective(&pool, &select_greedy(&pool, &cfg));
        let exact = objective(&pool, &select_exact(&pool, &cfg)?);
        let brute = exhaustive_objective(&pool, &cfg);
        if (exact - brute).abs() > 1e-9 {
            out.exact_mismatches += 1;
        }
        if greedy > exact + 1e-9 {
            out.dominance_violations += 1;
        }
        total_greedy += greedy;
        total_exact += exact;
        if exact > 0.0 {
            let gap = (exact - greedy) / exact;
            out.worst_gap = out.worst_gap.max(gap);
            out.mean_gap += gap / pools as f64;
            out.pools_over_5pct += (gap > 0.05) as usize;
        }
    }
    if total_exact > 0.0 {
        out.aggregate_gap = 1.0 - total_greedy / total_exact;
    }
    Ok(out)
}

/// Runs every oracle with seeds derived from `seed`.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleResult>> {
    let mut results = Vec::new();
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for k in 0..10 {
        let r = gradient_check(gradcheck_architecture(), seed.wrapping_add(k), 12, 1e-4)?;
        if r.max_rel_error >= worst {
            worst = r.max_rel_error;
            detail = format!("max relative error {:.3e} at {}[{}]", r.max_rel_error, r.worst.0, r.worst.1);
        }
    }
    results.push(OracleResult {
        name: "gradient matches central differences",
        passed: worst < 1e-3,
        detail,
    });

    let gap = score_metric_gap(seed, 1000);
    results.push(OracleResult {
        name: "score of oracle predictions equals pairwise IDF",
        passed: gap <= 1e-12,
        detail: format!("max gap {gap:e} over 1000 pairs"),
    });

    let uniform = selection_gap(PoolSource::Uniform, seed, 50, 15)?;
    let sel = selection_gap(PoolSource::Engine, seed, 50, 15)?;
    results.push(OracleResult {
        name: "exact selection equals exhaustive enumeration",
        passed: sel.exact_mismatches + uniform.exact_mismatches == 0 && uniform.dominance_violations == 0,
        detail: format!(
            "{} mismatches over 100 pools; greedy gap on uniform-score pools {:.2}%",
            sel.exact_mismatches + uniform.exact_mismatches,
            100.0 * uniform.worst_gap
        ),
    });
    results.push(OracleResult {
        name: "greedy selection within 5% of exact",
        passed: sel.aggregate_gap <= 0.05 && sel.dominance_violations == 0,
        detail: format!(
            "summed objective gap {:.2}%, per-pool worst {:.2}%, {} of 50 pools above 5%",
            100.0 * sel.aggregate_gap,
            100.0 * sel.worst_gap,
            sel.pools_over_5pct
        ),
    });
    Ok(results)
}

/// Pool statistics of one generated batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthPoint {
    pub detections: usize,
    pub pool_size: usize,
    /// Ground-truth trajectories with at least two boxes in the batch.
    pub ground_truth: usize,
    /// Of those, the ones no hypothesis reaches pairwise IDF `recovery` with.
    pub lost: usize,
}

/// One batch of a crowded synthetic scene with roughly `target` detections over `frames` frames.
pub fn growth_scene(seed: u64, target: usize, frames: usize) -> Result<crate::sequence::SequenceBundle> {
    let per_person = frames as f64 * 0.9;
    synth_scene(&SynthSpec {
        persons: ((target as f64 / per_person).round() as usize).max(1),
        frames,
        seed,
        ..Default::default()
    })
}

/// Grows a hypothesis pool for the whole of `seq` with the IoU heuristic scorer.
pub fn growth_point(seq: &crate::sequence::SequenceBundle, pruning: PruningMode, recovery: f64) -> Result<GrowthPoint> {
    let n = seq.frame_count();
    let frames = seq.window_frames(0, n);
    let gt = seq.window_ground_truth(0, n);
    let history = HashMap::new();
    let ctx = BatchContext {
        start: 0,
        frames: &frames,
        ground_truth: &gt,
        embeddings: None,
        history: &history,
        image_width: seq.image_width,
        image_height: seq.image_height,
    };
    let scorer = IouHeuristicScorer.for_batch(&ctx)?;
    let mut pool = init_pool(&frames);
    generate(&mut pool, scorer.as_ref(), GenerateOptions::new(pruning, None))?;
    let eligible: Vec<&Trajectory> = gt.iter().filter(|g| g.support_len() >= 2).collect();
    let lost = eligible
        .iter()
        .filter(|g| pool.tracklets().iter().all(|t| idf_pair(t, g) < recovery))
        .count();
    Ok(GrowthPoint {
        detections: seq.detection_count(),
        pool_size: pool.len(),
        ground_truth: eligible.len(),
        lost,
    })
}

/// Least-squares line `y = a + b·x` and its coefficient of determination.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (a, b, r2)
}
