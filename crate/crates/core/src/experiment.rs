//! Paired comparisons of scorers on synthetic suites.

use std::cell::RefCell;
use std::collections::HashMap;
use std::time::Instant;

use crate::engine::{track, BatchContext, BatchScorer, EngineConfig, IouHeuristicScorer, LearnedScorer, TrackletScorer};
use crate::error::{Error, Result};
use crate::metrics::{report_many, MetricsReport};
use crate::scorer::{Architecture, ScorerModel};
use crate::sequence::SequenceBundle;
use crate::synth::{synth_suite, SynthSpec};
use crate::training::{train, DatasetMode, TrainConfig, TrainReport};
use crate::tracklet::{Trajectory, Tracklet, TrackletKey};

/// Tracks every scene and pools the measures over the suite.
pub fn track_suite(scenes: &[SequenceBundle], scorer: &dyn TrackletScorer, cfg: &EngineConfig) -> Result<MetricsReport> {
    let mut outputs: Vec<Vec<Trajectory>> = Vec::with_capacity(scenes.len());
    for s in scenes {
        outputs.push(track(s, scorer, cfg)?.trajectories);
    }
    let parts: Vec<(&[Trajectory], &[Trajectory], usize)> = scenes
        .iter()
        .zip(&outputs)
        .map(|(s, o)| {
            let gt = s.ground_truth.as_deref().ok_or(Error::NoGroundTruth("evaluation scene"))?;
            Ok((o.as_slice(), gt, s.frame_count()))
        })
        .collect::<Result<_>>()?;
    report_many(&parts)
}

/// Remembers the scores of one scene's hypotheses so that re-tracking it with
/// other selection thresholds does not re-run the scorer. Appearance-aware
/// scores depend on earlier selections and are never cached.
struct Memo<'s> {
    inner: &'s dyn TrackletScorer,
    scores: RefCell<HashMap<(usize, TrackletKey), f64>>,
}

struct MemoBatch<'a> {
    inner: Box<dyn BatchScorer + 'a>,
    start: usize,
    scores: &'a RefCell<HashMap<(usize, TrackletKey), f64>>,
}

impl TrackletScorer for Memo<'_> {
    fn for_batch<'a>(&'a self, ctx: &'a BatchContext<'a>) -> Result<Box<dyn BatchScorer + 'a>> {
        let inner = self.inner.for_batch(ctx)?;
        if ctx.embeddings.is_some() {
            return Ok(inner);
        }
        Ok(Box::new(MemoBatch { inner, start: ctx.start, scores: &self.scores }))
    }
}

impl BatchScorer for MemoBatch<'_> {
    fn score(&self, t: &Tracklet) -> Result<f64> {
        let key = (self.start, t.key());
        if let Some(&s) = self.scores.borrow().get(&key) {
            return Ok(s);
        }
        let s = self.inner.score(t)?;
        self.scores.borrow_mut().insert(key, s);
        Ok(s)
    }
}

/// The `c_score` from `grid` with the best pooled IDF1 on `scenes` (first on ties).
pub fn tune_c_score(scenes: &[SequenceBundle], scorer: &dyn TrackletScorer, cfg: &EngineConfig, grid: &[f64]) -> Result<(f64, MetricsReport)> {
    let mut outputs: Vec<Vec<Vec<Trajectory>>> = vec![Vec::with_capacity(scenes.len()); grid.len()];
    for s in scenes {
        let memo = Memo { inner: scorer, scores: RefCell::new(HashMap::new()) };
        for (k, &c) in grid.iter().enumerate() {
            outputs[k].push(track(s, &memo, &EngineConfig { c_score: c, ..cfg.clone() })?.trajectories);
        }
    }
    let mut best: Option<(f64, MetricsReport)> = None;
    for (&c, out) in grid.iter().zip(&outputs) {
        let parts: Vec<(&[Trajectory], &[Trajectory], usize)> = scenes
            .iter()
            .zip(out)
            .map(|(s, o)| {
                let gt = s.ground_truth.as_deref().ok_or(Error::NoGroundTruth("evaluation scene"))?;
                Ok((o.as_slice(), gt, s.frame_count()))
            })
            .collect::<Result<_>>()?;
        let r = report_many(&parts)?;
        if best.as_ref().is_none_or(|b| r.idf1 > b.1.idf1) {
            best = Some((c, r));
        }
    }
    best.ok_or(Error::Empty("c_score grid"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndSpec {
    pub scene: SynthSpec,
    pub persons: (usize, usize),
    pub train_scenes: usize,
    /// Leading training scenes used to tune `c_score`.
    pub tune_scenes: usize,
    pub test_scenes: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    /// Candidate `c_score` values, tuned per method on the training scenes.
    pub c_score_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for EndToEndSpec {
    fn default() -> Self {
        let scene = SynthSpec {
            frames: 24,
            miss_rate: 0.1,
            fp_rate: 0.05,
            fps: 2.0,
            ..Default::default()
        };
        Self {
            persons: (4, 8),
            train_scenes: 40,
            tune_scenes: 10,
            test_scenes: 20,
            architecture: Architecture {
                neighbors: 4,
                use_appearance: false,
                embed_dim: 32,
                hidden: 32,
            },
            train: TrainConfig {
                batch_frames: 6,
                batch_size: 8,
                max_iterations: 5,
                final_epochs: 30,
                learning_rate: 0.003,
                ..Default::default()
            },
            engine: EngineConfig {
                batch_frames: 12,
                ..Default::default()
            },
            c_score_grid: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            scene,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub name: &'static str,
    pub c_score: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub baseline: MethodResult,
    pub learned: MethodResult,
    pub near_ground_truth: MethodResult,
    pub learned_model: ScorerModel,
    pub learned_training: TrainReport,
    pub near_ground_truth_training: TrainReport,
    pub seconds: f64,
}

impl EndToEnd {
    /// `1 − learned / baseline` identity switches.
    pub fn switch_reduction(&self) -> f64 {
        let b = self.baseline.report.id_switches as f64;
        if b == 0.0 {
            return 0.0;
        }
        1.0 - self.learned.report.id_switches as f64 / b
    }
}

fn evaluate(name: &'static str, train_scenes: &[SequenceBundle], test_scenes: &[SequenceBundle], scorer: &dyn TrackletScorer, spec: &EndToEndSpec) -> Result<MethodResult> {
    let tune = &train_scenes[..spec.tune_scenes.min(train_scenes.len())];
    let (c_score, _) = tune_c_score(tune, scorer, &spec.engine, &spec.c_score_grid)?;
    log::info!("{name}: c_score {c_score}");
    let report = track_suite(test_scenes, scorer, &EngineConfig { c_score, ..spec.engine.clone() })?;
    Ok(MethodResult { name, c_score, report })
}

/// Trains the scorer on its own hypotheses and on near-ground-truth tracklets,
/// and compares both with the IoU heuristic on held-out scenes.
pub fn end_to_end(spec: &EndToEndSpec) -> Result<EndToEnd> {
    let clock = Instant::now();
    let range = spec.persons.0..=spec.persons.1;
    let train_scenes = synth_suite(&spec.scene, spec.train_scenes, range.clone(), spec.seed.wrapping_mul(2).wrapping_add(1))?;
    let test_scenes = synth_suite(&spec.scene, spec.test_scenes, range, spec.seed.wrapping_mul(2).wrapping_add(2))?;

    let baseline = evaluate("iou-heuristic", &train_scenes, &test_scenes, &IouHeuristicScorer, spec)?;

    let mut model = ScorerModel::new(spec.architecture, spec.seed);
    let learned_training = train(&mut model, &train_scenes, &TrainConfig { seed: spec.seed, ..spec.train.clone() })?;
    let learned_scorer = LearnedScorer { model, autocontext: false };
    let learned = evaluate("learned", &train_scenes, &test_scenes, &learned_scorer, spec)?;

    let mut near = ScorerModel::new(spec.architecture, spec.seed);
    let near_cfg = TrainConfig {
        seed: spec.seed,
        dataset: DatasetMode::NearGroundTruth,
        ..spec.train.clone()
    };
    let near_ground_truth_training = train(&mut near, &train_scenes, &near_cfg)?;
    let near_ground_truth = evaluate("near-ground-truth", &train_scenes, &test_scenes, &LearnedScorer { model: near, autocontext: false }, spec)?;

    Ok(EndToEnd {
        baseline,
        learned,
        near_ground_truth,
        learned_model: learned_scorer.model,
        learned_training,
        near_ground_truth_training,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
