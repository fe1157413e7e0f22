//! Hypothesis generation, selection and batch stitching.

mod pool;
mod select;
mod tracker;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

pub use pool::{generate, init_pool, softmax_choice, Candidate, GenerateOptions, GrowthStats, HypothesisPool, MergeSampler};
pub use select::{objective, select, select_exact, select_greedy};
pub use tracker::{batch_windows, track, BatchReport, TrackOutput};

use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, FeatureExtractor};
use crate::metrics::idf_pair;
use crate::scorer::{autocontext_score, score, ScorerModel};
use crate::tracklet::{Detection, DetectionId, Tracklet, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Greedy,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruningMode {
    /// Keep the best merger of every source tracklet.
    PerSource,
    /// Keep every merger scoring at least `cutoff`.
    ByScore { cutoff: f64 },
    /// Keep the `keep` best mergers of each growth step.
    ByCount { keep: usize },
}

/// Treatment of hypotheses that do not span the whole batch during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanRule {
    /// Full-span hypotheses are selected first; shorter ones are admitted
    /// afterwards only when they conflict with nothing already accepted.
    Lenient,
    /// Only full-span hypotheses are eligible.
    Literal,
    /// Span is ignored.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub c_iou: f64,
    pub c_score: f64,
    /// Batch length `N` in frames.
    pub batch_frames: usize,
    pub selection: SelectionMode,
    pub pruning: PruningMode,
    pub span_rule: SpanRule,
    /// Candidates scoring below this are dropped before pruning.
    pub fast_cutoff: Option<f64>,
    /// Largest filtered pool [`select_exact`] accepts.
    pub exact_limit: usize,
    /// Hypotheses sharing a detection also count as conflicting during selection.
    pub exclusive_detections: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            c_iou: 0.6,
            c_score: 0.6,
            batch_frames: 18,
            selection: SelectionMode::Greedy,
            pruning: PruningMode::PerSource,
            span_rule: SpanRule::Lenient,
            fast_cutoff: None,
            exact_limit: 25,
            exclusive_detections: true,
        }
    }
}

impl EngineConfig {
    pub fn batch_shift(&self) -> usize {
        (self.batch_frames / 3).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.c_iou) || !open(self.c_score) {
            return Err(Error::InvalidParameter(format!(
                "c_iou and c_score must lie in (0, 1), got {} and {}",
                self.c_iou, self.c_score
            )));
        }
        if self.batch_frames == 0 {
            return Err(Error::InvalidParameter("batch length must be at least one frame".into()));
        }
        if let PruningMode::ByCount { keep: 0 } = self.pruning {
            return Err(Error::InvalidParameter("count pruning must keep at least one merger".into()));
        }
        Ok(())
    }
}

macro_rules! name_enum {
    ($t:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::InvalidParameter(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

name_enum!(SelectionMode, "selection mode", "greedy" => SelectionMode::Greedy, "exact" => SelectionMode::Exact);
name_enum!(SpanRule, "span rule", "lenient" => SpanRule::Lenient, "literal" => SpanRule::Literal, "off" => SpanRule::Off);

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Greedy => "greedy",
            SelectionMode::Exact => "exact",
        })
    }
}

impl fmt::Display for SpanRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanRule::Lenient => "lenient",
            SpanRule::Literal => "literal",
            SpanRule::Off => "off",
        })
    }
}

impl fmt::Display for PruningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruningMode::PerSource => f.write_str("per_source"),
            PruningMode::ByScore { .. } => f.write_str("score"),
            PruningMode::ByCount { .. } => f.write_str("count"),
        }
    }
}

/// Everything a scorer may look at while scoring hypotheses of one batch.
pub struct BatchContext<'a> {
    /// Sequence frame index of the batch's first frame.
    pub start: usize,
    /// Detections of the batch, frame indices relative to `start`.
    pub frames: &'a [Vec<Detection>],
    /// Ground truth restricted to the batch, when known.
    pub ground_truth: &'a [Trajectory],
    pub embeddings: Option<&'a EmbeddingTable>,
    /// Representative appearance of the trajectory each earlier detection was assigned to.
    pub history: &'a HashMap<DetectionId, Vec<f64>>,
    pub image_width: f64,
    pub image_height: f64,
}

impl BatchContext<'_> {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// A scoring function specialised to one batch.
pub trait BatchScorer {
    fn score(&self, t: &Tracklet) -> Result<f64>;
}

impl<F: Fn(&Tracklet) -> f64> BatchScorer for F {
    fn score(&self, t: &Tracklet) -> Result<f64> {
        Ok(self(t))
    }
}

pub trait TrackletScorer {
    fn for_batch<'a>(&'a self, ctx: &'a BatchContext<'a>) -> Result<Box<dyn BatchScorer + 'a>>;
}

/// The trained sequence model, optionally in two-pass autocontext mode.
pub struct LearnedScorer {
    pub model: ScorerModel,
    pub autocontext: bool,
}

struct LearnedBatch<'a> {
    model: &'a ScorerModel,
    autocontext: bool,
    extractor: FeatureExtractor<'a>,
    history: &'a HashMap<DetectionId, Vec<f64>>,
}

impl TrackletScorer for LearnedScorer {
    fn for_batch<'a>(&'a self, ctx: &'a BatchContext<'a>) -> Result<Box<dyn BatchScorer + 'a>> {
        let cfg = self.model.architecture().feature_config(ctx.image_width, ctx.image_height);
        Ok(Box::new(LearnedBatch {
            model: &self.model,
            autocontext: self.autocontext,
            extractor: FeatureExtractor::new(cfg, ctx.frames, ctx.embeddings)?,
            history: ctx.history,
        }))
    }
}

impl LearnedBatch<'_> {
    fn history_of(&self, t: &Tracklet) -> Option<&[f64]> {
        if !self.model.architecture().use_appearance {
            return None;
        }
        t.support().find_map(|(_, c)| self.history.get(&c.id)).map(Vec::as_slice)
    }
}

impl BatchScorer for LearnedBatch<'_> {
    fn score(&self, t: &Tracklet) -> Result<f64> {
        let history = self.history_of(t);
        if self.autocontext {
            Ok(autocontext_score(self.model, &self.extractor, t, history)?.0)
        } else {
            let preds = self.model.forward(&self.extractor.features(t, history)?)?;
            Ok(score(&preds, t))
        }
    }
}

/// Hand-crafted geometric score: mean overlap of each box with its nearest
/// neighbour along the tracklet.
#[derive(Debug, Clone, Copy, Default)]
pub struct IouHeuristicScorer;

impl IouHeuristicScorer {
    pub fn score_tracklet(t: &Tracklet) -> f64 {
        let support: Vec<crate::geometry::BoundingBox> = t.support().map(|(_, c)| c.bbox).collect();
        if support.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..support.len() {
            let prev = if k > 0 { crate::geometry::iou(&support[k], &support[k - 1]) } else { 0.0 };
            let next = support.get(k + 1).map_or(0.0, |s| crate::geometry::iou(&support[k], s));
            total += prev.max(next);
        }
        total / support.len() as f64
    }
}

impl TrackletScorer for IouHeuristicScorer {
    fn for_batch<'a>(&'a self, _ctx: &'a BatchContext<'a>) -> Result<Box<dyn BatchScorer + 'a>> {
        Ok(Box::new(|t: &Tracklet| IouHeuristicScorer::score_tracklet(t)))
    }
}

/// Scores a tracklet by its true IDF against the best-matching ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl TrackletScorer for OracleScorer {
    fn for_batch<'a>(&'a self, ctx: &'a BatchContext<'a>) -> Result<Box<dyn BatchScorer + 'a>> {
        let gt = ctx.ground_truth;
        Ok(Box::new(move |t: &Tracklet| gt.iter().map(|g| idf_pair(t, g)).fold(0.0, f64::max)))
    }
}

#[cfg(test)]
mod tests;
