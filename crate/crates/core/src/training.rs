//! Training the scorer on hypotheses produced by the engine itself.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{generate, init_pool, softmax_choice, GenerateOptions, MergeSampler, PruningMode};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureTensor};
use crate::geometry::iou;
use crate::metrics::{idf_pair, MATCH_IOU};
use crate::scorer::{adam_step, score, Architecture, FrameTargets, OptimizerState, ScorerModel};
use crate::sequence::SequenceBundle;
use crate::tracklet::{Detection, Tracklet, TrackletKey, Trajectory};

pub const BINS: usize = 10;
pub const LOG_HEADER: &str = "iter,epoch,dataset_size,train_loss,val_loss,temperature,seed";

/// Where training tracklets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    /// Candidates met while running the engine with the current weights.
    Engine,
    /// A fixed set of sub-tracklets of the ground-truth paths.
    NearGroundTruth,
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetMode::Engine => "engine",
            DatasetMode::NearGroundTruth => "near-gt",
        })
    }
}

impl FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "engine" => Ok(DatasetMode::Engine),
            "near-gt" => Ok(DatasetMode::NearGroundTruth),
            _ => Err(Error::InvalidParameter(format!("unknown dataset mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hard-mining factor `h`.
    pub hard_mining: usize,
    /// Mini-batch size `K`.
    pub batch_size: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Build iterations over which the temperature falls from start to end.
    pub anneal_iterations: usize,
    /// Relative dataset growth below which the build loop stops.
    pub growth_threshold: f64,
    /// Iterations the growth is measured over.
    pub growth_window: usize,
    pub max_iterations: usize,
    pub final_epochs: usize,
    pub learning_rate: f64,
    /// Fraction of every scene's frames held out (as a suffix) for validation.
    pub validation_fraction: f64,
    /// Batch length in frames.
    pub batch_frames: usize,
    pub dataset: DatasetMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hard_mining: 3,
            batch_size: 16,
            temperature_start: 10.0,
            temperature_end: 0.1,
            anneal_iterations: 30,
            growth_threshold: 0.05,
            growth_window: 10,
            max_iterations: 100,
            final_epochs: 30,
            learning_rate: 0.001,
            validation_fraction: 0.2,
            batch_frames: 9,
            dataset: DatasetMode::Engine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.hard_mining < 1 {
            return bad("hard-mining factor h must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("mini-batch size K must be at least 1".into());
        }
        for t in [self.temperature_start, self.temperature_end] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("temperatures must be positive, got {t}"));
            }
        }
        if self.anneal_iterations < 1 || self.growth_window < 1 {
            return bad("anneal and growth windows must be at least one iteration".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        if self.batch_frames < 2 {
            return bad("training batches need at least two frames".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    /// Geometric interpolation from start to end over the anneal window, constant afterwards.
    pub fn temperature(&self, iteration: usize) -> f64 {
        if self.anneal_iterations <= 1 {
            return self.temperature_end;
        }
        let f = iteration.min(self.anneal_iterations - 1) as f64 / (self.anneal_iterations - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(f)
    }
}

/// One batch-length slice of a training scene.
#[derive(Debug, Clone)]
pub struct TrainWindow {
    pub scene: usize,
    pub start: usize,
    pub frames: Vec<Vec<Detection>>,
    pub ground_truth: Vec<Trajectory>,
    pub image_width: f64,
    pub image_height: f64,
}

/// Consecutive, non-overlapping windows `[start, end)` of length `n`; the last one is clipped.
pub fn training_windows(total: usize, n: usize) -> Vec<(usize, usize)> {
    (0..total).step_by(n.max(1)).map(|s| (s, (s + n).min(total))).collect()
}

/// Cuts every scene into training windows.
pub fn scene_windows(scenes: &[SequenceBundle], batch_frames: usize) -> Result<Vec<TrainWindow>> {
    let mut out = Vec::new();
    for (s, seq) in scenes.iter().enumerate() {
        if seq.ground_truth.is_none() {
            return Err(Error::NoGroundTruth("training scene"));
        }
        for (start, end) in training_windows(seq.frame_count(), batch_frames) {
            out.push(TrainWindow {
                scene: s,
                start,
                frames: seq.window_frames(start, end),
                ground_truth: seq.window_ground_truth(start, end),
                image_width: seq.image_width,
                image_height: seq.image_height,
            });
        }
    }
    Ok(out)
}

/// Index of the best-matching ground truth of a tracklet and its IDF; `None` when nothing matches.
pub fn assign_ground_truth(t: &Tracklet, gts: &[Trajectory]) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (k, g) in gts.iter().enumerate() {
        let v = idf_pair(t, g);
        if v > best.1 {
            best = (Some(k), v);
        }
    }
    best
}

pub fn bin_of(idf: f64) -> usize {
    ((idf * BINS as f64).floor().max(0.0) as usize).min(BINS - 1)
}

/// A labelled tracklet. Features and per-frame targets are derived on demand
/// through a [`Corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Index of the window the tracklet lives in.
    pub window: usize,
    pub tracklet: Tracklet,
    /// Index into the window's ground truth.
    pub ground_truth: Option<usize>,
    pub idf: f64,
    pub bin: usize,
}

impl TrainingSample {
    pub fn label(window: usize, t: Tracklet, w: &TrainWindow) -> Self {
        let (ground_truth, idf) = assign_ground_truth(&t, &w.ground_truth);
        Self {
            window,
            tracklet: t,
            ground_truth,
            idf,
            bin: bin_of(idf),
        }
    }

    pub fn targets(&self, w: &TrainWindow) -> FrameTargets {
        FrameTargets::new(&self.tracklet, self.ground_truth.map(|g| &w.ground_truth[g]), w.image_width, w.image_height)
    }

    /// Re-derives the labels from the tracklet and compares them with the stored ones.
    pub fn is_consistent(&self, w: &TrainWindow) -> bool {
        let (g, idf) = assign_ground_truth(&self.tracklet, &w.ground_truth);
        let idf_direct = g.map_or(0.0, |g| idf_pair(&self.tracklet, &w.ground_truth[g]));
        idf == self.idf && idf_direct == idf && self.bin == bin_of(idf) && g == self.ground_truth
    }
}

/// Windows with their feature extractors, used to turn samples into model inputs.
pub struct Corpus<'a> {
    pub windows: &'a [TrainWindow],
    extractors: Vec<FeatureExtractor<'a>>,
}

impl<'a> Corpus<'a> {
    pub fn new(arch: &Architecture, scenes: &'a [SequenceBundle], windows: &'a [TrainWindow]) -> Result<Self> {
        let extractors = windows
            .iter()
            .map(|w| {
                let cfg = arch.feature_config(w.image_width, w.image_height);
                FeatureExtractor::new(cfg, &w.frames, scenes[w.scene].embeddings.as_ref())
            })
            .collect::<Result<_>>()?;
        Ok(Self { windows, extractors })
    }

    pub fn extractor(&self, window: usize) -> &FeatureExtractor<'a> {
        &self.extractors[window]
    }

    pub fn inputs(&self, s: &TrainingSample) -> Result<(FeatureTensor, FrameTargets)> {
        let w = &self.windows[s.window];
        Ok((self.extractors[s.window].features(&s.tracklet, None)?, s.targets(w)))
    }

    pub fn loss(&self, model: &ScorerModel, s: &TrainingSample) -> Result<f64> {
        let (x, t) = self.inputs(s)?;
        model.sample_loss(&x, &t)
    }
}

/// Append-only sample store, deduplicated by window and tracklet key.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    seen: HashSet<(usize, TrackletKey)>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains(&self, window: usize, t: &Tracklet) -> bool {
        self.seen.contains(&(window, t.key()))
    }

    /// Labels and stores `t` unless it is already known. Returns whether it was new.
    pub fn ingest(&mut self, window: usize, mut t: Tracklet, w: &TrainWindow) -> bool {
        if !self.seen.insert((window, t.key())) {
            return false;
        }
        t.cached_score = None;
        self.samples.push(TrainingSample::label(window, t, w));
        true
    }

    pub fn bins(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.bin).collect()
    }
}

/// Draws index `i` with probability `softmax(temperature · scores)_i`.
pub fn randomized_merge_choice<R: Rng + ?Sized>(scores: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    softmax_choice(scores, temperature, rng)
}

/// Equal-count subset over the non-empty bins, sized by the smallest one.
/// Returns positions into `bins`, grouped by bin and ascending within a bin.
pub fn balance<R: Rng + ?Sized>(bins: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    if bins.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); BINS];
    for (i, &b) in bins.iter().enumerate() {
        groups[b.min(BINS - 1)].push(i);
    }
    let s = groups.iter().map(Vec::len).filter(|&l| l > 0).min().expect("non-empty");
    let mut out = Vec::with_capacity(s * BINS);
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let mut picked: Vec<usize> = sample(rng, g.len(), s).into_iter().map(|k| g[k]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    /// The uniform draw, in draw order.
    pub draw: Vec<usize>,
    /// Inference-mode loss of each drawn sample.
    pub losses: Vec<f64>,
    /// The `K` highest-loss draws.
    pub kept: Vec<usize>,
}

/// Draws `h·K` of `set` uniformly and keeps the `K` with the largest loss.
pub fn hard_mine<R: Rng + ?Sized>(
    set: &[usize],
    samples: &[TrainingSample],
    corpus: &Corpus<'_>,
    model: &ScorerModel,
    h: usize,
    k: usize,
    rng: &mut R,
) -> Result<MinedBatch> {
    if set.is_empty() {
        return Err(Error::Empty("mining set"));
    }
    let want = h.max(1) * k.max(1);
    let draw: Vec<usize> = if set.len() < want {
        log::debug!("mining set of {} is smaller than h·K = {want}; using all of it", set.len());
        set.to_vec()
    } else {
        sample(rng, set.len(), want).into_iter().map(|i| set[i]).collect()
    };
    let losses = draw.iter().map(|&i| corpus.loss(model, &samples[i])).collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..draw.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let kept = order.into_iter().take(k.max(1)).map(|p| draw[p]).collect();
    Ok(MinedBatch { draw, losses, kept })
}

/// Runs the engine on every window with randomised retention and stores each
/// tracklet it meets. Returns the number of new samples.
pub fn build_iteration<R: Rng>(model: &ScorerModel, corpus: &Corpus<'_>, set: &mut TrainingSet, temperature: f64, rng: &mut R) -> Result<usize> {
    let before = set.len();
    for (wi, w) in corpus.windows.iter().enumerate() {
        let extractor = corpus.extractor(wi);
        let failure = std::cell::RefCell::new(None);
        let scorer = |t: &Tracklet| match extractor.features(t, None).and_then(|x| model.forward(&x)) {
            Ok(p) => score(&p, t),
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        };
        let mut pool = init_pool(&w.frames);
        let mut seen: Vec<Tracklet> = pool.tracklets().to_vec();
        let mut collect = |c: &crate::engine::Candidate| seen.push(c.tracklet.clone());
        let mut opts = GenerateOptions::new(PruningMode::PerSource, None);
        opts.sampler = Some(MergeSampler { rng: &mut *rng, temperature });
        opts.observer = Some(&mut collect);
        generate(&mut pool, &scorer, opts)?;
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        for t in seen {
            set.ingest(wi, t, w);
        }
    }
    Ok(set.len() - before)
}

/// Contiguous sub-tracklets of the detections that best match each ground-truth path.
pub fn near_ground_truth_tracklets(w: &TrainWindow) -> Vec<Tracklet> {
    let n = w.frames.len();
    let mut out = Vec::new();
    for g in &w.ground_truth {
        let mut full = Tracklet::empty(n);
        for (f, dets) in w.frames.iter().enumerate() {
            if !g.is_present(f) {
                continue;
            }
            let best = dets
                .iter()
                .map(|d| (iou(&d.bbox, &g.columns[f]), d))
                .filter(|(o, _)| *o > MATCH_IOU)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, d)) = best {
                full.set(f, Tracklet::single(n, f, d).cell(f).copied());
            }
        }
        for a in 0..n {
            for b in a..n {
                let mut t = Tracklet::empty(n);
                for f in a..=b {
                    t.set(f, full.cell(f).copied());
                }
                if t.support_len() > 0 {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Ingests the near-ground-truth tracklets of every window.
pub fn near_ground_truth_set(windows: &[TrainWindow], set: &mut TrainingSet) -> usize {
    let before = set.len();
    for (wi, w) in windows.iter().enumerate() {
        for t in near_ground_truth_tracklets(w) {
            set.ingest(wi, t, w);
        }
    }
    set.len() - before
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub dataset_size: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.dataset_size, self.train_loss, self.val_loss, self.temperature, self.seed
        )
    }
}

pub fn write_log<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Build iterations run before the final training.
    pub iterations: usize,
    /// Training-set size after each build iteration.
    pub dataset_sizes: Vec<usize>,
    pub validation_size: usize,
    /// Final-training epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Whether the last `window` iterations grew the set by less than `threshold`.
pub fn growth_stalled(sizes: &[usize], window: usize, threshold: f64) -> bool {
    if sizes.len() <= window {
        return false;
    }
    let now = sizes[sizes.len() - 1] as f64;
    let then = sizes[sizes.len() - 1 - window] as f64;
    now < then * (1.0 + threshold)
}

fn diverged(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { iteration },
        e => e,
    }
}

struct Trainer<'a, 'c> {
    model: &'a mut ScorerModel,
    corpus: &'a Corpus<'c>,
    opt: OptimizerState,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer<'_, '_> {
    /// One pass over a freshly balanced subset of `set` in hard-mined mini-batches.
    fn epoch(&mut self, set: &TrainingSet, iteration: usize) -> Result<f64> {
        let balanced = balance(&set.bins(), &mut self.rng)?;
        let steps = balanced.len().div_ceil(self.cfg.batch_size);
        let mut total = 0.0;
        for _ in 0..steps {
            let backup = (self.model.params.clone(), self.model.running_mean.clone(), self.model.running_var.clone());
            match self.step(set, &balanced) {
                Ok(l) => total += l,
                Err(e) => {
                    (self.model.params, self.model.running_mean, self.model.running_var) = backup;
                    return Err(diverged(e, iteration));
                }
            }
        }
        Ok(total / steps as f64)
    }

    fn step(&mut self, set: &TrainingSet, balanced: &[usize]) -> Result<f64> {
        let mined = hard_mine(balanced, &set.samples, self.corpus, self.model, self.cfg.hard_mining, self.cfg.batch_size, &mut self.rng)?;
        let inputs = mined.kept.iter().map(|&i| self.corpus.inputs(&set.samples[i])).collect::<Result<Vec<_>>>()?;
        let batch: Vec<(&FeatureTensor, &FrameTargets)> = inputs.iter().map(|(x, t)| (x, t)).collect();
        let g = self.model.loss_and_grad(&batch)?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        adam_step(&mut self.model.params, &mut self.opt, &g.grads)?;
        self.model.update_running_stats(&g.batch_mean, &g.batch_var);
        if self.model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(g.loss)
    }
}

/// Mean inference-mode loss over a fixed balanced subset of the validation set.
fn validation_loss(model: &ScorerModel, corpus: &Corpus<'_>, val: &TrainingSet, subset: &[usize]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in subset {
        total += corpus.loss(model, &val.samples[i])?;
    }
    Ok(total / subset.len() as f64)
}

/// Splits off the validation suffix of every scene.
pub fn split_scenes(scenes: &[SequenceBundle], fraction: f64) -> (Vec<SequenceBundle>, Vec<SequenceBundle>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in scenes {
        let n = s.frame_count();
        let held = ((n as f64) * fraction).round() as usize;
        let cut = n - held.min(n.saturating_sub(1));
        train.push(s.slice(0, cut));
        if cut < n {
            val.push(s.slice(cut, n));
        }
    }
    (train, val)
}

/// Alternates dataset construction and single epochs until the dataset stops
/// growing, then trains on the whole set keeping the best-validation weights.
///
/// On divergence the model is left at the last finite weights and
/// [`Error::Diverged`] is returned.
pub fn train(model: &mut ScorerModel, scenes: &[SequenceBundle], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("training scenes"));
    }
    let (train_scenes, val_scenes) = split_scenes(scenes, cfg.validation_fraction);
    let windows = scene_windows(&train_scenes, cfg.batch_frames)?;
    let val_windows = scene_windows(&val_scenes, cfg.batch_frames)?;
    let corpus = Corpus::new(model.architecture(), &train_scenes, &windows)?;
    let val_corpus = Corpus::new(model.architecture(), &val_scenes, &val_windows)?;
    let param_count = model.param_count();
    let mut trainer = Trainer {
        model,
        corpus: &corpus,
        opt: OptimizerState::with_lr(param_count, cfg.learning_rate),
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut set = TrainingSet::new();
    let mut val = TrainingSet::new();
    let mut log = Vec::new();
    let mut sizes = Vec::new();
    let mut epoch = 0;
    let mut iteration = 0;

    match cfg.dataset {
        DatasetMode::NearGroundTruth => {
            near_ground_truth_set(&windows, &mut set);
            near_ground_truth_set(&val_windows, &mut val);
            sizes.push(set.len());
        }
        DatasetMode::Engine => {
            while iteration < cfg.max_iterations {
                let temperature = cfg.temperature(iteration);
                let snapshot = trainer.model.clone();
                build_iteration(&snapshot, &corpus, &mut set, temperature, &mut trainer.rng).map_err(|e| diverged(e, iteration))?;
                build_iteration(&snapshot, &val_corpus, &mut val, temperature, &mut trainer.rng).map_err(|e| diverged(e, iteration))?;
                sizes.push(set.len());
                if set.is_empty() {
                    return Err(Error::Empty("training set: scenes contain no detections"));
                }
                let train_loss = trainer.epoch(&set, iteration)?;
                epoch += 1;
                let subset = if val.is_empty() { Vec::new() } else { balance(&val.bins(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))? };
                log.push(LogRow {
                    iteration,
                    epoch,
                    dataset_size: set.len(),
                    train_loss,
                    val_loss: validation_loss(trainer.model, &val_corpus, &val, &subset)?,
                    temperature,
                    seed: cfg.seed,
                });
                log::info!("iteration {iteration}: {} samples, train loss {train_loss:.5}", set.len());
                iteration += 1;
                if growth_stalled(&sizes, cfg.growth_window, cfg.growth_threshold) {
                    break;
                }
            }
        }
    }
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }

    let subset = if val.is_empty() { Vec::new() } else { balance(&val.bins(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))? };
    let temperature = cfg.temperature(iteration);
    let mut best: Option<(f64, usize, ScorerModel)> = None;
    for e in 1..=cfg.final_epochs {
        let train_loss = trainer.epoch(&set, iteration)?;
        epoch += 1;
        let val_loss = validation_loss(trainer.model, &val_corpus, &val, &subset)?;
        log.push(LogRow {
            iteration,
            epoch,
            dataset_size: set.len(),
            train_loss,
            val_loss,
            temperature,
            seed: cfg.seed,
        });
        let criterion = if val_loss.is_nan() { train_loss } else { val_loss };
        if best.as_ref().is_none_or(|b| criterion < b.0) {
            best = Some((criterion, e, trainer.model.clone()));
        }
    }
    let (best_val_loss, best_epoch) = match best {
        Some((l, e, m)) => {
            *trainer.model = m;
            (l, e)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainReport {
        log,
        iterations: iteration,
        dataset_sizes: sizes,
        validation_size: val.len(),
        best_epoch,
        best_val_loss,
    })
}

#[cfg(test)]
mod tests;
