//! Flat `key = value` run configuration shared by every command.
//!
//! Keys: `c_iou`, `c_score`, `selection` (greedy|exact), `pruning` (per_source|score|count),
//! `prune_cutoff`, `prune_keep`, `span_rule` (lenient|literal|off), `fast_cutoff` (none or a score),
//! `exact_limit`, `exclusive_detections`, `neighbors`, `appearance`, `embed_dim`, `hidden`,
//! `hard_mining`, `batch_size`, `temperature_start`, `temperature_end`, `anneal_iterations`,
//! `growth_threshold`, `growth_window`, `max_iterations`, `final_epochs`, `learning_rate`,
//! `validation_fraction`, `dataset` (engine|near-gt), `batch_seconds_train`, `batch_seconds_infer`,
//! `fps`, `image_width`, `image_height`, `seed`, `autocontext`.

use std::path::Path;

use crate::engine::{EngineConfig, PruningMode, SelectionMode, SpanRule};
use crate::error::{Error, Result};
use crate::scorer::Architecture;
use crate::training::{DatasetMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    /// Cutoff used when `pruning = score`.
    pub prune_cutoff: f64,
    /// Mergers kept per step when `pruning = count`.
    pub prune_keep: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub batch_seconds_train: f64,
    pub batch_seconds_infer: f64,
    pub fps: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub seed: u64,
    pub autocontext: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            prune_cutoff: 0.6,
            prune_keep: 200,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            batch_seconds_train: 3.0,
            batch_seconds_infer: 6.0,
            fps: 3.0,
            image_width: 1920.0,
            image_height: 1080.0,
            seed: 0,
            autocontext: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidParameter(format!("{key} = {value:?}: {e}")))
}

fn frames_for(seconds: f64, fps: f64) -> usize {
    ((seconds * fps).round() as usize).max(2)
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "c_iou" => self.engine.c_iou = parse(key, v)?,
            "c_score" => self.engine.c_score = parse(key, v)?,
            "selection" => self.engine.selection = v.parse::<SelectionMode>()?,
            "pruning" => {
                self.engine.pruning = match v {
                    "per_source" => PruningMode::PerSource,
                    "score" => PruningMode::ByScore { cutoff: self.prune_cutoff },
                    "count" => PruningMode::ByCount { keep: self.prune_keep },
                    _ => return Err(Error::InvalidParameter(format!("unknown pruning mode {v:?}"))),
                }
            }
            "prune_cutoff" => self.prune_cutoff = parse(key, v)?,
            "prune_keep" => self.prune_keep = parse(key, v)?,
            "span_rule" => self.engine.span_rule = v.parse::<SpanRule>()?,
            "fast_cutoff" => self.engine.fast_cutoff = if v == "none" { None } else { Some(parse(key, v)?) },
            "exact_limit" => self.engine.exact_limit = parse(key, v)?,
            "exclusive_detections" => self.engine.exclusive_detections = parse(key, v)?,
            "neighbors" => self.architecture.neighbors = parse(key, v)?,
            "appearance" => self.architecture.use_appearance = parse(key, v)?,
            "embed_dim" => self.architecture.embed_dim = parse(key, v)?,
            "hidden" => self.architecture.hidden = parse(key, v)?,
            "hard_mining" => self.train.hard_mining = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "temperature_start" => self.train.temperature_start = parse(key, v)?,
            "temperature_end" => self.train.temperature_end = parse(key, v)?,
            "anneal_iterations" => self.train.anneal_iterations = parse(key, v)?,
            "growth_threshold" => self.train.growth_threshold = parse(key, v)?,
            "growth_window" => self.train.growth_window = parse(key, v)?,
            "max_iterations" => self.train.max_iterations = parse(key, v)?,
            "final_epochs" => self.train.final_epochs = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "validation_fraction" => self.train.validation_fraction = parse(key, v)?,
            "dataset" => self.train.dataset = v.parse::<DatasetMode>()?,
            "batch_seconds_train" => self.batch_seconds_train = parse(key, v)?,
            "batch_seconds_infer" => self.batch_seconds_infer = parse(key, v)?,
            "fps" => self.fps = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "autocontext" => self.autocontext = parse(key, v)?,
            other => return Err(Error::InvalidParameter(format!("unknown configuration key {other:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Re-derives the fields that depend on others.
    fn sync(&mut self) {
        self.engine.pruning = match self.engine.pruning {
            PruningMode::PerSource => PruningMode::PerSource,
            PruningMode::ByScore { .. } => PruningMode::ByScore { cutoff: self.prune_cutoff },
            PruningMode::ByCount { .. } => PruningMode::ByCount { keep: self.prune_keep },
        };
        self.engine.batch_frames = frames_for(self.batch_seconds_infer, self.fps);
        self.train.batch_frames = frames_for(self.batch_seconds_train, self.fps);
        self.train.seed = self.seed;
    }

    /// Parses a configuration file body on top of the defaults.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text, path)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_str(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?, path)
    }

    /// Every key with its value, in a fixed order; parsing the lines back yields the same config.
    pub fn to_lines(&self) -> Vec<String> {
        let e = &self.engine;
        let t = &self.train;
        let a = &self.architecture;
        let fast = e.fast_cutoff.map_or("none".to_string(), |c| c.to_string());
        [
            ("c_iou", e.c_iou.to_string()),
            ("c_score", e.c_score.to_string()),
            ("selection", e.selection.to_string()),
            ("prune_cutoff", self.prune_cutoff.to_string()),
            ("prune_keep", self.prune_keep.to_string()),
            ("pruning", e.pruning.to_string()),
            ("span_rule", e.span_rule.to_string()),
            ("fast_cutoff", fast),
            ("exact_limit", e.exact_limit.to_string()),
            ("exclusive_detections", e.exclusive_detections.to_string()),
            ("neighbors", a.neighbors.to_string()),
            ("appearance", a.use_appearance.to_string()),
            ("embed_dim", a.embed_dim.to_string()),
            ("hidden", a.hidden.to_string()),
            ("hard_mining", t.hard_mining.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("temperature_start", t.temperature_start.to_string()),
            ("temperature_end", t.temperature_end.to_string()),
            ("anneal_iterations", t.anneal_iterations.to_string()),
            ("growth_threshold", t.growth_threshold.to_string()),
            ("growth_window", t.growth_window.to_string()),
            ("max_iterations", t.max_iterations.to_string()),
            ("final_epochs", t.final_epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("validation_fraction", t.validation_fraction.to_string()),
            ("dataset", t.dataset.to_string()),
            ("batch_seconds_train", self.batch_seconds_train.to_string()),
            ("batch_seconds_infer", self.batch_seconds_infer.to_string()),
            ("fps", self.fps.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("seed", self.seed.to_string()),
            ("autocontext", self.autocontext.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}"))
        .collect()
    }

    /// Engine settings with the inference batch length.
    pub fn engine_config(&self) -> EngineConfig {
        let mut e = self.engine.clone();
        e.batch_frames = frames_for(self.batch_seconds_infer, self.fps);
        e
    }

    /// Training settings with the training batch length and seed.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.batch_frames = frames_for(self.batch_seconds_train, self.fps);
        t.seed = self.seed;
        t
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.batch_seconds_train > 0.0 && self.batch_seconds_infer > 0.0) {
            return Err(Error::InvalidParameter("batch lengths must be positive".into()));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        self.engine_config().validate()?;
        self.train_config().validate()
    }
}
