//! Subcommands of the `hypotrack` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hypotrack::config::RunConfig;
use hypotrack::engine::{track, IouHeuristicScorer, LearnedScorer, OracleScorer, TrackOutput, TrackletScorer};
use hypotrack::io::{
    detections_to_records, frame_span, load_bundle, load_records, trajectories_from_records, trajectories_to_records, write_header, write_records, write_results,
    BundleSources,
};
use hypotrack::metrics::{report, MetricsReport};
use hypotrack::scorer::{load_checkpoint, save_checkpoint, ScorerModel};
use hypotrack::sequence::SequenceBundle;
use hypotrack::synth::{synth_scene, synth_suite, Pattern, SynthSpec};
use hypotrack::training::{train, write_log};
use hypotrack::verify::run_oracle_suite;

#[derive(Debug, Parser)]
#[command(name = "hypotrack", version, about = "Multi-object tracking by growing and pruning tracklet hypotheses")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand; flags override the config file.
#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling rate of the sequence.
    #[arg(long, global = true)]
    pub fps: Option<f64>,
    /// Batch length in seconds (inference batches for `track`, training batches for `train`).
    #[arg(long, global = true)]
    pub batch_seconds: Option<f64>,
    /// Drop mergers scoring below this value before pruning.
    #[arg(long, global = true)]
    pub fast_cutoff: Option<f64>,
    /// greedy or exact.
    #[arg(long, global = true)]
    pub selection: Option<String>,
    /// per_source, score or count.
    #[arg(long, global = true)]
    pub pruning: Option<String>,
    /// Score hypotheses on their predicted, shifted boxes.
    #[arg(long, global = true)]
    pub autocontext: bool,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track one sequence and write MOTChallenge results.
    Track(TrackArgs),
    /// Train a scorer and write a checkpoint and a training log.
    Train(TrainArgs),
    /// Evaluate results against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Run the brute-force verifiers and print pass/fail lines.
    Oracle,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Scorer checkpoint; without one the IoU heuristic is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Score with the ground truth itself (requires --gt).
    #[arg(long, conflicts_with = "model")]
    pub oracle_scorer: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Detection files, one per scene, paired in order with --gt.
    #[arg(long)]
    pub detections: Vec<PathBuf>,
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    #[arg(long)]
    pub embeddings: Vec<PathBuf>,
    /// Train on this many synthetic scenes instead of files.
    #[arg(long)]
    pub synth_scenes: Option<usize>,
    /// Checkpoint to write; the log goes next to it with `.log.csv` appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV file for the metrics row.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for `det.txt`, `gt.txt`, `config.txt` and optionally `emb.bin`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub persons: usize,
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    /// linear or crossing.
    #[arg(long, default_value = "crossing")]
    pub pattern: String,
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub miss_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub fp_rate: f64,
    #[arg(long)]
    pub appearance: bool,
}

/// Resolves the run configuration from file, `--set` overrides and flags.
pub fn resolve_config(c: &Common, batch_key: &str) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        cfg.set(k, v)?;
    }
    let flags: [(&str, Option<String>); 6] = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("fps", c.fps.map(|v| v.to_string())),
        (batch_key, c.batch_seconds.map(|v| v.to_string())),
        ("fast_cutoff", c.fast_cutoff.map(|v| v.to_string())),
        ("selection", c.selection.clone()),
        ("pruning", c.pruning.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if c.autocontext {
        cfg.set("autocontext", "true")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_sequence(cfg: &RunConfig, detections: &Path, gt: Option<&Path>, embeddings: Option<&Path>) -> Result<SequenceBundle> {
    let bundle = load_bundle(&BundleSources {
        detections,
        ground_truth: gt,
        embeddings,
        fps: cfg.fps,
        image_width: cfg.image_width,
        image_height: cfg.image_height,
    })
    .with_context(|| format!("loading {}", detections.display()))?;
    Ok(bundle)
}

fn load_model(path: &Path) -> Result<ScorerModel> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(load_checkpoint(std::io::BufReader::new(file))?.0)
}

/// Writes the per-batch and per-growth-step hypothesis counts.
pub fn write_batch_csv<W: Write>(mut w: W, cfg: &RunConfig, out: &TrackOutput) -> Result<()> {
    write_header(&mut w, cfg)?;
    writeln!(w, "batch,start,end,detections,seeds,seeds_continued,step,candidates,pool_size,selected")?;
    for b in &out.batches {
        for (k, (c, p)) in b.growth.candidates.iter().zip(&b.growth.pool_sizes).enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                b.index,
                b.start + 1,
                b.end,
                b.detections,
                b.seeds,
                b.seeds_continued,
                k + 2,
                c,
                p,
                b.selected
            )?;
        }
    }
    Ok(())
}

pub fn cmd_track(common: &Common, a: &TrackArgs) -> Result<Option<MetricsReport>> {
    let cfg = resolve_config(common, "batch_seconds_infer")?;
    let seq = load_sequence(&cfg, &a.detections, a.gt.as_deref(), a.embeddings.as_deref())?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        if m.architecture().use_appearance && seq.embeddings.is_none() {
            bail!("the model uses appearance features but no --embeddings were given");
        }
    }
    if cfg.autocontext && model.is_none() {
        bail!("--autocontext needs a learned model (--model)");
    }
    let scorer: Box<dyn TrackletScorer> = match model {
        Some(model) => Box::new(LearnedScorer {
            model,
            autocontext: cfg.autocontext,
        }),
        None if a.oracle_scorer => {
            if seq.ground_truth.is_none() {
                bail!("--oracle-scorer needs --gt");
            }
            Box::new(OracleScorer)
        }
        None => Box::new(IouHeuristicScorer),
    };
    let clock = Instant::now();
    let out = track(&seq, scorer.as_ref(), &cfg.engine_config())?;
    let seconds = clock.elapsed().as_secs_f64();
    log::info!("tracked {} frames in {seconds:.2}s ({:.1} Hz)", seq.frame_count(), seq.frame_count() as f64 / seconds.max(1e-9));

    write_results(create(&a.out)?, &out.trajectories, Some(&cfg))?;
    write_batch_csv(create(&with_suffix(&a.out, ".batches.csv"))?, &cfg, &out)?;
    match &seq.ground_truth {
        Some(gt) => Ok(Some(report(&out.trajectories, gt, seq.frame_count())?)),
        None => Ok(None),
    }
}

pub fn cmd_train(common: &Common, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(common, "batch_seconds_train")?;
    if cfg.architecture.use_appearance && a.synth_scenes.is_none() && a.embeddings.len() != a.detections.len() {
        bail!("appearance features need one --embeddings file per scene");
    }
    let scenes: Vec<SequenceBundle> = match a.synth_scenes {
        Some(n) => {
            if !a.detections.is_empty() {
                bail!("--synth-scenes and --detections are mutually exclusive");
            }
            let base = SynthSpec {
                fps: cfg.fps,
                appearance: cfg.architecture.use_appearance,
                ..Default::default()
            };
            synth_suite(&base, n, 4..=8, cfg.seed)?
        }
        None => {
            if a.detections.is_empty() || a.detections.len() != a.gt.len() {
                bail!("give one --gt per --detections file");
            }
            (0..a.detections.len())
                .map(|k| load_sequence(&cfg, &a.detections[k], Some(&a.gt[k]), a.embeddings.get(k).map(PathBuf::as_path)))
                .collect::<Result<_>>()?
        }
    };
    let mut model = ScorerModel::new(cfg.architecture, cfg.seed);
    let result = train(&mut model, &scenes, &cfg.train_config());
    save_checkpoint(create(&a.out)?, &model, None)?;
    let report = result?;
    let mut log = create(&with_suffix(&a.out, ".log.csv"))?;
    write_header(&mut log, &cfg)?;
    write_log(&mut log, &report.log)?;
    log.flush()?;
    log::info!(
        "{} build iterations, {} samples, best epoch {} (validation loss {:.5})",
        report.iterations,
        report.dataset_sizes.last().copied().unwrap_or(0),
        report.best_epoch,
        report.best_val_loss
    );
    Ok(())
}

pub fn cmd_eval(common: &Common, a: &EvalArgs) -> Result<MetricsReport> {
    let cfg = resolve_config(common, "batch_seconds_infer")?;
    let gt_records = load_records(&a.gt)?;
    let result_records = load_records(&a.results)?;
    let frames = frame_span(&gt_records).max(frame_span(&result_records));
    let results = trajectories_from_records(&result_records, frames, &a.results)?;
    let gt = trajectories_from_records(&gt_records, frames, &a.gt)?;
    let r = report(&results, &gt, frames)?;
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        write_header(&mut w, &cfg)?;
        writeln!(w, "{}", MetricsReport::CSV_HEADER)?;
        writeln!(w, "{}", r.csv_row())?;
        w.flush()?;
    }
    Ok(r)
}

pub fn cmd_synth(common: &Common, a: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(common, "batch_seconds_infer")?;
    let spec = SynthSpec {
        persons: a.persons,
        frames: a.frames,
        pattern: a.pattern.parse::<Pattern>()?,
        noise_sigma: a.noise,
        miss_rate: a.miss_rate,
        fp_rate: a.fp_rate,
        seed: cfg.seed,
        fps: cfg.fps,
        appearance: a.appearance,
        ..Default::default()
    };
    let seq = synth_scene(&spec)?;
    fs::create_dir_all(&a.out)?;
    let mut det = create(&a.out.join("det.txt"))?;
    write_records(&mut det, &detections_to_records(&seq.frames))?;
    det.flush()?;
    let mut gt = create(&a.out.join("gt.txt"))?;
    write_records(&mut gt, &trajectories_to_records(seq.ground_truth.as_deref().unwrap_or_default()))?;
    gt.flush()?;
    if let Some(table) = &seq.embeddings {
        let mut e = create(&a.out.join("emb.bin"))?;
        table.write_binary(&mut e)?;
        e.flush()?;
    }
    let mut scene_cfg = cfg.clone();
    scene_cfg.set("image_width", &seq.image_width.to_string())?;
    scene_cfg.set("image_height", &seq.image_height.to_string())?;
    scene_cfg.set("fps", &seq.fps.to_string())?;
    let mut c = create(&a.out.join("config.txt"))?;
    for line in scene_cfg.to_lines() {
        writeln!(c, "{line}")?;
    }
    c.flush()?;
    Ok(())
}

/// Prints one line per verifier; returns whether all passed.
pub fn cmd_oracle<W: Write>(common: &Common, mut w: W) -> Result<bool> {
    let cfg = resolve_config(common, "batch_seconds_infer")?;
    let mut all = true;
    for r in run_oracle_suite(cfg.seed)? {
        writeln!(w, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        all &= r.passed;
    }
    Ok(all)
}

/// Runs a parsed command line. `Ok(false)` means the command ran but a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Track(a) => {
            if let Some(r) = cmd_track(&cli.common, a)? {
                print!("{r}");
            }
            Ok(true)
        }
        Command::Train(a) => cmd_train(&cli.common, a).map(|_| true),
        Command::Eval(a) => {
            print!("{}", cmd_eval(&cli.common, a)?);
            Ok(true)
        }
        Command::Synth(a) => cmd_synth(&cli.common, a).map(|_| true),
        Command::Oracle => cmd_oracle(&cli.common, std::io::stdout().lock()),
    }
}

/// Category of an error for the machine-readable failure line.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    use hypotrack::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Parse { .. } => "parse",
                E::Io(_) => "io",
                E::InvalidParameter(_) | E::Dimension(_) | E::EmbeddingDim { .. } => "invalid_input",
                E::NoGroundTruth(_) | E::NoGroundTruthDetections => "missing_ground_truth",
                E::Diverged { .. } => "diverged",
                E::Checkpoint(_) => "checkpoint",
                _ => "runtime",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "usage"
}

/// `error: {"kind":"...","message":"..."}`
pub fn error_line(e: &anyhow::Error) -> String {
    let message = format!("{e:#}");
    let mut escaped = String::with_capacity(message.len());
    for ch in message.chars() {
        match ch {
            '"' => escaped.push_str("\\\""),
            '\\' => escaped.push_str("\\\\"),
            '\n' => escaped.push_str("\\n"),
            c if (c as u32) < 0x20 => escaped.push_str(&format!("\\u{:04x}", c as u32)),
            c => escaped.push(c),
        }
    }
    format!("error: {{\"kind\":\"{}\",\"message\":\"{escaped}\"}}", error_kind(e))
}
