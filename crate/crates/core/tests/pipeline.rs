use hypotrack::engine::{track, EngineConfig, IouHeuristicScorer, LearnedScorer, TrackletScorer};
use hypotrack::experiment::{track_suite, tune_c_score};
use hypotrack::io::{read_results, write_results};
use hypotrack::metrics::report;
use hypotrack::scorer::{Architecture, ScorerModel};
use hypotrack::synth::{synth_suite, SynthSpec};

fn scenes(count: usize, seed: u64) -> Vec<hypotrack::sequence::SequenceBundle> {
    let spec = SynthSpec { frames: 12, fps: 2.0, ..Default::default() };
    synth_suite(&spec, count, 3..=5, seed).unwrap()
}

fn engine() -> EngineConfig {
    EngineConfig { batch_frames: 6, ..Default::default() }
}

fn naive_tuning(scenes: &[hypotrack::sequence::SequenceBundle], scorer: &dyn TrackletScorer, grid: &[f64]) -> (f64, f64) {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &c in grid {
        let r = track_suite(scenes, scorer, &EngineConfig { c_score: c, ..engine() }).unwrap();
        if r.idf1 > best.1 {
            best = (c, r.idf1);
        }
    }
    best
}

#[test]
fn tuning_matches_independent_runs() {
    let suite = scenes(3, 5);
    let grid = [0.2, 0.4, 0.6];
    let arch = Architecture { neighbors: 2, use_appearance: false, embed_dim: 6, hidden: 5 };
    let learned = LearnedScorer { model: ScorerModel::new(arch, 9), autocontext: false };
    for scorer in [&IouHeuristicScorer as &dyn TrackletScorer, &learned] {
        let (c, r) = tune_c_score(&suite, scorer, &engine(), &grid).unwrap();
        let (c_naive, idf1) = naive_tuning(&suite, scorer, &grid);
        assert_eq!(c, c_naive);
        assert_eq!(r.idf1, idf1);
    }
}

#[test]
fn written_results_evaluate_like_the_tracker_output() {
    for seq in scenes(2, 8) {
        let out = track(&seq, &IouHeuristicScorer, &engine()).unwrap();
        let gt = seq.ground_truth.as_deref().unwrap();
        let direct = report(&out.trajectories, gt, seq.frame_count()).unwrap();

        let file = tempfile::NamedTempFile::new().unwrap();
        write_results(file.as_file(), &out.trajectories, None).unwrap();
        let reread = read_results(file.path(), seq.frame_count()).unwrap();
        assert_eq!(report(&reread, gt, seq.frame_count()).unwrap(), direct);
    }
}
