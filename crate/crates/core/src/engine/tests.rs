use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BoundingBox;
use crate::sequence::SequenceBundle;
use crate::synth::{synth_scene, Pattern, SynthSpec};
use crate::tracklet::{can_merge, merge, Detection, DetectionId};
use crate::verify::{exhaustive_objective, random_selection_pool, selection_gap, PoolSource};

fn det(frame: usize, id: u32, left: f64) -> Detection {
    Detection::new(frame, BoundingBox::new(left, 10.0, 20.0, 40.0), 0.9, DetectionId(id))
}

/// Frames with `per_frame` detections each, ids in frame-major order.
fn grid(frames: usize, per_frame: usize) -> Vec<Vec<Detection>> {
    (0..frames)
        .map(|f| (0..per_frame).map(|k| det(f, (f * per_frame + k) as u32, 100.0 * k as f64 + 3.0 * f as f64)).collect())
        .collect()
}

fn constant(s: f64) -> impl Fn(&Tracklet) -> f64 {
    move |_| s
}

#[test]
fn init_pool_counts() {
    assert!(init_pool(&[vec![], vec![]]).is_empty());
    let frames = vec![vec![det(0, 0, 0.0), det(0, 1, 50.0)], vec![det(1, 2, 0.0)], vec![det(2, 3, 0.0), det(2, 4, 1.0), det(2, 5, 2.0), det(2, 6, 3.0)]];
    assert_eq!(init_pool(&frames).len(), 7);
    let dup = vec![vec![det(0, 0, 5.0), det(0, 1, 5.0)]];
    assert_eq!(init_pool(&dup).len(), 2);
}

#[test]
fn grow_pairs_singletons_in_different_frames() {
    let frames = vec![vec![det(0, 0, 0.0)], vec![det(1, 1, 0.0)]];
    let pool = init_pool(&frames);
    let c = pool.grow_step(2, &constant(0.5), &mut HashMap::new()).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].tracklet.support_len(), 2);
    assert_eq!(c[0].sources, vec![0, 1]);
}

#[test]
fn disjoint_large_tracklets_are_not_merged() {
    let frames = grid(6, 1);
    let mut pool = HypothesisPool::new(6);
    let mut a = Tracklet::empty(6);
    let mut b = Tracklet::empty(6);
    for f in 0..3 {
        a.set(f, Some((&frames[f][0]).into()));
        b.set(f + 3, Some((&frames[f + 3][0]).into()));
    }
    pool.insert(a).unwrap();
    pool.insert(b).unwrap();
    for n in 2..=6 {
        assert!(pool.grow_step(n, &constant(0.5), &mut HashMap::new()).unwrap().is_empty());
    }
}

/// Every unordered pair of pool hypotheses meeting the growth rule for size `n`.
fn brute_force_keys(pool: &HypothesisPool, n: usize) -> BTreeSet<Vec<Option<DetectionId>>> {
    let ts = pool.tracklets();
    let mut out = BTreeSet::new();
    for i in 0..ts.len() {
        for j in i + 1..ts.len() {
            let (a, b) = (&ts[i], &ts[j]);
            if !can_merge(a, b) {
                continue;
            }
            let m = merge(a, b).unwrap();
            if m.support_len() == n && a.support_len().max(b.support_len()) + 1 == n && !pool.contains_key(&m.key()) {
                out.insert(m.key());
            }
        }
    }
    out
}

#[test]
fn grow_step_matches_pair_enumeration() {
    let frames = grid(3, 2);
    let mut pool = init_pool(&frames);
    let scorer = |t: &Tracklet| t.id_sequence().iter().map(|d| d.0 as f64).sum::<f64>() / 100.0;
    let mut cache = HashMap::new();
    for n in 2..=3 {
        let c = pool.grow_step(n, &scorer, &mut cache).unwrap();
        let got: BTreeSet<_> = c.iter().map(|c| c.tracklet.key()).collect();
        assert_eq!(got.len(), c.len());
        assert_eq!(got, brute_force_keys(&pool, n), "n = {n}");
        pool.prune_step(&c, PruningMode::PerSource, None).unwrap();
    }
}

#[test]
fn prune_keeps_best_merger_per_source() {
    let frames = vec![vec![det(0, 0, 0.0)], vec![det(1, 1, 0.0)], vec![det(2, 2, 0.0), det(2, 3, 30.0), det(2, 4, 60.0)]];
    let mut pool = HypothesisPool::new(3);
    let mut t1 = Tracklet::empty(3);
    t1.set(0, Some((&frames[0][0]).into()));
    t1.set(1, Some((&frames[1][0]).into()));
    pool.insert(t1).unwrap();
    for d in &frames[2] {
        pool.insert(Tracklet::single(3, 2, d)).unwrap();
    }
    let scores: HashMap<u32, f64> = [(2, 0.7), (3, 0.9), (4, 0.4)].into();
    let scorer = move |t: &Tracklet| t.cell(2).map_or(0.0, |c| scores[&c.id.0]);
    let c = pool.grow_step(3, &scorer, &mut HashMap::new()).unwrap();
    assert_eq!(c.len(), 3);
    assert!(c.iter().all(|c| c.sources == vec![0]));
    pool.prune_step(&c, PruningMode::PerSource, None).unwrap();
    assert_eq!(pool.len(), 5);
    assert_eq!(pool.get(4).id_sequence(), vec![DetectionId(0), DetectionId(1), DetectionId(3)]);
}

#[test]
fn equal_size_partners_are_both_sources() {
    let frames = vec![vec![det(0, 0, 0.0)], vec![det(1, 1, 0.0), det(1, 2, 30.0), det(1, 3, 60.0)]];
    let mut pool = init_pool(&frames);
    let c = pool.grow_step(2, &constant(0.5), &mut HashMap::new()).unwrap();
    assert_eq!(c.len(), 3);
    pool.prune_step(&c, PruningMode::PerSource, None).unwrap();
    // Each frame-1 singleton keeps its only merger.
    assert_eq!(pool.len(), 7);
}

#[test]
fn source_without_mergers_is_untouched() {
    let frames = vec![vec![det(0, 0, 0.0), det(0, 1, 50.0)]];
    let mut pool = init_pool(&frames);
    let before = pool.tracklets().to_vec();
    let stats = generate(&mut pool, &constant(0.5), GenerateOptions::new(PruningMode::PerSource, None)).unwrap();
    assert!(stats.candidates.is_empty());
    assert_eq!(pool.len(), 2);
    assert_eq!(pool.tracklets()[0].cells(), before[0].cells());
}

#[test]
fn single_detection_pool_is_stable() {
    let frames = vec![vec![], vec![det(1, 0, 0.0)], vec![]];
    let mut pool = init_pool(&frames);
    generate(&mut pool, &constant(0.5), GenerateOptions::new(PruningMode::PerSource, None)).unwrap();
    assert_eq!(pool.len(), 1);
    assert_eq!(pool.get(0).support_len(), 1);
}

fn parallel_walk() -> SequenceBundle {
    synth_scene(&SynthSpec {
        persons: 2,
        frames: 8,
        pattern: Pattern::Linear,
        noise_sigma: 0.0,
        miss_rate: 0.0,
        fp_rate: 0.0,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn truth_keys(seq: &SequenceBundle, from: usize, to: usize) -> Vec<Vec<Option<DetectionId>>> {
    let frames = seq.window_frames(from, to);
    seq.window_ground_truth(from, to)
        .iter()
        .map(|g| {
            (0..to - from)
                .map(|n| frames[n].iter().find(|d| g.is_present(n) && d.bbox == g.columns[n]).map(|d| d.id))
                .collect()
        })
        .collect()
}

#[test]
fn oracle_scored_generation_recovers_ground_truth() {
    let seq = parallel_walk();
    let frames = seq.window_frames(0, 8);
    let gt = seq.window_ground_truth(0, 8);
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
    let scorer = OracleScorer.for_batch(&ctx).unwrap();
    let mut pool = init_pool(&frames);
    generate(&mut pool, scorer.as_ref(), GenerateOptions::new(PruningMode::PerSource, None)).unwrap();
    for key in truth_keys(&seq, 0, 8) {
        assert!(pool.contains_key(&key));
    }
}

#[test]
fn generation_invariants_on_random_scenes() {
    for seed in 0..5 {
        let seq = synth_scene(&SynthSpec {
            persons: 3,
            frames: 6,
            seed,
            ..Default::default()
        })
        .unwrap();
        let frames = seq.window_frames(0, 6);
        let mut pool = init_pool(&frames);
        let d = pool.len();
        pool.score_missing(&|t: &Tracklet| IouHeuristicScorer::score_tracklet(t)).unwrap();
        let mut cache = HashMap::new();
        for n in 2..=6 {
            let before = pool.len();
            let sources = pool.tracklets().iter().filter(|t| t.support_len() == n - 1).count();
            let c = pool.grow_step(n, &|t: &Tracklet| IouHeuristicScorer::score_tracklet(t), &mut cache).unwrap();
            pool.prune_step(&c, PruningMode::PerSource, None).unwrap();
            assert!(pool.len() <= before + sources);
        }
        assert!(pool.len() <= d * 6);
        for det in frames.iter().flatten() {
            assert!(!pool.containing(det.id).is_empty());
        }
    }
}

fn scored(cells: &[(usize, u32, f64)], frames: usize, score: f64) -> Tracklet {
    let mut t = Tracklet::empty(frames);
    for &(f, id, left) in cells {
        t.set(f, Some((&det(f, id, left)).into()));
    }
    t.cached_score = Some(score);
    t
}

#[test]
fn greedy_examples() {
    let cfg = EngineConfig {
        span_rule: SpanRule::Off,
        ..Default::default()
    };
    let pool = vec![scored(&[(0, 0, 0.0), (1, 1, 0.0)], 2, 0.9), scored(&[(0, 2, 500.0), (1, 3, 500.0)], 2, 0.8)];
    assert_eq!(select_greedy(&pool, &cfg), vec![0, 1]);
    let pool = vec![scored(&[(0, 0, 0.0), (1, 1, 0.0)], 2, 0.8), scored(&[(0, 0, 0.0), (1, 3, 2.0)], 2, 0.9)];
    assert_eq!(select_greedy(&pool, &cfg), vec![1]);
}

#[test]
fn lenient_span_prefers_full_span() {
    let cfg = EngineConfig::default();
    let full = scored(&[(0, 0, 0.0), (1, 1, 0.0), (2, 2, 0.0)], 3, 0.7);
    let short = scored(&[(1, 1, 0.0), (2, 2, 0.0)], 3, 0.95);
    let elsewhere = scored(&[(1, 5, 400.0)], 3, 0.8);
    let pool = vec![short, full, elsewhere];
    assert_eq!(select_greedy(&pool, &cfg), vec![1, 2]);
    let literal = EngineConfig {
        span_rule: SpanRule::Literal,
        ..cfg.clone()
    };
    assert_eq!(select_greedy(&pool, &literal), vec![1]);
    let off = EngineConfig {
        span_rule: SpanRule::Off,
        ..cfg
    };
    assert_eq!(select_greedy(&pool, &off), vec![0, 2]);
}

#[test]
fn exact_selection_examples() {
    let cfg = EngineConfig {
        span_rule: SpanRule::Off,
        ..Default::default()
    };
    assert!(select_exact(&[], &cfg).unwrap().is_empty());
    let pool: Vec<Tracklet> = (0..4).map(|k| scored(&[(0, k, 300.0 * k as f64)], 1, 0.7)).collect();
    assert_eq!(select_exact(&pool, &cfg).unwrap(), vec![0, 1, 2, 3]);
    let big: Vec<Tracklet> = (0..30).map(|k| scored(&[(0, k, 300.0 * k as f64)], 1, 0.7)).collect();
    assert!(matches!(select_exact(&big, &cfg), Err(crate::Error::PoolTooLarge { .. })));
}

#[test]
fn exact_dominates_greedy_and_matches_enumeration() {
    let gap = selection_gap(PoolSource::Engine, 7, 50, 15).unwrap();
    assert_eq!(gap.exact_mismatches, 0);
    assert_eq!(gap.dominance_violations, 0);
    assert!(gap.aggregate_gap <= 0.05, "{gap:?}");
    let uniform = selection_gap(PoolSource::Uniform, 7, 50, 15).unwrap();
    assert_eq!(uniform.exact_mismatches, 0);
    assert_eq!(uniform.dominance_violations, 0);
    let cfg = EngineConfig {
        span_rule: SpanRule::Off,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let pool = random_selection_pool(&mut rng, 12);
        let sel = select_greedy(&pool, &cfg);
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                assert!(crate::tracklet::overlap_fraction(&pool[i], &pool[j]) <= cfg.c_iou);
            }
        }
        let exact = objective(&pool, &select_exact(&pool, &cfg).unwrap());
        assert!((exact - exhaustive_objective(&pool, &cfg)).abs() < 1e-9);
    }
}

#[test]
fn batch_windows_shift_by_a_third() {
    assert_eq!(batch_windows(12, 12), vec![(0, 12)]);
    assert_eq!(batch_windows(5, 12), vec![(0, 5)]);
    assert_eq!(batch_windows(20, 12), vec![(0, 12), (4, 16), (8, 20)]);
    assert_eq!(batch_windows(21, 12), vec![(0, 12), (4, 16), (8, 20), (12, 21)]);
    assert!(batch_windows(0, 12).is_empty());
}

fn walker(frames: usize, present: std::ops::Range<usize>) -> SequenceBundle {
    let dets = (0..frames)
        .map(|f| if present.contains(&f) { vec![det(f, f as u32, 10.0 + 2.0 * f as f64)] } else { vec![] })
        .collect();
    SequenceBundle::new(dets, 2.0, 800.0, 600.0)
}

#[test]
fn one_walker_keeps_one_identity_across_batches() {
    let seq = walker(20, 0..20);
    let cfg = EngineConfig {
        batch_frames: 12,
        ..Default::default()
    };
    let out = track(&seq, &IouHeuristicScorer, &cfg).unwrap();
    assert_eq!(out.batches.len(), 3);
    assert_eq!(out.trajectories.len(), 1);
    assert_eq!(out.trajectories[0].support_len(), 20);
    assert!(out.batches.iter().all(|b| b.seeds_continued == b.seeds));
}

#[test]
fn leaving_walker_terminates() {
    let seq = walker(20, 0..10);
    let cfg = EngineConfig {
        batch_frames: 12,
        ..Default::default()
    };
    let out = track(&seq, &IouHeuristicScorer, &cfg).unwrap();
    assert_eq!(out.trajectories.len(), 1);
    assert_eq!(out.trajectories[0].end(), Some(9));
    assert_eq!(out.trajectories[0].support_len(), 10);
}

#[test]
fn single_batch_is_plain_selection() {
    let seq = parallel_walk();
    let cfg = EngineConfig {
        batch_frames: 8,
        ..Default::default()
    };
    let out = track(&seq, &OracleScorer, &cfg).unwrap();
    assert_eq!(out.batches.len(), 1);
    let frames = seq.window_frames(0, 8);
    let gt = seq.window_ground_truth(0, 8);
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
    let s = OracleScorer.for_batch(&ctx).unwrap();
    let mut pool = init_pool(&frames);
    generate(&mut pool, s.as_ref(), GenerateOptions::new(PruningMode::PerSource, None)).unwrap();
    let sel = select_greedy(pool.tracklets(), &cfg);
    let mut expected: Vec<Vec<BoundingBox>> = sel.iter().map(|&i| (0..8).map(|n| pool.get(i).bbox(n)).collect()).collect();
    let mut got: Vec<Vec<BoundingBox>> = out.trajectories.iter().map(|t| t.columns.clone()).collect();
    let key = |v: &Vec<BoundingBox>| v.iter().map(|b| b.left.to_bits()).collect::<Vec<_>>();
    expected.sort_by_key(key);
    got.sort_by_key(key);
    assert_eq!(got, expected);
    assert_eq!(got.len(), 2);
}

#[test]
fn tracking_is_deterministic() {
    let seq = synth_scene(&SynthSpec {
        persons: 5,
        frames: 20,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let cfg = EngineConfig {
        batch_frames: 9,
        ..Default::default()
    };
    let a = track(&seq, &IouHeuristicScorer, &cfg).unwrap();
    let b = track(&seq, &IouHeuristicScorer, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_names_parse() {
    assert_eq!("exact".parse::<SelectionMode>().unwrap(), SelectionMode::Exact);
    assert!("nope".parse::<SpanRule>().is_err());
    assert!(EngineConfig { c_iou: 1.0, ..Default::default() }.validate().is_err());
}
