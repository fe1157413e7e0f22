use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BoundingBox;
use crate::scorer::Architecture;
use crate::synth::{synth_scene, SynthSpec};
use crate::tracklet::tests::tl;

fn tiny_arch() -> Architecture {
    Architecture {
        neighbors: 1,
        use_appearance: false,
        embed_dim: 6,
        hidden: 6,
    }
}

fn scene(seed: u64, frames: usize) -> SequenceBundle {
    synth_scene(&SynthSpec {
        persons: 3,
        frames,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_iterations: 3,
        final_epochs: 3,
        batch_frames: 4,
        seed,
        ..Default::default()
    }
}

fn fixture(seed: u64) -> (ScorerModel, Vec<SequenceBundle>, Vec<TrainWindow>) {
    let scenes = vec![scene(seed, 8)];
    let windows = scene_windows(&scenes, 4).unwrap();
    (ScorerModel::new(tiny_arch(), seed), scenes, windows)
}

fn build(model: &ScorerModel, corpus: &Corpus<'_>, seed: u64) -> TrainingSet {
    let mut set = TrainingSet::new();
    build_iteration(model, corpus, &mut set, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    set
}

#[test]
fn assign_ground_truth_examples() {
    let t = tl(10, &(0..10).map(|f| (f, f as u32)).collect::<Vec<_>>());
    let same = Trajectory { id: 4, columns: (0..10).map(|n| t.bbox(n)).collect() };
    let other = Trajectory { id: 5, columns: vec![BoundingBox::new(900.0, 900.0, 5.0, 5.0); 10] };
    let gts = [other.clone(), same.clone()];
    let (g, v) = assign_ground_truth(&t, &gts);
    assert_eq!((g, v), (Some(1), 1.0));

    let t5 = tl(10, &(0..5).map(|f| (f, f as u32)).collect::<Vec<_>>());
    let mut g7 = Trajectory::new(1, 10);
    for f in 2..9 {
        g7.columns[f] = if f < 5 { t5.bbox(f) } else { BoundingBox::new(700.0, 0.0, 10.0, 10.0) };
    }
    let (g, v) = assign_ground_truth(&t5, std::slice::from_ref(&g7));
    assert_eq!(g, Some(0));
    assert!((v - 0.5).abs() < 1e-15);

    assert_eq!(assign_ground_truth(&t, &[]), (None, 0.0));
    assert_eq!(bin_of(1.0), 9);
    assert_eq!(bin_of(0.5), 5);
    assert_eq!(bin_of(0.0), 0);
}

#[test]
fn merge_choice_equal_scores_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        counts[randomized_merge_choice(&[0.4; 4], 2.0, &mut rng).unwrap()] += 1;
    }
    let expected = draws as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with three degrees of freedom.
    assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn merge_choice_sharp_temperature_and_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut misses = 0;
    for _ in 0..10_000 {
        if randomized_merge_choice(&[0.2, 1.2], 10.0, &mut rng).unwrap() != 1 {
            misses += 1;
        }
    }
    // Closed form: P(miss) = 1 / (1 + e^10) ≈ 4.5e-5.
    assert!(misses <= 5, "{misses}");
    assert_eq!(randomized_merge_choice(&[0.3], 0.1, &mut rng).unwrap(), 0);
    assert!(randomized_merge_choice(&[], 1.0, &mut rng).is_err());
    assert!(randomized_merge_choice(&[1.0, 2.0], 0.0, &mut rng).is_err());
}

#[test]
fn balance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let equal = [0, 0, 3, 3, 9, 9];
    assert_eq!(balance(&equal, &mut rng).unwrap(), vec![0, 1, 2, 3, 4, 5]);

    let mut bins = vec![1; 2];
    bins.extend([4; 10]);
    bins.extend([7; 5]);
    let out = balance(&bins, &mut rng).unwrap();
    assert_eq!(out.len(), 6);
    for b in [1, 4, 7] {
        assert_eq!(out.iter().filter(|&&i| bins[i] == b).count(), 2);
    }

    assert_eq!(balance(&[2, 2, 2], &mut rng).unwrap(), vec![0, 1, 2]);
    assert!(balance(&[], &mut rng).is_err());
}

#[test]
fn hard_mine_examples() {
    let (model, scenes, windows) = fixture(5);
    let corpus = Corpus::new(&tiny_arch(), &scenes, &windows).unwrap();
    let set = build(&model, &corpus, 5);
    let all: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let plain = hard_mine(&all, &set.samples, &corpus, &model, 1, 4, &mut rng).unwrap();
    assert_eq!(plain.draw.len(), 4);
    let mut a = plain.kept.clone();
    let mut b = plain.draw.clone();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);

    let mined = hard_mine(&all, &set.samples, &corpus, &model, 3, 4, &mut rng).unwrap();
    assert_eq!((mined.draw.len(), mined.kept.len()), (12, 4));
    let kept_min = mined.kept.iter().map(|&i| mined.losses[mined.draw.iter().position(|&d| d == i).unwrap()]).fold(f64::INFINITY, f64::min);
    for (d, l) in mined.draw.iter().zip(&mined.losses) {
        if !mined.kept.contains(d) {
            assert!(*l <= kept_min);
        }
    }

    let small = hard_mine(&all[..5], &set.samples, &corpus, &model, 3, 4, &mut rng).unwrap();
    assert_eq!((small.draw.len(), small.kept.len()), (5, 4));
}

#[test]
fn constant_losses_keep_draw_order() {
    let (model, scenes, windows) = fixture(6);
    let corpus = Corpus::new(&tiny_arch(), &scenes, &windows).unwrap();
    let built = build(&model, &corpus, 6);
    let zero = ScorerModel::zeros(tiny_arch());
    let mut set = TrainingSet::new();
    set.samples = vec![built.samples[0].clone(); 8];
    let same: Vec<usize> = (0..8).collect();
    let mined = hard_mine(&same, &set.samples, &corpus, &zero, 2, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(mined.losses.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(mined.kept, mined.draw[..3].to_vec());
    let other = hard_mine(&same, &set.samples, &corpus, &zero, 2, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(other.draw, mined.draw);
}

#[test]
fn build_iteration_ingests_every_detection() {
    let (model, scenes, windows) = fixture(7);
    let corpus = Corpus::new(&tiny_arch(), &scenes, &windows).unwrap();
    let set = build(&model, &corpus, 7);
    for (wi, w) in windows.iter().enumerate() {
        for (f, dets) in w.frames.iter().enumerate() {
            for d in dets {
                assert!(set.contains(wi, &Tracklet::single(w.frames.len(), f, d)));
            }
        }
    }
    assert!(set.samples.iter().any(|s| s.tracklet.support_len() > 1));
    assert!(set.samples.iter().all(|s| s.is_consistent(&windows[s.window])));
    for s in &set.samples {
        let (x, t) = corpus.inputs(s).unwrap();
        assert_eq!(x.frames(), 4);
        let g = s.ground_truth.map(|g| &windows[s.window].ground_truth[g]);
        assert_eq!(t, FrameTargets::new(&s.tracklet, g, scenes[0].image_width, scenes[0].image_height));
    }

    let mut again = set.clone();
    let added = build_iteration(&model, &corpus, &mut again, 1.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(added, 0);
    assert_eq!(again.len(), set.len());
    let more = build_iteration(&model, &corpus, &mut again, 1.0, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert_eq!(again.len(), set.len() + more);
}

#[test]
fn near_ground_truth_tracklets_follow_paths() {
    let scenes = vec![synth_scene(&SynthSpec { persons: 2, frames: 5, noise_sigma: 0.0, miss_rate: 0.0, fp_rate: 0.0, seed: 1, ..Default::default() }).unwrap()];
    let windows = scene_windows(&scenes, 5).unwrap();
    let ts = near_ground_truth_tracklets(&windows[0]);
    // Every contiguous sub-span of a person's frames that holds at least one of them.
    let expected: usize = windows[0]
        .ground_truth
        .iter()
        .map(|g| (0..5).flat_map(|a| (a..5).map(move |b| (a, b))).filter(|&(a, b)| (a..=b).any(|f| g.is_present(f))).count())
        .sum();
    assert_eq!(ts.len(), expected);
    for t in &ts {
        let (g, v) = assign_ground_truth(t, &windows[0].ground_truth);
        let k = t.support_len() as f64;
        let l = windows[0].ground_truth[g.unwrap()].support_len() as f64;
        assert!((v - 2.0 * k / (k + l)).abs() < 1e-12);
    }
}

#[test]
fn temperature_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.temperature(0), 10.0);
    assert!((cfg.temperature(29) - 0.1).abs() < 1e-12);
    assert_eq!(cfg.temperature(29), cfg.temperature(500));
    let mid = cfg.temperature(1) / cfg.temperature(0);
    assert!((cfg.temperature(15) / cfg.temperature(14) - mid).abs() < 1e-12);
    assert!(cfg.validate().is_ok());
    assert!(TrainConfig { hard_mining: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { temperature_end: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn growth_stopping_rule() {
    assert!(!growth_stalled(&[10, 11, 12], 10, 0.05));
    let mut sizes = vec![100; 10];
    sizes.push(104);
    assert!(growth_stalled(&sizes, 10, 0.05));
    sizes.push(200);
    assert!(!growth_stalled(&sizes, 10, 0.05));
}

#[test]
fn empty_inputs_are_rejected() {
    let mut model = ScorerModel::new(tiny_arch(), 0);
    assert!(matches!(train(&mut model, &[], &tiny_config(0)), Err(Error::Empty(_))));
    let mut no_gt = scene(0, 8);
    no_gt.ground_truth = None;
    assert!(matches!(train(&mut model, &[no_gt], &tiny_config(0)), Err(Error::NoGroundTruth(_))));
}

#[test]
fn frozen_set_loss_decreases() {
    let (mut model, scenes, windows) = fixture(11);
    let corpus = Corpus::new(&tiny_arch(), &scenes, &windows).unwrap();
    let set = build(&model, &corpus, 11);
    let cfg = TrainConfig { batch_size: 8, learning_rate: 0.01, ..Default::default() };
    let mut trainer = Trainer {
        opt: OptimizerState::with_lr(model.param_count(), cfg.learning_rate),
        model: &mut model,
        corpus: &corpus,
        cfg: &cfg,
        rng: ChaCha8Rng::seed_from_u64(11),
    };
    let losses: Vec<f64> = (0..20).map(|_| trainer.epoch(&set, 0).unwrap()).collect();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&losses[15..]) < median(&losses[..5]), "{losses:?}");
}

#[test]
fn training_is_reproducible() {
    let scenes = vec![scene(21, 10), scene(22, 10)];
    let run = || {
        let mut model = ScorerModel::new(tiny_arch(), 4);
        let report = train(&mut model, &scenes, &tiny_config(4)).unwrap();
        let mut log = Vec::new();
        write_log(&mut log, &report.log).unwrap();
        (model.params, String::from_utf8(log).unwrap(), report)
    };
    let (p1, l1, r1) = run();
    let (p2, l2, _) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
    assert!(l1.starts_with(LOG_HEADER));
    assert_eq!(l1.lines().count(), 1 + r1.log.len());
    assert_eq!(r1.log.len(), r1.iterations + 3);
    assert!(r1.dataset_sizes.windows(2).all(|w| w[0] <= w[1]));
    assert!((1..=3).contains(&r1.best_epoch));
}

#[test]
fn near_ground_truth_mode_skips_building() {
    let scenes = vec![scene(30, 10)];
    let mut model = ScorerModel::new(tiny_arch(), 1);
    let cfg = TrainConfig { dataset: DatasetMode::NearGroundTruth, ..tiny_config(1) };
    let report = train(&mut model, &scenes, &cfg).unwrap();
    assert_eq!(report.iterations, 0);
    assert_eq!(report.log.len(), 3);
    assert_eq!("near-gt".parse::<DatasetMode>().unwrap(), DatasetMode::NearGroundTruth);
}

#[test]
fn divergence_restores_finite_weights() {
    let scenes = vec![scene(40, 8)];
    let mut model = ScorerModel::new(tiny_arch(), 1);
    let n = model.param_count();
    model.params[n - 1] = f64::NAN;
    assert!(matches!(train(&mut model, &scenes, &tiny_config(1)), Err(Error::Diverged { iteration: 0 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balanced_bins_are_equal(bins in proptest::collection::vec(0usize..10, 1..200), seed in 0u64..1000) {
        let out = balance(&bins, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut counts = [0usize; 10];
        for &i in &out {
            counts[bins[i]] += 1;
        }
        let nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        let smallest = (0..10).map(|b| bins.iter().filter(|&&x| x == b).count()).filter(|&c| c > 0).min().unwrap();
        prop_assert!(nonzero.iter().all(|&c| c == smallest));
        let present = (0..10).filter(|b| bins.contains(b)).count();
        prop_assert_eq!(nonzero.len(), present);
        let mut sorted = out.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), out.len());
    }
}

#[test]
fn training_windows_tile_the_scene() {
    assert_eq!(training_windows(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
    assert_eq!(training_windows(8, 4), vec![(0, 4), (4, 8)]);
    assert!(training_windows(0, 4).is_empty());
}
