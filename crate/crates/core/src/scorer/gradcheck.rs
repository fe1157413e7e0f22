//! Finite-difference verification of [`ScorerModel::loss_and_grad`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, FrameTargets, ScorerModel};
use crate::error::Result;
use crate::features::FeatureTensor;
use crate::geometry::BoundingBox;
use crate::tracklet::{Cell, DetectionId, Trajectory, Tracklet};

/// Instances whose shifted boxes lie within this many pixels of an IoU
/// breakpoint are resampled: the loss is not differentiable there and a
/// central difference straddling the breakpoint measures nothing useful.
pub const KINK_MARGIN_PX: f64 = 1.0;

/// Denominator floor for the relative error, so parameters whose true
/// gradient is numerically zero are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
    /// Tensor name and offset of the worst parameter.
    pub worst: (&'static str, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Instances drawn before one without nearby breakpoints was found.
    pub attempts: u32,
}

/// A random mini-batch of two sequences with tracklets, ground truth and features.
pub fn random_instance(arch: &Architecture, seed: u64, max_frames: usize) -> Vec<(FeatureTensor, FrameTargets)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (1000.0, 800.0);
    (0..2)
        .map(|_| {
            let n = rng.random_range(1..=max_frames.max(1));
            let mut t = Tracklet::empty(n);
            let mut g = Trajectory::new(1, n);
            let mut next_id = 0;
            for k in 0..n {
                let gt = BoundingBox::new(rng.random_range(0.0..800.0), rng.random_range(0.0..600.0), rng.random_range(40.0..120.0), rng.random_range(80.0..200.0));
                if rng.random_bool(0.8) {
                    g.columns[k] = gt;
                }
                if rng.random_bool(0.7) {
                    let jitter = |r: &mut ChaCha8Rng| r.random_range(-15.0..15.0);
                    let d = BoundingBox::new(gt.left + jitter(&mut rng), gt.top + jitter(&mut rng), gt.width + jitter(&mut rng), gt.height + jitter(&mut rng));
                    t.set(
                        k,
                        Some(Cell {
                            id: DetectionId(next_id),
                            bbox: d,
                            confidence: rng.random_range(0.0..1.0),
                        }),
                    );
                    next_id += 1;
                }
            }
            let dim = arch.feature_dim();
            let presence: Vec<bool> = (0..n).map(|k| t.is_present(k)).collect();
            let values = (0..n * dim)
                .map(|i| if presence[i / dim] { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let x = FeatureTensor::from_parts(dim, values, presence).expect("consistent shapes");
            (x, FrameTargets::new(&t, Some(&g), w, h))
        })
        .collect()
}

/// Compares every analytic gradient entry against a central difference with step `step`.
pub fn gradient_check(arch: Architecture, seed: u64, max_frames: usize, step: f64) -> Result<GradCheckReport> {
    let model = ScorerModel::new(arch, seed);
    let mut attempts = 0u32;
    let inst = loop {
        attempts += 1;
        let inst = random_instance(&arch, (seed ^ 0x9e37_79b9).wrapping_add(u64::from(attempts) << 32), max_frames);
        let xs: Vec<&FeatureTensor> = inst.iter().map(|(x, _)| x).collect();
        let preds = model.forward_batch(&xs)?;
        if preds.iter().zip(&inst).all(|(p, (_, t))| breakpoint_margin(p, t) > KINK_MARGIN_PX) {
            break inst;
        }
    };
    let batch: Vec<(&FeatureTensor, &FrameTargets)> = inst.iter().map(|(x, t)| (x, t)).collect();
    let analytic = model.loss_and_grad(&batch)?.grads;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        seed,
        params: analytic.len(),
        max_rel_error: 0.0,
        worst: ("", 0),
        analytic: 0.0,
        numeric: 0.0,
        attempts,
    };
    for i in 0..analytic.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + step;
        let up = probe.batch_loss(&batch)?;
        probe.params[i] = orig - step;
        let down = probe.batch_loss(&batch)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if rel > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = rel;
            report.worst = model.layout().locate(i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Smallest pixel distance between a shifted box and any point where the
/// shift loss changes its piecewise form.
fn breakpoint_margin(preds: &[super::FramePrediction], t: &FrameTargets) -> f64 {
    let mut margin = f64::INFINITY;
    for (n, p) in preds.iter().enumerate() {
        let (d, g) = (&t.det_boxes[n], &t.gt_boxes[n]);
        if d.is_absent() || g.is_absent() {
            continue;
        }
        let s = [d.left + p.sft[0] * t.scale[0], d.top + p.sft[1] * t.scale[1], d.width + p.sft[2] * t.scale[2], d.height + p.sft[3] * t.scale[3]];
        let (l, r, top, b) = (s[0], s[0] + s[2].max(0.0), s[1], s[1] + s[3].max(0.0));
        for gap in [
            s[2],
            s[3],
            l - g.left,
            r - g.right(),
            l - g.right(),
            r - g.left,
            top - g.top,
            b - g.bottom(),
            top - g.bottom(),
            b - g.top,
        ] {
            margin = margin.min(gap.abs());
        }
    }
    margin
}

/// Small architecture used by the gradient oracle.
pub fn gradcheck_architecture() -> Architecture {
    Architecture {
        neighbors: 1,
        use_appearance: false,
        embed_dim: 5,
        hidden: 4,
    }
}
