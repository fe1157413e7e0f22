//! Seeded synthetic pedestrian scenes with a noisy detector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, EMBEDDING_DIM};
use crate::geometry::BoundingBox;
use crate::sequence::SequenceBundle;
use crate::tracklet::{Detection, DetectionId, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Everyone walks the same way along separate lanes.
    Linear,
    /// Alternate people walk in opposite directions along nearby lanes, so paths cross.
    Crossing,
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Pattern::Linear),
            "crossing" => Ok(Pattern::Crossing),
            _ => Err(Error::InvalidParameter(format!("unknown pattern {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub persons: usize,
    pub frames: usize,
    pub pattern: Pattern,
    /// Standard deviation of the detector's box jitter, pixels.
    pub noise_sigma: f64,
    /// Probability that a person's box in a frame is not detected.
    pub miss_rate: f64,
    /// Expected spurious detections per ground-truth box.
    pub fp_rate: f64,
    pub seed: u64,
    pub fps: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Walking speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Also emit per-detection appearance vectors.
    pub appearance: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            persons: 4,
            frames: 24,
            pattern: Pattern::Crossing,
            noise_sigma: 2.0,
            miss_rate: 0.1,
            fp_rate: 0.05,
            seed: 0,
            fps: 2.0,
            image_width: 800.0,
            image_height: 600.0,
            speed: (12.0, 24.0),
            appearance: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.miss_rate) || !unit(self.fp_rate) {
            return Err(Error::InvalidParameter(format!(
                "miss and false-positive rates must lie in [0, 1], got {} and {}",
                self.miss_rate, self.fp_rate
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !(self.fps > 0.0 && self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidParameter("fps and image size must be positive".into()));
        }
        if !(self.speed.0 >= 0.0 && self.speed.1 >= self.speed.0) {
            return Err(Error::InvalidParameter("speed range must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates the ground truth, then a detector's view of it.
pub fn synth_scene(spec: &SynthSpec) -> Result<SequenceBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h, n) = (spec.image_width, spec.image_height, spec.frames);
    let mut gt = Vec::with_capacity(spec.persons);
    let mut looks = Vec::with_capacity(spec.persons);
    let lane_band = h * 0.3;
    for p in 0..spec.persons {
        let bw = rng.random_range(0.05..0.08) * w;
        let bh = bw * rng.random_range(2.2..2.8);
        let rightward = match spec.pattern {
            Pattern::Linear => true,
            Pattern::Crossing => p % 2 == 0,
        };
        let lane = match spec.pattern {
            Pattern::Linear => h * 0.1 + (p as f64 + 0.5) * (h * 0.8 - bh) / spec.persons.max(1) as f64,
            Pattern::Crossing => h * 0.5 - bh * 0.5 + rng.random_range(-lane_band..lane_band) * 0.5,
        };
        let speed = rng.random_range(spec.speed.0..=spec.speed.1);
        let vy = rng.random_range(-0.1..0.1) * speed;
        let vx = if rightward { speed } else { -speed };
        // Place the person so their path crosses the middle of the scene.
        let appear = if n > 3 { rng.random_range(0..=n / 4) } else { 0 };
        let leave = if n > 3 { rng.random_range((3 * n / 4).max(appear + 1)..=n) } else { n };
        let mid = (appear + leave) as f64 / 2.0;
        let center_x = w * 0.5 + rng.random_range(-0.2..0.2) * w;
        let mut traj = Trajectory::new(p as u32 + 1, n);
        for f in appear..leave {
            let dt = f as f64 - mid;
            let left = center_x + vx * dt - bw / 2.0;
            let top = lane + vy * dt;
            if left + bw <= 0.0 || left >= w || top + bh <= 0.0 || top >= h {
                continue;
            }
            traj.columns[f] = BoundingBox::new(left, top, bw, bh);
        }
        gt.push(traj);
        looks.push(unit_vector(&mut rng));
    }

    let jitter = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let appearance_noise = Normal::new(0.0, 0.15).expect("valid");
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); n];
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut raw: Vec<Vec<(BoundingBox, f64, Vec<f64>)>> = vec![Vec::new(); n];
    for (f, slot) in raw.iter_mut().enumerate() {
        for (p, g) in gt.iter().enumerate() {
            if !g.is_present(f) {
                continue;
            }
            if rng.random::<f64>() >= spec.miss_rate {
                let b = g.columns[f];
                let noisy = if spec.noise_sigma > 0.0 {
                    BoundingBox::new(
                        b.left + jitter.sample(&mut rng),
                        b.top + jitter.sample(&mut rng),
                        (b.width + jitter.sample(&mut rng)).max(1.0),
                        (b.height + jitter.sample(&mut rng)).max(1.0),
                    )
                } else {
                    b
                };
                let look = looks[p].iter().map(|x| x + appearance_noise.sample(&mut rng)).collect();
                slot.push((noisy, rng.random_range(0.6..1.0), look));
            }
            if rng.random::<f64>() < spec.fp_rate {
                let bw = rng.random_range(0.04..0.08) * w;
                let bh = bw * rng.random_range(2.0..3.0);
                let b = BoundingBox::new(rng.random_range(0.0..w - bw), rng.random_range(0.0..h - bh), bw, bh);
                slot.push((b, rng.random_range(0.3..0.9), unit_vector(&mut rng)));
            }
        }
        // Detector output order carries no identity information.
        slot.shuffle(&mut rng);
    }
    let mut next = 0u32;
    for (f, slot) in raw.into_iter().enumerate() {
        for (b, conf, look) in slot {
            frames[f].push(Detection::new(f, b, conf, DetectionId(next)));
            vectors.push(look);
            next += 1;
        }
    }
    let mut bundle = SequenceBundle::new(frames, spec.fps, w, h);
    bundle.ground_truth = Some(gt);
    if spec.appearance {
        let mut table = EmbeddingTable::new();
        for (i, v) in vectors.into_iter().enumerate() {
            table.insert(i as u32, v.into_iter().map(|x| x as f32).collect())?;
        }
        bundle.embeddings = Some(table);
    }
    Ok(bundle)
}

/// The synthetic suite: `count` scenes with person counts cycling over `persons`.
pub fn synth_suite(base: &SynthSpec, count: usize, persons: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Vec<SequenceBundle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = SynthSpec {
                persons: rng.random_range(persons.clone()),
                seed: rng.random(),
                ..base.clone()
            };
            synth_scene(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_detections_equal_ground_truth() {
        let s = synth_scene(&SynthSpec {
            noise_sigma: 0.0,
            miss_rate: 0.0,
            fp_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        let gt = s.ground_truth.as_ref().unwrap();
        for (f, frame) in s.frames.iter().enumerate() {
            let mut dets: Vec<[u64; 4]> = frame.iter().map(|d| d.bbox.to_array().map(f64::to_bits)).collect();
            let mut truth: Vec<[u64; 4]> = gt.iter().filter(|g| g.is_present(f)).map(|g| g.columns[f].to_array().map(f64::to_bits)).collect();
            dets.sort();
            truth.sort();
            assert_eq!(dets, truth);
        }
    }

    #[test]
    fn full_miss_rate_yields_no_detections() {
        let s = synth_scene(&SynthSpec {
            miss_rate: 1.0,
            fp_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.detection_count(), 0);
    }

    #[test]
    fn miss_fraction_within_binomial_bounds() {
        let rate = 0.3;
        let s = synth_scene(&SynthSpec {
            persons: 100,
            frames: 200,
            miss_rate: rate,
            fp_rate: 0.0,
            pattern: Pattern::Linear,
            speed: (0.0, 0.0),
            ..Default::default()
        })
        .unwrap();
        let slots: usize = s.ground_truth.as_ref().unwrap().iter().map(Trajectory::support_len).sum();
        assert!(slots >= 10_000, "{slots}");
        let missed = slots - s.detection_count();
        let sd = (slots as f64 * rate * (1.0 - rate)).sqrt();
        assert!((missed as f64 - slots as f64 * rate).abs() < 3.0 * sd);
    }

    #[test]
    fn invalid_rates_rejected_and_seeded() {
        assert!(synth_scene(&SynthSpec { miss_rate: 1.5, ..Default::default() }).is_err());
        assert!(synth_scene(&SynthSpec { fp_rate: -0.1, ..Default::default() }).is_err());
        let a = synth_scene(&SynthSpec { appearance: true, ..Default::default() }).unwrap();
        let b = synth_scene(&SynthSpec { appearance: true, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }
}
