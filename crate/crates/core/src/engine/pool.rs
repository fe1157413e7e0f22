use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::{BatchScorer, PruningMode};
use crate::error::{Error, Result};
use crate::tracklet::{merge, Detection, DetectionId, Tracklet, TrackletKey};

/// Deterministic ranking: higher score, then longer support, then the
/// lexicographically smaller detection id sequence comes first.
pub(crate) fn rank(a_score: f64, a: &Tracklet, b_score: f64, b: &Tracklet) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| b.support_len().cmp(&a.support_len()))
        .then_with(|| a.id_sequence().cmp(&b.id_sequence()))
}

#[derive(Debug, Clone, Default)]
pub struct HypothesisPool {
    frames: usize,
    tracklets: Vec<Tracklet>,
    keys: HashMap<TrackletKey, usize>,
    index: HashMap<DetectionId, Vec<usize>>,
    singletons: Vec<Vec<usize>>,
}

impl HypothesisPool {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            singletons: vec![Vec::new(); frames],
            ..Default::default()
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn into_tracklets(self) -> Vec<Tracklet> {
        self.tracklets
    }

    pub fn get(&self, i: usize) -> &Tracklet {
        &self.tracklets[i]
    }

    pub fn contains_key(&self, key: &TrackletKey) -> bool {
        self.keys.contains_key(key)
    }

    /// Pool indices of hypotheses containing detection `id`.
    pub fn containing(&self, id: DetectionId) -> &[usize] {
        self.index.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Adds a hypothesis unless an identical one is present. Returns its index when added.
    pub fn insert(&mut self, t: Tracklet) -> Result<Option<usize>> {
        if t.len() != self.frames {
            return Err(Error::LengthMismatch {
                left: self.frames,
                right: t.len(),
            });
        }
        if t.support_len() == 0 {
            return Ok(None);
        }
        let key = t.key();
        if self.keys.contains_key(&key) {
            return Ok(None);
        }
        let i = self.tracklets.len();
        for (n, c) in t.support() {
            self.index.entry(c.id).or_default().push(i);
            if t.support_len() == 1 {
                self.singletons[n].push(i);
            }
        }
        self.keys.insert(key, i);
        self.tracklets.push(t);
        Ok(Some(i))
    }

    /// Scores every hypothesis that has no cached score yet.
    pub fn score_missing(&mut self, scorer: &dyn BatchScorer) -> Result<()> {
        for t in &mut self.tracklets {
            if t.cached_score.is_none() {
                t.cached_score = Some(checked(scorer.score(t)?)?);
            }
        }
        Ok(())
    }

    /// All mergers of two pool hypotheses whose union holds exactly `n`
    /// detections and where the larger of the two holds `n − 1`.
    ///
    /// `scores` caches scores by merged key across calls.
    pub fn grow_step(&self, n: usize, scorer: &dyn BatchScorer, scores: &mut HashMap<TrackletKey, f64>) -> Result<Vec<Candidate>> {
        let mut out: Vec<Candidate> = Vec::new();
        let mut by_key: HashMap<TrackletKey, usize> = HashMap::new();
        if n < 2 {
            return Ok(out);
        }
        for (i, t1) in self.tracklets.iter().enumerate() {
            if t1.support_len() != n - 1 {
                continue;
            }
            let mut partners = BTreeSet::new();
            for (f, singles) in self.singletons.iter().enumerate() {
                if !t1.is_present(f) {
                    partners.extend(singles.iter().copied());
                }
            }
            for (_, c) in t1.support() {
                partners.extend(self.containing(c.id).iter().copied().filter(|&j| j != i && self.tracklets[j].support_len() < n));
            }
            for j in partners {
                let t2 = &self.tracklets[j];
                if t1.union_len(t2) != Some(n) {
                    continue;
                }
                let mut merged = merge(t1, t2)?;
                let key = merged.key();
                if let Some(&k) = by_key.get(&key) {
                    let cand: &mut Candidate = &mut out[k];
                    if !cand.sources.contains(&i) {
                        cand.sources.push(i);
                    }
                    continue;
                }
                if self.keys.contains_key(&key) {
                    // Already a hypothesis (for instance a seeded trajectory); nothing new to add.
                    continue;
                }
                let s = match scores.get(&key) {
                    Some(&s) => s,
                    None => {
                        let s = checked(scorer.score(&merged)?)?;
                        scores.insert(key.clone(), s);
                        s
                    }
                };
                merged.cached_score = Some(s);
                by_key.insert(key, out.len());
                out.push(Candidate {
                    tracklet: merged,
                    score: s,
                    sources: vec![i],
                });
            }
        }
        Ok(out)
    }

    /// Inserts the retained mergers chosen from `candidates`; returns how many were new.
    pub fn prune_step(&mut self, candidates: &[Candidate], mode: PruningMode, sampler: Option<&mut MergeSampler<'_>>) -> Result<usize> {
        let keep = retained(candidates, mode, sampler)?;
        let mut added = 0;
        for k in keep {
            if self.insert(candidates[k].tracklet.clone())?.is_some() {
                added += 1;
            }
        }
        Ok(added)
    }
}

fn checked(s: f64) -> Result<f64> {
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite("tracklet score".into()))
    }
}

/// A scored merger of two pool hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tracklet: Tracklet,
    pub score: f64,
    /// Pool indices of the larger parent(s), i.e. the source tracklets this merger extends.
    pub sources: Vec<usize>,
}

/// Randomised retention used while building training data: each source keeps
/// a merger drawn with probability `softmax(temperature · score)`.
pub struct MergeSampler<'a> {
    pub rng: &'a mut dyn rand::RngCore,
    pub temperature: f64,
}

impl MergeSampler<'_> {
    pub fn choose(&mut self, scores: &[f64]) -> Result<usize> {
        softmax_choice(scores, self.temperature, &mut self.rng)
    }
}

/// Samples index `i` with probability `softmax(temperature · scores)_i`.
pub fn softmax_choice<R: Rng + ?Sized>(scores: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
    }
    if scores.len() == 1 {
        return Ok(0);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (temperature * (s - max)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
}

/// Indices (ascending) of the candidates kept under `mode`.
fn retained(candidates: &[Candidate], mode: PruningMode, sampler: Option<&mut MergeSampler<'_>>) -> Result<Vec<usize>> {
    let mut keep = BTreeSet::new();
    match mode {
        PruningMode::PerSource => {
            let mut per_source: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (k, c) in candidates.iter().enumerate() {
                for &s in &c.sources {
                    per_source.entry(s).or_default().push(k);
                }
            }
            let mut sampler = sampler;
            for (_, ks) in per_source {
                let chosen = match sampler.as_deref_mut() {
                    Some(smp) => {
                        let scores: Vec<f64> = ks.iter().map(|&k| candidates[k].score).collect();
                        ks[smp.choose(&scores)?]
                    }
                    None => *ks
                        .iter()
                        .min_by(|&&a, &&b| rank(candidates[a].score, &candidates[a].tracklet, candidates[b].score, &candidates[b].tracklet))
                        .expect("non-empty"),
                };
                keep.insert(chosen);
            }
        }
        PruningMode::ByScore { cutoff } => {
            keep.extend(candidates.iter().enumerate().filter(|(_, c)| c.score >= cutoff).map(|(k, _)| k));
        }
        PruningMode::ByCount { keep: count } => {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| rank(candidates[a].score, &candidates[a].tracklet, candidates[b].score, &candidates[b].tracklet));
            keep.extend(order.into_iter().take(count));
        }
    }
    Ok(keep.into_iter().collect())
}

/// One single-detection hypothesis per detection.
pub fn init_pool(frames: &[Vec<Detection>]) -> HypothesisPool {
    let mut pool = HypothesisPool::new(frames.len());
    for (n, frame) in frames.iter().enumerate() {
        for d in frame {
            pool.insert(Tracklet::single(frames.len(), n, d)).expect("lengths agree");
        }
    }
    pool
}

pub struct GenerateOptions<'a> {
    pub pruning: PruningMode,
    pub fast_cutoff: Option<f64>,
    pub sampler: Option<MergeSampler<'a>>,
    /// Called on every scored merger before cutoff and pruning.
    pub observer: Option<&'a mut dyn FnMut(&Candidate)>,
}

impl GenerateOptions<'_> {
    pub fn new(pruning: PruningMode, fast_cutoff: Option<f64>) -> Self {
        Self {
            pruning,
            fast_cutoff,
            sampler: None,
            observer: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthStats {
    /// Mergers scored at each growth step `n = 2..=N`.
    pub candidates: Vec<usize>,
    /// Pool size after each step.
    pub pool_sizes: Vec<usize>,
}

/// Alternates growing and pruning for `n = 2..=N`.
pub fn generate(pool: &mut HypothesisPool, scorer: &dyn BatchScorer, mut opts: GenerateOptions<'_>) -> Result<GrowthStats> {
    pool.score_missing(scorer)?;
    let mut stats = GrowthStats::default();
    let mut scores = HashMap::new();
    for n in 2..=pool.frames() {
        let mut candidates = pool.grow_step(n, scorer, &mut scores)?;
        if let Some(obs) = opts.observer.as_deref_mut() {
            candidates.iter().for_each(|c| obs(c));
        }
        stats.candidates.push(candidates.len());
        if let Some(cut) = opts.fast_cutoff {
            candidates.retain(|c| c.score >= cut);
        }
        pool.prune_step(&candidates, opts.pruning, opts.sampler.as_mut())?;
        stats.pool_sizes.push(pool.len());
    }
    Ok(stats)
}
