//! Per-frame tracklet features: geometry, social context and (optionally) appearance.
//!
//! Every present frame of a tracklet yields one column of `F = 13 + 3M`
//! geometric values, followed by `132` appearance values when enabled.
//! Absent frames yield zero columns with `presence = false`.

mod embedding;

use std::collections::HashMap;

pub use embedding::{EmbeddingTable, EMBEDDING_DIM};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tracklet::{Detection, DetectionId, Tracklet};

/// Box coordinates + confidence, and shifts to the previous and next detection.
pub const BASE_CHANNELS: usize = 13;
/// Embedding, distance to the trajectory representative, 3 crowd-density distances.
pub const APPEARANCE_CHANNELS: usize = EMBEDDING_DIM + 1 + CROWD_RANKS.len();
/// 1-based neighbor ranks used by the crowd-density channels.
pub const CROWD_RANKS: [usize; 3] = [1, 5, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Number of nearest detections described by the social feature (`M`).
    pub neighbors: usize,
    pub use_appearance: bool,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            neighbors: 4,
            use_appearance: false,
            image_width: 1920.0,
            image_height: 1080.0,
        }
    }
}

impl FeatureConfig {
    pub fn geometric_dim(&self) -> usize {
        BASE_CHANNELS + 3 * self.neighbors
    }

    /// Feature dimension `F`.
    pub fn dim(&self) -> usize {
        self.geometric_dim() + if self.use_appearance { APPEARANCE_CHANNELS } else { 0 }
    }

    pub fn diagonal(&self) -> f64 {
        self.image_width.hypot(self.image_height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::InvalidParameter("neighbor count M must be at least 1".into()));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        Ok(())
    }

    fn scale(&self) -> [f64; 4] {
        [
            self.image_width,
            self.image_height,
            self.image_width,
            self.image_height,
        ]
    }
}

/// `frames × dim` feature matrix plus the presence mask of the tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    dim: usize,
    values: Vec<f64>,
    presence: Vec<bool>,
}

impl FeatureTensor {
    pub fn zeros(dim: usize, frames: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * frames],
            presence: vec![false; frames],
        }
    }

    pub fn from_parts(dim: usize, values: Vec<f64>, presence: Vec<bool>) -> Result<Self> {
        if values.len() != dim * presence.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} frames of dimension {dim}",
                values.len(),
                presence.len()
            )));
        }
        Ok(Self {
            dim,
            values,
            presence,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.presence.len()
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    /// Feature column of frame `n`.
    pub fn frame(&self, n: usize) -> &[f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.dim..(n + 1) * self.dim]
    }

    pub fn get(&self, channel: usize, n: usize) -> f64 {
        self.values[n * self.dim + channel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stacks the channels of `other` below the channels of `self`.
    pub fn concat(&self, other: &FeatureTensor) -> Result<FeatureTensor> {
        if self.frames() != other.frames() {
            return Err(Error::Dimension(format!(
                "cannot stack {} frames onto {}",
                other.frames(),
                self.frames()
            )));
        }
        let dim = self.dim + other.dim;
        let mut values = Vec::with_capacity(dim * self.frames());
        for n in 0..self.frames() {
            values.extend_from_slice(self.frame(n));
            values.extend_from_slice(other.frame(n));
        }
        Ok(FeatureTensor {
            dim,
            values,
            presence: self.presence.clone(),
        })
    }
}

/// Neighbors of `own` among `dets`, nearest first by center distance (ties by id).
fn nearest<'a>(own: &BoundingBox, own_id: DetectionId, dets: &'a [Detection]) -> Vec<(f64, &'a Detection)> {
    let mut out: Vec<(f64, &Detection)> = dets
        .iter()
        .filter(|d| d.id != own_id)
        .map(|d| (own.center_distance(&d.bbox), d))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    out
}

fn social_channels(own: &BoundingBox, own_id: DetectionId, dets: &[Detection], cfg: &FeatureConfig, out: &mut [f64]) {
    let (cx, cy) = own.center();
    for (k, (_, d)) in nearest(own, own_id, dets).into_iter().take(cfg.neighbors).enumerate() {
        let (nx, ny) = d.bbox.center();
        out[3 * k] = (nx - cx) / cfg.image_width;
        out[3 * k + 1] = (ny - cy) / cfg.image_height;
        out[3 * k + 2] = d.confidence;
    }
}

fn crowd_channels(own: &BoundingBox, own_id: DetectionId, dets: &[Detection], cfg: &FeatureConfig, out: &mut [f64]) {
    let diag = cfg.diagonal();
    let near = nearest(own, own_id, dets);
    for (k, &rank) in CROWD_RANKS.iter().enumerate() {
        out[k] = near.get(rank - 1).map_or(1.0, |(dist, _)| dist / diag);
    }
}

fn check_frames(t: &Tracklet, frames: &[Vec<Detection>]) -> Result<()> {
    if frames.len() != t.len() {
        return Err(Error::FrameCountMismatch {
            expected: t.len(),
            actual: frames.len(),
        });
    }
    Ok(())
}

fn write_geometric(t: &Tracklet, n: usize, cfg: &FeatureConfig, social: impl FnOnce(&mut [f64]), col: &mut [f64]) {
    let cell = t.cell(n).expect("present frame");
    let scale = cfg.scale();
    let b = cell.bbox.to_array();
    for k in 0..4 {
        col[k] = b[k] / scale[k];
    }
    col[4] = cell.confidence;
    if let Some(prev) = (0..n).rev().find_map(|m| t.cell(m)) {
        let p = prev.bbox.to_array();
        for k in 0..4 {
            col[5 + k] = (b[k] - p[k]) / scale[k];
        }
    }
    if let Some(next) = (n + 1..t.len()).find_map(|m| t.cell(m)) {
        let q = next.bbox.to_array();
        for k in 0..4 {
            col[9 + k] = (q[k] - b[k]) / scale[k];
        }
    }
    social(&mut col[BASE_CHANNELS..BASE_CHANNELS + 3 * cfg.neighbors]);
}

/// Geometric channels (`13 + 3M` per frame) of a tracklet.
///
/// `frame_detections[n]` holds every raw detection of batch frame `n`; the
/// tracklet's own detection is excluded from its social neighbors.
pub fn geometric_features(
    t: &Tracklet,
    frame_detections: &[Vec<Detection>],
    cfg: &FeatureConfig,
) -> Result<FeatureTensor> {
    check_frames(t, frame_detections)?;
    let dim = cfg.geometric_dim();
    let mut out = FeatureTensor::zeros(dim, t.len());
    for n in 0..t.len() {
        let Some(cell) = t.cell(n) else { continue };
        out.presence[n] = true;
        let col = out.frame_mut(n);
        write_geometric(t, n, cfg, |s| social_channels(&cell.bbox, cell.id, &frame_detections[n], cfg, s), col);
    }
    Ok(out)
}

fn detection_in<'a>(frame: &'a [Detection], id: DetectionId) -> Option<&'a Detection> {
    frame.iter().find(|d| d.id == id)
}

fn embedding_of(emb: &EmbeddingTable, frame: &[Detection], id: DetectionId) -> Result<Vec<f64>> {
    let key = detection_in(frame, id).map_or(id.0, Detection::embedding_key);
    emb.get(key)
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .ok_or(Error::MissingEmbedding(id))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Appearance channels (`132` per frame): the embedding, its distance to the
/// trajectory representative (`history_vec`, zero when absent), and crowd density.
pub fn appearance_features(
    t: &Tracklet,
    emb: &EmbeddingTable,
    history_vec: Option<&[f64]>,
    frame_detections: &[Vec<Detection>],
    cfg: &FeatureConfig,
) -> Result<FeatureTensor> {
    check_frames(t, frame_detections)?;
    let mut out = FeatureTensor::zeros(APPEARANCE_CHANNELS, t.len());
    for n in 0..t.len() {
        let Some(cell) = t.cell(n) else { continue };
        out.presence[n] = true;
        let v = embedding_of(emb, &frame_detections[n], cell.id)?;
        let col = out.frame_mut(n);
        col[..EMBEDDING_DIM].copy_from_slice(&v);
        col[EMBEDDING_DIM] = history_vec.map_or(0.0, |h| euclidean(&v, h));
        crowd_channels(&cell.bbox, cell.id, &frame_detections[n], cfg, &mut col[EMBEDDING_DIM + 1..]);
    }
    Ok(out)
}

/// Medoid of `vectors` under Euclidean distance; ties go to the lowest index.
pub fn representative_embedding(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::Empty("representative_embedding needs at least one vector"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, v) in vectors.iter().enumerate() {
        let total: f64 = vectors.iter().map(|w| euclidean(v, w)).sum();
        if total < best.0 {
            best = (total, i);
        }
    }
    Ok(vectors[best.1].clone())
}

/// Feature computation for many tracklets over one batch of frames.
///
/// Social and crowd channels of unshifted detections are computed once and
/// reused; tracklets whose boxes were regressed fall back to direct evaluation.
pub struct FeatureExtractor<'a> {
    cfg: FeatureConfig,
    frames: &'a [Vec<Detection>],
    embeddings: Option<&'a EmbeddingTable>,
    context: HashMap<DetectionId, ContextEntry>,
}

struct ContextEntry {
    bbox: BoundingBox,
    social: Vec<f64>,
    crowd: [f64; 3],
    embedding: Option<Vec<f64>>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(cfg: FeatureConfig, frames: &'a [Vec<Detection>], embeddings: Option<&'a EmbeddingTable>) -> Result<Self> {
        cfg.validate()?;
        if cfg.use_appearance && embeddings.is_none() {
            return Err(Error::InvalidParameter(
                "appearance features requested without an embedding table".into(),
            ));
        }
        let mut context = HashMap::new();
        for frame in frames {
            for d in frame {
                let mut social = vec![0.0; 3 * cfg.neighbors];
                social_channels(&d.bbox, d.id, frame, &cfg, &mut social);
                let mut crowd = [0.0; 3];
                crowd_channels(&d.bbox, d.id, frame, &cfg, &mut crowd);
                let embedding = match (cfg.use_appearance, embeddings) {
                    (true, Some(table)) => Some(embedding_of(table, frame, d.id)?),
                    _ => None,
                };
                context.insert(
                    d.id,
                    ContextEntry {
                        bbox: d.bbox,
                        social,
                        crowd,
                        embedding,
                    },
                );
            }
        }
        Ok(Self {
            cfg,
            frames,
            embeddings,
            context,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn frames(&self) -> &'a [Vec<Detection>] {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Full feature tensor (geometric, then appearance when enabled).
    pub fn features(&self, t: &Tracklet, history_vec: Option<&[f64]>) -> Result<FeatureTensor> {
        check_frames(t, self.frames)?;
        let cfg = &self.cfg;
        let geo = cfg.geometric_dim();
        let mut out = FeatureTensor::zeros(cfg.dim(), t.len());
        for n in 0..t.len() {
            let Some(cell) = t.cell(n) else { continue };
            out.presence[n] = true;
            let entry = self.context.get(&cell.id).filter(|e| e.bbox == cell.bbox);
            let frame = &self.frames[n];
            let col = out.frame_mut(n);
            write_geometric(
                t,
                n,
                cfg,
                |s| match entry {
                    Some(e) => s.copy_from_slice(&e.social),
                    None => social_channels(&cell.bbox, cell.id, frame, cfg, s),
                },
                &mut col[..geo],
            );
            if cfg.use_appearance {
                let app = &mut col[geo..];
                let v = match entry.and_then(|e| e.embedding.clone()) {
                    Some(v) => v,
                    None => embedding_of(self.embeddings.expect("checked in new"), frame, cell.id)?,
                };
                app[..EMBEDDING_DIM].copy_from_slice(&v);
                app[EMBEDDING_DIM] = history_vec.map_or(0.0, |h| euclidean(&v, h));
                match entry {
                    Some(e) => app[EMBEDDING_DIM + 1..].copy_from_slice(&e.crowd),
                    None => crowd_channels(&cell.bbox, cell.id, frame, cfg, &mut app[EMBEDDING_DIM + 1..]),
                }
            }
        }
        Ok(out)
    }

    pub fn embedding(&self, id: DetectionId) -> Option<&[f64]> {
        self.context.get(&id).and_then(|e| e.embedding.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracklet::Cell;
    use proptest::prelude::*;

    fn det(frame: usize, id: u32, l: f64, t: f64, conf: f64) -> Detection {
        Detection::new(frame, BoundingBox::new(l, t, 10.0, 20.0), conf, DetectionId(id))
    }

    fn track_of(frames: &[Vec<Detection>], picks: &[Option<u32>]) -> Tracklet {
        let cells = picks
            .iter()
            .zip(frames)
            .map(|(p, f)| p.map(|id| Cell::from(f.iter().find(|d| d.id.0 == id).unwrap())))
            .collect();
        Tracklet::from_cells(cells)
    }

    fn cfg(m: usize) -> FeatureConfig {
        FeatureConfig {
            neighbors: m,
            use_appearance: false,
            image_width: 100.0,
            image_height: 100.0,
        }
    }

    #[test]
    fn stationary_tracklet_without_neighbors() {
        let frames: Vec<Vec<Detection>> = (0..3).map(|f| vec![det(f, f as u32, 10.0, 10.0, 0.8)]).collect();
        let t = track_of(&frames, &[Some(0), Some(1), Some(2)]);
        let x = geometric_features(&t, &frames, &cfg(2)).unwrap();
        assert_eq!(x.dim(), 13 + 6);
        for n in 0..3 {
            assert!(x.frame(n)[5..].iter().all(|&v| v == 0.0));
            assert_eq!(&x.frame(n)[..5], &[0.1, 0.1, 0.1, 0.2, 0.8]);
        }
    }

    #[test]
    fn social_offset_is_normalized() {
        let frames = vec![vec![det(0, 0, 10.0, 10.0, 1.0), det(0, 1, 20.0, 30.0, 0.9)]];
        let t = track_of(&frames, &[Some(0)]);
        let x = geometric_features(&t, &frames, &cfg(1)).unwrap();
        assert_eq!(&x.frame(0)[13..16], &[0.1, 0.2, 0.9]);
    }

    #[test]
    fn boundary_frames_have_zero_shift() {
        let frames: Vec<Vec<Detection>> = (0..3).map(|f| vec![det(f, f as u32, 10.0 * f as f64, 0.0, 1.0)]).collect();
        let t = track_of(&frames, &[Some(0), None, Some(2)]);
        let x = geometric_features(&t, &frames, &cfg(1)).unwrap();
        assert!(x.frame(0)[5..9].iter().all(|&v| v == 0.0));
        assert_eq!(x.frame(0)[9], 0.2);
        assert_eq!(x.frame(2)[5], 0.2);
        assert!(x.frame(2)[9..13].iter().all(|&v| v == 0.0));
        assert!(!x.presence()[1]);
        assert!(x.frame(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_mismatch() {
        let frames = vec![vec![det(0, 0, 0.0, 0.0, 1.0)]];
        let t = Tracklet::empty(2);
        assert!(matches!(
            geometric_features(&t, &frames, &cfg(1)),
            Err(Error::FrameCountMismatch { expected: 2, actual: 1 })
        ));
    }

    fn table_for(frames: &[Vec<Detection>], f: impl Fn(u32) -> f32) -> EmbeddingTable {
        let mut table = EmbeddingTable::new();
        for d in frames.iter().flatten() {
            table.insert(d.id.0, vec![f(d.id.0); EMBEDDING_DIM]).unwrap();
        }
        table
    }

    #[test]
    fn appearance_distance_channel() {
        let frames = vec![vec![det(0, 0, 0.0, 0.0, 1.0)], vec![det(1, 1, 0.0, 0.0, 1.0)]];
        let table = table_for(&frames, |id| id as f32);
        let t = track_of(&frames, &[Some(0), Some(1)]);
        let c = cfg(1);
        let hist = vec![1.0; EMBEDDING_DIM];
        let x = appearance_features(&t, &table, Some(&hist), &frames, &c).unwrap();
        assert_eq!(x.get(EMBEDDING_DIM, 1), 0.0);
        assert!((x.get(EMBEDDING_DIM, 0) - (EMBEDDING_DIM as f64).sqrt()).abs() < 1e-12);
        let cold = appearance_features(&t, &table, None, &frames, &c).unwrap();
        assert_eq!(cold.get(EMBEDDING_DIM, 0), 0.0);
        assert_eq!(cold.get(EMBEDDING_DIM, 1), 0.0);
    }

    #[test]
    fn crowd_density_pads_missing_ranks() {
        let frame: Vec<Detection> = (0..7).map(|i| det(0, i, 7.0 * i as f64, 3.0 * i as f64, 1.0)).collect();
        let frames = vec![frame.clone()];
        let table = table_for(&frames, |_| 0.0);
        let t = track_of(&frames, &[Some(2)]);
        let c = cfg(1);
        let x = appearance_features(&t, &table, None, &frames, &c).unwrap();
        // Brute-force scan of the other six detections.
        let own = frame[2].bbox;
        let mut dists: Vec<f64> = frame.iter().filter(|d| d.id.0 != 2).map(|d| own.center_distance(&d.bbox)).collect();
        dists.sort_by(f64::total_cmp);
        let diag = c.diagonal();
        assert!((x.get(EMBEDDING_DIM + 1, 0) - dists[0] / diag).abs() < 1e-12);
        assert!((x.get(EMBEDDING_DIM + 2, 0) - dists[4] / diag).abs() < 1e-12);
        assert_eq!(x.get(EMBEDDING_DIM + 3, 0), 1.0);
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let frames = vec![vec![det(0, 5, 0.0, 0.0, 1.0)]];
        let t = track_of(&frames, &[Some(5)]);
        let table = EmbeddingTable::new();
        assert!(matches!(
            appearance_features(&t, &table, None, &frames, &cfg(1)),
            Err(Error::MissingEmbedding(DetectionId(5)))
        ));
    }

    #[test]
    fn representative_examples() {
        assert_eq!(representative_embedding(&[vec![3.0, 4.0]]).unwrap(), vec![3.0, 4.0]);
        let v: Vec<Vec<f64>> = vec![vec![0.0], vec![0.0], vec![10.0]];
        // Pairwise sums: 10, 10, 20.
        let sums: Vec<f64> = v.iter().map(|a| v.iter().map(|b| (a[0] - b[0]).abs()).sum()).collect();
        assert_eq!(sums, vec![10.0, 10.0, 20.0]);
        assert_eq!(representative_embedding(&v).unwrap(), vec![0.0]);
        assert!(representative_embedding(&[]).is_err());
    }

    #[test]
    fn extractor_matches_direct_functions() {
        let frames: Vec<Vec<Detection>> = (0..4)
            .map(|f| (0..5).map(|i| det(f, (f * 10 + i) as u32, 13.0 * i as f64 + f as f64, 7.0 * i as f64, 0.5 + 0.1 * i as f64)).collect())
            .collect();
        let table = table_for(&frames, |id| (id % 7) as f32 * 0.25);
        let t = track_of(&frames, &[Some(1), None, Some(21), Some(32)]);
        let mut c = cfg(3);
        c.use_appearance = true;
        let ex = FeatureExtractor::new(c.clone(), &frames, Some(&table)).unwrap();
        let hist = vec![0.5; EMBEDDING_DIM];
        let combined = ex.features(&t, Some(&hist)).unwrap();
        let direct = geometric_features(&t, &frames, &c)
            .unwrap()
            .concat(&appearance_features(&t, &table, Some(&hist), &frames, &c).unwrap())
            .unwrap();
        assert_eq!(combined, direct);
        assert_eq!(combined.dim(), 13 + 9 + 132);
    }

    proptest! {
        #[test]
        fn translation_leaves_relative_channels_unchanged(
            dx in -200.0..200.0f64,
            dy in -200.0..200.0f64,
            pos in proptest::collection::vec((0.0..90.0f64, 0.0..90.0f64), 12),
        ) {
            let frames: Vec<Vec<Detection>> = (0..4)
                .map(|f| (0..3).map(|i| { let (l, t) = pos[f * 3 + i]; det(f, (f * 3 + i) as u32, l, t, 0.7) }).collect())
                .collect();
            let moved: Vec<Vec<Detection>> = frames
                .iter()
                .map(|fr| fr.iter().map(|d| { let mut d = d.clone(); d.bbox = d.bbox.translated(dx, dy); d }).collect())
                .collect();
            let picks = [Some(0), Some(4), None, Some(11)];
            let mut c = cfg(2);
            c.use_appearance = true;
            let table = table_for(&frames, |id| id as f32);
            let a = FeatureExtractor::new(c.clone(), &frames, Some(&table)).unwrap().features(&track_of(&frames, &picks), None).unwrap();
            let b = FeatureExtractor::new(c.clone(), &moved, Some(&table)).unwrap().features(&track_of(&moved, &picks), None).unwrap();
            prop_assert_eq!(a.dim(), c.dim());
            for n in 0..4 {
                for ch in 2..a.dim() {
                    prop_assert!((a.get(ch, n) - b.get(ch, n)).abs() < 1e-9, "channel {} frame {}", ch, n);
                }
            }
        }
    }
}
