//! Detections, tracklets and ground-truth trajectories.
//!
//! A tracklet is a fixed-length sequence of per-frame cells over a batch of
//! `N` frames; an empty cell plays the role of the all-zero column.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DetectionId(pub u32);

impl fmt::Display for DetectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Frame index within the sequence the detection belongs to.
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub id: DetectionId,
    /// Row of the embedding table holding this detection's appearance vector.
    /// `None` means the row is keyed by `id`.
    pub embedding_ref: Option<u32>,
}

impl Detection {
    pub fn new(frame: usize, bbox: BoundingBox, confidence: f64, id: DetectionId) -> Self {
        Self {
            frame,
            bbox,
            confidence,
            id,
            embedding_ref: None,
        }
    }

    pub fn embedding_key(&self) -> u32 {
        self.embedding_ref.unwrap_or(self.id.0)
    }
}

/// One non-zero column of a tracklet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub id: DetectionId,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl From<&Detection> for Cell {
    fn from(d: &Detection) -> Self {
        Cell {
            id: d.id,
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }
}

/// Dedup key of a tracklet: the detection id (or nothing) in every frame.
pub type TrackletKey = Vec<Option<DetectionId>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    cells: Vec<Option<Cell>>,
    pub cached_score: Option<f64>,
}

impl Tracklet {
    pub fn empty(frames: usize) -> Self {
        Self {
            cells: vec![None; frames],
            cached_score: None,
        }
    }

    pub fn from_cells(cells: Vec<Option<Cell>>) -> Self {
        Self {
            cells,
            cached_score: None,
        }
    }

    /// Single-detection tracklet with the detection placed at batch-local `frame`.
    pub fn single(frames: usize, frame: usize, det: &Detection) -> Self {
        let mut t = Self::empty(frames);
        t.cells[frame] = Some(Cell::from(det));
        t
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Option<Cell>] {
        &self.cells
    }

    pub fn cell(&self, n: usize) -> Option<&Cell> {
        self.cells.get(n).and_then(Option::as_ref)
    }

    pub fn set(&mut self, n: usize, cell: Option<Cell>) {
        self.cells[n] = cell;
        self.cached_score = None;
    }

    pub fn is_present(&self, n: usize) -> bool {
        self.cells[n].is_some()
    }

    /// Box in frame `n`, or the absent box.
    pub fn bbox(&self, n: usize) -> BoundingBox {
        self.cells[n].map_or(BoundingBox::ABSENT, |c| c.bbox)
    }

    pub fn support_len(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, &Cell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(n, c)| c.as_ref().map(|c| (n, c)))
    }

    pub fn start(&self) -> Option<usize> {
        self.cells.iter().position(Option::is_some)
    }

    pub fn end(&self) -> Option<usize> {
        self.cells.iter().rposition(Option::is_some)
    }

    /// `end - start + 1`, or zero for an empty tracklet.
    pub fn span(&self) -> usize {
        match (self.start(), self.end()) {
            (Some(s), Some(e)) => e - s + 1,
            _ => 0,
        }
    }

    pub fn key(&self) -> TrackletKey {
        self.cells.iter().map(|c| c.map(|c| c.id)).collect()
    }

    /// Detection ids of the support in frame order.
    pub fn id_sequence(&self) -> Vec<DetectionId> {
        self.support().map(|(_, c)| c.id).collect()
    }

    pub fn contains(&self, id: DetectionId) -> bool {
        self.support().any(|(_, c)| c.id == id)
    }

    /// Restriction to frames `[from, to)`, re-indexed to start at zero.
    pub fn window(&self, from: usize, to: usize) -> Tracklet {
        Tracklet::from_cells(self.cells[from..to].to_vec())
    }

    /// Support size of `self ∪ other`, or `None` when they cannot be merged.
    pub fn union_len(&self, other: &Tracklet) -> Option<usize> {
        if self.len() != other.len() {
            return None;
        }
        let mut n = 0;
        for (a, b) in self.cells.iter().zip(&other.cells) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    if a.id != b.id {
                        return None;
                    }
                    n += 1;
                }
                (Some(_), None) | (None, Some(_)) => n += 1,
                (None, None) => {}
            }
        }
        Some(n)
    }
}

/// True iff in every frame where both tracklets are non-zero they hold the same detection.
pub fn can_merge(t1: &Tracklet, t2: &Tracklet) -> bool {
    t1.len() == t2.len()
        && t1.cells.iter().zip(&t2.cells).all(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => a.id == b.id,
            _ => true,
        })
}

/// Column-wise union of two compatible tracklets.
pub fn merge(t1: &Tracklet, t2: &Tracklet) -> Result<Tracklet> {
    if t1.len() != t2.len() {
        return Err(Error::LengthMismatch {
            left: t1.len(),
            right: t2.len(),
        });
    }
    let mut cells = Vec::with_capacity(t1.len());
    for (n, (a, b)) in t1.cells.iter().zip(&t2.cells).enumerate() {
        cells.push(match (a, b) {
            (Some(a), Some(b)) if a.id != b.id => return Err(Error::MergeConflict { frame: n }),
            (Some(a), _) => Some(*a),
            (None, b) => *b,
        });
    }
    Ok(Tracklet::from_cells(cells))
}

/// Shared box area over all frames, normalized by the smaller of the two total box areas.
pub fn overlap_fraction(t1: &Tracklet, t2: &Tracklet) -> f64 {
    let mut shared = 0.0;
    let (mut area1, mut area2) = (0.0, 0.0);
    for (a, b) in t1.cells.iter().zip(&t2.cells) {
        if let Some(a) = a {
            area1 += a.bbox.area();
        }
        if let Some(b) = b {
            area2 += b.bbox.area();
        }
        if let (Some(a), Some(b)) = (a, b) {
            shared += a.bbox.intersection_area(&b.bbox);
        }
    }
    if area1 <= 0.0 || area2 <= 0.0 {
        return 0.0;
    }
    (shared / area1.min(area2)).clamp(0.0, 1.0)
}

/// An identity-labelled sequence of boxes, absent boxes marking frames without the person.
///
/// Used both for ground truth and for tracker output over a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub columns: Vec<BoundingBox>,
}

pub type GroundTruthTrajectory = Trajectory;

impl Trajectory {
    pub fn new(id: u32, frames: usize) -> Self {
        Self {
            id,
            columns: vec![BoundingBox::ABSENT; frames],
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn is_present(&self, n: usize) -> bool {
        !self.columns[n].is_absent()
    }

    pub fn support_len(&self) -> usize {
        self.columns.iter().filter(|b| !b.is_absent()).count()
    }

    pub fn start(&self) -> Option<usize> {
        self.columns.iter().position(|b| !b.is_absent())
    }

    pub fn end(&self) -> Option<usize> {
        self.columns.iter().rposition(|b| !b.is_absent())
    }

    pub fn window(&self, from: usize, to: usize) -> Trajectory {
        Trajectory {
            id: self.id,
            columns: self.columns[from..to].to_vec(),
        }
    }
}
