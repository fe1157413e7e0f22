//! A whole video's worth of detections, optional ground truth and embeddings.

use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::tracklet::{Detection, DetectionId, Tracklet, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    /// Detections per frame; frame indices are contiguous from 0.
    pub frames: Vec<Vec<Detection>>,
    pub ground_truth: Option<Vec<Trajectory>>,
    pub embeddings: Option<EmbeddingTable>,
    pub fps: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl SequenceBundle {
    pub fn new(frames: Vec<Vec<Detection>>, fps: f64, image_width: f64, image_height: f64) -> Self {
        Self {
            frames,
            ground_truth: None,
            embeddings: None,
            fps,
            image_width,
            image_height,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn detection_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        self.frames.iter().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (n, frame) in self.frames.iter().enumerate() {
            for d in frame {
                if d.frame != n {
                    return Err(Error::InvalidParameter(format!("detection {} filed under frame {n} but says {}", d.id, d.frame)));
                }
                if !d.confidence.is_finite() {
                    return Err(Error::NonFinite(format!("confidence of detection {}", d.id)));
                }
                if !seen.insert(d.id) {
                    return Err(Error::InvalidParameter(format!("duplicate detection id {}", d.id)));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            for g in gt {
                if g.len() != self.frames.len() {
                    return Err(Error::FrameCountMismatch {
                        expected: self.frames.len(),
                        actual: g.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Detections of frames `[from, to)` re-indexed to start at frame zero.
    pub fn window_frames(&self, from: usize, to: usize) -> Vec<Vec<Detection>> {
        self.frames[from..to]
            .iter()
            .enumerate()
            .map(|(n, f)| f.iter().map(|d| Detection { frame: n, ..d.clone() }).collect())
            .collect()
    }

    /// Ground truth restricted to `[from, to)`, dropping people absent from the window.
    pub fn window_ground_truth(&self, from: usize, to: usize) -> Vec<Trajectory> {
        self.ground_truth
            .iter()
            .flatten()
            .map(|g| g.window(from, to))
            .filter(|g| g.support_len() > 0)
            .collect()
    }

    /// Frames `[from, to)` as a new bundle with the same embeddings.
    pub fn slice(&self, from: usize, to: usize) -> SequenceBundle {
        SequenceBundle {
            frames: self.window_frames(from, to),
            ground_truth: self.ground_truth.as_ref().map(|gt| {
                gt.iter().map(|g| g.window(from, to)).filter(|g| g.support_len() > 0).collect()
            }),
            embeddings: self.embeddings.clone(),
            fps: self.fps,
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }
}

/// Converts a full-length trajectory to output form: boxes of the tracklet's detections.
pub fn tracklet_to_trajectory(id: u32, t: &Tracklet) -> Trajectory {
    Trajectory {
        id,
        columns: (0..t.len()).map(|n| t.bbox(n)).collect(),
    }
}

/// Lookup of detections by id.
pub fn detection_index(frames: &[Vec<Detection>]) -> std::collections::HashMap<DetectionId, &Detection> {
    frames.iter().flatten().map(|d| (d.id, d)).collect()
}
