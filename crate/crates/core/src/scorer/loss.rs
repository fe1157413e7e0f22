//! Per-frame regression targets, the training loss and the IDF-proxy score.

use crate::geometry::{iou, iou_with_grad, shift_box, BoundingBox};
use crate::tracklet::{Trajectory, Tracklet};

use super::FramePrediction;

/// Targets derived from a tracklet and its assigned ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    /// Tracklet box per frame (absent where the tracklet has no detection).
    pub det_boxes: Vec<BoundingBox>,
    /// Assigned ground-truth box per frame (absent where the person is not present).
    pub gt_boxes: Vec<BoundingBox>,
    /// `1(g_n ≠ 0)`.
    pub presence: Vec<bool>,
    /// `IoU(d_n, g_n)`, zero where either is absent.
    pub iou: Vec<f64>,
    /// Pixel size of one unit of predicted shift per box component.
    pub scale: [f64; 4],
}

impl FrameTargets {
    pub fn new(t: &Tracklet, g: Option<&Trajectory>, image_width: f64, image_height: f64) -> Self {
        let n = t.len();
        let det_boxes: Vec<BoundingBox> = (0..n).map(|k| t.bbox(k)).collect();
        let gt_boxes: Vec<BoundingBox> = match g {
            Some(g) => g.columns.clone(),
            None => vec![BoundingBox::ABSENT; n],
        };
        let presence = gt_boxes.iter().map(|b| !b.is_absent()).collect();
        let iou = det_boxes.iter().zip(&gt_boxes).map(|(d, g)| iou(d, g)).collect();
        Self {
            det_boxes,
            gt_boxes,
            presence,
            iou,
            scale: [image_width, image_height, image_width, image_height],
        }
    }

    pub fn frames(&self) -> usize {
        self.det_boxes.len()
    }

    fn det_present(&self, n: usize) -> bool {
        !self.det_boxes[n].is_absent()
    }

    fn shifted(&self, n: usize, sft: &[f64; 4]) -> BoundingBox {
        let px = [
            sft[0] * self.scale[0],
            sft[1] * self.scale[1],
            sft[2] * self.scale[2],
            sft[3] * self.scale[3],
        ];
        shift_box(&self.det_boxes[n], px).expect("shift applies to present boxes only")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameLoss {
    pub lab: f64,
    pub iou: f64,
    pub sft: f64,
}

impl FrameLoss {
    pub fn total(&self) -> f64 {
        self.lab + self.iou + self.sft
    }
}

/// Sum over frames of the presence, IoU and shift errors.
///
/// `lab` is assessed on every frame; `iou` on frames with a detection; the
/// shift term only where both the detection and the ground truth exist.
pub fn loss(preds: &[FramePrediction], targets: &FrameTargets) -> (f64, Vec<FrameLoss>) {
    let terms: Vec<FrameLoss> = preds
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let y = if targets.presence[n] { 1.0 } else { 0.0 };
            let mut fl = FrameLoss {
                lab: (p.lab - y).powi(2),
                ..Default::default()
            };
            if targets.det_present(n) {
                fl.iou = (p.iou - targets.iou[n]).powi(2);
                if targets.presence[n] {
                    fl.sft = 1.0 - iou(&targets.shifted(n, &p.sft), &targets.gt_boxes[n]);
                }
            }
            fl
        })
        .collect();
    (terms.iter().map(FrameLoss::total).sum(), terms)
}

/// Gradient of [`loss`] with respect to each prediction component.
pub(crate) fn loss_grad(preds: &[FramePrediction], targets: &FrameTargets) -> Vec<FramePrediction> {
    preds
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let y = if targets.presence[n] { 1.0 } else { 0.0 };
            let mut g = FramePrediction {
                lab: 2.0 * (p.lab - y),
                iou: 0.0,
                sft: [0.0; 4],
            };
            if targets.det_present(n) {
                g.iou = 2.0 * (p.iou - targets.iou[n]);
                if targets.presence[n] {
                    let shifted = targets.shifted(n, &p.sft);
                    let (_, d) = iou_with_grad(&shifted, &targets.gt_boxes[n]);
                    for k in 0..4 {
                        g.sft[k] = -d[k] * targets.scale[k];
                    }
                }
            }
            g
        })
        .collect()
}

/// IDF proxy computed from the network's per-frame predictions:
/// `2 Σ_{d_n ≠ 0, lab_n > 0.5} iou_n / (|{d_n ≠ 0}| + |{lab_n > 0.5}|)`.
pub fn score(preds: &[FramePrediction], t: &Tracklet) -> f64 {
    let mut numerator = 0.0;
    let (mut support, mut labelled) = (0usize, 0usize);
    for (n, p) in preds.iter().enumerate() {
        let present = t.is_present(n);
        let on = p.lab > 0.5;
        support += present as usize;
        labelled += on as usize;
        if present && on {
            numerator += p.iou;
        }
    }
    let denom = support + labelled;
    if denom == 0 {
        0.0
    } else {
        2.0 * numerator / denom as f64
    }
}
