//! Image-plane bounding boxes and the overlap arithmetic built on them.

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, stored as `(left, top, width, height)`.
///
/// The all-zero box is the distinguished "absent" value used for frames in
/// which a tracklet or ground-truth trajectory has no location.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub const ABSENT: BoundingBox = BoundingBox {
        left: 0.0,
        top: 0.0,
        width: 0.0,
        height: 0.0,
    };

    pub const fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    pub fn is_absent(&self) -> bool {
        self.left == 0.0 && self.top == 0.0 && self.width == 0.0 && self.height == 0.0
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + 0.5 * self.width, self.top + 0.5 * self.height)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.left, self.top, self.width, self.height]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.left + dx, self.top + dy, self.width, self.height)
    }

    /// Continuous area of `self ∩ other`.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.left.max(other.left);
        let ih = self.bottom().min(other.bottom()) - self.top.max(other.top);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Euclidean distance between box centers.
    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }
}

/// Intersection over union. Zero when either box is absent or the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a.is_absent() || b.is_absent() {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU together with its gradient with respect to `a`'s `(left, top, width, height)`.
///
/// The gradient is the analytic piecewise derivative; it is defined as zero
/// wherever the boxes do not intersect (including touching edges).
pub fn iou_with_grad(a: &BoundingBox, b: &BoundingBox) -> (f64, [f64; 4]) {
    if a.is_absent() || b.is_absent() {
        return (0.0, [0.0; 4]);
    }
    let (ax1, ax2, ay1, ay2) = (a.left, a.right(), a.top, a.bottom());
    let (bx1, bx2, by1, by2) = (b.left, b.right(), b.top, b.bottom());
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 || a.width <= 0.0 || a.height <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let area_a = a.width * a.height;
    let union = area_a + b.area() - inter;
    let value = inter / union;

    // d(iw)/d(ax1), d(iw)/d(ax2) and the same for the vertical extent.
    let diw_dx1 = if ax1 > bx1 { -1.0 } else { 0.0 };
    let diw_dx2 = if ax2 < bx2 { 1.0 } else { 0.0 };
    let dih_dy1 = if ay1 > by1 { -1.0 } else { 0.0 };
    let dih_dy2 = if ay2 < by2 { 1.0 } else { 0.0 };

    // left moves both x edges, width moves only the right edge.
    let di = [
        ih * (diw_dx1 + diw_dx2),
        iw * (dih_dy1 + dih_dy2),
        ih * diw_dx2,
        iw * dih_dy2,
    ];
    let darea = [0.0, 0.0, a.height, a.width];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        // dU = dA - dI, so d(I/U) = (dI*U - I*(dA - dI)) / U^2.
        grad[k] = (di[k] * (union + inter) - inter * darea[k]) / (union * union);
    }
    (value, grad)
}

/// Shifts every component of `d` by `sft` (pixels), clamping width and height at zero.
pub fn shift_box(d: &BoundingBox, sft: [f64; 4]) -> Result<BoundingBox> {
    if d.is_absent() {
        return Err(Error::ShiftAbsentBox);
    }
    Ok(BoundingBox::new(
        d.left + sft[0],
        d.top + sft[1],
        (d.width + sft[2]).max(0.0),
        (d.height + sft[3]).max(0.0),
    ))
}
