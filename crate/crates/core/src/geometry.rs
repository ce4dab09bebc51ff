//! Axis-aligned box arithmetic shared by the tracker, the oracle and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureVector;

/// Continuous-coordinate box: top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Config(format!("box ({x}, {y}, {w}, {h}) is not finite")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Config(format!("box size {w}x{h} must be positive")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(self, other)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection area over union area, in `[0, 1]`. Symmetric in its arguments.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A region of a frame together with its precomputed descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWindow {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub features: FeatureVector,
}

impl CandidateWindow {
    pub fn new(bbox: BoundingBox, features: FeatureVector) -> Self {
        Self { bbox, features }
    }
}

/// Greedy non-maximum suppression. Visits boxes by descending score (ties by
/// index) and drops any box whose IoU with an already kept box exceeds
/// `threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}
