//! Axis-aligned boxes, IoU, and non-maximum suppression.
//!
//! Boxes are corner form `[x1, y1, x2, y2]` with `x2 >= x1`, `y2 >= y1`,
//! unit-agnostic (the pipeline keeps everything normalized to [0, 1]).

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Serializes as the 4-array `[x1, y1, x2, y2]` used by every JSONL schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Serialize for BoxXYXY {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoxXYXY {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(BoxXYXY::from_array(<[f64; 4]>::deserialize(deserializer)?))
    }
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxXYXY { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxXYXY { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Center form `(cx, cy, w, h)`.
    pub fn center_form(self) -> (f64, f64, f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2), self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn width(self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    pub fn clip_unit(self) -> Self {
        BoxXYXY {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }
}

/// Intersection over union. Degenerate boxes (zero or negative extent) give
/// 0, never NaN.
pub fn iou(a: BoxXYXY, b: BoxXYXY) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS. Returns indices of kept boxes in descending score order;
/// equal scores break toward the lower index, so output is deterministic.
pub fn nms_indices(boxes: &[BoxXYXY], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        for &k in &kept {
            if iou(boxes[i], boxes[k]) > iou_threshold {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic_overlap() {
        let a = BoxXYXY::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXYXY::new(1.0, 1.0, 3.0, 3.0);
        // intersection 1, union 7
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(a, a), 1.0);
    }

    #[test]
    fn iou_disjoint_and_degenerate() {
        let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXYXY::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(a, b), 0.0);
        let point = BoxXYXY::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(point, a), 0.0);
        assert_eq!(iou(point, point), 0.0);
        let inverted = BoxXYXY::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou(inverted, a), 0.0);
        assert!(!iou(inverted, inverted).is_nan());
    }

    #[test]
    fn center_form_roundtrip() {
        let b = BoxXYXY::from_center(0.5, 0.25, 0.2, 0.1);
        let (cx, cy, w, h) = b.center_form();
        assert!((cx - 0.5).abs() < 1e-15);
        assert!((cy - 0.25).abs() < 1e-15);
        assert!((w - 0.2).abs() < 1e-15);
        assert!((h - 0.1).abs() < 1e-15);
    }

    #[test]
    fn nms_suppresses_by_score_order() {
        let boxes = vec![
            BoxXYXY::new(0.0, 0.0, 1.0, 1.0),
            BoxXYXY::new(0.05, 0.05, 1.05, 1.05), // heavy overlap with 0
            BoxXYXY::new(2.0, 2.0, 3.0, 3.0),     // disjoint
        ];
        let scores = vec![0.9, 0.8, 0.7];
        assert_eq!(nms_indices(&boxes, &scores, 0.45), vec![0, 2]);
        // higher score on the overlapping box flips which survives
        let scores = vec![0.8, 0.9, 0.7];
        assert_eq!(nms_indices(&boxes, &scores, 0.45), vec![1, 2]);
    }

    #[test]
    fn nms_tie_breaks_to_lower_index() {
        let boxes = vec![BoxXYXY::new(0.0, 0.0, 1.0, 1.0), BoxXYXY::new(0.0, 0.0, 1.0, 1.0)];
        let scores = vec![0.5, 0.5];
        assert_eq!(nms_indices(&boxes, &scores, 0.45), vec![0]);
    }
}
