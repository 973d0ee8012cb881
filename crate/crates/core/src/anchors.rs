//! SSD-style anchor grid, ground-truth matching, and offset coding.
//!
//! One anchor set per feature scale: cell centers at
//! `((x + 0.5) * stride, (y + 0.5) * stride)` in pixels, normalized by the
//! input size; base side `2 * stride / input_size`; one anchor per aspect
//! ratio with `w = base * sqrt(r)`, `h = base / sqrt(r)`. Anchors are kept
//! unclipped so offset coding is exactly invertible everywhere.
//!
//! Anchor order is scale-major, then row-major cells, then ratio, matching
//! the layout the detector heads are gathered into.

use crate::boxes::{iou, BoxXYXY};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ScaleLayout {
    pub stride: usize,
    /// Cells per side at this scale.
    pub cells: usize,
    pub anchors_per_cell: usize,
    /// Index of this scale's first anchor in the flat list.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<BoxXYXY>,
    pub scales: Vec<ScaleLayout>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds the flat anchor list for `input_size` pixels square input.
/// Every stride must divide the input size.
pub fn build_anchor_grid(input_size: usize, strides: &[usize], aspect_ratios: &[f64]) -> Result<AnchorGrid> {
    if strides.is_empty() || aspect_ratios.is_empty() {
        return Err(Error::config("anchor grid wants at least one stride and one aspect ratio"));
    }
    if aspect_ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::config("aspect ratios must be positive"));
    }
    let mut anchors = Vec::new();
    let mut scales = Vec::new();
    for &stride in strides {
        if stride == 0 || input_size % stride != 0 {
            return Err(Error::config(format!("stride {} does not divide input size {}", stride, input_size)));
        }
        let cells = input_size / stride;
        let base = 2.0 * stride as f64 / input_size as f64;
        scales.push(ScaleLayout { stride, cells, anchors_per_cell: aspect_ratios.len(), offset: anchors.len() });
        for y in 0..cells {
            for x in 0..cells {
                let cx = (x as f64 + 0.5) * stride as f64 / input_size as f64;
                let cy = (y as f64 + 0.5) * stride as f64 / input_size as f64;
                for &r in aspect_ratios {
                    let w = base * r.sqrt();
                    let h = base / r.sqrt();
                    anchors.push(BoxXYXY::from_center(cx, cy, w, h));
                }
            }
        }
    }
    Ok(AnchorGrid { anchors, scales })
}

/// Per-anchor assignment produced by [`match_anchors`].
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `assignment[a] = Some(g)` when anchor `a` is a positive for gt `g`.
    pub assignment: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment.iter().enumerate().filter_map(|(a, g)| g.map(|g| (a, g)))
    }
}

/// Two-rule SSD matching: every anchor with IoU above the threshold joins
/// its best gt, and every gt is force-assigned its single best anchor even
/// below the threshold (so no gt goes unmatched). All ties break to the
/// lowest index. Forcing wins over the threshold rule on conflicts.
pub fn match_anchors(grid: &AnchorGrid, gts: &[BoxXYXY], iou_threshold: f64) -> MatchResult {
    let n = grid.anchors.len();
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    if gts.is_empty() {
        return MatchResult { assignment };
    }
    let mut best_iou = vec![0.0f64; n];
    for (a, &anchor) in grid.anchors.iter().enumerate() {
        for (g, &gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v >= iou_threshold && v > best_iou[a] {
                best_iou[a] = v;
                assignment[a] = Some(g);
            }
        }
    }
    // forcing pass: gt's best anchor, higher IoU wins the anchor on conflict
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; n];
    for (g, &gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, &anchor) in grid.anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, v)) = best {
            if forced[a].map_or(true, |(_, fv)| v > fv) {
                forced[a] = Some((g, v));
            }
        }
    }
    for (a, f) in forced.iter().enumerate() {
        if let Some((g, _)) = f {
            assignment[a] = Some(*g);
        }
    }
    MatchResult { assignment }
}

/// Offsets `(dcx/aw, dcy/ah, ln(gw/aw), ln(gh/ah))` of a gt box relative to
/// its anchor. Degenerate gt extents are rejected, the log has no value
/// there.
pub fn encode_box(anchor: BoxXYXY, gt: BoxXYXY) -> Result<[f64; 4]> {
    let (acx, acy, aw, ah) = anchor.center_form();
    let (gcx, gcy, gw, gh) = gt.center_form();
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::shape(format!("encode_box: degenerate gt extent {}x{}", gw, gh)));
    }
    debug_assert!(aw > 0.0 && ah > 0.0, "anchors are built non-degenerate");
    Ok([(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: BoxXYXY, offsets: [f64; 4]) -> BoxXYXY {
    let (acx, acy, aw, ah) = anchor.center_form();
    let cx = acx + offsets[0] * aw;
    let cy = acy + offsets[1] * ah;
    let w = aw * offsets[2].exp();
    let h = ah * offsets[3].exp();
    BoxXYXY::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid64() -> AnchorGrid {
        build_anchor_grid(64, &[8, 16], &[1.0, 2.0, 0.5]).unwrap()
    }

    #[test]
    fn grid_counts_and_layout() {
        let g = grid64();
        assert_eq!(g.len(), 8 * 8 * 3 + 4 * 4 * 3);
        assert_eq!(g.scales[0].offset, 0);
        assert_eq!(g.scales[0].cells, 8);
        assert_eq!(g.scales[1].offset, 192);
        assert_eq!(g.scales[1].cells, 4);
    }

    #[test]
    fn first_cell_anchor_geometry() {
        let g = grid64();
        // stride 8, cell (0,0), ratio 1: center (4/64, 4/64), side 16/64
        let a = g.anchors[0];
        let (cx, cy, w, h) = a.center_form();
        assert!((cx - 0.0625).abs() < 1e-15);
        assert!((cy - 0.0625).abs() < 1e-15);
        assert!((w - 0.25).abs() < 1e-15);
        assert!((h - 0.25).abs() < 1e-15);
        // ratio 2 stretches x by sqrt(2)
        let (_, _, w2, h2) = g.anchors[1].center_form();
        assert!((w2 - 0.25 * 2.0f64.sqrt()).abs() < 1e-15);
        assert!((h2 - 0.25 / 2.0f64.sqrt()).abs() < 1e-15);
        // anchors are deliberately unclipped at the border
        assert!(g.anchors[0].x1 < 0.0);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(build_anchor_grid(64, &[10], &[1.0]).is_err());
        assert!(build_anchor_grid(64, &[], &[1.0]).is_err());
        assert!(build_anchor_grid(64, &[8], &[]).is_err());
        assert!(build_anchor_grid(64, &[8], &[-1.0]).is_err());
    }

    #[test]
    fn matching_threshold_and_forcing() {
        let g = grid64();
        // a gt sitting nearly on an anchor: threshold rule fires
        let gt_good = BoxXYXY::from_center(0.0625, 0.0625, 0.24, 0.24);
        // a tiny gt no anchor reaches 0.5 IoU with: only forcing can match it
        let gt_tiny = BoxXYXY::from_center(0.7, 0.7, 0.02, 0.02);
        let m = match_anchors(&g, &[gt_good, gt_tiny], 0.5);
        let pos: Vec<(usize, usize)> = m.positives().collect();
        assert!(pos.iter().any(|&(_, g)| g == 0));
        assert!(pos.iter().any(|&(_, g)| g == 1), "forcing must rescue the tiny gt");
        // anchor 0 (ratio 1 at cell 0,0) is the obvious home for gt_good
        assert_eq!(m.assignment[0], Some(0));
    }

    #[test]
    fn matching_empty_gt_list() {
        let g = grid64();
        let m = match_anchors(&g, &[], 0.5);
        assert!(m.positives().next().is_none());
    }

    #[test]
    fn encode_decode_hand_case() {
        let anchor = BoxXYXY::from_center(0.5, 0.5, 0.2, 0.2);
        let gt = BoxXYXY::from_center(0.55, 0.45, 0.4, 0.1);
        let off = encode_box(anchor, gt).unwrap();
        assert!((off[0] - 0.25).abs() < 1e-15);
        assert!((off[1] + 0.25).abs() < 1e-15);
        assert!((off[2] - 2.0f64.ln()).abs() < 1e-15);
        assert!((off[3] - 0.5f64.ln()).abs() < 1e-15);
        let back = decode_box(anchor, off);
        let (cx, cy, w, h) = back.center_form();
        assert!((cx - 0.55).abs() < 1e-12);
        assert!((cy - 0.45).abs() < 1e-12);
        assert!((w - 0.4).abs() < 1e-12);
        assert!((h - 0.1).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate_gt() {
        let anchor = BoxXYXY::from_center(0.5, 0.5, 0.2, 0.2);
        assert!(encode_box(anchor, BoxXYXY::new(0.3, 0.3, 0.3, 0.4)).is_err());
    }

    #[test]
    fn zero_offsets_decode_to_the_anchor() {
        let anchor = BoxXYXY::from_center(0.3, 0.6, 0.25, 0.125);
        let b = decode_box(anchor, [0.0; 4]);
        assert!((b.x1 - anchor.x1).abs() < 1e-15);
        assert!((b.y2 - anchor.y2).abs() < 1e-15);
    }
}
