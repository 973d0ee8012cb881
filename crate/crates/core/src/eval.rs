//! Detection metrics: frame-mAP over per-frame boxes, video-mAP over tubes
//! at spatio-temporal IoU, and temporal-only video-mAP. All averages use
//! exact all-point precision-recall integration with greedy score-ordered
//! matching; classes without ground truth are excluded from means.

use std::collections::BTreeMap;

use crate::boxes::{iou, BoxXYXY};
use crate::formats::{DetectionRecord, GtRecord, Metrics, TubeRecord};
use crate::{Error, Result};

/// Intersection over union of two boxes; 0 for disjoint or degenerate.
pub fn spatial_iou(a: BoxXYXY, b: BoxXYXY) -> f64 {
    iou(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubeIouMode {
    SpatioTemporal,
    Temporal,
}

/// Temporal IoU of the frame sets, multiplied in spatio-temporal mode by
/// the mean spatial IoU over the intersection frames.
pub fn st_iou(pred: &TubeRecord, gt: &GtRecord, mode: TubeIouMode) -> f64 {
    let pred_frames: BTreeMap<usize, BoxXYXY> =
        pred.frames.iter().map(|f| (f.frame, f.bbox)).collect();
    let gt_frames: BTreeMap<usize, BoxXYXY> =
        gt.frames.iter().map(|f| (f.frame, f.bbox)).collect();
    let mut inter = 0usize;
    let mut spatial_sum = 0.0;
    for (frame, pb) in &pred_frames {
        if let Some(gb) = gt_frames.get(frame) {
            inter += 1;
            spatial_sum += spatial_iou(*pb, *gb);
        }
    }
    if inter == 0 {
        return 0.0;
    }
    let union = pred_frames.len() + gt_frames.len() - inter;
    let temporal = inter as f64 / union as f64;
    match mode {
        TubeIouMode::Temporal => temporal,
        TubeIouMode::SpatioTemporal => temporal * (spatial_sum / inter as f64),
    }
}

/// One detection prepared for AP: ranking score plus its overlap against
/// every compatible ground-truth instance (global gt index, IoU).
#[derive(Debug, Clone)]
pub struct ApDetection {
    pub score: f64,
    pub overlaps: Vec<(usize, f64)>,
}

/// Greedy all-point average precision. Detections are taken in descending
/// score order (stable for ties); each claims the unmatched gt with the
/// highest IoU at or above the threshold. AP sums precision at each true
/// positive's rank, divided by the gt count.
pub fn average_precision(dets: &[ApDetection], num_gts: usize, threshold: f64) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut matched = vec![false; num_gts];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let best = dets[i]
            .overlaps
            .iter()
            .filter(|&&(g, ov)| !matched[g] && ov >= threshold)
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        if let Some(&(g, _)) = best {
            matched[g] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / num_gts as f64
}

fn validate_gts(gts: &[GtRecord]) -> Result<()> {
    for gt in gts {
        if gt.frames.is_empty() {
            return Err(Error::config(format!("gt tube for {} has no frames", gt.video)));
        }
        if gt.frames.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return Err(Error::config(format!(
                "gt tube for {} has non-increasing frames",
                gt.video
            )));
        }
        if gt.class == 0 {
            return Err(Error::config("gt class ids are 1-based"));
        }
    }
    Ok(())
}

fn gt_classes(gts: &[GtRecord]) -> Vec<usize> {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-class AP over pooled frames at the given spatial IoU threshold, and
/// the mean over classes that have ground truth. Frame detections rank by
/// the product p*t.
pub fn frame_map(
    dets: &[DetectionRecord],
    gts: &[GtRecord],
    iou_threshold: f64,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    validate_gts(gts)?;
    let mut per_class = BTreeMap::new();
    for class in gt_classes(gts) {
        // One gt instance per annotated frame, keyed for matching by
        // (video, frame).
        let class_gts: Vec<(&str, usize, BoxXYXY)> = gts
            .iter()
            .filter(|g| g.class == class)
            .flat_map(|g| g.frames.iter().map(|f| (g.video.as_str(), f.frame, f.bbox)))
            .collect();
        let prepared: Vec<ApDetection> = dets
            .iter()
            .filter(|d| d.class == class)
            .map(|d| ApDetection {
                score: d.p * d.t,
                overlaps: class_gts
                    .iter()
                    .enumerate()
                    .filter(|(_, &(v, f, _))| v == d.video && f == d.frame)
                    .map(|(g, &(_, _, gb))| (g, spatial_iou(d.bbox, gb)))
                    .collect(),
            })
            .collect();
        per_class.insert(class, average_precision(&prepared, class_gts.len(), iou_threshold));
    }
    let m = mean(per_class.values().copied());
    Ok((per_class, m))
}

/// Per-class tube AP at one spatio-temporal threshold, and the mean over
/// classes with ground truth.
pub fn video_map_at(
    tubes: &[TubeRecord],
    gts: &[GtRecord],
    threshold: f64,
    mode: TubeIouMode,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    validate_gts(gts)?;
    let mut per_class = BTreeMap::new();
    for class in gt_classes(gts) {
        let class_gts: Vec<&GtRecord> = gts.iter().filter(|g| g.class == class).collect();
        let prepared: Vec<ApDetection> = tubes
            .iter()
            .filter(|t| t.class == class)
            .map(|t| ApDetection {
                score: t.score,
                overlaps: class_gts
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.video == t.video)
                    .map(|(g, gt)| (g, st_iou(t, gt, mode)))
                    .collect(),
            })
            .collect();
        per_class.insert(class, average_precision(&prepared, class_gts.len(), threshold));
    }
    let m = mean(per_class.values().copied());
    Ok((per_class, m))
}

/// The standard threshold table: 0.2, 0.5, 0.75, and the 0.5:0.95 mean
/// over steps of 0.05.
pub fn standard_video_map(
    tubes: &[TubeRecord],
    gts: &[GtRecord],
    mode: TubeIouMode,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (key, thr) in [("0.2", 0.2), ("0.5", 0.5), ("0.75", 0.75)] {
        out.insert(key.to_string(), video_map_at(tubes, gts, thr, mode)?.1);
    }
    let sweep =
        mean((0..10).map(|i| 0.5 + 0.05 * i as f64).map(|thr| {
            video_map_at(tubes, gts, thr, mode).map(|r| r.1).unwrap_or(0.0)
        }));
    out.insert("0.5:0.95".to_string(), sweep);
    Ok(out)
}

/// Flattens trimmed tubes into frame-level detections (for frame-mAP after
/// linking and refinement).
pub fn tube_frame_detections(tubes: &[TubeRecord]) -> Vec<DetectionRecord> {
    tubes
        .iter()
        .flat_map(|t| {
            t.frames.iter().map(|f| DetectionRecord {
                video: t.video.clone(),
                frame: f.frame,
                class: t.class,
                bbox: f.bbox,
                p: f.p,
                t: f.t,
            })
        })
        .collect()
}

/// The full report: frame-mAP at 0.5, the video-mAP table, and
/// temporal-only mAP at 0.5.
pub fn compute_metrics(
    frame_dets: &[DetectionRecord],
    tubes: &[TubeRecord],
    gts: &[GtRecord],
) -> Result<Metrics> {
    let (per_class, frame) = frame_map(frame_dets, gts, 0.5)?;
    let video_map = standard_video_map(tubes, gts, TubeIouMode::SpatioTemporal)?;
    let (_, temporal) = video_map_at(tubes, gts, 0.5, TubeIouMode::Temporal)?;
    Ok(Metrics {
        frame_map: frame,
        video_map,
        temporal_map: temporal,
        per_class: per_class.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}
