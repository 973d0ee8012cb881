//! End-to-end drivers gluing the model to the interchange formats:
//! clip-wise inference over a dataset, linking and evaluation from records,
//! and the two-stream score-fusion hook.

use crate::detector::{decode_detections, DecodeConfig, DetectorModel};
use crate::eval::{compute_metrics, tube_frame_detections};
use crate::formats::{DetectionRecord, GtRecord, Metrics, TubeRecord};
use crate::graph::Graph;
use crate::synth::Episode;
use crate::tubes::{process_detections, LinkConfig};
use crate::{Error, Result};

/// Runs one episode through the detector in consecutive clips of the
/// model's training length, recurrent state reset to zero at each clip
/// boundary, and decodes surviving boxes per frame.
pub fn infer_episode(
    model: &DetectorModel,
    ep: &Episode,
    decode: &DecodeConfig,
) -> Result<Vec<DetectionRecord>> {
    let clip_len = model.config.clip_len;
    let mut records = Vec::new();
    let mut offset = 0;
    while offset < ep.frames.len() {
        let end = (offset + clip_len).min(ep.frames.len());
        let mut g = Graph::new();
        let nodes = model.insert_params(&mut g, false)?;
        let frame_ids: Vec<_> =
            ep.frames[offset..end].iter().map(|t| g.constant(t.clone())).collect();
        let out = model.forward_clip(&mut g, &nodes, &frame_ids, false, 0)?;
        for d in decode_detections(&g, &out, model.anchor_grid(), decode, offset) {
            records.push(DetectionRecord {
                video: ep.video.clone(),
                frame: d.frame,
                class: d.class,
                bbox: d.bbox,
                p: d.p,
                t: d.t,
            });
        }
        offset = end;
    }
    Ok(records)
}

/// Inference over a whole dataset. Output is ordered by (video, frame,
/// descending score) and is deterministic.
pub fn infer_dataset(
    model: &DetectorModel,
    episodes: &[Episode],
    decode: &DecodeConfig,
) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for ep in episodes {
        records.extend(infer_episode(model, ep, decode)?);
    }
    records.sort_by(|a, b| {
        a.video
            .cmp(&b.video)
            .then(a.frame.cmp(&b.frame))
            .then((b.p * b.t).total_cmp(&(a.p * a.t)))
            .then(a.class.cmp(&b.class))
    });
    Ok(records)
}

/// Links detections into trimmed tubes (see [`crate::tubes`]).
pub fn link_detections(
    dets: &[DetectionRecord],
    cfg: &LinkConfig,
    refine: bool,
) -> Result<Vec<TubeRecord>> {
    process_detections(dets, cfg, refine)
}

/// Metrics from tube records alone: frame detections are the tubes' frames.
pub fn evaluate_tubes(tubes: &[TubeRecord], gts: &[GtRecord]) -> Result<Metrics> {
    compute_metrics(&tube_frame_detections(tubes), tubes, gts)
}

/// Metrics with frame-mAP taken from raw detections instead of tube frames.
pub fn evaluate_detections(
    dets: &[DetectionRecord],
    tubes: &[TubeRecord],
    gts: &[GtRecord],
) -> Result<Metrics> {
    compute_metrics(dets, tubes, gts)
}

/// Two-stream fusion hook: averages p per detection across two aligned
/// detection files. Records must match on video, frame, class, and box;
/// t is carried from the first stream.
pub fn fuse_detections(
    a: &[DetectionRecord],
    b: &[DetectionRecord],
) -> Result<Vec<DetectionRecord>> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "cannot fuse: {} detections vs {}",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| {
            if x.video != y.video || x.frame != y.frame || x.class != y.class || x.bbox != y.bbox {
                return Err(Error::config(format!("fuse mismatch at record {i}")));
            }
            Ok(DetectionRecord { p: 0.5 * (x.p + y.p), ..x.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BoxXYXY;
    use crate::detector::DetectorConfig;
    use crate::synth::{generate_dataset, SynthConfig};

    fn small_setup() -> (DetectorModel, Vec<Episode>) {
        let dconfig = DetectorConfig {
            input_size: 32,
            num_classes: 2,
            clip_len: 8,
            stem_channels: 3,
            trunk_channels: 6,
            hidden_channels: 4,
            dropout: 0.0,
            scales: vec![8, 16],
            aspect_ratios: vec![1.0],
            ..DetectorConfig::tiny()
        };
        let sconfig = SynthConfig {
            frame_size: 32,
            video_len: 20,
            num_classes: 2,
            actor_size: (8, 12),
            transition_len: (2, 3),
            active_len: (8, 10),
            distractors: 1,
            noise_amp: 0.02,
            seed: 3,
        };
        (DetectorModel::init(dconfig, 2).unwrap(), generate_dataset(&sconfig, 2).unwrap())
    }

    #[test]
    fn inference_is_deterministic_and_ordered() {
        let (model, episodes) = small_setup();
        let decode = DecodeConfig::default();
        let a = infer_dataset(&model, &episodes, &decode).unwrap();
        let b = infer_dataset(&model, &episodes, &decode).unwrap();
        assert_eq!(a, b);
        for w in a.windows(2) {
            let key = |d: &DetectionRecord| (d.video.clone(), d.frame);
            assert!(key(&w[0]) <= key(&w[1]), "output must sort by video then frame");
            if key(&w[0]) == key(&w[1]) {
                assert!(w[0].p * w[0].t >= w[1].p * w[1].t);
            }
        }
        // Frames beyond one clip still produce output (20 frames, clip 8).
        assert!(a.iter().any(|d| d.frame >= 16), "third partial clip must be covered");
    }

    #[test]
    fn empty_dataset_infers_no_lines() {
        let (model, _) = small_setup();
        let recs = infer_dataset(&model, &[], &DecodeConfig::default()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn untrained_model_pipeline_reaches_metrics() {
        let (model, episodes) = small_setup();
        let dets = infer_dataset(&model, &episodes, &DecodeConfig::default()).unwrap();
        let tubes = link_detections(&dets, &LinkConfig::default(), false).unwrap();
        let gts: Vec<GtRecord> = episodes.iter().map(Episode::gt_record).collect();
        let metrics = evaluate_tubes(&tubes, &gts).unwrap();
        assert!(metrics.frame_map.is_finite());
        assert!((0.0..=1.0).contains(&metrics.frame_map));
        assert!((0.0..=1.0).contains(&metrics.temporal_map));
    }

    #[test]
    fn fusion_averages_p_and_validates_alignment() {
        let rec = |p: f64| DetectionRecord {
            video: "v".into(),
            frame: 2,
            class: 1,
            bbox: BoxXYXY::new(0.1, 0.1, 0.3, 0.3),
            p,
            t: 0.7,
        };
        let fused = fuse_detections(&[rec(0.4)], &[rec(0.8)]).unwrap();
        assert!((fused[0].p - 0.6).abs() < 1e-15);
        assert_eq!(fused[0].t, 0.7);
        let mut other = rec(0.8);
        other.frame = 3;
        assert!(fuse_detections(&[rec(0.4)], &[other]).is_err());
        assert!(fuse_detections(&[rec(0.4)], &[]).is_err());
    }
}
