//! Post-processing of frame detections into trimmed, scored action tubes:
//! greedy linking, state-score smoothing, watershed temporal trimming,
//! micro-tube frame-score refinement, and final tube scoring.
//!
//! Tube scores for ranking and export are fixed before refinement, so
//! enabling refinement changes exported frame-level category scores and
//! nothing else.

use std::collections::{BTreeMap, BTreeSet};

use crate::boxes::{iou, nms_indices, BoxXYXY};
use crate::formats::{DetectionRecord, TubeFrameRecord, TubeRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Minimum spatial IoU against a tube's last box for a claim.
    pub link_iou: f64,
    /// Consecutive unextended frames before a tube terminates.
    pub patience: usize,
    /// Detections kept per frame and class after NMS.
    pub per_frame_top: usize,
    pub nms_iou: f64,
    /// Minimum p for an unclaimed detection to start a new tube.
    pub start_floor: f64,
    /// Centered moving-average window over state scores; odd.
    pub smooth_window: usize,
    /// Watershed threshold pool.
    pub thresholds: Vec<f64>,
    pub temporal_nms: f64,
    /// Micro-tube window (frames averaged per refined category score).
    pub microtube: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            link_iou: 0.3,
            patience: 3,
            per_frame_top: 10,
            nms_iou: 0.45,
            start_floor: 0.2,
            smooth_window: 5,
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            temporal_nms: 0.2,
            microtube: 8,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("link_iou", self.link_iou),
            ("nms_iou", self.nms_iou),
            ("temporal_nms", self.temporal_nms),
        ] {
            if !(0.0..1.0).contains(&v) || v <= 0.0 {
                return Err(Error::config(format!("{name} must lie in (0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.start_floor) {
            return Err(Error::config("start_floor must lie in [0,1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.per_frame_top == 0 {
            return Err(Error::config("per_frame_top must be >= 1"));
        }
        if self.smooth_window % 2 == 0 {
            return Err(Error::config("smooth_window must be odd"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(0.0..1.0).contains(&t) || t <= 0.0) {
            return Err(Error::config("thresholds must be nonempty, all in (0,1)"));
        }
        if self.microtube == 0 {
            return Err(Error::config("microtube must be >= 1"));
        }
        Ok(())
    }
}

/// A linked tube: gap-free, strictly increasing frames after linking.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub video: String,
    pub class: usize,
    pub entries: Vec<TubeFrameRecord>,
    /// Running mean of claimed p (the linking priority).
    pub score: f64,
}

/// Inclusive temporal extent kept by trimming, in video frame indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimSegment {
    pub start: usize,
    pub end: usize,
    pub mean_state: f64,
}

/// Per-frame NMS then top-n by p, per class input. Output grouped by frame
/// in descending p order.
pub fn prepare_frames(dets: &[TubeFrameRecord], cfg: &LinkConfig) -> Vec<TubeFrameRecord> {
    let mut by_frame: BTreeMap<usize, Vec<&TubeFrameRecord>> = BTreeMap::new();
    for d in dets {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let mut out = Vec::with_capacity(dets.len());
    for (_, frame_dets) in by_frame {
        let boxes: Vec<BoxXYXY> = frame_dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = frame_dets.iter().map(|d| d.p).collect();
        let kept = nms_indices(&boxes, &scores, cfg.nms_iou);
        out.extend(kept.into_iter().take(cfg.per_frame_top).map(|i| frame_dets[i].clone()));
    }
    out
}

struct ActiveTube {
    entries: Vec<TubeFrameRecord>,
    p_sum: f64,
    misses: usize,
    born: usize,
}

impl ActiveTube {
    fn score(&self) -> f64 {
        self.p_sum / self.entries.len() as f64
    }
}

/// Greedy linking for one video and class. Detections must already be
/// per-frame NMS'd (see [`prepare_frames`]). Frame by frame, tubes ordered
/// by descending score claim the best-overlapping unclaimed detection;
/// leftovers above the floor seed new tubes; a tube idle for `patience`
/// frames terminates. Gaps inside surviving tubes are filled by linear
/// interpolation of box, p, and t.
pub fn link_greedy(
    video: &str,
    class: usize,
    dets: &[TubeFrameRecord],
    cfg: &LinkConfig,
) -> Vec<Tube> {
    let mut by_frame: BTreeMap<usize, Vec<&TubeFrameRecord>> = BTreeMap::new();
    for d in dets {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let Some((&first, _)) = by_frame.iter().next() else {
        return Vec::new();
    };
    let &last = by_frame.keys().next_back().unwrap();
    for frame_dets in by_frame.values_mut() {
        frame_dets.sort_by(|a, b| b.p.total_cmp(&a.p));
    }

    let mut active: Vec<ActiveTube> = Vec::new();
    let mut done: Vec<ActiveTube> = Vec::new();
    let mut born = 0;
    for frame in first..=last {
        let cands = by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let mut claimed = vec![false; cands.len()];
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&i, &j| {
            active[j].score().total_cmp(&active[i].score()).then(active[i].born.cmp(&active[j].born))
        });
        for ti in order {
            let tube = &mut active[ti];
            let last_box = tube.entries.last().unwrap().bbox;
            let pick = (0..cands.len())
                .find(|&ci| !claimed[ci] && iou(last_box, cands[ci].bbox) >= cfg.link_iou);
            match pick {
                Some(ci) => {
                    claimed[ci] = true;
                    tube.entries.push(cands[ci].clone());
                    tube.p_sum += cands[ci].p;
                    tube.misses = 0;
                }
                None => tube.misses += 1,
            }
        }
        for (ci, cand) in cands.iter().enumerate() {
            if !claimed[ci] && cand.p > cfg.start_floor {
                active.push(ActiveTube {
                    entries: vec![(*cand).clone()],
                    p_sum: cand.p,
                    misses: 0,
                    born,
                });
                born += 1;
            }
        }
        let mut i = 0;
        while i < active.len() {
            if active[i].misses >= cfg.patience {
                done.push(active.remove(i));
            } else {
                i += 1;
            }
        }
    }
    done.extend(active);
    done.sort_by_key(|t| t.born);
    done.into_iter()
        .map(|t| {
            let score = t.score();
            Tube { video: video.to_string(), class, entries: fill_gaps(t.entries), score }
        })
        .collect()
}

fn lerp(a: f64, b: f64, alpha: f64) -> f64 {
    a + (b - a) * alpha
}

fn fill_gaps(entries: Vec<TubeFrameRecord>) -> Vec<TubeFrameRecord> {
    let mut out: Vec<TubeFrameRecord> = Vec::with_capacity(entries.len());
    for e in entries {
        if let Some(prev) = out.last().cloned() {
            for frame in prev.frame + 1..e.frame {
                let alpha = (frame - prev.frame) as f64 / (e.frame - prev.frame) as f64;
                let (pa, pb) = (prev.bbox.to_array(), e.bbox.to_array());
                let coords: Vec<f64> =
                    pa.iter().zip(&pb).map(|(&x, &y)| lerp(x, y, alpha)).collect();
                out.push(TubeFrameRecord {
                    frame,
                    bbox: BoxXYXY::from_array([coords[0], coords[1], coords[2], coords[3]]),
                    p: lerp(prev.p, e.p, alpha),
                    t: lerp(prev.t, e.t, alpha),
                });
            }
        }
        out.push(e);
    }
    out
}

/// Centered moving average of the state scores with edge truncation.
pub fn smooth_scores(tube: &Tube, w: usize) -> Vec<f64> {
    assert!(w % 2 == 1, "window must be odd");
    let n = tube.entries.len();
    let h = w / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h).min(n - 1);
            let sum: f64 = tube.entries[lo..=hi].iter().map(|e| e.t).sum();
            sum / (hi - lo + 1) as f64
        })
        .collect()
}

fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0));
    if inter == 0 {
        return 0.0;
    }
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Watershed trimming: maximal runs of smoothed state score above each
/// threshold in the pool, deduplicated, scored by the sum of (a_f - 0.5),
/// temporally NMS'd, and kept when the score is positive with mean at least
/// 0.5. Returned ordered by score, then start frame.
pub fn watershed_trim(tube: &Tube, cfg: &LinkConfig) -> Vec<TrimSegment> {
    let a = smooth_scores(tube, cfg.smooth_window);
    let n = a.len();
    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &tau in &cfg.thresholds {
        let mut i = 0;
        while i < n {
            if a[i] >= tau {
                let start = i;
                while i < n && a[i] >= tau {
                    i += 1;
                }
                candidates.insert((start, i - 1));
            } else {
                i += 1;
            }
        }
    }
    let mut scored: Vec<(f64, usize, usize)> = candidates
        .into_iter()
        .map(|(s, e)| (a[s..=e].iter().map(|&v| v - 0.5).sum::<f64>(), s, e))
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut kept: Vec<(f64, usize, usize)> = Vec::new();
    'cand: for (score, s, e) in scored {
        for &(_, ks, ke) in &kept {
            if temporal_iou((s, e), (ks, ke)) >= cfg.temporal_nms {
                continue 'cand;
            }
        }
        kept.push((score, s, e));
    }
    let base = tube.entries[0].frame;
    kept.into_iter()
        .filter_map(|(score, s, e)| {
            let mean = a[s..=e].iter().sum::<f64>() / (e - s + 1) as f64;
            (score > 0.0 && mean >= 0.5).then(|| TrimSegment {
                start: base + s,
                end: base + e,
                mean_state: mean,
            })
        })
        .collect()
}

/// Replaces each entry's p with the mean of p over a centered window of
/// `m` entries, truncated at the tube ends. Boxes and t are untouched.
pub fn microtube_refine(entries: &mut [TubeFrameRecord], m: usize) {
    assert!(m >= 1);
    let n = entries.len();
    let original: Vec<f64> = entries.iter().map(|e| e.p).collect();
    let (half_lo, half_hi) = ((m - 1) / 2, m / 2);
    for (i, e) in entries.iter_mut().enumerate() {
        let lo = i.saturating_sub(half_lo);
        let hi = (i + half_hi).min(n - 1);
        e.p = original[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
    }
}

/// Mean of p*t over the segment's frames.
pub fn score_tube(tube: &Tube, seg: &TrimSegment) -> f64 {
    let vals: Vec<f64> = tube
        .entries
        .iter()
        .filter(|e| (seg.start..=seg.end).contains(&e.frame))
        .map(|e| e.p * e.t)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Full pipeline from frame detections to trimmed tube records: per video
/// and class, prepare, link, trim, score, then optionally refine the frame
/// scores. Segment scores are computed before refinement.
pub fn process_detections(
    dets: &[DetectionRecord],
    cfg: &LinkConfig,
    refine: bool,
) -> Result<Vec<TubeRecord>> {
    cfg.validate()?;
    let mut by_video: BTreeMap<&str, BTreeMap<usize, Vec<TubeFrameRecord>>> = BTreeMap::new();
    for d in dets {
        if d.class == 0 {
            return Err(Error::config("detection class ids are 1-based"));
        }
        by_video.entry(&d.video).or_default().entry(d.class).or_default().push(TubeFrameRecord {
            frame: d.frame,
            bbox: d.bbox,
            p: d.p,
            t: d.t,
        });
    }
    let mut records = Vec::new();
    for (video, classes) in by_video {
        for (class, class_dets) in classes {
            let prepared = prepare_frames(&class_dets, cfg);
            for mut tube in link_greedy(video, class, &prepared, cfg) {
                let segments = watershed_trim(&tube, cfg);
                let scores: Vec<f64> = segments.iter().map(|s| score_tube(&tube, s)).collect();
                if refine {
                    microtube_refine(&mut tube.entries, cfg.microtube);
                }
                for (seg, score) in segments.iter().zip(scores) {
                    records.push(TubeRecord {
                        video: tube.video.clone(),
                        class: tube.class,
                        score,
                        segment: [seg.start, seg.end],
                        frames: tube
                            .entries
                            .iter()
                            .filter(|e| (seg.start..=seg.end).contains(&e.frame))
                            .cloned()
                            .collect(),
                    });
                }
            }
        }
    }
    Ok(records)
}
