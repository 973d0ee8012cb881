//! Synthetic untrimmed videos for end-to-end testing.
//!
//! Each episode shows one bright square actor whose class is defined purely
//! by its multi-frame motion pattern: class 1 oscillates horizontally,
//! class 2 vertically, class 3 orbits. Appearance is shared, and the
//! oscillation phase is drawn uniformly, so a single frame from class 1 is
//! distribution-identical to one from class 2; telling them apart requires
//! temporal context.
//!
//! The timeline is absent / pre-transitional / active / post-transitional /
//! absent. On transitional frames the actor is rendered at the boundary pose
//! with at most one pixel of jitter per axis (so it overlaps the nearest
//! annotated box with IoU >= 0.5) but carries no ground truth, which is
//! exactly the situation transition mining must handle. Ground truth covers
//! the active extent only.
//!
//! Generation is deterministic per (config seed, episode seed), and frames
//! are quantized to f32 at creation so the in-memory tensors round-trip
//! bitwise through the on-disk dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYXY;
use crate::formats::{
    read_f32_bin, read_jsonl, sha256_hex, write_f32_bin, write_jsonl, GtFrameRecord, GtRecord,
};
use crate::tensor::Tensor;
use crate::{derive_seed, Error, Result};

const ACTOR_BRIGHTNESS: f64 = 0.9;
const DISTRACTOR_BRIGHTNESS: f64 = 0.35;
/// Phase steps per active frame. At 2 px/frame a 16-frame clip covers one
/// full oscillation period, which keeps the motion signal visible at the
/// coarsest anchor stride.
const ACTOR_SPEED: i64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frame_size: usize,
    pub video_len: usize,
    /// 2 or 3; class 3 is the orbit pattern.
    pub num_classes: usize,
    /// Inclusive actor side range in pixels; both ends even and >= 6 so the
    /// one-pixel transitional jitter cannot push IoU below 0.5.
    pub actor_size: (usize, usize),
    /// Inclusive per-side transitional length range in frames.
    pub transition_len: (usize, usize),
    /// Inclusive active length range in frames.
    pub active_len: (usize, usize),
    pub distractors: usize,
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_size: 64,
            video_len: 48,
            num_classes: 3,
            actor_size: (6, 12),
            transition_len: (6, 12),
            active_len: (16, 24),
            distractors: 3,
            noise_amp: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Oscillation amplitude in pixels.
    pub fn amplitude(&self) -> i64 {
        (self.frame_size / 8) as i64
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 32 {
            return Err(Error::config("frame_size must be >= 32"));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::config("num_classes must be 2 or 3"));
        }
        let (alo, ahi) = self.actor_size;
        if alo < 6 || alo > ahi || alo % 2 != 0 || ahi % 2 != 0 {
            return Err(Error::config("actor_size bounds must be even, >= 6, and ordered"));
        }
        let margin = ahi / 2 + self.amplitude() as usize + 1;
        if 2 * margin + 1 >= self.frame_size {
            return Err(Error::config("actor too large for the oscillation margin"));
        }
        if self.transition_len.0 > self.transition_len.1 {
            return Err(Error::config("transition_len range is reversed"));
        }
        if self.active_len.0 < 1 || self.active_len.0 > self.active_len.1 {
            return Err(Error::config("active_len range must be ordered and >= 1"));
        }
        if 2 * self.transition_len.1 + self.active_len.1 > self.video_len {
            return Err(Error::config("transitions plus active exceed video_len"));
        }
        if !(0.0..=0.3).contains(&self.noise_amp) {
            return Err(Error::config("noise_amp must lie in [0, 0.3]"));
        }
        Ok(())
    }
}

/// One generated video. Ground truth spans the active extent only; the
/// transitional intervals record where the actor is visible but unannotated.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub video: String,
    /// 1-based class.
    pub class: usize,
    /// One `[1, 1, S, S]` tensor per frame.
    pub frames: Vec<Tensor>,
    /// One normalized box per active frame, in frame order.
    pub gt: Vec<BoxXYXY>,
    /// Inclusive active extent.
    pub active: (usize, usize),
    /// Inclusive pre-transitional extent, when nonempty.
    pub pre: Option<(usize, usize)>,
    /// Inclusive post-transitional extent, when nonempty.
    pub post: Option<(usize, usize)>,
}

impl Episode {
    pub fn gt_record(&self) -> GtRecord {
        GtRecord {
            video: self.video.clone(),
            class: self.class,
            frames: self
                .gt
                .iter()
                .enumerate()
                .map(|(i, &bbox)| GtFrameRecord { frame: self.active.0 + i, bbox })
                .collect(),
        }
    }
}

/// Triangle wave over integer phase: period `4a`, range `[-a, a]`, every
/// interior value visited twice per period and the extremes once.
fn tri(phase: i64, a: i64) -> i64 {
    (phase.rem_euclid(4 * a) - 2 * a).abs() - a
}

struct Distractor {
    size: i64,
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
}

/// Actor center on active frame `s + d`. Only the phase arithmetic differs
/// by class; bases and initial phases are drawn identically, which is what
/// makes single frames of classes 1 and 2 distribution-identical.
fn actor_center(class: usize, d: i64, bx: i64, by: i64, px: i64, py: i64, a: i64) -> (i64, i64) {
    match class {
        1 => (bx + tri(px + d, a), by + tri(py, a)),
        2 => (bx + tri(px, a), by + tri(py + d, a)),
        _ => (bx + tri(px + d, a), by + tri(px + d + a, a)),
    }
}

fn pixel_box(cx: i64, cy: i64, side: i64, frame_size: usize) -> BoxXYXY {
    let s = frame_size as f64;
    BoxXYXY::new(
        (cx - side / 2) as f64 / s,
        (cy - side / 2) as f64 / s,
        (cx + side / 2) as f64 / s,
        (cy + side / 2) as f64 / s,
    )
}

fn stamp_square(pixels: &mut [f64], size: usize, cx: i64, cy: i64, side: i64, value: f64) {
    for y in (cy - side / 2)..(cy + side / 2) {
        for x in (cx - side / 2)..(cx + side / 2) {
            if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                pixels[y as usize * size + x as usize] = value;
            }
        }
    }
}

fn stamp_wrapped(pixels: &mut [f64], size: usize, x0: i64, y0: i64, side: i64, value: f64) {
    let s = size as i64;
    for dy in 0..side {
        for dx in 0..side {
            let x = (x0 + dx).rem_euclid(s) as usize;
            let y = (y0 + dy).rem_euclid(s) as usize;
            pixels[y * size + x] = value;
        }
    }
}

pub fn generate_episode(config: &SynthConfig, episode_seed: u64) -> Result<Episode> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xda7a, episode_seed));
    let size = config.frame_size;
    let amp = config.amplitude();

    // Draw order is fixed and class-independent.
    let class = rng.gen_range(1..=config.num_classes);
    let side = 2 * rng.gen_range(config.actor_size.0 / 2..=config.actor_size.1 / 2) as i64;
    let pre_len = rng.gen_range(config.transition_len.0..=config.transition_len.1);
    let post_len = rng.gen_range(config.transition_len.0..=config.transition_len.1);
    let active_len = rng.gen_range(config.active_len.0..=config.active_len.1);
    let slack = config.video_len - pre_len - post_len - active_len;
    let front_absent = rng.gen_range(0..=slack);
    let margin = (side / 2 + amp + 1) as usize;
    let bx = rng.gen_range(margin..=size - 1 - margin) as i64;
    let by = rng.gen_range(margin..=size - 1 - margin) as i64;
    let px = rng.gen_range(0..4 * amp);
    let py = rng.gen_range(0..4 * amp);
    let distractors: Vec<Distractor> = (0..config.distractors)
        .map(|_| Distractor {
            size: rng.gen_range(2..=3),
            x0: rng.gen_range(0..size as i64),
            y0: rng.gen_range(0..size as i64),
            vx: rng.gen_range(-2..=2),
            vy: rng.gen_range(-2..=2),
        })
        .collect();

    let s = front_absent + pre_len;
    let e = s + active_len - 1;
    let pre = (pre_len > 0).then(|| (front_absent, s - 1));
    let post = (post_len > 0).then(|| (e + 1, e + post_len));
    let visible = front_absent..=e + post_len;

    let mut frames = Vec::with_capacity(config.video_len);
    let mut gt = Vec::with_capacity(active_len);
    for k in 0..config.video_len {
        let mut pixels = vec![0.0; size * size];
        for d in &distractors {
            let ki = k as i64;
            stamp_wrapped(
                &mut pixels,
                size,
                d.x0 + ki * d.vx,
                d.y0 + ki * d.vy,
                d.size,
                DISTRACTOR_BRIGHTNESS,
            );
        }
        if visible.contains(&k) {
            // Transitional frames hold the nearest boundary pose plus at
            // most one pixel of jitter per axis.
            let d = ACTOR_SPEED * (k.clamp(s, e) - s) as i64;
            let (mut cx, mut cy) = actor_center(class, d, bx, by, px, py, amp);
            if k < s || k > e {
                cx += rng.gen_range(-1..=1);
                cy += rng.gen_range(-1..=1);
            } else {
                gt.push(pixel_box(cx, cy, side, size));
            }
            stamp_square(&mut pixels, size, cx, cy, side, ACTOR_BRIGHTNESS);
        }
        for v in pixels.iter_mut() {
            *v = (*v + rng.gen::<f64>() * config.noise_amp).min(1.0);
            *v = *v as f32 as f64;
        }
        frames.push(Tensor::new(vec![1, 1, size, size], pixels)?);
    }

    Ok(Episode {
        video: format!("ep{episode_seed:04}"),
        class,
        frames,
        gt,
        active: (s, e),
        pre,
        post,
    })
}

pub fn generate_dataset(config: &SynthConfig, count: usize) -> Result<Vec<Episode>> {
    (0..count as u64).map(|i| generate_episode(config, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    video: String,
    class: usize,
    active: (usize, usize),
    pre: Option<(usize, usize)>,
    post: Option<(usize, usize)>,
    frames: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: SynthConfig,
    episodes: Vec<ManifestEntry>,
}

/// Layout: `manifest.json` (config, per-episode metadata, frame digests),
/// `gt.jsonl`, and one f32 little-endian frame file per episode.
pub fn write_dataset(config: &SynthConfig, episodes: &[Episode], dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)
        .map_err(|e| Error::io(frames_dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut values = Vec::with_capacity(ep.frames.len() * config.frame_size.pow(2));
        for frame in &ep.frames {
            values.extend(frame.values().iter().map(|&v| v as f32));
        }
        let path = frames_dir.join(format!("{}.bin", ep.video));
        write_f32_bin(&path, &values)?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.push(ManifestEntry {
            video: ep.video.clone(),
            class: ep.class,
            active: ep.active,
            pre: ep.pre,
            post: ep.post,
            frames: ep.frames.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest { config: config.clone(), episodes: entries };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest encode: {e}")))?;
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let gts: Vec<GtRecord> = episodes.iter().map(Episode::gt_record).collect();
    write_jsonl(&dir.join("gt.jsonl"), &gts)
}

pub fn load_dataset(dir: &Path) -> Result<(SynthConfig, Vec<Episode>)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Record {
        path: manifest_path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    let gts: Vec<GtRecord> = read_jsonl(&dir.join("gt.jsonl"))?;
    if gts.len() != manifest.episodes.len() {
        return Err(Error::config(format!(
            "gt.jsonl has {} records, manifest lists {} episodes",
            gts.len(),
            manifest.episodes.len()
        )));
    }
    let size = manifest.config.frame_size;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (entry, gt_rec) in manifest.episodes.iter().zip(&gts) {
        if gt_rec.video != entry.video || gt_rec.class != entry.class {
            return Err(Error::config(format!(
                "gt record for {} does not match manifest entry {}",
                gt_rec.video, entry.video
            )));
        }
        let path = dir.join("frames").join(format!("{}.bin", entry.video));
        let values = read_f32_bin(&path, entry.frames * size * size)?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::config(format!("{}: frame digest mismatch", path.display())));
        }
        let frames = values
            .chunks_exact(size * size)
            .map(|chunk| {
                Tensor::new(vec![1, 1, size, size], chunk.iter().map(|&v| v as f64).collect())
            })
            .collect::<Result<Vec<Tensor>>>()?;
        let expected_gt = entry.active.1 - entry.active.0 + 1;
        if gt_rec.frames.len() != expected_gt {
            return Err(Error::config(format!(
                "{}: {} gt frames, active extent needs {}",
                entry.video,
                gt_rec.frames.len(),
                expected_gt
            )));
        }
        episodes.push(Episode {
            video: entry.video.clone(),
            class: entry.class,
            frames,
            gt: gt_rec.frames.iter().map(|f| f.bbox).collect(),
            active: entry.active,
            pre: entry.pre,
            post: entry.post,
        });
    }
    Ok((manifest.config, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bounding box of pixels brighter than any distractor plus noise; by
    /// construction that is exactly the actor footprint.
    fn bright_bbox(frame: &Tensor, size: usize) -> Option<BoxXYXY> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut hit = false;
        for y in 0..size {
            for x in 0..size {
                if frame.values()[y * size + x] > 0.6 {
                    hit = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        let s = size as f64;
        hit.then(|| BoxXYXY::new(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s))
    }

    #[test]
    fn generation_is_deterministic() {
        let config = SynthConfig::default();
        let a = generate_episode(&config, 5).unwrap();
        let b = generate_episode(&config, 5).unwrap();
        assert_eq!(a.class, b.class);
        assert_eq!(a.active, b.active);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.values().iter().zip(fb.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = generate_episode(&config, 6).unwrap();
        assert!(a.frames[0].values() != c.frames[0].values());
    }

    #[test]
    fn timeline_layout_is_consistent() {
        let config = SynthConfig::default();
        for seed in 0..30 {
            let ep = generate_episode(&config, seed).unwrap();
            let (s, e) = ep.active;
            assert!(s <= e && e < config.video_len);
            assert_eq!(ep.gt.len(), e - s + 1);
            let pre = ep.pre.expect("default config has nonzero transitions");
            let post = ep.post.expect("default config has nonzero transitions");
            assert_eq!(pre.1 + 1, s);
            assert_eq!(post.0, e + 1);
            assert!(pre.1 - pre.0 + 1 >= config.transition_len.0);
            assert!(post.1 - post.0 + 1 <= config.transition_len.1);
        }
    }

    #[test]
    fn gt_boxes_match_rendered_actor_exactly() {
        let config = SynthConfig { distractors: 0, ..SynthConfig::default() };
        for seed in 0..10 {
            let ep = generate_episode(&config, seed).unwrap();
            for (i, &gt) in ep.gt.iter().enumerate() {
                let frame = &ep.frames[ep.active.0 + i];
                let found = bright_bbox(frame, config.frame_size).unwrap();
                assert_eq!(found, gt, "{} frame {}", ep.video, ep.active.0 + i);
            }
        }
    }

    #[test]
    fn transitional_frames_overlap_boundary_gt_without_annotation() {
        let config = SynthConfig::default();
        for seed in 0..40 {
            let ep = generate_episode(&config, seed).unwrap();
            let first_gt = ep.gt[0];
            let last_gt = *ep.gt.last().unwrap();
            let check = |range: (usize, usize), anchor: BoxXYXY| {
                for k in range.0..=range.1 {
                    let found = bright_bbox(&ep.frames[k], config.frame_size)
                        .expect("actor visible on transitional frame");
                    assert!(
                        crate::boxes::iou(found, anchor) >= 0.5,
                        "{} frame {k}: iou {}",
                        ep.video,
                        crate::boxes::iou(found, anchor)
                    );
                }
            };
            check(ep.pre.unwrap(), first_gt);
            check(ep.post.unwrap(), last_gt);
        }
    }

    #[test]
    fn absent_frames_have_no_actor() {
        let config = SynthConfig::default();
        let mut saw_absent = false;
        for seed in 0..30 {
            let ep = generate_episode(&config, seed).unwrap();
            let visible = ep.pre.unwrap().0..=ep.post.unwrap().1;
            for k in 0..config.video_len {
                if !visible.contains(&k) {
                    saw_absent = true;
                    assert!(bright_bbox(&ep.frames[k], config.frame_size).is_none());
                }
            }
        }
        assert!(saw_absent);
    }

    #[test]
    fn zero_transitions_leave_gt_on_entire_visible_extent() {
        let config = SynthConfig { transition_len: (0, 0), ..SynthConfig::default() };
        let ep = generate_episode(&config, 3).unwrap();
        assert!(ep.pre.is_none() && ep.post.is_none());
        for k in 0..config.video_len {
            let visible = bright_bbox(&ep.frames[k], config.frame_size).is_some();
            let annotated = (ep.active.0..=ep.active.1).contains(&k);
            assert_eq!(visible, annotated, "frame {k}");
        }
    }

    #[test]
    fn class_balance_is_within_three_sigma() {
        let config = SynthConfig::default();
        let n = 300;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            counts[generate_episode(&config, seed).unwrap().class] += 1;
        }
        let expect = n as f64 / config.num_classes as f64;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for class in 1..=config.num_classes {
            let dev = (counts[class] as f64 - expect).abs();
            assert!(dev <= 3.0 * sigma, "class {class}: {} vs {expect}", counts[class]);
        }
    }

    #[test]
    fn single_frames_of_class_1_and_2_are_distribution_identical() {
        // Two-sample chi-square on actor centers, one sampled active frame
        // per episode (frames within an episode are correlated), 500 frames
        // per class, binned by pooled per-axis quartiles so all 16 cells
        // stay occupied. df 15, 5% critical value 24.996.
        let config = SynthConfig::default();
        let mut pick = ChaCha8Rng::seed_from_u64(41);
        let mut centers: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
        let mut seed = 0;
        while centers[0].len() < 500 || centers[1].len() < 500 {
            let ep = generate_episode(&config, seed).unwrap();
            seed += 1;
            if ep.class > 2 || centers[ep.class - 1].len() >= 500 {
                continue;
            }
            let c = ep.gt[pick.gen_range(0..ep.gt.len())].center_form();
            centers[ep.class - 1].push((c.0, c.1));
        }
        let quartiles = |pick: fn(&(f64, f64)) -> f64| {
            let mut pooled: Vec<f64> =
                centers[0].iter().chain(&centers[1]).map(pick).collect();
            pooled.sort_by(f64::total_cmp);
            [pooled[250], pooled[500], pooled[750]]
        };
        let qx = quartiles(|c| c.0);
        let qy = quartiles(|c| c.1);
        let bin = |v: f64, q: &[f64; 3]| q.iter().filter(|&&b| b < v).count();
        let mut o1 = [0.0f64; 16];
        let mut o2 = [0.0f64; 16];
        for &(x, y) in &centers[0] {
            o1[bin(y, &qy) * 4 + bin(x, &qx)] += 1.0;
        }
        for &(x, y) in &centers[1] {
            o2[bin(y, &qy) * 4 + bin(x, &qx)] += 1.0;
        }
        let (n1, n2) = (500.0, 500.0);
        let mut chi2 = 0.0;
        for i in 0..16 {
            assert!(o1[i] + o2[i] > 0.0, "empty cell {i} breaks the df=15 assumption");
            let d = o1[i] * n2 - o2[i] * n1;
            chi2 += d * d / (n1 * n2 * (o1[i] + o2[i]));
        }
        assert!(chi2 < 24.996, "chi-square {chi2} rejects identity at 5%");
    }

    #[test]
    fn orbit_class_traces_both_axes() {
        let config = SynthConfig::default();
        let mut seed = 0;
        let ep = loop {
            let ep = generate_episode(&config, seed).unwrap();
            if ep.class == 3 && ep.gt.len() >= 16 {
                break ep;
            }
            seed += 1;
        };
        let xs: Vec<f64> = ep.gt.iter().map(|b| b.center_form().0).collect();
        let ys: Vec<f64> = ep.gt.iter().map(|b| b.center_form().1).collect();
        let spread = |v: &[f64]| {
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let amp_span = 2.0 * config.amplitude() as f64 / config.frame_size as f64;
        assert!(spread(&xs) > amp_span * 0.5);
        assert!(spread(&ys) > amp_span * 0.5);
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        let episodes = generate_dataset(&config, 4).unwrap();
        write_dataset(&config, &episodes, dir.path()).unwrap();
        let (config2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(config2, config);
        assert_eq!(back.len(), episodes.len());
        for (a, b) in episodes.iter().zip(&back) {
            assert_eq!(a.video, b.video);
            assert_eq!(a.class, b.class);
            assert_eq!(a.active, b.active);
            assert_eq!(a.pre, b.pre);
            assert_eq!(a.post, b.post);
            assert_eq!(a.gt, b.gt);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.values().iter().zip(fb.values()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        write_dataset(&config, &[], dir.path()).unwrap();
        let (_, back) = load_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn checksums_are_stable_across_regeneration() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        write_dataset(&config, &generate_dataset(&config, 3).unwrap(), dir1.path()).unwrap();
        write_dataset(&config, &generate_dataset(&config, 3).unwrap(), dir2.path()).unwrap();
        let m1 = std::fs::read_to_string(dir1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read_to_string(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn corrupted_frames_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        write_dataset(&config, &generate_dataset(&config, 1).unwrap(), dir.path()).unwrap();
        let bin = dir.path().join("frames").join("ep0000.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[100] ^= 0x01;
        std::fs::write(&bin, bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.num_classes = 1));
        assert!(bad(|c| c.num_classes = 4));
        assert!(bad(|c| c.actor_size = (4, 8)));
        assert!(bad(|c| c.actor_size = (7, 9)));
        assert!(bad(|c| c.transition_len = (6, 20)));
        assert!(bad(|c| c.active_len = (30, 40)));
        assert!(bad(|c| c.noise_amp = 0.5));
        assert!(SynthConfig::default().validate().is_ok());
    }
}
