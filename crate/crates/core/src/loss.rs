//! Training objective over one clip's head outputs.
//!
//! Target assembly (anchor matching, transitional mining, hard-negative
//! selection) runs outside the graph on forward values; the resulting index
//! sets are fixed, so the loss built from them is an ordinary differentiable
//! graph expression. The total is
//! `(cls + reg) / N_p + trans / N_t` with `N_p = |P|` and `N_t = |P| + |T|`
//! counted over the whole batch, so per-clip losses summed across a batch
//! reproduce the exact batch loss.

use std::sync::Arc;

use crate::anchors::{encode_box, match_anchors, AnchorGrid};
use crate::boxes::BoxXYXY;
use crate::detector::ClipOutput;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How annotation-free frames contribute to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mined anchors get state supervision toward the transitional side.
    TransitionAware,
    /// Mined anchors train as background in the category term instead.
    TransitionAsBackground,
    /// No mining; annotation-free frames contribute nothing.
    NoMining,
}

/// Score vector used for the mining comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningRule {
    /// Raw action scores, before the transition branch is added in.
    RawAction,
    /// Softmax category probabilities (monotone in action + transition).
    DecoupledCategory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub mining: MiningRule,
    /// Anchor-to-box IoU threshold for positives.
    pub match_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::TransitionAware, mining: MiningRule::RawAction, match_iou: 0.5 }
    }
}

impl LossMode {
    fn mines(self) -> bool {
        self != LossMode::NoMining
    }
}

/// Per-frame annotation. Labeled frames carry boxes with 1-based classes;
/// annotation-free frames are eligible for transitional mining.
#[derive(Debug, Clone)]
pub enum FrameLabel {
    Boxes(Vec<(BoxXYXY, usize)>),
    Unlabeled,
}

/// A matched anchor: `row` into the clip's flat matrices, its class target,
/// and the encoded box regression target.
#[derive(Debug, Clone)]
pub struct Positive {
    pub row: usize,
    pub class: usize,
    pub target: [f64; 4],
}

/// A mined transitional anchor with its predicted class.
#[derive(Debug, Clone, Copy)]
pub struct Mined {
    pub row: usize,
    pub class: usize,
}

/// Index sets feeding the loss terms for one clip.
#[derive(Debug, Clone, Default)]
pub struct ClipTargets {
    pub positives: Vec<Positive>,
    /// Rows of selected hard negatives on labeled frames.
    pub negatives: Vec<usize>,
    pub mined: Vec<Mined>,
}

impl ClipTargets {
    pub fn n_p(&self) -> usize {
        self.positives.len()
    }

    pub fn n_t(&self) -> usize {
        self.positives.len() + self.mined.len()
    }
}

/// Class mined from one score row (background first), or None when the
/// background score wins. Ties among foreground classes go to the lowest.
pub fn mined_class(scores: &[f64]) -> Option<usize> {
    let mut best = 1;
    for i in 2..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (scores[best] > scores[0]).then_some(best)
}

/// Keeps the `n_p` hardest negatives: lowest background probability, ties by
/// row. `candidates` are `(row, p_background)` pairs.
pub fn hard_negative_mine(candidates: &[(usize, f64)], n_p: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    sorted.truncate(n_p);
    sorted.into_iter().map(|(row, _)| row).collect()
}

/// Builds the index sets for one clip from its forward values and labels.
/// Matching and hard-negative selection run per labeled frame; mining runs
/// per annotation-free frame when the mode calls for it.
pub fn assemble_targets(
    g: &Graph,
    out: &ClipOutput,
    grid: &AnchorGrid,
    labels: &[FrameLabel],
    cfg: &LossConfig,
) -> Result<ClipTargets> {
    if labels.len() != out.frames {
        return Err(Error::shape(format!(
            "assemble_targets: {} labels for {} frames",
            labels.len(),
            out.frames
        )));
    }
    if grid.len() != out.anchors_per_frame {
        return Err(Error::shape(format!(
            "assemble_targets: grid has {} anchors, clip rows expect {}",
            grid.len(),
            out.anchors_per_frame
        )));
    }
    let k = out.num_classes;
    let cat = g.values(out.category).values();
    let act = g.values(out.action).values();
    let apf = out.anchors_per_frame;

    let mut targets = ClipTargets::default();
    for (t, label) in labels.iter().enumerate() {
        match label {
            FrameLabel::Boxes(boxes) => {
                for &(_, class) in boxes {
                    if class == 0 || class > k {
                        return Err(Error::config(format!(
                            "assemble_targets: class {} outside 1..={}",
                            class, k
                        )));
                    }
                }
                let gts: Vec<BoxXYXY> = boxes.iter().map(|b| b.0).collect();
                let matched = match_anchors(grid, &gts, cfg.match_iou);
                let mut frame_positive_rows = Vec::new();
                for (anchor, gt) in matched.positives() {
                    let row = t * apf + anchor;
                    let target = encode_box(grid.anchors[anchor], gts[gt])?;
                    targets.positives.push(Positive { row, class: boxes[gt].1, target });
                    frame_positive_rows.push(anchor);
                }
                let candidates: Vec<(usize, f64)> = (0..apf)
                    .filter(|a| matched.assignment[*a].is_none())
                    .map(|a| {
                        let row = t * apf + a;
                        (row, cat[row * (k + 1)])
                    })
                    .collect();
                targets.negatives.extend(hard_negative_mine(&candidates, frame_positive_rows.len()));
            }
            FrameLabel::Unlabeled => {
                if !cfg.mode.mines() {
                    continue;
                }
                for a in 0..apf {
                    let row = t * apf + a;
                    let scores = match cfg.mining {
                        MiningRule::RawAction => &act[row * (k + 1)..(row + 1) * (k + 1)],
                        MiningRule::DecoupledCategory => &cat[row * (k + 1)..(row + 1) * (k + 1)],
                    };
                    if let Some(class) = mined_class(scores) {
                        targets.mined.push(Mined { row, class });
                    }
                }
            }
        }
    }
    Ok(targets)
}

/// The loss terms of one clip as graph nodes. `cls`, `reg`, and `trans` are
/// unnormalized sums (for logging); `total` applies the batch normalizers.
pub struct LossTerms {
    pub cls: NodeId,
    pub reg: NodeId,
    pub trans: NodeId,
    pub total: NodeId,
}

fn zero(g: &mut Graph) -> NodeId {
    g.constant(Tensor::scalar(0.0))
}

fn neg_log_sum(g: &mut Graph, src: NodeId, idx: Vec<usize>, one_minus: bool) -> Result<NodeId> {
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let n = idx.len();
    let mut x = g.gather(src, Arc::new(idx), vec![n])?;
    if one_minus {
        x = g.one_minus(x);
    }
    let lp = g.log_clamped(x);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}

/// Builds this clip's contribution to the batch loss. `norm_p` and `norm_t`
/// are the batch-wide `N_p` and `N_t`; a zero count zeroes its term.
pub fn build_clip_loss(
    g: &mut Graph,
    out: &ClipOutput,
    targets: &ClipTargets,
    norm_p: usize,
    norm_t: usize,
    mode: LossMode,
) -> Result<LossTerms> {
    let k = out.num_classes;
    let rows = out.rows();
    for p in &targets.positives {
        if p.row >= rows || p.class == 0 || p.class > k {
            return Err(Error::config(format!("positive row {} class {} out of range", p.row, p.class)));
        }
    }
    for m in &targets.mined {
        if m.row >= rows || m.class == 0 || m.class > k {
            return Err(Error::config(format!("mined row {} class {} out of range", m.row, m.class)));
        }
    }
    if let Some(&row) = targets.negatives.iter().find(|&&r| r >= rows) {
        return Err(Error::config(format!("negative row {row} out of range")));
    }

    // category cross-entropy: positives toward their class, negatives toward
    // background; the background-baseline mode adds mined anchors as extra
    // background targets under the transition normalizer
    let mut cls_idx: Vec<usize> = targets.positives.iter().map(|p| p.row * (k + 1) + p.class).collect();
    cls_idx.extend(targets.negatives.iter().map(|&row| row * (k + 1)));
    let cls = neg_log_sum(g, out.category, cls_idx, false)?;

    // smooth-L1 between predicted and encoded target offsets
    let reg = if targets.positives.is_empty() {
        zero(g)
    } else {
        let idx: Vec<usize> =
            targets.positives.iter().flat_map(|p| (0..4).map(move |c| p.row * 4 + c)).collect();
        let flat: Vec<f64> = targets.positives.iter().flat_map(|p| p.target).collect();
        let n = idx.len();
        let pred = g.gather(out.offsets, Arc::new(idx), vec![n])?;
        let tgt = g.constant(Tensor::new(vec![n], flat)?);
        let d = g.sub(pred, tgt)?;
        let sl = g.smooth_l1(d);
        g.sum(sl)
    };

    let trans = match mode {
        LossMode::TransitionAware | LossMode::NoMining => {
            let pos_idx: Vec<usize> =
                targets.positives.iter().map(|p| p.row * k + (p.class - 1)).collect();
            let pos = neg_log_sum(g, out.state, pos_idx, false)?;
            let mined_idx: Vec<usize> =
                targets.mined.iter().map(|m| m.row * k + (m.class - 1)).collect();
            let mined = neg_log_sum(g, out.state, mined_idx, true)?;
            g.add(pos, mined)?
        }
        LossMode::TransitionAsBackground => {
            let idx: Vec<usize> = targets.mined.iter().map(|m| m.row * (k + 1)).collect();
            neg_log_sum(g, out.category, idx, false)?
        }
    };

    let cls_reg = g.add(cls, reg)?;
    let first = if norm_p == 0 { zero(g) } else { g.scale(cls_reg, 1.0 / norm_p as f64) };
    let second = if norm_t == 0 { zero(g) } else { g.scale(trans, 1.0 / norm_t as f64) };
    let total = g.add(first, second)?;
    Ok(LossTerms { cls, reg, trans, total })
}
