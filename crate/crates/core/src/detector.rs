//! Recurrent multi-scale detector.
//!
//! A clip of frames runs through a small convolutional backbone to the first
//! anchor scale. Each scale owns a bidirectional ConvLSTM that spreads
//! temporal context over the clip, followed by a 3x3 head emitting, per
//! anchor: 4 box offsets, K+1 action scores (background first), and K
//! transition scores. The fused ConvLSTM output of one scale is downsampled
//! to feed the next.
//!
//! Head output is gathered into flat `[frames * anchors, _]` matrices whose
//! row order matches [`crate::anchors::build_anchor_grid`]. Category
//! probabilities and state scores are computed in-graph from the raw score
//! pair, so training and inference read the same tensors.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_grid, decode_box, AnchorGrid};
use crate::boxes::{nms_indices, BoxXYXY};
use crate::convlstm::{run_bidirectional, BiConvLstmParams, BiLayerNodes};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::transition::ScorePair;
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    /// Feature strides, strictly increasing; each must be a power-of-two
    /// multiple of the previous one (the trunk downsamples by 2).
    pub scales: Vec<usize>,
    pub aspect_ratios: Vec<f64>,
    /// Real action categories; background is index 0 everywhere.
    pub num_classes: usize,
    /// Training clip length. Inference may feed any length.
    pub clip_len: usize,
    pub stem_channels: usize,
    /// Channel width at the anchor scales.
    pub trunk_channels: usize,
    /// ConvLSTM hidden channels per direction.
    pub hidden_channels: usize,
    pub lstm_kernel: usize,
    /// Channel dropout rate inside the ConvLSTM cells.
    pub dropout: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 64,
            input_channels: 1,
            scales: vec![8, 16],
            aspect_ratios: vec![1.0, 2.0, 0.5],
            num_classes: 3,
            clip_len: 16,
            stem_channels: 8,
            trunk_channels: 24,
            hidden_channels: 12,
            lstm_kernel: 3,
            dropout: 0.3,
        }
    }
}

impl DetectorConfig {
    /// Small configuration for fast numeric tests.
    pub fn tiny() -> Self {
        DetectorConfig {
            input_size: 16,
            input_channels: 1,
            scales: vec![4, 8],
            aspect_ratios: vec![1.0, 0.5],
            num_classes: 2,
            clip_len: 3,
            stem_channels: 2,
            trunk_channels: 3,
            hidden_channels: 2,
            lstm_kernel: 3,
            dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::config("input size and channels must be positive"));
        }
        if self.scales.is_empty() {
            return Err(Error::config("at least one scale required"));
        }
        if !self.scales[0].is_power_of_two() {
            return Err(Error::config(format!("first scale {} must be a power of two", self.scales[0])));
        }
        for w in self.scales.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 || !(w[1] / w[0]).is_power_of_two() {
                return Err(Error::config(format!("scales must grow by powers of two, got {} after {}", w[1], w[0])));
            }
        }
        for &s in &self.scales {
            if self.input_size % s != 0 {
                return Err(Error::config(format!("scale {} does not divide input size {}", s, self.input_size)));
            }
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::config("aspect ratios must be positive and non-empty"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("at least one action category required"));
        }
        if self.clip_len == 0 {
            return Err(Error::config("clip length must be positive"));
        }
        if self.stem_channels == 0 || self.trunk_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.lstm_kernel % 2 == 0 {
            return Err(Error::config("convlstm kernel must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Columns per anchor in the head output: 4 offsets, K+1 action scores,
    /// K transition scores.
    pub fn head_width(&self) -> usize {
        2 * self.num_classes + 5
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// Channel plan for the stem-to-first-scale downsample chain.
    fn trunk_plan(&self) -> Vec<usize> {
        let steps = self.scales[0].trailing_zeros() as usize;
        let mut plan = Vec::with_capacity(steps);
        for i in 1..=steps {
            let c = self.stem_channels as f64
                + (self.trunk_channels as f64 - self.stem_channels as f64) * i as f64 / steps as f64;
            plan.push(c.round().max(1.0) as usize);
        }
        plan
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    fn init(cout: usize, cin: usize, k: usize, stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        ConvParams {
            weight: Tensor::from_fn(vec![cout, cin, k, k], |_| rng.gen_range(-1.0..1.0) * std),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }
}

/// Initial logit for foreground action and transition scores. Foreground
/// priors start well below background so that a fresh model calls everything
/// background: early hard negatives are easy, and the mined transitional set
/// stays empty instead of being flooded by coin-flip foreground calls on
/// every annotation-free frame. Mining then switches on only where the
/// category head has accumulated real evidence.
const FG_PRIOR: f64 = -4.0;

fn prime_head_bias(bias: &mut Tensor, config: &DetectorConfig) {
    let k = config.num_classes;
    let width = config.head_width();
    let b = bias.values_mut();
    for a in 0..config.anchors_per_cell() {
        for c in 0..k {
            b[a * width + 5 + c] = FG_PRIOR;
            b[a * width + 5 + k + c] = FG_PRIOR;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// 2x downsamples from the previous scale; empty on the first stage.
    pub between: Vec<ConvParams>,
    pub lstm: BiConvLstmParams,
    pub head: ConvParams,
}

pub struct DetectorModel {
    pub config: DetectorConfig,
    pub stem: ConvParams,
    pub downs: Vec<ConvParams>,
    pub stages: Vec<Stage>,
    grid: AnchorGrid,
}

impl DetectorModel {
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = build_anchor_grid(config.input_size, &config.scales, &config.aspect_ratios)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::init(config.stem_channels, config.input_channels, 3, 1, 1, &mut rng);
        let mut downs = Vec::new();
        let mut cin = config.stem_channels;
        for cout in config.trunk_plan() {
            downs.push(ConvParams::init(cout, cin, 2, 2, 0, &mut rng));
            cin = cout;
        }
        let mut stages = Vec::new();
        let head_cout = config.anchors_per_cell() * config.head_width();
        for i in 0..config.scales.len() {
            let mut between = Vec::new();
            if i > 0 {
                let ratio = config.scales[i] / config.scales[i - 1];
                for _ in 0..ratio.trailing_zeros() {
                    between.push(ConvParams::init(config.trunk_channels, cin, 2, 2, 0, &mut rng));
                    cin = config.trunk_channels;
                }
            }
            let lstm = BiConvLstmParams::init(
                cin,
                config.hidden_channels,
                config.trunk_channels,
                config.lstm_kernel,
                config.dropout,
                &mut rng,
            )?;
            let mut head = ConvParams::init(head_cout, config.trunk_channels, 3, 1, 1, &mut rng);
            prime_head_bias(&mut head.bias, &config);
            cin = config.trunk_channels;
            stages.push(Stage { between, lstm, head });
        }
        Ok(DetectorModel { config, stem, downs, stages, grid })
    }

    pub fn anchor_grid(&self) -> &AnchorGrid {
        &self.grid
    }

    /// Anchors per frame across all scales.
    pub fn anchors_per_frame(&self) -> usize {
        self.grid.len()
    }

    /// Stable (name, tensor) listing; checkpoint and optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, c: &'a ConvParams) {
            out.push((format!("{}.w", name), &c.weight));
            out.push((format!("{}.b", name), &c.bias));
        }
        push(&mut out, "stem".into(), &self.stem);
        for (i, d) in self.downs.iter().enumerate() {
            push(&mut out, format!("down{}", i), d);
        }
        const GATES: [&str; 12] =
            ["w_xi", "w_xf", "w_xo", "w_xg", "w_hi", "w_hf", "w_ho", "w_hg", "b_i", "b_f", "b_o", "b_g"];
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, b) in stage.between.iter().enumerate() {
                push(&mut out, format!("stage{}.between{}", s, i), b);
            }
            for (dir, cell) in [("fwd", &stage.lstm.forward), ("bwd", &stage.lstm.backward)] {
                for (name, t) in GATES.iter().zip(cell.tensors()) {
                    out.push((format!("stage{}.lstm.{}.{}", s, dir, name), t));
                }
            }
            out.push((format!("stage{}.lstm.fuse.w", s), &stage.lstm.fuse_w));
            out.push((format!("stage{}.lstm.fuse.b", s), &stage.lstm.fuse_b));
            push(&mut out, format!("stage{}.head", s), &stage.head);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: String, c: &'a mut ConvParams) {
            out.push((format!("{}.w", name), &mut c.weight));
            out.push((format!("{}.b", name), &mut c.bias));
        }
        const GATES: [&str; 12] =
            ["w_xi", "w_xf", "w_xo", "w_xg", "w_hi", "w_hf", "w_ho", "w_hg", "b_i", "b_f", "b_o", "b_g"];
        push(&mut out, "stem".into(), &mut self.stem);
        for (i, d) in self.downs.iter_mut().enumerate() {
            push(&mut out, format!("down{}", i), d);
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, b) in stage.between.iter_mut().enumerate() {
                push(&mut out, format!("stage{}.between{}", s, i), b);
            }
            for (dir, cell) in [("fwd", &mut stage.lstm.forward), ("bwd", &mut stage.lstm.backward)] {
                for (name, t) in GATES.iter().zip(cell.tensors_mut()) {
                    out.push((format!("stage{}.lstm.{}.{}", s, dir, name), t));
                }
            }
            out.push((format!("stage{}.lstm.fuse.w", s), &mut stage.lstm.fuse_w));
            out.push((format!("stage{}.lstm.fuse.b", s), &mut stage.lstm.fuse_b));
            push(&mut out, format!("stage{}.head", s), &mut stage.head);
        }
        out
    }

    /// Inserts every parameter as a leaf (in `named_params` order) and wires
    /// the structured node bundles. Returns the flat leaf list too; it backs
    /// gradient reads and the external gradient-check harness.
    pub fn insert_params(&self, g: &mut Graph, trainable: bool) -> Result<ModelNodes> {
        let leaves: Vec<NodeId> = self
            .named_params()
            .iter()
            .map(|(_, t)| {
                let mut t = (*t).clone();
                t.set_requires_grad(trainable);
                g.leaf(t)
            })
            .collect();
        self.nodes_from_leaves(g, &leaves)
    }

    /// Builds the structured bundles from externally inserted leaves, which
    /// must follow `named_params` order.
    pub fn nodes_from_leaves(&self, g: &mut Graph, leaves: &[NodeId]) -> Result<ModelNodes> {
        let expected = self.named_params().len();
        if leaves.len() != expected {
            return Err(Error::shape(format!("model wants {} parameter leaves, got {}", expected, leaves.len())));
        }
        let mut it = leaves.iter().copied();
        let conv = |it: &mut dyn Iterator<Item = NodeId>, c: &ConvParams| -> ConvNodes {
            ConvNodes {
                w: it.next().expect("leaf count checked"),
                b: it.next().expect("leaf count checked"),
                stride: c.stride,
                padding: c.padding,
            }
        };
        let stem = conv(&mut it, &self.stem);
        let downs: Vec<ConvNodes> = self.downs.iter().map(|d| conv(&mut it, d)).collect();
        let mut stages = Vec::new();
        for stage in &self.stages {
            let between: Vec<ConvNodes> = stage.between.iter().map(|b| conv(&mut it, b)).collect();
            let cell_ids = |it: &mut dyn Iterator<Item = NodeId>| -> [NodeId; 12] {
                let mut ids = [NodeId::default(); 12];
                for slot in ids.iter_mut() {
                    *slot = it.next().expect("leaf count checked");
                }
                ids
            };
            let fwd_ids = cell_ids(&mut it);
            let bwd_ids = cell_ids(&mut it);
            let fuse_w = it.next().expect("leaf count checked");
            let fuse_b = it.next().expect("leaf count checked");
            let fwd = crate::convlstm::stack_cell(g, &fwd_ids, &stage.lstm.forward)?;
            let bwd = crate::convlstm::stack_cell(g, &bwd_ids, &stage.lstm.backward)?;
            let lstm = BiLayerNodes { fwd, bwd, fuse_w, fuse_b, dropout: stage.lstm.dropout };
            let head = conv(&mut it, &stage.head);
            stages.push(StageNodes { between, lstm, head });
        }
        debug_assert!(it.next().is_none());
        Ok(ModelNodes { leaves: leaves.to_vec(), stem, downs, stages })
    }

    /// Runs a clip (any length >= 1) through the detector. Frame tensors are
    /// `[1, input_channels, input_size, input_size]`.
    pub fn forward_clip(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        frames: &[NodeId],
        training: bool,
        seed: u64,
    ) -> Result<ClipOutput> {
        if frames.is_empty() {
            return Err(Error::shape("forward_clip: empty clip"));
        }
        let want = vec![1, self.config.input_channels, self.config.input_size, self.config.input_size];
        for &f in frames {
            if g.values(f).shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "forward_clip: frame shape {:?}, want {:?}",
                    g.values(f).shape(),
                    want
                )));
            }
        }
        let k = self.config.num_classes;
        let width = self.config.head_width();
        let a = self.config.anchors_per_cell();

        // backbone to the first scale
        let mut feats: Vec<NodeId> = Vec::with_capacity(frames.len());
        for &f in frames {
            let mut x = conv_relu(g, &nodes.stem, f)?;
            for d in &nodes.downs {
                x = conv_relu(g, d, x)?;
            }
            feats.push(x);
        }

        // per-scale recurrence, heads, and gather into flat row matrices
        let mut per_scale_reg: Vec<Vec<NodeId>> = Vec::new();
        let mut per_scale_act: Vec<Vec<NodeId>> = Vec::new();
        let mut per_scale_trn: Vec<Vec<NodeId>> = Vec::new();
        for (s, stage) in nodes.stages.iter().enumerate() {
            for b in &stage.between {
                for f in feats.iter_mut() {
                    *f = conv_relu(g, b, *f)?;
                }
            }
            let hs = run_bidirectional(g, &stage.lstm, &feats, training, derive_seed(seed, 7, s as u64))?;
            let cells = self.config.input_size / self.config.scales[s];
            let (reg_idx, act_idx, trn_idx) = head_gather_indices(cells, a, k, width);
            let rows = cells * cells * a;
            let mut regs = Vec::with_capacity(hs.len());
            let mut acts = Vec::with_capacity(hs.len());
            let mut trns = Vec::with_capacity(hs.len());
            for &h in &hs {
                let raw = g.conv2d(h, stage.head.w, stage.head.b, 1, 1)?;
                regs.push(g.gather(raw, Arc::clone(&reg_idx), vec![rows, 4])?);
                acts.push(g.gather(raw, Arc::clone(&act_idx), vec![rows, k + 1])?);
                trns.push(g.gather(raw, Arc::clone(&trn_idx), vec![rows, k])?);
            }
            per_scale_reg.push(regs);
            per_scale_act.push(acts);
            per_scale_trn.push(trns);
            feats = hs;
        }

        // frame-major concatenation: frame 0 all scales, frame 1 all scales...
        // matching anchor index = frame * anchors_per_frame + grid index
        let mut reg_rows = Vec::with_capacity(frames.len() * per_scale_reg.len());
        let mut act_rows = Vec::with_capacity(reg_rows.capacity());
        let mut trn_rows = Vec::with_capacity(reg_rows.capacity());
        for t in 0..frames.len() {
            for s in 0..per_scale_reg.len() {
                reg_rows.push(per_scale_reg[s][t]);
                act_rows.push(per_scale_act[s][t]);
                trn_rows.push(per_scale_trn[s][t]);
            }
        }
        let offsets = concat_tree(g, &reg_rows)?;
        let action = concat_tree(g, &act_rows)?;
        let transition = concat_tree(g, &trn_rows)?;

        // category = softmax(action + [0 | transition]); state = sigmoid(diff)
        let total_rows = frames.len() * self.anchors_per_frame();
        let zero_col = g.constant(Tensor::zeros(vec![total_rows, 1]));
        let padded = g.concat(zero_col, transition, 1)?;
        let logits = g.add(action, padded)?;
        let category = g.softmax_lastdim(logits)?;
        let fg_idx: Vec<usize> = (0..total_rows).flat_map(|r| (1..=k).map(move |j| r * (k + 1) + j)).collect();
        let act_fg = g.gather(action, Arc::new(fg_idx), vec![total_rows, k])?;
        let diff = g.sub(act_fg, transition)?;
        let state = g.sigmoid(diff);

        Ok(ClipOutput {
            frames: frames.len(),
            anchors_per_frame: self.anchors_per_frame(),
            num_classes: k,
            offsets,
            action,
            transition,
            category,
            state,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub padding: usize,
}

pub struct StageNodes {
    pub between: Vec<ConvNodes>,
    pub lstm: BiLayerNodes,
    pub head: ConvNodes,
}

pub struct ModelNodes {
    /// All parameter leaves in `named_params` order.
    pub leaves: Vec<NodeId>,
    pub stem: ConvNodes,
    pub downs: Vec<ConvNodes>,
    pub stages: Vec<StageNodes>,
}

fn conv_relu(g: &mut Graph, c: &ConvNodes, x: NodeId) -> Result<NodeId> {
    let y = g.conv2d(x, c.w, c.b, c.stride, c.padding)?;
    Ok(g.relu(y))
}

/// Balanced pairwise concat along axis 0.
fn concat_tree(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    match nodes.len() {
        0 => Err(Error::shape("concat_tree: empty list")),
        1 => Ok(nodes[0]),
        n => {
            let mid = n / 2;
            let a = concat_tree(g, &nodes[..mid])?;
            let b = concat_tree(g, &nodes[mid..])?;
            g.concat(a, b, 0)
        }
    }
}

/// Flat gather indices mapping a `[1, A*width, cells, cells]` head output to
/// `[cells*cells*A, _]` row matrices for offsets, action, and transition
/// columns. Row order: row-major cells, then anchor-within-cell.
fn head_gather_indices(cells: usize, a: usize, k: usize, width: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let plane = cells * cells;
    let mut reg = Vec::with_capacity(plane * a * 4);
    let mut act = Vec::with_capacity(plane * a * (k + 1));
    let mut trn = Vec::with_capacity(plane * a * k);
    for y in 0..cells {
        for x in 0..cells {
            let pos = y * cells + x;
            for ai in 0..a {
                let base = ai * width;
                for d in 0..4 {
                    reg.push((base + d) * plane + pos);
                }
                for d in 4..5 + k {
                    act.push((base + d) * plane + pos);
                }
                for d in 5 + k..width {
                    trn.push((base + d) * plane + pos);
                }
            }
        }
    }
    (Arc::new(reg), Arc::new(act), Arc::new(trn))
}

/// Everything the loss and the decoder need from one clip, as graph nodes.
/// Row `r = frame * anchors_per_frame + anchor`.
pub struct ClipOutput {
    pub frames: usize,
    pub anchors_per_frame: usize,
    pub num_classes: usize,
    /// `[rows, 4]` raw box offsets.
    pub offsets: NodeId,
    /// `[rows, K+1]` raw action scores, background first.
    pub action: NodeId,
    /// `[rows, K]` raw transition scores.
    pub transition: NodeId,
    /// `[rows, K+1]` category probabilities.
    pub category: NodeId,
    /// `[rows, K]` state scores (1 active, 0 transitional).
    pub state: NodeId,
}

impl ClipOutput {
    pub fn rows(&self) -> usize {
        self.frames * self.anchors_per_frame
    }

    /// Raw score pair of one row, for inspection and tests.
    pub fn score_pair(&self, g: &Graph, row: usize) -> ScorePair {
        let k = self.num_classes;
        let act = &g.values(self.action).values()[row * (k + 1)..(row + 1) * (k + 1)];
        let trn = &g.values(self.transition).values()[row * k..(row + 1) * k];
        ScorePair { action: act.to_vec(), transition: trn.to_vec() }
    }
}

/// One decoded box on one frame. `class` is 1-based; `p` is the category
/// probability, `t` the state score of that class.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    pub frame: usize,
    pub class: usize,
    pub bbox: BoxXYXY,
    pub p: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    /// Drop candidates whose top category probability is below this.
    pub score_floor: f64,
    /// Per-class NMS threshold.
    pub nms_iou: f64,
    /// Keep at most this many detections per frame and class.
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_floor: 0.05, nms_iou: 0.45, top_k: 10 }
    }
}

/// Decodes a clip's output into per-frame detections: per anchor argmax
/// category, score floor, box decode against the anchor grid, then per-class
/// NMS and top-k. Ties in the argmax break to the lower category index.
pub fn decode_detections(
    g: &Graph,
    out: &ClipOutput,
    grid: &AnchorGrid,
    cfg: &DecodeConfig,
    frame_offset: usize,
) -> Vec<FrameDetection> {
    let k = out.num_classes;
    let apf = out.anchors_per_frame;
    debug_assert_eq!(apf, grid.len());
    let cat = g.values(out.category).values();
    let state = g.values(out.state).values();
    let offs = g.values(out.offsets).values();
    let mut dets = Vec::new();
    for f in 0..out.frames {
        // candidates per class for this frame
        let mut boxes: Vec<Vec<BoxXYXY>> = vec![Vec::new(); k + 1];
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); k + 1];
        let mut states: Vec<Vec<f64>> = vec![Vec::new(); k + 1];
        for a in 0..apf {
            let r = f * apf + a;
            let row = &cat[r * (k + 1)..(r + 1) * (k + 1)];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == 0 || row[best] < cfg.score_floor {
                continue;
            }
            let o = &offs[r * 4..r * 4 + 4];
            let bbox = decode_box(grid.anchors[a], [o[0], o[1], o[2], o[3]]).clip_unit();
            boxes[best].push(bbox);
            scores[best].push(row[best]);
            states[best].push(state[r * k + best - 1]);
        }
        for class in 1..=k {
            let kept = nms_indices(&boxes[class], &scores[class], cfg.nms_iou);
            for &i in kept.iter().take(cfg.top_k) {
                dets.push(FrameDetection {
                    frame: frame_offset + f,
                    class,
                    bbox: boxes[class][i],
                    p: scores[class][i],
                    t: states[class][i],
                });
            }
        }
    }
    dets
}
