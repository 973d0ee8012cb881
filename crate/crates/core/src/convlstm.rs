//! ConvLSTM cell and bidirectional layer.
//!
//! The cell follows the usual convolutional LSTM gating but substitutes ReLU
//! for both tanh sites (candidate activation and cell readout):
//!
//! ```text
//! i = sigmoid(Wxi * x~ + Whi * h~ + bi)      x~ = dropout2d(x)
//! f = sigmoid(Wxf * x~ + Whf * h~ + bf)      h~ = dropout2d(h_prev)
//! o = sigmoid(Wxo * x~ + Who * h~ + bo)
//! g = relu   (Wxg * x~ + Whg * h~ + bg)
//! c = f .* c_prev + i .* g
//! h = o .* relu(c)
//! ```
//!
//! Channel dropout is applied to the input and to the previous hidden state
//! with independent masks at every step. Convolutions are stride 1 with
//! `kernel/2` padding, so the spatial extent never changes.
//!
//! For speed the four gates run as one convolution each for `x~` and `h~`:
//! the per-gate kernels are concatenated along the output-channel axis once
//! per sequence, and each step slices the 4*hidden result back apart. Cost
//! and memory per step are constant in sequence position.
//!
//! The bidirectional layer runs one cell per direction, concatenates the
//! two hidden states per frame, and fuses them with a ReLU-activated 1x1
//! convolution back to a chosen channel count.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One direction's parameters. Kernel layout `[hidden, in, k, k]` for the
/// input kernels, `[hidden, hidden, k, k]` for the recurrent ones.
#[derive(Debug, Clone)]
pub struct ConvLstmCellParams {
    pub w_xi: Tensor,
    pub w_xf: Tensor,
    pub w_xo: Tensor,
    pub w_xg: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_ho: Tensor,
    pub w_hg: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmCellParams {
    /// He-initialized cell; forget bias starts at 1 so early training does
    /// not wash the state out. `kernel` must be odd to preserve extent.
    pub fn init(in_channels: usize, hidden: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::config(format!("convlstm kernel must be odd, got {}", kernel)));
        }
        if in_channels == 0 || hidden == 0 {
            return Err(Error::config("convlstm wants positive channel counts"));
        }
        let mut conv = |cin: usize| {
            let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
            Tensor::from_fn(vec![hidden, cin, kernel, kernel], |_| rng.gen_range(-1.0..1.0) * std)
        };
        let (w_xi, w_xf, w_xo, w_xg) = (conv(in_channels), conv(in_channels), conv(in_channels), conv(in_channels));
        let (w_hi, w_hf, w_ho, w_hg) = (conv(hidden), conv(hidden), conv(hidden), conv(hidden));
        Ok(ConvLstmCellParams {
            w_xi,
            w_xf,
            w_xo,
            w_xg,
            w_hi,
            w_hf,
            w_ho,
            w_hg,
            b_i: Tensor::zeros(vec![hidden]),
            b_f: Tensor::full(vec![hidden], 1.0),
            b_o: Tensor::zeros(vec![hidden]),
            b_g: Tensor::zeros(vec![hidden]),
            in_channels,
            hidden,
            kernel,
        })
    }

    /// Canonical parameter order used by checkpoints and gradient checks.
    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_xi, &self.w_xf, &self.w_xo, &self.w_xg, &self.w_hi, &self.w_hf, &self.w_ho, &self.w_hg,
            &self.b_i, &self.b_f, &self.b_o, &self.b_g,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_xi, &mut self.w_xf, &mut self.w_xo, &mut self.w_xg, &mut self.w_hi, &mut self.w_hf,
            &mut self.w_ho, &mut self.w_hg, &mut self.b_i, &mut self.b_f, &mut self.b_o, &mut self.b_g,
        ]
    }
}

/// Graph nodes of one cell, gate kernels pre-stacked for the fused convs.
#[derive(Debug, Clone)]
pub struct CellNodes {
    wx: NodeId,
    wh: NodeId,
    bias: NodeId,
    zero_bias: NodeId,
    pub hidden: usize,
    pub kernel: usize,
    pub in_channels: usize,
}

/// Inserts 12 already-created leaf nodes (order of
/// [`ConvLstmCellParams::tensors`]) and stacks them for execution.
pub fn stack_cell(g: &mut Graph, leaves: &[NodeId; 12], meta: &ConvLstmCellParams) -> Result<CellNodes> {
    let cat4 = |g: &mut Graph, a: NodeId, b: NodeId, c: NodeId, d: NodeId| -> Result<NodeId> {
        let ab = g.concat(a, b, 0)?;
        let cd = g.concat(c, d, 0)?;
        g.concat(ab, cd, 0)
    };
    let wx = cat4(g, leaves[0], leaves[1], leaves[2], leaves[3])?;
    let wh = cat4(g, leaves[4], leaves[5], leaves[6], leaves[7])?;
    let bias = cat4(g, leaves[8], leaves[9], leaves[10], leaves[11])?;
    let zero_bias = g.constant(Tensor::zeros(vec![4 * meta.hidden]));
    Ok(CellNodes {
        wx,
        wh,
        bias,
        zero_bias,
        hidden: meta.hidden,
        kernel: meta.kernel,
        in_channels: meta.in_channels,
    })
}

/// Convenience: inserts the cell's tensors as leaves (trainable or not) and
/// stacks them. Returns the leaf ids in canonical order too.
pub fn insert_cell(g: &mut Graph, params: &ConvLstmCellParams, trainable: bool) -> Result<(CellNodes, [NodeId; 12])> {
    let mut ids = [NodeId::default(); 12];
    for (slot, t) in ids.iter_mut().zip(params.tensors()) {
        let mut tensor = (*t).clone();
        tensor.set_requires_grad(trainable);
        *slot = g.leaf(tensor);
    }
    let nodes = stack_cell(g, &ids, params)?;
    Ok((nodes, ids))
}

/// Dropout rates and mask seeding for one sequence pass.
#[derive(Debug, Clone, Copy)]
pub struct StepDropout {
    pub rate: f64,
    pub training: bool,
    /// Base seed; masks derive from (seed, stream, step and site).
    pub seed: u64,
    /// Distinguishes directions/layers sharing one base seed.
    pub stream: u64,
}

impl StepDropout {
    pub fn disabled() -> Self {
        StepDropout { rate: 0.0, training: false, seed: 0, stream: 0 }
    }
}

/// One recurrence step. Applies dropout to `x` and `h_prev` with independent
/// masks, then the gated update. Returns `(h, c)`.
pub fn cell_step(
    g: &mut Graph,
    cell: &CellNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    drop: StepDropout,
    step: u64,
) -> Result<(NodeId, NodeId)> {
    let pad = cell.kernel / 2;
    let xt = g.dropout2d(x, drop.rate, drop.training, derive_seed(drop.seed, drop.stream * 2, step))?;
    let ht = g.dropout2d(h_prev, drop.rate, drop.training, derive_seed(drop.seed, drop.stream * 2 + 1, step))?;
    let from_x = g.conv2d(xt, cell.wx, cell.bias, 1, pad)?;
    let from_h = g.conv2d(ht, cell.wh, cell.zero_bias, 1, pad)?;
    let pre = g.add(from_x, from_h)?;

    let shape = g.values(pre).shape().to_vec();
    let (batch, hw) = (shape[0], shape[2] * shape[3]);
    let ch = cell.hidden;
    let slice = |g: &mut Graph, gate: usize| -> Result<NodeId> {
        let mut idx = Vec::with_capacity(batch * ch * hw);
        for b in 0..batch {
            let base = (b * 4 * ch + gate * ch) * hw;
            idx.extend(base..base + ch * hw);
        }
        g.gather(pre, Arc::new(idx), vec![batch, ch, shape[2], shape[3]])
    };
    let i_pre = slice(g, 0)?;
    let f_pre = slice(g, 1)?;
    let o_pre = slice(g, 2)?;
    let g_pre = slice(g, 3)?;

    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.relu(g_pre);

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.relu(c);
    let h = g.mul(o, c_act)?;
    Ok((h, c))
}

/// Runs the cell over `xs` (one node per frame) from zero state. With
/// `reverse` the recurrence consumes frames last-to-first; outputs are
/// returned re-aligned so index `t` always belongs to frame `t`.
pub fn run_direction(
    g: &mut Graph,
    cell: &CellNodes,
    xs: &[NodeId],
    reverse: bool,
    drop: StepDropout,
) -> Result<Vec<NodeId>> {
    if xs.is_empty() {
        return Err(Error::shape("run_direction: empty sequence"));
    }
    let xshape = g.values(xs[0]).shape().to_vec();
    if xshape.len() != 4 || xshape[1] != cell.in_channels {
        return Err(Error::shape(format!(
            "run_direction: frame shape {:?} does not feed a {}-channel cell",
            xshape, cell.in_channels
        )));
    }
    let state_shape = vec![xshape[0], cell.hidden, xshape[2], xshape[3]];
    let mut h = g.constant(Tensor::zeros(state_shape.clone()));
    let mut c = g.constant(Tensor::zeros(state_shape));
    let mut out = vec![NodeId::default(); xs.len()];
    let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for &t in &order {
        let (nh, nc) = cell_step(g, cell, xs[t], h, c, drop, t as u64)?;
        h = nh;
        c = nc;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional layer parameters: one cell per direction plus the 1x1
/// fusion convolution mapping `2*hidden -> out_channels`.
#[derive(Debug, Clone)]
pub struct BiConvLstmParams {
    pub forward: ConvLstmCellParams,
    pub backward: ConvLstmCellParams,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub dropout: f64,
}

impl BiConvLstmParams {
    pub fn init(in_channels: usize, hidden: usize, out_channels: usize, kernel: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", dropout)));
        }
        let forward = ConvLstmCellParams::init(in_channels, hidden, kernel, rng)?;
        let backward = ConvLstmCellParams::init(in_channels, hidden, kernel, rng)?;
        let std = (2.0 / (2 * hidden) as f64).sqrt();
        let fuse_w = Tensor::from_fn(vec![out_channels, 2 * hidden, 1, 1], |_| rng.gen_range(-1.0..1.0) * std);
        let fuse_b = Tensor::zeros(vec![out_channels]);
        Ok(BiConvLstmParams { forward, backward, fuse_w, fuse_b, dropout })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse_w.shape()[0]
    }
}

/// Graph-side bundle for one bidirectional layer.
pub struct BiLayerNodes {
    pub fwd: CellNodes,
    pub bwd: CellNodes,
    pub fuse_w: NodeId,
    pub fuse_b: NodeId,
    pub dropout: f64,
}

pub fn insert_bilayer(g: &mut Graph, params: &BiConvLstmParams, trainable: bool) -> Result<(BiLayerNodes, Vec<NodeId>)> {
    let (fwd, fids) = insert_cell(g, &params.forward, trainable)?;
    let (bwd, bids) = insert_cell(g, &params.backward, trainable)?;
    let mut fw = params.fuse_w.clone();
    let mut fb = params.fuse_b.clone();
    fw.set_requires_grad(trainable);
    fb.set_requires_grad(trainable);
    let fuse_w = g.leaf(fw);
    let fuse_b = g.leaf(fb);
    let mut leaves: Vec<NodeId> = fids.to_vec();
    leaves.extend_from_slice(&bids);
    leaves.push(fuse_w);
    leaves.push(fuse_b);
    Ok((BiLayerNodes { fwd, bwd, fuse_w, fuse_b, dropout: params.dropout }, leaves))
}

/// Concatenates the two direction's hidden states per frame and fuses them
/// with a ReLU-activated 1x1 convolution.
pub fn bidirectional_fuse(g: &mut Graph, layer: &BiLayerNodes, hf: &[NodeId], hb: &[NodeId]) -> Result<Vec<NodeId>> {
    if hf.len() != hb.len() {
        return Err(Error::shape("bidirectional_fuse: direction lengths differ"));
    }
    let mut out = Vec::with_capacity(hf.len());
    for (&a, &b) in hf.iter().zip(hb) {
        let cat = g.concat(a, b, 1)?;
        let fused = g.conv2d(cat, layer.fuse_w, layer.fuse_b, 1, 0)?;
        out.push(g.relu(fused));
    }
    Ok(out)
}

/// Full bidirectional pass over a clip: both directions from zero state,
/// then per-frame fusion. Output `t` sees context from the whole clip.
pub fn run_bidirectional(
    g: &mut Graph,
    layer: &BiLayerNodes,
    xs: &[NodeId],
    training: bool,
    seed: u64,
) -> Result<Vec<NodeId>> {
    let fdrop = StepDropout { rate: layer.dropout, training, seed, stream: 0 };
    let bdrop = StepDropout { rate: layer.dropout, training, seed, stream: 1 };
    let hf = run_direction(g, &layer.fwd, xs, false, fdrop)?;
    let hb = run_direction(g, &layer.bwd, xs, true, bdrop)?;
    bidirectional_fuse(g, layer, &hf, &hb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar_cell(wxi: f64, wxf: f64, wxo: f64, wxg: f64, wh: f64) -> ConvLstmCellParams {
        let k = |v: f64| Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap();
        let b = || Tensor::zeros(vec![1]);
        ConvLstmCellParams {
            w_xi: k(wxi),
            w_xf: k(wxf),
            w_xo: k(wxo),
            w_xg: k(wxg),
            w_hi: k(wh),
            w_hf: k(wh),
            w_ho: k(wh),
            w_hg: k(wh),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_g: b(),
            in_channels: 1,
            hidden: 1,
            kernel: 1,
        }
    }

    fn frame(g: &mut Graph, v: f64) -> NodeId {
        g.constant(Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap())
    }

    #[test]
    fn scalar_step_matches_hand_computation() {
        let params = scalar_cell(0.2, 0.3, 0.4, 0.5, 0.6);
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        let x = frame(&mut g, 1.0);
        let h0 = frame(&mut g, 0.0);
        let c0 = frame(&mut g, 0.0);
        let (h, c) = cell_step(&mut g, &cell, x, h0, c0, StepDropout::disabled(), 0).unwrap();
        assert!((g.values(c).values()[0] - 0.27491699865623898).abs() < 1e-15);
        assert!((g.values(h).values()[0] - 0.16458941465064184).abs() < 1e-15);
        // second step with the recurrent path engaged
        let x2 = frame(&mut g, 1.0);
        let (h2, c2) = cell_step(&mut g, &cell, x2, h, c, StepDropout::disabled(), 1).unwrap();
        assert!((g.values(c2).values()[0] - 0.50827418808870684).abs() < 1e-14);
        assert!((g.values(h2).values()[0] - 0.31623111641204021).abs() < 1e-14);
    }

    #[test]
    fn candidate_gate_is_relu_not_tanh() {
        // pre-activation 2.0: tanh would cap the candidate at 0.964, relu keeps 2
        let params = scalar_cell(0.2, 0.3, 0.4, 2.0, 0.0);
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        let x = frame(&mut g, 1.0);
        let h0 = frame(&mut g, 0.0);
        let c0 = frame(&mut g, 0.0);
        let (h, c) = cell_step(&mut g, &cell, x, h0, c0, StepDropout::disabled(), 0).unwrap();
        assert!((g.values(c).values()[0] - 1.0996679946249559).abs() < 1e-15);
        assert!((g.values(h).values()[0] - 0.65835765860256734).abs() < 1e-15);
        // negative pre-activation: relu silences the write entirely
        let params = scalar_cell(0.2, 0.3, 0.4, -1.0, 0.0);
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        let x = frame(&mut g, 1.0);
        let h0 = frame(&mut g, 0.0);
        let c0 = frame(&mut g, 0.0);
        let (h, c) = cell_step(&mut g, &cell, x, h0, c0, StepDropout::disabled(), 0).unwrap();
        assert_eq!(g.values(c).values()[0], 0.0);
        assert_eq!(g.values(h).values()[0], 0.0);
    }

    #[test]
    fn zero_input_zero_bias_keeps_state_dark() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ConvLstmCellParams::init(2, 3, 3, &mut rng).unwrap();
        params.b_g = Tensor::zeros(vec![3]);
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        let xs: Vec<NodeId> = (0..4).map(|_| g.constant(Tensor::zeros(vec![1, 2, 5, 5]))).collect();
        let hs = run_direction(&mut g, &cell, &xs, false, StepDropout::disabled()).unwrap();
        for h in hs {
            assert!(g.values(h).values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reverse_direction_realigns_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ConvLstmCellParams::init(1, 2, 3, &mut rng).unwrap();
        params.b_i = Tensor::zeros(vec![2]);
        params.b_f = Tensor::zeros(vec![2]);
        params.b_o = Tensor::zeros(vec![2]);
        params.b_g = Tensor::zeros(vec![2]);
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        // only the last frame is lit
        let mut xs = Vec::new();
        for t in 0..4 {
            let v = if t == 3 { 1.0 } else { 0.0 };
            xs.push(g.constant(Tensor::full(vec![1, 1, 4, 4], v)));
        }
        let fwd = run_direction(&mut g, &cell, &xs, false, StepDropout::disabled()).unwrap();
        let bwd = run_direction(&mut g, &cell, &xs, true, StepDropout::disabled()).unwrap();
        let energy = |g: &Graph, id: NodeId| g.values(id).values().iter().map(|v| v.abs()).sum::<f64>();
        // forward pass cannot see frame 3 before reaching it
        assert_eq!(energy(&g, fwd[0]), 0.0);
        assert!(energy(&g, fwd[3]) > 0.0);
        // backward pass starts at frame 3 and carries it back to frame 0
        assert!(energy(&g, bwd[3]) > 0.0);
        assert!(energy(&g, bwd[0]) > 0.0);
    }

    #[test]
    fn output_length_and_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = BiConvLstmParams::init(3, 4, 5, 3, 0.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let (layer, leaves) = insert_bilayer(&mut g, &params, false).unwrap();
        assert_eq!(leaves.len(), 26);
        let xs: Vec<NodeId> = (0..6)
            .map(|t| g.constant(crate::gradcheck::random_tensor(vec![1, 3, 4, 4], 100 + t)))
            .collect();
        let out = run_bidirectional(&mut g, &layer, &xs, false, 0).unwrap();
        assert_eq!(out.len(), 6);
        for o in &out {
            assert_eq!(g.values(*o).shape(), &[1, 5, 4, 4]);
            // fusion ends in relu
            assert!(g.values(*o).values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dropout_masks_differ_per_step_and_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ConvLstmCellParams::init(8, 8, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let (cell, _) = insert_cell(&mut g, &params, false).unwrap();
        let drop = StepDropout { rate: 0.5, training: true, seed: 99, stream: 0 };
        let xs: Vec<NodeId> = (0..3).map(|_| g.constant(Tensor::full(vec![1, 8, 2, 2], 1.0))).collect();
        let hs = run_direction(&mut g, &cell, &xs, false, drop).unwrap();
        // same input every step; surviving-channel patterns must still differ
        let a = g.values(hs[0]).values().to_vec();
        let b = g.values(hs[1]).values().to_vec();
        assert_ne!(a, b);
        // two directions draw independent masks from their streams
        let drop_b = StepDropout { stream: 1, ..drop };
        let hb = run_direction(&mut g, &cell, &xs, false, drop_b).unwrap();
        assert_ne!(g.values(hs[0]).values(), g.values(hb[0]).values());
    }

    #[test]
    fn cell_step_gradients_check_against_finite_differences() {
        use crate::gradcheck::{finite_diff_check, random_tensor, GradCheckConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ConvLstmCellParams::init(2, 2, 3, &mut rng).unwrap();
        let mut inputs: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
        inputs.push(random_tensor(vec![1, 2, 3, 3], 12)); // x
        inputs.push(random_tensor(vec![1, 2, 3, 3], 13)); // h_prev
        inputs.push(random_tensor(vec![1, 2, 3, 3], 14)); // c_prev
        let meta = params.clone();
        let report = finite_diff_check(
            &inputs,
            move |g, ids| {
                let leaves: [NodeId; 12] = ids[..12].try_into().unwrap();
                let cell = stack_cell(g, &leaves, &meta)?;
                let (h, c) = cell_step(g, &cell, ids[12], ids[13], ids[14], StepDropout::disabled(), 0)?;
                let hc = g.add(h, c)?;
                let sq = g.mul(hc, hc)?;
                Ok(g.sum(sq))
            },
            &GradCheckConfig { max_checks_per_input: 6, ..Default::default() },
        )
        .unwrap();
        assert!(report.pass(), "max rel error {:e}", report.max_rel_error);
    }
}
