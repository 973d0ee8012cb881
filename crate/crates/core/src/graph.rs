//! Reverse-mode autodiff on a flat op tape.
//!
//! A [`Graph`] owns every tensor created during one forward pass. Ops append
//! a record to the tape; [`Graph::backward`] walks the tape in reverse and
//! scatter-adds gradients. Nodes are write-once, so tape order is already a
//! topological order.
//!
//! The op set is exactly what the detector needs: conv2d, the pointwise
//! activations, softmax over the last axis, channel dropout, elementwise
//! arithmetic, gather/concat/reshape for tensor plumbing, and a pairwise
//! global sum.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{pairwise_sum, Tensor};
use crate::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to one tensor in a [`Graph`]. `Default` is a placeholder for
/// pre-sized buffers and must be overwritten before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    LogClamped,
    OneMinus,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Deliberate backward-pass corruption, used to prove the finite-difference
/// checker actually catches wrong gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradFault {
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        out: NodeId,
        dims: ConvDims,
        stride: usize,
        padding: usize,
        // im2col buffer, kept only when the kernel needs a gradient
        cols: Option<Vec<f64>>,
    },
    Unary { kind: UnaryKind, x: NodeId, out: NodeId },
    Scale { c: f64, x: NodeId, out: NodeId },
    Softmax { x: NodeId, out: NodeId, cols: usize },
    Dropout2d { x: NodeId, out: NodeId, factors: Vec<f64>, plane: usize },
    Binary { kind: BinaryKind, a: NodeId, b: NodeId, out: NodeId },
    Sum { x: NodeId, out: NodeId },
    Gather { x: NodeId, out: NodeId, indices: Arc<Vec<usize>> },
    Concat { a: NodeId, b: NodeId, out: NodeId, axis: usize },
    Reshape { x: NodeId, out: NodeId },
}

pub struct Graph {
    nodes: Vec<Tensor>,
    needs: Vec<bool>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    retain_grads: bool,
    fault: Option<GradFault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), needs: Vec::new(), ops: Vec::new(), grads: Vec::new(), retain_grads: false, fault: None }
    }

    /// Keep gradients of intermediate nodes after backward (normally they are
    /// freed as soon as the producing op is processed).
    pub fn retain_grads(&mut self, on: bool) {
        self.retain_grads = on;
    }

    /// Scales the sigmoid backward formula, see [`GradFault`].
    pub fn set_grad_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    fn push(&mut self, tensor: Tensor, needs: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(tensor);
        self.needs.push(needs);
        id
    }

    /// Inserts a leaf; its `requires_grad` flag decides whether gradients are
    /// tracked through it.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad();
        self.push(tensor, needs)
    }

    /// Inserts a non-differentiable input.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(false);
        self.push(tensor, false)
    }

    pub fn values(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Gradient of `id` after [`Graph::backward`]. Only leaves keep theirs
    /// unless [`Graph::retain_grads`] was enabled.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Hash of which side of its kink every piecewise-op input sits on
    /// (ReLU sign, smooth-L1 region). Two evaluations with different
    /// signatures straddle a kink somewhere, so a finite difference between
    /// them is not a derivative estimate.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h ^= bit as u64 + 0x9e37_79b9_7f4a_7c15;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for op in &self.ops {
            match op {
                Op::Unary { kind: UnaryKind::Relu, x, .. } => {
                    for &v in self.nodes[x.0].values() {
                        mix(v > 0.0);
                    }
                }
                Op::Unary { kind: UnaryKind::SmoothL1, x, .. } => {
                    for &v in self.nodes[x.0].values() {
                        mix(v > -1.0);
                        mix(v > 1.0);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Smallest distance from any kink of a piecewise op (ReLU at 0,
    /// smooth-L1 at |x|=1) seen by the tape. Finite-difference checks resample
    /// when this is tiny.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for op in &self.ops {
            match op {
                Op::Unary { kind: UnaryKind::Relu, x, .. } => {
                    for &v in self.nodes[x.0].values() {
                        best = best.min(v.abs());
                    }
                }
                Op::Unary { kind: UnaryKind::SmoothL1, x, .. } => {
                    for &v in self.nodes[x.0].values() {
                        best = best.min((v.abs() - 1.0).abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    // ---- ops ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        let xs = self.nodes[x.0].shape();
        let ws = self.nodes[w.0].shape();
        let bs = self.nodes[b.0].shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d: want x [B,C,H,W] and w [Co,C,kh,kw], got {:?} and {:?}", xs, ws)));
        }
        let (batch, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {} channels, kernel expects {}", cin, wcin)));
        }
        if bs != [cout] {
            return Err(Error::shape(format!("conv2d: bias shape {:?} does not match {} output channels", bs, cout)));
        }
        let hspan = (h + 2 * padding).checked_sub(kh);
        let wspan = (wdt + 2 * padding).checked_sub(kw);
        let (hspan, wspan) = match (hspan, wspan) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("conv2d: kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * padding, wdt + 2 * padding))),
        };
        if hspan % stride != 0 || wspan % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: extent {}x{} with kernel {}x{} pad {} does not divide stride {}",
                h, wdt, kh, kw, padding, stride
            )));
        }
        let ho = hspan / stride + 1;
        let wo = wspan / stride + 1;
        let dims = ConvDims { batch, cin, h, w: wdt, cout, kh, kw, ho, wo };

        let cols = im2col(self.nodes[x.0].values(), &dims, stride, padding);
        let ow = ho * wo;
        let rows = cin * kh * kw;
        let mut out = vec![0.0; batch * cout * ow];
        {
            let wv = self.nodes[w.0].values();
            let bv = self.nodes[b.0].values();
            for bi in 0..batch {
                for co in 0..cout {
                    let y = &mut out[(bi * cout + co) * ow..][..ow];
                    y.fill(bv[co]);
                    let wrow = &wv[co * rows..(co + 1) * rows];
                    for (k, &wk) in wrow.iter().enumerate() {
                        let col = &cols[k * (batch * ow) + bi * ow..][..ow];
                        for (yo, &c) in y.iter_mut().zip(col) {
                            *yo += wk * c;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out_id = self.push(Tensor::new(vec![batch, cout, ho, wo], out)?, needs);
        let keep_cols = self.needs(w);
        self.ops.push(Op::Conv2d { x, w, b, out: out_id, dims, stride, padding, cols: keep_cols.then_some(cols) });
        Ok(out_id)
    }

    fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].values();
        let out: Vec<f64> = match kind {
            UnaryKind::Relu => xv.iter().map(|&v| v.max(0.0)).collect(),
            UnaryKind::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::LogClamped => xv.iter().map(|&v| v.max(LOG_CLAMP).ln()).collect(),
            UnaryKind::OneMinus => xv.iter().map(|&v| 1.0 - v).collect(),
            UnaryKind::SmoothL1 => xv
                .iter()
                .map(|&v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
                .collect(),
        };
        let shape = self.nodes[x.0].shape().to_vec();
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(shape, out).expect("same shape"), needs);
        self.ops.push(Op::Unary { kind, x, out: out_id });
        out_id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `ln(max(x, 1e-12))`; the clamp keeps losses finite for zero
    /// probabilities and its gradient is zero in the clamped region.
    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::LogClamped, x)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::OneMinus, x)
    }

    /// Elementwise smooth L1: `0.5 x^2` for |x| < 1, `|x| - 0.5` beyond.
    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::SmoothL1, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values().iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape().to_vec();
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(shape, out).expect("same shape"), needs);
        self.ops.push(Op::Scale { c, x, out: out_id });
        out_id
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape().to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax_lastdim: rank-0 input"))?;
        if cols == 0 {
            return Err(Error::shape("softmax_lastdim: empty last axis"));
        }
        let xv = self.nodes[x.0].values();
        let mut out = vec![0.0; xv.len()];
        for (row_in, row_out) in xv.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            softmax_row(row_in, row_out);
        }
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(shape, out)?, needs);
        self.ops.push(Op::Softmax { x, out: out_id, cols });
        Ok(out_id)
    }

    /// Channel dropout on `[B, C, H, W]`: each (batch, channel) plane is
    /// zeroed with probability `p`, survivors are scaled by `1/(1-p)` so the
    /// expectation is unchanged. Identity when `training` is false or `p` is
    /// zero. The mask derives only from `seed`.
    pub fn dropout2d(&mut self, x: NodeId, p: f64, training: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::shape(format!("dropout2d: rate {} outside [0, 1)", p)));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let shape = self.nodes[x.0].shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("dropout2d: want [B,C,H,W], got {:?}", shape)));
        }
        let planes = shape[0] * shape[1];
        let plane = shape[2] * shape[3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let factors: Vec<f64> = (0..planes).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let xv = self.nodes[x.0].values();
        let mut out = vec![0.0; xv.len()];
        for (pi, &f) in factors.iter().enumerate() {
            if f != 0.0 {
                for (o, &v) in out[pi * plane..(pi + 1) * plane].iter_mut().zip(&xv[pi * plane..(pi + 1) * plane]) {
                    *o = f * v;
                }
            }
        }
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(shape, out)?, needs);
        self.ops.push(Op::Dropout2d { x, out: out_id, factors, plane });
        Ok(out_id)
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                self.nodes[a.0].shape(),
                self.nodes[b.0].shape()
            )));
        }
        let av = self.nodes[a.0].values();
        let bv = self.nodes[b.0].values();
        let out: Vec<f64> = match kind {
            BinaryKind::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
        };
        let shape = self.nodes[a.0].shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out_id = self.push(Tensor::new(shape, out)?, needs);
        self.ops.push(Op::Binary { kind, a, b, out: out_id });
        Ok(out_id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Sum of all elements, reduced pairwise so the result does not depend on
    /// incidental evaluation order.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = pairwise_sum(self.nodes[x.0].values());
        let needs = self.needs(x);
        let out_id = self.push(Tensor::scalar(total), needs);
        self.ops.push(Op::Sum { x, out: out_id });
        out_id
    }

    /// `out[i] = x[flat indices[i]]`, reshaped to `out_shape`. Backward
    /// scatter-adds, so repeated indices accumulate.
    pub fn gather(&mut self, x: NodeId, indices: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::shape(format!("gather: {} indices vs out shape {:?}", indices.len(), out_shape)));
        }
        let xv = self.nodes[x.0].values();
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(format!("gather: index {} out of range {}", bad, xv.len())));
        }
        let out: Vec<f64> = indices.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(out_shape, out)?, needs);
        self.ops.push(Op::Gather { x, out: out_id, indices });
        Ok(out_id)
    }

    /// Concatenates two tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let asp = self.nodes[a.0].shape().to_vec();
        let bsp = self.nodes[b.0].shape().to_vec();
        if asp.len() != bsp.len() || axis >= asp.len() {
            return Err(Error::shape(format!("concat: shapes {:?} and {:?} on axis {}", asp, bsp, axis)));
        }
        for (i, (&x, &y)) in asp.iter().zip(&bsp).enumerate() {
            if i != axis && x != y {
                return Err(Error::shape(format!("concat: shapes {:?} and {:?} differ off axis {}", asp, bsp, axis)));
            }
        }
        let inner: usize = asp[axis + 1..].iter().product();
        let outer: usize = asp[..axis].iter().product();
        let a_chunk = asp[axis] * inner;
        let b_chunk = bsp[axis] * inner;
        let av = self.nodes[a.0].values();
        let bv = self.nodes[b.0].values();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_chunk..(o + 1) * a_chunk]);
            out.extend_from_slice(&bv[o * b_chunk..(o + 1) * b_chunk]);
        }
        let mut shape = asp.clone();
        shape[axis] += bsp[axis];
        let needs = self.needs(a) || self.needs(b);
        let out_id = self.push(Tensor::new(shape, out)?, needs);
        self.ops.push(Op::Concat { a, b, out: out_id, axis });
        Ok(out_id)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} values, target {:?} wants {}",
                self.nodes[x.0].shape(),
                self.nodes[x.0].numel(),
                shape,
                numel
            )));
        }
        let out = self.nodes[x.0].values().to_vec();
        let needs = self.needs(x);
        let out_id = self.push(Tensor::new(shape, out)?, needs);
        self.ops.push(Op::Reshape { x, out: out_id });
        Ok(out_id)
    }

    // ---- backward ----

    /// Seeds `d loss/d loss = 1` and walks the tape in reverse. `loss` must
    /// be a single-element tensor. After the call every leaf with
    /// `requires_grad` holds its gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);

        for oi in (0..self.ops.len()).rev() {
            let out = op_out(&self.ops[oi]);
            if !self.needs[out.0] {
                continue;
            }
            let gout = if self.retain_grads {
                self.grads[out.0].clone()
            } else {
                self.grads[out.0].take()
            };
            let Some(gout) = gout else { continue };
            self.backprop_op(oi, &gout);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad() {
                if let Some(g) = &self.grads[i] {
                    node.set_grad(g.clone());
                } else {
                    node.set_grad(vec![0.0; node.numel()]);
                    self.grads[i] = Some(vec![0.0; node.numel()]);
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut [f64] {
        let numel = self.nodes[id.0].numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backprop_op(&mut self, oi: usize, gout: &[f64]) {
        // Ops are taken apart field-by-field to satisfy the borrow checker:
        // node values are read through raw indices while grads are written.
        match &self.ops[oi] {
            Op::Conv2d { x, w, b, dims, stride, padding, cols: _, .. } => {
                let (x, w, b, dims, stride, padding) = (*x, *w, *b, *dims, *stride, *padding);
                let ow = dims.ho * dims.wo;
                let rows = dims.cin * dims.kh * dims.kw;
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for bi in 0..dims.batch {
                        for co in 0..dims.cout {
                            gb[co] += pairwise_sum(&gout[(bi * dims.cout + co) * ow..][..ow]);
                        }
                    }
                }
                if self.needs(w) {
                    let cols = match &self.ops[oi] {
                        Op::Conv2d { cols: Some(c), .. } => c.clone(),
                        _ => unreachable!("conv kept no cols but kernel needs grad"),
                    };
                    let gw = self.grad_buf(w);
                    for bi in 0..dims.batch {
                        for co in 0..dims.cout {
                            let gy = &gout[(bi * dims.cout + co) * ow..][..ow];
                            for k in 0..rows {
                                let col = &cols[k * (dims.batch * ow) + bi * ow..][..ow];
                                let mut acc = 0.0;
                                for (a, c) in gy.iter().zip(col) {
                                    acc += a * c;
                                }
                                gw[co * rows + k] += acc;
                            }
                        }
                    }
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0; rows * dims.batch * ow];
                    {
                        let wv = self.nodes[w.0].values();
                        for bi in 0..dims.batch {
                            for co in 0..dims.cout {
                                let gy = &gout[(bi * dims.cout + co) * ow..][..ow];
                                let wrow = &wv[co * rows..(co + 1) * rows];
                                for (k, &wk) in wrow.iter().enumerate() {
                                    let dcol = &mut dcols[k * (dims.batch * ow) + bi * ow..][..ow];
                                    for (d, &g) in dcol.iter_mut().zip(gy) {
                                        *d += wk * g;
                                    }
                                }
                            }
                        }
                    }
                    let gx = self.grad_buf(x);
                    col2im_add(&dcols, gx, &dims, stride, padding);
                }
            }
            Op::Unary { kind, x, out } => {
                let (kind, x, out) = (*kind, *x, *out);
                if !self.needs(x) {
                    return;
                }
                let fault = self.fault;
                let deriv: Vec<f64> = match kind {
                    UnaryKind::Relu => self.nodes[x.0].values().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                    UnaryKind::Sigmoid => {
                        let s = fault.map_or(1.0, |f| f.scale);
                        self.nodes[out.0].values().iter().map(|&y| s * y * (1.0 - y)).collect()
                    }
                    UnaryKind::LogClamped => self.nodes[x.0].values().iter().map(|&v| if v > LOG_CLAMP { 1.0 / v } else { 0.0 }).collect(),
                    UnaryKind::OneMinus => vec![-1.0; gout.len()],
                    UnaryKind::SmoothL1 => self.nodes[x.0].values().iter().map(|&v| if v.abs() < 1.0 { v } else { v.signum() }).collect(),
                };
                let gx = self.grad_buf(x);
                for ((g, d), &go) in gx.iter_mut().zip(deriv).zip(gout) {
                    *g += d * go;
                }
            }
            Op::Scale { c, x, .. } => {
                let (c, x) = (*c, *x);
                if self.needs(x) {
                    let gx = self.grad_buf(x);
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += c * go;
                    }
                }
            }
            Op::Softmax { x, out, cols } => {
                let (x, out, cols) = (*x, *out, *cols);
                if !self.needs(x) {
                    return;
                }
                let y = self.nodes[out.0].values().to_vec();
                let gx = self.grad_buf(x);
                for ((grow, yrow), gorow) in gx.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(gout.chunks_exact(cols)) {
                    let dot: f64 = yrow.iter().zip(gorow).map(|(a, b)| a * b).sum();
                    for ((g, &yv), &go) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *g += yv * (go - dot);
                    }
                }
            }
            Op::Dropout2d { x, factors, plane, .. } => {
                let (x, plane) = (*x, *plane);
                if !self.needs(x) {
                    return;
                }
                let factors = factors.clone();
                let gx = self.grad_buf(x);
                for (pi, &f) in factors.iter().enumerate() {
                    if f != 0.0 {
                        for (g, &go) in gx[pi * plane..(pi + 1) * plane].iter_mut().zip(&gout[pi * plane..(pi + 1) * plane]) {
                            *g += f * go;
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, .. } => {
                let (kind, a, b) = (*kind, *a, *b);
                match kind {
                    BinaryKind::Add => {
                        if self.needs(a) {
                            for (g, &go) in self.grad_buf(a).iter_mut().zip(gout) {
                                *g += go;
                            }
                        }
                        if self.needs(b) {
                            for (g, &go) in self.grad_buf(b).iter_mut().zip(gout) {
                                *g += go;
                            }
                        }
                    }
                    BinaryKind::Sub => {
                        if self.needs(a) {
                            for (g, &go) in self.grad_buf(a).iter_mut().zip(gout) {
                                *g += go;
                            }
                        }
                        if self.needs(b) {
                            for (g, &go) in self.grad_buf(b).iter_mut().zip(gout) {
                                *g -= go;
                            }
                        }
                    }
                    BinaryKind::Mul => {
                        if self.needs(a) {
                            let bv = self.nodes[b.0].values().to_vec();
                            for ((g, &go), bvv) in self.grad_buf(a).iter_mut().zip(gout).zip(bv) {
                                *g += go * bvv;
                            }
                        }
                        if self.needs(b) {
                            let av = self.nodes[a.0].values().to_vec();
                            for ((g, &go), avv) in self.grad_buf(b).iter_mut().zip(gout).zip(av) {
                                *g += go * avv;
                            }
                        }
                    }
                }
            }
            Op::Sum { x, .. } => {
                let x = *x;
                if self.needs(x) {
                    let go = gout[0];
                    for g in self.grad_buf(x).iter_mut() {
                        *g += go;
                    }
                }
            }
            Op::Gather { x, indices, .. } => {
                let x = *x;
                if self.needs(x) {
                    let indices = Arc::clone(indices);
                    let gx = self.grad_buf(x);
                    for (&i, &go) in indices.iter().zip(gout) {
                        gx[i] += go;
                    }
                }
            }
            Op::Concat { a, b, axis, .. } => {
                let (a, b, axis) = (*a, *b, *axis);
                let asp = self.nodes[a.0].shape().to_vec();
                let bsp = self.nodes[b.0].shape().to_vec();
                let inner: usize = asp[axis + 1..].iter().product();
                let outer: usize = asp[..axis].iter().product();
                let a_chunk = asp[axis] * inner;
                let b_chunk = bsp[axis] * inner;
                let stride = a_chunk + b_chunk;
                if self.needs(a) {
                    let ga = self.grad_buf(a);
                    for o in 0..outer {
                        for (g, &go) in ga[o * a_chunk..(o + 1) * a_chunk].iter_mut().zip(&gout[o * stride..o * stride + a_chunk]) {
                            *g += go;
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for o in 0..outer {
                        for (g, &go) in gb[o * b_chunk..(o + 1) * b_chunk].iter_mut().zip(&gout[o * stride + a_chunk..(o + 1) * stride]) {
                            *g += go;
                        }
                    }
                }
            }
            Op::Reshape { x, .. } => {
                let x = *x;
                if self.needs(x) {
                    for (g, &go) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
        }
    }
}

fn op_out(op: &Op) -> NodeId {
    match op {
        Op::Conv2d { out, .. }
        | Op::Unary { out, .. }
        | Op::Scale { out, .. }
        | Op::Softmax { out, .. }
        | Op::Dropout2d { out, .. }
        | Op::Binary { out, .. }
        | Op::Sum { out, .. }
        | Op::Gather { out, .. }
        | Op::Concat { out, .. }
        | Op::Reshape { out, .. } => *out,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of one row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn im2col(x: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let ow = d.ho * d.wo;
    let rows = d.cin * d.kh * d.kw;
    let mut cols = vec![0.0; rows * d.batch * ow];
    for bi in 0..d.batch {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let k = (ci * d.kh + ky) * d.kw + kx;
                    let dst_base = k * (d.batch * ow) + bi * ow;
                    for oy in 0..d.ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = ((bi * d.cin + ci) * d.h + iy as usize) * d.w;
                        let dst = dst_base + oy * d.wo;
                        for ox in 0..d.wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                cols[dst + ox] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], gx: &mut [f64], d: &ConvDims, stride: usize, pad: usize) {
    let ow = d.ho * d.wo;
    for bi in 0..d.batch {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let k = (ci * d.kh + ky) * d.kw + kx;
                    let src_base = k * (d.batch * ow) + bi * ow;
                    for oy in 0..d.ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = ((bi * d.cin + ci) * d.h + iy as usize) * d.w;
                        let src = src_base + oy * d.wo;
                        for ox in 0..d.wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                gx[dst + ix as usize] += dcols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
