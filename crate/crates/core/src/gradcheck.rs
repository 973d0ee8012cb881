//! Finite-difference validation of the backward pass.
//!
//! A check point is a set of input tensors plus a closure that builds a
//! scalar loss from them. The analytic gradient comes from one backward
//! pass; the numeric one from central differences, one perturbed forward
//! pair per checked element. The error score is
//! `|a - n| / max(1e-8, floor, |a| + |n|)` where `floor` absorbs float
//! roundoff: a central difference resolves the loss only down to a few ulps,
//! so gradients smaller than `roundoff_ulps * eps * |loss| / (2 * step)`
//! cannot be distinguished from noise and must not fail the check.
//!
//! Piecewise ops make finite differences lie near their kinks. Two defenses:
//! [`check_resampled`] redraws the inputs until no ReLU or smooth-L1 input
//! sits within `kink_distance` of a kink (right-sized for small graphs), and
//! every checked element compares the activation-region signature of its two
//! perturbed evaluations, skipping the element if they straddle a kink (the
//! only sound option in large graphs, where some activation is always near
//! zero and a global redraw can never succeed).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{GradFault, Graph, NodeId};
use crate::tensor::Tensor;
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Cap on checked elements per input tensor; 0 means all.
    pub max_checks_per_input: usize,
    /// Seed for element subsampling and input resampling.
    pub seed: u64,
    /// Reject base points with a kink input closer than this.
    pub kink_distance: f64,
    /// Loss-evaluation noise budget in ulps; scales the resolvability floor.
    pub roundoff_ulps: f64,
    /// Optional deliberate backward corruption (negative controls).
    pub fault: Option<GradFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_checks_per_input: 0,
            seed: 0,
            kink_distance: 1e-3,
            roundoff_ulps: 64.0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose perturbed evaluations straddled a kink; their finite
    /// difference is not a derivative estimate, so they are not compared.
    pub skipped: usize,
    /// (input index, element index) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    /// How many base points were rejected for kink proximity.
    pub resamples: usize,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_loss<B>(inputs: &[Tensor], build: &B) -> Result<(f64, u64)>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok((g.values(loss).item()?, g.kink_signature()))
}

/// Checks analytic gradients of `build` at the base point `inputs`.
pub fn finite_diff_check<B>(inputs: &[Tensor], build: B, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // analytic pass
    let mut g = Graph::new();
    g.set_grad_fault(cfg.fault);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient present after backward").to_vec())
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        tolerance: cfg.tolerance,
        resamples: 0,
    };

    let mut scratch: Vec<Tensor> = inputs.to_vec();
    for (ti, base) in inputs.iter().enumerate() {
        let numel = base.numel();
        let elems: Vec<usize> = if cfg.max_checks_per_input == 0 || numel <= cfg.max_checks_per_input {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ti as u64, 1));
            all.shuffle(&mut rng);
            let mut picked = all[..cfg.max_checks_per_input].to_vec();
            picked.sort_unstable();
            picked
        };
        for e in elems {
            let x0 = base.values()[e];
            scratch[ti].values_mut()[e] = x0 + cfg.step;
            let (f_plus, sig_plus) = eval_loss(&scratch, &build)?;
            scratch[ti].values_mut()[e] = x0 - cfg.step;
            let (f_minus, sig_minus) = eval_loss(&scratch, &build)?;
            scratch[ti].values_mut()[e] = x0;
            if sig_plus != sig_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            // f_plus - f_minus carries absolute roundoff of a few ulps of the
            // loss itself, so differences below this floor are noise, not
            // derivative signal. Dividing by tolerance makes the final score
            // comparison equivalent to |a - n| < max(tol * (|a|+|n|), noise).
            let noise = cfg.roundoff_ulps * f64::EPSILON * f_plus.abs().max(f_minus.abs()).max(1.0)
                / (2.0 * cfg.step);
            let a = analytic[ti][e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(noise / cfg.tolerance).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, e));
            }
        }
    }
    if report.checked == 0 {
        return Err(Error::config("gradient check selected zero elements"));
    }
    Ok(report)
}

/// Draws base points from `gen` until the built graph keeps every piecewise
/// op at least `kink_distance` away from its kink, then checks gradients
/// there.
pub fn check_resampled<G, B>(mut gen: G, build: B, cfg: &GradCheckConfig, max_tries: usize) -> Result<GradCheckReport>
where
    G: FnMut(u64) -> Vec<Tensor>,
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut resamples = 0;
    for t in 0..max_tries.max(1) {
        let inputs = gen(derive_seed(cfg.seed, 2, t as u64));
        let mut probe = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        build(&mut probe, &ids)?;
        if probe.min_kink_distance() < cfg.kink_distance {
            resamples += 1;
            continue;
        }
        drop(probe);
        let mut report = finite_diff_check(&inputs, build, cfg)?;
        report.resamples = resamples;
        return Ok(report);
    }
    Err(Error::config(format!(
        "no kink-free base point found in {} tries (kink distance {})",
        max_tries, cfg.kink_distance
    )))
}

/// Fills a tensor with reproducible values in roughly [-1, 1].
pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// One named entry of the standard battery.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn squared_sum(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let sq = g.mul(y, y)?;
    Ok(g.sum(sq))
}

/// The full finite-difference battery: every differentiable op, the
/// recurrent cell, the bidirectional layer, and the clip loss of a tiny
/// random model. Heavy entries subsample elements; ops check everything.
pub fn standard_suite(cfg: &GradCheckConfig) -> Result<Vec<SuiteOutcome>> {
    use crate::boxes::BoxXYXY;
    use crate::convlstm::{
        cell_step, run_bidirectional, stack_cell, BiConvLstmParams, BiLayerNodes,
        ConvLstmCellParams, StepDropout,
    };
    use crate::anchors::build_anchor_grid;
    use crate::detector::{DetectorConfig, DetectorModel};
    use crate::loss::{assemble_targets, build_clip_loss, FrameLabel, LossConfig};
    use std::sync::Arc;

    let mut outcomes = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
                   entry_cfg: &GradCheckConfig|
     -> Result<()> {
        outcomes.push(SuiteOutcome { name, report: finite_diff_check(&inputs, build, entry_cfg)? });
        Ok(())
    };

    run(
        "conv2d",
        vec![
            random_tensor(vec![1, 2, 5, 5], 1),
            random_tensor(vec![3, 2, 3, 3], 2),
            random_tensor(vec![3], 3),
        ],
        &|g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "conv2d_strided",
        vec![
            random_tensor(vec![1, 2, 6, 6], 4),
            random_tensor(vec![2, 2, 2, 2], 5),
            random_tensor(vec![2], 6),
        ],
        &|g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 0)?;
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "relu",
        vec![random_tensor(vec![3, 7], 7)],
        &|g, ids| {
            let y = g.relu(ids[0]);
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "sigmoid",
        vec![random_tensor(vec![3, 7], 8)],
        &|g, ids| {
            let y = g.sigmoid(ids[0]);
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "log_clamped",
        vec![random_tensor(vec![3, 7], 9)],
        &|g, ids| {
            // Through a sigmoid so the argument stays in (0,1), away from
            // the clamp.
            let s = g.sigmoid(ids[0]);
            let y = g.log_clamped(s);
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "one_minus",
        vec![random_tensor(vec![3, 7], 10)],
        &|g, ids| {
            let s = g.sigmoid(ids[0]);
            let y = g.one_minus(s);
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "smooth_l1",
        vec![random_tensor(vec![4, 6], 11)],
        &|g, ids| {
            let y = g.smooth_l1(ids[0]);
            let s = g.sum(y);
            Ok(s)
        },
        cfg,
    )?;
    run(
        "scale",
        vec![random_tensor(vec![3, 5], 12)],
        &|g, ids| {
            let y = g.scale(ids[0], -1.7);
            squared_sum(g, y)
        },
        cfg,
    )?;
    let proj = random_tensor(vec![3, 5], 900);
    run(
        "softmax_lastdim",
        vec![random_tensor(vec![3, 5], 13)],
        &|g, ids| {
            // Softmax rows sum to one, so project onto a random direction
            // to expose the Jacobian.
            let y = g.softmax_lastdim(ids[0])?;
            let c = g.constant(proj.clone());
            let v = g.mul(y, c)?;
            Ok(g.sum(v))
        },
        cfg,
    )?;
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        run(
            name,
            vec![random_tensor(vec![2, 6], 14), random_tensor(vec![2, 6], 15)],
            &move |g, ids| {
                let z = match which {
                    0 => g.add(ids[0], ids[1])?,
                    1 => g.sub(ids[0], ids[1])?,
                    _ => g.mul(ids[0], ids[1])?,
                };
                squared_sum(g, z)
            },
            cfg,
        )?;
    }
    run(
        "sum",
        vec![random_tensor(vec![4, 4], 16)],
        &|g, ids| Ok(g.sum(ids[0])),
        cfg,
    )?;
    let gather_idx: Arc<Vec<usize>> = Arc::new(vec![0, 3, 3, 7, 11, 2, 2, 2]);
    run(
        "gather_scatter",
        vec![random_tensor(vec![3, 4], 17)],
        &|g, ids| {
            // Repeated indices exercise scatter-add on the backward pass.
            let y = g.gather(ids[0], gather_idx.clone(), vec![8])?;
            squared_sum(g, y)
        },
        cfg,
    )?;
    run(
        "concat",
        vec![random_tensor(vec![1, 2, 3, 3], 18), random_tensor(vec![1, 4, 3, 3], 19)],
        &|g, ids| {
            let z = g.concat(ids[0], ids[1], 1)?;
            squared_sum(g, z)
        },
        cfg,
    )?;
    let reshape_proj = random_tensor(vec![6, 2], 901);
    run(
        "reshape",
        vec![random_tensor(vec![3, 4], 20)],
        &|g, ids| {
            let y = g.reshape(ids[0], vec![6, 2])?;
            let c = g.constant(reshape_proj.clone());
            let v = g.mul(y, c)?;
            Ok(g.sum(v))
        },
        cfg,
    )?;
    run(
        "dropout2d",
        vec![random_tensor(vec![1, 6, 4, 4], 21)],
        &|g, ids| {
            // Fixed seed keeps the mask identical across evaluations, so
            // the masked network is a fixed differentiable function.
            let y = g.dropout2d(ids[0], 0.4, true, 77)?;
            squared_sum(g, y)
        },
        cfg,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cell = ConvLstmCellParams::init(2, 3, 3, &mut rng)?;
    let mut cell_inputs: Vec<Tensor> = cell.tensors().iter().map(|t| (*t).clone()).collect();
    cell_inputs.push(random_tensor(vec![1, 2, 4, 4], 23));
    cell_inputs.push(random_tensor(vec![1, 3, 4, 4], 24));
    cell_inputs.push(random_tensor(vec![1, 3, 4, 4], 25));
    let cell_meta = cell.clone();
    run(
        "convlstm_cell",
        cell_inputs,
        &move |g, ids| {
            let leaves: [NodeId; 12] = ids[..12].try_into().expect("12 cell tensors");
            let nodes = stack_cell(g, &leaves, &cell_meta)?;
            let (h, c) = cell_step(g, &nodes, ids[12], ids[13], ids[14], StepDropout::disabled(), 0)?;
            let hs = squared_sum(g, h)?;
            let cs = squared_sum(g, c)?;
            g.add(hs, cs)
        },
        &GradCheckConfig { max_checks_per_input: 6, ..cfg.clone() },
    )?;

    let bi = BiConvLstmParams::init(2, 2, 3, 3, 0.0, &mut rng)?;
    let mut bi_inputs: Vec<Tensor> = bi.forward.tensors().iter().map(|t| (*t).clone()).collect();
    bi_inputs.extend(bi.backward.tensors().iter().map(|t| (*t).clone()));
    bi_inputs.push(bi.fuse_w.clone());
    bi_inputs.push(bi.fuse_b.clone());
    for f in 0..3 {
        bi_inputs.push(random_tensor(vec![1, 2, 4, 4], 30 + f));
    }
    let bi_meta = bi.clone();
    run(
        "biconvlstm_layer",
        bi_inputs,
        &move |g, ids| {
            let fwd: [NodeId; 12] = ids[..12].try_into().expect("12 forward tensors");
            let bwd: [NodeId; 12] = ids[12..24].try_into().expect("12 backward tensors");
            let layer = BiLayerNodes {
                fwd: stack_cell(g, &fwd, &bi_meta.forward)?,
                bwd: stack_cell(g, &bwd, &bi_meta.backward)?,
                fuse_w: ids[24],
                fuse_b: ids[25],
                dropout: 0.0,
            };
            let hs = run_bidirectional(g, &layer, &ids[26..], false, 0)?;
            let mut acc = squared_sum(g, hs[0])?;
            for &h in &hs[1..] {
                let s = squared_sum(g, h)?;
                acc = g.add(acc, s)?;
            }
            Ok(acc)
        },
        &GradCheckConfig { max_checks_per_input: 4, ..cfg.clone() },
    )?;

    let dcfg = DetectorConfig::tiny();
    let model = DetectorModel::init(dcfg.clone(), 11)?;
    let grid = build_anchor_grid(dcfg.input_size, &dcfg.scales, &dcfg.aspect_ratios)?;
    let inputs: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    let frames: Vec<Tensor> = (0..2).map(|t| random_tensor(vec![1, 1, 16, 16], 90 + t)).collect();
    let labels =
        vec![FrameLabel::Boxes(vec![(BoxXYXY::new(0.1, 0.2, 0.55, 0.7), 1)]), FrameLabel::Unlabeled];
    let loss_cfg = LossConfig::default();
    // Index sets frozen at the base point; mining flips under perturbation
    // otherwise.
    let targets = {
        let mut g = Graph::new();
        let nodes = model.insert_params(&mut g, false)?;
        let fs: Vec<NodeId> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let out = model.forward_clip(&mut g, &nodes, &fs, false, 0)?;
        assemble_targets(&g, &out, &grid, &labels, &loss_cfg)?
    };
    run(
        "clip_loss_end_to_end",
        inputs,
        &move |g, ids| {
            let nodes = model.nodes_from_leaves(g, ids)?;
            let fs: Vec<NodeId> = frames.iter().map(|f| g.constant(f.clone())).collect();
            let out = model.forward_clip(g, &nodes, &fs, false, 0)?;
            let terms =
                build_clip_loss(g, &out, &targets, targets.n_p(), targets.n_t(), loss_cfg.mode)?;
            Ok(terms.total)
        },
        &GradCheckConfig { max_checks_per_input: 3, ..cfg.clone() },
    )?;

    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_exactly() {
        let a = random_tensor(vec![6], 1);
        let report = finite_diff_check(
            &[a],
            |g, ids| {
                let c = g.constant(Tensor::new(vec![6], vec![1.0, -2.0, 3.0, 0.5, -0.25, 2.0]).unwrap());
                let y = g.mul(ids[0], c)?;
                Ok(g.sum(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn composite_net_passes_and_fault_is_caught() {
        let build = |g: &mut Graph, ids: &[NodeId]| -> crate::Result<NodeId> {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let y = g.sigmoid(y);
            let y = g.conv2d(y, ids[3], ids[4], 2, 0)?;
            let flat = g.reshape(y, vec![2, 8])?;
            let p = g.softmax_lastdim(flat)?;
            let lp = g.log_clamped(p);
            Ok(g.sum(lp))
        };
        let inputs = vec![
            random_tensor(vec![1, 2, 4, 4], 10),
            random_tensor(vec![3, 2, 3, 3], 11),
            random_tensor(vec![3], 12),
            random_tensor(vec![4, 3, 2, 2], 13),
            random_tensor(vec![4], 14),
        ];
        let clean = finite_diff_check(&inputs, build, &GradCheckConfig::default()).unwrap();
        assert!(clean.pass(), "max rel error {}", clean.max_rel_error);

        let cfg = GradCheckConfig { fault: Some(GradFault { scale: 1.01 }), ..Default::default() };
        let bad = finite_diff_check(&inputs, build, &cfg).unwrap();
        assert!(!bad.pass(), "fault slipped through, max rel error {}", bad.max_rel_error);
    }

    #[test]
    fn resampling_skips_base_points_on_kinks() {
        // seed stream starts right on a kink: first draw puts 0 into relu
        let gen = |seed: u64| {
            if seed == crate::derive_seed(0, 2, 0) {
                vec![Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()]
            } else {
                vec![Tensor::new(vec![2], vec![0.7, -0.6]).unwrap()]
            }
        };
        let report = check_resampled(
            gen,
            |g, ids| {
                let y = g.relu(ids[0]);
                Ok(g.sum(y))
            },
            &GradCheckConfig::default(),
            5,
        )
        .unwrap();
        assert_eq!(report.resamples, 1);
        assert!(report.pass());
    }

    #[test]
    fn subsampling_is_deterministic_and_bounded() {
        let a = random_tensor(vec![40], 3);
        let cfg = GradCheckConfig { max_checks_per_input: 7, ..Default::default() };
        let run = || {
            finite_diff_check(
                &[a.clone()],
                |g, ids| {
                    let y = g.sigmoid(ids[0]);
                    Ok(g.sum(y))
                },
                &cfg,
            )
            .unwrap()
        };
        let r1 = run();
        let r2 = run();
        assert_eq!(r1.checked, 7);
        assert_eq!(r1.max_rel_error, r2.max_rel_error);
        assert!(r1.pass());
    }

    #[test]
    fn standard_suite_is_green() {
        let cfg = GradCheckConfig { max_checks_per_input: 8, ..Default::default() };
        let outcomes = standard_suite(&cfg).unwrap();
        assert!(outcomes.len() >= 18);
        for o in &outcomes {
            assert!(
                o.report.pass(),
                "{} failed: max rel error {:.3e} over {} checks",
                o.name,
                o.report.max_rel_error,
                o.report.checked
            );
        }
        let names: Vec<_> = outcomes.iter().map(|o| o.name).collect();
        for expected in ["conv2d", "softmax_lastdim", "convlstm_cell", "clip_loss_end_to_end"] {
            assert!(names.contains(&expected), "suite is missing {expected}");
        }
    }

    #[test]
    fn standard_suite_catches_injected_fault() {
        let cfg = GradCheckConfig {
            max_checks_per_input: 8,
            fault: Some(GradFault { scale: 1.02 }),
            ..Default::default()
        };
        let outcomes = standard_suite(&cfg).unwrap();
        let failing: Vec<_> =
            outcomes.iter().filter(|o| !o.report.pass()).map(|o| o.name).collect();
        assert!(
            failing.contains(&"sigmoid") && failing.contains(&"clip_loss_end_to_end"),
            "fault escaped, failing set: {failing:?}"
        );
    }
}
