//! SGD training loop: momentum updates, linear warmup then step decay,
//! epoch-seeded shuffling of fixed-length clips, and exact batch losses
//! (every clip in a batch shares one graph and the global normalizers, so
//! the batch gradient equals the gradient of the summed batch loss).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::DetectorModel;
use crate::graph::Graph;
use crate::loss::{assemble_targets, build_clip_loss, ClipTargets, FrameLabel, LossConfig};
use crate::synth::Episode;
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Steps trained at `warmup_lr` before switching to the schedule.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch_clips: usize,
    /// Epochs at which the learning rate divides by 10.
    pub decay_at: Vec<usize>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            warmup_steps: 100,
            warmup_lr: 1e-4,
            epochs: 8,
            batch_clips: 4,
            decay_at: vec![],
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.warmup_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0,1)"));
        }
        if self.batch_clips == 0 {
            return Err(Error::config("batch_clips must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate for a given epoch and global step.
pub fn lr_at(cfg: &TrainConfig, epoch: usize, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.warmup_lr;
    }
    let decades = cfg.decay_at.iter().filter(|&&m| m <= epoch).count();
    cfg.lr / 10f64.powi(decades as i32)
}

/// Per-epoch means of the normalized loss components.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub reg: f64,
    pub trans: f64,
    pub total: f64,
    pub batches: usize,
}

/// One momentum step: v <- momentum * v + grad, theta <- theta - lr * v.
pub fn sgd_step(
    params: &mut [(String, &mut crate::tensor::Tensor)],
    velocity: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    for ((( _, tensor), vel), grad) in params.iter_mut().zip(velocity).zip(grads) {
        for ((theta, v), &gr) in tensor.values_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = momentum * *v + gr;
            *theta -= lr * *v;
        }
    }
}

/// A training clip: episode index plus aligned frame offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRef {
    pub episode: usize,
    pub offset: usize,
}

/// Non-overlapping aligned clips; trailing frames short of a full clip are
/// dropped.
pub fn collect_clips(episodes: &[Episode], clip_len: usize) -> Vec<ClipRef> {
    let mut clips = Vec::new();
    for (episode, ep) in episodes.iter().enumerate() {
        let mut offset = 0;
        while offset + clip_len <= ep.frames.len() {
            clips.push(ClipRef { episode, offset });
            offset += clip_len;
        }
    }
    clips
}

/// Frame labels for one clip: the gt box on active frames, unlabeled
/// elsewhere (transitional and absent frames are where mining applies).
pub fn clip_labels(ep: &Episode, offset: usize, clip_len: usize) -> Vec<FrameLabel> {
    (offset..offset + clip_len)
        .map(|f| {
            if (ep.active.0..=ep.active.1).contains(&f) {
                FrameLabel::Boxes(vec![(ep.gt[f - ep.active.0], ep.class)])
            } else {
                FrameLabel::Unlabeled
            }
        })
        .collect()
}

struct BatchOutcome {
    grads: Vec<Vec<f64>>,
    cls: f64,
    reg: f64,
    trans: f64,
    total: f64,
}

fn run_batch(
    model: &DetectorModel,
    episodes: &[Episode],
    batch: &[ClipRef],
    cfg: &TrainConfig,
    step: usize,
) -> Result<BatchOutcome> {
    let clip_len = model.config.clip_len;
    let mut g = Graph::new();
    let nodes = model.insert_params(&mut g, true)?;
    let mut staged = Vec::with_capacity(batch.len());
    for (i, clip) in batch.iter().enumerate() {
        let ep = &episodes[clip.episode];
        let frame_ids: Vec<_> = ep.frames[clip.offset..clip.offset + clip_len]
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let dropout_seed = derive_seed(cfg.seed, 17, (step * 1024 + i) as u64);
        let out = model.forward_clip(&mut g, &nodes, &frame_ids, true, dropout_seed)?;
        let labels = clip_labels(ep, clip.offset, clip_len);
        let targets: ClipTargets =
            assemble_targets(&g, &out, model.anchor_grid(), &labels, &cfg.loss)?;
        staged.push((out, targets));
    }
    let norm_p: usize = staged.iter().map(|(_, t)| t.n_p()).sum();
    let norm_t: usize = staged.iter().map(|(_, t)| t.n_t()).sum();
    let mut batch_total = None;
    let (mut cls, mut reg, mut trans) = (0.0, 0.0, 0.0);
    for (out, targets) in &staged {
        let terms = build_clip_loss(&mut g, out, targets, norm_p, norm_t, cfg.loss.mode)?;
        cls += g.values(terms.cls).item()?;
        reg += g.values(terms.reg).item()?;
        trans += g.values(terms.trans).item()?;
        batch_total = Some(match batch_total {
            None => terms.total,
            Some(acc) => g.add(acc, terms.total)?,
        });
    }
    let total_id = batch_total.expect("batch is never empty");
    let total = g.values(total_id).item()?;
    g.backward(total_id)?;
    let grads = nodes
        .leaves
        .iter()
        .map(|&leaf| {
            g.grad(leaf)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::config("parameter received no gradient"))
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let np = norm_p.max(1) as f64;
    let nt = norm_t.max(1) as f64;
    Ok(BatchOutcome { grads, cls: cls / np, reg: reg / np, trans: trans / nt, total })
}

/// Trains in place and returns per-epoch statistics. Deterministic for a
/// fixed config and dataset.
pub fn train(
    model: &mut DetectorModel,
    episodes: &[Episode],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let clips = collect_clips(episodes, model.config.clip_len);
    if clips.is_empty() {
        return Err(Error::config("no trainable clips: dataset empty or episodes too short"));
    }
    let mut velocity: Vec<Vec<f64>> =
        model.named_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = clips.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 13, epoch as u64));
        order.shuffle(&mut rng);
        let (mut cls, mut reg, mut trans, mut total) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut lr = lr_at(cfg, epoch, step);
        for batch in order.chunks(cfg.batch_clips) {
            let outcome = run_batch(model, episodes, batch, cfg, step)?;
            if !outcome.total.is_finite() {
                return Err(Error::config(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            lr = lr_at(cfg, epoch, step);
            sgd_step(
                &mut model.named_params_mut(),
                &mut velocity,
                &outcome.grads,
                lr,
                cfg.momentum,
            );
            cls += outcome.cls;
            reg += outcome.reg;
            trans += outcome.trans;
            total += outcome.total;
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            lr,
            cls: cls / n,
            reg: reg / n,
            trans: trans / n,
            total: total / n,
            batches,
        };
        progress(&stats);
        history.push(stats);
    }
    Ok(history)
}
