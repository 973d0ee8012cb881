//! Temporary diagnostic: can the model overfit a single batch at all?

use actdet_core::loss::LossMode;
use actdet_core::synth::{generate_dataset, SynthConfig};
use actdet_core::train::{train, TrainConfig};
use actdet_core::{DetectorConfig, DetectorModel};

#[test]
#[ignore]
fn overfit_one_batch() {
    let synth = SynthConfig { seed: 1000, ..SynthConfig::default() };
    let eps = generate_dataset(&synth, 2).unwrap();
    let dc = DetectorConfig {
        stem_channels: 6,
        trunk_channels: 16,
        hidden_channels: 8,
        aspect_ratios: vec![1.0],
        dropout: 0.0,
        ..DetectorConfig::default()
    };
    let mut model = DetectorModel::init(dc, 1).unwrap();
    let mut tc = TrainConfig {
        lr: 0.01,
        epochs: 60,
        warmup_steps: 5,
        warmup_lr: 0.001,
        batch_clips: 6,
        seed: 3,
        ..TrainConfig::default()
    };
    tc.loss.mode = LossMode::NoMining;
    // 2 episodes x 3 clips = 6 clips = one batch per epoch
    train(&mut model, &eps, &tc, |s| {
        if s.epoch % 5 == 0 || s.epoch == 59 {
            println!(
                "step {:>3} cls {:.4} reg {:.4} trans {:.4}",
                s.epoch, s.cls, s.reg, s.trans
            );
        }
    })
    .unwrap();
}
