//! Temporary diagnostic: decompose the category CE after an overfit run.

use actdet_core::loss::{assemble_targets, FrameLabel, LossConfig, LossMode};
use actdet_core::synth::{generate_dataset, SynthConfig};
use actdet_core::train::{clip_labels, collect_clips, train, TrainConfig};
use actdet_core::{DetectorConfig, DetectorModel, Graph};

#[test]
#[ignore]
fn decompose_cls_floor() {
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
    let mut model = DetectorModel::init(dc.clone(), 1).unwrap();
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
    train(&mut model, &eps, &tc, |_| {}).unwrap();

    let clips = collect_clips(&eps, dc.clip_len);
    let loss_cfg = LossConfig { mode: LossMode::NoMining, ..LossConfig::default() };
    for clip in &clips {
        let ep = &eps[clip.episode];
        let labels = clip_labels(ep, clip.offset, dc.clip_len);
        let mut g = Graph::new();
        let nodes = model.insert_params(&mut g, false).unwrap();
        let ids: Vec<_> = ep.frames[clip.offset..clip.offset + dc.clip_len]
            .iter()
            .map(|f| g.constant(f.clone()))
            .collect();
        let out = model.forward_clip(&mut g, &nodes, &ids, false, 0).unwrap();
        let targets = assemble_targets(&g, &out, model.anchor_grid(), &labels, &loss_cfg).unwrap();
        let cat = g.values(out.category).values();
        let k = out.num_classes;
        let apf = out.anchors_per_frame;
        let mut pos_ce = Vec::new();
        for p in &targets.positives {
            let prob = cat[p.row * (k + 1) + p.class];
            let scale = if p.row % apf < 64 { 8 } else { 16 };
            pos_ce.push((scale, (prob * 1000.0).round() / 1000.0));
        }
        let mut neg_ce = Vec::new();
        for &row in &targets.negatives {
            let prob = cat[row * (k + 1)];
            let scale = if row % apf < 64 { 8 } else { 16 };
            neg_ce.push((scale, (prob * 1000.0).round() / 1000.0));
        }
        println!(
            "ep {} class {} offset {:>2}: {} pos {} neg",
            clip.episode,
            ep.class,
            clip.offset,
            targets.positives.len(),
            targets.negatives.len()
        );
        println!("  pos (scale, p_y):  {pos_ce:?}");
        println!("  neg (scale, p_0):  {neg_ce:?}");
    }
}
