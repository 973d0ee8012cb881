//! Temporary diagnostic, not part of the suite.

use actdet_core::formats::load_checkpoint;
use actdet_core::synth::{generate_dataset, SynthConfig};
use actdet_core::Graph;

#[test]
#[ignore]
fn inspect_trained_scores() {
    let model = load_checkpoint(std::path::Path::new("/tmp/cal/tac2.ckpt")).unwrap();
    let synth = SynthConfig { seed: 1000, ..SynthConfig::default() };
    let eps = generate_dataset(&synth, 3).unwrap();
    let ep = &eps[0];
    println!("episode class {} active {:?}", ep.class, ep.active);
    let mut g = Graph::new();
    let nodes = model.insert_params(&mut g, false).unwrap();
    let ids: Vec<_> = ep.frames[..16].iter().map(|f| g.constant(f.clone())).collect();
    let out = model.forward_clip(&mut g, &nodes, &ids, false, 0).unwrap();
    let grid = model.anchor_grid();
    println!("anchors {}", grid.anchors.len());
    for frame in [0usize, 4, 8, 12, 15] {
        let _rows = out.rows();
        // find best anchor by iou with gt if frame is active
        let active = frame >= ep.active.0 && frame <= ep.active.1;
        let mut best_row = 0;
        let mut best_iou = -1.0;
        if active {
            let gt = &ep.gt[frame - ep.active.0];
            for (a, anchor) in grid.anchors.iter().enumerate() {
                let i = actdet_core::boxes::iou(*anchor, *gt);
                if i > best_iou {
                    best_iou = i;
                    best_row = frame * grid.anchors.len() + a;
                }
            }
        } else {
            best_row = frame * grid.anchors.len();
        }
        let pair = out.score_pair(&g, best_row);
        let cat = pair.category_probs();
        let st = pair.state_probs();
        println!(
            "frame {frame} active {active} iou {best_iou:.2} action {:?} cat {:?} state {:?}",
            pair.action.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>(),
            cat.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            st.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );

    }
}
