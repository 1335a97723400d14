//! Trains a small affinity model and reads anchor probabilities off one
//! frame pair.

use shasta::affinity::{label_boxes, ModelConfig, PaddedFrame, TrainConfig};
use shasta::domain::{pad_boxes, ObjectClass};
use shasta::pipeline::train_class;
use shasta::sim::{generate_dataset, SimConfig};

fn main() -> shasta::Result<()> {
    let sim = SimConfig {
        num_scenes: 8,
        frames_per_scene: 20,
        ..SimConfig::default()
    };
    let scenes = generate_dataset(&sim)?;
    let model_cfg = ModelConfig::new(20, sim.channels, 1);
    let train_cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let (model, report) = train_class(&scenes, ObjectClass::Car, model_cfg, &train_cfg)?;
    for (e, l) in report.loss_curve.iter().enumerate() {
        println!("epoch {} loss {l:.4}", e + 1);
    }

    let frames = scenes[0].labeled_frames(ObjectClass::Car, model.config.descriptor_points);
    let (prev, cur) = (&frames[5], &frames[6]);
    let d = model.config.shape_dim();
    let pf = PaddedFrame::new(pad_boxes(&prev.boxes, 20), &prev.descriptors, d)?;
    let cf = PaddedFrame::new(pad_boxes(&cur.boxes, 20), &cur.descriptors, d)?;
    let a = model.affinity(&pf, &cf)?;
    let labels = label_boxes(&cur.boxes, &cur.gt);
    for (j, l) in labels.iter().enumerate() {
        let kind = if l.is_some() { "true" } else { "false" };
        println!("detection {j} ({kind} positive): p_fp {:.3} p_nb {:.3}", a.p_fp(j), a.p_nb(j));
    }
    Ok(())
}
