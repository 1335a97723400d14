//! Greedy baseline, trained model and oracle on a reduced benchmark.

use shasta::affinity::{ModelConfig, TrainConfig};
use shasta::nn::AdamConfig;
use shasta::domain::ObjectClass;
use shasta::pipeline::{class_config, evaluate_tracks, track_scenes, train_class};
use shasta::sim::{generate_dataset, SimConfig};
use shasta::tracker::{Affinity, TrackerOptions};

fn main() -> shasta::Result<()> {
    let train_sim = SimConfig {
        num_scenes: 40,
        ..SimConfig::default()
    };
    let eval_sim = SimConfig {
        num_scenes: 10,
        first_scene: 40,
        ..SimConfig::default()
    };
    let (train_set, eval_set) = (generate_dataset(&train_sim)?, generate_dataset(&eval_sim)?);
    let class = ObjectClass::Car;
    let cfg = class_config(&train_sim, class);
    let model_cfg = ModelConfig::new(cfg.n_max, train_sim.channels, 7);
    let (points, d) = (model_cfg.descriptor_points, model_cfg.shape_dim());
    let train_cfg = TrainConfig {
        epochs: 6,
        seed: 7,
        // a short schedule needs a larger step than the default
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let (model, _) = train_class(&train_set, class, model_cfg, &train_cfg)?;

    let runs = [
        ("baseline", TrackerOptions::baseline(), Affinity::Disabled),
        ("trained", TrackerOptions::full(), Affinity::Model(&model)),
        ("oracle", TrackerOptions::full(), Affinity::Oracle),
    ];
    println!("{:<9} {:>7} {:>7} {:>6} {:>6} {:>6} {:>5}", "tracker", "amota", "amotp", "tp", "fp", "fn", "ids");
    for (name, options, source) in runs {
        let tracks = track_scenes(&eval_set, cfg, options, source, points, d)?;
        let r = evaluate_tracks(&eval_set, &tracks, 40)?.overall;
        let c = r.counts;
        println!(
            "{name:<9} {:>7.4} {:>7.4} {:>6} {:>6} {:>6} {:>5}",
            r.amota, r.amotp, c.tp, c.fp, c.fn_, c.ids
        );
    }
    Ok(())
}
