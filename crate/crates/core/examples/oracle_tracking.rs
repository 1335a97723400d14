//! Tracks noise-free scenes with ground-truth affinities; the result is
//! perfect.

use shasta::domain::ObjectClass;
use shasta::pipeline::{class_config, evaluate_tracks, track_scenes};
use shasta::residuals::DescriptorPoints;
use shasta::sim::{generate_dataset, SimConfig};
use shasta::tracker::{Affinity, TrackerOptions};

fn main() -> shasta::Result<()> {
    let sim = SimConfig {
        num_scenes: 5,
        frames_per_scene: 30,
        ..SimConfig::default()
    }
    .noise_free();
    let scenes = generate_dataset(&sim)?;
    let cfg = class_config(&sim, ObjectClass::Car);
    let d = 5 * sim.channels;
    let tracks = track_scenes(
        &scenes,
        cfg,
        TrackerOptions::full(),
        Affinity::Oracle,
        DescriptorPoints::CenterAndFaces,
        d,
    )?;
    let report = evaluate_tracks(&scenes, &tracks, 40)?;
    print!("{}", report.to_table());
    Ok(())
}
