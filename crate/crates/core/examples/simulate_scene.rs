//! Generates one scene, renders a BEV frame and samples a shape descriptor.

use shasta::residuals::extract_shape_descriptor;
use shasta::sim::{generate_scene, render_bev, SimConfig};

fn main() -> shasta::Result<()> {
    let cfg = SimConfig {
        frames_per_scene: 10,
        ..SimConfig::default()
    };
    let scene = generate_scene(&cfg, 0)?;
    println!("scene {}: {} objects, {} frames", scene.index, scene.tracks.len(), scene.frames.len());
    for (f, fr) in scene.frames.iter().enumerate() {
        let clutter = fr.sources.iter().filter(|s| s.is_none()).count();
        println!(
            "frame {f:2} t={:.1}s gt={} detections={} clutter={clutter}",
            fr.timestamp,
            fr.gt.len(),
            fr.detections.len()
        );
    }

    let grid = render_bev(&cfg, &scene, 0)?;
    println!("bev {}x{}x{}", grid.height, grid.width, grid.channels);
    if let Some(b) = scene.frames[0].detections.first() {
        let d = extract_shape_descriptor(&grid, b)?;
        println!("descriptor of detection 0 at ({:.1}, {:.1}): {:.3?}", b.x, b.y, d.0);
    }
    Ok(())
}
