//! In-memory glue: simulated scenes in, trained models, tracks and reports out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::affinity::{
    build_gt_affinity, model_gradcheck_with, sequence_pairs, train, GtBox, LabeledFrame, ModelConfig, PaddedFrame,
    ShastaModel, TrainConfig, TrainReport,
};
use crate::domain::{pad_boxes, BoundingBox3D, ClassConfig, ObjectClass};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalFrame, EvalReport, PredBox};
use crate::nn::GradcheckReport;
use crate::residuals::DescriptorPoints;
use crate::sim::{Scene, SimConfig};
use crate::tracker::{track_sequence, Affinity, TrackOutput, TrackerOptions};

/// Per-class tracking settings derived from the simulator's speed envelope.
pub fn class_config(sim: &SimConfig, class: ObjectClass) -> ClassConfig {
    ClassConfig::for_class(class).with_speed_envelope(sim.speed_max, sim.dt())
}

pub fn labeled(scenes: &[Scene], class: ObjectClass, points: DescriptorPoints) -> Vec<Vec<LabeledFrame>> {
    scenes.iter().map(|s| s.labeled_frames(class, points)).collect()
}

/// Trains a fresh model on every consecutive frame pair of `scenes`.
pub fn train_class(
    scenes: &[Scene],
    class: ObjectClass,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ShastaModel, TrainReport)> {
    let frames = labeled(scenes, class, model_cfg.descriptor_points);
    let pairs: Vec<_> = frames.iter().flat_map(|f| sequence_pairs(f)).collect();
    if pairs.iter().all(|p| p.cur.gt.is_empty()) {
        return Err(Error::InvalidInput(format!("no {} objects in the training set", class.name())));
    }
    let mut model = ShastaModel::new(model_cfg)?;
    let report = train(&mut model, &pairs, train_cfg)?;
    Ok((model, report))
}

/// Tracks of one class for every scene, frame by frame.
pub fn track_scenes(
    scenes: &[Scene],
    cfg: ClassConfig,
    options: TrackerOptions,
    source: Affinity<'_>,
    points: DescriptorPoints,
    shape_dim: usize,
) -> Result<Vec<Vec<Vec<TrackOutput>>>> {
    par_map(scenes, |s| {
        let frames = s.labeled_frames(cfg.class, points);
        let ts: Vec<f64> = s.frames.iter().map(|f| f.timestamp).collect();
        track_sequence(&frames, &ts, cfg, options, shape_dim, source)
    })
    .into_iter()
    .collect()
}

/// Pairs tracks with the scenes' annotations.
pub fn eval_frames(scenes: &[Scene], tracks: &[Vec<Vec<TrackOutput>>]) -> Result<Vec<Vec<EvalFrame>>> {
    if scenes.len() != tracks.len() {
        return Err(Error::InvalidInput(format!(
            "{} scenes but {} track sequences",
            scenes.len(),
            tracks.len()
        )));
    }
    scenes
        .iter()
        .zip(tracks)
        .map(|(s, t)| {
            if s.frames.len() != t.len() {
                return Err(Error::InvalidInput(format!("scene {} frame count mismatch", s.index)));
            }
            Ok(s.frames
                .iter()
                .zip(t)
                .map(|(f, out)| EvalFrame {
                    gt: f.gt.clone(),
                    preds: out
                        .iter()
                        .map(|o| PredBox {
                            track_id: o.track_id,
                            bbox: o.bbox,
                            confidence: o.c_trk,
                        })
                        .collect(),
                })
                .collect())
        })
        .collect()
}

pub fn evaluate_tracks(scenes: &[Scene], tracks: &[Vec<Vec<TrackOutput>>], n: usize) -> Result<EvalReport> {
    evaluate(&eval_frames(scenes, tracks)?, n)
}

/// Applies `f` to every item on up to `available_parallelism` threads;
/// results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Model, padded frame pair and target matrix of the gradient check.
pub struct GradcheckInstance {
    pub model: ShastaModel,
    pub prev: PaddedFrame,
    pub cur: PaddedFrame,
    pub gt: Vec<f64>,
}

/// Three detections per frame (one match, one death, one birth, a false
/// positive on each side) with `F = 4` and the default network widths.
pub fn gradcheck_instance(seed: u64) -> Result<GradcheckInstance> {
    let n_max = 4;
    let model = ShastaModel::new(ModelConfig::new(n_max, 4, seed))?;
    let d = model.config.shape_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut car = |x: f64, y: f64| {
        let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
        let dims = ObjectClass::Car.typical_dims();
        BoundingBox3D::new(
            [x + j(&mut rng, 0.3), y + j(&mut rng, 0.3), 0.8],
            [dims[0] + j(&mut rng, 0.1), dims[1] + j(&mut rng, 0.2), dims[2] + j(&mut rng, 0.1)],
            j(&mut rng, 3.0),
            ObjectClass::Car,
        )
        .with_velocity(j(&mut rng, 2.0), j(&mut rng, 2.0))
        .with_confidence(rng.random_range(0.3..0.95))
    };
    let prev_boxes = [car(10.0, 10.0), car(20.0, 5.0), car(5.0, 25.0)];
    let cur_boxes = [car(10.5, 10.8), car(30.0, 20.0), car(25.0, 28.0)];
    let gt = |id: u64, b: &BoundingBox3D| GtBox { gt_id: id, bbox: *b };
    let gt_prev = [gt(1, &prev_boxes[0]), gt(2, &prev_boxes[1])];
    let gt_cur = [gt(1, &cur_boxes[0]), gt(3, &cur_boxes[1])];
    let mut desc = || -> Vec<Vec<f64>> {
        (0..3)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let (dp, dc) = (desc(), desc());
    let prev = PaddedFrame::new(pad_boxes(&prev_boxes, n_max), &dp, d)?;
    let cur = PaddedFrame::new(pad_boxes(&cur_boxes, n_max), &dc, d)?;
    let gt = build_gt_affinity(&prev.dets, &cur.dets, &gt_prev, &gt_cur)?;
    Ok(GradcheckInstance { model, prev, cur, gt })
}

/// Gradient check of the full model; `corrupt_backward` flips the first
/// analytic gradient entry so the check must fail.
pub fn run_gradcheck(seed: u64, corrupt_backward: bool) -> Result<GradcheckReport> {
    let inst = gradcheck_instance(seed)?;
    model_gradcheck_with(&inst.model, &inst.prev, &inst.cur, &inst.gt, |g| {
        if corrupt_backward {
            g[0] = -g[0] - 1.0;
        }
    })
}
