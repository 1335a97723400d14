use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{pad_boxes, BoundingBox3D};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState};

use super::gt::{build_gt_affinity, label_boxes, GtBox};
use super::model::{ModelGrads, PaddedFrame, ShastaModel};

/// One frame of training data: detections, their descriptors and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub boxes: Vec<BoundingBox3D>,
    pub descriptors: Vec<Vec<f64>>,
    pub gt: Vec<GtBox>,
}

impl LabeledFrame {
    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            descriptors: Vec::new(),
            gt: Vec::new(),
        }
    }
}

/// A training example; `prev == None` is the first frame of a sequence.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub prev: Option<&'a LabeledFrame>,
    pub cur: &'a LabeledFrame,
}

/// All consecutive pairs of a sequence, starting with `(None, frame 0)`.
pub fn sequence_pairs(frames: &[LabeledFrame]) -> Vec<FramePair<'_>> {
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        out.push(FramePair {
            prev: if t == 0 { None } else { Some(&frames[t - 1]) },
            cur: f,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frame pairs per Adam step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub fp_downsample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            adam: AdamConfig::default(),
            fp_downsample: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
    pub pairs_used: usize,
}

/// Keeps every TP and at most `max(#TP, 3)` FPs, chosen uniformly.
pub fn downsample_false_positives(frame: &LabeledFrame, rng: &mut ChaCha8Rng) -> LabeledFrame {
    let labels = label_boxes(&frame.boxes, &frame.gt);
    let fps: Vec<usize> = (0..labels.len()).filter(|&k| labels[k].is_none()).collect();
    let n_tp = labels.len() - fps.len();
    let keep_fp = n_tp.max(3);
    if fps.len() <= keep_fp {
        return frame.clone();
    }
    let mut keep = vec![true; labels.len()];
    for &k in &fps {
        keep[k] = false;
    }
    for k in index::sample(rng, fps.len(), keep_fp) {
        keep[fps[k]] = true;
    }
    LabeledFrame {
        boxes: keep_where(&frame.boxes, &keep),
        descriptors: keep_where(&frame.descriptors, &keep),
        gt: frame.gt.clone(),
    }
}

fn keep_where<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
    v.iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| x.clone())
        .collect()
}

/// Pads a frame to the model's capacity.
pub fn pad_frame(model: &ShastaModel, frame: &LabeledFrame) -> Result<PaddedFrame> {
    let dets = pad_boxes(&frame.boxes, model.config.n_max);
    PaddedFrame::new(dets, &frame.descriptors, model.config.shape_dim())
}

/// Padded inputs and target matrix for one pair.
pub fn prepare_pair(
    model: &ShastaModel,
    pair: FramePair<'_>,
) -> Result<(PaddedFrame, PaddedFrame, Vec<f64>)> {
    let empty = LabeledFrame::empty();
    let prev = pair.prev.unwrap_or(&empty);
    let p = pad_frame(model, prev)?;
    let c = pad_frame(model, pair.cur)?;
    let gt = build_gt_affinity(&p.dets, &c.dets, &prev.gt, &pair.cur.gt)?;
    Ok((p, c, gt))
}

fn prepare_sampled(
    model: &ShastaModel,
    pair: FramePair<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(PaddedFrame, PaddedFrame, Vec<f64>)> {
    let prev = pair.prev.map(|f| downsample_false_positives(f, rng));
    let cur = downsample_false_positives(pair.cur, rng);
    prepare_pair(
        model,
        FramePair {
            prev: prev.as_ref(),
            cur: &cur,
        },
    )
}

/// Mean loss over the pairs that carry ground-truth mass.
pub fn evaluate_loss(model: &ShastaModel, pairs: &[FramePair<'_>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let (p, c, gt) = prepare_pair(model, *pair)?;
        if let Some(l) = model.loss(&p, &c, &gt)? {
            total += l;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no frame pair carries ground truth".into()));
    }
    Ok(total / count as f64)
}

/// Optimizer progress; saving it next to a checkpoint lets training resume
/// exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub adam: Vec<AdamState>,
}

impl TrainState {
    pub fn new(model: &ShastaModel) -> Self {
        Self {
            epoch: 0,
            steps: 0,
            adam: model
                .nets
                .iter()
                .map(|n| AdamState::new(n.params().len()))
                .collect(),
        }
    }
}

/// Joint Adam training of all twelve networks.
pub fn train(
    model: &mut ShastaModel,
    pairs: &[FramePair<'_>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut state = TrainState::new(model);
    train_from(model, pairs, cfg, &mut state)
}

/// Runs epochs `state.epoch .. cfg.epochs`. Every epoch draws from its own
/// stream of the run seed, so a resumed run matches an uninterrupted one.
pub fn train_from(
    model: &mut ShastaModel,
    pairs: &[FramePair<'_>],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if state.adam.len() != model.nets.len()
        || state
            .adam
            .iter()
            .zip(&model.nets)
            .any(|(a, n)| a.m.len() != n.params().len())
    {
        return Err(Error::Shape("optimizer state does not fit the model".into()));
    }
    let mut curve = Vec::new();
    let start_steps = state.steps;
    let mut pairs_used = 0;

    for epoch in state.epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = ModelGrads::zeros_like(model);
            let mut in_batch = 0usize;
            for &k in chunk {
                let (p, c, gt) = if cfg.fp_downsample {
                    prepare_sampled(model, pairs[k], &mut rng)?
                } else {
                    prepare_pair(model, pairs[k])?
                };
                let Some((loss, grads)) = model.loss_and_grad(&p, &c, &gt)? else {
                    continue;
                };
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss {loss} at epoch {epoch}, pair {k}"
                    )));
                }
                epoch_loss += loss;
                epoch_count += 1;
                in_batch += 1;
                acc.add_assign(&grads);
            }
            if in_batch == 0 {
                continue;
            }
            acc.scale(1.0 / in_batch as f64);
            for (n, net) in model.nets.iter_mut().enumerate() {
                adam_step(net.params_mut(), &acc.0[n], &mut state.adam[n], &cfg.adam).map_err(
                    |e| Error::Numerical(format!("epoch {epoch}: {e}")),
                )?;
            }
            state.steps += 1;
        }
        if epoch_count == 0 {
            return Err(Error::InvalidInput("no frame pair carries ground truth".into()));
        }
        pairs_used = epoch_count;
        curve.push(epoch_loss / epoch_count as f64);
        state.epoch = epoch + 1;
    }
    Ok(TrainReport {
        loss_curve: curve,
        steps: state.steps - start_steps,
        pairs_used,
    })
}
