//! The learned affinity model, ground-truth targets and training.

pub mod checkpoint;
pub mod gt;
pub mod model;
pub mod precise;
pub mod train;

pub use checkpoint::{Checkpoint, ModelBank, NamedNetwork, CHECKPOINT_FORMAT_VERSION};
pub use gt::{build_gt_affinity, check_unique_ids, label_boxes, label_slots, GtBox};
pub use model::{
    affinity_head, augment_boxes, augment_shapes, deaugment_boxes, matching_loss, AffinityOutput,
    AugmentedBoxes, AugmentedShapes, BoxAnchors, ForwardCache, ModelConfig, ModelGrads, NetId,
    PaddedFrame, ResidualMode, ShapeAnchors, ShastaModel,
};
pub use precise::{loss_in, model_gradcheck, model_gradcheck_with};
pub use train::{
    downsample_false_positives, evaluate_loss, pad_frame, prepare_pair, sequence_pairs, train,
    train_from, FramePair, LabeledFrame, TrainConfig, TrainReport, TrainState,
};
