//! Small dense-network toolkit: MLPs, Adam, softmax and the affinity loss.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod real;
pub mod softmax;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use mlp::{LayerRecord, Mlp, MlpCache, MlpRecord, MlpSpec};
pub use real::{DoubleDouble, Real};
pub use softmax::{log_affinity_loss, masked_softmax, MASKED_LOGIT, PROB_FLOOR};
