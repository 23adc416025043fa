//! Test-time adaptation: losses, re-weighting, method presets and the online step.

pub mod dot;
pub mod loss;
pub mod method;
pub mod step;

pub use dot::{dot_weights, la_adjust, normalize_weights, sample_drop_filter, update_z, ClassFreqVector, DotVariant};
pub use loss::{entropy_loss, entw_loss, pl_loss, LossKind, LossSpec, SampleLoss};
pub use method::{MethodSpec, Strategy};
pub use step::{adapt_step, predict, AdaptState, Adapter, StepOutput};
