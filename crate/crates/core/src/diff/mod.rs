//! Differentiable-computation substrate: dense matrices, a reverse-mode tape,
//! named parameters, Adam, seeded randomness, gradient verification and the
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, adam_step_where, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, LossEval};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{gaussian, seeded_rng, SeededRng};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Mat, Scalar};

/// Global gradient norm applied before every optimizer step.
pub const CLIP_GRAD_NORM: f64 = 10.0;
