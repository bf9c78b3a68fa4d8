//! Attention-map reuse and masked layer-to-layer distillation for small
//! Transformer encoders, with exact parameter and MAC accounting.
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: `f64` tensors, a reverse-mode
//!   tape and a finite-difference checker.
//! * [`encoder`]: pre-norm encoder whose layers either compute attention maps
//!   or reuse an earlier layer's maps.
//! * [`reuse`]: reuse patterns (`2by6`, `3by4`, ...) and FFN reinvestment.
//! * [`masking`]: span masks shared by teacher and student; ratio schedules.
//! * [`distill`]: masked/unmasked distillation losses, ablations, training.
//! * [`accounting`]: closed-form parameter and MAC counts.
//! * [`synth`]: synthetic frame sequences.

pub mod accounting;
pub mod autodiff;
pub mod checkpoint;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod reuse;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
