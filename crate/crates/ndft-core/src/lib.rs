//! Adversarial feature-transform training at desk scale.
//!
//! The crate trains a shared convolutional trunk so that a downstream task
//! (single-object classification plus box regression) keeps working while
//! labeled nuisance attributes of the input become unpredictable from the
//! trunk's features. Everything runs on a synthetic shape dataset whose
//! nuisance factors (object scale, rotation, brightness) are controlled and
//! therefore measurable.
//!
//! Module map:
//! - [`tensor`] / [`autograd`]: dense fp64 tensors with tape-based
//!   reverse-mode differentiation, sized for small conv nets.
//! - [`gradcheck`]: central-finite-difference verification of the tape.
//! - [`nn`]: layers, initializers, SGD with momentum, and the three-part
//!   model (trunk, task head, nuisance heads) with disjoint parameter groups.
//! - [`losses`]: task loss, nuisance cross-entropy, negative-entropy
//!   adversarial loss, and the per-mode composition.
//! - [`synth`]: deterministic synthetic sample generator with seen/unseen
//!   domain splits and a flat binary export format.
//! - [`train`]: the alternating training schedule with adversary
//!   strengthening and periodic restarts.
//! - [`eval`]: task metrics, leakage probes, the ablation grid, and the
//!   frozen-trunk transfer experiment.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::Tape;
pub use error::{Error, Result};
pub use eval::{EvalSet, MetricsRecord, ProbeConfig, ProbeResult};
pub use losses::{LossBreakdown, LossMode};
pub use nn::{ArchConfig, NdftModel, ParamGroup, SgdConfig, SgdState};
pub use rng::{RngState, StreamRng};
pub use synth::{Batch, DataConfig, DomainSplit, NuisanceSpec, Partition, Sample};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainMode, TrainState, Trainer};
