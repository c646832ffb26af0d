//! Discrete interpolants on small enumerable token spaces.
//!
//! A clean token sequence `x1` is corrupted toward an all-`[MASK]` source by
//! a masking schedule `kappa(t)`; a predictor learns (or, for the oracle,
//! computes exactly) the per-position posterior over clean tokens given the
//! revealed ones; samplers run the reverse process from all-mask back to
//! data. Every piece is small enough that distributional claims can be
//! checked against exact enumeration.
//!
//! Module map:
//!
//! - [`schedule`]: masking schedules, their derivatives, unmasking rate,
//!   conditional coupling and the smoothing mixture.
//! - [`interpolant`]: forward corruption (plain, smoothed, joint, coupled).
//! - [`predictor`]: the exact enumeration oracle, a trainable network with
//!   explicit or implicit timestep, classifier-free guidance, checkpoints.
//! - [`loss`]: masked weighted cross-entropy and the training loop.
//! - [`sampler`]: Euler unmasking, argmax finalize, MaskGIT-style decoding,
//!   temperature / top-p filtering, conditional sampling.
//! - [`datasets`]: enumerable synthetic datasets and their file format.
//! - [`eval`]: TV/KL, mask-fraction curves, segmentation scores, sweeps.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod interpolant;
pub mod loss;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tokens;

pub use error::{Error, Result};
pub use tokens::{CorruptionState, JointSeq, Layout, Segment, TokenSeq, VocabSpec};
