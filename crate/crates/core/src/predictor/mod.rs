//! Unmasking predictors `p(x1 | x_t [, t])`.
//!
//! [`OraclePredictor`] computes the exact posterior of an enumerable
//! dataset; [`TrainableParams`] is a small network with an explicit
//! (ETM) or implicit (ITM) timestep. Both implement [`Predictor`].

mod checkpoint;
mod network;
mod oracle;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use network::{gradient_check, Gradient, NetConfig, TrainableParams, Variant, TIME_BINS};
pub use oracle::{nearest_posterior, oracle_posterior, OraclePredictor};

pub use crate::datasets::EnumerableDataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{CorruptionState, Layout};

/// Score standing in for `-inf`: `exp` of it relative to any real score is 0.
pub const MIN_SCORE: f64 = -1.0e30;

/// Class conditioning. `Null` is the `[C]` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Cond {
    #[default]
    Null,
    Class(u32),
}

/// How a predictor consumes the time argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeInput {
    /// Requires `t` (ETM).
    Explicit,
    /// Forbids `t` (ITM).
    Implicit,
    /// Accepts and ignores `t` (the oracle).
    Ignored,
}

/// Per-position unnormalized scores over each position's data alphabet.
/// `[MASK]` and `[C]` have no column and are therefore never produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    rows: Vec<Vec<f64>>,
}

impl Logits {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.iter().any(|r| r.is_empty()) {
            return Err(Error::Shape("logit rows must be nonempty".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("logits must be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.rows[position]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn same_shape(&self, other: &Logits) -> bool {
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn log_softmax(&self) -> Logits {
        Logits {
            rows: self.rows.iter().map(|r| log_softmax(r)).collect(),
        }
    }

    pub fn softmax(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| softmax(r)).collect()
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| (v - lse).max(MIN_SCORE)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub trait Predictor: Send + Sync {
    fn layout(&self) -> &Layout;

    fn time_input(&self) -> TimeInput;

    /// Number of conditioning classes (0 when unconditional).
    fn num_classes(&self) -> usize;

    fn predict(&self, state: &CorruptionState, t: Option<f64>, cond: Cond) -> Result<Logits>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    /// `log p_u + w (log p_c - log p_u)`, renormalized.
    #[default]
    LogSpace,
    /// `p_u + w (p_c - p_u)` with negatives clipped to 0, renormalized.
    Probability,
}

/// Classifier-free guidance with strength `omega`. The result is a
/// normalized log-probability table.
pub fn cfg_logits(cond: &Logits, uncond: &Logits, omega: f64, mode: CfgMode) -> Result<Logits> {
    if !cond.same_shape(uncond) {
        return Err(Error::Shape(
            "conditional and unconditional logits differ in shape".into(),
        ));
    }
    let rows = cond
        .rows
        .iter()
        .zip(&uncond.rows)
        .map(|(c, u)| match mode {
            CfgMode::LogSpace => {
                let (lc, lu) = (log_softmax(c), log_softmax(u));
                let mixed: Vec<f64> = lu
                    .iter()
                    .zip(&lc)
                    .map(|(u, c)| u + omega * (c - u))
                    .collect();
                log_softmax(&mixed)
            }
            CfgMode::Probability => {
                let (pc, pu) = (softmax(c), softmax(u));
                let mixed: Vec<f64> = pu
                    .iter()
                    .zip(&pc)
                    .map(|(u, c)| (u + omega * (c - u)).max(0.0))
                    .collect();
                let total: f64 = mixed.iter().sum();
                if total > 0.0 {
                    mixed
                        .iter()
                        .map(|p| {
                            if *p > 0.0 {
                                (p / total).ln()
                            } else {
                                MIN_SCORE
                            }
                        })
                        .collect()
                } else {
                    // every entry clipped away; fall back to the conditional
                    log_softmax(c)
                }
            }
        })
        .collect();
    Logits::new(rows)
}
