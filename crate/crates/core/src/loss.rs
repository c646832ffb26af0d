//! Training objective and optimizer loop.
//!
//! One `t` is drawn per sequence, the sequence is corrupted, and the
//! predictor is scored by cross-entropy on the masked positions, weighted by
//! `w(t)`. Parameters follow SGD with momentum and global-norm clipping.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::EnumerableDataset;
use crate::error::{Error, Result};
use crate::interpolant::{corrupt, corrupt_coupled, corrupt_smoothed};
use crate::predictor::{log_softmax, softmax, Cond, Gradient, Logits, TrainableParams, Variant};
use crate::rng::ChaCha8Rng;
use crate::schedule::{CouplingSpec, Schedule, SmoothingSpec, DEFAULT_EPSILON};
use crate::tokens::{CorruptionState, Layout, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Unit,
    /// `kappa_dot / (1 - kappa)`.
    Elbo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weight_mode: WeightMode,
    pub epsilon: f64,
    pub cond_dropout_p: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub masking_ce: bool,
    pub grad_clip_norm: f64,
    /// Uniform-token smoothing strength; 0 is the plain interpolant.
    pub smoothing_s: f64,
    /// Fraction of positions copied into the source; 0 disables coupling.
    pub coupling_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_mode: WeightMode::Unit,
            epsilon: DEFAULT_EPSILON,
            cond_dropout_p: 0.1,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            steps: 2000,
            masking_ce: true,
            grad_clip_norm: 2.0,
            smoothing_s: 0.0,
            coupling_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config("epsilon", "must lie in (0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::config("cond_dropout_p", "must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be finite and nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm", "must be positive"));
        }
        SmoothingSpec::new(self.smoothing_s)?;
        CouplingSpec::new(self.coupling_ratio)?;
        if self.smoothing_s > 0.0 && self.coupling_ratio > 0.0 {
            return Err(Error::config(
                "coupling_ratio",
                "cannot be combined with smoothing_s",
            ));
        }
        Ok(())
    }

    /// Corrupts a training sequence with the configured interpolant.
    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        layout: &Layout,
        x1: &TokenSeq,
        t: f64,
        schedule: &Schedule,
        rng: &mut R,
    ) -> Result<CorruptionState> {
        if self.smoothing_s > 0.0 {
            corrupt_smoothed(
                layout,
                x1,
                t,
                schedule,
                &SmoothingSpec::new(self.smoothing_s)?,
                rng,
            )
        } else if self.coupling_ratio > 0.0 {
            corrupt_coupled(
                layout,
                x1,
                t,
                schedule,
                &CouplingSpec::new(self.coupling_ratio)?,
                rng,
            )
        } else {
            corrupt(layout, x1, t, schedule, rng)
        }
    }
}

/// `w(t)` for `t` in `[epsilon, 1 - epsilon]`.
pub fn weight(config: &TrainConfig, schedule: &Schedule, t: f64) -> Result<f64> {
    let eps = config.epsilon;
    if !(t >= eps && t <= 1.0 - eps) {
        return Err(Error::Input(format!(
            "t={t} is outside [{eps}, {}]",
            1.0 - eps
        )));
    }
    match config.weight_mode {
        WeightMode::Unit => Ok(1.0),
        WeightMode::Elbo => schedule.unmask_rate(t),
    }
}

/// `w * sum_l -log softmax(logits[l])[target[l]]`, over the masked positions
/// when `masking_ce` holds and over every position otherwise.
pub fn masked_ce(
    logits: &Logits,
    target: &TokenSeq,
    masked: &[bool],
    w: f64,
    masking_ce: bool,
) -> f64 {
    let mut total = 0.0;
    for (l, row) in logits.rows().iter().enumerate() {
        if masking_ce && !masked[l] {
            continue;
        }
        total -= log_softmax(row)[target[l] as usize];
    }
    w * total
}

/// Loss and its gradient with respect to the raw scores.
pub(crate) fn masked_ce_and_grad(
    rows: &[Vec<f64>],
    target: &TokenSeq,
    include: &[bool],
    w: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let grads = rows
        .iter()
        .enumerate()
        .map(|(l, row)| {
            if !include[l] {
                return vec![0.0; row.len()];
            }
            let y = target[l] as usize;
            total -= log_softmax(row)[y];
            let mut g: Vec<f64> = softmax(row).into_iter().map(|p| w * p).collect();
            g[y] -= w;
            g
        })
        .collect();
    (w * total, grads)
}

/// Uniform on `[epsilon, 1 - epsilon]`.
pub fn sample_time<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> f64 {
    let eps = config.epsilon;
    eps + (1.0 - 2.0 * eps) * rng.random::<f64>()
}

/// Replaces the condition by `[C]` with probability `cond_dropout_p`. One
/// uniform is consumed on every call.
pub fn dropout_cond<R: Rng + ?Sized>(cond: Cond, config: &TrainConfig, rng: &mut R) -> Cond {
    if rng.random::<f64>() < config.cond_dropout_p {
        Cond::Null
    } else {
        cond
    }
}

/// One clean training sequence with its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub tokens: TokenSeq,
    pub cond: Cond,
}

/// Draws a batch from the dataset law; classes become conditions.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &EnumerableDataset,
    size: usize,
    rng: &mut R,
) -> Vec<TrainItem> {
    (0..size)
        .map(|_| {
            let i = dataset.sample_index(rng);
            TrainItem {
                tokens: dataset.support()[i].clone(),
                cond: dataset.classes().map_or(Cond::Null, |c| Cond::Class(c[i])),
            }
        })
        .collect()
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_mean: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub masked_fraction: f64,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: TrainableParams,
    pub config: TrainConfig,
    pub schedule: Schedule,
    velocity: Vec<f64>,
    step: u64,
}

impl Trainer {
    pub fn new(params: TrainableParams, config: TrainConfig, schedule: Schedule) -> Result<Self> {
        config.validate()?;
        let velocity = vec![0.0; params.num_params()];
        Ok(Self {
            params,
            config,
            schedule,
            velocity,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Mean loss and gradient over `batch`; randomness is drawn from `rng`
    /// in item order before the gradients fan out.
    pub fn batch_gradient(
        &self,
        batch: &[TrainItem],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradient, f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let layout = {
            use crate::predictor::Predictor;
            self.params.layout().clone()
        };
        let mut prepared = Vec::with_capacity(batch.len());
        for item in batch {
            let t = sample_time(&self.config, rng);
            let state = self
                .config
                .corrupt(&layout, &item.tokens, t, &self.schedule, rng)?;
            let cond = dropout_cond(item.cond, &self.config, rng);
            let w = weight(&self.config, &self.schedule, t)?;
            prepared.push((state, cond, w));
        }
        let variant = self.params.config().variant;
        let results: Vec<Result<(f64, Gradient)>> = prepared
            .par_iter()
            .zip(batch.par_iter())
            .map(|((state, cond, w), item)| {
                let t = (variant == Variant::Etm).then_some(state.t);
                self.params
                    .backward(state, t, *cond, &item.tokens, *w, self.config.masking_ce)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = Gradient::zeros(self.params.num_params());
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        grad.scale(1.0 / n);
        let t_mean = prepared.iter().map(|(s, _, _)| s.t).sum::<f64>() / n;
        let masked = prepared
            .iter()
            .map(|(s, _, _)| s.masked_fraction())
            .sum::<f64>()
            / n;
        Ok((loss, grad, t_mean, masked))
    }

    pub fn train_step(&mut self, batch: &[TrainItem], rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        let step = self.step + 1;
        let (loss, mut grad, t_mean, masked_fraction) = self.batch_gradient(batch, rng)?;
        let grad_norm = grad.norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss={loss}, grad_norm={grad_norm}, t_mean={t_mean:.4}"),
            });
        }
        if grad_norm > self.config.grad_clip_norm {
            grad.scale(self.config.grad_clip_norm / grad_norm);
        }
        let clipped_grad_norm = grad.norm();
        let lr = self.config.learning_rate;
        let mu = self.config.momentum;
        for ((p, v), g) in self
            .params
            .values_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grad.0)
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        self.step = step;
        Ok(StepRecord {
            step,
            t_mean,
            loss,
            grad_norm,
            clipped_grad_norm,
            masked_fraction,
        })
    }

    /// Runs `config.steps` steps on batches drawn from `dataset`, handing
    /// every record to `on_step`.
    pub fn fit<F>(
        &mut self,
        dataset: &EnumerableDataset,
        rng: &mut ChaCha8Rng,
        mut on_step: F,
    ) -> Result<()>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        for _ in 0..self.config.steps {
            let batch = sample_batch(dataset, self.config.batch_size, rng);
            let record = self.train_step(&batch, rng)?;
            on_step(&record)?;
        }
        Ok(())
    }
}

/// Mean per-token cross-entropy over masked positions of fresh corruption
/// draws of dataset samples (unit weight, no dropout).
pub fn evaluate_masked_ce(
    params: &TrainableParams,
    dataset: &EnumerableDataset,
    schedule: &Schedule,
    epsilon: f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use crate::predictor::Predictor;
    let config = TrainConfig {
        epsilon,
        ..TrainConfig::default()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        let i = dataset.sample_index(rng);
        let x1 = &dataset.support()[i];
        let t = sample_time(&config, rng);
        let state: CorruptionState = corrupt(params.layout(), x1, t, schedule, rng)?;
        if state.masked_count() == 0 {
            continue;
        }
        let cond = dataset.classes().map_or(Cond::Null, |c| Cond::Class(c[i]));
        let tt = (params.config().variant == Variant::Etm).then_some(t);
        let logits = params.predict(&state, tt, cond)?;
        total += masked_ce(&logits, x1, &state.masked, 1.0, true);
        count += state.masked_count();
    }
    if count == 0 {
        return Err(Error::Input("no masked positions were drawn".into()));
    }
    Ok(total / count as f64)
}
