//! Reverse-time generation.
//!
//! ETM/ITM chains run a fixed-step Euler scheme on the grid
//! `t_n = eps + n dt`, `dt = (1 - 2 eps) / nfe`. In every step each masked
//! position unmasks with probability `h = min(1, dt * rate(t_n))`; the
//! Bernoulli draws come first and the predictor is only queried when at
//! least one position unmasks. MGM chains instead reveal a scheduled count
//! of the most confident candidates per step.
//!
//! Per-position scores go through guidance, then temperature, then top-p.

mod mgm;

pub use mgm::{gumbel_scale, target_count};

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{cfg_logits, softmax, CfgMode, Cond, Logits, Predictor};
use crate::rng::{stream, ChaCha8Rng};
use crate::schedule::{Schedule, DEFAULT_EPSILON};
use crate::tokens::{CorruptionState, Layout, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Etm,
    #[default]
    Itm,
    Mgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelMode {
    #[default]
    None,
    /// `gumbel_temp * (1 - n / nfe)`.
    LinearAnneal,
    Constant,
    /// `gumbel_temp` in the first two steps, zero afterwards.
    Warmup,
}

/// MGM candidate confidence before Gumbel noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Log-probability of the sampled candidate.
    #[default]
    LogProb,
    /// Probability of the sampled candidate.
    Prob,
    /// A uniform draw, giving a uniformly random reveal order.
    Random,
}

macro_rules! snake_enum_str {
    ($ty:ty, $field:literal, { $($name:literal $(| $alias:literal)* => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name $(| $alias)* => Ok($variant),)+
                    other => Err(Error::config($field, format!("unknown value `{other}`"))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

snake_enum_str!(SamplerKind, "kind", { "etm" => SamplerKind::Etm, "itm" => SamplerKind::Itm, "mgm" => SamplerKind::Mgm });
snake_enum_str!(GumbelMode, "gumbel_mode", {
    "none" => GumbelMode::None,
    "linear_anneal" | "linear" => GumbelMode::LinearAnneal,
    "constant" => GumbelMode::Constant,
    "warmup" => GumbelMode::Warmup,
});
snake_enum_str!(ConfidenceMode, "confidence", {
    "log_prob" | "logprob" => ConfidenceMode::LogProb,
    "prob" => ConfidenceMode::Prob,
    "random" => ConfidenceMode::Random,
});
snake_enum_str!(CfgMode, "cfg_mode", { "log_space" | "log" => CfgMode::LogSpace, "probability" | "prob" => CfgMode::Probability });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub nfe: usize,
    pub schedule: Schedule,
    pub epsilon: f64,
    pub temperature: f64,
    pub top_p: f64,
    /// Guidance strength; 0 switches guidance off.
    pub cfg_omega: f64,
    pub cfg_mode: CfgMode,
    pub gumbel_mode: GumbelMode,
    pub gumbel_temp: f64,
    pub confidence: ConfidenceMode,
    pub argmax_finalize: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Itm,
            nfe: 1000,
            schedule: Schedule::linear(),
            epsilon: DEFAULT_EPSILON,
            temperature: 1.0,
            top_p: 1.0,
            cfg_omega: 0.0,
            cfg_mode: CfgMode::LogSpace,
            gumbel_mode: GumbelMode::None,
            gumbel_temp: 0.0,
            confidence: ConfidenceMode::LogProb,
            argmax_finalize: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::config("nfe", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config("epsilon", "must lie in (0, 0.5)"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p", "must lie in (0, 1]"));
        }
        if !self.cfg_omega.is_finite() {
            return Err(Error::config("cfg_omega", "must be finite"));
        }
        if !(self.gumbel_temp >= 0.0 && self.gumbel_temp.is_finite()) {
            return Err(Error::config(
                "gumbel_temp",
                "must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    /// Step size of the ETM/ITM grid.
    pub fn dt(&self) -> f64 {
        (1.0 - 2.0 * self.epsilon) / self.nfe as f64
    }

    /// Times of the snapshots a chain records, including the finalize
    /// snapshot at `t = 1` when it applies.
    pub fn snapshot_times(&self) -> Vec<f64> {
        match self.kind {
            SamplerKind::Mgm => (0..=self.nfe).map(|n| n as f64 / self.nfe as f64).collect(),
            _ => {
                let mut times: Vec<f64> = (0..=self.nfe).map(|n| self.grid_time(n)).collect();
                if self.argmax_finalize {
                    times.push(1.0);
                }
                times
            }
        }
    }

    fn grid_time(&self, n: usize) -> f64 {
        if n == self.nfe {
            1.0 - self.epsilon
        } else {
            self.epsilon + n as f64 * self.dt()
        }
    }
}

/// A clamped, fully known modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub segment: usize,
    pub tokens: TokenSeq,
}

/// Class condition and, for joint models, an observed modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning {
    pub cond: Cond,
    pub observed: Option<Observed>,
}

impl Conditioning {
    pub fn class(c: u32) -> Self {
        Self {
            cond: Cond::Class(c),
            observed: None,
        }
    }

    pub fn observed(segment: usize, tokens: TokenSeq) -> Self {
        Self {
            cond: Cond::Null,
            observed: Some(Observed { segment, tokens }),
        }
    }

    fn is_conditional(&self) -> bool {
        self.cond != Cond::Null || self.observed.is_some()
    }

    /// All-mask start with the observed modality written in.
    pub fn initial_state(&self, layout: &Layout, t: f64) -> Result<CorruptionState> {
        let mut state = layout.all_masked(t);
        if let Some(obs) = &self.observed {
            let segment = layout
                .segments()
                .get(obs.segment)
                .ok_or_else(|| Error::Input(format!("no segment {}", obs.segment)))?;
            if obs.tokens.len() != segment.len {
                return Err(Error::Input(format!(
                    "observed `{}` has {} tokens, expected {}",
                    segment.name,
                    obs.tokens.len(),
                    segment.len
                )));
            }
            if let Some(bad) = obs.tokens.iter().find(|&&v| !segment.vocab.is_data(v)) {
                return Err(Error::Input(format!(
                    "observed `{}` contains non-data token {bad}",
                    segment.name
                )));
            }
            for (l, &v) in layout.range(obs.segment).zip(obs.tokens.iter()) {
                state.x_t.as_mut_slice()[l] = v;
                state.masked[l] = false;
            }
        }
        Ok(state)
    }

    /// The state seen by the unconditional branch of guidance: the observed
    /// modality is masked again.
    fn unconditional_state(&self, layout: &Layout, state: &CorruptionState) -> CorruptionState {
        let mut out = state.clone();
        if let Some(obs) = &self.observed {
            for l in layout.range(obs.segment) {
                out.x_t.as_mut_slice()[l] = layout.mask_id_at(l);
                out.masked[l] = true;
            }
        }
        out
    }

    fn clamped(&self, layout: &Layout) -> Vec<bool> {
        let mut clamped = vec![false; layout.len()];
        if let Some(obs) = &self.observed {
            for l in layout.range(obs.segment) {
                clamped[l] = true;
            }
        }
        clamped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub tokens: TokenSeq,
    pub masked_count: usize,
}

/// Every state of one chain, from the all-mask start to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub snapshots: Vec<Snapshot>,
    /// Masks left when the step loop ends, before any finalize.
    pub residual_masks: usize,
}

impl Chain {
    pub fn final_tokens(&self) -> &TokenSeq {
        &self
            .snapshots
            .last()
            .expect("chains have at least one snapshot")
            .tokens
    }

    /// One JSON record per snapshot: `{step, t, tokens, masked_count}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (step, s) in self.snapshots.iter().enumerate() {
            let record = serde_json::json!({
                "step": step,
                "t": s.t,
                "tokens": s.tokens,
                "masked_count": s.masked_count,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}

/// Result of a chain run without snapshot recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub tokens: TokenSeq,
    pub residual_masks: usize,
    /// Masked count at every snapshot time.
    pub masked_counts: Vec<usize>,
}

/// Many chains, in chain-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub samples: Vec<TokenSeq>,
    pub residual_masks: Vec<usize>,
    pub times: Vec<f64>,
    /// Sum over chains of the masked count at each snapshot time.
    pub masked_sums: Vec<u64>,
    pub seq_len: usize,
}

impl BatchOutcome {
    /// `(t, mean masked fraction)` per snapshot time.
    pub fn mask_fraction_curve(&self) -> Vec<(f64, f64)> {
        let denom = (self.samples.len() * self.seq_len) as f64;
        self.times
            .iter()
            .zip(&self.masked_sums)
            .map(|(&t, &m)| (t, m as f64 / denom))
            .collect()
    }

    pub fn mean_residual_fraction(&self) -> f64 {
        let total: usize = self.residual_masks.iter().sum();
        total as f64 / (self.samples.len() * self.seq_len) as f64
    }
}

/// Smallest prefix of the descending-sorted tokens whose mass reaches
/// `top_p`, renormalized. Ties sort by lower token id.
pub fn filter_top_p(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.iter().map(|p| p / mass).collect()
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<u32> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| Error::Contract(format!("bad categorical row: {e}")))?;
    Ok(dist.sample(rng) as u32)
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// A predictor paired with a validated sampling configuration.
pub struct Sampler<'a> {
    predictor: &'a dyn Predictor,
    config: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(predictor: &'a dyn Predictor, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if config.kind == SamplerKind::Mgm && config.nfe > predictor.layout().len() {
            return Err(Error::config(
                "nfe",
                format!(
                    "mgm needs nfe <= L = {}, got {}",
                    predictor.layout().len(),
                    config.nfe
                ),
            ));
        }
        Ok(Self { predictor, config })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        self.predictor.layout()
    }

    fn time_arg(&self, t: f64) -> Option<f64> {
        (self.config.kind == SamplerKind::Etm).then_some(t)
    }

    /// Predictor scores after guidance.
    pub fn guided_logits(&self, state: &CorruptionState, ctx: &Conditioning) -> Result<Logits> {
        let t = self.time_arg(state.t);
        let cond = self.predictor.predict(state, t, ctx.cond)?;
        if self.config.cfg_omega == 0.0 || !ctx.is_conditional() {
            return Ok(cond);
        }
        let uncond_state = ctx.unconditional_state(self.layout(), state);
        let uncond = self.predictor.predict(&uncond_state, t, Cond::Null)?;
        cfg_logits(&cond, &uncond, self.config.cfg_omega, self.config.cfg_mode)
    }

    /// Temperature then top-p on one row of guided scores.
    pub fn row_probs(&self, row: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = row.iter().map(|v| v / self.config.temperature).collect();
        filter_top_p(&softmax(&scaled), self.config.top_p)
    }

    /// One Euler step of size `dt` from `state.t`; `state.t + dt` may not
    /// pass 1.
    pub fn step(
        &self,
        state: &CorruptionState,
        dt: f64,
        ctx: &Conditioning,
        rng: &mut ChaCha8Rng,
    ) -> Result<CorruptionState> {
        if !(dt >= 0.0 && state.t + dt <= 1.0 + 1e-12) {
            return Err(Error::Input(format!(
                "step from {} by {dt} leaves [0, 1]",
                state.t
            )));
        }
        let rate = self.config.schedule.unmask_rate(state.t)?;
        let h = (dt * rate).clamp(0.0, 1.0);
        let mut next = state.clone();
        next.t = state.t + dt;
        let reveal: Vec<usize> = (0..state.masked.len())
            .filter(|&l| state.masked[l])
            .filter(|_| rng.random::<f64>() < h)
            .collect();
        if reveal.is_empty() {
            return Ok(next);
        }
        let logits = self.guided_logits(state, ctx)?;
        for l in reveal {
            let probs = self.row_probs(logits.row(l));
            next.x_t.as_mut_slice()[l] = categorical(&probs, rng)?;
            next.masked[l] = false;
        }
        Ok(next)
    }

    /// Sets every masked position to the argmax of its guided, tempered scores.
    pub fn argmax_finalize(&self, state: &CorruptionState, ctx: &Conditioning) -> Result<TokenSeq> {
        if state.masked_count() == 0 {
            return Ok(state.x_t.clone());
        }
        let logits = self.guided_logits(state, ctx)?;
        let mut tokens = state.x_t.clone();
        for l in (0..state.masked.len()).filter(|&l| state.masked[l]) {
            // top-p keeps the mode, so it cannot move the argmax
            let scaled: Vec<f64> = logits
                .row(l)
                .iter()
                .map(|v| v / self.config.temperature)
                .collect();
            tokens.as_mut_slice()[l] = argmax(&scaled);
        }
        Ok(tokens)
    }

    fn drive<F>(
        &self,
        ctx: &Conditioning,
        rng: &mut ChaCha8Rng,
        mut record: F,
    ) -> Result<(TokenSeq, usize)>
    where
        F: FnMut(f64, &TokenSeq, usize),
    {
        if self.config.kind == SamplerKind::Mgm {
            return mgm::drive(self, ctx, rng, record);
        }
        let mut state = ctx.initial_state(self.layout(), self.config.grid_time(0))?;
        record(state.t, &state.x_t, state.masked_count());
        for n in 0..self.config.nfe {
            state.t = self.config.grid_time(n);
            let step_dt = self.config.grid_time(n + 1) - state.t;
            state = self.step(&state, step_dt, ctx, rng)?;
            state.t = self.config.grid_time(n + 1);
            record(state.t, &state.x_t, state.masked_count());
        }
        let residual = state.masked_count();
        if self.config.argmax_finalize {
            let tokens = self.argmax_finalize(&state, ctx)?;
            record(1.0, &tokens, 0);
            return Ok((tokens, residual));
        }
        Ok((state.x_t, residual))
    }

    /// Runs one chain and keeps every snapshot.
    pub fn sample_chain(&self, ctx: &Conditioning, rng: &mut ChaCha8Rng) -> Result<Chain> {
        let mut snapshots = Vec::with_capacity(self.config.nfe + 2);
        let (_, residual_masks) = self.drive(ctx, rng, |t, tokens, masked_count| {
            snapshots.push(Snapshot {
                t,
                tokens: tokens.clone(),
                masked_count,
            })
        })?;
        Ok(Chain {
            snapshots,
            residual_masks,
        })
    }

    /// Runs one chain keeping only its output and masked counts.
    pub fn sample(&self, ctx: &Conditioning, rng: &mut ChaCha8Rng) -> Result<ChainOutcome> {
        let mut masked_counts = Vec::with_capacity(self.config.nfe + 2);
        let (tokens, residual_masks) = self.drive(ctx, rng, |_, _, m| masked_counts.push(m))?;
        Ok(ChainOutcome {
            tokens,
            residual_masks,
            masked_counts,
        })
    }

    /// `n` chains in parallel; chain `i` draws from `stream(seed, i)` and is
    /// conditioned on `ctx_for(i)`. The result does not depend on the
    /// thread count.
    pub fn run_batch<F>(&self, n: usize, ctx_for: F) -> Result<BatchOutcome>
    where
        F: Fn(u64) -> Conditioning + Sync,
    {
        const CHUNK: usize = 512;
        let times = self.config.snapshot_times();
        let chunks: Vec<Result<(Vec<ChainOutcome>, Vec<u64>)>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut sums = vec![0u64; times.len()];
                let mut outs = Vec::with_capacity(CHUNK);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let mut rng = stream(self.config.seed, i as u64);
                    let mut out = self.sample(&ctx_for(i as u64), &mut rng)?;
                    for (s, &m) in sums.iter_mut().zip(&out.masked_counts) {
                        *s += m as u64;
                    }
                    out.masked_counts = Vec::new();
                    outs.push(out);
                }
                Ok((outs, sums))
            })
            .collect();
        let mut samples = Vec::with_capacity(n);
        let mut residual_masks = Vec::with_capacity(n);
        let mut masked_sums = vec![0u64; times.len()];
        for chunk in chunks {
            let (outs, sums) = chunk?;
            for (a, b) in masked_sums.iter_mut().zip(sums) {
                *a += b;
            }
            for out in outs {
                samples.push(out.tokens);
                residual_masks.push(out.residual_masks);
            }
        }
        Ok(BatchOutcome {
            samples,
            residual_masks,
            times,
            masked_sums,
            seq_len: self.layout().len(),
        })
    }
}

/// Samples the unknown modality of a joint model with `observed` clamped.
pub fn conditional_sample(
    predictor: &dyn Predictor,
    observed: Observed,
    config: SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Chain> {
    let sampler = Sampler::new(predictor, config)?;
    let ctx = Conditioning {
        cond: Cond::Null,
        observed: Some(observed),
    };
    sampler.sample_chain(&ctx, rng)
}

/// Sample sequences with the layout and sampler settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub layout: Layout,
    pub grid: Option<(usize, usize)>,
    pub sampler: Option<SamplerConfig>,
    pub samples: Vec<TokenSeq>,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    format: String,
    version: u32,
    seq_len: usize,
    segments: Layout,
    grid: Option<(usize, usize)>,
    sampler: Option<SamplerConfig>,
    count: usize,
}

const SAMPLES_TAG: &str = "dinterp-samples";

impl SampleFile {
    /// A JSON header line, then one line of space-separated token ids per
    /// sample.
    pub fn to_text(&self) -> String {
        let header = SampleHeader {
            format: SAMPLES_TAG.into(),
            version: 1,
            seq_len: self.layout.len(),
            segments: self.layout.clone(),
            grid: self.grid,
            sampler: self.sampler.clone(),
            count: self.samples.len(),
        };
        let mut out = serde_json::to_string(&header).expect("headers serialize");
        out.push('\n');
        for s in &self.samples {
            let line: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses [`SampleFile::to_text`] output, checking every sequence
    /// against the header's layout.
    pub fn parse(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty samples file".into()))?;
        let header: SampleHeader =
            serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != SAMPLES_TAG {
            return Err(parse_err(1, "not a samples file".into()));
        }
        let layout = header.segments;
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let tokens: std::result::Result<Vec<u32>, _> =
                line.split_whitespace().map(str::parse).collect();
            let tokens = TokenSeq::new(tokens.map_err(|e| parse_err(i + 1, e.to_string()))?);
            layout
                .check_partial(&tokens)
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
            samples.push(tokens);
        }
        if header.count != samples.len() {
            return Err(parse_err(
                1,
                format!(
                    "header promises {} samples, found {}",
                    header.count,
                    samples.len()
                ),
            ));
        }
        Ok(Self {
            layout,
            grid: header.grid,
            sampler: header.sampler,
            samples,
        })
    }
}

#[cfg(test)]
mod tests;
