//! Confidence-ranked decoding. At step `n` (of `nfe`, `t_n = n / nfe`) a
//! candidate is drawn for every masked position, ranked by confidence plus
//! scaled Gumbel noise, and the top ones are kept so the cumulative number
//! of revealed free positions reaches `ceil(kappa(t_n) * L)`. The rest are
//! masked again.

use rand::Rng;

use super::{categorical, Conditioning, ConfidenceMode, GumbelMode, Sampler};
use crate::error::Result;
use crate::rng::ChaCha8Rng;
use crate::tokens::TokenSeq;

/// Cumulative revealed count after step `n`.
pub fn target_count(kappa: f64, free: usize) -> usize {
    // kappa * L can land a hair above an integer through rounding
    ((kappa * free as f64 - 1e-9).ceil().max(0.0) as usize).min(free)
}

pub fn gumbel_scale(mode: GumbelMode, temp: f64, n: usize, nfe: usize) -> f64 {
    match mode {
        GumbelMode::None => 0.0,
        GumbelMode::LinearAnneal => temp * (1.0 - n as f64 / nfe as f64),
        GumbelMode::Constant => temp,
        GumbelMode::Warmup => {
            if n <= 2 {
                temp
            } else {
                0.0
            }
        }
    }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub(super) fn drive<F>(
    sampler: &Sampler<'_>,
    ctx: &Conditioning,
    rng: &mut ChaCha8Rng,
    mut record: F,
) -> Result<(TokenSeq, usize)>
where
    F: FnMut(f64, &TokenSeq, usize),
{
    let config = &sampler.config;
    let layout = sampler.layout();
    let nfe = config.nfe;
    let clamped = ctx.clamped(layout);
    let free = clamped.iter().filter(|&&c| !c).count();
    let mut state = ctx.initial_state(layout, 0.0)?;
    record(0.0, &state.x_t, state.masked_count());
    for n in 1..=nfe {
        let t_n = n as f64 / nfe as f64;
        let revealed = free - state.masked_count();
        let target = target_count(config.schedule.kappa(t_n)?, free);
        let take = target.saturating_sub(revealed);
        if take > 0 {
            let logits = sampler.guided_logits(&state, ctx)?;
            let scale = gumbel_scale(config.gumbel_mode, config.gumbel_temp, n, nfe);
            let mut candidates = Vec::new();
            for l in (0..state.masked.len()).filter(|&l| state.masked[l]) {
                let probs = sampler.row_probs(logits.row(l));
                let token = categorical(&probs, rng)?;
                let p = probs[token as usize];
                let base = match config.confidence {
                    ConfidenceMode::LogProb => p.ln(),
                    ConfidenceMode::Prob => p,
                    ConfidenceMode::Random => rng.random::<f64>(),
                };
                let noise = if scale > 0.0 {
                    scale * gumbel(rng)
                } else {
                    0.0
                };
                candidates.push((base + noise, l, token));
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, l, token) in candidates.iter().take(take) {
                state.x_t.as_mut_slice()[l] = token;
                state.masked[l] = false;
            }
        }
        state.t = t_n;
        record(t_n, &state.x_t, state.masked_count());
    }
    let residual = state.masked_count();
    debug_assert_eq!(residual, 0);
    Ok((state.x_t, residual))
}
