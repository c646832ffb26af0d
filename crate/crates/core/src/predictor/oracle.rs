use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use super::{Cond, Logits, Predictor, TimeInput, MIN_SCORE};
use crate::datasets::EnumerableDataset;
use crate::error::{Error, Result};
use crate::tokens::{CorruptionState, Layout, TokenSeq};

/// Exact posterior over clean tokens given the revealed ones:
/// `p(x1^l = v | revealed) ∝ Σ_{x1 consistent} p(x1) 1[x1^l = v]`.
///
/// Returned as normalized log-probabilities; impossible tokens get
/// [`MIN_SCORE`]. The result depends only on the revealed pattern, never on
/// the time at which the state was produced.
pub fn oracle_posterior(
    dataset: &EnumerableDataset,
    state: &CorruptionState,
    cond: Cond,
) -> Result<Logits> {
    let scores = agreement_scores(dataset, state, cond)?;
    let revealed = state.masked.iter().filter(|m| !**m).count();
    posterior_over(dataset, &scores, revealed)
        .ok_or_else(|| Error::Inconsistent(format!("revealed tokens {:?}", &state.x_t[..])))
}

/// Like [`oracle_posterior`], but a state no support sequence explains is
/// answered with the posterior over the sequences agreeing with the most
/// revealed tokens. Parallel unmasking on a sparse support can reach such
/// states.
pub fn nearest_posterior(
    dataset: &EnumerableDataset,
    state: &CorruptionState,
    cond: Cond,
) -> Result<Logits> {
    let scores = agreement_scores(dataset, state, cond)?;
    let best = scores.iter().flatten().copied().max().unwrap_or(0);
    posterior_over(dataset, &scores, best).ok_or_else(|| {
        Error::Inconsistent(format!(
            "no support sequence for revealed tokens {:?}",
            &state.x_t[..]
        ))
    })
}

/// Per support sequence, the number of revealed tokens it agrees with;
/// `None` for sequences excluded by the class condition.
fn agreement_scores(
    dataset: &EnumerableDataset,
    state: &CorruptionState,
    cond: Cond,
) -> Result<Vec<Option<usize>>> {
    let layout = dataset.layout();
    if state.x_t.len() != layout.len() || state.masked.len() != layout.len() {
        return Err(Error::Shape(
            "state does not match the dataset layout".into(),
        ));
    }
    let class_filter = match cond {
        Cond::Null => None,
        Cond::Class(c) => {
            let classes = dataset.classes().ok_or_else(|| {
                Error::Input("class condition on a dataset without classes".into())
            })?;
            if c as usize >= dataset.num_classes() {
                return Err(Error::Input(format!("class {c} out of range")));
            }
            Some((classes, c))
        }
    };
    let revealed: Vec<usize> = (0..layout.len()).filter(|&l| !state.masked[l]).collect();
    Ok(dataset
        .support()
        .iter()
        .enumerate()
        .map(|(i, seq)| match class_filter {
            Some((classes, c)) if classes[i] != c => None,
            _ => Some(revealed.iter().filter(|&&l| seq[l] == state.x_t[l]).count()),
        })
        .collect())
}

/// Normalized log-posterior over support sequences whose agreement score
/// equals `needed`; `None` when they carry no mass.
fn posterior_over(
    dataset: &EnumerableDataset,
    scores: &[Option<usize>],
    needed: usize,
) -> Option<Logits> {
    let layout = dataset.layout();
    let mut mass: Vec<Vec<f64>> = (0..layout.len())
        .map(|l| vec![0.0; layout.vocab_at(l).data_size() as usize])
        .collect();
    let mut total = 0.0;
    for ((seq, &p), score) in dataset.support().iter().zip(dataset.probs()).zip(scores) {
        if *score == Some(needed) {
            total += p;
            for (l, row) in mass.iter_mut().enumerate() {
                row[seq[l] as usize] += p;
            }
        }
    }
    if total <= 0.0 {
        return None;
    }
    let rows = mass
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|m| if m > 0.0 { (m / total).ln() } else { MIN_SCORE })
                .collect()
        })
        .collect();
    Some(Logits::new(rows).expect("rows are nonempty"))
}

/// [`nearest_posterior`] behind the [`Predictor`] trait, memoized by
/// revealed pattern and condition.
pub struct OraclePredictor {
    dataset: Arc<EnumerableDataset>,
    cache: RwLock<HashMap<(TokenSeq, Cond), Arc<Logits>>>,
}

impl OraclePredictor {
    pub fn new(dataset: Arc<EnumerableDataset>) -> Self {
        Self {
            dataset,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &EnumerableDataset {
        &self.dataset
    }
}

impl Predictor for OraclePredictor {
    fn layout(&self) -> &Layout {
        self.dataset.layout()
    }

    fn time_input(&self) -> TimeInput {
        TimeInput::Ignored
    }

    fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    fn predict(&self, state: &CorruptionState, _t: Option<f64>, cond: Cond) -> Result<Logits> {
        let key = (state.x_t.clone(), cond);
        if let Some(hit) = self.cache.read().expect("oracle cache poisoned").get(&key) {
            return Ok((**hit).clone());
        }
        let logits = nearest_posterior(&self.dataset, state, cond)?;
        self.cache
            .write()
            .expect("oracle cache poisoned")
            .insert(key, Arc::new(logits.clone()));
        Ok(logits)
    }
}
