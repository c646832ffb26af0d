//! Synthetic datasets with an explicit, enumerable support.
//!
//! Every dataset is a finite table of clean sequences with positive
//! probabilities, so marginals, conditionals and posteriors can be computed
//! by direct summation. Paired datasets store `x ⊕ y` flattened under a
//! two-segment [`Layout`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{Layout, Segment, TokenSeq, VocabSpec};

pub const DEFAULT_SUPPORT_CAP: usize = 4096;
const NORMALIZATION_TOL: f64 = 1e-9;
const FORMAT_TAG: &str = "dinterp-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub tokens: Vec<u32>,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub length: usize,
    pub data_size: u32,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub support_cap: usize,
    pub allow_truncation: bool,
}

impl MarkovSpec {
    /// Uniform initial distribution and uniform transitions.
    pub fn uniform(length: usize, data_size: u32) -> Self {
        let k = data_size as usize;
        Self {
            length,
            data_size,
            initial: vec![1.0 / k as f64; k],
            transition: vec![vec![1.0 / k as f64; k]; k],
            support_cap: DEFAULT_SUPPORT_CAP,
            allow_truncation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of rectangle side lengths.
    pub rect_min: usize,
    pub rect_max: usize,
    /// Foreground colors; the image alphabet is `colors + 1` with 0 as background.
    pub colors: u32,
    /// Label classes including background class 0.
    pub classes: u32,
    pub support_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Table {
        length: usize,
        data_size: u32,
        entries: Vec<TableEntry>,
        num_classes: usize,
    },
    Markov(MarkovSpec),
    ShapesPair(ShapesSpec),
}

/// Explicit support with probabilities; the ground truth for the oracle
/// predictor and every distribution metric.
#[derive(Debug, Clone)]
pub struct EnumerableDataset {
    kind: String,
    layout: Layout,
    grid: Option<(usize, usize)>,
    support: Vec<TokenSeq>,
    probs: Vec<f64>,
    classes: Option<Vec<u32>>,
    num_classes: usize,
    approximate: bool,
    index: HashMap<TokenSeq, usize>,
}

pub struct DatasetParts {
    pub kind: String,
    pub layout: Layout,
    pub grid: Option<(usize, usize)>,
    pub support: Vec<TokenSeq>,
    pub probs: Vec<f64>,
    pub classes: Option<Vec<u32>>,
    pub num_classes: usize,
    pub approximate: bool,
}

impl EnumerableDataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            kind,
            layout,
            grid,
            support,
            probs,
            classes,
            num_classes,
            approximate,
        } = parts;
        if support.is_empty() {
            return Err(Error::Validation("dataset support is empty".into()));
        }
        if support.len() != probs.len() {
            return Err(Error::Validation(
                "support and probability lists differ in length".into(),
            ));
        }
        for (i, seq) in support.iter().enumerate() {
            layout
                .check_clean(seq)
                .map_err(|e| Error::Validation(format!("support item {i}: {e}")))?;
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Validation(format!(
                "probability {p} is not positive"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Validation(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        if let Some(classes) = &classes {
            if classes.len() != support.len() {
                return Err(Error::Validation(
                    "class list length does not match support".into(),
                ));
            }
            if let Some(c) = classes.iter().find(|&&c| c as usize >= num_classes) {
                return Err(Error::Validation(format!(
                    "class {c} is not below num_classes={num_classes}"
                )));
            }
        } else if num_classes != 0 {
            return Err(Error::Validation(
                "num_classes set but no classes given".into(),
            ));
        }
        let mut index = HashMap::with_capacity(support.len());
        for (i, seq) in support.iter().enumerate() {
            if index.insert(seq.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate support sequence {:?}",
                    seq.as_ref() as &[u32]
                )));
            }
        }
        Ok(Self {
            kind,
            layout,
            grid,
            support,
            probs,
            classes,
            num_classes,
            approximate,
            index,
        })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn support(&self) -> &[TokenSeq] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> Option<&[u32]> {
        self.classes.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// True when the support was truncated and renormalized.
    pub fn approximate(&self) -> bool {
        self.approximate
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    pub fn prob_of(&self, seq: &TokenSeq) -> f64 {
        self.index.get(seq).map_or(0.0, |&i| self.probs[i])
    }

    pub fn position_of(&self, seq: &TokenSeq) -> Option<usize> {
        self.index.get(seq).copied()
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("validated positive probabilities")
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler().sample(rng)
    }

    /// Marginal distribution over data tokens at `position`.
    pub fn marginal(&self, position: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.vocab_at(position).data_size() as usize];
        for (seq, p) in self.support.iter().zip(&self.probs) {
            out[seq[position] as usize] += p;
        }
        out
    }

    /// `p(class | seq)`; zero for sequences outside the support.
    pub fn class_posterior(&self, seq: &TokenSeq, class: u32) -> f64 {
        // a table can list one sequence once, so the posterior is 0 or 1
        match (&self.classes, self.index.get(seq)) {
            (Some(classes), Some(&i)) => f64::from(u8::from(classes[i] == class)),
            _ => 0.0,
        }
    }

    /// Exact conditional of segment `target` given segment `observed` equal
    /// to `tokens`, keyed by the target segment's tokens.
    pub fn conditional(
        &self,
        observed: usize,
        tokens: &[u32],
        target: usize,
    ) -> HashMap<TokenSeq, f64> {
        let obs = self.layout.range(observed);
        let tgt = self.layout.range(target);
        let mut out: HashMap<TokenSeq, f64> = HashMap::new();
        let mut total = 0.0;
        for (seq, p) in self.support.iter().zip(&self.probs) {
            if seq[obs.clone()] == *tokens {
                *out.entry(TokenSeq::new(seq[tgt.clone()].to_vec()))
                    .or_insert(0.0) += p;
                total += p;
            }
        }
        out.values_mut().for_each(|v| *v /= total);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Line-delimited JSON: a header line then one record per support item.
    pub fn to_text(&self) -> String {
        let header = Header {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            segments: self.layout.segments().to_vec(),
            grid: self.grid.map(|(h, w)| [h, w]),
            num_classes: self.num_classes,
            approximate: self.approximate,
            count: self.support.len(),
        };
        let mut out = Vec::new();
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .unwrap();
        let split = self.layout.segments()[0].len;
        let paired = self.layout.segments().len() == 2;
        for (i, (seq, p)) in self.support.iter().zip(&self.probs).enumerate() {
            let record = Record {
                tokens: seq[..if paired { split } else { seq.len() }].to_vec(),
                paired: paired.then(|| seq[split..].to_vec()),
                class: self.classes.as_ref().map(|c| c[i]),
                prob: format_prob(*p),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            )
            .unwrap();
        }
        String::from_utf8(out).expect("utf8")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::from_reader(BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported format {} v{}", header.format, header.version),
            });
        }
        let layout = Layout::new(header.segments).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let paired = layout.segments().len() == 2;
        if layout.segments().len() > 2 {
            return Err(Error::Parse {
                line: 1,
                msg: "at most two segments are supported".into(),
            });
        }
        let mut support = Vec::with_capacity(header.count);
        let mut probs = Vec::with_capacity(header.count);
        let mut classes = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let mut tokens = record.tokens;
            match (paired, record.paired) {
                (true, Some(y)) => tokens.extend(y),
                (false, None) => {}
                (true, None) => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "missing `paired` tokens".into(),
                    })
                }
                (false, Some(_)) => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "unexpected `paired` tokens".into(),
                    })
                }
            }
            let prob: f64 = record.prob.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{}` is not a probability", record.prob),
            })?;
            let seq = TokenSeq::new(tokens);
            layout.check_clean(&seq).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            if let Some(c) = record.class {
                classes.push(c);
            }
            support.push(seq);
            probs.push(prob);
        }
        if support.len() != header.count {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "header declares {} records, found {}",
                    header.count,
                    support.len()
                ),
            });
        }
        let classes = match classes.len() {
            0 => None,
            n if n == support.len() => Some(classes),
            _ => {
                return Err(Error::Validation(
                    "some records carry a class and some do not".into(),
                ))
            }
        };
        EnumerableDataset::new(DatasetParts {
            kind: header.kind,
            layout,
            grid: header.grid.map(|[h, w]| (h, w)),
            support,
            probs,
            classes,
            num_classes: header.num_classes,
            approximate: header.approximate,
        })
    }
}

/// 17 significant digits; parses back to the identical f64.
pub fn format_prob(p: f64) -> String {
    format!("{p:.16e}")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<[usize; 2]>,
    num_classes: usize,
    approximate: bool,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paired: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<u32>,
    prob: String,
}

pub fn build<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<EnumerableDataset> {
    match spec {
        DatasetSpec::Table {
            length,
            data_size,
            entries,
            num_classes,
        } => build_table(*length, *data_size, entries, *num_classes),
        DatasetSpec::Markov(m) => build_markov(m, rng),
        DatasetSpec::ShapesPair(s) => build_shapes_pair(s),
    }
}

fn build_table(
    length: usize,
    data_size: u32,
    entries: &[TableEntry],
    num_classes: usize,
) -> Result<EnumerableDataset> {
    if length == 0 {
        return Err(Error::config("length", "must be positive"));
    }
    let layout = Layout::single("x", length, VocabSpec::new(data_size)?);
    let any_class = entries.iter().any(|e| e.class.is_some());
    let classes = if any_class {
        let classes: Option<Vec<u32>> = entries.iter().map(|e| e.class).collect();
        Some(classes.ok_or_else(|| Error::config("table_classes", "every entry needs a class"))?)
    } else {
        None
    };
    EnumerableDataset::new(DatasetParts {
        kind: "table".into(),
        layout,
        grid: None,
        support: entries
            .iter()
            .map(|e| TokenSeq::new(e.tokens.clone()))
            .collect(),
        probs: entries.iter().map(|e| e.prob).collect(),
        classes,
        num_classes,
        approximate: false,
    })
}

fn check_distribution(field: &str, row: &[f64], k: usize) -> Result<()> {
    if row.len() != k {
        return Err(Error::config(
            field,
            format!("expected {k} entries, got {}", row.len()),
        ));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::config(field, "entries must be nonnegative"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::config(
            field,
            format!("entries sum to {total}, not 1"),
        ));
    }
    Ok(())
}

fn build_markov<R: Rng + ?Sized>(spec: &MarkovSpec, rng: &mut R) -> Result<EnumerableDataset> {
    let k = spec.data_size as usize;
    if spec.length == 0 {
        return Err(Error::config("length", "must be positive"));
    }
    let vocab = VocabSpec::new(spec.data_size)?;
    check_distribution("markov_initial", &spec.initial, k)?;
    if spec.transition.len() != k {
        return Err(Error::config(
            "markov_transition",
            format!("expected {k} rows"),
        ));
    }
    for row in &spec.transition {
        check_distribution("markov_transition", row, k)?;
    }
    let layout = Layout::single("x", spec.length, vocab);
    let seq_prob = |seq: &[u32]| -> f64 {
        let mut p = spec.initial[seq[0] as usize];
        for w in seq.windows(2) {
            p *= spec.transition[w[0] as usize][w[1] as usize];
        }
        p
    };

    let (support, approximate) = match enumerate_markov(spec) {
        Some(support) => (support, false),
        None if spec.allow_truncation => (sample_markov_support(spec, rng), true),
        None => {
            return Err(Error::CapExceeded {
                cap: spec.support_cap,
            })
        }
    };
    let mut probs: Vec<f64> = support.iter().map(|s| seq_prob(s)).collect();
    if approximate {
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    EnumerableDataset::new(DatasetParts {
        kind: "markov".into(),
        layout,
        grid: None,
        support,
        probs,
        classes: None,
        num_classes: 0,
        approximate,
    })
}

/// Depth-first enumeration of positive-probability sequences in
/// lexicographic order; `None` once the cap is exceeded.
fn enumerate_markov(spec: &MarkovSpec) -> Option<Vec<TokenSeq>> {
    let k = spec.data_size;
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(spec.length);
    fn visit(spec: &MarkovSpec, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<TokenSeq>) -> bool {
        if prefix.len() == spec.length {
            out.push(TokenSeq::new(prefix.clone()));
            return out.len() <= spec.support_cap;
        }
        for v in 0..k {
            let p = match prefix.last() {
                None => spec.initial[v as usize],
                Some(&prev) => spec.transition[prev as usize][v as usize],
            };
            if p > 0.0 {
                prefix.push(v);
                let ok = visit(spec, k, prefix, out);
                prefix.pop();
                if !ok {
                    return false;
                }
            }
        }
        true
    }
    visit(spec, k, &mut prefix, &mut out).then_some(out)
}

fn sample_markov_support<R: Rng + ?Sized>(spec: &MarkovSpec, rng: &mut R) -> Vec<TokenSeq> {
    let initial = WeightedIndex::new(&spec.initial).expect("validated");
    let rows: Vec<WeightedIndex<f64>> = spec
        .transition
        .iter()
        .map(|r| WeightedIndex::new(r).expect("validated"))
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let attempts = spec.support_cap.saturating_mul(100);
    for _ in 0..attempts {
        if seen.len() >= spec.support_cap {
            break;
        }
        let mut seq = Vec::with_capacity(spec.length);
        seq.push(initial.sample(rng) as u32);
        while seq.len() < spec.length {
            let prev = *seq.last().unwrap() as usize;
            seq.push(rows[prev].sample(rng) as u32);
        }
        seen.insert(TokenSeq::new(seq));
    }
    seen.into_iter().collect()
}

/// Foreground label class of a `rh x rw` rectangle: with three classes,
/// wide-or-square rectangles are class 1 and tall ones class 2.
pub fn rectangle_class(classes: u32, rh: usize, rw: usize) -> u32 {
    if classes >= 3 && rh > rw {
        2
    } else {
        1
    }
}

/// Image grids holding one axis-aligned rectangle on background 0, paired
/// with the label grid it determines. Uniform over configurations.
pub fn build_shapes_pair(spec: &ShapesSpec) -> Result<EnumerableDataset> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 || h > 8 || w > 8 {
        return Err(Error::config("grid", "grid must be between 1x1 and 8x8"));
    }
    if spec.colors == 0 || spec.colors > 4 {
        return Err(Error::config("colors", "must be in 1..=4"));
    }
    if !(2..=3).contains(&spec.classes) {
        return Err(Error::config(
            "classes",
            "must be 2 or 3 (background plus foreground classes)",
        ));
    }
    if spec.rect_min == 0 || spec.rect_min > spec.rect_max || spec.rect_min > h.min(w) {
        return Err(Error::config(
            "rect_min",
            "rectangle size range is empty for this grid",
        ));
    }
    let image_vocab = VocabSpec::new(spec.colors + 1)?;
    let label_vocab = VocabSpec::new(spec.classes)?;
    let layout = Layout::new(vec![
        Segment {
            name: "image".into(),
            len: h * w,
            vocab: image_vocab,
        },
        Segment {
            name: "label".into(),
            len: h * w,
            vocab: label_vocab,
        },
    ])?;
    let mut support = Vec::new();
    for rh in spec.rect_min..=spec.rect_max.min(h) {
        for rw in spec.rect_min..=spec.rect_max.min(w) {
            let class = rectangle_class(spec.classes, rh, rw);
            for top in 0..=h - rh {
                for left in 0..=w - rw {
                    for color in 1..=spec.colors {
                        let mut image = vec![0u32; h * w];
                        let mut label = vec![0u32; h * w];
                        for r in top..top + rh {
                            for c in left..left + rw {
                                image[r * w + c] = color;
                                label[r * w + c] = class;
                            }
                        }
                        image.extend(label);
                        support.push(TokenSeq::new(image));
                        if support.len() > spec.support_cap {
                            return Err(Error::CapExceeded {
                                cap: spec.support_cap,
                            });
                        }
                    }
                }
            }
        }
    }
    let p = 1.0 / support.len() as f64;
    let probs = vec![p; support.len()];
    EnumerableDataset::new(DatasetParts {
        kind: "shapes_pair".into(),
        layout,
        grid: Some((h, w)),
        support,
        probs,
        classes: None,
        num_classes: 0,
        approximate: false,
    })
}

/// Exact distribution as a map, handy for TV and KL.
pub fn distribution(dataset: &EnumerableDataset) -> HashMap<TokenSeq, f64> {
    dataset
        .support()
        .iter()
        .cloned()
        .zip(dataset.probs().iter().copied())
        .collect()
}
