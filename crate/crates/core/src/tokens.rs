//! Token-level domain types shared by every module.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Alphabet of one modality: data ids `0..data_size`, then `[MASK]`, then
/// the null-condition token `[C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabSpec {
    data_size: u32,
}

impl VocabSpec {
    pub fn new(data_size: u32) -> Result<Self> {
        if data_size == 0 {
            return Err(Error::config("data_size", "must be positive"));
        }
        Ok(Self { data_size })
    }

    pub fn data_size(&self) -> u32 {
        self.data_size
    }

    pub fn mask_id(&self) -> u32 {
        self.data_size
    }

    pub fn null_cond_id(&self) -> u32 {
        self.data_size + 1
    }

    /// Total alphabet size including the two reserved ids.
    pub fn total_size(&self) -> u32 {
        self.data_size + 2
    }

    pub fn is_data(&self, id: u32) -> bool {
        id < self.data_size
    }
}

/// A named run of positions sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
    pub vocab: VocabSpec,
}

/// How a flat sequence splits into modalities. A single-modality sequence
/// has one segment; a joint pair `x ⊕ y` has two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Layout {
    segments: Vec<Segment>,
    #[serde(skip)]
    owner: Vec<usize>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() || segments.iter().any(|s| s.len == 0) {
            return Err(Error::config(
                "layout",
                "needs at least one nonempty segment",
            ));
        }
        let owner = segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.len))
            .collect();
        Ok(Self { segments, owner })
    }

    pub fn single(name: &str, len: usize, vocab: VocabSpec) -> Self {
        Self::new(vec![Segment {
            name: name.to_string(),
            len,
            vocab,
        }])
        .expect("single layout with len > 0")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn segment_of(&self, position: usize) -> usize {
        self.owner[position]
    }

    pub fn vocab_at(&self, position: usize) -> &VocabSpec {
        &self.segments[self.owner[position]].vocab
    }

    pub fn mask_id_at(&self, position: usize) -> u32 {
        self.vocab_at(position).mask_id()
    }

    /// Position range covered by segment `index`.
    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.segments[..index].iter().map(|s| s.len).sum();
        start..start + self.segments[index].len
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Sum of data alphabet sizes over positions (width of the flattened output).
    pub fn output_width(&self) -> usize {
        (0..self.len())
            .map(|l| self.vocab_at(l).data_size() as usize)
            .sum()
    }

    /// Errors unless `seq` has this length and only data tokens.
    pub fn check_clean(&self, seq: &TokenSeq) -> Result<()> {
        self.check_len(seq)?;
        for (l, &v) in seq.iter().enumerate() {
            if !self.vocab_at(l).is_data(v) {
                return Err(Error::Input(format!(
                    "position {l} holds token {v}, which is not a data token of `{}`",
                    self.segments[self.owner[l]].name
                )));
            }
        }
        Ok(())
    }

    /// Errors unless `seq` has this length and only data or mask tokens.
    pub fn check_partial(&self, seq: &TokenSeq) -> Result<()> {
        self.check_len(seq)?;
        for (l, &v) in seq.iter().enumerate() {
            let vocab = self.vocab_at(l);
            if !(vocab.is_data(v) || v == vocab.mask_id()) {
                return Err(Error::Input(format!(
                    "position {l} holds invalid token {v}"
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, seq: &TokenSeq) -> Result<()> {
        if seq.len() != self.len() {
            return Err(Error::Shape(format!(
                "sequence length {} does not match layout length {}",
                seq.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// All positions masked.
    pub fn all_masked(&self, t: f64) -> CorruptionState {
        let tokens = (0..self.len()).map(|l| self.mask_id_at(l)).collect();
        CorruptionState {
            x_t: TokenSeq::new(tokens),
            t,
            masked: vec![true; self.len()],
        }
    }
}

impl TryFrom<Vec<Segment>> for Layout {
    type Error = Error;

    fn try_from(value: Vec<Segment>) -> Result<Self> {
        Layout::new(value)
    }
}

impl From<Layout> for Vec<Segment> {
    fn from(value: Layout) -> Self {
        value.segments
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.0
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        TokenSeq(v)
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(value: Vec<u32>) -> Self {
        Self(value)
    }
}

/// A corrupted sequence `x_t` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionState {
    pub x_t: TokenSeq,
    pub t: f64,
    /// `masked[l]` iff `x_t[l]` is that position's mask id.
    pub masked: Vec<bool>,
}

impl CorruptionState {
    /// Builds a state from tokens, deriving the mask indicator from the layout.
    pub fn from_tokens(layout: &Layout, x_t: TokenSeq, t: f64) -> Result<Self> {
        layout.check_partial(&x_t)?;
        let masked = x_t
            .iter()
            .enumerate()
            .map(|(l, &v)| v == layout.mask_id_at(l))
            .collect();
        Ok(Self { x_t, t, masked })
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.masked.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.masked.len() as f64
        }
    }

    /// Concatenation `x ⊕ y`; the time is taken from `self`.
    pub fn concat(&self, other: &CorruptionState) -> CorruptionState {
        let mut masked = self.masked.clone();
        masked.extend_from_slice(&other.masked);
        CorruptionState {
            x_t: self.x_t.concat(&other.x_t),
            t: self.t,
            masked,
        }
    }
}

/// A clean two-modality pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointSeq {
    pub x: TokenSeq,
    pub y: TokenSeq,
}

impl JointSeq {
    pub fn concat(&self) -> TokenSeq {
        self.x.concat(&self.y)
    }

    /// Splits a flat sequence according to a two-segment layout.
    pub fn split(layout: &Layout, z: &TokenSeq) -> Result<JointSeq> {
        if layout.segments().len() != 2 || z.len() != layout.len() {
            return Err(Error::Shape(
                "joint split needs a two-segment layout of matching length".into(),
            ));
        }
        let a = layout.range(0);
        let b = layout.range(1);
        Ok(JointSeq {
            x: TokenSeq::new(z[a].to_vec()),
            y: TokenSeq::new(z[b].to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserved_ids() {
        let v = VocabSpec::new(4).unwrap();
        assert_eq!(v.mask_id(), 4);
        assert_eq!(v.null_cond_id(), 5);
        assert_eq!(v.total_size(), 6);
        assert!(VocabSpec::new(0).is_err());
    }

    #[test]
    fn joint_layout_positions() {
        let layout = Layout::new(vec![
            Segment {
                name: "image".into(),
                len: 3,
                vocab: VocabSpec::new(3).unwrap(),
            },
            Segment {
                name: "label".into(),
                len: 2,
                vocab: VocabSpec::new(2).unwrap(),
            },
        ])
        .unwrap();
        assert_eq!(layout.len(), 5);
        assert_eq!(layout.mask_id_at(2), 3);
        assert_eq!(layout.mask_id_at(3), 2);
        assert_eq!(layout.range(1), 3..5);
        assert_eq!(layout.output_width(), 3 * 3 + 2 * 2);
        let z = TokenSeq::new(vec![0, 1, 2, 1, 0]);
        layout.check_clean(&z).unwrap();
        assert!(layout
            .check_clean(&TokenSeq::new(vec![0, 1, 2, 2, 0]))
            .is_err());
        let pair = JointSeq::split(&layout, &z).unwrap();
        assert_eq!(pair.concat(), z);
    }

    #[test]
    fn layout_serializes_as_segment_list() {
        let layout = Layout::single("x", 4, VocabSpec::new(3).unwrap());
        let text = serde_json::to_string(&layout).unwrap();
        let back: Layout = serde_json::from_str(&text).unwrap();
        assert_eq!(back, layout);
        assert_eq!(back.len(), 4);
    }
}
