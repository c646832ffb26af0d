use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cond, Logits, Predictor, TimeInput};
use crate::error::{Error, Result};
use crate::loss::masked_ce_and_grad;
use crate::tokens::{CorruptionState, Layout, TokenSeq};

/// Bins of the learned time-embedding table over `[0, 1]`.
pub const TIME_BINS: usize = 64;

const EMBED_INIT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Explicit timestep: `t` enters through a time embedding.
    Etm,
    /// Implicit timestep: no time-dependent parameters at all.
    Itm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Itm,
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Slot {
    fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Offsets {
    tok: Vec<usize>,
    pos: usize,
    time: Option<usize>,
    cond: Option<usize>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wo: usize,
    bo: usize,
}

/// Gradient with the same flat layout as [`TrainableParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Embeddings summed per position, flattened, two tanh dense layers, then a
/// projection to every position's data scores.
///
/// Token rows cover the whole alphabet of each segment (`K_d + 2`),
/// position rows the whole sequence. ETM adds a [`TIME_BINS`]-row time
/// table; class-conditional models add `num_classes + 1` condition rows,
/// the last being `[C]`. All of these are summed into every position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    config: NetConfig,
    layout: Layout,
    num_classes: usize,
    values: Vec<f64>,
    slots: Vec<Slot>,
    offsets: Offsets,
    out_cols: Vec<usize>,
}

struct Cache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    time_row: Option<usize>,
    cond_row: Option<usize>,
}

impl TrainableParams {
    /// Zero-valued parameters with the right shapes.
    pub fn zeros(config: NetConfig, layout: Layout, num_classes: usize) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::config(
                "embed_dim",
                "network widths must be positive",
            ));
        }
        let d = config.embed_dim;
        let h = config.hidden_dim;
        let len = layout.len();
        let out = layout.output_width();
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let slot = Slot {
                name,
                shape,
                offset,
            };
            offset += slot.size();
            let at = slot.offset;
            slots.push(slot);
            at
        };
        let tok = layout
            .segments()
            .iter()
            .map(|s| {
                push(
                    format!("tok_emb.{}", s.name),
                    vec![s.vocab.total_size() as usize, d],
                )
            })
            .collect();
        let pos = push("pos_emb".into(), vec![len, d]);
        let time =
            (config.variant == Variant::Etm).then(|| push("time_emb".into(), vec![TIME_BINS, d]));
        let cond = (num_classes > 0).then(|| push("cond_emb".into(), vec![num_classes + 1, d]));
        let w1 = push("dense1.weight".into(), vec![len * d, h]);
        let b1 = push("dense1.bias".into(), vec![h]);
        let w2 = push("dense2.weight".into(), vec![h, h]);
        let b2 = push("dense2.bias".into(), vec![h]);
        let wo = push("out.weight".into(), vec![h, out]);
        let bo = push("out.bias".into(), vec![out]);
        let total = offset;
        let mut out_cols = Vec::with_capacity(len + 1);
        let mut col = 0;
        for l in 0..len {
            out_cols.push(col);
            col += layout.vocab_at(l).data_size() as usize;
        }
        out_cols.push(col);
        Ok(Self {
            config,
            layout,
            num_classes,
            values: vec![0.0; total],
            slots,
            offsets: Offsets {
                tok,
                pos,
                time,
                cond,
                w1,
                b1,
                w2,
                b2,
                wo,
                bo,
            },
            out_cols,
        })
    }

    /// Small uniform embeddings, variance-scaled dense layers, zero biases
    /// and a zero output projection.
    pub fn init<R: Rng + ?Sized>(
        config: NetConfig,
        layout: Layout,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(config, layout, num_classes)?;
        for slot in params.slots.clone() {
            let range = slot.offset..slot.offset + slot.size();
            let bound = if slot.name.ends_with("_emb") || slot.name.starts_with("tok_emb") {
                EMBED_INIT
            } else if slot.name.starts_with("dense") && slot.name.ends_with("weight") {
                (3.0 / slot.shape[0] as f64).sqrt()
            } else {
                0.0
            };
            if bound > 0.0 {
                for v in &mut params.values[range] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(name, shape, values)` for every tensor, in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.slots.iter().map(|s| {
            (
                s.name.as_str(),
                s.shape.as_slice(),
                &self.values[s.offset..s.offset + s.size()],
            )
        })
    }

    /// Overwrites the tensor called `name`; the shape must match.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Shape(format!("unknown tensor `{name}`")))?;
        if slot.shape != shape || data.len() != slot.size() {
            return Err(Error::Shape(format!(
                "tensor `{name}` expects shape {:?}, got {shape:?}",
                slot.shape
            )));
        }
        let at = slot.offset;
        self.values[at..at + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn time_row(&self, t: Option<f64>) -> Result<Option<usize>> {
        match (self.config.variant, t) {
            (Variant::Etm, Some(t)) if (0.0..=1.0).contains(&t) => {
                Ok(Some(((t * TIME_BINS as f64) as usize).min(TIME_BINS - 1)))
            }
            (Variant::Etm, Some(t)) => Err(Error::Input(format!("time {t} is outside [0, 1]"))),
            (Variant::Etm, None) => Err(Error::Contract(
                "explicit-timestep model called without t".into(),
            )),
            (Variant::Itm, Some(_)) => Err(Error::Contract(
                "implicit-timestep model does not take t".into(),
            )),
            (Variant::Itm, None) => Ok(None),
        }
    }

    fn cond_row(&self, cond: Cond) -> Result<Option<usize>> {
        match (self.num_classes, cond) {
            (0, Cond::Null) => Ok(None),
            (0, Cond::Class(_)) => Err(Error::Input("unconditional model given a class".into())),
            (n, Cond::Null) => Ok(Some(n)),
            (n, Cond::Class(c)) if (c as usize) < n => Ok(Some(c as usize)),
            (_, Cond::Class(c)) => Err(Error::Input(format!("class {c} out of range"))),
        }
    }

    fn forward_cached(
        &self,
        state: &CorruptionState,
        t: Option<f64>,
        cond: Cond,
    ) -> Result<(Vec<f64>, Cache)> {
        self.layout.check_partial(&state.x_t)?;
        let time_row = self.time_row(t)?;
        let cond_row = self.cond_row(cond)?;
        let d = self.config.embed_dim;
        let h = self.config.hidden_dim;
        let len = self.layout.len();
        let o = &self.offsets;
        let v = &self.values;

        let mut shared = vec![0.0; d];
        if let (Some(row), Some(at)) = (time_row, o.time) {
            add_row(&mut shared, &v[at + row * d..at + (row + 1) * d]);
        }
        if let (Some(row), Some(at)) = (cond_row, o.cond) {
            add_row(&mut shared, &v[at + row * d..at + (row + 1) * d]);
        }
        let mut input = vec![0.0; len * d];
        for l in 0..len {
            let chunk = &mut input[l * d..(l + 1) * d];
            let tok = o.tok[self.layout.segment_of(l)] + state.x_t[l] as usize * d;
            let pos = o.pos + l * d;
            for i in 0..d {
                chunk[i] = v[tok + i] + v[pos + i] + shared[i];
            }
        }
        let h1 = dense_tanh(&input, &v[o.w1..o.w1 + len * d * h], &v[o.b1..o.b1 + h]);
        let h2 = dense_tanh(&h1, &v[o.w2..o.w2 + h * h], &v[o.b2..o.b2 + h]);
        let width = self.out_cols[len];
        let mut out = v[o.bo..o.bo + width].to_vec();
        let wo = &v[o.wo..o.wo + h * width];
        for (k, &a) in h2.iter().enumerate() {
            let row = &wo[k * width..(k + 1) * width];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += a * w;
            }
        }
        Ok((
            out,
            Cache {
                input,
                h1,
                h2,
                time_row,
                cond_row,
            },
        ))
    }

    fn split_rows(&self, out: &[f64]) -> Vec<Vec<f64>> {
        self.out_cols
            .windows(2)
            .map(|w| out[w[0]..w[1]].to_vec())
            .collect()
    }

    pub fn forward(&self, state: &CorruptionState, t: Option<f64>, cond: Cond) -> Result<Logits> {
        let (out, _) = self.forward_cached(state, t, cond)?;
        Logits::new(self.split_rows(&out))
    }

    fn loss_only(
        &self,
        state: &CorruptionState,
        t: Option<f64>,
        cond: Cond,
        target: &TokenSeq,
        weight: f64,
        masking_ce: bool,
    ) -> Result<f64> {
        let logits = self.forward(state, t, cond)?;
        Ok(crate::loss::masked_ce(
            &logits,
            target,
            &state.masked,
            weight,
            masking_ce,
        ))
    }

    /// Loss and exact gradient of the masked weighted cross-entropy
    /// (see [`crate::loss::masked_ce`]) with respect to every parameter.
    pub fn backward(
        &self,
        state: &CorruptionState,
        t: Option<f64>,
        cond: Cond,
        target: &TokenSeq,
        weight: f64,
        masking_ce: bool,
    ) -> Result<(f64, Gradient)> {
        self.layout.check_clean(target)?;
        let mut grad = Gradient::zeros(self.values.len());
        let include: Vec<bool> = if masking_ce {
            state.masked.clone()
        } else {
            vec![true; state.masked.len()]
        };
        let (out, cache) = self.forward_cached(state, t, cond)?;
        if !include.iter().any(|&b| b) {
            return Ok((0.0, grad));
        }
        let rows = self.split_rows(&out);
        let (loss, drows) = masked_ce_and_grad(&rows, target, &include, weight);
        let d_out: Vec<f64> = drows.into_iter().flatten().collect();

        let d = self.config.embed_dim;
        let h = self.config.hidden_dim;
        let len = self.layout.len();
        let width = self.out_cols[len];
        let o = &self.offsets;
        let v = &self.values;
        let g = &mut grad.0;

        // output projection
        let mut d_h2 = vec![0.0; h];
        for k in 0..h {
            let w_row = &v[o.wo + k * width..o.wo + (k + 1) * width];
            let g_row = &mut g[o.wo + k * width..o.wo + (k + 1) * width];
            let a = cache.h2[k];
            let mut acc = 0.0;
            for j in 0..width {
                g_row[j] += a * d_out[j];
                acc += w_row[j] * d_out[j];
            }
            d_h2[k] = acc;
        }
        for j in 0..width {
            g[o.bo + j] += d_out[j];
        }
        let d_a2: Vec<f64> = d_h2
            .iter()
            .zip(&cache.h2)
            .map(|(dh, y)| dh * (1.0 - y * y))
            .collect();
        let d_h1 = dense_backward(&cache.h1, &d_a2, v, g, o.w2, o.b2);
        let d_a1: Vec<f64> = d_h1
            .iter()
            .zip(&cache.h1)
            .map(|(dh, y)| dh * (1.0 - y * y))
            .collect();
        let d_input = dense_backward(&cache.input, &d_a1, v, g, o.w1, o.b1);

        let mut d_shared = vec![0.0; d];
        for l in 0..len {
            let chunk = &d_input[l * d..(l + 1) * d];
            let tok = o.tok[self.layout.segment_of(l)] + state.x_t[l] as usize * d;
            let pos = o.pos + l * d;
            for i in 0..d {
                g[tok + i] += chunk[i];
                g[pos + i] += chunk[i];
                d_shared[i] += chunk[i];
            }
        }
        if let (Some(row), Some(at)) = (cache.time_row, o.time) {
            add_row(&mut g[at + row * d..at + (row + 1) * d], &d_shared);
        }
        if let (Some(row), Some(at)) = (cache.cond_row, o.cond) {
            add_row(&mut g[at + row * d..at + (row + 1) * d], &d_shared);
        }
        Ok((loss, grad))
    }
}

/// Largest relative disagreement between [`TrainableParams::backward`] and
/// central differences of step `h`, over every parameter. Entries where both
/// are below `floor` in magnitude are compared against `floor` instead.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &TrainableParams,
    state: &CorruptionState,
    t: Option<f64>,
    cond: Cond,
    target: &TokenSeq,
    weight: f64,
    masking_ce: bool,
    h: f64,
    floor: f64,
) -> Result<f64> {
    let (_, grad) = params.backward(state, t, cond, target, weight, masking_ce)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.values.len() {
        let orig = params.values[i];
        probe.values[i] = orig + h;
        let up = probe.loss_only(state, t, cond, target, weight, masking_ce)?;
        probe.values[i] = orig - h;
        let down = probe.loss_only(state, t, cond, target, weight, masking_ce)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.0[i];
        let scale = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}

fn add_row(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `tanh(x W + b)` with `W` stored input-major.
fn dense_tanh(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let width = b.len();
    let mut acc = b.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let row = &w[k * width..(k + 1) * width];
        for (a, wk) in acc.iter_mut().zip(row) {
            *a += xk * wk;
        }
    }
    acc.iter_mut().for_each(|a| *a = a.tanh());
    acc
}

/// Accumulates weight/bias gradients of a dense layer and returns the
/// gradient with respect to its input.
fn dense_backward(
    x: &[f64],
    d_pre: &[f64],
    v: &[f64],
    g: &mut [f64],
    w_at: usize,
    b_at: usize,
) -> Vec<f64> {
    let width = d_pre.len();
    let mut d_x = vec![0.0; x.len()];
    for (k, &xk) in x.iter().enumerate() {
        let base = w_at + k * width;
        let w_row = &v[base..base + width];
        let g_row = &mut g[base..base + width];
        let mut acc = 0.0;
        for j in 0..width {
            g_row[j] += xk * d_pre[j];
            acc += w_row[j] * d_pre[j];
        }
        d_x[k] = acc;
    }
    for j in 0..width {
        g[b_at + j] += d_pre[j];
    }
    d_x
}

impl Predictor for TrainableParams {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn time_input(&self) -> TimeInput {
        match self.config.variant {
            Variant::Etm => TimeInput::Explicit,
            Variant::Itm => TimeInput::Implicit,
        }
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, state: &CorruptionState, t: Option<f64>, cond: Cond) -> Result<Logits> {
        self.forward(state, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tokens::{Segment, VocabSpec};

    fn small(variant: Variant, classes: usize) -> TrainableParams {
        let layout = Layout::single("x", 4, VocabSpec::new(3).unwrap());
        let config = NetConfig {
            variant,
            embed_dim: 8,
            hidden_dim: 6,
        };
        TrainableParams::init(config, layout, classes, &mut seeded(1)).unwrap()
    }

    fn state(p: &TrainableParams, tokens: Vec<u32>) -> CorruptionState {
        CorruptionState::from_tokens(&p.layout, TokenSeq::new(tokens), 0.5).unwrap()
    }

    #[test]
    fn fresh_init_outputs_zero_logits() {
        let p = small(Variant::Itm, 0);
        let logits = p
            .forward(&state(&p, vec![0, 3, 2, 3]), None, Cond::Null)
            .unwrap();
        assert!(logits.rows().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(logits.len(), 4);
        assert!(logits.rows().iter().all(|r| r.len() == 3));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut p = small(Variant::Etm, 2);
        let mut rng = seeded(4);
        for v in p.values_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let s = state(&p, vec![1, 3, 3, 0]);
        let a = p.forward(&s, Some(0.3), Cond::Class(1)).unwrap();
        let b = p.forward(&s, Some(0.3), Cond::Class(1)).unwrap();
        assert_eq!(a, b);
        let c = p.forward(&s, Some(0.9), Cond::Class(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn time_contract() {
        let etm = small(Variant::Etm, 0);
        let itm = small(Variant::Itm, 0);
        let s = state(&etm, vec![3, 3, 3, 3]);
        assert!(matches!(
            etm.forward(&s, None, Cond::Null),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            itm.forward(&s, Some(0.5), Cond::Null),
            Err(Error::Contract(_))
        ));
        assert!(itm.forward(&s, None, Cond::Null).is_ok());
        assert!(!itm.tensors().any(|(name, _, _)| name.contains("time")));
    }

    #[test]
    fn joint_layout_shapes() {
        let layout = Layout::new(vec![
            Segment {
                name: "image".into(),
                len: 4,
                vocab: VocabSpec::new(3).unwrap(),
            },
            Segment {
                name: "label".into(),
                len: 4,
                vocab: VocabSpec::new(2).unwrap(),
            },
        ])
        .unwrap();
        let config = NetConfig {
            variant: Variant::Itm,
            embed_dim: 4,
            hidden_dim: 5,
        };
        let p = TrainableParams::init(config, layout.clone(), 0, &mut seeded(0)).unwrap();
        let s = layout.all_masked(0.0);
        let logits = p.forward(&s, None, Cond::Null).unwrap();
        assert_eq!(
            logits.rows().iter().map(|r| r.len()).collect::<Vec<_>>(),
            vec![3, 3, 3, 3, 2, 2, 2, 2]
        );
    }

    #[test]
    fn no_masked_positions_give_zero_gradient() {
        let p = small(Variant::Itm, 0);
        let target = TokenSeq::new(vec![0, 1, 2, 0]);
        let s = state(&p, target.to_vec());
        let (loss, grad) = p
            .backward(&s, None, Cond::Null, &target, 1.0, true)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_weight() {
        let mut p = small(Variant::Etm, 0);
        let mut rng = seeded(9);
        for v in p.values_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let target = TokenSeq::new(vec![0, 1, 2, 0]);
        let s = state(&p, vec![3, 1, 3, 0]);
        let (l1, g1) = p
            .backward(&s, Some(0.2), Cond::Null, &target, 1.5, true)
            .unwrap();
        let (l2, g2) = p
            .backward(&s, Some(0.2), Cond::Null, &target, 3.0, true)
            .unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn set_tensor_checks_shape() {
        let mut p = small(Variant::Itm, 0);
        let (name, shape, data) = p
            .tensors()
            .next()
            .map(|(n, s, d)| (n.to_string(), s.to_vec(), d.to_vec()))
            .unwrap();
        p.set_tensor(&name, &shape, &data).unwrap();
        assert!(p.set_tensor(&name, &[1], &[0.0]).is_err());
        assert!(p.set_tensor("nope", &shape, &data).is_err());
    }
}
