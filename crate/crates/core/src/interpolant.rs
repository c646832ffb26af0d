//! Forward corruption. Each position is independently kept with
//! probability `kappa(t)` and replaced by its modality's `[MASK]` otherwise.

use rand::Rng;

use crate::error::Result;
use crate::schedule::{
    coupling_endpoints, smoothing_weights, CouplingSpec, Schedule, SmoothingSpec,
};
use crate::tokens::{CorruptionState, JointSeq, Layout, TokenSeq};

/// Samples `x_t ~ (1 - kappa_t) δ_mask + kappa_t δ_x1`, token-wise.
pub fn corrupt<R: Rng + ?Sized>(
    layout: &Layout,
    x1: &TokenSeq,
    t: f64,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<CorruptionState> {
    layout.check_clean(x1)?;
    let keep = schedule.kappa(t)?;
    let mut tokens = x1.to_vec();
    let mut masked = vec![false; tokens.len()];
    for (l, token) in tokens.iter_mut().enumerate() {
        if rng.random::<f64>() >= keep {
            *token = layout.mask_id_at(l);
            masked[l] = true;
        }
    }
    Ok(CorruptionState {
        x_t: TokenSeq::new(tokens),
        t,
        masked,
    })
}

/// Smoothed interpolant: each position is masked, replaced by a uniformly
/// random data token, or kept, with the weights of [`smoothing_weights`].
pub fn corrupt_smoothed<R: Rng + ?Sized>(
    layout: &Layout,
    x1: &TokenSeq,
    t: f64,
    schedule: &Schedule,
    spec: &SmoothingSpec,
    rng: &mut R,
) -> Result<CorruptionState> {
    layout.check_clean(x1)?;
    let w = smoothing_weights(spec, schedule, t)?;
    let mut tokens = x1.to_vec();
    let mut masked = vec![false; tokens.len()];
    for (l, token) in tokens.iter_mut().enumerate() {
        let u = rng.random::<f64>();
        if u >= w.data + w.uniform {
            *token = layout.mask_id_at(l);
            masked[l] = true;
        } else if u >= w.data {
            *token = rng.random_range(0..layout.vocab_at(l).data_size());
        }
    }
    Ok(CorruptionState {
        x_t: TokenSeq::new(tokens),
        t,
        masked,
    })
}

/// Corrupts both modalities at the same `t` with independent mask draws.
/// `layout` must have exactly two segments, `x` then `y`.
pub fn corrupt_joint<R: Rng + ?Sized>(
    layout: &Layout,
    pair: &JointSeq,
    t: f64,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<(CorruptionState, CorruptionState)> {
    let joint = corrupt(layout, &pair.concat(), t, schedule, rng)?;
    let split = layout.range(1).start;
    let x = CorruptionState {
        x_t: TokenSeq::new(joint.x_t[..split].to_vec()),
        t,
        masked: joint.masked[..split].to_vec(),
    };
    let y = CorruptionState {
        x_t: TokenSeq::new(joint.x_t[split..].to_vec()),
        t,
        masked: joint.masked[split..].to_vec(),
    };
    Ok((x, y))
}

/// Interpolates between coupled endpoints: positions copied into the source
/// stay at their clean token for every `t`, the rest follow [`corrupt`].
pub fn corrupt_coupled<R: Rng + ?Sized>(
    layout: &Layout,
    x1: &TokenSeq,
    t: f64,
    schedule: &Schedule,
    coupling: &CouplingSpec,
    rng: &mut R,
) -> Result<CorruptionState> {
    let (source, target) = coupling_endpoints(layout, x1, coupling, rng)?;
    let keep = schedule.kappa(t)?;
    let mut tokens = target.to_vec();
    let mut masked = vec![false; tokens.len()];
    for l in 0..tokens.len() {
        let coupled = source[l] != layout.mask_id_at(l);
        if !coupled && rng.random::<f64>() >= keep {
            tokens[l] = source[l];
            masked[l] = true;
        }
    }
    Ok(CorruptionState {
        x_t: TokenSeq::new(tokens),
        t,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tokens::{Segment, VocabSpec};

    fn layout(len: usize, k: u32) -> Layout {
        Layout::single("x", len, VocabSpec::new(k).unwrap())
    }

    fn seq(len: usize, k: u32) -> TokenSeq {
        TokenSeq::new((0..len as u32).map(|i| i % k).collect())
    }

    #[test]
    fn endpoints_are_exact() {
        let lay = layout(50, 4);
        let x1 = seq(50, 4);
        let mut rng = seeded(3);
        let clean = corrupt(&lay, &x1, 1.0, &Schedule::linear(), &mut rng).unwrap();
        assert_eq!(clean.x_t, x1);
        assert_eq!(clean.masked_count(), 0);
        let gone = corrupt(&lay, &x1, 0.0, &Schedule::linear(), &mut rng).unwrap();
        assert!(gone.x_t.iter().all(|&v| v == 4));
        assert_eq!(gone.masked_count(), 50);
    }

    #[test]
    fn masked_count_within_binomial_band() {
        let lay = layout(1000, 4);
        let x1 = seq(1000, 4);
        let mut rng = seeded(11);
        let band = 4.0 * (1000.0f64 * 0.25 * 0.75).sqrt();
        for _ in 0..200 {
            let s = corrupt(&lay, &x1, 0.25, &Schedule::linear(), &mut rng).unwrap();
            assert!((s.masked_count() as f64 - 750.0).abs() <= band);
        }
    }

    #[test]
    fn unmasked_positions_equal_clean_tokens() {
        let lay = layout(30, 5);
        let x1 = seq(30, 5);
        let mut rng = seeded(5);
        for i in 0..100 {
            let s = corrupt(&lay, &x1, i as f64 / 99.0, &Schedule::cosine(), &mut rng).unwrap();
            for l in 0..30 {
                assert_eq!(s.masked[l], s.x_t[l] == 5);
                if !s.masked[l] {
                    assert_eq!(s.x_t[l], x1[l]);
                }
            }
        }
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let lay = layout(40, 3);
        let x1 = seq(40, 3);
        let a = corrupt(&lay, &x1, 0.4, &Schedule::linear(), &mut seeded(8)).unwrap();
        let b = corrupt(&lay, &x1, 0.4, &Schedule::linear(), &mut seeded(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_dirty_input() {
        let lay = layout(3, 2);
        let dirty = TokenSeq::new(vec![0, 2, 1]);
        assert!(corrupt(&lay, &dirty, 0.5, &Schedule::linear(), &mut seeded(0)).is_err());
    }

    #[test]
    fn smoothed_with_zero_strength_matches_plain() {
        let lay = layout(64, 4);
        let x1 = seq(64, 4);
        let spec = SmoothingSpec::new(0.0).unwrap();
        // same uniform draws, same thresholds
        let a = corrupt(&lay, &x1, 0.6, &Schedule::linear(), &mut seeded(21)).unwrap();
        let b =
            corrupt_smoothed(&lay, &x1, 0.6, &Schedule::linear(), &spec, &mut seeded(21)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smoothed_endpoints() {
        let lay = layout(64, 4);
        let x1 = seq(64, 4);
        let spec = SmoothingSpec::new(3.0).unwrap();
        let mut rng = seeded(2);
        let s0 = corrupt_smoothed(&lay, &x1, 0.0, &Schedule::linear(), &spec, &mut rng).unwrap();
        let s1 = corrupt_smoothed(&lay, &x1, 1.0, &Schedule::linear(), &spec, &mut rng).unwrap();
        assert_eq!(s0.masked_count(), 64);
        assert_eq!(s1.x_t, x1);
    }

    #[test]
    fn smoothed_swap_fraction() {
        let lay = layout(10_000, 4);
        let x1 = seq(10_000, 4);
        let spec = SmoothingSpec::new(0.4).unwrap();
        let s =
            corrupt_smoothed(&lay, &x1, 0.5, &Schedule::linear(), &spec, &mut seeded(77)).unwrap();
        let swapped = (0..10_000)
            .filter(|&l| !s.masked[l] && s.x_t[l] != x1[l])
            .count();
        let frac = swapped as f64 / 10_000.0;
        // uniform weight 0.1, of which 3/4 lands on a different token
        assert!((frac - 0.075).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn joint_endpoints_and_shared_law() {
        let joint = Layout::new(vec![
            Segment {
                name: "x".into(),
                len: 1000,
                vocab: VocabSpec::new(3).unwrap(),
            },
            Segment {
                name: "y".into(),
                len: 1000,
                vocab: VocabSpec::new(2).unwrap(),
            },
        ])
        .unwrap();
        let pair = JointSeq {
            x: seq(1000, 3),
            y: seq(1000, 2),
        };
        let mut rng = seeded(4);
        let (x, y) = corrupt_joint(&joint, &pair, 1.0, &Schedule::linear(), &mut rng).unwrap();
        assert_eq!(
            (x.x_t.clone(), y.x_t.clone()),
            (pair.x.clone(), pair.y.clone())
        );
        let (x, y) = corrupt_joint(&joint, &pair, 0.0, &Schedule::linear(), &mut rng).unwrap();
        assert_eq!((x.masked_count(), y.masked_count()), (1000, 1000));
        assert!(x.x_t.iter().all(|&v| v == 3) && y.x_t.iter().all(|&v| v == 2));

        let band = 4.0 * (1000.0f64 * 0.25).sqrt();
        let (x, y) = corrupt_joint(&joint, &pair, 0.5, &Schedule::linear(), &mut rng).unwrap();
        assert!((x.masked_count() as f64 - 500.0).abs() <= band);
        assert!((y.masked_count() as f64 - 500.0).abs() <= band);
    }

    #[test]
    fn joint_equals_concatenated_corruption() {
        let joint = Layout::new(vec![
            Segment {
                name: "x".into(),
                len: 7,
                vocab: VocabSpec::new(3).unwrap(),
            },
            Segment {
                name: "y".into(),
                len: 5,
                vocab: VocabSpec::new(2).unwrap(),
            },
        ])
        .unwrap();
        let pair = JointSeq {
            x: seq(7, 3),
            y: seq(5, 2),
        };
        let (x, y) =
            corrupt_joint(&joint, &pair, 0.3, &Schedule::cosine(), &mut seeded(9)).unwrap();
        let whole = corrupt(
            &joint,
            &pair.concat(),
            0.3,
            &Schedule::cosine(),
            &mut seeded(9),
        )
        .unwrap();
        assert_eq!(x.concat(&y), whole);
    }

    #[test]
    fn coupled_positions_never_mask() {
        let lay = layout(1000, 4);
        let x1 = seq(1000, 4);
        let mut rng = seeded(12);
        let full = CouplingSpec::new(1.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let s = corrupt_coupled(&lay, &x1, t, &Schedule::linear(), &full, &mut rng).unwrap();
            assert_eq!(s.x_t, x1);
        }
        let half = CouplingSpec::new(0.5).unwrap();
        let s = corrupt_coupled(&lay, &x1, 0.0, &Schedule::linear(), &half, &mut rng).unwrap();
        // at t=0 exactly the 500 uncoupled positions are masked
        assert_eq!(s.masked_count(), 500);
        let s = corrupt_coupled(&lay, &x1, 0.5, &Schedule::linear(), &half, &mut rng).unwrap();
        let band = 4.0 * (500.0f64 * 0.25).sqrt();
        assert!((s.masked_count() as f64 - 250.0).abs() <= band);
    }

    #[test]
    fn zero_coupling_matches_plain_frequency() {
        let lay = layout(2000, 4);
        let x1 = seq(2000, 4);
        let none = CouplingSpec::new(0.0).unwrap();
        let s =
            corrupt_coupled(&lay, &x1, 0.3, &Schedule::linear(), &none, &mut seeded(6)).unwrap();
        let band = 4.0 * (2000.0f64 * 0.21).sqrt();
        assert!((s.masked_count() as f64 - 1400.0).abs() <= band);
    }
}
