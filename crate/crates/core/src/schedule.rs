//! Masking schedules `kappa(t)`: the probability that a token is revealed at
//! time `t`, with `kappa(0) = 0` (all masked) and `kappa(1) = 1` (clean).

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{Layout, TokenSeq};

/// Clamp used for training time sampling and the sampler's time grid.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// `unmask_rate` refuses to divide by `1 - kappa` below this.
pub const DEFAULT_RATE_FLOOR: f64 = 1e-12;

const MONOTONICITY_GRID: usize = 10_001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Root,
    Linear,
    Cosine,
    Arccos,
    Quadratic,
    /// Hermite cubic with end slopes `a` (at 0) and `b` (at 1).
    Cubic {
        a: f64,
        b: f64,
    },
}

/// A validated masking schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Schedule {
    kind: ScheduleKind,
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        if let ScheduleKind::Cubic { a, b } = kind {
            validate_cubic(a, b)?;
        }
        Ok(Self { kind })
    }

    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
        }
    }

    pub fn cubic(a: f64, b: f64) -> Result<Self> {
        Self::new(ScheduleKind::Cubic { a, b })
    }

    /// Every non-parametric kind plus the default cubic (smoothstep).
    pub fn all_default() -> Vec<Schedule> {
        [
            ScheduleKind::Root,
            ScheduleKind::Linear,
            ScheduleKind::Cosine,
            ScheduleKind::Arccos,
            ScheduleKind::Quadratic,
            ScheduleKind::Cubic { a: 0.0, b: 0.0 },
        ]
        .into_iter()
        .map(|kind| Schedule { kind })
        .collect()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn kappa(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        let k = match self.kind {
            ScheduleKind::Root => t.sqrt(),
            ScheduleKind::Linear => t,
            ScheduleKind::Cosine => 1.0 - (FRAC_PI_2 * t).cos(),
            ScheduleKind::Arccos => 1.0 - 2.0 * t.acos() / PI,
            ScheduleKind::Quadratic => t * t,
            ScheduleKind::Cubic { a, b } => cubic_kappa(a, b, t),
        };
        // cos(pi/2) is 6e-17, not 0
        if t == 1.0 {
            return Ok(1.0);
        }
        Ok(k.clamp(0.0, 1.0))
    }

    pub fn kappa_dot(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        let d = match self.kind {
            ScheduleKind::Root => {
                if t == 0.0 {
                    return Err(Error::Domain(
                        "root schedule derivative has a pole at t=0".into(),
                    ));
                }
                0.5 / t.sqrt()
            }
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Cosine => FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            ScheduleKind::Arccos => {
                if t == 1.0 {
                    return Err(Error::Domain(
                        "arccos schedule derivative has a pole at t=1".into(),
                    ));
                }
                2.0 / (PI * (1.0 - t * t).sqrt())
            }
            ScheduleKind::Quadratic => 2.0 * t,
            ScheduleKind::Cubic { a, b } => cubic_kappa_dot(a, b, t),
        };
        Ok(d.max(0.0))
    }

    /// Hazard `kappa_dot / (1 - kappa)` with the default floor.
    pub fn unmask_rate(&self, t: f64) -> Result<f64> {
        self.unmask_rate_with_floor(t, DEFAULT_RATE_FLOOR)
    }

    pub fn unmask_rate_with_floor(&self, t: f64, floor: f64) -> Result<f64> {
        let gap = 1.0 - self.kappa(t)?;
        if gap < floor {
            return Err(Error::Singularity { t, gap, floor });
        }
        Ok(self.kappa_dot(t)? / gap)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::linear()
    }
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("time {t} is outside [0, 1]")));
    }
    Ok(())
}

fn cubic_kappa(a: f64, b: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    -2.0 * t3 + 3.0 * t2 + b * (t3 - t2) + a * (t3 - 2.0 * t2 + t)
}

fn cubic_kappa_dot(a: f64, b: f64, t: f64) -> f64 {
    (-6.0 + 3.0 * a + 3.0 * b) * t * t + (6.0 - 4.0 * a - 2.0 * b) * t + a
}

fn validate_cubic(a: f64, b: f64) -> Result<()> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::config("schedule", "cubic parameters must be finite"));
    }
    let mut points: Vec<f64> = (0..MONOTONICITY_GRID)
        .map(|i| i as f64 / (MONOTONICITY_GRID - 1) as f64)
        .collect();
    // vertex of the quadratic derivative, where a dip between grid points would sit
    let lead = -6.0 + 3.0 * a + 3.0 * b;
    if lead != 0.0 {
        let vertex = -(6.0 - 4.0 * a - 2.0 * b) / (2.0 * lead);
        if (0.0..=1.0).contains(&vertex) {
            points.push(vertex);
        }
    }
    if let Some(t) = points.into_iter().find(|&t| cubic_kappa_dot(a, b, t) < 0.0) {
        return Err(Error::config(
            "schedule",
            format!("cubic:a={a},b={b} is not monotone (derivative negative at t={t:.4})"),
        ));
    }
    Ok(())
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Root => f.write_str("root"),
            ScheduleKind::Linear => f.write_str("linear"),
            ScheduleKind::Cosine => f.write_str("cosine"),
            ScheduleKind::Arccos => f.write_str("arccos"),
            ScheduleKind::Quadratic => f.write_str("quadratic"),
            ScheduleKind::Cubic { a, b } => write!(f, "cubic:a={a},b={b}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let kind = match s {
            "root" => ScheduleKind::Root,
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            "arccos" => ScheduleKind::Arccos,
            "quadratic" => ScheduleKind::Quadratic,
            "cubic" => ScheduleKind::Cubic { a: 0.0, b: 0.0 },
            _ => {
                let params = s
                    .strip_prefix("cubic:")
                    .ok_or_else(|| Error::config("schedule", format!("unknown schedule `{s}`")))?;
                let (mut a, mut b) = (0.0, 0.0);
                for part in params.split(',').filter(|p| !p.trim().is_empty()) {
                    let (key, value) = part.split_once('=').ok_or_else(|| {
                        Error::config("schedule", format!("expected key=value, got `{part}`"))
                    })?;
                    let value: f64 = value.trim().parse().map_err(|_| {
                        Error::config("schedule", format!("`{value}` is not a number"))
                    })?;
                    match key.trim() {
                        "a" => a = value,
                        "b" => b = value,
                        other => {
                            return Err(Error::config(
                                "schedule",
                                format!("unknown cubic parameter `{other}`"),
                            ))
                        }
                    }
                }
                ScheduleKind::Cubic { a, b }
            }
        };
        Schedule::new(kind)
    }
}

impl TryFrom<String> for Schedule {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<Schedule> for String {
    fn from(value: Schedule) -> Self {
        value.to_string()
    }
}

/// Conditional coupling: a fraction of positions whose source token is
/// copied from the data rather than `[MASK]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    ratio: f64,
}

impl CouplingSpec {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config(
                "coupling_ratio",
                format!("{ratio} is outside [0, 1]"),
            ));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Number of coupled positions out of `len`.
    pub fn count(&self, len: usize) -> usize {
        (self.ratio * len as f64).round() as usize
    }
}

/// Source/target endpoints for coupled interpolation. `x0` copies `x1` on a
/// uniformly random subset of `round(ratio * L)` positions and is `[MASK]`
/// elsewhere; the target is `x1` itself.
pub fn coupling_endpoints<R: Rng + ?Sized>(
    layout: &Layout,
    x1: &TokenSeq,
    spec: &CouplingSpec,
    rng: &mut R,
) -> Result<(TokenSeq, TokenSeq)> {
    layout.check_clean(x1)?;
    let len = x1.len();
    let mut source: Vec<u32> = (0..len).map(|l| layout.mask_id_at(l)).collect();
    for l in rand::seq::index::sample(rng, len, spec.count(len)) {
        source[l] = x1[l];
    }
    Ok((TokenSeq::new(source), x1.clone()))
}

/// Strength `s` of the uniform-token component mixed into the interpolant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    s: f64,
}

impl SmoothingSpec {
    pub fn new(s: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::config(
                "smoothing_s",
                format!("{s} must be a nonnegative real"),
            ));
        }
        Ok(Self { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// Per-token mixture weights of the smoothed interpolant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingWeights {
    pub mask: f64,
    pub uniform: f64,
    pub data: f64,
}

/// Three-way mixture mask / uniform data token / clean token. The uniform
/// weight `s * kappa * (1 - kappa)` is clipped to `2 * min(kappa, 1 - kappa)`
/// and taken half from each of the other two components.
pub fn smoothing_weights(
    spec: &SmoothingSpec,
    schedule: &Schedule,
    t: f64,
) -> Result<SmoothingWeights> {
    let k = schedule.kappa(t)?;
    let uniform = (spec.s * k * (1.0 - k))
        .min(1.0 - (2.0 * k - 1.0).abs())
        .max(0.0);
    Ok(SmoothingWeights {
        mask: ((1.0 - k) - uniform / 2.0).max(0.0),
        uniform,
        data: (k - uniform / 2.0).max(0.0),
    })
}
