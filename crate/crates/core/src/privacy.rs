//! Differential-privacy mechanisms: user-level DP on the aggregate (clip each
//! update, average, add Gaussian noise) and sample-level local DP on features
//! and labels, plus exhaustive checkers of the LDP probability-ratio bound.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::rng::SimRng;
use crate::segment::DataSegment;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("input {0} lies outside [-1, 1]")]
    OutOfRange(f64),
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("user-DP aggregation called with no updates")]
    NoUpdates,
    #[error("invalid privacy spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    None,
    UserDp,
    SampleLdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMechanism {
    Duchi,
    Laplace,
}

/// How the feature budget `ε_X` maps onto the 300 coordinates of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// Each coordinate receives the full `ε_X`.
    PerCoordinate,
    /// `ε_X` is divided evenly across all coordinates.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySpec {
    pub mode: PrivacyMode,
    pub epsilon: f64,
    pub delta: f64,
    pub epsilon_x: f64,
    pub epsilon_y: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub mechanism: FeatureMechanism,
    pub budget_split: BudgetSplit,
    /// Clamp Duchi outputs back to `[-1, 1]` (biased).
    pub clamp: bool,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            mode: PrivacyMode::None,
            epsilon: 4.0,
            delta: 1e-5,
            epsilon_x: 4.0,
            epsilon_y: 4.0,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            mechanism: FeatureMechanism::Duchi,
            budget_split: BudgetSplit::PerCoordinate,
            clamp: false,
        }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PrivacyError::Spec(format!("{name} must be positive, got {v}")))
            }
        };
        match self.mode {
            PrivacyMode::None => Ok(()),
            PrivacyMode::UserDp => {
                pos("epsilon", self.epsilon)?;
                pos("clip_norm", self.clip_norm)?;
                pos("noise_multiplier", self.noise_multiplier)?;
                if !(0.0..1.0).contains(&self.delta) {
                    return Err(PrivacyError::Spec(format!(
                        "delta must lie in [0, 1), got {}",
                        self.delta
                    )));
                }
                Ok(())
            }
            PrivacyMode::SampleLdp => {
                pos("epsilon_x", self.epsilon_x)?;
                pos("epsilon_y", self.epsilon_y)
            }
        }
    }

    /// Budget spent on each of `coords` feature values.
    pub fn coordinate_epsilon(&self, coords: usize) -> f64 {
        match self.budget_split {
            BudgetSplit::PerCoordinate => self.epsilon_x,
            BudgetSplit::PerSample => self.epsilon_x / coords as f64,
        }
    }
}

/// Scales `delta` onto the L2 ball of radius `s` (norm taken over all
/// parameters jointly). The computed norm of the result is `≤ s` in floating
/// point, not just in exact arithmetic.
pub fn clip_update(delta: &ParamSet, s: f64) -> ParamSet {
    let norm = delta.l2_norm();
    let mut out = delta.clone();
    if norm > s {
        out.scale(s / norm);
        // rounding can leave the norm an ulp or two above s
        while out.l2_norm() > s {
            out.scale(1.0 - f64::EPSILON);
        }
    }
    out
}

/// `mean(clip(Δᵢ, S)) + N(0, σ²I)` with `σ = z·S/k`.
pub fn user_dp_mean(deltas: &[&ParamSet], spec: &PrivacySpec, rng: &mut SimRng) -> Result<ParamSet> {
    let first = deltas.first().ok_or(PrivacyError::NoUpdates)?;
    let k = deltas.len() as f64;
    let mut sum = ParamSet::zeros_like(first);
    for d in deltas {
        sum.add_scaled(&clip_update(d, spec.clip_norm), 1.0)?;
    }
    sum.scale(1.0 / k);
    let sigma = spec.noise_multiplier * spec.clip_norm / k;
    let normal = Normal::new(0.0, sigma).map_err(|e| PrivacyError::Spec(e.to_string()))?;
    for v in sum.values_mut() {
        *v += normal.sample(rng);
    }
    Ok(sum)
}

/// `θ + γ·[mean(clip(Δᵢ, S)) + N(0, σ²I)]`.
pub fn user_dp_aggregate(
    theta: &ParamSet,
    deltas: &[&ParamSet],
    gamma: f64,
    spec: &PrivacySpec,
    rng: &mut SimRng,
) -> Result<ParamSet> {
    let mut next = theta.clone();
    next.add_scaled(&user_dp_mean(deltas, spec, rng)?, gamma)?;
    Ok(next)
}

fn check_input(x: f64, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(PrivacyError::Epsilon(eps));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(PrivacyError::OutOfRange(x));
    }
    Ok(())
}

/// Output magnitude `C = (e^ε + 1)/(e^ε − 1)`.
pub fn duchi_c(eps: f64) -> f64 {
    (eps.exp() + 1.0) / eps.exp_m1()
}

/// `P(output = +C | x)`.
pub fn duchi_p_plus(x: f64, eps: f64) -> f64 {
    eps.exp_m1() * x / (2.0 * (eps.exp() + 1.0)) + 0.5
}

pub fn ldp_duchi(x: f64, eps: f64, rng: &mut SimRng) -> Result<f64> {
    check_input(x, eps)?;
    let c = duchi_c(eps);
    Ok(if rng.random::<f64>() < duchi_p_plus(x, eps) {
        c
    } else {
        -c
    })
}

/// Sensitivity of a value in `[-1, 1]`.
const LAPLACE_SENSITIVITY: f64 = 2.0;

pub fn laplace_scale(eps: f64) -> f64 {
    LAPLACE_SENSITIVITY / eps
}

pub fn ldp_laplace(x: f64, eps: f64, rng: &mut SimRng) -> Result<f64> {
    check_input(x, eps)?;
    let b = laplace_scale(eps);
    // inverse CDF on u ∈ (−½, ½)
    let u: f64 = rng.random::<f64>() - 0.5;
    let mag = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    Ok(x - b * u.signum() * mag.ln())
}

/// `P(report = y)` for k-ary randomized response.
pub fn krr_keep_probability(k: usize, eps: f64) -> f64 {
    let e = eps.exp();
    if e.is_infinite() {
        return 1.0;
    }
    e / (e + k as f64 - 1.0)
}

pub fn krr_label(y: usize, k: usize, eps: f64, rng: &mut SimRng) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(PrivacyError::Epsilon(eps));
    }
    if k < 2 || y >= k {
        return Err(PrivacyError::Label { label: y, classes: k });
    }
    if rng.random::<f64>() < krr_keep_probability(k, eps) {
        return Ok(y);
    }
    let other = rng.random_range(0..k - 1);
    Ok(if other >= y { other + 1 } else { other })
}

/// Perturbs every feature coordinate and the label. A no-op unless the
/// spec's mode is `SampleLdp`.
pub fn perturb_segment(seg: &DataSegment, spec: &PrivacySpec, classes: usize, rng: &mut SimRng) -> Result<DataSegment> {
    if spec.mode != PrivacyMode::SampleLdp {
        return Ok(seg.clone());
    }
    let mut out = seg.clone();
    let eps = spec.coordinate_epsilon(seg.values.len());
    for v in out.values.data_mut() {
        // normalized data is in [-1, 1] up to rounding
        let x = v.clamp(-1.0, 1.0);
        *v = match spec.mechanism {
            FeatureMechanism::Duchi => {
                let y = ldp_duchi(x, eps, rng)?;
                if spec.clamp {
                    y.clamp(-1.0, 1.0)
                } else {
                    y
                }
            }
            FeatureMechanism::Laplace => ldp_laplace(x, eps, rng)?,
        };
    }
    out.label = krr_label(seg.label, classes, spec.epsilon_y, rng)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdpMechanism {
    Duchi,
    Laplace,
    Krr { classes: usize },
}

/// Largest `P[M(x) = o] / P[M(x') = o]` over all input pairs on `grid` and
/// all outputs `o`. Duchi and k-RR outputs are enumerated; for Laplace the
/// density ratio `exp((|o − x'| − |o − x|)/b)` is maximized analytically
/// over `o` (it peaks at `exp(|x − x'|/b)` for any `o` outside `[x, x']`).
/// The k-RR check enumerates all class pairs and ignores `grid`.
pub fn verify_ldp(mechanism: LdpMechanism, eps: f64, grid: &[f64]) -> f64 {
    let mut worst: f64 = 1.0;
    match mechanism {
        LdpMechanism::Duchi => {
            for &x in grid {
                for &x2 in grid {
                    let (p, q) = (duchi_p_plus(x, eps), duchi_p_plus(x2, eps));
                    worst = worst.max(p / q).max((1.0 - p) / (1.0 - q));
                }
            }
        }
        LdpMechanism::Laplace => {
            let b = laplace_scale(eps);
            for &x in grid {
                for &x2 in grid {
                    worst = worst.max(((x - x2).abs() / b).exp());
                }
            }
        }
        LdpMechanism::Krr { classes } => {
            let keep = krr_keep_probability(classes, eps);
            let flip = (1.0 - keep) / (classes - 1) as f64;
            let p = |out: usize, y: usize| if out == y { keep } else { flip };
            for y in 0..classes {
                for y2 in 0..classes {
                    for o in 0..classes {
                        worst = worst.max(p(o, y) / p(o, y2));
                    }
                }
            }
        }
    }
    worst
}
