//! Server update rules. Every rule starts from the unweighted mean client
//! delta; FedAvg steps along it directly, the adaptive rules feed it through
//! server-side first/second moment estimates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::is_trainable;
use crate::params::ParamSet;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("aggregation called with no updates")]
    NoUpdates,
    #[error("{count} weights given for {updates} updates")]
    WeightCount { count: usize, updates: usize },
    #[error("invalid aggregator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AggregatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    FedAvg,
    FedAdagrad,
    FedAdam,
    FedYogi,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedAdagrad => "fedadagrad",
            Self::FedAdam => "fedadam",
            Self::FedYogi => "fedyogi",
        }
    }
}

/// Weight applied to an update carried over from an earlier round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Staleness {
    Identity,
    /// `decay^age`, where age is the number of rounds since upload.
    Exponential {
        decay: f64,
    },
}

impl Staleness {
    pub fn weight(self, age: u64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Exponential { decay } => decay.powi(age.min(i32::MAX as u64) as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// γ for FedAvg, η_s for the adaptive kinds.
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub staleness: Staleness,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::FedAvg,
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.1,
            staleness: Staleness::Identity,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AggregatorError::Config(m));
        if !self.server_lr.is_finite() || self.server_lr < 0.0 {
            return bad(format!(
                "server_lr must be finite and non-negative, got {}",
                self.server_lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if let Staleness::Exponential { decay } = self.staleness {
            if !(0.0..=1.0).contains(&decay) {
                return bad(format!("staleness decay must lie in [0, 1], got {decay}"));
            }
        }
        Ok(())
    }
}

/// Aggregator configuration plus the server moments (adaptive kinds only;
/// created lazily on the first step).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub config: AggregatorConfig,
    pub m: Option<ParamSet>,
    pub v: Option<ParamSet>,
}

impl AggregatorState {
    pub fn new(config: AggregatorConfig) -> Self {
        Self {
            config,
            m: None,
            v: None,
        }
    }

    /// Applies an already-averaged delta. Returns the next model and state;
    /// `self` is left untouched.
    ///
    /// Non-trainable entries (BN running statistics) always take the plain
    /// mean step, since a moment-normalized step could push a variance
    /// estimate negative.
    pub fn apply(&self, theta: &ParamSet, delta: &ParamSet) -> Result<(ParamSet, AggregatorState)> {
        theta.check_compatible(delta)?;
        let cfg = &self.config;
        let mut next = theta.clone();
        if cfg.kind == AggregatorKind::FedAvg {
            next.add_scaled(delta, cfg.server_lr)?;
            return Ok((next, self.clone()));
        }
        let mut m = self.m.clone().unwrap_or_else(|| ParamSet::zeros_like(theta));
        let mut v = self.v.clone().unwrap_or_else(|| ParamSet::zeros_like(theta));
        for i in 0..theta.len() {
            let name = &theta.entries()[i].0;
            let d = delta.tensor(i).data();
            if !is_trainable(name) {
                for (p, x) in next.tensor_mut(i).data_mut().iter_mut().zip(d) {
                    *p += x;
                }
                continue;
            }
            let mi = m.tensor_mut(i).data_mut();
            for (mj, &x) in mi.iter_mut().zip(d) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * x;
            }
            let vi = v.tensor_mut(i).data_mut();
            for (vj, &x) in vi.iter_mut().zip(d) {
                let sq = x * x;
                *vj = match cfg.kind {
                    AggregatorKind::FedAdagrad => *vj + sq,
                    AggregatorKind::FedAdam => cfg.beta2 * *vj + (1.0 - cfg.beta2) * sq,
                    AggregatorKind::FedYogi => *vj - (1.0 - cfg.beta2) * sq * sign(*vj - sq),
                    AggregatorKind::FedAvg => unreachable!("handled above"),
                };
            }
            let (mi, vi) = (m.tensor(i).data(), v.tensor(i).data());
            for ((p, &mj), &vj) in next.tensor_mut(i).data_mut().iter_mut().zip(mi).zip(vi) {
                *p += cfg.server_lr * mj / (vj.max(0.0).sqrt() + cfg.tau);
            }
        }
        Ok((
            next,
            AggregatorState {
                config: *cfg,
                m: Some(m),
                v: Some(v),
            },
        ))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ wᵢ·Δᵢ / k`. Unit weights give the plain mean.
pub fn mean_delta(deltas: &[&ParamSet], weights: Option<&[f64]>) -> Result<ParamSet> {
    let first = deltas.first().ok_or(AggregatorError::NoUpdates)?;
    if let Some(w) = weights {
        if w.len() != deltas.len() {
            return Err(AggregatorError::WeightCount {
                count: w.len(),
                updates: deltas.len(),
            });
        }
    }
    let mut sum = ParamSet::zeros_like(first);
    for (i, d) in deltas.iter().enumerate() {
        sum.add_scaled(d, weights.map_or(1.0, |w| w[i]))?;
    }
    sum.scale(1.0 / deltas.len() as f64);
    Ok(sum)
}

/// `θ + γ·mean(Δ)`.
pub fn fed_avg(theta: &ParamSet, deltas: &[&ParamSet], gamma: f64) -> Result<ParamSet> {
    let mut next = theta.clone();
    next.add_scaled(&mean_delta(deltas, None)?, gamma)?;
    Ok(next)
}

pub fn fed_adaptive(
    state: &AggregatorState,
    theta: &ParamSet,
    deltas: &[&ParamSet],
) -> Result<(ParamSet, AggregatorState)> {
    state.apply(theta, &mean_delta(deltas, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn ps(v: &[f64]) -> ParamSet {
        ParamSet::new(vec![("w".into(), Tensor::vector(v.to_vec()).unwrap())])
    }

    fn adaptive(kind: AggregatorKind, beta1: f64, beta2: f64, tau: f64) -> AggregatorState {
        AggregatorState::new(AggregatorConfig {
            kind,
            server_lr: 1.0,
            beta1,
            beta2,
            tau,
            staleness: Staleness::Identity,
        })
    }

    #[test]
    fn fed_avg_examples() {
        let theta = ps(&[1.0, 1.0]);
        let (a, b) = (ps(&[2.0, 0.0]), ps(&[0.0, 2.0]));
        assert_eq!(fed_avg(&theta, &[&a, &b], 1.0).unwrap(), ps(&[2.0, 2.0]));
        assert_eq!(fed_avg(&theta, &[&a, &b], 0.0).unwrap(), theta);
        assert_eq!(fed_avg(&theta, &[&a], 1.0).unwrap(), ps(&[3.0, 1.0]));
        assert!(matches!(fed_avg(&theta, &[], 1.0), Err(AggregatorError::NoUpdates)));
    }

    #[test]
    fn three_known_deltas() {
        let theta = ps(&[0.0, 0.0]);
        let ds = [ps(&[3.0, 0.0]), ps(&[0.0, 3.0]), ps(&[3.0, 3.0])];
        let refs: Vec<&ParamSet> = ds.iter().collect();
        assert_eq!(fed_avg(&theta, &refs, 1.0).unwrap(), ps(&[2.0, 2.0]));
    }

    #[test]
    fn adagrad_hand_example() {
        let s = adaptive(AggregatorKind::FedAdagrad, 0.0, 0.99, 1.0);
        let (next, st) = fed_adaptive(&s, &ps(&[0.0]), &[&ps(&[1.0])]).unwrap();
        assert_eq!(next, ps(&[0.5]));
        assert_eq!(st.v.unwrap(), ps(&[1.0]));
    }

    #[test]
    fn zero_delta_leaves_theta() {
        for kind in [
            AggregatorKind::FedAdagrad,
            AggregatorKind::FedAdam,
            AggregatorKind::FedYogi,
        ] {
            let s = adaptive(kind, 0.9, 0.99, 0.1);
            let (next, _) = fed_adaptive(&s, &ps(&[1.0, -2.0]), &[&ps(&[0.0, 0.0])]).unwrap();
            assert_eq!(next, ps(&[1.0, -2.0]));
        }
    }

    #[test]
    fn adam_and_yogi_agree_from_zero_state() {
        let d = ps(&[0.3, -1.2, 2.0]);
        let theta = ps(&[0.0, 0.0, 0.0]);
        let (a, sa) = fed_adaptive(&adaptive(AggregatorKind::FedAdam, 0.9, 0.99, 0.1), &theta, &[&d]).unwrap();
        let (y, sy) = fed_adaptive(&adaptive(AggregatorKind::FedYogi, 0.9, 0.99, 0.1), &theta, &[&d]).unwrap();
        assert_eq!(a, y);
        let want: Vec<f64> = d.values().map(|x| 0.01 * x * x).collect();
        for (got, w) in sa.v.unwrap().values().zip(&want) {
            assert!((got - w).abs() < 1e-15);
        }
        assert_eq!(sy.v.unwrap().values().count(), 3);
    }

    #[test]
    fn staleness_weights() {
        assert_eq!(Staleness::Identity.weight(5), 1.0);
        assert_eq!(Staleness::Exponential { decay: 0.5 }.weight(2), 0.25);
        let m = mean_delta(&[&ps(&[2.0]), &ps(&[4.0])], Some(&[1.0, 0.5])).unwrap();
        assert_eq!(m, ps(&[2.0]));
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), 1..6)
    }

    proptest! {
        #[test]
        fn fed_avg_is_permutation_invariant(ds in vecs(4), gamma in 0.0f64..2.0) {
            let theta = ps(&[0.5, -0.5, 1.0, 0.0]);
            let sets: Vec<ParamSet> = ds.iter().map(|d| ps(d)).collect();
            let fwd: Vec<&ParamSet> = sets.iter().collect();
            let rev: Vec<&ParamSet> = sets.iter().rev().collect();
            let a = fed_avg(&theta, &fwd, gamma).unwrap();
            let b = fed_avg(&theta, &rev, gamma).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn repeated_update_equals_single(d in prop::collection::vec(-10.0f64..10.0, 3), k in 1usize..8) {
            let theta = ps(&[1.0, 2.0, 3.0]);
            let u = ps(&d);
            let many: Vec<&ParamSet> = std::iter::repeat_n(&u, k).collect();
            let a = fed_avg(&theta, &many, 1.0).unwrap();
            let b = fed_avg(&theta, &[&u], 1.0).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn fed_avg_is_linear_in_each_delta(d1 in prop::collection::vec(-5.0f64..5.0, 2), d2 in prop::collection::vec(-5.0f64..5.0, 2), c in -3.0f64..3.0) {
            let theta = ps(&[0.0, 0.0]);
            let other = ps(&[1.0, -1.0]);
            let sum: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + c * b).collect();
            let lhs = fed_avg(&theta, &[&ps(&sum), &other], 1.0).unwrap();
            let a = fed_avg(&theta, &[&ps(&d1), &other], 1.0).unwrap();
            let b = fed_avg(&theta, &[&ps(&d2), &ParamSet::zeros_like(&other)], 1.0).unwrap();
            let mut rhs = a;
            rhs.add_scaled(&b, c).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn adagrad_v_never_decreases(steps in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..10)) {
            let mut s = adaptive(AggregatorKind::FedAdagrad, 0.9, 0.99, 0.1);
            let mut theta = ps(&[0.0; 3]);
            let mut prev = ps(&[0.0; 3]);
            for d in steps {
                let (t, ns) = fed_adaptive(&s, &theta, &[&ps(&d)]).unwrap();
                let v = ns.v.clone().unwrap();
                prop_assert!(v.values().zip(prev.values()).all(|(a, b)| a >= b));
                prev = v;
                theta = t;
                s = ns;
            }
        }

        #[test]
        fn adaptive_is_pure(d in prop::collection::vec(-3.0f64..3.0, 3)) {
            for kind in [AggregatorKind::FedAdagrad, AggregatorKind::FedAdam, AggregatorKind::FedYogi] {
                let s = adaptive(kind, 0.9, 0.99, 0.1);
                let theta = ps(&[0.1, 0.2, 0.3]);
                let a = fed_adaptive(&s, &theta, &[&ps(&d)]).unwrap();
                let b = fed_adaptive(&s, &theta, &[&ps(&d)]).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
