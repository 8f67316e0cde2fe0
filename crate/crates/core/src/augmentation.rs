//! Server-built, class-balanced augmentation pool and the per-round mixing
//! of pool samples into each client's local training set.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::model::{local_train, LocalTraining, ModelError, ModelParams, TrainConfig};
use crate::pipeline::{segments_from_container, segments_to_container, PipelineError};
use crate::rng::{rng_for, Stream};
use crate::segment::DataSegment;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("class {class} has {have} source segment(s), pool needs {need}")]
    InsufficientSource { class: usize, have: usize, need: usize },
    #[error("per_class must be positive")]
    EmptyPool,
    #[error("invalid range [{0}, {1}]")]
    Range(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// Which classes receive pool samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Every class, every round.
    Uniform,
    /// Only classes absent from the client's local data.
    MissingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Inclusive bounds on local segments drawn per class.
    pub local_range: [usize; 2],
    /// Inclusive bounds on pool segments drawn per class.
    pub aug_range: [usize; 2],
    pub mode: AugmentMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            local_range: [50, 100],
            aug_range: [15, 30],
            mode: AugmentMode::Uniform,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in [self.local_range, self.aug_range] {
            if lo > hi {
                return Err(AugmentError::Range(lo, hi));
            }
        }
        Ok(())
    }
}

/// Immutable once built; every client receives the same pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPool {
    pub per_class: Vec<Vec<DataSegment>>,
    pub per_class_size: usize,
}

/// Uniform sampling without replacement of `per_class` segments per class.
pub fn init_pool(source: &[DataSegment], classes: usize, per_class: usize, seed: u64) -> Result<AugmentPool> {
    if per_class == 0 {
        return Err(AugmentError::EmptyPool);
    }
    let mut pool = Vec::with_capacity(classes);
    for c in 0..classes {
        let candidates: Vec<&DataSegment> = source.iter().filter(|s| s.label == c).collect();
        if candidates.len() < per_class {
            return Err(AugmentError::InsufficientSource {
                class: c,
                have: candidates.len(),
                need: per_class,
            });
        }
        let mut rng = rng_for(seed, Stream::Pool, &[c as u64]);
        pool.push(
            candidates
                .choose_multiple(&mut rng, per_class)
                .map(|s| (*s).clone())
                .collect(),
        );
    }
    Ok(AugmentPool {
        per_class: pool,
        per_class_size: per_class,
    })
}

impl AugmentPool {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_container(&self) -> Container {
        let all: Vec<DataSegment> = self.per_class.iter().flatten().cloned().collect();
        let mut c = segments_to_container(&all, "augment_pool");
        c.set_meta("per_class_size", self.per_class_size as u64);
        c.set_meta("classes", self.per_class.len() as u64);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let per_class_size = c.meta_u64("per_class_size")? as usize;
        let classes = c.meta_u64("classes")? as usize;
        let mut per_class = vec![Vec::new(); classes];
        for s in segments_from_container(c)? {
            let label = s.label;
            per_class
                .get_mut(label)
                .ok_or(AugmentError::InsufficientSource {
                    class: label,
                    have: 0,
                    need: per_class_size,
                })?
                .push(s);
        }
        Ok(Self {
            per_class,
            per_class_size,
        })
    }

    /// SHA-256 of the serialized pool, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_container().to_bytes()))
    }
}

/// One round's training set: per class, up to `uniform(local_range)` local
/// segments (all of them if fewer exist) without replacement, plus
/// `uniform(aug_range)` pool segments; then shuffled.
pub fn sample_training_set<'a>(
    local: &'a [DataSegment],
    pool: Option<&'a AugmentPool>,
    classes: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Vec<&'a DataSegment> {
    let mut rng = rng_for(seed, Stream::Sampling, &[]);
    let mut out: Vec<&DataSegment> = Vec::new();
    for c in 0..classes {
        let mine: Vec<&DataSegment> = local.iter().filter(|s| s.label == c).collect();
        let want = rng.random_range(cfg.local_range[0]..=cfg.local_range[1]);
        out.extend(mine.choose_multiple(&mut rng, want.min(mine.len())).copied());
        let Some(pool) = pool else { continue };
        if cfg.mode == AugmentMode::MissingOnly && !mine.is_empty() {
            continue;
        }
        let want = rng.random_range(cfg.aug_range[0]..=cfg.aug_range[1]);
        if let Some(src) = pool.per_class.get(c) {
            out.extend(src.choose_multiple(&mut rng, want.min(src.len())));
        }
    }
    out.shuffle(&mut rng);
    out
}

/// `local_train` on this round's sampled training set.
pub fn augmented_gradients(
    global: &ModelParams,
    local: &[DataSegment],
    pool: Option<&AugmentPool>,
    sampling: &SamplingConfig,
    train: &TrainConfig,
    sampling_seed: u64,
) -> Result<LocalTraining> {
    let data = sample_training_set(local, pool, global.config.num_classes, sampling, sampling_seed);
    Ok(local_train(global, &data, train)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seg(label: usize, v: f64) -> DataSegment {
        DataSegment::new(Tensor::filled(&[3, 100], v), label, 20)
    }

    fn source(per_class: usize) -> Vec<DataSegment> {
        (0..5)
            .flat_map(|c| (0..per_class).map(move |i| seg(c, (c * 1000 + i) as f64 * 1e-4)))
            .collect()
    }

    #[test]
    fn pool_sizes_and_determinism() {
        let src = source(700);
        let pool = init_pool(&src, 5, 640, 1).unwrap();
        assert_eq!(pool.len(), 3200);
        assert_eq!(pool, init_pool(&src, 5, 640, 1).unwrap());
        assert_eq!(init_pool(&src, 5, 1, 1).unwrap().len(), 5);
        assert!(matches!(
            init_pool(&src, 5, 701, 1),
            Err(AugmentError::InsufficientSource {
                class: 0,
                have: 700,
                need: 701
            })
        ));
    }

    #[test]
    fn pool_container_round_trip_preserves_digest() {
        let pool = init_pool(&source(20), 5, 10, 2).unwrap();
        let back =
            AugmentPool::from_container(&Container::from_bytes(&pool.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.digest(), pool.digest());
    }

    #[test]
    fn single_class_client_gets_every_class() {
        let pool = init_pool(&source(40), 5, 40, 3).unwrap();
        let local: Vec<DataSegment> = (0..200).map(|i| seg(0, i as f64 * 1e-3)).collect();
        let out = sample_training_set(&local, Some(&pool), 5, &SamplingConfig::default(), 9);
        let count = |c| out.iter().filter(|s| s.label == c).count();
        assert!((50 + 15..=100 + 30).contains(&count(0)));
        for c in 1..5 {
            assert!((15..=30).contains(&count(c)), "class {c}: {}", count(c));
        }
    }

    #[test]
    fn stock_mode_and_empty_local() {
        let pool = init_pool(&source(40), 5, 40, 3).unwrap();
        let local: Vec<DataSegment> = (0..30).map(|i| seg(2, i as f64)).collect();
        let stock = SamplingConfig {
            aug_range: [0, 0],
            ..SamplingConfig::default()
        };
        let out = sample_training_set(&local, Some(&pool), 5, &stock, 1);
        assert_eq!(out.len(), 30);
        let out = sample_training_set(&[], Some(&pool), 5, &SamplingConfig::default(), 1);
        assert!((75..=150).contains(&out.len()));
    }

    #[test]
    fn missing_only_skips_present_classes() {
        let pool = init_pool(&source(40), 5, 40, 3).unwrap();
        let local: Vec<DataSegment> = (0..80).map(|i| seg(1, i as f64)).collect();
        let cfg = SamplingConfig {
            mode: AugmentMode::MissingOnly,
            ..SamplingConfig::default()
        };
        let out = sample_training_set(&local, Some(&pool), 5, &cfg, 4);
        assert!((50..=80).contains(&out.iter().filter(|s| s.label == 1).count()));
    }
}
