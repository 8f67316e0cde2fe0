//! Synthetic non-IID accelerometer data.
//!
//! Each class is a parameterized signal family: a dominant frequency, per-axis
//! amplitudes, a gravity offset (device orientation) and a noise level. Users
//! perturb every family parameter, so the same activity looks different from
//! user to user. Values are generated in z-score units, clipped to `[-2, 2]`
//! and rescaled to `[-1, 1]` exactly as real data is.
//!
//! Client class proportions are drawn from a Dirichlet(α). Separate held-out
//! users provide the augmentation source ("volunteers") and the test set, so
//! neither shares a user with any client.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{rescale, CLIP};
use crate::rng::{rng_for, SimRng, Stream};
use crate::segment::{DataSegment, Origin, AXES, WINDOW};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dirichlet_alpha must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("invalid synthetic data configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clients: usize,
    pub classes: usize,
    /// Inclusive bounds on segments per client.
    pub per_client_count_range: [usize; 2],
    pub dirichlet_alpha: f64,
    /// Keep only the client's largest Dirichlet components; the rest of
    /// the mass is renormalized over them.
    pub max_classes_per_client: Option<usize>,
    /// Sampling rates; each user records at one of them.
    pub rate_mix: Vec<u32>,
    pub volunteer_users: usize,
    pub volunteer_per_class: usize,
    pub test_users: usize,
    pub test_per_class: usize,
    /// Spread of per-user deviations from the class family, as a multiple
    /// of the built-in jitter scales.
    pub user_variation: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clients: 64,
            classes: 5,
            per_client_count_range: [100, 300],
            dirichlet_alpha: 0.1,
            max_classes_per_client: None,
            rate_mix: vec![20, 50],
            volunteer_users: 8,
            volunteer_per_class: 640,
            test_users: 16,
            test_per_class: 100,
            user_variation: 1.0,
            noise_std: 0.35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(SynthError::Alpha(self.dirichlet_alpha));
        }
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        let [lo, hi] = self.per_client_count_range;
        if lo > hi {
            return bad("per_client_count_range must satisfy min <= max");
        }
        if self.max_classes_per_client == Some(0) {
            return bad("max_classes_per_client must be positive");
        }
        if self.rate_mix.is_empty() || self.rate_mix.contains(&0) {
            return bad("rate_mix must list positive sampling rates");
        }
        if self.volunteer_users == 0 || self.test_users == 0 {
            return bad("volunteer_users and test_users must be positive");
        }
        if !(self.noise_std >= 0.0 && self.user_variation >= 0.0) {
            return bad("noise_std and user_variation must be non-negative");
        }
        Ok(())
    }
}

/// One draw from Dirichlet(α·1_k). Works in log space so tiny α does not
/// underflow every component to zero: `ln G(α) = ln G(α+1) + ln(U)/α`.
pub fn dirichlet(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Parameters of one class as seen by one user.
#[derive(Debug, Clone)]
struct Family {
    freq_hz: f64,
    amp: [f64; AXES],
    offset: [f64; AXES],
    harmonic: f64,
    noise: f64,
}

fn base_family(c: usize, k: usize, noise: f64) -> Family {
    let t = c as f64 / (k - 1) as f64;
    let mut amp = [0.0; AXES];
    let mut offset = [0.0; AXES];
    for a in 0..AXES {
        // distinct amplitude profile and orientation per class
        let phase = 2.0 * PI * (c as f64 / k as f64 + a as f64 / AXES as f64);
        amp[a] = 0.25 + 0.45 * (1.0 + ((c * 3 + a * 5) % k) as f64 / (k - 1) as f64) * (0.5 + 0.5 * t);
        offset[a] = 0.9 * phase.cos();
    }
    Family {
        freq_hz: 0.4 + 1.6 * t,
        amp,
        offset,
        harmonic: 0.5 * ((c % 2) as f64),
        noise,
    }
}

fn user_family(base: &Family, variation: f64, rng: &mut SimRng) -> Family {
    let n = |s: f64| Normal::new(0.0, (s * variation).max(0.0)).expect("finite std");
    let mut f = base.clone();
    f.freq_hz *= (1.0 + n(0.12).sample(rng)).max(0.3);
    for a in 0..AXES {
        f.amp[a] *= (1.0 + n(0.2).sample(rng)).max(0.1);
        f.offset[a] += n(0.3).sample(rng);
    }
    f
}

fn draw_segment(fam: &Family, rate: u32, rng: &mut SimRng) -> Vec<f64> {
    let noise = Normal::<f64>::new(0.0, fam.noise).expect("finite std");
    let jitter = Normal::<f64>::new(0.0, 0.1).expect("finite std");
    let scale = (1.0 + jitter.sample(rng)).max(0.2);
    let freq = fam.freq_hz * (1.0 + 0.5 * jitter.sample(rng)).max(0.2);
    let mut out = Vec::with_capacity(AXES * WINDOW);
    for a in 0..AXES {
        let phase = rng.random_range(0.0..2.0 * PI);
        for i in 0..WINDOW {
            let w = 2.0 * PI * freq * i as f64 / rate as f64 + phase;
            let z = fam.offset[a] + scale * fam.amp[a] * (w.sin() + fam.harmonic * (2.0 * w).sin()) + noise.sample(rng);
            out.push(rescale(z.clamp(-CLIP, CLIP), -CLIP, CLIP));
        }
    }
    out
}

/// A user: a rate and one family per class.
struct User {
    stream: u64,
    rate: u32,
    families: Vec<Family>,
}

impl User {
    fn new(cfg: &SynthConfig, stream: u64, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Synth, &[stream, 0]);
        let rate = cfg.rate_mix[rng.random_range(0..cfg.rate_mix.len())];
        let families = (0..cfg.classes)
            .map(|c| {
                user_family(
                    &base_family(c, cfg.classes, cfg.noise_std),
                    cfg.user_variation,
                    &mut rng,
                )
            })
            .collect();
        Self { stream, rate, families }
    }

    /// `labels[i]` becomes segment `i`; origins tile the user's timeline
    /// without overlap.
    fn segments(&self, labels: &[usize], seed: u64) -> Vec<DataSegment> {
        let mut rng = rng_for(seed, Stream::Synth, &[self.stream, 1]);
        let span = (WINDOW as i64 * 1000) / self.rate as i64;
        labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let data = draw_segment(&self.families[c], self.rate, &mut rng);
                let start = i as i64 * (span + 1000);
                DataSegment::new(Tensor::from_parts(vec![AXES, WINDOW], data), c, self.rate).with_origin(Origin {
                    stream: self.stream,
                    start_ms: start,
                    end_ms: start + span,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthDataset {
    pub clients: Vec<Vec<DataSegment>>,
    /// Class proportions each client was drawn with.
    pub proportions: Vec<Vec<f64>>,
    /// Balanced, from held-out users; source for the augmentation pool.
    pub volunteer: Vec<DataSegment>,
    /// Balanced, from other held-out users.
    pub test: Vec<DataSegment>,
}

fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..per_class).flat_map(|_| 0..classes).collect()
}

fn held_out(cfg: &SynthConfig, first_stream: u64, users: usize, per_class: usize, seed: u64) -> Vec<DataSegment> {
    let labels = balanced_labels(cfg.classes, per_class);
    let mut out = Vec::with_capacity(labels.len());
    for u in 0..users {
        let mine: Vec<usize> = labels.iter().copied().skip(u).step_by(users).collect();
        let user = User::new(cfg, first_stream + u as u64, seed);
        out.extend(user.segments(&mine, seed));
    }
    out
}

/// Draws client proportions. With `max_classes_per_client = m`, components
/// outside the top `m` are zeroed and the rest renormalized.
pub fn client_proportions(cfg: &SynthConfig, client: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, Stream::Synth, &[client as u64, 2]);
    let mut p = dirichlet(cfg.dirichlet_alpha, cfg.classes, &mut rng);
    if let Some(m) = cfg.max_classes_per_client {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        for &c in order.iter().skip(m) {
            p[c] = 0.0;
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
    }
    p
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut ds = SynthDataset::default();
    for ci in 0..cfg.n_clients {
        let p = client_proportions(cfg, ci, seed);
        let mut rng = rng_for(seed, Stream::Synth, &[ci as u64, 3]);
        let [lo, hi] = cfg.per_client_count_range;
        let n = rng.random_range(lo..=hi);
        let labels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (c, &pc) in p.iter().enumerate() {
                    acc += pc;
                    if u < acc && pc > 0.0 {
                        return c;
                    }
                }
                // rounding left u above the cumulative sum
                p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
            })
            .collect();
        let user = User::new(cfg, ci as u64, seed);
        ds.clients.push(user.segments(&labels, seed));
        ds.proportions.push(p);
    }
    let base = cfg.n_clients as u64;
    ds.volunteer = held_out(cfg, base, cfg.volunteer_users, cfg.volunteer_per_class, seed);
    ds.test = held_out(
        cfg,
        base + cfg.volunteer_users as u64,
        cfg.test_users,
        cfg.test_per_class,
        seed,
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> SynthConfig {
        SynthConfig {
            n_clients: 6,
            per_client_count_range: [20, 40],
            volunteer_per_class: 10,
            test_per_class: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..100 {
            let p = dirichlet(1000.0, 5, &mut rng);
            assert!(p.iter().all(|&x| (x - 0.2).abs() <= 0.02), "{p:?}");
        }
    }

    #[test]
    fn small_alpha_concentrates_mass() {
        let mut rng = SimRng::seed_from_u64(2);
        let mut top: Vec<f64> = (0..1000)
            .map(|_| dirichlet(0.1, 5, &mut rng).into_iter().fold(0.0, f64::max))
            .collect();
        top.sort_by(f64::total_cmp);
        assert!(top[500] >= 0.6, "median top mass {}", top[500]);
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_generate(&small(), 5).unwrap();
        let b = synth_generate(&small(), 5).unwrap();
        assert_eq!(a.clients, b.clients);
        assert_eq!(a.test, b.test);
        for s in a.clients.iter().flatten().chain(&a.volunteer).chain(&a.test) {
            assert_eq!(s.values.shape(), &[3, 100]);
            assert!(s.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(a.volunteer.len(), 50);
        assert_eq!(a.test.len(), 40);
        assert_ne!(a.clients, synth_generate(&small(), 6).unwrap().clients);
    }

    #[test]
    fn class_cap_limits_client_classes() {
        let cfg = SynthConfig {
            max_classes_per_client: Some(2),
            dirichlet_alpha: 10.0,
            ..small()
        };
        let ds = synth_generate(&cfg, 3).unwrap();
        for c in &ds.clients {
            let mut seen: Vec<usize> = c.iter().map(|s| s.label).collect();
            seen.sort();
            seen.dedup();
            assert!(seen.len() <= 2);
        }
    }

    #[test]
    fn held_out_users_are_disjoint_from_clients() {
        let ds = synth_generate(&small(), 4).unwrap();
        let client_streams: Vec<u64> = ds.clients.iter().flatten().map(|s| s.origin.unwrap().stream).collect();
        for s in ds.volunteer.iter().chain(&ds.test) {
            assert!(!client_streams.contains(&s.origin.unwrap().stream));
        }
    }

    #[test]
    fn rejects_bad_alpha() {
        let cfg = SynthConfig {
            dirichlet_alpha: 0.0,
            ..small()
        };
        assert!(matches!(synth_generate(&cfg, 1), Err(SynthError::Alpha(_))));
    }
}
