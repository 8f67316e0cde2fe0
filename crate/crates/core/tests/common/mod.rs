//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use flsim_core::augmentation::AugmentMode;
use flsim_core::config::{DatasetConfig, ExperimentConfig};
use flsim_core::model::{ModelConfig, Optimizer};
use flsim_core::rng::SimRng;
use flsim_core::segment::DataSegment;
use flsim_core::synth::SynthConfig;
use flsim_core::tensor::Tensor;

/// Small enough that a whole simulation takes well under a second.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.dataset = DatasetConfig::Synthetic(SynthConfig {
        n_clients: 8,
        per_client_count_range: [20, 40],
        max_classes_per_client: Some(2),
        volunteer_users: 2,
        volunteer_per_class: 20,
        test_users: 2,
        test_per_class: 10,
        ..SynthConfig::default()
    });
    cfg.model = ModelConfig::new(4, 5, false);
    cfg.augmentation.pool_per_class = 10;
    cfg.augmentation.local_range = [5, 10];
    cfg.augmentation.aug_range = [2, 4];
    cfg.augmentation.mode = AugmentMode::Uniform;
    cfg.protocol.policy.max_rounds = 5;
    cfg
}

/// The desk-scale non-IID setup: 64 clients each holding at most two of
/// five classes, an 8-channel model, 150 rounds, and at most 16 clients
/// admitted per round.
pub fn desk_config(augmented: bool, p_drop: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 2024;
    cfg.dataset = DatasetConfig::Synthetic(SynthConfig {
        n_clients: 64,
        dirichlet_alpha: 0.1,
        max_classes_per_client: Some(2),
        ..SynthConfig::default()
    });
    cfg.model = ModelConfig::new(8, 5, false);
    cfg.protocol.policy.max_rounds = 150;
    cfg.protocol.policy.adft_max_accepted = Some(16);
    cfg.augmentation.enabled = augmented;
    cfg.faults.p_drop = p_drop;
    cfg
}

/// A randomized fault schedule over the tiny setup: dropout, upload delays
/// that straddle the deadline, injected registration denials, lost
/// notifications, admission caps and SFA thresholds that force aborts.
pub fn fault_schedule(i: u64) -> ExperimentConfig {
    let mut r = SimRng::seed_from_u64(0xFA17 + i);
    let mut cfg = tiny_config(1000 + i);
    cfg.protocol.policy.max_rounds = r.random_range(3..=7);
    cfg.protocol.deadline_ms = r.random_range(20_000..=120_000);
    cfg.protocol.poll_interval_ms = r.random_range(5_000..=40_000);
    cfg.protocol.train_base_ms = r.random_range(1_000..=20_000);
    cfg.protocol.train_ms_per_sample = r.random_range(0.0..200.0);
    cfg.protocol.policy.sttp_min_remaining_ms = r.random_range(0..=10_000);
    cfg.protocol.policy.sfap_min_updates = r.random_range(1..=5);
    cfg.protocol.policy.adft_max_accepted = r.random_bool(0.5).then(|| r.random_range(1..=8));
    cfg.protocol.notify = r.random_bool(0.8);
    cfg.devices.p_charging = r.random_range(0.2..=1.0);
    cfg.devices.p_connected = r.random_range(0.5..=1.0);
    cfg.devices.period_ms = r.random_range(10_000..=200_000);
    cfg.faults.p_drop = r.random_range(0.0..0.9);
    let lo = r.random_range(0..=30_000);
    cfg.faults.upload_delay_ms = [lo, lo + r.random_range(0..=60_000)];
    cfg.faults.p_deny_registration = r.random_range(0.0..0.5);
    cfg.faults.p_notify_loss = r.random_range(0.0..=1.0);
    cfg.train.optimizer = if r.random_bool(0.5) {
        Optimizer::Adam
    } else {
        Optimizer::Sgd
    };
    cfg
}

pub fn random_segment(rng: &mut SimRng, label: usize, std: f64) -> DataSegment {
    let n = Normal::new(0.0, std).unwrap();
    let data = (0..300).map(|_| n.sample(rng)).collect();
    DataSegment::new(Tensor::new(vec![3, 100], data).unwrap(), label, 20)
}

use flsim_core::model::{is_trainable, loss_and_grad, relu_pattern, sample_loss, Mode, ModelParams};

/// Outcome of comparing backprop against central differences over every
/// trainable scalar of a model for one input.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose step had to shrink because a ReLU switched.
    pub kink_retries: usize,
    pub smallest_gradient: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; 0 when both vanish.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(n.abs()).max(floor)
}

/// Central differences with step `h`, shrunk tenfold (down to 1e-9) while
/// either probe lands on a different ReLU activation pattern than the
/// unperturbed input, so the difference never straddles a kink.
pub fn full_fd(model: &ModelParams, seg: &DataSegment, h: f64, floor: f64) -> FdReport {
    let mut rng = SimRng::seed_from_u64(0);
    let g = loss_and_grad(model, &[seg], Mode::Eval, &mut rng).unwrap();
    let base = relu_pattern(model, &seg.values).unwrap();
    let mut rep = FdReport {
        smallest_gradient: f64::INFINITY,
        ..FdReport::default()
    };
    for (idx, (name, t)) in model.params.entries().iter().enumerate() {
        if !is_trainable(name) {
            continue;
        }
        for j in 0..t.len() {
            let mut step = h;
            let (lp, lm) = loop {
                let mut plus = model.clone();
                plus.params.tensor_mut(idx).data_mut()[j] += step;
                let mut minus = model.clone();
                minus.params.tensor_mut(idx).data_mut()[j] -= step;
                let same = relu_pattern(&plus, &seg.values).unwrap() == base
                    && relu_pattern(&minus, &seg.values).unwrap() == base;
                if same || step < 1e-9 {
                    break (
                        sample_loss(&plus, &seg.values, seg.label).unwrap(),
                        sample_loss(&minus, &seg.values, seg.label).unwrap(),
                    );
                }
                step /= 10.0;
                rep.kink_retries += 1;
            };
            let fd = (lp - lm) / (2.0 * step);
            let an = g.grads.tensor(idx).data()[j];
            if an != 0.0 {
                rep.smallest_gradient = rep.smallest_gradient.min(an.abs());
            }
            let e = rel_error(an, fd, floor);
            rep.checked += 1;
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = format!("{name}[{j}] analytic={an:e} fd={fd:e}");
            }
        }
    }
    rep
}
