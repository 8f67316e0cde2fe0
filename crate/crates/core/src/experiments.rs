//! Scripted studies: accuracy under client dropout and aggregation time
//! against the number of participating clients.

use std::time::Instant;

use rand_distr::{Distribution, Normal};

use crate::aggregators::{AggregatorConfig, AggregatorState};
use crate::config::{ExperimentConfig, PolicyConfig};
use crate::container::Container;
use crate::metrics::{summarize, RoundMetrics};
use crate::model::{build_model, ClientId, GradientUpdate, ModelConfig};
use crate::params::ParamSet;
use crate::protocol::cloud::BlobStore;
use crate::protocol::server::{server_accept_upload, server_handle_rtcm, server_on_deadline, update_key, StoredUpdate};
use crate::protocol::{run_with_data, ProtocolError, RoundState, RunResult, SimData};
use crate::rng::{derive_seed, rng_for, Stream};

type Result<T> = std::result::Result<T, ProtocolError>;

/// Runs `base` once per dropout probability; everything else, including
/// the seed, is shared.
pub fn experiment_dropout(base: &ExperimentConfig, data: &SimData, p_drops: &[f64]) -> Result<Vec<(f64, RunResult)>> {
    p_drops
        .iter()
        .map(|&p| {
            let mut cfg = base.clone();
            cfg.faults.p_drop = p;
            run_with_data(&cfg, data).map(|r| (p, r))
        })
        .collect()
}

pub const DROPOUT_HEADER: &str =
    "p_drop,rounds,final_accuracy,best_accuracy,accepted_rounds,aborted_rounds,total_dropped";

pub fn dropout_row(p_drop: f64, metrics: &[RoundMetrics], initial_accuracy: f64) -> String {
    let s = summarize(metrics);
    format!(
        "{p_drop},{},{:.6},{:.6},{},{},{}",
        s.rounds,
        s.final_accuracy.unwrap_or(initial_accuracy),
        s.best_accuracy.unwrap_or(initial_accuracy),
        s.accepted_rounds,
        s.aborted_rounds,
        s.total_dropped
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub k: usize,
    pub mean_ms: f64,
    pub samples_ms: Vec<f64>,
}

fn random_update(template: &ParamSet, client: u32, seed: u64) -> Result<GradientUpdate> {
    let mut rng = rng_for(seed, Stream::Scaling, &[client as u64]);
    let normal = Normal::new(0.0, 1e-3).map_err(|e| ProtocolError::Data(e.to_string()))?;
    let mut deltas = ParamSet::zeros_like(template);
    deltas.values_mut().for_each(|v| *v = normal.sample(&mut rng));
    Ok(GradientUpdate {
        deltas,
        client_id: ClientId(client),
        round: 0,
        sample_count: 1,
    })
}

/// Wall-clock cost of one server aggregation with `k` stored updates:
/// fetch and decode each blob, admit it to the round, then run the deadline
/// handler. Each count is measured `reps` times after one warm-up.
///
/// Only `distinct` different payloads are generated and reused under
/// different client ids, which keeps set-up cheap without changing the work
/// being timed.
pub fn experiment_scaling(
    model: &ModelConfig,
    aggregator: &AggregatorConfig,
    counts: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    const DISTINCT: usize = 16;
    let theta = build_model(*model, derive_seed(seed, Stream::ModelInit, &[]))?.params;
    let payloads = (0..DISTINCT)
        .map(|i| random_update(&theta, i as u32, seed))
        .collect::<Result<Vec<_>>>()?;
    let policy = PolicyConfig {
        sfap_min_updates: 1,
        ..PolicyConfig::default()
    };
    let agg = AggregatorState::new(*aggregator);
    let mut out = Vec::new();
    for &k in counts {
        let mut blobs = BlobStore::default();
        for c in 0..k {
            let mut u = payloads[c % DISTINCT].clone();
            u.client_id = ClientId(c as u32);
            blobs.put(&update_key(0, u.client_id), u.to_container().to_bytes());
        }
        let mut samples = Vec::with_capacity(reps);
        for rep in 0..=reps {
            let mut round = RoundState::open(0, u64::MAX, Vec::new());
            for c in 0..k {
                server_handle_rtcm(ClientId(c as u32), &mut round, &policy);
            }
            let started = Instant::now();
            for c in 0..k {
                let key = update_key(0, ClientId(c as u32));
                let bytes = blobs
                    .get(&key)
                    .ok_or_else(|| ProtocolError::Invariant(format!("missing blob {key}")))?;
                let container = Container::from_bytes(bytes).map_err(crate::model::ModelError::from)?;
                let update = GradientUpdate::from_container(&container)?;
                let stored = StoredUpdate {
                    update,
                    uploaded_at_ms: 0,
                    blob_key: key,
                };
                server_accept_upload(stored, &mut round, 0)
                    .map_err(|r| ProtocolError::Invariant(format!("upload rejected: {}", r.as_str())))?;
            }
            let res = server_on_deadline(&mut round, &policy, &agg, &theta, None, |_| true)?;
            std::hint::black_box(&res.next);
            let ms = started.elapsed().as_secs_f64() * 1e3;
            if rep > 0 {
                samples.push(ms);
            }
        }
        let mean_ms = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
        log::info!("scaling k={k}: {mean_ms:.2} ms");
        out.push(ScalingPoint {
            k,
            mean_ms,
            samples_ms: samples,
        });
    }
    Ok(out)
}

pub const SCALING_HEADER: &str = "k,mean_agg_ms";

pub fn scaling_row(p: &ScalingPoint) -> String {
    format!("{},{:.4}", p.k, p.mean_ms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x` with coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}
