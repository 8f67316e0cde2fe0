//! Discrete-event driver. One scheduler owns the clock, the server's round
//! state and every client state; local training runs lazily in batches,
//! optionally on a thread pool, and its results depend only on
//! `(seed, client, round)`, never on batch composition.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;

use crate::aggregators::AggregatorState;
use crate::augmentation::{init_pool, sample_training_set, AugmentPool};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::metrics::RoundMetrics;
use crate::model::{build_model, evaluate, local_train, ClientId, EvalReport, GradientUpdate, ModelParams};
use crate::pipeline::read_segments;
use crate::privacy::{perturb_segment, PrivacyMode};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::segment::DataSegment;
use crate::synth::synth_generate;

use super::client::{client_on_notify, client_on_response, client_step, ClientDecision, ClientState, DeviceTimeline};
use super::cloud::{BlobStore, PubSub, RoundRecord, StateStore};
use super::events::{EventKind, EventLog, UpdateRef};
use super::server::{
    model_key, server_accept_upload, server_handle_rtcm, server_on_deadline, should_start_new_round, update_key,
    DenyReason, Phase, RoundOutcome, RoundState, RtcmResponse, StoredUpdate,
};
use super::ProtocolError;

type Result<T> = std::result::Result<T, ProtocolError>;

/// Everything a run reads: per-client training data, the held-out test
/// set, and the source the augmentation pool is drawn from.
#[derive(Debug, Clone, Default)]
pub struct SimData {
    pub clients: Vec<Vec<DataSegment>>,
    pub test: Vec<DataSegment>,
    pub pool_source: Vec<DataSegment>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<SimData> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(s) => {
            let d = synth_generate(s, derive_seed(cfg.seed, Stream::Synth, &[]))?;
            Ok(SimData {
                clients: d.clients,
                test: d.test,
                pool_source: d.volunteer,
            })
        }
        DatasetConfig::Files { dir } => load_dir(dir),
    }
}

/// Reads `client_<n>.flsc` (ordered by `n`), `test.flsc` and, if present,
/// `volunteer.flsc`.
fn load_dir(dir: &Path) -> Result<SimData> {
    let entries = std::fs::read_dir(dir).map_err(|e| ProtocolError::Data(format!("{}: {e}", dir.display())))?;
    let mut clients: BTreeMap<u64, std::path::PathBuf> = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| ProtocolError::Data(e.to_string()))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(n) = name.strip_prefix("client_").and_then(|r| r.strip_suffix(".flsc")) {
            let idx = n
                .parse::<u64>()
                .map_err(|_| ProtocolError::Data(format!("bad client file name {name}")))?;
            clients.insert(idx, path);
        }
    }
    if clients.is_empty() {
        return Err(ProtocolError::Data(format!(
            "no client_*.flsc files in {}",
            dir.display()
        )));
    }
    let test_path = dir.join("test.flsc");
    if !test_path.exists() {
        return Err(ProtocolError::Data(format!("missing {}", test_path.display())));
    }
    let vol = dir.join("volunteer.flsc");
    Ok(SimData {
        clients: clients
            .values()
            .map(|p| read_segments(p))
            .collect::<std::result::Result<_, _>>()?,
        test: read_segments(&test_path)?,
        pool_source: if vol.exists() { read_segments(&vol)? } else { Vec::new() },
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub events: EventLog,
    pub final_model: ModelParams,
    pub initial_eval: EvalReport,
    pub pool_digest: Option<String>,
}

/// Hooks for tests and experiments that need more control than the config
/// file offers.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// One timeline per client; replaces the random device model.
    pub timelines: Option<Vec<DeviceTimeline>>,
}

pub fn run_simulation(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_with_data(cfg, &data)
}

pub fn run_with_data(cfg: &ExperimentConfig, data: &SimData) -> Result<RunResult> {
    run_with_options(cfg, data, &SimOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Poll { client: usize, periodic: bool },
    RtcmArrive { client: usize },
    ResponseArrive { client: usize },
    UploadArrive { job: usize },
    Deadline { round: u64 },
    AggregationDone { round: u64 },
}

struct Job {
    client: usize,
    round: u64,
    model: Arc<ModelParams>,
    result: Option<GradientUpdate>,
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a SimData,
    pool: Option<AugmentPool>,
    queue: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    log: EventLog,
    clients: Vec<ClientState>,
    pending_response: Vec<Option<RtcmResponse>>,
    deny_attempts: Vec<u64>,
    jobs: Vec<Job>,
    blobs: BlobStore,
    state: StateStore,
    pubsub: PubSub,
    global: Arc<ModelParams>,
    agg: AggregatorState,
    round: RoundState,
    round_dropped: usize,
    /// Digest of the published model the current round trains against.
    model_digest: String,
    current_eval: EvalReport,
    pending_deadline: Option<PendingAggregation>,
    metrics: Vec<RoundMetrics>,
    thread_pool: Option<rayon::ThreadPool>,
    finished: bool,
}

/// State held between a deadline and the end of the simulated aggregation.
struct PendingAggregation {
    outcome: RoundOutcome,
    next: Option<(ModelParams, AggregatorState, EvalReport)>,
    carry: Vec<StoredUpdate>,
    agg_ms: f64,
}

pub fn run_with_options(cfg: &ExperimentConfig, data: &SimData, opts: &SimOptions) -> Result<RunResult> {
    cfg.validate()?;
    let n = data.clients.len();
    if n == 0 {
        return Err(ProtocolError::Data("no clients".into()));
    }
    if data.test.is_empty() {
        return Err(ProtocolError::Data("empty test set".into()));
    }
    let classes = cfg.model.num_classes;
    let pool = if cfg.augmentation.enabled {
        Some(init_pool(
            &data.pool_source,
            classes,
            cfg.augmentation.pool_per_class,
            derive_seed(cfg.seed, Stream::Pool, &[]),
        )?)
    } else {
        None
    };
    let timelines = match &opts.timelines {
        Some(t) if t.len() != n => {
            return Err(ProtocolError::Data(format!("{} timelines for {n} clients", t.len())));
        }
        Some(t) => t.clone(),
        None => vec![
            DeviceTimeline::Random {
                seed: cfg.seed,
                config: cfg.devices.clone(),
            };
            n
        ],
    };
    let model = build_model(cfg.model, derive_seed(cfg.seed, Stream::ModelInit, &[]))?;
    let initial_eval = evaluate(&model, &data.test)?;
    let thread_pool = match (cfg.execution.parallel, cfg.execution.threads) {
        (true, Some(t)) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| ProtocolError::Data(format!("thread pool: {e}")))?,
        ),
        _ => None,
    };
    let mut sim = Sim {
        cfg,
        data,
        pool,
        queue: BinaryHeap::new(),
        seq: 0,
        log: EventLog::default(),
        clients: timelines
            .into_iter()
            .enumerate()
            .map(|(i, t)| ClientState::new(ClientId(i as u32), t))
            .collect(),
        pending_response: vec![None; n],
        deny_attempts: vec![0; n],
        jobs: Vec::new(),
        blobs: BlobStore::default(),
        state: StateStore::default(),
        pubsub: PubSub::default(),
        global: Arc::new(model),
        agg: AggregatorState::new(cfg.aggregator),
        round: RoundState::open(0, cfg.protocol.deadline_ms, Vec::new()),
        round_dropped: 0,
        model_digest: String::new(),
        current_eval: initial_eval.clone(),
        pending_deadline: None,
        metrics: Vec::new(),
        thread_pool,
        finished: false,
    };
    sim.run()?;
    let pool_digest = sim.pool.as_ref().map(AugmentPool::digest);
    Ok(RunResult {
        metrics: sim.metrics,
        events: sim.log,
        final_model: Arc::try_unwrap(sim.global).unwrap_or_else(|a| (*a).clone()),
        initial_eval,
        pool_digest,
    })
}

fn client_actor(c: usize) -> String {
    format!("client-{c}")
}

impl Sim<'_> {
    fn schedule(&mut self, t: u64, ev: Ev) {
        self.queue.push(Reverse((t, self.seq, ev)));
        self.seq += 1;
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let privacy_mode = serde_json::to_value(cfg.privacy.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        self.log.push(
            0,
            "server",
            EventKind::RunStart {
                clients: self.clients.len(),
                privacy_mode,
            },
            None,
        );
        if let Some(pool) = &self.pool {
            let digest = self.blobs.put("pool/augmentation", pool.to_container().to_bytes());
            for c in 0..self.clients.len() {
                self.log.push(
                    0,
                    "cloud",
                    EventKind::PoolDelivered { client: c as u32 },
                    Some(digest.clone()),
                );
            }
        }
        if cfg.protocol.policy.max_rounds == 0 {
            self.log.push(
                0,
                "server",
                EventKind::RunEnd {
                    rounds: 0,
                    pending_carried: Vec::new(),
                },
                None,
            );
            return Ok(());
        }
        for c in 0..self.clients.len() {
            self.pubsub.subscribe(ClientId(c as u32));
            let offset = rng_for(cfg.seed, Stream::Polling, &[c as u64]).random_range(0..cfg.protocol.poll_interval_ms);
            self.schedule(
                offset,
                Ev::Poll {
                    client: c,
                    periodic: true,
                },
            );
        }
        self.open_round(0, 0, Vec::new());
        while let Some(Reverse((t, _, ev))) = self.queue.pop() {
            self.handle(t, ev)?;
            if self.finished {
                break;
            }
        }
        Ok(())
    }

    fn open_round(&mut self, index: u64, now: u64, carried: Vec<StoredUpdate>) {
        let deadline = now + self.cfg.protocol.deadline_ms;
        let digest = self.blobs.put(&model_key(index), self.global.to_container().to_bytes());
        if index >= 2 {
            self.blobs.remove(&model_key(index - 2));
        }
        self.round = RoundState::open(index, deadline, carried);
        self.round_dropped = 0;
        self.model_digest = digest.clone();
        self.log.push(
            now,
            "server",
            EventKind::RoundOpen {
                round: index,
                deadline_ms: deadline,
            },
            Some(digest),
        );
        self.schedule(deadline, Ev::Deadline { round: index });
    }

    fn handle(&mut self, t: u64, ev: Ev) -> Result<()> {
        let p = &self.cfg.protocol;
        match ev {
            Ev::Poll { client, periodic } => {
                if periodic {
                    self.schedule(t + p.poll_interval_ms, ev);
                }
                if client_step(&mut self.clients[client], t, &p.policy).is_some() {
                    self.log.push(
                        t,
                        client_actor(client),
                        EventKind::RtcmSent { client: client as u32 },
                        None,
                    );
                    self.schedule(t + p.rtcm_latency_ms, Ev::RtcmArrive { client });
                }
            }
            Ev::RtcmArrive { client } => self.on_rtcm(t, client),
            Ev::ResponseArrive { client } => self.on_response(t, client)?,
            Ev::UploadArrive { job } => self.on_upload(t, job)?,
            Ev::Deadline { round } => {
                if round == self.round.index && self.round.phase == Phase::Open {
                    self.on_deadline(t)?;
                }
            }
            Ev::AggregationDone { round } => self.on_aggregation_done(t, round)?,
        }
        Ok(())
    }

    fn on_rtcm(&mut self, t: u64, client: usize) {
        let cfg = self.cfg;
        let id = ClientId(client as u32);
        let mut resp = server_handle_rtcm(id, &mut self.round, &cfg.protocol.policy);
        if matches!(resp, RtcmResponse::Aft { .. }) && cfg.faults.p_deny_registration > 0.0 {
            let attempt = self.deny_attempts[client];
            self.deny_attempts[client] += 1;
            let mut rng = rng_for(cfg.seed, Stream::Deny, &[client as u64, attempt]);
            if rng.random::<f64>() < cfg.faults.p_deny_registration {
                self.round.accepted_clients.remove(&id);
                resp = RtcmResponse::Dft(DenyReason::Injected);
            }
        }
        let (granted, reason) = match &resp {
            RtcmResponse::Aft { .. } => (true, None),
            RtcmResponse::Dft(r) => (false, Some(r.as_str().to_string())),
        };
        self.log.push(
            t,
            "server",
            EventKind::RtcmResponse {
                client: client as u32,
                round: self.round.index,
                phase: self.round.phase.tag(),
                granted,
                reason,
            },
            None,
        );
        self.pending_response[client] = Some(resp);
        self.schedule(t + cfg.protocol.response_latency_ms, Ev::ResponseArrive { client });
    }

    fn sampled_count(&self, client: usize, round: u64) -> usize {
        sample_training_set(
            &self.data.clients[client],
            self.pool.as_ref(),
            self.cfg.model.num_classes,
            &self.cfg.augmentation.sampling(),
            derive_seed(self.cfg.seed, Stream::Sampling, &[client as u64, round]),
        )
        .len()
    }

    fn on_response(&mut self, t: u64, client: usize) -> Result<()> {
        let cfg = self.cfg;
        let resp = self.pending_response[client]
            .take()
            .ok_or_else(|| ProtocolError::Invariant(format!("response for client {client} without request")))?;
        let (samples, cost) = match &resp {
            RtcmResponse::Aft { round, .. } => {
                let s = self.sampled_count(client, *round);
                let per = cfg.protocol.train_ms_per_sample * (s * cfg.train.epochs) as f64;
                (s, cfg.protocol.train_base_ms + per.round() as u64)
            }
            RtcmResponse::Dft(_) => (0, 0),
        };
        let decision = client_on_response(&mut self.clients[client], &resp, t, cost, &cfg.protocol.policy);
        let actor = client_actor(client);
        match decision {
            ClientDecision::Denied(_) => {}
            ClientDecision::Decline {
                round,
                remaining_ms,
                cost_ms,
            } => self.log.push(
                t,
                actor,
                EventKind::SttpDecline {
                    client: client as u32,
                    round,
                    remaining_ms,
                    cost_ms,
                },
                None,
            ),
            ClientDecision::Train { round, .. } if samples == 0 => self.log.push(
                t,
                actor,
                EventKind::SttpDecline {
                    client: client as u32,
                    round,
                    remaining_ms: self.round.deadline_ms.saturating_sub(t),
                    cost_ms: cost,
                },
                None,
            ),
            ClientDecision::Train { round, .. } => {
                self.log.push(
                    t,
                    actor.clone(),
                    EventKind::TrainStart {
                        client: client as u32,
                        round,
                        samples,
                    },
                    Some(self.model_digest.clone()),
                );
                let c = client as u64;
                if rng_for(cfg.seed, Stream::Dropout, &[c, round]).random::<f64>() < cfg.faults.p_drop {
                    // Dropped clients never upload, so their training is skipped.
                    self.round_dropped += 1;
                    self.log.push(
                        t,
                        actor,
                        EventKind::Dropout {
                            client: client as u32,
                            round,
                        },
                        None,
                    );
                    return Ok(());
                }
                let [lo, hi] = cfg.faults.upload_delay_ms;
                let delay = rng_for(cfg.seed, Stream::Delay, &[c, round]).random_range(lo..=hi);
                self.jobs.push(Job {
                    client,
                    round,
                    model: Arc::clone(&self.global),
                    result: None,
                });
                self.schedule(
                    t + cost + delay,
                    Ev::UploadArrive {
                        job: self.jobs.len() - 1,
                    },
                );
            }
        }
        Ok(())
    }

    /// Trains every job whose result is still missing. Grouping does not
    /// affect results: each job seeds itself from `(seed, client, round)`.
    fn compute_pending(&mut self) -> Result<()> {
        let todo: Vec<usize> = (0..self.jobs.len())
            .filter(|&j| self.jobs[j].result.is_none())
            .collect();
        if todo.is_empty() {
            return Ok(());
        }
        debug!("training batch of {} jobs", todo.len());
        let work = |j: &usize| train_job(self.cfg, self.data, self.pool.as_ref(), &self.jobs[*j]);
        let results: Vec<Result<GradientUpdate>> = if self.cfg.execution.parallel {
            match &self.thread_pool {
                Some(tp) => tp.install(|| todo.par_iter().map(work).collect()),
                None => todo.par_iter().map(work).collect(),
            }
        } else {
            todo.iter().map(work).collect()
        };
        for (j, r) in todo.into_iter().zip(results) {
            self.jobs[j].result = Some(r?);
            // The snapshot is no longer needed once the update exists.
            self.jobs[j].model = Arc::clone(&self.global);
        }
        Ok(())
    }

    fn on_upload(&mut self, t: u64, job: usize) -> Result<()> {
        if self.jobs[job].result.is_none() {
            self.compute_pending()?;
        }
        let j = &mut self.jobs[job];
        let update = j
            .result
            .take()
            .ok_or_else(|| ProtocolError::Invariant(format!("job {job} has no result")))?;
        let (client, round) = (j.client, j.round);
        let key = update_key(round, ClientId(client as u32));
        let digest = self.blobs.put(&key, update.to_container().to_bytes());
        let stored = StoredUpdate {
            update,
            uploaded_at_ms: t,
            blob_key: key.clone(),
        };
        let deadline = if round == self.round.index {
            self.round.deadline_ms
        } else {
            self.state.rounds.get(&round).map_or(0, |r| r.deadline_ms)
        };
        let res = server_accept_upload(stored, &mut self.round, t);
        if res.is_err() {
            self.blobs.remove(&key);
            self.clients[client].rejections += 1;
        }
        self.log.push(
            t,
            client_actor(client),
            EventKind::Upload {
                client: client as u32,
                round,
                deadline_ms: deadline,
                accepted: res.is_ok(),
                reason: res.err().map(|r| r.as_str().to_string()),
            },
            Some(digest),
        );
        Ok(())
    }

    fn on_deadline(&mut self, t: u64) -> Result<()> {
        let cfg = self.cfg;
        let index = self.round.index;
        self.log.push(
            t,
            "server",
            EventKind::AggregationStart {
                round: index,
                uploaded: self.round.uploaded.len(),
                carried: self.round.carried_over.len(),
            },
            None,
        );
        let mut noise_rng = rng_for(cfg.seed, Stream::ServerNoise, &[index]);
        let privacy = (cfg.privacy.mode == PrivacyMode::UserDp).then_some((&cfg.privacy, &mut noise_rng));
        let mut candidate_eval: Option<std::result::Result<EvalReport, crate::model::ModelError>> = None;
        let mut eval_secs = 0.0;
        let model_cfg = self.global.config;
        let test = &self.data.test;
        let started = Instant::now();
        let out = server_on_deadline(
            &mut self.round,
            &cfg.protocol.policy,
            &self.agg,
            &self.global.params,
            privacy,
            |cand| {
                let t0 = Instant::now();
                let m = ModelParams {
                    config: model_cfg,
                    params: cand.clone(),
                };
                let r = evaluate(&m, test);
                let ok = r.as_ref().is_ok_and(|e| e.loss.is_finite());
                candidate_eval = Some(r);
                eval_secs = t0.elapsed().as_secs_f64();
                ok
            },
        )?;
        let measured_ms = (started.elapsed().as_secs_f64() - eval_secs) * 1e3;
        if let Some(Err(e)) = candidate_eval {
            return Err(e.into());
        }
        let agg_ms = if cfg.execution.wall_clock {
            measured_ms
        } else {
            (cfg.protocol.agg_base_ms + cfg.protocol.agg_per_update_ms * out.inputs.len() as u64) as f64
        };
        self.log.push(
            t,
            "server",
            EventKind::Aggregate {
                round: index,
                inputs: out.inputs.clone(),
                outcome: out.outcome_tag(),
            },
            None,
        );
        let next = match (out.next, candidate_eval) {
            (Some((params, state)), Some(Ok(eval))) => Some((
                ModelParams {
                    config: model_cfg,
                    params,
                },
                state,
                eval,
            )),
            _ => None,
        };
        self.pending_deadline = Some(PendingAggregation {
            outcome: out.outcome,
            next,
            carry: out.carry,
            agg_ms,
        });
        self.schedule(t + agg_ms.ceil() as u64, Ev::AggregationDone { round: index });
        Ok(())
    }

    fn on_aggregation_done(&mut self, t: u64, round: u64) -> Result<()> {
        let cfg = self.cfg;
        let pending = self
            .pending_deadline
            .take()
            .ok_or_else(|| ProtocolError::Invariant(format!("aggregation of round {round} was never started")))?;
        self.round.phase = Phase::Closed;
        let outcome_tag = match pending.outcome {
            RoundOutcome::Accepted => super::events::OutcomeTag::Accepted,
            _ => super::events::OutcomeTag::Aborted,
        };
        let mut carry_refs: Vec<UpdateRef> = Vec::new();
        if let Some((model, state, eval)) = pending.next {
            for u in self.round.carried_over.iter().chain(&self.round.uploaded) {
                self.blobs.remove(&u.blob_key);
            }
            self.global = Arc::new(model);
            self.agg = state;
            self.current_eval = eval;
        } else {
            carry_refs = pending.carry.iter().map(StoredUpdate::reference).collect();
        }
        self.log.push(
            t,
            "server",
            EventKind::AggregationEnd {
                round,
                outcome: outcome_tag,
            },
            None,
        );
        self.state.rounds.insert(
            round,
            RoundRecord {
                deadline_ms: self.round.deadline_ms,
                accepted_clients: self.round.accepted_clients.len(),
                outcome: outcome_tag,
            },
        );
        self.metrics.push(RoundMetrics {
            round,
            accuracy: self.current_eval.accuracy,
            loss: self.current_eval.loss,
            n_accepted: self.round.accepted_clients.len(),
            n_uploaded: self.round.uploaded.len(),
            n_dropped: self.round_dropped,
            n_carried: self.round.carried_over.len(),
            agg_ms: pending.agg_ms,
            outcome: pending.outcome.as_str().to_string(),
        });
        info!(
            "round {round}: {} acc={:.4} loss={:.4} uploads={}",
            pending.outcome.as_str(),
            self.current_eval.accuracy,
            self.current_eval.loss,
            self.round.uploaded.len()
        );
        if !carry_refs.is_empty() {
            self.log.push(
                t,
                "server",
                EventKind::Carry {
                    into_round: round + 1,
                    updates: carry_refs.clone(),
                },
                None,
            );
        }
        if !should_start_new_round(round, &cfg.protocol.policy, Some(self.current_eval.accuracy)) {
            self.log.push(
                t,
                "server",
                EventKind::RunEnd {
                    rounds: round + 1,
                    pending_carried: carry_refs,
                },
                None,
            );
            self.finished = true;
            return Ok(());
        }
        self.open_round(round + 1, t, pending.carry);
        if pending.outcome == RoundOutcome::Accepted && cfg.protocol.notify {
            let mut rng = rng_for(cfg.seed, Stream::Notify, &[round + 1]);
            for (id, delivered) in self.pubsub.publish(cfg.faults.p_notify_loss, &mut rng) {
                self.log.push(
                    t,
                    "cloud",
                    EventKind::Notify {
                        client: id.0,
                        round: round + 1,
                        delivered,
                    },
                    None,
                );
                if delivered {
                    let c = id.0 as usize;
                    client_on_notify(&mut self.clients[c], round + 1);
                    self.schedule(
                        t,
                        Ev::Poll {
                            client: c,
                            periodic: false,
                        },
                    );
                }
            }
        }
        Ok(())
    }
}

fn train_job(cfg: &ExperimentConfig, data: &SimData, pool: Option<&AugmentPool>, job: &Job) -> Result<GradientUpdate> {
    let c = job.client as u64;
    let classes = cfg.model.num_classes;
    let set = sample_training_set(
        &data.clients[job.client],
        pool,
        classes,
        &cfg.augmentation.sampling(),
        derive_seed(cfg.seed, Stream::Sampling, &[c, job.round]),
    );
    let train = crate::model::TrainConfig {
        seed: derive_seed(cfg.seed, Stream::Training, &[c, job.round]),
        ..cfg.train
    };
    let local = if cfg.privacy.mode == PrivacyMode::SampleLdp {
        let mut rng = rng_for(cfg.seed, Stream::Privacy, &[c, job.round]);
        let noisy = set
            .iter()
            .map(|s| perturb_segment(s, &cfg.privacy, classes, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let refs: Vec<&DataSegment> = noisy.iter().collect();
        local_train(&job.model, &refs, &train)?
    } else {
        local_train(&job.model, &set, &train)?
    };
    Ok(local.into_update(ClientId(job.client as u32), job.round))
}
