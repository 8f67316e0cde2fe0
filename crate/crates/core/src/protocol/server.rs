//! Server side of the round protocol: admission (A/DFT), upload acceptance,
//! and the deadline handler that aggregates or aborts.

use std::collections::BTreeSet;

use crate::aggregators::{mean_delta, AggregatorState};
use crate::config::PolicyConfig;
use crate::model::{ClientId, GradientUpdate};
use crate::params::ParamSet;
use crate::privacy::{user_dp_mean, PrivacyMode, PrivacySpec};
use crate::rng::SimRng;

use super::events::{OutcomeTag, PhaseTag, UpdateRef};
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Open,
    Aggregating,
    Closed,
}

impl Phase {
    pub fn tag(self) -> PhaseTag {
        match self {
            Self::Open => PhaseTag::Open,
            Self::Aggregating => PhaseTag::Aggregating,
            Self::Closed => PhaseTag::Closed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    Pending,
    Accepted,
    Aborted,
}

impl RoundOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Accepted => "accepted",
            Self::Aborted => "aborted",
        }
    }
}

/// An update the server has taken custody of.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredUpdate {
    pub update: GradientUpdate,
    pub uploaded_at_ms: u64,
    pub blob_key: String,
}

impl StoredUpdate {
    pub fn reference(&self) -> UpdateRef {
        UpdateRef {
            client: self.update.client_id.0,
            round: self.update.round,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub index: u64,
    pub deadline_ms: u64,
    pub phase: Phase,
    pub accepted_clients: BTreeSet<ClientId>,
    pub uploaded: Vec<StoredUpdate>,
    pub carried_over: Vec<StoredUpdate>,
    pub outcome: RoundOutcome,
}

impl RoundState {
    pub fn open(index: u64, deadline_ms: u64, carried_over: Vec<StoredUpdate>) -> Self {
        Self {
            index,
            deadline_ms,
            phase: Phase::Open,
            accepted_clients: BTreeSet::new(),
            uploaded: Vec::new(),
            carried_over,
            outcome: RoundOutcome::Pending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    NotOpen,
    NotAllowlisted,
    Capacity,
    AlreadyAccepted,
    /// The client still has an update carried over from an aborted round;
    /// admitting it again would put two of its updates in one aggregation.
    PendingCarried,
    Injected,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NotOpen => "not_open",
            Self::NotAllowlisted => "not_allowlisted",
            Self::Capacity => "capacity",
            Self::AlreadyAccepted => "already_accepted",
            Self::PendingCarried => "pending_carried",
            Self::Injected => "injected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RtcmResponse {
    Aft {
        round: u64,
        deadline_ms: u64,
        download: String,
        upload: String,
    },
    Dft(DenyReason),
}

pub fn model_key(round: u64) -> String {
    format!("models/round-{round}")
}

pub fn update_key(round: u64, client: ClientId) -> String {
    format!("updates/round-{round}/client-{client}")
}

/// A/DFT policy. Grants record the client as accepted for the round.
pub fn server_handle_rtcm(client: ClientId, round: &mut RoundState, policy: &PolicyConfig) -> RtcmResponse {
    let deny = if round.phase != Phase::Open {
        Some(DenyReason::NotOpen)
    } else if policy.adft_allowlist.as_ref().is_some_and(|a| !a.contains(&client.0)) {
        Some(DenyReason::NotAllowlisted)
    } else if round.accepted_clients.contains(&client) {
        Some(DenyReason::AlreadyAccepted)
    } else if policy
        .adft_max_accepted
        .is_some_and(|m| round.accepted_clients.len() >= m)
    {
        Some(DenyReason::Capacity)
    } else if round.carried_over.iter().any(|u| u.update.client_id == client) {
        Some(DenyReason::PendingCarried)
    } else {
        None
    };
    match deny {
        Some(r) => RtcmResponse::Dft(r),
        None => {
            round.accepted_clients.insert(client);
            RtcmResponse::Aft {
                round: round.index,
                deadline_ms: round.deadline_ms,
                download: model_key(round.index),
                upload: update_key(round.index, client),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UploadRejection {
    Closed,
    WrongRound,
    NotAccepted,
    Late,
    Duplicate,
    Malformed,
}

impl UploadRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Closed => "closed",
            Self::WrongRound => "wrong_round",
            Self::NotAccepted => "not_accepted",
            Self::Late => "late",
            Self::Duplicate => "duplicate",
            Self::Malformed => "malformed",
        }
    }
}

/// Accepts iff the round is open, the update targets it, its author was
/// admitted, `now ≤ deadline`, and this is the author's first upload.
pub fn server_accept_upload(up: StoredUpdate, round: &mut RoundState, now_ms: u64) -> Result<(), UploadRejection> {
    let client = up.update.client_id;
    if up.update.round != round.index {
        return Err(UploadRejection::WrongRound);
    }
    if now_ms > round.deadline_ms {
        return Err(UploadRejection::Late);
    }
    if round.phase != Phase::Open {
        return Err(UploadRejection::Closed);
    }
    if !round.accepted_clients.contains(&client) {
        return Err(UploadRejection::NotAccepted);
    }
    if round.uploaded.iter().any(|u| u.update.client_id == client) {
        return Err(UploadRejection::Duplicate);
    }
    if !up.update.deltas.is_finite() {
        return Err(UploadRejection::Malformed);
    }
    round.uploaded.push(up);
    Ok(())
}

/// Result of closing a round at its deadline.
#[derive(Debug, Clone)]
pub struct DeadlineResult {
    pub outcome: RoundOutcome,
    /// `U`: carried updates first, then this round's uploads in arrival order.
    pub inputs: Vec<UpdateRef>,
    /// Set when the round was accepted.
    pub next: Option<(ParamSet, AggregatorState)>,
    /// Updates to carry into the next round (empty on acceptance).
    pub carry: Vec<StoredUpdate>,
}

impl DeadlineResult {
    pub fn outcome_tag(&self) -> OutcomeTag {
        match self.outcome {
            RoundOutcome::Accepted => OutcomeTag::Accepted,
            _ => OutcomeTag::Aborted,
        }
    }
}

/// Moves the round to `Aggregating` and evaluates SFAp on
/// `U = carried ∪ uploaded`. When enough updates exist the candidate model
/// is computed and `is_acceptable` decides between accepting it and
/// aborting; either kind of abort carries all of `U` forward.
///
/// Carried updates are weighted by the staleness rule using their age in
/// rounds. Under user-level DP the clipped, noised mean replaces the plain
/// mean.
pub fn server_on_deadline(
    round: &mut RoundState,
    policy: &PolicyConfig,
    agg: &AggregatorState,
    theta: &ParamSet,
    privacy: Option<(&PrivacySpec, &mut SimRng)>,
    is_acceptable: impl FnOnce(&ParamSet) -> bool,
) -> Result<DeadlineResult, ProtocolError> {
    if round.phase != Phase::Open {
        return Err(ProtocolError::Invariant(format!(
            "deadline handler called for round {} in phase {:?}",
            round.index, round.phase
        )));
    }
    round.phase = Phase::Aggregating;
    let all: Vec<&StoredUpdate> = round.carried_over.iter().chain(&round.uploaded).collect();
    let inputs: Vec<UpdateRef> = all.iter().map(|u| u.reference()).collect();
    let abort = |round: &mut RoundState| {
        round.outcome = RoundOutcome::Aborted;
        let carry = round.carried_over.iter().chain(&round.uploaded).cloned().collect();
        Ok(DeadlineResult {
            outcome: RoundOutcome::Aborted,
            inputs: inputs.clone(),
            next: None,
            carry,
        })
    };
    if all.is_empty() || all.len() < policy.sfap_min_updates {
        return abort(round);
    }
    let deltas: Vec<&ParamSet> = all.iter().map(|u| &u.update.deltas).collect();
    let mean = match privacy {
        Some((spec, rng)) if spec.mode == PrivacyMode::UserDp => user_dp_mean(&deltas, spec, rng)?,
        _ => {
            let weights: Vec<f64> = all
                .iter()
                .map(|u| agg.config.staleness.weight(round.index - u.update.round))
                .collect();
            mean_delta(&deltas, Some(&weights))?
        }
    };
    let (candidate, state) = agg.apply(theta, &mean)?;
    if !candidate.is_finite() || !is_acceptable(&candidate) {
        return abort(round);
    }
    round.outcome = RoundOutcome::Accepted;
    Ok(DeadlineResult {
        outcome: RoundOutcome::Accepted,
        inputs,
        next: Some((candidate, state)),
        carry: Vec::new(),
    })
}

/// Start-New-Round policy: continue while rounds remain and the target
/// accuracy (if any) has not been reached.
pub fn should_start_new_round(completed_round: u64, policy: &PolicyConfig, accuracy: Option<f64>) -> bool {
    if completed_round + 1 >= policy.max_rounds {
        return false;
    }
    match (policy.target_accuracy, accuracy) {
        (Some(target), Some(acc)) => acc < target,
        _ => true,
    }
}
