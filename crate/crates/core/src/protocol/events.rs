//! Structured event log and the offline checker of protocol safety
//! properties. The checker reads only the log, so it also audits logs
//! written by earlier runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// An update identified by its author and the round it was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UpdateRef {
    pub client: u32,
    pub round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Open,
    Aggregating,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTag {
    Accepted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    RunStart {
        clients: usize,
        privacy_mode: String,
    },
    PoolDelivered {
        client: u32,
    },
    RoundOpen {
        round: u64,
        deadline_ms: u64,
    },
    RtcmSent {
        client: u32,
    },
    RtcmResponse {
        client: u32,
        round: u64,
        phase: PhaseTag,
        granted: bool,
        reason: Option<String>,
    },
    SttpDecline {
        client: u32,
        round: u64,
        remaining_ms: u64,
        cost_ms: u64,
    },
    TrainStart {
        client: u32,
        round: u64,
        samples: usize,
    },
    Dropout {
        client: u32,
        round: u64,
    },
    Upload {
        client: u32,
        round: u64,
        deadline_ms: u64,
        accepted: bool,
        reason: Option<String>,
    },
    AggregationStart {
        round: u64,
        uploaded: usize,
        carried: usize,
    },
    /// The input set `U` considered at a deadline, whether or not it was
    /// applied.
    Aggregate {
        round: u64,
        inputs: Vec<UpdateRef>,
        outcome: OutcomeTag,
    },
    Carry {
        into_round: u64,
        updates: Vec<UpdateRef>,
    },
    AggregationEnd {
        round: u64,
        outcome: OutcomeTag,
    },
    Notify {
        client: u32,
        round: u64,
        delivered: bool,
    },
    RunEnd {
        rounds: u64,
        pending_carried: Vec<UpdateRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub t_ms: u64,
    pub actor: String,
    #[serde(flatten)]
    pub event: EventKind,
    /// SHA-256 of the payload the event refers to (model, update, pool).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub digest: Option<String>,
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

impl EventLog {
    pub fn push(&mut self, t_ms: u64, actor: impl Into<String>, event: EventKind, digest: Option<String>) {
        let seq = self.records.len() as u64;
        self.records.push(EventRecord {
            seq,
            t_ms,
            actor: actor.into(),
            event,
            digest,
        });
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, serde_json::Error> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    TimeWentBackwards,
    LateUploadAccepted,
    UnacceptedUpdateAggregated,
    DuplicateClientInAggregation,
    RegistrationGrantedWhileAggregating,
    CarriedUpdateLost,
    CarriedUpdateConsumedTwice,
    PendingMismatchAtEnd,
    RoundIndexNotIncreasing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub seq: u64,
    pub detail: String,
}

/// Scans a log for violations of the protocol's safety properties:
///
/// * an accepted upload arrived at or before its round's deadline;
/// * every aggregated update was an accepted upload;
/// * no client appears twice in one aggregation input set;
/// * no registration is granted between aggregation start and end;
/// * every carried update is in the next input set, is consumed by at most
///   one accepted aggregation, and the final pending set matches;
/// * round indices strictly increase and time never goes backwards.
pub fn check_events(records: &[EventRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |kind, seq, detail: String| out.push(Violation { kind, seq, detail });
    let mut last_t = 0;
    let mut last_round: Option<u64> = None;
    let mut deadlines: BTreeMap<u64, u64> = BTreeMap::new();
    let mut accepted: BTreeSet<UpdateRef> = BTreeSet::new();
    let mut consumed: BTreeSet<UpdateRef> = BTreeSet::new();
    let mut pending: BTreeSet<UpdateRef> = BTreeSet::new();
    let mut aggregating = false;
    for r in records {
        if r.t_ms < last_t {
            flag(
                ViolationKind::TimeWentBackwards,
                r.seq,
                format!("{} < {last_t}", r.t_ms),
            );
        }
        last_t = r.t_ms;
        match &r.event {
            EventKind::RoundOpen { round, deadline_ms } => {
                if last_round.is_some_and(|p| *round <= p) {
                    flag(
                        ViolationKind::RoundIndexNotIncreasing,
                        r.seq,
                        format!("round {round} after {}", last_round.unwrap_or(0)),
                    );
                }
                last_round = Some(*round);
                deadlines.insert(*round, *deadline_ms);
            }
            EventKind::RtcmResponse { granted, client, .. } => {
                if aggregating && *granted {
                    flag(
                        ViolationKind::RegistrationGrantedWhileAggregating,
                        r.seq,
                        format!("client {client}"),
                    );
                }
            }
            EventKind::Upload {
                client,
                round,
                accepted: true,
                ..
            } => {
                let on_time = deadlines.get(round).is_some_and(|d| r.t_ms <= *d);
                if !on_time {
                    flag(
                        ViolationKind::LateUploadAccepted,
                        r.seq,
                        format!("client {client} round {round} at {}", r.t_ms),
                    );
                }
                accepted.insert(UpdateRef {
                    client: *client,
                    round: *round,
                });
            }
            EventKind::AggregationStart { .. } => aggregating = true,
            EventKind::AggregationEnd { .. } => aggregating = false,
            EventKind::Aggregate { round, inputs, outcome } => {
                let mut clients = BTreeSet::new();
                for u in inputs {
                    if !clients.insert(u.client) {
                        flag(
                            ViolationKind::DuplicateClientInAggregation,
                            r.seq,
                            format!("client {} in round {round}", u.client),
                        );
                    }
                    if !accepted.contains(u) {
                        flag(
                            ViolationKind::UnacceptedUpdateAggregated,
                            r.seq,
                            format!("{u:?} in round {round}"),
                        );
                    }
                }
                let input_set: BTreeSet<UpdateRef> = inputs.iter().copied().collect();
                for p in &pending {
                    if !input_set.contains(p) {
                        flag(
                            ViolationKind::CarriedUpdateLost,
                            r.seq,
                            format!("{p:?} missing in round {round}"),
                        );
                    }
                }
                pending.clear();
                if *outcome == OutcomeTag::Accepted {
                    for u in inputs {
                        if !consumed.insert(*u) {
                            flag(ViolationKind::CarriedUpdateConsumedTwice, r.seq, format!("{u:?}"));
                        }
                    }
                }
            }
            EventKind::Carry { updates, .. } => {
                pending = updates.iter().copied().collect();
            }
            EventKind::RunEnd { pending_carried, .. } => {
                let reported: BTreeSet<UpdateRef> = pending_carried.iter().copied().collect();
                if reported != pending {
                    flag(
                        ViolationKind::PendingMismatchAtEnd,
                        r.seq,
                        format!("log has {} pending, run reported {}", pending.len(), reported.len()),
                    );
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64, t_ms: u64, event: EventKind) -> EventRecord {
        EventRecord {
            seq,
            t_ms,
            actor: "server".into(),
            event,
            digest: None,
        }
    }

    fn upload(seq: u64, t: u64, client: u32, round: u64) -> EventRecord {
        rec(
            seq,
            t,
            EventKind::Upload {
                client,
                round,
                deadline_ms: 100,
                accepted: true,
                reason: None,
            },
        )
    }

    #[test]
    fn clean_log_passes_and_round_trips() {
        let u = UpdateRef { client: 1, round: 0 };
        let log = vec![
            rec(
                0,
                0,
                EventKind::RoundOpen {
                    round: 0,
                    deadline_ms: 100,
                },
            ),
            upload(1, 50, 1, 0),
            rec(
                2,
                100,
                EventKind::AggregationStart {
                    round: 0,
                    uploaded: 1,
                    carried: 0,
                },
            ),
            rec(
                3,
                100,
                EventKind::Aggregate {
                    round: 0,
                    inputs: vec![u],
                    outcome: OutcomeTag::Aborted,
                },
            ),
            rec(
                4,
                100,
                EventKind::Carry {
                    into_round: 1,
                    updates: vec![u],
                },
            ),
            rec(
                5,
                110,
                EventKind::AggregationEnd {
                    round: 0,
                    outcome: OutcomeTag::Aborted,
                },
            ),
            rec(
                6,
                110,
                EventKind::RunEnd {
                    rounds: 1,
                    pending_carried: vec![u],
                },
            ),
        ];
        assert!(check_events(&log).is_empty());
        let l = EventLog { records: log };
        let back = EventLog::read_jsonl(&l.to_jsonl()[..]).unwrap();
        assert_eq!(back.records, l.records);
    }

    #[test]
    fn detects_each_violation() {
        let u = UpdateRef { client: 1, round: 0 };
        let log = vec![
            rec(
                0,
                0,
                EventKind::RoundOpen {
                    round: 0,
                    deadline_ms: 100,
                },
            ),
            upload(1, 150, 1, 0),
            rec(
                2,
                150,
                EventKind::AggregationStart {
                    round: 0,
                    uploaded: 1,
                    carried: 0,
                },
            ),
            rec(
                3,
                150,
                EventKind::RtcmResponse {
                    client: 2,
                    round: 0,
                    phase: PhaseTag::Aggregating,
                    granted: true,
                    reason: None,
                },
            ),
            rec(
                4,
                150,
                EventKind::Aggregate {
                    round: 0,
                    inputs: vec![u, u, UpdateRef { client: 9, round: 0 }],
                    outcome: OutcomeTag::Accepted,
                },
            ),
            rec(
                5,
                140,
                EventKind::RoundOpen {
                    round: 0,
                    deadline_ms: 200,
                },
            ),
        ];
        let kinds: BTreeSet<ViolationKind> = check_events(&log).into_iter().map(|v| v.kind).collect();
        for k in [
            ViolationKind::LateUploadAccepted,
            ViolationKind::RegistrationGrantedWhileAggregating,
            ViolationKind::DuplicateClientInAggregation,
            ViolationKind::UnacceptedUpdateAggregated,
            ViolationKind::CarriedUpdateConsumedTwice,
            ViolationKind::RoundIndexNotIncreasing,
            ViolationKind::TimeWentBackwards,
        ] {
            assert!(kinds.contains(&k), "missing {k:?}");
        }
    }

    #[test]
    fn detects_lost_carry() {
        let u = UpdateRef { client: 1, round: 0 };
        let log = vec![
            rec(
                0,
                0,
                EventKind::RoundOpen {
                    round: 0,
                    deadline_ms: 100,
                },
            ),
            upload(1, 50, 1, 0),
            rec(
                2,
                100,
                EventKind::Carry {
                    into_round: 1,
                    updates: vec![u],
                },
            ),
            rec(
                3,
                110,
                EventKind::RoundOpen {
                    round: 1,
                    deadline_ms: 200,
                },
            ),
            rec(
                4,
                200,
                EventKind::Aggregate {
                    round: 1,
                    inputs: vec![],
                    outcome: OutcomeTag::Aborted,
                },
            ),
        ];
        let v = check_events(&log);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::CarriedUpdateLost);
    }
}
