//! Client side of the round protocol: the RTC policy gate and the STT
//! decision taken when a grant arrives.

use rand::Rng;

use crate::config::{DeviceConfig, PolicyConfig};
use crate::model::ClientId;
use crate::rng::{rng_for, Stream};

use super::server::{DenyReason, RtcmResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceFlags {
    pub charging: bool,
    pub connected: bool,
}

/// How a client's charging/connectivity flags evolve over simulated time.
#[derive(Debug, Clone, PartialEq)]
pub enum DeviceTimeline {
    Fixed(DeviceFlags),
    /// Flags redrawn independently every `period_ms`, seeded per client and
    /// period so lookups are order-independent.
    Random {
        seed: u64,
        config: DeviceConfig,
    },
    /// `(from_ms, flags)` steps, sorted by time. Before the first step the
    /// device is unavailable.
    Scripted(Vec<(u64, DeviceFlags)>),
}

impl DeviceTimeline {
    pub fn flags_at(&self, client: ClientId, now_ms: u64) -> DeviceFlags {
        match self {
            Self::Fixed(f) => *f,
            Self::Random { seed, config } => {
                let period = now_ms / config.period_ms.max(1);
                let mut rng = rng_for(*seed, Stream::Devices, &[client.0 as u64, period]);
                DeviceFlags {
                    charging: rng.random::<f64>() < config.p_charging,
                    connected: rng.random::<f64>() < config.p_connected,
                }
            }
            Self::Scripted(steps) => steps
                .iter()
                .take_while(|(t, _)| *t <= now_ms)
                .last()
                .map(|(_, f)| *f)
                .unwrap_or(DeviceFlags {
                    charging: false,
                    connected: false,
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: ClientId,
    pub timeline: DeviceTimeline,
    /// Highest round index learned from a grant or a notification.
    pub last_round_seen: Option<u64>,
    /// Deadline of the most recent grant; the client stays quiet until it
    /// passes, which enforces at most one training per round.
    pub granted_until_ms: Option<u64>,
    pub awaiting_response: bool,
    pub rejections: u64,
}

impl ClientState {
    pub fn new(id: ClientId, timeline: DeviceTimeline) -> Self {
        Self {
            id,
            timeline,
            last_round_seen: None,
            granted_until_ms: None,
            awaiting_response: false,
            rejections: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientAction {
    SendRtcm,
}

/// RTC policy. Emits an RTCm when the device flags satisfy the policy and
/// the client is neither waiting on a response nor inside a granted round.
pub fn client_step(client: &mut ClientState, now_ms: u64, policy: &PolicyConfig) -> Option<ClientAction> {
    if client.awaiting_response || client.granted_until_ms.is_some_and(|d| now_ms <= d) {
        return None;
    }
    let f = client.timeline.flags_at(client.id, now_ms);
    if (policy.rtc_requires_charging && !f.charging) || (policy.rtc_requires_connected && !f.connected) {
        return None;
    }
    client.awaiting_response = true;
    Some(ClientAction::SendRtcm)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientDecision {
    Train {
        round: u64,
        deadline_ms: u64,
    },
    Decline {
        round: u64,
        remaining_ms: u64,
        cost_ms: u64,
    },
    Denied(DenyReason),
}

/// STT policy: train only if the remaining time covers both the configured
/// minimum and the estimated training cost.
pub fn client_on_response(
    client: &mut ClientState,
    resp: &RtcmResponse,
    now_ms: u64,
    cost_ms: u64,
    policy: &PolicyConfig,
) -> ClientDecision {
    client.awaiting_response = false;
    match *resp {
        RtcmResponse::Dft(r) => ClientDecision::Denied(r),
        RtcmResponse::Aft { round, deadline_ms, .. } => {
            client.last_round_seen = Some(client.last_round_seen.map_or(round, |r| r.max(round)));
            client.granted_until_ms = Some(deadline_ms);
            let remaining = deadline_ms.saturating_sub(now_ms);
            if remaining < policy.sttp_min_remaining_ms || remaining < cost_ms {
                ClientDecision::Decline {
                    round,
                    remaining_ms: remaining,
                    cost_ms,
                }
            } else {
                ClientDecision::Train { round, deadline_ms }
            }
        }
    }
}

/// Records a server notification about a newly published model.
pub fn client_on_notify(client: &mut ClientState, round: u64) {
    client.last_round_seen = Some(client.last_round_seen.map_or(round, |r| r.max(round)));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(charging: bool, connected: bool) -> ClientState {
        ClientState::new(ClientId(0), DeviceTimeline::Fixed(DeviceFlags { charging, connected }))
    }

    fn aft(deadline_ms: u64) -> RtcmResponse {
        RtcmResponse::Aft {
            round: 0,
            deadline_ms,
            download: String::new(),
            upload: String::new(),
        }
    }

    #[test]
    fn rtc_policy() {
        let p = PolicyConfig::default();
        assert_eq!(client_step(&mut fixed(true, true), 0, &p), Some(ClientAction::SendRtcm));
        assert_eq!(client_step(&mut fixed(false, true), 0, &p), None);
        let mut c = fixed(true, true);
        client_step(&mut c, 0, &p);
        assert_eq!(client_step(&mut c, 1, &p), None, "awaiting response");
    }

    #[test]
    fn sttp_declines_when_cost_exceeds_remaining() {
        let p = PolicyConfig {
            sttp_min_remaining_ms: 0,
            ..PolicyConfig::default()
        };
        let mut c = fixed(true, true);
        let d = client_on_response(&mut c, &aft(100_000), 99_000, 60_000, &p);
        assert_eq!(
            d,
            ClientDecision::Decline {
                round: 0,
                remaining_ms: 1000,
                cost_ms: 60_000
            }
        );
        let d = client_on_response(&mut c, &aft(100_000), 0, 60_000, &p);
        assert_eq!(
            d,
            ClientDecision::Train {
                round: 0,
                deadline_ms: 100_000
            }
        );
        assert_eq!(client_step(&mut c, 50_000, &p), None, "inside granted round");
        assert_eq!(client_step(&mut c, 100_001, &p), Some(ClientAction::SendRtcm));
    }

    #[test]
    fn scripted_and_random_timelines() {
        let on = DeviceFlags {
            charging: true,
            connected: true,
        };
        let off = DeviceFlags {
            charging: false,
            connected: true,
        };
        let t = DeviceTimeline::Scripted(vec![(10, on), (20, off)]);
        assert!(!t.flags_at(ClientId(0), 5).charging);
        assert_eq!(t.flags_at(ClientId(0), 15), on);
        assert_eq!(t.flags_at(ClientId(0), 25), off);

        let r = DeviceTimeline::Random {
            seed: 3,
            config: DeviceConfig::default(),
        };
        let period = DeviceConfig::default().period_ms;
        assert_eq!(r.flags_at(ClientId(4), 1), r.flags_at(ClientId(4), period - 1));
        let n = (0..400u64)
            .filter(|&i| r.flags_at(ClientId(1), i * period).charging)
            .count();
        assert!((150..250).contains(&n), "{n}");
    }
}
