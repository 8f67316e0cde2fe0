//! In-process stand-ins for the cloud services: a content-addressed blob
//! store, a record of closed rounds, and a lossy pub/sub channel.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::model::ClientId;
use crate::rng::SimRng;

use super::events::OutcomeTag;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Default, Clone)]
pub struct BlobStore {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl BlobStore {
    /// Stores `bytes` under `key`, replacing any previous value, and
    /// returns the content digest.
    pub fn put(&mut self, key: &str, bytes: Vec<u8>) -> String {
        let d = sha256_hex(&bytes);
        self.blobs.insert(key.to_string(), bytes);
        d
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.blobs.get(key).map(Vec::as_slice)
    }

    pub fn remove(&mut self, key: &str) -> Option<Vec<u8>> {
        self.blobs.remove(key)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub deadline_ms: u64,
    pub accepted_clients: usize,
    pub outcome: OutcomeTag,
}

/// Closed rounds by index.
#[derive(Debug, Default, Clone)]
pub struct StateStore {
    pub rounds: BTreeMap<u64, RoundRecord>,
}

/// At-most-once delivery: each subscriber independently loses a message
/// with probability `p_loss`.
#[derive(Debug, Default, Clone)]
pub struct PubSub {
    subscribers: BTreeSet<ClientId>,
}

impl PubSub {
    pub fn subscribe(&mut self, c: ClientId) {
        self.subscribers.insert(c);
    }

    /// Returns `(subscriber, delivered)` in subscriber order.
    pub fn publish(&self, p_loss: f64, rng: &mut SimRng) -> Vec<(ClientId, bool)> {
        self.subscribers
            .iter()
            .map(|&c| (c, rng.random::<f64>() >= p_loss))
            .collect()
    }
}
