//! The model's input unit: one `[3, 100]` window of accelerometer readings.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const AXES: usize = 3;
pub const WINDOW: usize = 100;

/// Where a segment's raw points came from: a stream (one client's log, or a
/// synthetic user) and the inclusive timestamp span of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub stream: u64,
    pub start_ms: i64,
    pub end_ms: i64,
}

impl Origin {
    pub fn overlaps(&self, other: &Origin) -> bool {
        self.stream == other.stream && self.start_ms <= other.end_ms && other.start_ms <= self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSegment {
    /// `[3, 100]`, axis-major.
    pub values: Tensor,
    pub label: usize,
    pub source_rate_hz: u32,
    pub origin: Option<Origin>,
}

impl DataSegment {
    pub fn new(values: Tensor, label: usize, source_rate_hz: u32) -> Self {
        Self {
            values,
            label,
            source_rate_hz,
            origin: None,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = Some(origin);
        self
    }
}
