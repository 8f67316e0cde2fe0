//! The asynchronous round protocol between clients and the server, run over
//! an in-process cloud on a virtual clock.

pub mod client;
pub mod cloud;
pub mod events;
pub mod server;
pub mod sim;

use thiserror::Error;

pub use client::{client_on_response, client_step, ClientDecision, ClientState, DeviceFlags, DeviceTimeline};
pub use events::{check_events, EventKind, EventLog, EventRecord, Violation, ViolationKind};
pub use server::{server_accept_upload, server_handle_rtcm, server_on_deadline, RoundState, RtcmResponse};
pub use sim::{load_data, run_simulation, run_with_data, run_with_options, RunResult, SimData, SimOptions};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Aggregator(#[from] crate::aggregators::AggregatorError),
    #[error(transparent)]
    Privacy(#[from] crate::privacy::PrivacyError),
    #[error(transparent)]
    Augment(#[from] crate::augmentation::AugmentError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("dataset: {0}")]
    Data(String),
    #[error("protocol invariant broken: {0}")]
    Invariant(String),
}
