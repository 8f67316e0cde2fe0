//! Federated learning simulator for on-device human activity recognition.

pub mod aggregators;
pub mod augmentation;
pub mod config;
pub mod container;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod segment;
pub mod synth;
pub mod tensor;
