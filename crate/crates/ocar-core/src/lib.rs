//! Online continual learning optimization laboratory.
//!
//! Implements OCAR (K-FAC preconditioned replay with stability constraints)
//! next to ER, online EWC, and NGD baselines, plus the streams, continual
//! metrics, and loss-landscape trajectory tooling needed to study them at
//! desk scale.

pub mod config;
pub mod data;
pub mod hash;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod metrics;
pub mod replay;
pub mod runner;
pub mod stats;
pub mod strategies;
pub mod streams;
pub mod trajectory;

pub use config::ExperimentConfig;
pub use data::{Example, Target};
pub use kfac::KfacState;
pub use linalg::{Matrix, Vector};
pub use metrics::AccuracyMatrix;
pub use nn::Network;
pub use replay::ReplayBuffer;
pub use strategies::{HyperParams, Strategy};
pub use streams::TaskSpec;
