//! Feature-agent distillation toolkit.
//!
//! A score-based diffusion model (the feature agent) learns the distribution
//! of a teacher network's latent features and calibrates noisy student
//! features with a reverse variance-preserving SDE. The crate contains the
//! numerics to train every network involved, the noise machinery, the
//! distillation losses, a synthetic keypoint task and the experiment
//! pipeline behind the `agentpose` binary.

pub mod autoencoder;
pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod score_agent;
pub mod synthetic_pose;
pub mod vpsde;

pub use error::{Error, Result};
