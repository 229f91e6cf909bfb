//! Causally structured diffusion for closed-loop, safety-critical traffic
//! scenario generation.
//!
//! The pipeline: a masked-attention scene encoder is trained as a DDPM
//! denoiser over per-agent actions ([`diffusion`], [`denoiser`]). At sampling
//! time a decision causal graph built from time-to-collision structure and
//! attention ([`causal`]) selects which agents receive classifier-free
//! extrapolation and cost-gradient steering ([`guidance`]); everything else
//! follows the imitation prediction. [`closedloop`] replans in a feedback loop
//! and [`metrics`] scores the results.

pub mod causal;
pub mod closedloop;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod dynamics;
pub mod guidance;
pub mod lanes;
pub mod metrics;
pub mod scenario;
pub mod sdf;

pub use scenario::{Action, AgentRecord, AgentState, MapModel, Scene, Trajectory};
