//! Desk-scale latent video diffusion fine-tuning with localized semantic
//! feature alignment, plus the synthetic data and evaluation stack around it.

pub mod backbones;
pub mod cli;
pub mod clip;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod nn;
pub mod scenes;
pub mod trainer;

pub use clip::{BBox, BoxTrack, FeatureGrid, LatentClip, LossBreakdown, PatchMask, VideoClip};
pub use error::{LsaError, Result};
