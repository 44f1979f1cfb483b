//! The multi-resolution fusion backbone.
//!
//! A camera branch grows from one to four streams (halving resolution,
//! roughly doubling width per stream) across four stages; every secondary
//! sensor gets a single-stream branch at stem resolution. At the start of
//! stages 2–4 the camera streams exchange information across resolutions,
//! the secondary maps are aligned by strided convs and fused into every
//! stream by MWCA blocks, and transformer blocks process each stream.

pub mod config;
pub mod layers;
mod model;
pub mod profile;
pub mod reference;

pub use config::{ModalityConfig, ModelConfig, Variant};
pub use model::{
    BranchState, Exchange, FeatureMap, FusionLevel, HrFuser, ModalityId, ModelInputs, Neck,
    StreamFusion,
};
