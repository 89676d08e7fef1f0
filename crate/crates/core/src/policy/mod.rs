//! The attention policy: backbone, adapters, gates, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{GateActivation, PolicyConfig, Routing, Stage};
pub use layers::{gate_coefficients, gated_lora_forward, lora_forward, route};
pub use model::{DecodeCache, DecodeRow, Policy};
pub use store::{Bound, ParamStore};
