//! Desk-scale, instruction-driven diffusion-transformer image fusion.
//!
//! The crate covers the full pipeline: a reverse-mode tensor engine, pixel
//! degradations and mask overlays, complementary-degradation training data
//! synthesis, a prompt grammar with hybrid attention masks, a small DiT with
//! LoRA adapters trained under a flow-matching objective, an Euler sampler,
//! classical fusion metrics, and a three-question binary judge protocol.

pub mod flow;
pub mod imaging;
pub mod judge;
pub mod m3;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use rng::Rng;
pub use tensor::{Graph, Tensor};
