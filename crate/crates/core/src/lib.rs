//! Multi-domain learning for video action recognition with domain-specific
//! spatio-temporal adapters.
//!
//! A shared backbone is interleaved with small per-domain adapter blocks
//! (frame-wise 2D, full 3D or separable (2+1)D convolutions) and topped by
//! per-domain heads. Training visits the domains round-robin and updates the
//! parameters once per full cycle of domains.

pub mod adapter;
pub mod audit;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod network;
pub mod nn;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use adapter::{AdapterBank, AdapterBlock, AdapterKind, SharedPostNorm};
pub use backbone::{ChannelSpec, LayerStack, ToyBackboneConfig};
pub use error::{Error, Result};
pub use network::{DomainId, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig};
pub use nn::Mode;
pub use real::Real;
