//! Poke-conditioned image-to-video synthesis.
//!
//! A single frame plus a poke (a displacement applied at one pixel) is
//! encoded into a hierarchy of latent object states. A hierarchy of
//! residual recurrent cells rolls those states forward in time, and a
//! UNet-style decoder renders every predicted state back into a frame.
//!
//! The crate is organised as:
//!
//! * [`data`]: clip ingestion, optical-flow providers, foreground masks and
//!   training-poke simulation.
//! * [`codec`]: the hierarchical state encoder, poke encoder and frame decoder.
//! * [`dynamics`]: recurrent cells, upsamplers and the hierarchical rollout.
//! * [`model`]: the assembled synthesizer and its checkpoint format.
//! * [`train`]: losses, discriminators, the optimizer and both training stages.
//! * [`eval`]: metrics, motion-correlation maps, retrieval and synthetic data.

pub mod codec;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod train;

pub use crate::error::{Error, Result};
pub use crate::image::Image;
