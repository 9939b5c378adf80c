//! Communication-efficient collaborative perception with information-purified
//! messages.
//!
//! A sender condenses its BEV feature into a low-dimensional Gaussian latent
//! ([`iae`]) and a sparse, low-bit spatial mask ([`smg`]); the pair is framed
//! on the wire by [`codec`]; the receiver rebuilds a dense feature with the
//! mask-guided decoder in [`msd`] and fuses it for detection ([`detect`]).
//! [`sim`] provides the synthetic multi-agent world and link model, and
//! [`harness`] the training loop, sweeps, and ablations.

pub mod codec;
pub mod detect;
pub mod error;
pub mod harness;
pub mod iae;
pub mod model;
pub mod msd;
mod nn;
pub mod sim;
pub mod smg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, ParamStore, Primitive, Tensor};
