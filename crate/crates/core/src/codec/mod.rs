//! Message units on the wire, communication-volume accounting, and the
//! discrete information-theoretic checks behind the sparse-mask entropy bound.

mod frame;
mod info;
mod volume;

pub use frame::{decode_message, encode_message, frame_len, FrameError, MessageUnit, FRAME_HEADER_LEN, FRAME_MAGIC, FRAME_VERSION};
pub use info::{entropy_bound, random_markov_joint, verify_lemma1, DiscreteJoint, Lemma1Report, LEMMA1_VARS};
pub use volume::{baseline_volume, format_bytes, reported_volume, BaselineMode, VolumeReport, BYTES_PER_BOX};
