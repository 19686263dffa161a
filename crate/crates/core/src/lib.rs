//! Region proposal training under missing annotations.
//!
//! Negative proposals whose embeddings attend strongly to a positive proposal are
//! treated as likely unannotated objects and supervised with a soft target instead
//! of a hard zero. The crate carries everything needed to exercise that idea end to
//! end: a small autodiff engine, anchor geometry, the network and losses, a
//! synthetic dense-object dataset with controlled annotation dropping, and the
//! training/evaluation harness.

pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
