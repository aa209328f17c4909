//! Texture-aware slot representations for dense prediction under domain
//! shift.
//!
//! The pipeline extracts frozen patch features, learns Slot Attention by
//! feature reconstruction, adapts it to an unlabeled target distribution
//! with two periodically merged branches, and trains a dense head on the
//! concatenation of adapted features, reconstructions and slot masks.

pub mod adaptation;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod slot;
pub mod synthdata;

pub use error::{Error, Result};
