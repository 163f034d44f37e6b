//! Rotation-condition-selective position encodings for point clouds.

pub mod diff;
pub mod encode;
pub mod error;
pub mod geom;
pub mod harness;
pub mod io;
pub mod neighborhood;
pub mod net;
pub mod select;

pub use error::{Error, Result};
