//! Discontinuity-preserving diffeomorphic image registration.
//!
//! Each anatomical region gets its own probabilistic stationary velocity
//! field. Every field is exponentiated by scaling and squaring into a smooth
//! displacement, and the regional displacements are stitched together by
//! the fixed-image segmentation into one field that may jump across region
//! interfaces. Parameters are fitted either directly per image pair or by a
//! small multi-channel encoder-decoder.

pub mod autodiff;
pub mod cli;
pub mod diffeo;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod losses;
pub mod par;
pub mod phantom;
pub mod registration;

pub use error::{Error, Result};
pub use grid::{Dims, Field, LabelGrid, ScalarGrid, VectorGrid};
