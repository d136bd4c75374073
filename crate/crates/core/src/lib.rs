//! Omni-supervised anchor-free detection.
//!
//! One detector learns jointly from box-labeled, dot-labeled and unlabeled
//! images. Each supervision form trains its own classification branch; the
//! positives and negatives inside each form's uncertain region are chosen
//! dynamically from the other branches' predictions (inter-guided maps).

pub mod annotations;
pub mod assignment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
