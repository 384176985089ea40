//! View-set attention for multi-view 3D shape recognition and retrieval.
//!
//! A shape is represented by an unordered set of per-view feature vectors.
//! [`model::Model`] encodes the set with self-attention blocks, pools it into
//! a max‖mean descriptor and classifies it; [`training`] fits the model,
//! [`retrieval`] turns class predictions into ranked retrieval lists and
//! scores them, [`io`] covers the on-disk formats and [`cli`] is the
//! command-line front end.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Mode, Model, ModelConfig, Prediction, SetDescriptor, ViewFeatureSet};
pub use tensor::Matrix;
