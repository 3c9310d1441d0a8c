//! Prototype-based spatio-temporal classification of pristine and manipulated
//! face sequences, with exact fast retraining after prototype edits.

mod binio;
pub mod cache;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod protonet;
pub mod refinery;
pub mod render;
pub mod store;
pub mod video;

pub use error::{Error, Result};
