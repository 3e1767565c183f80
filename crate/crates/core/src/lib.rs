pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synthgen;
pub mod tensor;
pub mod textcodec;

pub use error::{Error, Result};
pub mod trainkit;
