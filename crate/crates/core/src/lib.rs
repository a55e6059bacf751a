//! Group basis pursuit (GBP) with mixed l1 / l2 / elastic group penalties,
//! stability certificates for the recovered codes, adversarial attacks on
//! sparse-coding classification pipelines, and the data generators and
//! trainers needed to run the accompanying experiments.

pub mod attack;
pub mod classify;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod linalg;
pub mod solver;
pub mod stability;
pub mod train;

pub use dictionary::{Dictionary, GroupPartition, NormTag, RegularizerSpec, SparseCode};
pub use error::{Error, Result};
