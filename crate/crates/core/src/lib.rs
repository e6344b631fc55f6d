//! Training flow for compact dehazing networks: distil a large teacher into
//! a small student, then adapt the student to unlabelled hazy images with a
//! prompt-pair haze classifier and an exponential-moving-average bilevel loop.

pub mod data;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
