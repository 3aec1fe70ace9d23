//! Adversarial-example defense by temperature-diverse ensemble voting.
//!
//! The crate covers the whole loop:
//!
//! * [`net`]: small dense/convolutional classifiers with a softmax
//!   temperature, exact backprop, and seeded momentum SGD.
//! * [`data`]: IDX ingestion, disjoint partitioning, synthetic blobs.
//! * [`defense`]: plurality voting, query-time input noise, rank verification.
//! * [`certify`]: Clopper-Pearson bounds and certified L² radii.
//! * [`attacks`]: penalty-based targeted attacks and superimposition.
//! * [`harness`]: ensemble training, evaluation tables, the full pipeline.
//!
//! ```
//! use certvote::defense::{vote, ConstantClassifier, Ensemble, Label};
//! use certvote::Tensor;
//!
//! let ens = Ensemble::new(vec![
//!     ConstantClassifier::new(2, &[3], 4),
//!     ConstantClassifier::new(2, &[3], 4),
//!     ConstantClassifier::new(0, &[3], 4),
//! ])?;
//! let x = Tensor::vector(vec![0.1, 0.5, 0.9])?;
//! assert_eq!(vote(&ens, &x)?.label, Label::Class(2));
//! # Ok::<(), certvote::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod certify;
pub mod data;
pub mod defense;
mod error;
pub mod harness;
pub mod net;
pub mod rng;
pub mod stats;
mod tensor;

pub use error::{Error, Result};
pub use tensor::{argmax, l2_norm, Tensor};
