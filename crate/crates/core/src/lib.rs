//! Task-relatedness estimation for transfer learning on frozen embeddings.
//!
//! Given a reference task and a target task, both represented as embedding
//! datasets extracted from the same encoder, this crate learns a chain of
//! transformations (class prior, label map, invertible feature map) that
//! carries the reference distribution onto the target and evaluates an upper
//! bound on the target's best linear-probe cross-entropy loss:
//!
//! ```text
//! transferability <= reweighted reference loss
//!                  + label-mismatch conditional entropy
//!                  + tau * Wasserstein(transformed reference, target)
//! ```
//!
//! The sum of the three terms is the *task-relatedness* of the pair; a
//! smaller value predicts better transfer. The crate also ships a fast
//! moment-matching variant of the distribution-mismatch term for ranking
//! pre-trained models, and a harness for correlating scores with observed
//! fine-tuning accuracies.
//!
//! Modules map onto pipeline stages:
//!
//! - [`dataset`]: embedding file I/O, standardization, prior-based resampling
//! - [`classifier`]: Lipschitz-constrained softmax probes and their losses
//! - [`ot`]: label-aware optimal transport (exact network simplex + Sinkhorn)
//! - [`transforms`]: the prior/label/feature transformation set and the bound
//! - [`optimizer`]: the alternating coupling/SGD minimization loop
//! - [`fast`]: mean/covariance matching in place of Wasserstein distance
//! - [`harness`]: model ranking and correlation reports
//! - [`synth`]: seeded synthetic task generators used by tests and demos

use thiserror::Error;

pub mod classifier;
pub mod dataset;
pub mod fast;
pub mod harness;
pub mod optimizer;
pub mod ot;
pub mod synth;
pub mod transforms;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
