//! Pyramid memory for dense prediction.
//!
//! A memory holds feature pyramids for a set of samples together with dense
//! labels on the finest level. Queries are answered without any trained
//! decoder: every query node is matched against memory by a coarse-to-fine
//! beam search over the pyramids, and labels are carried across the matched
//! correspondences. An optional message-passing pass smooths the transferred
//! labels over a similarity graph built on the query itself.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: resolution schedules, node indexing, and the connectivity
//!   kernels linking one pyramid level to the next.
//! * [`ptns`]: the on-disk tensor format used for pyramids, labels, and
//!   exported diagnostics.
//! * [`pyramid`]: feature pyramids and pyramid completion.
//! * [`labels`]: dense label maps, hard, soft, and scalar.
//! * [`features`]: the built-in seeded feature extractor and import paths.
//! * [`memory`]: the sample store, novelty-based sparsification, and
//!   directory persistence.
//! * [`search`]: the hierarchical correspondence search and label retrieval.
//! * [`oracle`]: an exhaustive reference search used to validate the fast
//!   path on small instances.
//! * [`mp`]: similarity-graph message passing over query predictions.
//! * [`resample`]: linear rescaling, padding, and cropping of grids.
//! * [`harness`]: metrics, test-time augmentation, data synthesis, and
//!   continual-learning scenario evaluation.
//! * [`predict`]: the end-to-end pipeline tying store, search, message
//!   passing, and augmentation together.

#![warn(missing_docs)]

pub mod features;
pub mod grid;
pub mod harness;
pub mod labels;
pub mod memory;
pub mod mp;
pub mod oracle;
pub mod predict;
pub mod ptns;
pub mod pyramid;
pub mod resample;
pub mod search;

/// Compiles every code block in the guide, keeping the book in lockstep
/// with the crate. The modules exist only under `cargo test --doc`.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/grids-and-pyramids.md")]
    mod grids_and_pyramids {}
    #[doc = include_str!("../../../book/src/tensor-files.md")]
    mod tensor_files {}
    #[doc = include_str!("../../../book/src/memory-stores.md")]
    mod memory_stores {}
    #[doc = include_str!("../../../book/src/hierarchical-search.md")]
    mod hierarchical_search {}
    #[doc = include_str!("../../../book/src/label-transduction.md")]
    mod label_transduction {}
    #[doc = include_str!("../../../book/src/neighborhood-smoothing.md")]
    mod neighborhood_smoothing {}
    #[doc = include_str!("../../../book/src/multi-scale-prediction.md")]
    mod multi_scale_prediction {}
    #[doc = include_str!("../../../book/src/continual-learning.md")]
    mod continual_learning {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}

use std::path::PathBuf;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument or state for the requested operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed tensor file; `offset` is the byte position of the failure.
    #[error("format error at byte {offset}: {msg}")]
    Format {
        /// Byte offset into the file at which parsing failed.
        offset: u64,
        /// Description of the malformed field.
        msg: String,
    },
    /// Underlying I/O failure, with the path that was being accessed.
    #[error("io error on {path}: {source}")]
    Io {
        /// File or directory the operation touched.
        path: PathBuf,
        /// Propagated I/O error.
        #[source]
        source: std::io::Error,
    },
    /// A sample id was not found in the store.
    #[error("unknown sample id: {0}")]
    UnknownId(String),
    /// Refused because the instance exceeds a configured exhaustive-size guard.
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
