//! Cross-domain contrastive feature alignment for unsupervised domain
//! adaptation, on small synthetic benchmarks.
//!
//! The crate trains a compact encoder so a classifier fit on a labeled
//! source domain transfers to an unlabeled, shifted target domain. Target
//! samples receive pseudo-labels from prototype-seeded spherical k-means,
//! and a bidirectional contrastive term pulls same-class features together
//! across domains. A source-data-free variant adapts a pretrained model
//! using only its frozen classifier weights as class prototypes.
//!
//! Start with the runnable programs in `examples/`, or the `cdcl` command
//! line tool for end-to-end pipelines.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pseudolabel;
pub mod trainer;

pub use error::{Error, Result};
