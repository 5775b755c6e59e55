//! Patch-wise kernel-PCA / SVM ensemble classification of 3D volumes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod kernel;
pub mod kpca;
pub mod label;
pub mod phantom;
pub mod preprocess;
pub mod registration;
pub mod rng;
pub mod segmentation;
pub mod svm;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use label::Label;
