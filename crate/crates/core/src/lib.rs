//! Recency classification of HIV infections from biomarkers and partially
//! observed self-reported testing history.
//!
//! Subjects with a negative test within the past year who now test positive
//! are known recent infections; those who reported a positive test more than
//! a year ago are known long-term infections. Everyone else contributes a
//! mixture term. The model is fitted by maximum pseudo-likelihood with
//! sandwich standard errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod density_ratio;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod logistic;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod prediction;
pub mod report;
pub mod simulation;

pub use error::{RecencyError, Result};
pub use estimation::{fit, FitOptions, FitResult};
pub use model::{ModelSpec, RecencyLabel, Subject, Theta};
