//! Empirical-likelihood meta-analysis under a Copas-type selection model.

pub mod distfit;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
pub use model::{FullParams, MetaDataset, SelectionParams, StudyRecord};
