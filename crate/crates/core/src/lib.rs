//! Deep comprehensive correlation mining: an unsupervised clustering engine
//! that trains a small network from pseudo-graph, pseudo-label, local
//! robustness and triplet mutual-information supervision.

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod correlation;
pub mod model;
pub mod robustness;
pub mod graph_analysis;
pub mod metrics;
pub mod checkpoint;
pub mod data;
pub mod evaluate;
pub mod experiment;
pub mod optim;
pub mod train;
pub mod gradsuite;
