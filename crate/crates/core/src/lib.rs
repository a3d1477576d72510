pub mod autodiff;
pub mod baselines;
pub mod curvature;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod heta;
pub mod info;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod report;
pub mod sequence;
pub mod theory;

pub use error::{HetaError, Result};
pub use sequence::TokenSequence;
