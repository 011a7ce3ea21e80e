//! Synthetic worlds with closed-form transition laws, the analytic
//! average-velocity oracle, trajectory datasets and their on-disk format.

mod dataset;
mod kernel;
mod oracle;

pub use dataset::{default_latitudes, default_splits, generate_dataset, Dataset, InitialDist, NormStats, Split, Splits};
pub use kernel::AnalyticKernel;
pub use oracle::AffineOracle;
