pub mod diffkit;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod synthworlds;
pub mod theorybench;
pub mod transport;
pub mod velnet;
pub mod verifmetrics;

pub use diffkit::{RngStream, Tensor, Var};
pub use error::{Error, Result};
pub use transport::VelocityField;
pub use velnet::{NetConfig, NetParams};
