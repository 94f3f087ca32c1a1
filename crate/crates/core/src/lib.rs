pub mod assembly;
pub mod config;
pub mod dmmt;
pub mod dmt;
pub mod docfeat;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod metrics;
pub mod mmt;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{HmtError, Result};
pub use tensor::{Graph, Tensor, Var};
