//! Common principal components of log latent abundances across studies of
//! count data.

pub mod cpca;
pub mod error;
pub mod exec;
pub mod ingest;
pub mod linalg;
pub mod msfa;
pub mod pipeline;
pub mod pln;
pub mod scores;
pub mod scree;
pub mod simulate;
pub mod transform;
pub mod variance;

pub use error::{Error, ErrorKind, Result};
pub use exec::Execution;
