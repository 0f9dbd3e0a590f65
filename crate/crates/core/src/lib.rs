pub mod bma;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod json;
pub mod linalg;
pub mod metareg;
pub mod optim;
pub mod pooling;
pub mod quadrature;
pub mod seed;
pub mod simulate;
pub mod stats;

pub use error::{Error, ErrorKind, Result};
