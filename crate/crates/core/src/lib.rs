pub mod data;
pub mod error;
pub mod evolution;
pub mod layers;
pub mod mutation;
pub mod optim;
pub mod report;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
