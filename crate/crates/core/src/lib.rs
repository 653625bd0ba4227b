pub mod adversarial_losses;
pub mod data_eval;
pub mod discrepancy;
pub mod error;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, ParamSet, Tensor, Var};
