pub mod data;
pub mod error;
pub mod evaluation;
pub(crate) mod fsutil;
pub mod matching;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
