pub mod corpus;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
