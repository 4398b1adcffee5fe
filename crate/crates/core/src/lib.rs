pub mod ae;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod params;
pub mod qs;
pub mod recurrent;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
