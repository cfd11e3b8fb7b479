//! Tokenformer: language models whose linear projections are replaced by
//! attention over learnable parameter tokens, grown by appending tokens.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck_suite;
pub mod lm;
pub mod model;
pub mod optim;
pub mod pattention;
pub mod preset;
pub mod rng;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lm::{Arm, LanguageModel};
pub use model::{count_params, ModelConfig, ParamCount, TokenformerLM};
pub use rng::{InitPolicy, Rng};
pub use tensor::{Scalar, Tensor};
