pub mod autograd;
pub mod backbone;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod mine;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod style_encoder;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
