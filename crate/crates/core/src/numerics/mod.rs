//! Dense tensors, a differentiable MLP, Adam and EMA.

pub mod dual;
pub mod ema;
pub mod mlp;
pub mod optim;
pub mod tensor;

pub use dual::DualTensor;
pub use ema::EmaState;
pub use mlp::{Activation, ForwardCache, Layer, MlpParams};
pub use optim::Adam;
pub use tensor::Tensor;
