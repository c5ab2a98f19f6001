//! Small CPU neural-network engine: sequential specs with residual and
//! squeeze-excitation blocks, exact reverse-mode gradients and SGD.

pub mod check;
pub mod loss;
mod net;
pub mod optim;
mod scalar;
pub mod serialize;
mod spec;
mod tensor;

pub use loss::{loss_fedprox, softmax, softmax_cross_entropy};
pub use net::{ForwardOutput, Mode, ModelParams, Network, ParamEntry, BN_MOMENTUM};
pub use optim::{sgd_step, Sgd};
pub use scalar::Scalar;
pub(crate) use scalar::{matmul, Mat};
pub use spec::{LayerSpec, ModelSpec};
pub use tensor::Tensor;

/// Element type used by simulation runs.
pub type Real = f32;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} outside {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("corrupt parameter file: {0}")]
    Corrupt(String),
}

/// Number of trainable scalars in `spec`.
pub fn param_count(spec: &ModelSpec) -> Result<usize, NnError> {
    Ok(Network::new(spec.clone())?.param_count())
}
