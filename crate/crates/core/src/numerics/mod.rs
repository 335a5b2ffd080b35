//! Dense tensors, the small convolutional layer set with hand-written
//! backward passes, SGD with momentum and the cosine schedule.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use layers::{Layer, LayerKind, Param, Sequential};
pub use optim::{cosine_lr, Sgd};
pub use tensor::Tensor;
