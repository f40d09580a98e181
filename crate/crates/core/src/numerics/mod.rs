//! Dense tensors, a reverse-mode gradient tape, and the optimizer.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use optim::{AdamW, AdamWConfig};
pub use params::{tensor_fingerprint, Bindings, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
