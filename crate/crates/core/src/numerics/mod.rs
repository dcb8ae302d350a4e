//! Dense tensors, a reverse-mode tape, and gradient verification.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{gelu, Tape, Var, MASK_NEG};
pub use tensor::Tensor;
