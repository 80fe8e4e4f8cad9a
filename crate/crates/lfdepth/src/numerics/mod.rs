//! Minimal dense-tensor engine with reverse-mode autodiff, the layer
//! primitives the network needs, RMSprop, and a finite-difference checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod rmsprop;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_check, run_op_suite, CheckResult};
pub use rmsprop::{Rmsprop, RmspropConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Precision, Shape, Tensor};
