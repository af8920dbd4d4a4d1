//! Deterministic tensor engine with reverse-mode differentiation.

mod checkpoint;
mod finite_diff;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, NamedTensors, CHECKPOINT_MAGIC,
};
pub use finite_diff::{finite_difference_grad, relative_error, REL_ERR_FLOOR};
pub use tape::{sigmoid, Rulebook, Tape, UpsampleMode, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::focal_term;
