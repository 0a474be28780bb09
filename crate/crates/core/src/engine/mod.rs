//! Deterministic 64-bit dense executors.

mod eval;
mod executors;
pub mod gradcheck;
pub mod ops;
mod problem;
mod tensor;

use thiserror::Error;

use crate::graph::GraphError;
use crate::spec::SpecError;

pub use eval::{evaluate, evaluate_outputs, Bindings, Values};
pub(crate) use executors::{blocks, per_slice, SliceInputs};
pub use executors::{
    chunk_core, run_chunk_recurrent, run_naive_parallel, run_reference, run_step_recurrent, run_tiled_parallel,
};
pub use problem::{ProblemInstance, STREAM_EXTRAS, STREAM_K, STREAM_Q, STREAM_V};
pub use tensor::{dense_shape, max_abs_diff, DenseTensor, Matrix};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("binding `{name}` has shape {got:?}, expected {expected:?}")]
    BindingShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("invalid problem instance: {0}")]
    Instance(String),
    #[error("invalid block size: {0}")]
    InvalidBlock(String),
    #[error("the {executor} executor cannot run `{variant}`")]
    WrongPattern { executor: String, variant: String },
    #[error("unsupported h_mod: {0}")]
    UnsupportedHMod(String),
    #[error("{executor} output contains NaN; a modification function is undefined on these inputs")]
    NanInOutput { executor: &'static str },
    #[error("no input tensor named `{0}`")]
    UnknownTensor(String),
}
