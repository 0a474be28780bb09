//! Compiler pipeline for user-defined attention variants.
//!
//! A variant is written as a few modification functions over an attention
//! template ([`spec`]). It is lowered to a computation graph ([`graph`]),
//! executed by deterministic dense executors ([`engine`]), scheduled onto a
//! tiered memory model ([`schedule`]) and emitted as kernel text ([`lowering`]).

pub mod engine;
pub mod expr;
pub mod graph;
pub mod lowering;
pub mod schedule;
pub mod spec;

pub use engine::{
    run_chunk_recurrent, run_naive_parallel, run_reference, run_step_recurrent, run_tiled_parallel, DenseTensor,
    EngineError, ProblemInstance,
};
pub use graph::{Graph, NodeId, PrimitiveKind};
pub use lowering::{
    bind_executable, code_generation, expression_generation, lower_spec, ExecutablePlan, LoweringError,
};
pub use schedule::{
    brute_force_schedule, tile_config_scheduling, DeviceConfig, ExecutionPlan, KernelGraph, MemoryLocation,
    ProfileMode, ScheduleError, TileShape,
};
pub use spec::{builtin, builtin_names, AttentionSpec, AttnDims, Pattern, SpecError, VariantFile};
