//! Scheduling space and the two-layer tile scheduling policy.

mod device;
mod kernel;
mod policy;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineError;
use crate::spec::SpecError;

pub use device::{DeviceConfig, TierSpec};
pub use kernel::{Extent, IntermediateTensorMeta, KernelGraph, KernelTemplateKind, Touch};
pub use policy::{
    brute_force_schedule, candidate_of, compute_memory_constraint, cost_breakdown, generate_plans,
    infer_possible_tile_configs, plan_from_candidate, profile, search_space_size, tile_config_scheduling,
    tile_resource_scheduling, tile_resource_scheduling_traced, CostBreakdown, PlanCandidate, ProfileMode,
    ResourceTrace, CAP_M, CAP_N, MAX_BRUTE_FORCE_SPACE,
};

/// Query rows and key columns per tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileShape {
    pub m: usize,
    pub n: usize,
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.m, self.n)
    }
}

/// Memory tiers, ordered `Global < Shared < Register`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MemoryLocation {
    Global,
    Shared,
    Register,
}

impl MemoryLocation {
    pub const ALL: [MemoryLocation; 3] = [MemoryLocation::Register, MemoryLocation::Shared, MemoryLocation::Global];

    /// The next tier down, if any.
    pub fn lower(self) -> Option<MemoryLocation> {
        match self {
            MemoryLocation::Register => Some(MemoryLocation::Shared),
            MemoryLocation::Shared => Some(MemoryLocation::Global),
            MemoryLocation::Global => None,
        }
    }

    /// Index into a device's tier list (`0` is REGISTER).
    pub fn index(self) -> usize {
        match self {
            MemoryLocation::Register => 0,
            MemoryLocation::Shared => 1,
            MemoryLocation::Global => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemoryLocation::Register => "REGISTER",
            MemoryLocation::Shared => "SHARED",
            MemoryLocation::Global => "GLOBAL",
        }
    }

    /// Only shared-memory buffers can be multi-buffered.
    pub fn supports_stages(self) -> bool {
        self == MemoryLocation::Shared
    }
}

impl fmt::Display for MemoryLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Placement and stage count of every tensor, in the kernel graph's tensor
/// order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionPlan {
    pub tile_config: TileShape,
    pub placements: Vec<(String, MemoryLocation)>,
    pub stages: Vec<(String, u32)>,
    pub cost: f64,
}

impl ExecutionPlan {
    pub fn placement(&self, name: &str) -> Option<MemoryLocation> {
        self.placements.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }

    pub fn stage(&self, name: &str) -> Option<u32> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("base tile {base} exceeds the problem ({seq_q}x{seq_k}); no tile configuration fits")]
    BasetileExceedsProblem { base: TileShape, seq_q: usize, seq_k: usize },
    #[error("no feasible plan: no tile configuration fits the device memory")]
    NoFeasiblePlan,
    #[error("search space of {size} candidates exceeds the brute-force limit of {limit}")]
    SpaceTooLarge { size: f64, limit: f64 },
    #[error("measured profiling unavailable: {0}")]
    MeasuredUnavailable(String),
    #[error("invalid device description: {0}")]
    InvalidDevice(String),
    #[error("`{0}` cannot be scheduled: it has no blockwise form")]
    NotTileable(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
