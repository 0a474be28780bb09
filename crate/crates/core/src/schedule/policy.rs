use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{
    DeviceConfig, ExecutionPlan, IntermediateTensorMeta, KernelGraph, KernelTemplateKind, MemoryLocation,
    ScheduleError, TileShape,
};
use crate::engine::{run_chunk_recurrent, run_tiled_parallel, ProblemInstance};

pub const CAP_M: usize = 256;
pub const CAP_N: usize = 256;
pub const MAX_BRUTE_FORCE_SPACE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    Analytic,
    Measured,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Every tile config: multiples of the base tile up to the problem size and
/// the caps, ascending by `(m, n)`. Chunked recurrences use square chunks
/// that are multiples of both base extents.
pub fn infer_possible_tile_configs(graph: &KernelGraph, basetile: TileShape) -> Result<Vec<TileShape>, ScheduleError> {
    let d = graph.dims;
    let multiples = |step: usize, limit: usize| -> Vec<usize> { (1..=limit / step).map(|i| i * step).collect() };
    let configs: Vec<TileShape> = match graph.kind {
        KernelTemplateKind::ParallelOnline => {
            let ms = multiples(basetile.m, d.seq_q.min(CAP_M));
            let ns = multiples(basetile.n, d.seq_k.min(CAP_N));
            ms.iter().flat_map(|&m| ns.iter().map(move |&n| TileShape { m, n })).collect()
        }
        KernelTemplateKind::RecurrentChunked => {
            let step = basetile.m / gcd(basetile.m, basetile.n) * basetile.n;
            multiples(step, d.seq_q.min(CAP_M)).into_iter().map(|c| TileShape { m: c, n: c }).collect()
        }
    };
    if configs.is_empty() {
        return Err(ScheduleError::BasetileExceedsProblem { base: basetile, seq_q: d.seq_q, seq_k: d.seq_k });
    }
    Ok(configs)
}

/// Placement and stage count per tensor, indexed like the graph's tensors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlanCandidate {
    pub placements: Vec<MemoryLocation>,
    pub stages: Vec<u32>,
}

/// Stage assignments for the current placements: every SHARED tensor takes
/// `1..=max_stages`, all others stay at 1. Cartesian order with the first
/// SHARED tensor most significant, each ascending.
pub fn generate_plans(placements: &[MemoryLocation], max_stages: u32) -> Vec<PlanCandidate> {
    let mut out = vec![PlanCandidate { placements: placements.to_vec(), stages: vec![1; placements.len()] }];
    for (i, p) in placements.iter().enumerate() {
        if !p.supports_stages() {
            continue;
        }
        out = out
            .into_iter()
            .flat_map(|c| {
                (1..=max_stages).map(move |s| {
                    let mut c = c.clone();
                    c.stages[i] = s;
                    c
                })
            })
            .collect();
    }
    out
}

/// Per tier: the sum of `bytes_per_tile * stages` over tensors placed there
/// fits the tier's capacity.
pub fn compute_memory_constraint(
    tile: TileShape,
    tensors: &[IntermediateTensorMeta],
    plan: &PlanCandidate,
    device: &DeviceConfig,
) -> bool {
    let mut used = [0u128; 3];
    for ((t, p), s) in tensors.iter().zip(&plan.placements).zip(&plan.stages) {
        used[p.index()] += t.bytes_per_tile(tile, device.element_bytes) as u128 * *s as u128;
    }
    MemoryLocation::ALL.iter().all(|&m| used[m.index()] <= device.capacity(m) as u128)
}

/// Placements before the first check and after every demotion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceTrace {
    /// Tensor indices in demotion order (descending tile size, stable).
    pub order: Vec<usize>,
    pub placements: Vec<Vec<MemoryLocation>>,
}

fn feasible(
    tile: TileShape,
    tensors: &[IntermediateTensorMeta],
    placements: &[MemoryLocation],
    device: &DeviceConfig,
) -> Vec<PlanCandidate> {
    generate_plans(placements, device.max_stages)
        .into_iter()
        .filter(|p| compute_memory_constraint(tile, tensors, p, device))
        .collect()
}

/// Memory-tier assignment with largest-first demotion.
///
/// All tensors start in REGISTER. Walking the tensors in descending tile
/// size, the stage candidates of the current placements are filtered by the
/// memory constraint; the first non-empty set is returned, otherwise the
/// current tensor drops one tier. The walk repeats while some tensor can
/// still drop, and the final placements are checked once more before giving
/// up with an empty set.
pub fn tile_resource_scheduling_traced(
    tile: TileShape,
    tensors: &[IntermediateTensorMeta],
    device: &DeviceConfig,
) -> (Vec<PlanCandidate>, ResourceTrace) {
    let mut placements = vec![MemoryLocation::Register; tensors.len()];
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(tensors[i].bytes_per_tile(tile, device.element_bytes)));
    let mut trace = ResourceTrace { order: order.clone(), placements: vec![placements.clone()] };
    loop {
        let mut demoted = false;
        for &i in &order {
            let plans = feasible(tile, tensors, &placements, device);
            if !plans.is_empty() {
                return (plans, trace);
            }
            if let Some(lower) = placements[i].lower() {
                placements[i] = lower;
                trace.placements.push(placements.clone());
                demoted = true;
            }
        }
        if !demoted {
            break;
        }
    }
    (feasible(tile, tensors, &placements, device), trace)
}

pub fn tile_resource_scheduling(
    tile: TileShape,
    tensors: &[IntermediateTensorMeta],
    device: &DeviceConfig,
) -> Vec<PlanCandidate> {
    tile_resource_scheduling_traced(tile, tensors, device).0
}

/// Terms of the analytic cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Sum over tensors of moved bytes divided by the tier bandwidth.
    pub traffic: f64,
    /// Total flops divided by device throughput.
    pub compute: f64,
    /// Copy time hidden behind compute by multi-buffered SHARED tensors.
    pub overlap_credit: f64,
    pub total: f64,
}

/// `traffic + compute - overlap_credit`. A SHARED tensor with `s` stages and
/// copy time `c` hides `min(c, compute) * (s - 1) / s`; the total credit never
/// exceeds `compute`.
pub fn cost_breakdown(
    graph: &KernelGraph,
    device: &DeviceConfig,
    tile: TileShape,
    plan: &PlanCandidate,
) -> CostBreakdown {
    let compute = graph.flops(tile) / device.throughput_flops;
    let mut traffic = 0.0;
    let mut credit = 0.0;
    for ((t, p), s) in graph.tensors.iter().zip(&plan.placements).zip(&plan.stages) {
        let bytes = t.bytes_per_tile(tile, device.element_bytes) as f64 * graph.touches(t, tile);
        let c = bytes / device.bandwidth(*p);
        traffic += c;
        if p.supports_stages() && *s > 1 {
            credit += c.min(compute) * (*s - 1) as f64 / *s as f64;
        }
    }
    let overlap_credit = credit.min(compute);
    CostBreakdown { traffic, compute, overlap_credit, total: traffic + compute - overlap_credit }
}

/// Names a candidate's placements and stages after the graph's tensors.
pub fn plan_from_candidate(graph: &KernelGraph, tile: TileShape, c: &PlanCandidate, cost: f64) -> ExecutionPlan {
    ExecutionPlan {
        tile_config: tile,
        placements: graph.tensors.iter().zip(&c.placements).map(|(t, p)| (t.name.clone(), *p)).collect(),
        stages: graph.tensors.iter().zip(&c.stages).map(|(t, s)| (t.name.clone(), *s)).collect(),
        cost,
    }
}

/// Placements and stages of `plan` in the graph's tensor order.
pub fn candidate_of(graph: &KernelGraph, plan: &ExecutionPlan) -> PlanCandidate {
    PlanCandidate {
        placements: graph.tensors.iter().map(|t| plan.placement(&t.name).unwrap_or(MemoryLocation::Global)).collect(),
        stages: graph.tensors.iter().map(|t| plan.stage(&t.name).unwrap_or(1)).collect(),
    }
}

fn measure(graph: &KernelGraph, tile: TileShape) -> Result<f64, ScheduleError> {
    let spec = graph.spec.as_ref().ok_or_else(|| {
        ScheduleError::MeasuredUnavailable(format!("`{}` has no executable variant attached", graph.name))
    })?;
    let inst = ProblemInstance::random(spec, 0);
    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        match graph.kind {
            KernelTemplateKind::ParallelOnline => run_tiled_parallel(spec, &inst, tile.m, tile.n)?,
            KernelTemplateKind::RecurrentChunked => run_chunk_recurrent(spec, &inst, tile.m)?,
        };
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[2])
}

/// Cost of a constraint-valid plan. Analytic mode is the closed-form model;
/// measured mode is the median wall time (seconds) of five runs of the
/// blockwise reference executor at the plan's tile config.
pub fn profile(
    plan: &ExecutionPlan,
    graph: &KernelGraph,
    device: &DeviceConfig,
    mode: ProfileMode,
) -> Result<f64, ScheduleError> {
    match mode {
        ProfileMode::Analytic => Ok(cost_breakdown(graph, device, plan.tile_config, &candidate_of(graph, plan)).total),
        ProfileMode::Measured => measure(graph, plan.tile_config),
    }
}

/// Exhaustive over tile configs, with tile resource scheduling per config;
/// returns the cheapest plan. Ties keep the earlier (config, plan index).
pub fn tile_config_scheduling(
    graph: &KernelGraph,
    device: &DeviceConfig,
    mode: ProfileMode,
) -> Result<ExecutionPlan, ScheduleError> {
    device.validate()?;
    let configs = infer_possible_tile_configs(graph, device.basetile)?;
    let per_config: Vec<Vec<PlanCandidate>> =
        configs.par_iter().map(|&t| tile_resource_scheduling(t, &graph.tensors, device)).collect();
    let costs: Vec<Vec<f64>> = match mode {
        ProfileMode::Analytic => configs
            .par_iter()
            .zip(&per_config)
            .map(|(&t, plans)| plans.iter().map(|p| cost_breakdown(graph, device, t, p).total).collect())
            .collect(),
        ProfileMode::Measured => {
            let mut out = Vec::with_capacity(configs.len());
            for (&t, plans) in configs.iter().zip(&per_config) {
                // The reference executor ignores placements, so one timing covers the config.
                let c = if plans.is_empty() { 0.0 } else { measure(graph, t)? };
                out.push(vec![c; plans.len()]);
            }
            out
        }
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for (ci, cs) in costs.iter().enumerate() {
        for (pi, &c) in cs.iter().enumerate() {
            if best.is_none_or(|(b, _, _)| c < b) {
                best = Some((c, ci, pi));
            }
        }
    }
    let (cost, ci, pi) = best.ok_or(ScheduleError::NoFeasiblePlan)?;
    Ok(plan_from_candidate(graph, configs[ci], &per_config[ci][pi], cost))
}

/// Options per tensor in brute-force order: REGISTER, SHARED x stages, GLOBAL.
fn tensor_options(max_stages: u32) -> Vec<(MemoryLocation, u32)> {
    let mut v = vec![(MemoryLocation::Register, 1)];
    v.extend((1..=max_stages).map(|s| (MemoryLocation::Shared, s)));
    v.push((MemoryLocation::Global, 1));
    v
}

/// Number of (config, placement, stage) candidates brute force would visit.
pub fn search_space_size(graph: &KernelGraph, device: &DeviceConfig) -> Result<f64, ScheduleError> {
    let configs = infer_possible_tile_configs(graph, device.basetile)?;
    Ok(configs.len() as f64 * (2.0 + device.max_stages as f64).powi(graph.tensors.len() as i32))
}

/// Full enumeration of tile configs, placements and stage counts under the
/// analytic cost, with the same tie-break as [`tile_config_scheduling`].
pub fn brute_force_schedule(graph: &KernelGraph, device: &DeviceConfig) -> Result<ExecutionPlan, ScheduleError> {
    device.validate()?;
    let size = search_space_size(graph, device)?;
    if size > MAX_BRUTE_FORCE_SPACE {
        return Err(ScheduleError::SpaceTooLarge { size, limit: MAX_BRUTE_FORCE_SPACE });
    }
    let configs = infer_possible_tile_configs(graph, device.basetile)?;
    let options = tensor_options(device.max_stages);
    let n = graph.tensors.len();
    let best_per_config: Vec<Option<(f64, PlanCandidate)>> = configs
        .par_iter()
        .map(|&tile| {
            let mut best: Option<(f64, PlanCandidate)> = None;
            let mut digits = vec![0usize; n];
            loop {
                let cand = PlanCandidate {
                    placements: digits.iter().map(|&d| options[d].0).collect(),
                    stages: digits.iter().map(|&d| options[d].1).collect(),
                };
                if compute_memory_constraint(tile, &graph.tensors, &cand, device) {
                    let c = cost_breakdown(graph, device, tile, &cand).total;
                    if best.as_ref().is_none_or(|(b, _)| c < *b) {
                        best = Some((c, cand));
                    }
                }
                // Odometer with the first tensor most significant.
                let mut i = n;
                loop {
                    if i == 0 {
                        return best;
                    }
                    i -= 1;
                    digits[i] += 1;
                    if digits[i] < options.len() {
                        break;
                    }
                    digits[i] = 0;
                }
            }
        })
        .collect();
    let mut best: Option<(f64, usize)> = None;
    for (ci, b) in best_per_config.iter().enumerate() {
        if let Some((c, _)) = b {
            if best.is_none_or(|(bc, _)| *c < bc) {
                best = Some((*c, ci));
            }
        }
    }
    let (cost, ci) = best.ok_or(ScheduleError::NoFeasiblePlan)?;
    let cand = &best_per_config[ci].as_ref().expect("chosen config has a plan").1;
    Ok(plan_from_candidate(graph, configs[ci], cand, cost))
}
