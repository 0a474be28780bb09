use serde::Serialize;

use super::{ScheduleError, TileShape};
use crate::graph::{DimKind, Graph, PrimitiveKind};
use crate::spec::{build_parallel, build_recurrent, AttentionSpec, AttnDims, Pattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelTemplateKind {
    ParallelOnline,
    RecurrentChunked,
}

impl KernelTemplateKind {
    pub fn of(pattern: Pattern) -> KernelTemplateKind {
        match pattern {
            Pattern::Parallel => KernelTemplateKind::ParallelOnline,
            Pattern::Recurrent => KernelTemplateKind::RecurrentChunked,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelTemplateKind::ParallelOnline => "parallel_online",
            KernelTemplateKind::RecurrentChunked => "recurrent_chunked",
        }
    }
}

/// One axis of a tensor tile: follows the tile config or is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    BlockM,
    BlockN,
    Fixed(usize),
}

impl Extent {
    pub fn resolve(self, tile: TileShape) -> usize {
        match self {
            Extent::BlockM => tile.m,
            Extent::BlockN => tile.n,
            Extent::Fixed(n) => n,
        }
    }
}

/// How often a tile of the tensor moves through its tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Touch {
    /// Once per query block (or chunk).
    PerRowBlock,
    /// Once per (query block, key block) pair.
    PerTile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntermediateTensorMeta {
    pub name: String,
    pub rows: Extent,
    pub cols: Extent,
    pub touch: Touch,
}

impl IntermediateTensorMeta {
    pub fn new(name: &str, rows: Extent, cols: Extent, touch: Touch) -> IntermediateTensorMeta {
        IntermediateTensorMeta { name: name.to_string(), rows, cols, touch }
    }

    pub fn tile_extents(&self, tile: TileShape) -> (usize, usize) {
        (self.rows.resolve(tile), self.cols.resolve(tile))
    }

    pub fn bytes_per_tile(&self, tile: TileShape, element_bytes: u32) -> u64 {
        let (r, c) = self.tile_extents(tile);
        (r * c) as u64 * element_bytes as u64
    }
}

/// What the scheduler sees of a variant: its template, problem size and
/// intermediate tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGraph {
    pub name: String,
    pub kind: KernelTemplateKind,
    pub dims: AttnDims,
    pub tensors: Vec<IntermediateTensorMeta>,
    /// Flops per (batch, head) that do not depend on the tile config.
    pub fixed_flops: f64,
    /// Source variant; needed only for measured profiling.
    pub spec: Option<AttentionSpec>,
}

fn node_flops(g: &Graph) -> f64 {
    let numel = |id: crate::graph::NodeId| g.shape(id).iter().map(|d| d.extent()).product::<usize>() as f64;
    g.nodes()
        .iter()
        .map(|n| match &n.op {
            PrimitiveKind::MatMul => {
                let a = g.shape(n.inputs[0]);
                let b = g.shape(n.inputs[1]);
                2.0 * (a[0].extent() * a[1].extent() * b[1].extent()) as f64
            }
            PrimitiveKind::Input(_)
            | PrimitiveKind::Const(_)
            | PrimitiveKind::Broadcast(_)
            | PrimitiveKind::Transpose
            | PrimitiveKind::Row(_)
            | PrimitiveKind::ScatterRow { .. } => 0.0,
            op if op.is_row_reduce() => numel(n.inputs[0]),
            _ => numel(n.id),
        })
        .sum()
}

fn extent_of(kind: DimKind, dims: &AttnDims, rows: Extent, cols: Extent) -> Extent {
    match kind {
        DimKind::SeqQ => rows,
        DimKind::SeqK => cols,
        k => Extent::Fixed(dims.dim(k).extent()),
    }
}

impl KernelGraph {
    pub fn from_spec(spec: &AttentionSpec) -> Result<KernelGraph, ScheduleError> {
        let d = spec.dims;
        let kind = KernelTemplateKind::of(spec.pattern);
        let (dqk, dv) = (Extent::Fixed(d.dqk), Extent::Fixed(d.dv));
        let mut tensors = Vec::new();
        let mut push = |n: &str, r, c, t| tensors.push(IntermediateTensorMeta::new(n, r, c, t));
        let mod_exprs = [&spec.q_mod, &spec.k_mod, &spec.v_mod];
        let fixed_flops;
        match kind {
            KernelTemplateKind::ParallelOnline => {
                if !spec.is_tileable() {
                    return Err(ScheduleError::NotTileable(spec.name.clone()));
                }
                use Extent::{BlockM, BlockN};
                push("q", BlockM, dqk, Touch::PerRowBlock);
                push("k", BlockN, dqk, Touch::PerTile);
                push("v", BlockN, dv, Touch::PerTile);
                push("scores", BlockM, BlockN, Touch::PerTile);
                push("acc", BlockM, dv, Touch::PerTile);
                for r in spec.online().map(|o| o.rowscales.as_slice()).unwrap_or_default() {
                    push(r, BlockM, Extent::Fixed(1), Touch::PerTile);
                }
                for e in &spec.extras {
                    let read = mod_exprs.iter().any(|m| m.as_ref().is_some_and(|m| m.expr.mentions(&e.name)))
                        || spec.score_mods.iter().any(|m| m.expr.mentions(&e.name));
                    if read {
                        let r = extent_of(e.axes[0], &d, BlockM, BlockN);
                        let c = extent_of(e.axes[1], &d, BlockM, BlockN);
                        let touch = if r == BlockN || c == BlockN { Touch::PerTile } else { Touch::PerRowBlock };
                        push(&e.name, r, c, touch);
                    }
                }
                fixed_flops = node_flops(&build_parallel(spec)?.graph);
            }
            KernelTemplateKind::RecurrentChunked => {
                use Extent::BlockM;
                let def = build_recurrent(spec)?;
                push("q", BlockM, dqk, Touch::PerRowBlock);
                push("k", BlockM, dqk, Touch::PerRowBlock);
                push("v", BlockM, dv, Touch::PerRowBlock);
                push("scores", BlockM, BlockM, Touch::PerRowBlock);
                push("state", dqk, dv, Touch::PerRowBlock);
                push("factors", BlockM, Extent::Fixed(1), Touch::PerRowBlock);
                push("acc", BlockM, dv, Touch::PerRowBlock);
                for e in &spec.extras {
                    let read = mod_exprs.iter().any(|m| m.as_ref().is_some_and(|m| m.expr.mentions(&e.name)))
                        || spec.h_mod.as_ref().is_some_and(|m| m.expr.mentions(&e.name));
                    if read {
                        let r = extent_of(e.axes[0], &d, BlockM, BlockM);
                        let c = extent_of(e.axes[1], &d, BlockM, BlockM);
                        push(&e.name, r, c, Touch::PerRowBlock);
                    }
                }
                fixed_flops = node_flops(&def.mods)
                    + def.scale.as_ref().map(node_flops).unwrap_or(0.0)
                    + def.output.as_ref().map(node_flops).unwrap_or(0.0);
            }
        }
        Ok(KernelGraph { name: spec.name.clone(), kind, dims: d, tensors, fixed_flops, spec: Some(spec.clone()) })
    }

    pub fn tensor(&self, name: &str) -> Option<&IntermediateTensorMeta> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Number of query blocks and key blocks per (batch, head).
    pub fn block_counts(&self, tile: TileShape) -> (usize, usize) {
        let d = self.dims;
        match self.kind {
            KernelTemplateKind::ParallelOnline => (d.seq_q.div_ceil(tile.m), d.seq_k.div_ceil(tile.n)),
            KernelTemplateKind::RecurrentChunked => (d.seq_q.div_ceil(tile.m), 1),
        }
    }

    /// Tile moves of one tensor over the whole problem.
    pub fn touches(&self, t: &IntermediateTensorMeta, tile: TileShape) -> f64 {
        let (nm, nn) = self.block_counts(tile);
        let per_head = match t.touch {
            Touch::PerRowBlock => nm,
            Touch::PerTile => nm * nn,
        };
        (per_head * self.dims.batch * self.dims.heads) as f64
    }

    /// Total flops of the kernel under `tile`.
    pub fn flops(&self, tile: TileShape) -> f64 {
        let d = self.dims;
        let per_head = match self.kind {
            KernelTemplateKind::ParallelOnline => self.fixed_flops,
            KernelTemplateKind::RecurrentChunked => {
                let (k, v) = (d.dqk as f64, d.dv as f64);
                let mut f = self.fixed_flops;
                let mut start = 0;
                while start < d.seq_q {
                    let c = (d.seq_q - start).min(tile.m) as f64;
                    // Q H, Q K^T, decay mask, S V, combine, state update.
                    f += 2.0 * c * k * v
                        + 2.0 * c * c * k
                        + c * c
                        + 2.0 * c * c * v
                        + 2.0 * c * v
                        + 3.0 * c * k * v
                        + k * v;
                    start += tile.m;
                }
                f
            }
        };
        per_head * (d.batch * d.heads) as f64
    }
}
