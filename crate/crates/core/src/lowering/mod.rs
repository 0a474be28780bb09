//! Two-stage lowering: a graph becomes a linear statement sequence with
//! reused slots, and statement sequences are spliced into a kernel template
//! as text in the portable dialect (see `docs/kernel-dialect.md`).

mod codegen;
mod exec;

use serde::Serialize;
use thiserror::Error;

use crate::engine::EngineError;
use crate::graph::{Graph, NodeId, PrimitiveKind};
use crate::schedule::{KernelGraph, KernelTemplateKind, MemoryLocation, ScheduleError, TileShape};
use crate::spec::{build_recurrent, build_sections, AttentionSpec, AttnDims, SpecError, TileExtents};

pub use codegen::code_generation;
pub use exec::{bind_executable, ExecutablePlan};

pub type Slot = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Declare {
        slot: Slot,
        rows: usize,
        cols: usize,
        tier: MemoryLocation,
    },
    CopyIn {
        tensor: String,
        slot: Slot,
        stage: u32,
    },
    Compute {
        slot: Slot,
        op: PrimitiveKind,
        operands: Vec<Slot>,
    },
    RowReduce {
        slot: Slot,
        kind: PrimitiveKind,
        operand: Slot,
    },
    /// `acc *= factor`, in place.
    Rescale {
        acc: Slot,
        factor: Slot,
    },
    CopyOut {
        slot: Slot,
        tensor: String,
    },
}

impl Stmt {
    /// Slot written by the statement, if any.
    pub fn writes(&self) -> Option<Slot> {
        match self {
            Stmt::Declare { .. } | Stmt::CopyOut { .. } => None,
            Stmt::CopyIn { slot, .. } | Stmt::Compute { slot, .. } | Stmt::RowReduce { slot, .. } => Some(*slot),
            Stmt::Rescale { acc, .. } => Some(*acc),
        }
    }

    pub fn reads(&self) -> Vec<Slot> {
        match self {
            Stmt::Declare { .. } | Stmt::CopyIn { .. } => vec![],
            Stmt::Compute { operands, .. } => operands.clone(),
            Stmt::RowReduce { operand, .. } => vec![*operand],
            Stmt::Rescale { acc, factor } => vec![*acc, *factor],
            Stmt::CopyOut { slot, .. } => vec![*slot],
        }
    }
}

/// A slot's extents and the `[def, last_use]` ranges (positions in the
/// linearized node order) of the values it holds over time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotInfo {
    pub rows: usize,
    pub cols: usize,
    pub ranges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprSeq {
    pub stmts: Vec<Stmt>,
    /// Source node of each statement; `None` for declarations and copy-outs.
    pub origin: Vec<Option<NodeId>>,
    pub slots: Vec<SlotInfo>,
}

impl ExprSeq {
    /// Names copied in, in first-use order without repeats.
    pub fn inputs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.stmts {
            if let Stmt::CopyIn { tensor, .. } = s {
                if !out.contains(&tensor.as_str()) {
                    out.push(tensor);
                }
            }
        }
        out
    }

    pub fn outputs(&self) -> Vec<&str> {
        self.stmts
            .iter()
            .filter_map(|s| match s {
                Stmt::CopyOut { tensor, .. } => Some(tensor.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Values sharing a slot never overlap; a slot may pass from one value
    /// to the next at a single position (in-place update).
    pub fn slots_are_disjoint(&self) -> bool {
        self.slots.iter().all(|s| s.ranges.windows(2).all(|w| w[0].1 <= w[1].0 && w[0].0 <= w[0].1))
    }

    /// Every slot is declared before any statement touches it.
    pub fn declared_before_use(&self) -> bool {
        let mut declared = vec![false; self.slots.len()];
        for s in &self.stmts {
            if let Stmt::Declare { slot, .. } = s {
                declared[*slot] = true;
                continue;
            }
            if s.reads().iter().chain(s.writes().iter()).any(|&x| !declared[x]) {
                return false;
            }
        }
        true
    }
}

fn extents(g: &Graph, id: NodeId) -> (usize, usize) {
    match g.shape(id) {
        [] => (1, 1),
        [r, c] => (r.extent(), c.extent()),
        other => panic!("rank-{} tensors cannot be lowered", other.len()),
    }
}

/// Linearizes `graph` with outputs named `out0`, `out1`, ...
pub fn expression_generation(graph: &Graph) -> ExprSeq {
    let names: Vec<String> = (0..graph.outputs().len()).map(|i| format!("out{i}")).collect();
    generate(graph, &names)
}

pub(crate) fn generate(graph: &Graph, output_names: &[String]) -> ExprSeq {
    let mut needed = vec![false; graph.len()];
    for &o in graph.outputs() {
        for (i, a) in graph.ancestors(o).into_iter().enumerate() {
            needed[i] |= a;
        }
    }
    let order: Vec<NodeId> = graph.topo_sort().into_iter().filter(|id| needed[id.0]).collect();
    let live = graph.use_def(&order);
    let end = order.len();
    let mut last = live.last_use.clone();
    for &o in graph.outputs() {
        last[o.0] = end;
    }

    let mut stmts = Vec::new();
    let mut origin = Vec::new();
    let mut slots: Vec<SlotInfo> = Vec::new();
    let mut busy_until: Vec<usize> = Vec::new();
    let mut slot_of: Vec<Option<Slot>> = vec![None; graph.len()];

    for (pos, &id) in order.iter().enumerate() {
        let node = graph.node(id);
        let (rows, cols) = extents(graph, id);
        let ins: Vec<Slot> = node.inputs.iter().map(|i| slot_of[i.0].expect("topological order")).collect();

        let in_place = match (&node.op, node.inputs.as_slice()) {
            (PrimitiveKind::Mul, [f, a]) => {
                let is_acc = matches!(&graph.node(*a).op, PrimitiveKind::Input(n) if n == "acc");
                (is_acc && last[a.0] == pos && extents(graph, *a) == (rows, cols))
                    .then_some((ins[1], ins[0]))
                    .filter(|_| f != a)
            }
            _ => None,
        };
        if let Some((acc, factor)) = in_place {
            slot_of[id.0] = Some(acc);
            slots[acc].ranges.push((pos, last[id.0]));
            busy_until[acc] = last[id.0];
            stmts.push(Stmt::Rescale { acc, factor });
            origin.push(Some(id));
            continue;
        }

        let free = (0..slots.len()).find(|&s| busy_until[s] < pos && (slots[s].rows, slots[s].cols) == (rows, cols));
        let slot = match free {
            Some(s) => s,
            None => {
                slots.push(SlotInfo { rows, cols, ranges: Vec::new() });
                busy_until.push(0);
                let s = slots.len() - 1;
                stmts.push(Stmt::Declare { slot: s, rows, cols, tier: MemoryLocation::Register });
                origin.push(None);
                s
            }
        };
        slots[slot].ranges.push((pos, last[id.0]));
        busy_until[slot] = last[id.0];
        slot_of[id.0] = Some(slot);
        stmts.push(match &node.op {
            PrimitiveKind::Input(name) => Stmt::CopyIn { tensor: name.clone(), slot, stage: 0 },
            op if op.is_row_reduce() => Stmt::RowReduce { slot, kind: op.clone(), operand: ins[0] },
            op => Stmt::Compute { slot, op: op.clone(), operands: ins },
        });
        origin.push(Some(id));
    }
    for (&o, name) in graph.outputs().iter().zip(output_names) {
        stmts.push(Stmt::CopyOut { slot: slot_of[o.0].expect("output is live"), tensor: name.clone() });
        origin.push(None);
    }
    ExprSeq { stmts, origin, slots }
}

/// A named statement sequence inside a kernel template.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: &'static str,
    pub seq: ExprSeq,
}

/// Every fragment of one variant lowered for one tile shape.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProgram {
    pub variant: String,
    pub kind: KernelTemplateKind,
    pub dims: AttnDims,
    /// Tile the fragments were built for, clamped to the problem.
    pub tile: TileShape,
    /// Buffer name and tile extents, in scheduler tensor order.
    pub buffers: Vec<(String, usize, usize)>,
    pub sections: Vec<Section>,
}

impl KernelProgram {
    pub fn section(&self, name: &str) -> Option<&ExprSeq> {
        self.sections.iter().find(|s| s.name == name).map(|s| &s.seq)
    }
}

#[derive(Debug, Error)]
pub enum LoweringError {
    #[error("the {template} template cannot express `{stmt}`")]
    UnsupportedStatement { template: &'static str, stmt: String },
    #[error("plan does not match the lowered program: {0}")]
    InconsistentPlan(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Lowers every fragment of `spec` for tiles of `tile` (clamped to the
/// sequence lengths). Recurrent variants use `tile.m` as the chunk length.
pub fn lower_spec(spec: &AttentionSpec, tile: TileShape) -> Result<KernelProgram, LoweringError> {
    if tile.m == 0 || tile.n == 0 {
        return Err(LoweringError::InconsistentPlan(format!("tile {tile} has a zero extent")));
    }
    let d = spec.dims;
    let kg = KernelGraph::from_spec(spec)?;
    let kind = kg.kind;
    let tile = match kind {
        KernelTemplateKind::ParallelOnline => TileShape { m: tile.m.min(d.seq_q), n: tile.n.min(d.seq_k) },
        KernelTemplateKind::RecurrentChunked => {
            let c = tile.m.min(d.seq_q);
            TileShape { m: c, n: c }
        }
    };
    let buffers = kg
        .tensors
        .iter()
        .map(|t| {
            let (r, c) = t.tile_extents(tile);
            (t.name.clone(), r, c)
        })
        .collect();
    let mut sections = Vec::new();
    match kind {
        KernelTemplateKind::ParallelOnline => {
            let sec = build_sections(spec, TileExtents { rows: tile.m, cols: tile.n })?;
            let mut carried = sec.rowscales.clone();
            carried.push("acc".into());
            sections.push(Section { name: "prologue", seq: generate(&sec.prologue, &carried) });
            sections.push(Section { name: "fwd", seq: generate(&sec.body, &carried) });
            sections.push(Section { name: "epilogue", seq: generate(&sec.epilogue, &names(&["o"])) });
        }
        KernelTemplateKind::RecurrentChunked => {
            let sub = spec.with_dims(AttnDims { seq_q: tile.m, seq_k: tile.m, ..d });
            let def = build_recurrent(&sub)?;
            let scale = def.scale.as_ref().ok_or_else(|| LoweringError::UnsupportedStatement {
                template: kind.name(),
                stmt: "h_mod without per-position factors".into(),
            })?;
            sections.push(Section { name: "mods", seq: generate(&def.mods, &names(&["qm", "km", "vm"])) });
            sections.push(Section { name: "decay", seq: generate(scale, &names(&["a"])) });
            if let Some(g) = &def.output {
                sections.push(Section { name: "output", seq: generate(g, &names(&["o"])) });
            }
        }
    }
    Ok(KernelProgram { variant: spec.name.clone(), kind, dims: d, tile, buffers, sections })
}
