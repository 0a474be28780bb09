use std::collections::{BTreeMap, HashMap};

use super::{lower_spec, ExprSeq, KernelProgram, LoweringError, Stmt};
use crate::engine::ops::apply;
use crate::engine::{
    blocks, chunk_core, per_slice, Bindings, DenseTensor, EngineError, Matrix, ProblemInstance, SliceInputs,
};
use crate::graph::PrimitiveKind;
use crate::schedule::{ExecutionPlan, KernelGraph, KernelTemplateKind, TileShape};
use crate::spec::AttentionSpec;

/// Runs the statements of `seq` over `inputs`; returns the copied-out
/// tensors by name.
fn run_seq(seq: &ExprSeq, inputs: &Bindings) -> Result<HashMap<String, Matrix>, EngineError> {
    let mut slots: Vec<Option<Matrix>> = vec![None; seq.slots.len()];
    let mut out = HashMap::new();
    let get = |slots: &Vec<Option<Matrix>>, s: usize| -> Matrix { slots[s].clone().expect("slot written before read") };
    for stmt in &seq.stmts {
        match stmt {
            Stmt::Declare { .. } => {}
            Stmt::CopyIn { tensor, slot, .. } => {
                let m = inputs.get(tensor).ok_or_else(|| EngineError::MissingBinding(tensor.clone()))?;
                let info = &seq.slots[*slot];
                if (m.rows, m.cols) != (info.rows, info.cols) {
                    return Err(EngineError::BindingShape {
                        name: tensor.clone(),
                        expected: (info.rows, info.cols),
                        got: (m.rows, m.cols),
                    });
                }
                slots[*slot] = Some(m.clone());
            }
            Stmt::Compute { slot, op, operands } => {
                let args: Vec<&Matrix> =
                    operands.iter().map(|&o| slots[o].as_ref().expect("operand written")).collect();
                let info = &seq.slots[*slot];
                let v = apply(op, &args, (info.rows, info.cols));
                slots[*slot] = Some(v);
            }
            Stmt::RowReduce { slot, kind, operand } => {
                let info = &seq.slots[*slot];
                let v = apply(kind, &[slots[*operand].as_ref().expect("operand written")], (info.rows, info.cols));
                slots[*slot] = Some(v);
            }
            Stmt::Rescale { acc, factor } => {
                let info = &seq.slots[*acc];
                let (f, a) = (get(&slots, *factor), get(&slots, *acc));
                slots[*acc] = Some(apply(&PrimitiveKind::Mul, &[&f, &a], (info.rows, info.cols)));
            }
            Stmt::CopyOut { slot, tensor } => {
                out.insert(tensor.clone(), get(&slots, *slot));
            }
        }
    }
    Ok(out)
}

/// A lowered variant bound to a plan, runnable tile by tile on the
/// reference engine.
#[derive(Debug, Clone)]
pub struct ExecutablePlan {
    spec: AttentionSpec,
    plan: ExecutionPlan,
    /// Programs keyed by tile extents; edge tiles may be ragged.
    programs: BTreeMap<(usize, usize), KernelProgram>,
}

/// Checks that `program` and `plan` describe the same kernel for `spec` and
/// prepares programs for every ragged edge tile.
pub fn bind_executable(
    program: &KernelProgram,
    plan: &ExecutionPlan,
    spec: &AttentionSpec,
) -> Result<ExecutablePlan, LoweringError> {
    let bad = |m: String| Err(LoweringError::InconsistentPlan(m));
    if program.variant != spec.name || program.dims != spec.dims {
        return bad(format!("program was lowered for `{}`, not `{}` at these dims", program.variant, spec.name));
    }
    let tile = plan.tile_config;
    if tile.m == 0 || tile.n == 0 {
        return bad(format!("tile {tile} has a zero extent"));
    }
    let kg = KernelGraph::from_spec(spec)?;
    if kg.kind == KernelTemplateKind::RecurrentChunked && tile.m != tile.n {
        return bad(format!("recurrent chunks are square, got {tile}"));
    }
    let expect = lower_spec(spec, tile)?;
    if expect.tile != program.tile {
        return bad(format!("program tile {} differs from plan tile {}", program.tile, tile));
    }
    let planned: Vec<&str> = plan.placements.iter().map(|(n, _)| n.as_str()).collect();
    let wanted: Vec<&str> = kg.tensors.iter().map(|t| t.name.as_str()).collect();
    if planned != wanted {
        return bad(format!("plan places {planned:?}, kernel has {wanted:?}"));
    }
    let d = spec.dims;
    let mut programs = BTreeMap::new();
    programs.insert((program.tile.m, program.tile.n), program.clone());
    let (rows, cols) = match kg.kind {
        KernelTemplateKind::ParallelOnline => (blocks(d.seq_q, tile.m), blocks(d.seq_k, tile.n)),
        KernelTemplateKind::RecurrentChunked => (blocks(d.seq_q, tile.m), vec![]),
    };
    for r in &rows {
        let key_cols: Vec<usize> = if cols.is_empty() { vec![r.len()] } else { cols.iter().map(|c| c.len()).collect() };
        for c in key_cols {
            if let std::collections::btree_map::Entry::Vacant(e) = programs.entry((r.len(), c)) {
                e.insert(lower_spec(spec, TileShape { m: r.len(), n: c })?);
            }
        }
    }
    Ok(ExecutablePlan { spec: spec.clone(), plan: plan.clone(), programs })
}

fn section<'a>(p: &'a KernelProgram, name: &str) -> &'a ExprSeq {
    p.section(name).expect("lower_spec emits every template section")
}

impl ExecutablePlan {
    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    pub fn run(&self, inst: &ProblemInstance) -> Result<DenseTensor, LoweringError> {
        inst.check(&self.spec)?;
        let spec = &self.spec;
        let d = spec.dims;
        let tile = self.plan.tile_config;
        let out = match KernelGraph::from_spec(spec)?.kind {
            KernelTemplateKind::ParallelOnline => {
                let rows = blocks(d.seq_q, tile.m);
                let cols = blocks(d.seq_k, tile.n);
                per_slice(spec, "lowered parallel", |b, h| {
                    let inputs = SliceInputs::new(spec, inst, b, h);
                    let mut o = Matrix::zeros(d.seq_q, d.dv);
                    for r in &rows {
                        let first = &self.programs[&(r.len(), cols[0].len())];
                        let mut state = run_seq(section(first, "prologue"), &Bindings::new())?;
                        for c in &cols {
                            let p = &self.programs[&(r.len(), c.len())];
                            let fwd = section(p, "fwd");
                            let mut bind = inputs.bind_names(
                                fwd.inputs().into_iter().filter(|n| !state.contains_key(*n)),
                                r.clone(),
                                c.clone(),
                            );
                            bind.extend(state.drain());
                            state = run_seq(fwd, &bind)?;
                        }
                        let res = run_seq(section(first, "epilogue"), &state)?;
                        o.write_rows(r.start, &res["o"]);
                    }
                    Ok(o)
                })?
            }
            KernelTemplateKind::RecurrentChunked => {
                let rows = blocks(d.seq_q, tile.m);
                per_slice(spec, "lowered recurrent", |b, h| {
                    let inputs = SliceInputs::new(spec, inst, b, h);
                    let mut state = Matrix::zeros(d.dqk, d.dv);
                    let mut o = Matrix::zeros(d.seq_q, d.dv);
                    for r in &rows {
                        let p = &self.programs[&(r.len(), r.len())];
                        let mods = section(p, "mods");
                        let m = run_seq(mods, &inputs.bind_names(mods.inputs(), r.clone(), r.clone()))?;
                        let decay = section(p, "decay");
                        let a = &run_seq(decay, &inputs.bind_names(decay.inputs(), r.clone(), r.clone()))?["a"];
                        let a: Vec<f64> =
                            (0..r.len()).map(|t| if a.rows == 1 { a.at(0, 0) } else { a.at(t, 0) }).collect();
                        let mut oc = chunk_core(&m["qm"], &m["km"], &m["vm"], &a, &mut state);
                        if let Some(out) = p.section("output") {
                            let mut bind =
                                inputs.bind_names(out.inputs().into_iter().filter(|n| *n != "o"), r.clone(), r.clone());
                            bind.insert("o".into(), oc);
                            oc = run_seq(out, &bind)?.remove("o").expect("output section writes o");
                        }
                        o.write_rows(r.start, &oc);
                    }
                    Ok(o)
                })?
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_naive_parallel, run_reference};
    use crate::schedule::{plan_from_candidate, MemoryLocation, PlanCandidate};
    use crate::spec::{builtin, builtin_names, AttnDims};

    fn plan_for(spec: &AttentionSpec, tile: TileShape) -> ExecutionPlan {
        let kg = KernelGraph::from_spec(spec).unwrap();
        let n = kg.tensors.len();
        let c = PlanCandidate { placements: vec![MemoryLocation::Shared; n], stages: vec![2; n] };
        plan_from_candidate(&kg, tile, &c, 0.0)
    }

    fn run(spec: &AttentionSpec, tile: TileShape, seed: u64) -> (DenseTensor, DenseTensor) {
        let plan = plan_for(spec, tile);
        let prog = lower_spec(spec, tile).unwrap();
        let exe = bind_executable(&prog, &plan, spec).unwrap();
        let inst = ProblemInstance::random(spec, seed);
        (exe.run(&inst).unwrap(), run_reference(spec, &inst).unwrap())
    }

    #[test]
    fn softmax_16x16_on_64_matches_naive() {
        let spec = builtin("softmax").unwrap().with_dims(AttnDims {
            batch: 1,
            heads: 2,
            seq_q: 64,
            seq_k: 64,
            dqk: 32,
            dv: 16,
        });
        let (got, want) = run(&spec, TileShape { m: 16, n: 16 }, 3);
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn single_key_block_is_bitwise_direct() {
        let mut spec =
            builtin("softmax").unwrap().with_dims(AttnDims { batch: 1, heads: 1, seq_q: 24, seq_k: 24, dqk: 8, dv: 8 });
        spec.rownorm.as_mut().unwrap().direct = None;
        let (got, _) = run(&spec, TileShape { m: 24, n: 24 }, 1);
        let want = run_naive_parallel(&spec, &ProblemInstance::random(&spec, 1)).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn every_builtin_matches_its_oracle_on_ragged_tiles() {
        for name in builtin_names() {
            let spec =
                builtin(name).unwrap().with_dims(AttnDims { batch: 1, heads: 2, seq_q: 40, seq_k: 40, dqk: 8, dv: 8 });
            for tile in [TileShape { m: 16, n: 16 }, TileShape { m: 32, n: 32 }, TileShape { m: 64, n: 64 }] {
                let (got, want) = run(&spec, tile, 5);
                let err = got.max_abs_diff(&want);
                assert!(err <= 1e-10, "{name} {tile}: {err}");
            }
        }
    }

    #[test]
    fn inconsistent_plans_are_rejected() {
        let spec = builtin("softmax").unwrap();
        let tile = TileShape { m: 64, n: 64 };
        let prog = lower_spec(&spec, tile).unwrap();
        let other = plan_for(&spec, TileShape { m: 64, n: 128 });
        assert!(matches!(bind_executable(&prog, &other, &spec), Err(LoweringError::InconsistentPlan(_))));
        let relu_plan = plan_for(&builtin("relu").unwrap(), tile);
        assert!(bind_executable(&prog, &relu_plan, &spec).is_err());

        let rec = builtin("retention-recurrent").unwrap();
        let skew = plan_for(&rec, TileShape { m: 64, n: 32 });
        let prog = lower_spec(&rec, TileShape { m: 64, n: 64 }).unwrap();
        assert!(matches!(bind_executable(&prog, &skew, &rec), Err(LoweringError::InconsistentPlan(_))));
    }
}
