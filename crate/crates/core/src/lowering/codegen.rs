use std::fmt::Write;

use super::{ExprSeq, KernelProgram, LoweringError, Stmt};
use crate::graph::PrimitiveKind;
use crate::schedule::{ExecutionPlan, KernelTemplateKind};

fn t(slot: usize) -> String {
    format!("t{slot}")
}

fn literal(v: f64) -> String {
    format!("{v:?}")
}

/// Right-hand side of a compute statement. One fixed template per primitive.
fn render_op(op: &PrimitiveKind, a: &[String]) -> String {
    use PrimitiveKind::*;
    match op {
        Add => format!("{} + {}", a[0], a[1]),
        Sub => format!("{} - {}", a[0], a[1]),
        Mul => format!("{} * {}", a[0], a[1]),
        Div => format!("{} / {}", a[0], a[1]),
        Neg => format!("-{}", a[0]),
        Cmp(c) => format!("({} {} {})", a[0], c.symbol(), a[1]),
        Clamp { lo, hi } => format!("clamp({}, {}, {})", a[0], literal(*lo), literal(*hi)),
        Where => format!("select({}, {}, {})", a[0], a[1], a[2]),
        Const(v) => format!("splat({})", literal(*v)),
        Broadcast(shape) => {
            let ext: Vec<String> = shape.iter().map(|d| d.extent().to_string()).collect();
            format!("broadcast<{}>({})", ext.join("x"), a[0])
        }
        Row(i) => format!("row({}, {i})", a[0]),
        ScatterRow { index, rows } => format!("scatter_row({}, {index}, {})", a[0], rows.extent()),
        Input(name) => format!("load({name})"),
        other => format!("{}({})", other.mnemonic(), a.join(", ")),
    }
}

/// Loop-streamed inputs and the stage expression that rotates through their
/// buffers.
struct Staging<'a> {
    streamed: &'a [&'a str],
    expr: &'a str,
}

fn render_stmt(s: &Stmt, indent: &str, staging: &Staging, out: &mut String) {
    let line = match s {
        Stmt::Declare { slot, rows, cols, tier } => format!("decl {} [{rows} x {cols}] @{tier};", t(*slot)),
        Stmt::CopyIn { tensor, slot, stage } => {
            if staging.streamed.contains(&tensor.as_str()) {
                format!("copy_in {tensor} -> {} stage {};", t(*slot), staging.expr)
            } else {
                format!("copy_in {tensor} -> {} stage {stage};", t(*slot))
            }
        }
        Stmt::Compute { slot, op, operands } => {
            let a: Vec<String> = operands.iter().map(|&o| t(o)).collect();
            format!("{} = {};", t(*slot), render_op(op, &a))
        }
        Stmt::RowReduce { slot, kind, operand } => {
            let name = match kind {
                PrimitiveKind::ReduceSum => "row_sum",
                PrimitiveKind::ReduceMax => "row_max",
                PrimitiveKind::ReduceAbssum => "row_abssum",
                other => other.mnemonic(),
            };
            format!("{} = {name}({});", t(*slot), t(*operand))
        }
        Stmt::Rescale { acc, factor } => format!("rescale {} by {};", t(*acc), t(*factor)),
        Stmt::CopyOut { slot, tensor } => format!("copy_out {} -> {tensor};", t(*slot)),
    };
    let _ = writeln!(out, "{indent}{line}");
}

fn render_section(name: &str, seq: &ExprSeq, indent: &str, staging: &Staging, out: &mut String) {
    let _ = writeln!(out, "{indent}{name} {{");
    let inner = format!("{indent}  ");
    for s in &seq.stmts {
        render_stmt(s, &inner, staging, out);
    }
    let _ = writeln!(out, "{indent}}}");
}

fn reject(template: KernelTemplateKind, seq: &ExprSeq, bad: impl Fn(&Stmt) -> bool) -> Result<(), LoweringError> {
    match seq.stmts.iter().find(|s| bad(s)) {
        Some(s) => Err(LoweringError::UnsupportedStatement { template: template.name(), stmt: format!("{s:?}") }),
        None => Ok(()),
    }
}

/// Buffers loaded once per loop iteration, i.e. all but `resident` and the
/// carried row state.
fn streamed_inputs<'a>(program: &'a KernelProgram, resident: &[&str]) -> Vec<&'a str> {
    let carried = program.section("fwd").map(|s| s.outputs()).unwrap_or_default();
    program
        .buffers
        .iter()
        .map(|(n, _, _)| n.as_str())
        .filter(|n| !resident.contains(n) && !carried.contains(n))
        .collect()
}

/// Renders `program` under `plan` in the portable kernel dialect. The text
/// depends only on its arguments.
pub fn code_generation(program: &KernelProgram, plan: &ExecutionPlan) -> Result<String, LoweringError> {
    let d = program.dims;
    let tile = program.tile;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "// attnforge-kernel v1 variant={} template={} tile={}",
        program.variant,
        program.kind.name(),
        plan.tile_config
    );
    let _ = writeln!(
        out,
        "// dims batch={} heads={} seq_q={} seq_k={} dqk={} dv={}",
        d.batch, d.heads, d.seq_q, d.seq_k, d.dqk, d.dv
    );
    for (name, r, c) in &program.buffers {
        let tier = plan
            .placement(name)
            .ok_or_else(|| LoweringError::InconsistentPlan(format!("plan has no placement for `{name}`")))?;
        let stages = plan.stage(name).unwrap_or(1);
        let _ = writeln!(out, "buffer {name} [{r} x {c}] @{tier} stages={stages};");
    }
    let stages_of = |name: &str| plan.stage(name).unwrap_or(1);
    let _ = writeln!(out, "kernel {} {{", program.variant);
    match program.kind {
        KernelTemplateKind::ParallelOnline => {
            let sec = |n: &str| {
                program.section(n).ok_or_else(|| LoweringError::InconsistentPlan(format!("missing section `{n}`")))
            };
            let (pro, fwd, epi) = (sec("prologue")?, sec("fwd")?, sec("epilogue")?);
            let fixed = Staging { streamed: &[], expr: "0" };
            let _ = writeln!(out, "  for qb in 0..{} parallel {{", d.seq_q.div_ceil(tile.m));
            render_section("prologue", pro, "    ", &fixed, &mut out);
            let _ = writeln!(out, "    for kb in 0..{} {{", d.seq_k.div_ceil(tile.n));
            let streamed = streamed_inputs(program, &["q", "scores", "acc"]);
            let depth = streamed.iter().map(|n| stages_of(n)).max().unwrap_or(1);
            let expr = format!("kb % {depth}");
            render_section("fwd", fwd, "      ", &Staging { streamed: &streamed, expr: &expr }, &mut out);
            let _ = writeln!(out, "    }}");
            render_section("epilogue", epi, "    ", &fixed, &mut out);
            let _ = writeln!(out, "  }}");
        }
        KernelTemplateKind::RecurrentChunked => {
            for s in &program.sections {
                reject(program.kind, &s.seq, |st| matches!(st, Stmt::Rescale { .. } | Stmt::RowReduce { .. }))?;
            }
            let _ = writeln!(out, "  state = zeros [{} x {}];", d.dqk, d.dv);
            let _ = writeln!(out, "  for cb in 0..{} {{", d.seq_q.div_ceil(tile.m));
            let streamed = streamed_inputs(program, &["scores", "state", "factors", "acc"]);
            let depth = streamed.iter().map(|n| stages_of(n)).max().unwrap_or(1);
            let expr = format!("cb % {depth}");
            let staging = Staging { streamed: &streamed, expr: &expr };
            for s in &program.sections {
                if s.name == "output" {
                    continue;
                }
                render_section(s.name, &s.seq, "    ", &staging, &mut out);
            }
            let _ = writeln!(out, "    chunk_core(qm, km, vm, a, state) -> o;");
            if let Some(s) = program.section("output") {
                render_section("output", s, "    ", &staging, &mut out);
            }
            let _ = writeln!(out, "    store o -> out[cb];");
            let _ = writeln!(out, "  }}");
        }
    }
    let _ = writeln!(out, "}}");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowering::lower_spec;
    use crate::schedule::{plan_from_candidate, KernelGraph, MemoryLocation, PlanCandidate, TileShape};
    use crate::spec::builtin;

    fn plan(name: &str, tile: TileShape, scores: MemoryLocation) -> (KernelProgram, ExecutionPlan) {
        let spec = builtin(name).unwrap();
        let kg = KernelGraph::from_spec(&spec).unwrap();
        let mut c = PlanCandidate {
            placements: vec![MemoryLocation::Register; kg.tensors.len()],
            stages: vec![1; kg.tensors.len()],
        };
        let i = kg.tensors.iter().position(|t| t.name == "scores").unwrap();
        c.placements[i] = scores;
        (lower_spec(&spec, tile).unwrap(), plan_from_candidate(&kg, tile, &c, 1.0))
    }

    #[test]
    fn softmax_has_one_of_each_section() {
        let (p, pl) = plan("softmax", TileShape { m: 64, n: 32 }, MemoryLocation::Shared);
        let src = code_generation(&p, &pl).unwrap();
        assert!(src.starts_with("// attnforge-kernel v1 variant=softmax template=parallel_online tile=64x32\n"));
        assert_eq!(src.matches("prologue {").count(), 1);
        assert_eq!(src.matches("epilogue {").count(), 1);
        assert_eq!(src.matches("for kb in").count(), 1);
        assert_eq!(src, code_generation(&p, &pl).unwrap());
    }

    #[test]
    fn scores_placement_changes_one_line() {
        let tile = TileShape { m: 64, n: 64 };
        let (p, a) = plan("softmax", tile, MemoryLocation::Register);
        let (_, b) = plan("softmax", tile, MemoryLocation::Global);
        let (sa, sb) = (code_generation(&p, &a).unwrap(), code_generation(&p, &b).unwrap());
        let diff: Vec<(&str, &str)> = sa.lines().zip(sb.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(sa.lines().count(), sb.lines().count());
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("buffer scores ") && diff[0].1.ends_with("@GLOBAL stages=1;"));
    }

    #[test]
    fn recurrent_template_has_chunk_loop() {
        let (p, pl) = plan("gated-retention", TileShape { m: 64, n: 64 }, MemoryLocation::Shared);
        let src = code_generation(&p, &pl).unwrap();
        assert!(src.contains("template=recurrent_chunked"));
        assert!(src.contains("for cb in 0..") && src.contains("chunk_core(qm, km, vm, a, state) -> o;"));
    }

    #[test]
    fn rescale_is_rejected_by_the_recurrent_template() {
        let (mut p, pl) = plan("gated-retention", TileShape { m: 64, n: 64 }, MemoryLocation::Shared);
        p.sections[0].seq.stmts.push(Stmt::Rescale { acc: 0, factor: 0 });
        assert!(matches!(code_generation(&p, &pl), Err(LoweringError::UnsupportedStatement { .. })));
    }
}
