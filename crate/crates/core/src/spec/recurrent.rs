//! Recurrent template: `h_t = h_mod(h_{t-1}) + mod(k_t)^T mod(v_t)`,
//! `o_t = mod(q_t) h_t`, with `h_0 = 0` and `h` of shape `[dqk, dv]`.

use log::warn;

use super::parallel::Template;
use super::{AttentionSpec, Pattern, SpecError};
use crate::expr::{BinOp, Expr, LowerContext};
use crate::graph::{Dim, DimKind, Graph, NodeId, PrimitiveKind};

/// Graph fragments of the recurrence for one (batch, head) pair.
#[derive(Debug, Clone)]
pub struct RecurrenceDef {
    /// Inputs `q`, `k`, `v` and referenced extras at full length; outputs the
    /// modified q, k, v. Every node is row-local, so rows may be sliced freely.
    pub mods: Graph,
    /// Input `h` plus per-step rows (`[1, ..]`) of the extras it reads;
    /// outputs `h_mod(h)`.
    pub step: Graph,
    /// When `h_mod` is `h` times `h`-free factors: the per-step factor for
    /// all steps at once (`[seq, 1]`, or a scalar). Required by the chunked
    /// closed form.
    pub scale: Option<Graph>,
    /// Input `o` (`[seq_q, dv]`); outputs the modified output.
    pub output: Option<Graph>,
}

/// Extras with a sequence axis are read one row per step.
fn per_step_shape(shape: &[Dim]) -> Vec<Dim> {
    shape.iter().map(|d| if matches!(d.kind(), DimKind::SeqQ | DimKind::SeqK) { Dim::one() } else { *d }).collect()
}

fn has_seq_axis(spec: &AttentionSpec, name: &str) -> bool {
    spec.extra(name).is_some_and(|e| e.axes.iter().any(|k| matches!(k, DimKind::SeqQ | DimKind::SeqK)))
}

/// `h` times factors that do not mention `h`, via `*` and `/` only.
fn is_diagonal_scale(e: &Expr) -> bool {
    match e {
        Expr::Var(n) => n == "h",
        Expr::Binary(BinOp::Mul, a, b) => match (a.mentions("h"), b.mentions("h")) {
            (true, false) => is_diagonal_scale(a),
            (false, true) => is_diagonal_scale(b),
            _ => false,
        },
        Expr::Binary(BinOp::Div, a, b) => !b.mentions("h") && is_diagonal_scale(a),
        _ => false,
    }
}

fn check_recurrent(spec: &AttentionSpec) -> Result<(), SpecError> {
    if spec.pattern != Pattern::Recurrent {
        return Err(SpecError::PatternMismatch(format!("`{}` is not a recurrent variant", spec.name)));
    }
    spec.validate()?;
    if spec.h_mod.is_none() {
        if spec.extra("decay").is_some() {
            return Err(SpecError::HModMissing);
        }
        warn!("`{}` has no h_mod; using the identity state update", spec.name);
    }
    Ok(())
}

/// q/k/v with modifications over `rows` positions; returns (graph-local)
/// modified ids. Extras are declared by the template helper.
fn mods_into(spec: &AttentionSpec, g: &mut Graph) -> Result<(NodeId, NodeId, NodeId), SpecError> {
    let t = Template::new(spec, spec.dims.seq_q, spec.dims.seq_k);
    let dqk = spec.dims.dim(DimKind::DimQK);
    let dv = spec.dims.dim(DimKind::DimV);
    let q = g.placeholder("q", vec![t.rows, dqk])?;
    let k = g.placeholder("k", vec![t.cols, dqk])?;
    let v = g.placeholder("v", vec![t.cols, dv])?;
    let mut scope = t.const_scope();
    let exprs: Vec<&Expr> = [&spec.q_mod, &spec.k_mod, &spec.v_mod].into_iter().flatten().map(|m| &m.expr).collect();
    t.declare_extras(g, &mut scope, &exprs)?;
    let mut apply =
        |g: &mut Graph, m: &Option<super::ModificationFn>, var: &str, id: NodeId| -> Result<NodeId, SpecError> {
            let Some(m) = m else { return Ok(id) };
            scope.bind(var, id);
            let out = Template::lower_in(g, &m.expr, &scope, LowerContext::ElementwiseOnly, &format!("{var}_mod"))?;
            if g.shape(out) != g.shape(id) {
                return Err(SpecError::ShapeInconsistent {
                    context: format!("{var}_mod"),
                    error: crate::graph::GraphError::ShapeMismatch {
                        op: "modification",
                        lhs: crate::graph::shape_to_string(g.shape(id)),
                        rhs: crate::graph::shape_to_string(g.shape(out)),
                    },
                });
            }
            Ok(out)
        };
    let qm = apply(g, &spec.q_mod, "q", q)?;
    let km = apply(g, &spec.k_mod, "k", k)?;
    let vm = apply(g, &spec.v_mod, "v", v)?;
    Ok((qm, km, vm))
}

pub fn build_recurrent(spec: &AttentionSpec) -> Result<RecurrenceDef, SpecError> {
    check_recurrent(spec)?;
    let t = Template::new(spec, spec.dims.seq_q, spec.dims.seq_k);
    let state_shape = vec![spec.dims.dim(DimKind::DimQK), spec.dims.dim(DimKind::DimV)];

    let mut mods = Graph::new();
    let (qm, km, vm) = mods_into(spec, &mut mods)?;
    for id in [qm, km, vm] {
        mods.mark_output(id);
    }

    let mut step = Graph::new();
    let h = step.placeholder("h", state_shape.clone())?;
    let mut scale = None;
    match &spec.h_mod {
        None => step.mark_output(h),
        Some(m) => {
            let mut scope = t.const_scope();
            scope.bind("h", h);
            for e in &spec.extras {
                if m.expr.mentions(&e.name) {
                    let id = step.placeholder(&e.name, per_step_shape(&e.shape(&spec.dims)))?;
                    scope.bind(&e.name, id);
                }
            }
            let out = Template::lower_in(&mut step, &m.expr, &scope, LowerContext::ElementwiseOnly, "h_mod")?;
            if step.shape(out) != state_shape.as_slice() {
                return Err(SpecError::ShapeInconsistent {
                    context: "h_mod".into(),
                    error: crate::graph::GraphError::ShapeMismatch {
                        op: "h_mod",
                        lhs: crate::graph::shape_to_string(&state_shape),
                        rhs: crate::graph::shape_to_string(step.shape(out)),
                    },
                });
            }
            step.mark_output(out);

            let extras_per_step = m.expr.free_vars().iter().all(|n| spec.extra(n).is_none() || has_seq_axis(spec, n));
            if is_diagonal_scale(&m.expr) && extras_per_step {
                let mut sg = Graph::new();
                let mut scope = t.const_scope();
                scope.bind_const("h", 1.0);
                t.declare_extras(&mut sg, &mut scope, &[&m.expr])?;
                let a = Template::lower_in(&mut sg, &m.expr, &scope, LowerContext::ElementwiseOnly, "h_mod")?;
                let shape = sg.shape(a);
                if shape.is_empty() || (shape.len() == 2 && shape[1].extent() == 1) {
                    sg.mark_output(a);
                    scale = Some(sg);
                }
            }
        }
    }
    if spec.h_mod.is_none() {
        let mut sg = Graph::new();
        let one = sg.constant(1.0);
        sg.mark_output(one);
        scale = Some(sg);
    }

    let output = match &spec.output_mod {
        None => None,
        Some(m) => {
            let mut g = Graph::new();
            let o = g.placeholder("o", vec![t.rows, spec.dims.dim(DimKind::DimV)])?;
            let mut scope = t.const_scope();
            t.declare_extras(&mut g, &mut scope, &[&m.expr])?;
            scope.bind("o", o);
            let out = Template::lower_in(&mut g, &m.expr, &scope, LowerContext::ElementwiseOnly, "output_mod")?;
            g.mark_output(out);
            Some(g)
        }
    };
    Ok(RecurrenceDef { mods, step, scale, output })
}

/// The whole recurrence unrolled over the sequence as one graph; used for
/// differentiation.
pub fn build_unrolled(spec: &AttentionSpec) -> Result<(Graph, NodeId), SpecError> {
    check_recurrent(spec)?;
    let t = Template::new(spec, spec.dims.seq_q, spec.dims.seq_k);
    let seq = spec.dims.seq_q;
    let state_shape = vec![spec.dims.dim(DimKind::DimQK), spec.dims.dim(DimKind::DimV)];
    let mut g = Graph::new();
    let (qm, km, vm) = mods_into(spec, &mut g)?;

    // Extras read by h_mod that the modifications did not already declare.
    let mut extras = Vec::new();
    if let Some(m) = &spec.h_mod {
        for e in &spec.extras {
            if m.expr.mentions(&e.name) {
                let id = match g.placeholder_id(&e.name) {
                    Some(id) => id,
                    None => g.placeholder(&e.name, e.shape(&spec.dims))?,
                };
                extras.push((e.name.clone(), id, has_seq_axis(spec, &e.name)));
            }
        }
    }

    let zero = g.constant(0.0);
    let mut h = g.add_node(PrimitiveKind::Broadcast(state_shape.clone()), &[zero])?;
    let mut out: Option<NodeId> = None;
    for step in 0..seq {
        if let Some(m) = &spec.h_mod {
            let mut scope = t.const_scope();
            scope.bind("h", h);
            for (name, id, per_step) in &extras {
                let v = if *per_step { g.add_node(PrimitiveKind::Row(step), &[*id])? } else { *id };
                scope.bind(name, v);
            }
            h = Template::lower_in(&mut g, &m.expr, &scope, LowerContext::ElementwiseOnly, "h_mod")?;
        }
        let kt = g.add_node(PrimitiveKind::Row(step), &[km])?;
        let kt = g.add_node(PrimitiveKind::Transpose, &[kt])?;
        let vt = g.add_node(PrimitiveKind::Row(step), &[vm])?;
        let outer = g.add_node(PrimitiveKind::MatMul, &[kt, vt])?;
        h = g.add_node(PrimitiveKind::Add, &[h, outer])?;
        let qt = g.add_node(PrimitiveKind::Row(step), &[qm])?;
        let ot = g.add_node(PrimitiveKind::MatMul, &[qt, h])?;
        let placed = g.add_node(PrimitiveKind::ScatterRow { index: step, rows: t.rows }, &[ot])?;
        out = Some(match out {
            None => placed,
            Some(acc) => g.add_node(PrimitiveKind::Add, &[acc, placed])?,
        });
    }
    let mut o = out.expect("sequence is non-empty");
    if let Some(m) = &spec.output_mod {
        let mut scope = t.const_scope();
        t.declare_extras(&mut g, &mut scope, &[&m.expr])?;
        scope.bind("o", o);
        o = Template::lower_in(&mut g, &m.expr, &scope, LowerContext::ElementwiseOnly, "output_mod")?;
    }
    g.mark_output(o);
    Ok((g, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_str;

    #[test]
    fn diagonal_scale_detection() {
        for (src, ok) in [
            ("h * decay * gate", true),
            ("h * exp(log(sigmoid(gate)) / 16)", true),
            ("decay * (h / 2)", true),
            ("h", true),
            ("h * h", false),
            ("h + decay", false),
            ("exp(h)", false),
            ("2 / h", false),
        ] {
            assert_eq!(is_diagonal_scale(&parse_str(src).unwrap()), ok, "{src}");
        }
    }
}
