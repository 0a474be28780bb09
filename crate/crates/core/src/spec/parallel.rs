//! Parallel template: `S = mod(Q) mod(K)^T`, score modifications, row
//! normalization, `O = S mod(V)`, output modification.

use super::{AttentionSpec, ModificationFn, OnlineRowNorm, Pattern, SpecError};
use crate::expr::{lower, Expr, LowerContext, Scope};
use crate::graph::{Dim, DimKind, Graph, NodeId, PrimitiveKind};

/// Full-size parallel graph for one (batch, head) pair.
#[derive(Debug, Clone)]
pub struct ParallelGraph {
    pub graph: Graph,
    pub output: NodeId,
}

/// Actual extents of one query/key tile (ragged edge tiles are smaller).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileExtents {
    pub rows: usize,
    pub cols: usize,
}

/// The three sections of the online template for one tile shape.
///
/// * `prologue`: no inputs; outputs the initial rowscales then `acc`.
/// * `body`: inputs are the q/k/v tiles, extras tiles, `row_idx`/`col_idx`,
///   the rowscales and `acc`; outputs the updated rowscales then `acc`.
/// * `epilogue`: inputs are the rowscales and `acc`; outputs the tile of `o`.
#[derive(Debug, Clone)]
pub struct SectionGraphs {
    pub tile: TileExtents,
    pub rowscales: Vec<String>,
    pub prologue: Graph,
    pub body: Graph,
    pub epilogue: Graph,
}

pub(crate) struct Template<'a> {
    pub spec: &'a AttentionSpec,
    pub rows: Dim,
    pub cols: Dim,
}

impl<'a> Template<'a> {
    pub fn new(spec: &'a AttentionSpec, rows: usize, cols: usize) -> Template<'a> {
        Template { spec, rows: Dim::of(DimKind::SeqQ, rows), cols: Dim::of(DimKind::SeqK, cols) }
    }

    fn dim(&self, kind: DimKind) -> Dim {
        match kind {
            DimKind::SeqQ => self.rows,
            DimKind::SeqK => self.cols,
            k => self.spec.dims.dim(k),
        }
    }

    pub fn const_scope(&self) -> Scope {
        let mut s = Scope::new();
        for (n, v) in self.spec.dims.constants() {
            s.bind_const(n, v);
        }
        s
    }

    /// Binds placeholders (declared on first use) for extras mentioned by any of `exprs`.
    pub fn declare_extras(&self, g: &mut Graph, scope: &mut Scope, exprs: &[&Expr]) -> Result<(), SpecError> {
        for e in &self.spec.extras {
            if exprs.iter().any(|x| x.mentions(&e.name)) {
                let id = match g.placeholder_id(&e.name) {
                    Some(id) => id,
                    None => g.placeholder(&e.name, e.axes.iter().map(|&k| self.dim(k)).collect())?,
                };
                scope.bind(&e.name, id);
            }
        }
        Ok(())
    }

    pub fn lower_in(
        g: &mut Graph,
        expr: &Expr,
        scope: &Scope,
        ctx: LowerContext,
        context: &str,
    ) -> Result<NodeId, SpecError> {
        lower(expr, scope, g, ctx).map_err(|e| SpecError::lowering(context, expr, e))
    }

    fn apply_mod(
        g: &mut Graph,
        m: Option<&ModificationFn>,
        var: &str,
        input: NodeId,
        base: &Scope,
        context: &str,
    ) -> Result<NodeId, SpecError> {
        let Some(m) = m else { return Ok(input) };
        let mut scope = base.clone();
        scope.bind(var, input);
        let out = Self::lower_in(g, &m.expr, &scope, LowerContext::ElementwiseOnly, context)?;
        if g.shape(out) != g.shape(input) {
            return Err(SpecError::ShapeInconsistent {
                context: context.into(),
                error: crate::graph::GraphError::ShapeMismatch {
                    op: "modification",
                    lhs: crate::graph::shape_to_string(g.shape(input)),
                    rhs: crate::graph::shape_to_string(g.shape(out)),
                },
            });
        }
        Ok(out)
    }

    fn score_exprs(&self) -> Vec<&'a Expr> {
        let s = self.spec;
        let mut v: Vec<&Expr> = [&s.q_mod, &s.k_mod, &s.v_mod].into_iter().flatten().map(|m| &m.expr).collect();
        v.extend(s.score_mods.iter().map(|m| &m.expr));
        v
    }

    /// q/k/v placeholders, extras, position indices; returns modified q, k, v
    /// and the scope visible to score modifications.
    fn inputs(&self, g: &mut Graph) -> Result<(NodeId, NodeId, NodeId, Scope), SpecError> {
        let spec = self.spec;
        let dqk = spec.dims.dim(DimKind::DimQK);
        let dv = spec.dims.dim(DimKind::DimV);
        let q = g.placeholder("q", vec![self.rows, dqk])?;
        let k = g.placeholder("k", vec![self.cols, dqk])?;
        let v = g.placeholder("v", vec![self.cols, dv])?;
        let mut scope = self.const_scope();
        self.declare_extras(g, &mut scope, &self.score_exprs())?;
        for idx in ["row_idx", "col_idx"] {
            if spec.score_mods_use(idx) {
                let id = g.placeholder(idx, vec![self.rows, self.cols])?;
                scope.bind(idx, id);
            }
        }
        let qm = Self::apply_mod(g, spec.q_mod.as_ref(), "q", q, &scope, "q_mod")?;
        let km = Self::apply_mod(g, spec.k_mod.as_ref(), "k", k, &scope, "k_mod")?;
        let vm = Self::apply_mod(g, spec.v_mod.as_ref(), "v", v, &scope, "v_mod")?;
        Ok((qm, km, vm, scope))
    }

    fn scores(&self, g: &mut Graph, scope: &Scope, qm: NodeId, km: NodeId) -> Result<NodeId, SpecError> {
        let kt = g.add_node(PrimitiveKind::Transpose, &[km])?;
        let mut s = g.add_node(PrimitiveKind::MatMul, &[qm, kt])?;
        for (i, m) in self.spec.score_mods.iter().enumerate() {
            if m.ismask {
                let ctx = format!("mask[{i}]");
                let ind = Self::lower_in(g, &m.expr, scope, LowerContext::ElementwiseOnly, &ctx)?;
                let fill = if self.spec.exp_downstream_of(i) { f64::NEG_INFINITY } else { 0.0 };
                let fill = g.constant(fill);
                s = g.add_node(PrimitiveKind::Where, &[ind, s, fill])?;
            } else {
                s = Self::apply_mod(g, Some(m), "scores", s, scope, &format!("score_mod[{i}]"))?;
            }
        }
        Ok(s)
    }

    fn row_shape(&self) -> Vec<Dim> {
        vec![self.rows, Dim::one()]
    }

    fn acc_shape(&self) -> Vec<Dim> {
        vec![self.rows, self.spec.dims.dim(DimKind::DimV)]
    }

    /// Coerces a per-row value to `[rows, 1]`.
    fn per_row(&self, g: &mut Graph, id: NodeId, what: &str) -> Result<NodeId, SpecError> {
        let shape = g.shape(id).to_vec();
        if shape == self.row_shape() {
            return Ok(id);
        }
        if shape.is_empty() || shape.iter().all(|d| d.extent() == 1) {
            return Ok(g.add_node(PrimitiveKind::Broadcast(self.row_shape()), &[id])?);
        }
        Err(SpecError::InvalidRowNorm(format!(
            "{what} must be a per-row scalar, got shape {}",
            crate::graph::shape_to_string(&shape)
        )))
    }

    fn prologue_values(&self, g: &mut Graph, online: &OnlineRowNorm) -> Result<Vec<NodeId>, SpecError> {
        let scope = self.const_scope();
        let mut out = Vec::new();
        for r in &online.rowscales {
            let a = online.prologue.iter().find(|a| &a.name == r).expect("validated prologue");
            let v = Self::lower_in(g, &a.expr, &scope, LowerContext::RowNormAllowed, &format!("prologue `{r}`"))?;
            out.push(self.per_row(g, v, &format!("prologue `{r}`"))?);
        }
        Ok(out)
    }

    fn zero_acc(&self, g: &mut Graph) -> Result<NodeId, SpecError> {
        let z = g.constant(0.0);
        Ok(g.add_node(PrimitiveKind::Broadcast(self.acc_shape()), &[z])?)
    }

    /// One key block of the online loop.
    fn online_step(
        &self,
        g: &mut Graph,
        online: Option<&OnlineRowNorm>,
        s: NodeId,
        vm: NodeId,
        rowscales: &[NodeId],
        acc: NodeId,
    ) -> Result<(Vec<NodeId>, NodeId), SpecError> {
        let Some(online) = online else {
            let pv = g.add_node(PrimitiveKind::MatMul, &[s, vm])?;
            return Ok((vec![], g.add_node(PrimitiveKind::Add, &[acc, pv])?));
        };
        let mut scope = self.const_scope();
        scope.bind("scores", s);
        for (name, &id) in online.rowscales.iter().zip(rowscales) {
            scope.bind(name, id);
        }
        let mut rescale = None;
        for a in &online.fwd {
            let ctx = format!("online fwd `{}`", a.name);
            let v = Self::lower_in(g, &a.expr, &scope, LowerContext::RowNormAllowed, &ctx)?;
            if a.name == "rescale" {
                rescale = Some(self.per_row(g, v, "rescale")?);
            }
            scope.bind(&a.name, v);
        }
        let p = scope.node("scores").expect("scores bound");
        if g.shape(p) != g.shape(s) {
            return Err(SpecError::InvalidRowNorm("fwd must keep the score block shape".into()));
        }
        let mut next = Vec::new();
        for name in &online.rowscales {
            let v = scope.node(name).expect("rowscale bound");
            next.push(self.per_row(g, v, &format!("rowscale `{name}`"))?);
        }
        let pv = g.add_node(PrimitiveKind::MatMul, &[p, vm])?;
        let acc = match rescale {
            Some(r) => g.add_node(PrimitiveKind::Mul, &[r, acc])?,
            None => acc,
        };
        Ok((next, g.add_node(PrimitiveKind::Add, &[acc, pv])?))
    }

    fn epilogue(
        &self,
        g: &mut Graph,
        online: Option<&OnlineRowNorm>,
        rowscales: &[NodeId],
        acc: NodeId,
    ) -> Result<NodeId, SpecError> {
        let o = match online {
            None => acc,
            Some(online) => {
                let mut scope = self.const_scope();
                scope.bind("acc", acc);
                for (name, &id) in online.rowscales.iter().zip(rowscales) {
                    scope.bind(name, id);
                }
                let o = Self::lower_in(g, &online.epilogue, &scope, LowerContext::RowNormAllowed, "online epilogue")?;
                if g.shape(o) != g.shape(acc) {
                    return Err(SpecError::InvalidRowNorm("epilogue must produce the accumulator shape".into()));
                }
                o
            }
        };
        self.output_mod(g, o)
    }

    fn output_mod(&self, g: &mut Graph, o: NodeId) -> Result<NodeId, SpecError> {
        let Some(m) = &self.spec.output_mod else { return Ok(o) };
        let mut scope = self.const_scope();
        self.declare_extras(g, &mut scope, &[&m.expr])?;
        Self::apply_mod(g, Some(m), "o", o, &scope, "output_mod")
    }
}

/// Builds the full-size graph. With a direct row normalization it is applied
/// over complete rows; an online-only row normalization runs as a single key
/// block so the result is bitwise what the tiled executor produces with one
/// block.
pub fn build_parallel(spec: &AttentionSpec) -> Result<ParallelGraph, SpecError> {
    if spec.pattern != Pattern::Parallel {
        return Err(SpecError::PatternMismatch(format!("`{}` is not a parallel variant", spec.name)));
    }
    spec.validate()?;
    let t = Template::new(spec, spec.dims.seq_q, spec.dims.seq_k);
    let mut g = Graph::new();
    let (qm, km, vm, scope) = t.inputs(&mut g)?;
    let s = t.scores(&mut g, &scope, qm, km)?;
    let output = if let Some(direct) = spec.direct() {
        let mut scope = t.const_scope();
        scope.bind("scores", s);
        for a in &direct.steps {
            let ctx = format!("direct rownorm `{}`", a.name);
            let v = Template::lower_in(&mut g, &a.expr, &scope, LowerContext::RowNormAllowed, &ctx)?;
            scope.bind(&a.name, v);
        }
        let p = scope.node("scores").expect("scores bound");
        if g.shape(p) != g.shape(s) {
            return Err(SpecError::InvalidRowNorm("direct rownorm must keep the score shape".into()));
        }
        let o = g.add_node(PrimitiveKind::MatMul, &[p, vm])?;
        t.output_mod(&mut g, o)?
    } else if let Some(online) = spec.online() {
        let init = t.prologue_values(&mut g, online)?;
        let acc0 = t.zero_acc(&mut g)?;
        let (rs, acc) = t.online_step(&mut g, Some(online), s, vm, &init, acc0)?;
        t.epilogue(&mut g, Some(online), &rs, acc)?
    } else {
        let o = g.add_node(PrimitiveKind::MatMul, &[s, vm])?;
        t.output_mod(&mut g, o)?
    };
    g.mark_output(output);
    Ok(ParallelGraph { graph: g, output })
}

/// Builds prologue / body / epilogue graphs for one tile shape.
pub fn build_sections(spec: &AttentionSpec, tile: TileExtents) -> Result<SectionGraphs, SpecError> {
    if !spec.is_tileable() {
        return Err(SpecError::InvalidRowNorm(format!(
            "`{}` has no online row normalization and cannot run blockwise",
            spec.name
        )));
    }
    spec.validate()?;
    let t = Template::new(spec, tile.rows, tile.cols);
    let online = spec.online();
    let rowscales: Vec<String> = online.map(|o| o.rowscales.clone()).unwrap_or_default();

    let mut prologue = Graph::new();
    if let Some(o) = online {
        for id in t.prologue_values(&mut prologue, o)? {
            prologue.mark_output(id);
        }
    }
    let acc0 = t.zero_acc(&mut prologue)?;
    prologue.mark_output(acc0);

    let mut body = Graph::new();
    let (qm, km, vm, scope) = t.inputs(&mut body)?;
    let mut rs_in = Vec::new();
    for name in &rowscales {
        rs_in.push(body.placeholder(name, t.row_shape())?);
    }
    let acc_in = body.placeholder("acc", t.acc_shape())?;
    let s = t.scores(&mut body, &scope, qm, km)?;
    let (rs_out, acc_out) = t.online_step(&mut body, online, s, vm, &rs_in, acc_in)?;
    for id in rs_out {
        body.mark_output(id);
    }
    body.mark_output(acc_out);

    let mut epilogue = Graph::new();
    let mut rs_e = Vec::new();
    for name in &rowscales {
        rs_e.push(epilogue.placeholder(name, t.row_shape())?);
    }
    let acc_e = epilogue.placeholder("acc", t.acc_shape())?;
    let o = t.epilogue(&mut epilogue, online, &rs_e, acc_e)?;
    epilogue.mark_output(o);

    Ok(SectionGraphs { tile, rowscales, prologue, body, epilogue })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{builtin, AttnDims};

    fn small(name: &str) -> AttentionSpec {
        let s = builtin(name).unwrap();
        s.with_dims(AttnDims { batch: 1, heads: 1, seq_q: 8, seq_k: 8, ..s.dims })
    }

    #[test]
    fn relu_has_single_elementwise_node_between_matmuls() {
        let pg = build_parallel(&small("relu")).unwrap();
        let g = &pg.graph;
        let mm: Vec<_> = g.nodes().iter().filter(|n| n.op == PrimitiveKind::MatMul).map(|n| n.id).collect();
        assert_eq!(mm.len(), 2);
        let between: Vec<_> =
            g.nodes()[mm[0].0 + 1..mm[1].0].iter().filter(|n| !matches!(n.op, PrimitiveKind::Const(_))).collect();
        assert_eq!(between.len(), 1);
        assert_eq!(between[0].op, PrimitiveKind::Max);
    }

    #[test]
    fn softmax_sections_follow_online_structure() {
        let spec = small("softmax");
        let sec = build_sections(&spec, TileExtents { rows: 4, cols: 3 }).unwrap();
        assert_eq!(sec.rowscales, ["m", "l"]);
        assert_eq!(sec.prologue.outputs().len(), 3);
        assert_eq!(sec.body.outputs().len(), 3);
        let ops: Vec<_> = sec.body.nodes().iter().map(|n| n.op.mnemonic()).collect();
        for needed in ["reduce_max", "exp", "reduce_sum", "matmul"] {
            assert!(ops.contains(&needed), "{needed} missing from {ops:?}");
        }
        assert_eq!(sec.body.shape(sec.body.outputs()[2]), &[Dim::of(DimKind::SeqQ, 4), Dim::of(DimKind::DimV, 128)]);
    }

    #[test]
    fn undeclared_extra_is_reported() {
        let mut spec = small("relu");
        spec.score_mods = vec![ModificationFn::parse("scores * mask").unwrap()];
        match build_parallel(&spec) {
            Err(SpecError::MissingExtraInput { name, .. }) => assert_eq!(name, "mask"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn direct_only_spec_is_not_tileable() {
        let mut spec = small("softmax");
        spec.rownorm.as_mut().unwrap().online = None;
        assert!(build_sections(&spec, TileExtents { rows: 8, cols: 8 }).is_err());
        assert!(build_parallel(&spec).is_ok());
    }

    #[test]
    fn causal_mask_fill_depends_on_exp_downstream() {
        let mut soft = small("softmax");
        soft.score_mods.push(ModificationFn::causal());
        let g = build_parallel(&soft).unwrap().graph;
        assert!(g.nodes().iter().any(|n| n.op == PrimitiveKind::Const(f64::NEG_INFINITY)));
        let mut relu = small("relu");
        relu.score_mods.push(ModificationFn::causal());
        let g = build_parallel(&relu).unwrap().graph;
        assert!(!g.nodes().iter().any(|n| n.op == PrimitiveKind::Const(f64::NEG_INFINITY)));
    }
}
