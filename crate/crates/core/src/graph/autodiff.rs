//! Reverse-mode differentiation by graph extension.
//!
//! `backward` appends adjoint nodes to a copy of the graph and links every
//! differentiated node to its adjoint through the `grad` field. Adjoint
//! contributions from several consumers are summed in ascending consumer id.

use super::{extents, shape_to_string, CmpOp, Dim, Graph, GraphError, NodeId, PrimitiveKind, TensorRole};

impl Graph {
    /// Differentiates `output` (seeded with ones of its shape, i.e. the
    /// gradient of `sum(output)`) with respect to `wrt`.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<Graph, GraphError> {
        if output.0 >= self.nodes.len() {
            return Err(GraphError::UnknownInput(output));
        }
        let reach = self.ancestors(output);
        for &w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(GraphError::UnknownInput(w));
            }
            if !reach[w.0] {
                return Err(GraphError::Unreachable(w));
            }
        }
        let n = self.nodes.len();
        let mut depends = vec![false; n];
        for &w in wrt {
            depends[w.0] = true;
        }
        for node in &self.nodes {
            if node.inputs.iter().any(|i| depends[i.0]) {
                depends[node.id.0] = true;
            }
        }

        let mut g = self.clone();
        let mut b = Builder { g: &mut g };
        let mut contribs: Vec<Vec<(usize, NodeId)>> = vec![Vec::new(); n];
        let seed = b.ones_like(output)?;
        contribs[output.0].push((output.0, seed));

        for id in (0..=output.0).rev() {
            if !reach[id] || !depends[id] || contribs[id].is_empty() {
                continue;
            }
            let mut parts = std::mem::take(&mut contribs[id]);
            parts.sort_by_key(|(consumer, _)| *consumer);
            let mut adj = parts[0].1;
            for &(_, p) in &parts[1..] {
                adj = b.op(PrimitiveKind::Add, &[adj, p])?;
            }
            b.g.set_grad(NodeId(id), adj);

            let node = self.nodes[id].clone();
            let y = node.id;
            let ins = &node.inputs;
            let need = |k: usize| depends[ins[k].0];
            let mut push = |k: usize, c: NodeId| contribs[ins[k].0].push((id, c));

            use PrimitiveKind::*;
            match &node.op {
                Input(_) | Const(_) | Cmp(_) | FirstMaxMask => {}
                Add => {
                    for k in 0..2 {
                        if need(k) {
                            push(k, b.sum_to(adj, ins[k])?);
                        }
                    }
                }
                Sub => {
                    if need(0) {
                        push(0, b.sum_to(adj, ins[0])?);
                    }
                    if need(1) {
                        let neg = b.op(Neg, &[adj])?;
                        push(1, b.sum_to(neg, ins[1])?);
                    }
                }
                Mul => {
                    if need(0) {
                        let t = b.op(Mul, &[adj, ins[1]])?;
                        push(0, b.sum_to(t, ins[0])?);
                    }
                    if need(1) {
                        let t = b.op(Mul, &[adj, ins[0]])?;
                        push(1, b.sum_to(t, ins[1])?);
                    }
                }
                Div => {
                    if need(0) {
                        let t = b.op(Div, &[adj, ins[1]])?;
                        push(0, b.sum_to(t, ins[0])?);
                    }
                    if need(1) {
                        // d(a/b)/db = -(a/b)/b
                        let gy = b.op(Mul, &[adj, y])?;
                        let q = b.op(Div, &[gy, ins[1]])?;
                        let neg = b.op(Neg, &[q])?;
                        push(1, b.sum_to(neg, ins[1])?);
                    }
                }
                Neg => push(0, b.op(Neg, &[adj])?),
                Exp => push(0, b.op(Mul, &[adj, y])?),
                Exp2 => {
                    let gy = b.op(Mul, &[adj, y])?;
                    let ln2 = b.g.constant(std::f64::consts::LN_2);
                    push(0, b.op(Mul, &[gy, ln2])?);
                }
                Log => push(0, b.op(Div, &[adj, ins[0]])?),
                Abs => push(0, b.times_sign(adj, ins[0])?),
                Tanh => {
                    let one = b.g.constant(1.0);
                    let yy = b.op(Mul, &[y, y])?;
                    let d = b.op(Sub, &[one, yy])?;
                    push(0, b.op(Mul, &[adj, d])?);
                }
                Sigmoid => {
                    let one = b.g.constant(1.0);
                    let c = b.op(Sub, &[one, y])?;
                    let d = b.op(Mul, &[y, c])?;
                    push(0, b.op(Mul, &[adj, d])?);
                }
                Sqrt => {
                    let two = b.g.constant(2.0);
                    let d = b.op(Mul, &[two, y])?;
                    push(0, b.op(Div, &[adj, d])?);
                }
                Max | Min => {
                    // Ties route to the first operand.
                    let cmp = if node.op == Max { CmpOp::Ge } else { CmpOp::Le };
                    let first = b.op(Cmp(cmp), &[ins[0], ins[1]])?;
                    let zero = b.g.constant(0.0);
                    if need(0) {
                        let t = b.op(Where, &[first, adj, zero])?;
                        push(0, b.sum_to(t, ins[0])?);
                    }
                    if need(1) {
                        let t = b.op(Where, &[first, zero, adj])?;
                        push(1, b.sum_to(t, ins[1])?);
                    }
                }
                Clamp { lo, hi } => {
                    let lo = b.g.constant(*lo);
                    let hi = b.g.constant(*hi);
                    let above = b.op(Cmp(CmpOp::Ge), &[ins[0], lo])?;
                    let below = b.op(Cmp(CmpOp::Le), &[ins[0], hi])?;
                    let inside = b.op(Mul, &[above, below])?;
                    let zero = b.g.constant(0.0);
                    push(0, b.op(Where, &[inside, adj, zero])?);
                }
                Where => {
                    let zero = b.g.constant(0.0);
                    if need(1) {
                        let t = b.op(Where, &[ins[0], adj, zero])?;
                        push(1, b.sum_to(t, ins[1])?);
                    }
                    if need(2) {
                        let t = b.op(Where, &[ins[0], zero, adj])?;
                        push(2, b.sum_to(t, ins[2])?);
                    }
                }
                Broadcast(_) => push(0, b.sum_to(adj, ins[0])?),
                ReduceSum => push(0, b.broadcast_to(adj, ins[0])?),
                ReduceMax => {
                    let spread = b.broadcast_to(adj, ins[0])?;
                    let mask = b.op(FirstMaxMask, &[ins[0]])?;
                    push(0, b.op(Mul, &[spread, mask])?);
                }
                ReduceAbssum => {
                    let spread = b.broadcast_to(adj, ins[0])?;
                    push(0, b.times_sign(spread, ins[0])?);
                }
                MatMul => {
                    if need(0) {
                        let bt = b.op(Transpose, &[ins[1]])?;
                        push(0, b.op(MatMul, &[adj, bt])?);
                    }
                    if need(1) {
                        let at = b.op(Transpose, &[ins[0]])?;
                        push(1, b.op(MatMul, &[at, adj])?);
                    }
                }
                Transpose => push(0, b.op(Transpose, &[adj])?),
                Row(index) => {
                    let rows = self.shape(ins[0])[0];
                    push(0, b.op(ScatterRow { index: *index, rows }, &[adj])?);
                }
                ScatterRow { index, .. } => push(0, b.op(Row(*index), &[adj])?),
            }
        }
        Ok(g)
    }
}

struct Builder<'a> {
    g: &'a mut Graph,
}

impl Builder<'_> {
    fn op(&mut self, op: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        self.g.add_with_role(op, inputs, TensorRole::Grad)
    }

    fn ones_like(&mut self, id: NodeId) -> Result<NodeId, GraphError> {
        let one = self.g.constant(1.0);
        let shape = self.g.shape(id).to_vec();
        if shape.is_empty() {
            return Ok(one);
        }
        self.op(PrimitiveKind::Broadcast(shape), &[one])
    }

    /// `g * sign(x)` with `sign(0) = 0`, matching a central difference at an
    /// exact zero.
    fn times_sign(&mut self, g: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        use PrimitiveKind::{Cmp, Neg, Where};
        let zero = self.g.constant(0.0);
        let pos = self.op(Cmp(CmpOp::Gt), &[x, zero])?;
        let neg = self.op(Cmp(CmpOp::Lt), &[x, zero])?;
        let minus = self.op(Neg, &[g])?;
        let inner = self.op(Where, &[neg, minus, zero])?;
        self.op(Where, &[pos, g, inner])
    }

    fn broadcast_to(&mut self, x: NodeId, like: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.g.shape(like).to_vec();
        if self.g.shape(x) == shape.as_slice() {
            return Ok(x);
        }
        self.op(PrimitiveKind::Broadcast(shape), &[x])
    }

    /// Sums a gradient over the axes along which `like` was broadcast.
    fn sum_to(&mut self, x: NodeId, like: NodeId) -> Result<NodeId, GraphError> {
        let target: Vec<Dim> = self.g.shape(like).to_vec();
        let from: Vec<Dim> = self.g.shape(x).to_vec();
        if extents(&from) == extents(&target) {
            return Ok(x);
        }
        let unsupported =
            || GraphError::UnsupportedBroadcast { from: shape_to_string(&from), to: shape_to_string(&target) };
        if from.len() != 2 || target.len() != 2 {
            return Err(unsupported());
        }
        let mut cur = x;
        if target[1].extent() == 1 && from[1].extent() != 1 {
            cur = self.op(PrimitiveKind::ReduceSum, &[cur])?;
        }
        if target[0].extent() == 1 && from[0].extent() != 1 {
            let t = self.op(PrimitiveKind::Transpose, &[cur])?;
            let r = self.op(PrimitiveKind::ReduceSum, &[t])?;
            cur = self.op(PrimitiveKind::Transpose, &[r])?;
        }
        if extents(self.g.shape(cur)) != extents(&target) {
            return Err(unsupported());
        }
        Ok(cur)
    }
}
