use std::collections::HashMap;

use super::ops::apply;
use super::tensor::Matrix;
use super::EngineError;
use crate::graph::{Graph, NodeId, PrimitiveKind};

pub type Bindings = HashMap<String, Matrix>;

/// Node values produced by [`evaluate`]; only ancestors of the requested
/// targets are populated.
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Option<Matrix>>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Matrix {
        self.values[id.0].as_ref().expect("node was not evaluated")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Matrix> {
        self.values[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        self.values[id.0].take().expect("node was not evaluated")
    }
}

fn extents2(graph: &Graph, id: NodeId) -> (usize, usize) {
    match graph.shape(id) {
        [] => (1, 1),
        [r, c] => (r.extent(), c.extent()),
        other => panic!("rank-{} tensors are not supported by the dense evaluator", other.len()),
    }
}

/// Evaluates every ancestor of `targets` in id order.
pub fn evaluate(graph: &Graph, bindings: &Bindings, targets: &[NodeId]) -> Result<Values, EngineError> {
    let mut needed = vec![false; graph.len()];
    for &t in targets {
        for (i, a) in graph.ancestors(t).into_iter().enumerate() {
            needed[i] |= a;
        }
    }
    let mut values: Vec<Option<Matrix>> = vec![None; graph.len()];
    for node in graph.nodes() {
        if !needed[node.id.0] {
            continue;
        }
        let (rows, cols) = extents2(graph, node.id);
        let value = if let PrimitiveKind::Input(name) = &node.op {
            let m = bindings.get(name).ok_or_else(|| EngineError::MissingBinding(name.clone()))?;
            if (m.rows, m.cols) != (rows, cols) {
                return Err(EngineError::BindingShape {
                    name: name.clone(),
                    expected: (rows, cols),
                    got: (m.rows, m.cols),
                });
            }
            m.clone()
        } else {
            let args: Vec<&Matrix> =
                node.inputs.iter().map(|i| values[i.0].as_ref().expect("topological order")).collect();
            apply(&node.op, &args, (rows, cols))
        };
        values[node.id.0] = Some(value);
    }
    Ok(Values { values })
}

/// Convenience wrapper returning the graph's declared outputs in order.
pub fn evaluate_outputs(graph: &Graph, bindings: &Bindings) -> Result<Vec<Matrix>, EngineError> {
    let outs = graph.outputs().to_vec();
    let vals = evaluate(graph, bindings, &outs)?;
    Ok(outs.iter().map(|&o| vals.get(o).clone()).collect())
}
