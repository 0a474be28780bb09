use super::{build_parallel, build_unrolled, AttentionSpec, Pattern, SpecError};
use crate::graph::{Graph, NodeId, PrimitiveKind};

/// Forward graph extended with adjoints of `sum(output)`.
#[derive(Debug, Clone)]
pub struct BackwardGraph {
    pub graph: Graph,
    pub output: NodeId,
    /// Gradient node per differentiable input (`q`, `k`, `v`, then extras).
    pub grads: Vec<(String, NodeId)>,
}

/// Differentiates the full pattern graph with respect to q, k, v and every
/// extra input it reads. Inputs that only steer a `where` condition get an
/// explicit zero gradient.
pub fn derive_backward(spec: &AttentionSpec) -> Result<BackwardGraph, SpecError> {
    let (graph, output) = match spec.pattern {
        Pattern::Parallel => {
            let pg = build_parallel(spec)?;
            (pg.graph, pg.output)
        }
        Pattern::Recurrent => build_unrolled(spec)?,
    };
    let reach = graph.ancestors(output);
    let names = ["q", "k", "v"].into_iter().map(String::from).chain(spec.extras.iter().map(|e| e.name.clone()));
    let wrt: Vec<(String, NodeId)> =
        names.filter_map(|n| graph.placeholder_id(&n).filter(|id| reach[id.0]).map(|id| (n, id))).collect();
    let ids: Vec<NodeId> = wrt.iter().map(|(_, id)| *id).collect();
    let mut g = graph.backward(output, &ids)?;
    let mut grads = Vec::new();
    for (name, id) in wrt {
        let grad = match g.grad_of(id) {
            Some(grad) => grad,
            None => {
                let zero = g.constant(0.0);
                g.add_node(PrimitiveKind::Broadcast(g.shape(id).to_vec()), &[zero])?
            }
        };
        g.mark_output(grad);
        grads.push((name, grad));
    }
    Ok(BackwardGraph { graph: g, output, grads })
}
