use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{Graph, NodeId};

/// Position of each node's last consumer within a linear order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Liveness {
    /// Position of the node itself in the order.
    pub def: Vec<usize>,
    /// Largest position of any consumer, or the node's own position when unconsumed.
    pub last_use: Vec<usize>,
}

impl Liveness {
    pub fn last_use(&self, id: NodeId) -> usize {
        self.last_use[id.0]
    }
}

impl Graph {
    /// Kahn's algorithm with ties broken by ascending node id.
    pub fn topo_sort(&self) -> Vec<NodeId> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for inp in &node.inputs {
                indegree[node.id.0] += 1;
                consumers[inp.0].push(node.id.0);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        debug_assert_eq!(order.len(), n, "append-only graphs are acyclic");
        order
    }

    pub fn use_def(&self, order: &[NodeId]) -> Liveness {
        let n = self.nodes.len();
        let mut def = vec![usize::MAX; n];
        for (pos, id) in order.iter().enumerate() {
            def[id.0] = pos;
        }
        let mut last_use = def.clone();
        for (pos, id) in order.iter().enumerate() {
            for inp in &self.nodes[id.0].inputs {
                last_use[inp.0] = last_use[inp.0].max(pos);
            }
        }
        Liveness { def, last_use }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Dim, DimKind, PrimitiveKind};
    use super::*;
    use proptest::prelude::*;

    fn shape() -> Vec<Dim> {
        vec![Dim::of(DimKind::SeqQ, 2), Dim::of(DimKind::SeqK, 3)]
    }

    #[test]
    fn single_node() {
        let mut g = Graph::new();
        g.placeholder("a", shape()).unwrap();
        assert_eq!(g.topo_sort(), vec![NodeId(0)]);
    }

    #[test]
    fn diamond() {
        let mut g = Graph::new();
        let a = g.placeholder("a", shape()).unwrap();
        let b = g.add_node(PrimitiveKind::Exp, &[a]).unwrap();
        let c = g.add_node(PrimitiveKind::Neg, &[a]).unwrap();
        let d = g.add_node(PrimitiveKind::Add, &[b, c]).unwrap();
        let order = g.topo_sort();
        assert_eq!(order, vec![a, b, c, d]);
        let live = g.use_def(&order);
        assert_eq!(live.last_use(a), 2);
        assert_eq!(live.last_use(d), 3);
    }

    #[test]
    fn chain_last_use() {
        let mut g = Graph::new();
        let a = g.placeholder("a", shape()).unwrap();
        let b = g.add_node(PrimitiveKind::Exp, &[a]).unwrap();
        let c = g.add_node(PrimitiveKind::Tanh, &[b]).unwrap();
        let order = g.topo_sort();
        let live = g.use_def(&order);
        assert_eq!(live.last_use(a), 1);
        assert_eq!(live.last_use(b), 2);
        assert_eq!(live.last_use(c), 2);
    }

    pub(crate) fn random_dag(picks: &[(u8, usize, usize)]) -> Graph {
        let mut g = Graph::new();
        let a = g.placeholder("a", shape()).unwrap();
        let b = g.placeholder("b", shape()).unwrap();
        let mut ids = vec![a, b];
        for &(op, x, y) in picks {
            let x = ids[x % ids.len()];
            let y = ids[y % ids.len()];
            let id = match op % 3 {
                0 => g.add_node(PrimitiveKind::Add, &[x, y]),
                1 => g.add_node(PrimitiveKind::Mul, &[x, y]),
                _ => g.add_node(PrimitiveKind::Exp, &[x]),
            }
            .unwrap();
            ids.push(id);
        }
        g
    }

    proptest! {
        #[test]
        fn topo_order_respects_inputs(picks in proptest::collection::vec((any::<u8>(), any::<usize>(), any::<usize>()), 48)) {
            let g = random_dag(&picks);
            prop_assert_eq!(g.len(), 50);
            let order = g.topo_sort();
            let mut pos = vec![0; g.len()];
            for (p, id) in order.iter().enumerate() {
                pos[id.0] = p;
            }
            for node in g.nodes() {
                for inp in &node.inputs {
                    prop_assert!(pos[inp.0] < pos[node.id.0]);
                }
            }
            prop_assert_eq!(order, g.clone().topo_sort());
        }
    }
}
