//! Enumeration of simple root-to-node paths by a backward depth-first walk
//! over in-edges.

use thiserror::Error;

use super::{EdgeId, NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("more than {budget} acyclic paths lead to node {node}")]
pub struct PathBudgetExceeded {
    pub node: NodeId,
    pub budget: usize,
}

/// Iterator over every simple path from `root` to a target node, each given
/// as its edges in root-to-target order. Order is deterministic: in-edges
/// are tried in edge order. Yields one error and stops once more than
/// `budget` paths would be produced.
pub struct AcyclicPaths<'g> {
    topo: &'g Topology,
    root: NodeId,
    target: NodeId,
    on_path: Vec<bool>,
    /// (node, next in-edge position); the bottom entry is the target.
    stack: Vec<(NodeId, usize)>,
    /// Edges from the target back to the node on top of `stack`.
    back: Vec<EdgeId>,
    emitted: usize,
    budget: usize,
    done: bool,
    /// The only path is the single edge in `back`.
    pending_direct: bool,
}

pub fn acyclic_paths_to_root(t: &Topology, root: NodeId, target: NodeId, budget: usize) -> AcyclicPaths<'_> {
    let mut it = AcyclicPaths {
        topo: t,
        root,
        target,
        on_path: Vec::new(),
        stack: Vec::new(),
        back: Vec::new(),
        emitted: 0,
        budget,
        done: false,
        pending_direct: false,
    };
    if target != root {
        it.on_path = vec![false; t.node_count()];
        it.on_path[target as usize] = true;
        it.stack.push((target, 0));
    }
    it
}

/// Simple root-to-`to` paths whose last edge is `e`, an edge `from -> to`.
pub fn acyclic_paths_through_edge(
    t: &Topology,
    root: NodeId,
    e: EdgeId,
    from: NodeId,
    to: NodeId,
    budget: usize,
) -> AcyclicPaths<'_> {
    let mut it = AcyclicPaths {
        topo: t,
        root,
        target: to,
        on_path: Vec::new(),
        stack: Vec::new(),
        back: vec![e],
        emitted: 0,
        budget,
        done: false,
        pending_direct: false,
    };
    if to == root || from == to {
        // A simple path cannot return to the root or repeat a node.
        it.done = true;
    } else if from == root {
        it.pending_direct = true;
    } else {
        it.on_path = vec![false; t.node_count()];
        it.on_path[to as usize] = true;
        it.on_path[from as usize] = true;
        it.stack.push((from, 0));
    }
    it
}

impl AcyclicPaths<'_> {
    fn emit(&mut self, path: Vec<EdgeId>) -> Option<Result<Vec<EdgeId>, PathBudgetExceeded>> {
        if self.emitted == self.budget {
            self.done = true;
            return Some(Err(PathBudgetExceeded { node: self.target, budget: self.budget }));
        }
        self.emitted += 1;
        Some(Ok(path))
    }
}

impl Iterator for AcyclicPaths<'_> {
    type Item = Result<Vec<EdgeId>, PathBudgetExceeded>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.target == self.root {
            self.done = true;
            return self.emit(Vec::new());
        }
        if self.pending_direct {
            self.done = true;
            return self.emit(self.back.clone());
        }
        while let Some(&(v, pos)) = self.stack.last() {
            if let Some(&(e, m)) = self.topo.inc[v as usize].get(pos) {
                self.stack.last_mut().expect("non-empty").1 += 1;
                if self.on_path[m as usize] {
                    continue;
                }
                if m == self.root {
                    let mut path = Vec::with_capacity(self.back.len() + 1);
                    path.push(e);
                    path.extend(self.back.iter().rev());
                    return self.emit(path);
                }
                self.on_path[m as usize] = true;
                self.stack.push((m, 0));
                self.back.push(e);
            } else {
                self.stack.pop();
                self.on_path[v as usize] = false;
                if !self.stack.is_empty() {
                    self.back.pop();
                }
            }
        }
        self.done = true;
        None
    }
}
