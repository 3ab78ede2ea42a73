//! Strongly connected components by an iterative Tarjan walk, so deep
//! graphs cannot overflow the call stack.

use super::{NodeId, Topology};

const UNVISITED: u32 = u32::MAX;

/// Maximal strongly connected components in the order Tarjan completes them
/// (reverse topological order of the condensation). Nodes inside a
/// component are ascending.
pub fn tarjan(t: &Topology) -> Vec<Vec<NodeId>> {
    let n = t.node_count();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0u32; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<NodeId> = Vec::new();
    let mut out = Vec::new();
    let mut next = 0u32;
    // (node, position in its out-list)
    let mut call: Vec<(NodeId, usize)> = Vec::new();

    for start in 0..n as NodeId {
        if index[start as usize] != UNVISITED {
            continue;
        }
        call.push((start, 0));
        index[start as usize] = next;
        low[start as usize] = next;
        next += 1;
        stack.push(start);
        on_stack[start as usize] = true;

        while let Some(&(v, pos)) = call.last() {
            let vi = v as usize;
            if let Some(&(_, w)) = t.out[vi].get(pos) {
                call.last_mut().expect("non-empty").1 += 1;
                let wi = w as usize;
                if index[wi] == UNVISITED {
                    index[wi] = next;
                    low[wi] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[wi] = true;
                    call.push((w, 0));
                } else if on_stack[wi] {
                    low[vi] = low[vi].min(index[wi]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                let pi = parent as usize;
                low[pi] = low[pi].min(low[vi]);
            }
            if low[vi] == index[vi] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w as usize] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                out.push(comp);
            }
        }
    }
    out
}

/// Which nodes lie on some cycle.
#[derive(Debug, Clone)]
pub struct CycleIndex {
    in_cycle: Vec<bool>,
    components: Vec<Vec<NodeId>>,
}

impl CycleIndex {
    pub fn new(t: &Topology) -> Self {
        let mut in_cycle = vec![false; t.node_count()];
        let mut components: Vec<Vec<NodeId>> = tarjan(t)
            .into_iter()
            .filter(|c| c.len() > 1 || t.out[c[0] as usize].iter().any(|&(_, w)| w == c[0]))
            .collect();
        components.sort();
        for c in &components {
            for &v in c {
                in_cycle[v as usize] = true;
            }
        }
        CycleIndex { in_cycle, components }
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.in_cycle[n as usize]
    }

    /// Cyclic components ordered by their smallest node.
    pub fn components(&self) -> &[Vec<NodeId>] {
        &self.components
    }
}
