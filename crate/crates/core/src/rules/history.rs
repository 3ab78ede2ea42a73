//! Rule checking on acyclic graphs by forward propagation of histories.
//!
//! A history is the subsequence of a root path made of the events relevant
//! to one rule. Every root path of an acyclic graph is simple, and a rule's
//! verdict on a path depends only on its relevant events, so evaluating each
//! distinct history that reaches a trigger edge is equivalent to evaluating
//! every path while visiting far fewer of them.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{eval_path, is_relevant, CheckConfig, CheckOutcome, PathVerdict, RuleDef, RuleError, Violation};
use crate::model::ResponseMsg;
use crate::statespace::{EdgeId, NodeId, PathBudgetExceeded, StateGraph};

/// Kahn order of the graph's nodes, or `None` if it has a cycle.
pub(super) fn topological_order(g: &StateGraph) -> Option<Vec<NodeId>> {
    let t = g.topology();
    let n = t.node_count();
    let mut indeg: Vec<usize> = t.inc.iter().map(Vec::len).collect();
    let mut order: Vec<NodeId> = (0..n as NodeId).filter(|&v| indeg[v as usize] == 0).collect();
    let mut i = 0;
    while i < order.len() {
        let v = order[i];
        i += 1;
        for &(_, w) in &t.out[v as usize] {
            indeg[w as usize] -= 1;
            if indeg[w as usize] == 0 {
                order.push(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Histories interned as a trie over label ids; id 0 is the empty history.
struct Trie {
    parent: Vec<u32>,
    label: Vec<u32>,
    child: HashMap<(u32, u32), u32>,
}

impl Trie {
    fn new() -> Self {
        Trie { parent: vec![0], label: vec![u32::MAX], child: HashMap::new() }
    }

    fn extend(&mut self, h: u32, label: u32) -> u32 {
        let next = self.parent.len() as u32;
        let id = *self.child.entry((h, label)).or_insert(next);
        if id == next {
            self.parent.push(h);
            self.label.push(label);
        }
        id
    }

    fn labels(&self, mut h: u32) -> Vec<u32> {
        let mut out = Vec::new();
        while h != 0 {
            out.push(self.label[h as usize]);
            h = self.parent[h as usize];
        }
        out.reverse();
        out
    }
}

struct Propagation {
    trie: Trie,
    /// Distinct histories reaching each node, in discovery order.
    at: Vec<Vec<u32>>,
    /// Edge through which (node, history) was first reached.
    via: HashMap<(NodeId, u32), EdgeId>,
    relevant: Vec<bool>,
}

fn propagate(
    g: &StateGraph,
    def: &RuleDef,
    order: &[NodeId],
    budget: usize,
) -> Result<Propagation, PathBudgetExceeded> {
    let relevant: Vec<bool> = g.labels().iter().map(|l| is_relevant(&def.rule, &l.response)).collect();
    let mut p = Propagation { trie: Trie::new(), at: vec![Vec::new(); g.node_count()], via: HashMap::new(), relevant };
    p.at[g.root() as usize].push(0);
    for &u in order {
        let hs = std::mem::take(&mut p.at[u as usize]);
        for e in g.out_edges(u) {
            let edge = g.edge(e);
            let rel = p.relevant[edge.label as usize];
            for &h in &hs {
                let h2 = if rel { p.trie.extend(h, edge.label) } else { h };
                if let std::collections::hash_map::Entry::Vacant(slot) = p.via.entry((edge.to, h2)) {
                    slot.insert(e);
                    let set = &mut p.at[edge.to as usize];
                    set.push(h2);
                    if set.len() > budget {
                        return Err(PathBudgetExceeded { node: edge.to, budget });
                    }
                }
            }
        }
        p.at[u as usize] = hs;
    }
    Ok(p)
}

impl Propagation {
    /// A root path to `n` whose history is `h`.
    fn witness(&self, g: &StateGraph, mut n: NodeId, mut h: u32) -> Vec<EdgeId> {
        let mut path = Vec::new();
        while n != g.root() {
            let e = self.via[&(n, h)];
            let edge = g.edge(e);
            if self.relevant[edge.label as usize] {
                h = self.trie.parent[h as usize];
            }
            path.push(e);
            n = edge.from;
        }
        path.reverse();
        path
    }
}

struct NodeResult {
    violation: Option<Violation>,
    histories: usize,
}

fn check_node(g: &StateGraph, def: &RuleDef, p: &Propagation, n: NodeId) -> NodeResult {
    let rule = &def.rule;
    let (action, decision) = rule.trigger();
    let target = g.state(n);
    let mut res = NodeResult { violation: None, histories: 0 };
    let mut best: Option<(i64, NodeId, u32, EdgeId)> = None;
    for e in g.in_edges(n) {
        let l = g.label(e);
        if l.decision() != decision || l.action() != action {
            continue;
        }
        let from = g.edge(e).from;
        for &h in &p.at[from as usize] {
            res.histories += 1;
            let labels = p.trie.labels(h);
            let mut events: Vec<&ResponseMsg> = labels.iter().map(|&i| &g.labels()[i as usize].response).collect();
            events.push(&l.response);
            match eval_path(rule, &events, target) {
                PathVerdict::Clean => {}
                PathVerdict::Violated => {
                    let mut witness = p.witness(g, from, h);
                    witness.push(e);
                    res.violation = Some(Violation {
                        insecure_state: n,
                        rule: def.id.clone(),
                        witness,
                        accumulated: None,
                        on_cycle: false,
                    });
                    return res;
                }
                PathVerdict::Accumulated(s) => {
                    if best.is_none_or(|(b, ..)| s > b) {
                        best = Some((s, from, h, e));
                    }
                }
            }
        }
    }
    if let (Some(limit), Some((sum, from, h, e))) = (rule.limit(), best) {
        if sum > limit {
            let mut witness = p.witness(g, from, h);
            witness.push(e);
            res.violation = Some(Violation {
                insecure_state: n,
                rule: def.id.clone(),
                witness,
                accumulated: Some(sum),
                on_cycle: false,
            });
        }
    }
    res
}

pub(super) fn check_acyclic(
    g: &StateGraph,
    def: &RuleDef,
    cfg: &CheckConfig,
    order: &[NodeId],
) -> Result<CheckOutcome, RuleError> {
    let p = propagate(g, def, order, cfg.path_budget).map_err(|source| RuleError::PathBudget {
        rule: def.id.clone(),
        source,
        partial: Vec::new(),
    })?;
    let candidates = super::candidate_nodes(g, &def.rule);
    let run = |&n: &NodeId| check_node(g, def, &p, n);
    let results: Vec<NodeResult> =
        if cfg.parallel { candidates.par_iter().map(run).collect() } else { candidates.iter().map(run).collect() };
    let mut out = CheckOutcome { violations: Vec::new(), complete: g.complete, paths_examined: 0 };
    for r in results {
        out.paths_examined += r.histories;
        out.violations.extend(r.violation);
    }
    Ok(out)
}
