//! Exhaustive exploration of every request interleaving a workload allows,
//! plus the graph queries the rule checker runs over the result.
//!
//! Exploration is breadth-first and level-synchronous: successors of one
//! level are computed in parallel, then merged in (node, client, template)
//! order so node numbering never depends on scheduling.

mod dot;
mod paths;
mod scc;

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{self, EngineError};
use crate::model::{full_mask, Decision, Name, ParamValue, ResponseMsg, SystemState};
use crate::policy::PolicySpec;
use crate::workload::Workload;

pub use dot::to_dot;
pub use paths::{acyclic_paths_through_edge, acyclic_paths_to_root, AcyclicPaths, PathBudgetExceeded};
pub use scc::{tarjan, CycleIndex};

pub type NodeId = u32;
pub type EdgeId = u32;

pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;
pub const DEFAULT_PATH_BUDGET: usize = 100_000;

/// What happened on one edge: which client sent which template, and the
/// response it got.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeLabel {
    pub client: Name,
    pub template: usize,
    pub response: ResponseMsg,
}

impl EdgeLabel {
    pub fn decision(&self) -> Decision {
        self.response.decision
    }

    pub fn action(&self) -> &str {
        &self.response.request.action
    }

    /// `client/action/decision`, as used in DOT output.
    pub fn short(&self) -> String {
        format!("{}/{}/{}", self.client, self.action(), self.decision().short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    /// Index into [`StateGraph::labels`].
    pub label: u32,
}

/// Adjacency lists, shared by real state graphs and synthetic test graphs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    /// Per node: (edge, successor), in edge order.
    pub out: Vec<Vec<(EdgeId, NodeId)>>,
    /// Per node: (edge, predecessor), in edge order.
    pub inc: Vec<Vec<(EdgeId, NodeId)>>,
}

impl Topology {
    pub fn from_edges(node_count: usize, edges: &[(NodeId, NodeId)]) -> Self {
        let mut t = Topology { out: vec![Vec::new(); node_count], inc: vec![Vec::new(); node_count] };
        for (i, &(a, b)) in edges.iter().enumerate() {
            t.out[a as usize].push((i as EdgeId, b));
            t.inc[b as usize].push((i as EdgeId, a));
        }
        t
    }

    pub fn node_count(&self) -> usize {
        self.out.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Distinct sources of in-edges of `n`, ascending.
    pub fn predecessors(&self, n: NodeId) -> Vec<NodeId> {
        let mut p: Vec<NodeId> = self.inc[n as usize].iter().map(|&(_, m)| m).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Reachability graph. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct StateGraph {
    nodes: Vec<Arc<SystemState>>,
    edges: Vec<Edge>,
    labels: Vec<EdgeLabel>,
    topo: Topology,
    /// False when exploration stopped at the node budget.
    pub complete: bool,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

impl StateGraph {
    pub const ROOT: NodeId = 0;

    pub fn root(&self) -> NodeId {
        Self::ROOT
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn state(&self, n: NodeId) -> &SystemState {
        &self.nodes[n as usize]
    }

    pub fn states(&self) -> impl Iterator<Item = (NodeId, &SystemState)> {
        self.nodes.iter().enumerate().map(|(i, s)| (i as NodeId, &**s))
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e as usize]
    }

    pub fn label(&self, e: EdgeId) -> &EdgeLabel {
        &self.labels[self.edges[e as usize].label as usize]
    }

    pub fn labels(&self) -> &[EdgeLabel] {
        &self.labels
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn in_edges(&self, n: NodeId) -> impl Iterator<Item = EdgeId> + '_ {
        self.topo.inc[n as usize].iter().map(|&(e, _)| e)
    }

    pub fn out_edges(&self, n: NodeId) -> impl Iterator<Item = EdgeId> + '_ {
        self.topo.out[n as usize].iter().map(|&(e, _)| e)
    }

    pub fn contains(&self, n: NodeId) -> bool {
        (n as usize) < self.nodes.len()
    }

    /// All and only the nodes satisfying `pred`, ascending.
    pub fn filter_nodes(&self, mut pred: impl FnMut(NodeId, &StateGraph) -> bool) -> Vec<NodeId> {
        (0..self.nodes.len() as NodeId).filter(|&n| pred(n, self)).collect()
    }

    /// Nodes with an in-edge whose label satisfies `pred`.
    pub fn nodes_entered_by(&self, pred: impl Fn(&EdgeLabel) -> bool) -> Vec<NodeId> {
        self.filter_nodes(|n, g| g.in_edges(n).any(|e| pred(g.label(e))))
    }

    pub fn predecessors(&self, n: NodeId) -> Result<Vec<NodeId>, GraphError> {
        if !self.contains(n) {
            return Err(GraphError::UnknownNode(n));
        }
        Ok(self.topo.predecessors(n))
    }

    /// Maximal strongly connected components, in discovery order.
    pub fn sccs(&self) -> Vec<Vec<NodeId>> {
        tarjan(&self.topo)
    }

    /// Components that contain a cycle: more than one node, or a self-loop.
    pub fn cyclic_sccs(&self) -> Vec<Vec<NodeId>> {
        CycleIndex::new(&self.topo).components().to_vec()
    }

    pub fn acyclic_paths_to_root(&self, n: NodeId, budget: usize) -> Result<AcyclicPaths<'_>, GraphError> {
        if !self.contains(n) {
            return Err(GraphError::UnknownNode(n));
        }
        Ok(acyclic_paths_to_root(&self.topo, Self::ROOT, n, budget))
    }

    /// Nodes without out-edges.
    pub fn terminal_nodes(&self) -> Vec<NodeId> {
        self.filter_nodes(|n, g| g.topo.out[n as usize].is_empty())
    }

    fn with_root(root: SystemState) -> Self {
        StateGraph {
            nodes: vec![Arc::new(root)],
            edges: Vec::new(),
            labels: Vec::new(),
            topo: Topology { out: vec![Vec::new()], inc: vec![Vec::new()] },
            complete: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreConfig {
    pub node_budget: usize,
    /// Compute successors of a level on the rayon pool.
    pub parallel: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig { node_budget: DEFAULT_NODE_BUDGET, parallel: true }
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("node budget of {limit} exceeded")]
    Budget { limit: usize, partial: Box<StateGraph> },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("initial state has no queue for client `{0}`")]
    MissingQueue(String),
}

/// Initial state of `policy` with every client of `w` holding its full queue.
pub fn initial_state(policy: &PolicySpec, w: &Workload) -> SystemState {
    let mut s = engine::initial_state(policy);
    s.client_queues = w.initial_queues();
    s
}

/// Sends template `idx` of `client` from `state` and updates the client's
/// queue: the template is consumed, the held session follows the response,
/// a denial halts the client under `stop_on_deny`, and a drained repeating
/// client is refilled.
pub fn deliver(
    policy: &PolicySpec,
    w: &Workload,
    state: &SystemState,
    client: &Name,
    idx: usize,
) -> Result<(SystemState, ResponseMsg), ExploreError> {
    let q = *state.client_queues.get(client).ok_or_else(|| ExploreError::MissingQueue(client.to_string()))?;
    let r = w.instantiate(client, idx, &q);
    let (mut next, resp) = engine::step(policy, state, &r)?;
    let mut nq = q;
    nq.remaining &= !(1u64 << idx);
    nq.session = resp.payload.get("sess").and_then(ParamValue::as_int);
    if w.stop_on_deny && resp.decision == Decision::Denied {
        nq.halted = true;
    }
    let spec = &w.clients[client];
    if nq.remaining == 0 && spec.repeat {
        nq.remaining = full_mask(spec.templates.len());
    }
    next.client_queues.insert(client.clone(), nq);
    Ok((next, resp))
}

type Successor = (EdgeLabel, SystemState);

/// Every successor of `state`, in (client, template) order.
pub fn successors(policy: &PolicySpec, w: &Workload, state: &SystemState) -> Result<Vec<Successor>, ExploreError> {
    let mut out = Vec::new();
    for (client, q) in &state.client_queues {
        for idx in w.eligible(client, q) {
            let (next, response) = deliver(policy, w, state, client, idx)?;
            out.push((EdgeLabel { client: client.clone(), template: idx, response }, next));
        }
    }
    Ok(out)
}

const CHUNK: usize = 2048;

/// Explores every state reachable from `initial` under `w`.
pub fn explore(
    policy: &PolicySpec,
    initial: &SystemState,
    w: &Workload,
    cfg: &ExploreConfig,
) -> Result<StateGraph, ExploreError> {
    for client in w.clients.keys() {
        if !initial.client_queues.contains_key(client) {
            return Err(ExploreError::MissingQueue(client.to_string()));
        }
    }
    let mut g = StateGraph::with_root(initial.clone());
    let mut seen: HashMap<Arc<SystemState>, NodeId> = HashMap::new();
    seen.insert(g.nodes[0].clone(), 0);
    let mut label_ids: HashMap<EdgeLabel, u32> = HashMap::new();
    let mut level: Vec<NodeId> = vec![0];

    while !level.is_empty() {
        let mut next_level = Vec::new();
        for chunk in level.chunks(CHUNK) {
            let expand = |&n: &NodeId| successors(policy, w, &g.nodes[n as usize]);
            let succs: Vec<Result<Vec<Successor>, ExploreError>> =
                if cfg.parallel { chunk.par_iter().map(expand).collect() } else { chunk.iter().map(expand).collect() };
            for (&from, succ) in chunk.iter().zip(succs) {
                for (label, state) in succ? {
                    let to = match seen.get(&state) {
                        Some(&id) => id,
                        None => {
                            if g.nodes.len() >= cfg.node_budget {
                                return Err(ExploreError::Budget { limit: cfg.node_budget, partial: Box::new(g) });
                            }
                            let id = g.nodes.len() as NodeId;
                            let state = Arc::new(state);
                            seen.insert(state.clone(), id);
                            g.nodes.push(state);
                            g.topo.out.push(Vec::new());
                            g.topo.inc.push(Vec::new());
                            next_level.push(id);
                            id
                        }
                    };
                    let next_label = g.labels.len() as u32;
                    let label = *label_ids.entry(label).or_insert_with_key(|l| {
                        g.labels.push(l.clone());
                        next_label
                    });
                    let e = g.edges.len() as EdgeId;
                    g.edges.push(Edge { from, to, label });
                    g.topo.out[from as usize].push((e, to));
                    g.topo.inc[to as usize].push((e, from));
                }
            }
        }
        level = next_level;
    }
    g.complete = true;
    Ok(g)
}

/// Delivers every template once without branching. Round-robin takes one
/// request per client in turn; otherwise each client runs to completion
/// before the next starts. Repeating clients are not refilled.
pub fn simulate(
    policy: &PolicySpec,
    w: &Workload,
    round_robin: bool,
) -> Result<Vec<(Name, ResponseMsg)>, ExploreError> {
    let once = Workload {
        clients: w
            .clients
            .iter()
            .map(|(k, c)| (k.clone(), crate::workload::ClientSpec { repeat: false, ..c.clone() }))
            .collect(),
        ..w.clone()
    };
    let mut state = initial_state(policy, &once);
    let mut out = Vec::new();
    let clients: Vec<Name> = once.clients.keys().cloned().collect();
    loop {
        let mut progressed = false;
        for c in &clients {
            loop {
                let q = state.client_queues[c];
                let Some(&idx) = once.eligible(c, &q).first() else { break };
                let (next, resp) = deliver(policy, &once, &state, c, idx)?;
                state = next;
                out.push((c.clone(), resp));
                progressed = true;
                if round_robin {
                    break;
                }
            }
        }
        if !progressed {
            return Ok(out);
        }
    }
}
