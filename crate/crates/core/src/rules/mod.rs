//! Security rules as path queries over a [`StateGraph`].
//!
//! A rule names a trigger event: the last edge of every path it inspects.
//! For each node entered by a trigger edge the checker walks the acyclic
//! paths from the root ending in that edge and evaluates the rule along the
//! path. A node is insecure as soon as one path violates the rule.

mod history;
mod notation;

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{self, EngineError};
use crate::model::{Decision, Name, ParamValue, ResponseMsg, SystemState};
use crate::policy::PolicySpec;
use crate::statespace::{acyclic_paths_through_edge, CycleIndex, EdgeId, NodeId, PathBudgetExceeded, StateGraph};

pub use notation::{compile_notation, parse_rules, NotationError};

/// Placeholder in an event pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Any,
    Var(String),
    Lit(ParamValue),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Any => f.write_str("_"),
            Term::Var(v) => f.write_str(v),
            Term::Lit(v) => write!(f, "{v}"),
        }
    }
}

/// Variable bindings of one rule instance.
pub type Env = Vec<(String, ParamValue)>;

fn lookup<'e>(env: &'e Env, var: &str) -> Option<&'e ParamValue> {
    env.iter().find(|(k, _)| k == var).map(|(_, v)| v)
}

fn unify(t: &Term, v: &ParamValue, env: &mut Env) -> bool {
    match t {
        Term::Any => true,
        Term::Lit(l) => l == v,
        Term::Var(name) => match lookup(env, name) {
            Some(bound) => bound == v,
            None => {
                env.push((name.clone(), v.clone()));
                true
            }
        },
    }
}

/// One communication event: who sent which action with which parameters
/// and what decision came back.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventPattern {
    pub user: Term,
    pub account: Term,
    pub action: Name,
    /// Matched against request parameters first, then the response payload.
    pub params: Vec<(String, Term)>,
    pub decision: Decision,
}

impl EventPattern {
    pub fn new(action: &str, decision: Decision) -> Self {
        EventPattern {
            user: Term::Var("u".into()),
            account: Term::Var("a".into()),
            action: action.into(),
            params: Vec::new(),
            decision,
        }
    }

    /// Cheap pre-filter ignoring bindings.
    pub fn could_match(&self, r: &ResponseMsg) -> bool {
        r.decision == self.decision && r.request.action == self.action
    }

    /// Extends `env` so the pattern matches `r`, if possible.
    pub fn matches(&self, r: &ResponseMsg, env: &Env) -> Option<Env> {
        if !self.could_match(r) {
            return None;
        }
        let mut env = env.clone();
        let needs_binding = self.user != Term::Any || self.account != Term::Any;
        if needs_binding {
            let b = r.binding.as_ref()?;
            if !unify(&self.user, &ParamValue::text(&*b.user), &mut env)
                || !unify(&self.account, &ParamValue::Int(b.account), &mut env)
            {
                return None;
            }
        }
        for (k, t) in &self.params {
            let v = r.attribute(k)?;
            if !unify(t, v, &mut env) {
                return None;
            }
        }
        Some(env)
    }

    pub(crate) fn substitute(&mut self, var: &str, value: &ParamValue) {
        let sub = |t: &mut Term| {
            if matches!(t, Term::Var(v) if v == var) {
                *t = Term::Lit(value.clone());
            }
        };
        sub(&mut self.user);
        sub(&mut self.account);
        for (_, t) in &mut self.params {
            sub(t);
        }
    }
}

impl fmt::Display for EventPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) {:?}", self.user, self.account, &*self.action)?;
        if !self.params.is_empty() {
            f.write_str("(")?;
            for (i, (k, t)) in self.params.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{k} = {t}")?;
            }
            f.write_str(")")?;
        }
        write!(f, "^{}", self.decision.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DestFilter {
    Registered,
    Unregistered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    /// `target` is insecure unless `guard` occurred earlier on the path
    /// under the same bindings.
    Precedence { guard: EventPattern, target: EventPattern },
    /// After the antecedents matched in order, an event matching `forbidden`
    /// is insecure, unless a `reset` event came after the last antecedent.
    Response { antecedents: Vec<EventPattern>, forbidden: EventPattern, reset: Option<EventPattern> },
    /// Once `threshold` consecutive denials of `action` for one (user,
    /// account) occurred, any later authorization of it for that pair is
    /// insecure. Only an authorization interrupts a run of denials.
    ThreeStrikes { action: Name, threshold: u32 },
    /// Walks each path back from an authorized `auth`, pairing authorized
    /// `forms` events of the same (user, account) by `link_key` and summing
    /// `value_key` over those whose `dest_key` passes `filter` against the
    /// account's registry. The node is insecure when the largest sum over
    /// its paths exceeds `limit`, or when it lies on a cycle.
    Accumulation {
        forms: Name,
        auth: Name,
        link_key: String,
        value_key: String,
        dest_key: String,
        registry_task: Name,
        registry_key: String,
        filter: DestFilter,
        limit: i64,
    },
}

impl Rule {
    /// Action and decision of the last event of every inspected path.
    pub fn trigger(&self) -> (&str, Decision) {
        match self {
            Rule::Precedence { target, .. } => (&target.action, target.decision),
            Rule::Response { forbidden, .. } => (&forbidden.action, forbidden.decision),
            Rule::ThreeStrikes { action, .. } => (action, Decision::Authorized),
            Rule::Accumulation { auth, .. } => (auth, Decision::Authorized),
        }
    }

    /// Actions the rule talks about.
    pub fn actions(&self) -> BTreeSet<Name> {
        match self {
            Rule::Precedence { guard, target } => [guard.action.clone(), target.action.clone()].into(),
            Rule::Response { antecedents, forbidden, reset } => antecedents
                .iter()
                .chain(std::iter::once(forbidden))
                .chain(reset.iter())
                .map(|p| p.action.clone())
                .collect(),
            Rule::ThreeStrikes { action, .. } => [action.clone()].into(),
            Rule::Accumulation { forms, auth, .. } => [forms.clone(), auth.clone()].into(),
        }
    }

    /// Limit of an accumulation rule.
    pub fn limit(&self) -> Option<i64> {
        match self {
            Rule::Accumulation { limit, .. } => Some(*limit),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Rule::ThreeStrikes { threshold: 0, .. } => Err("threshold must be at least 1".into()),
            Rule::Accumulation { limit, .. } if *limit <= 0 => Err("limit must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// A rule with its identifier and source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDef {
    pub id: String,
    pub source: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub insecure_state: NodeId,
    pub rule: String,
    /// Root-to-node edges; empty when the node is insecure by lying on a cycle.
    pub witness: Vec<EdgeId>,
    pub accumulated: Option<i64>,
    pub on_cycle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckConfig {
    /// Per-node cap on enumerated paths, or on distinct histories when
    /// histories are propagated.
    pub path_budget: usize,
    pub parallel: bool,
    pub strategy: Strategy,
}

/// How paths are inspected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// History propagation on acyclic graphs, path enumeration otherwise.
    #[default]
    Auto,
    /// Always enumerate acyclic paths backwards from each candidate node.
    EnumeratePaths,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { path_budget: crate::statespace::DEFAULT_PATH_BUDGET, parallel: true, strategy: Strategy::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub violations: Vec<Violation>,
    /// False when the graph itself was truncated by the node budget.
    pub complete: bool,
    pub paths_examined: usize,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule {rule}: {source}")]
    PathBudget {
        rule: String,
        #[source]
        source: PathBudgetExceeded,
        /// Violations found before the budget ran out.
        partial: Vec<Violation>,
    },
    #[error("rule {rule} is malformed: {msg}")]
    Invalid { rule: String, msg: String },
}

/// Verdict of one rule on one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathVerdict {
    Clean,
    Violated,
    /// Accumulation rules: the sum collected along the path.
    Accumulated(i64),
}

/// Evaluates `rule` on a path of events whose last event is the trigger.
/// `target` is the state the path ends in.
pub fn eval_path(rule: &Rule, events: &[&ResponseMsg], target: &SystemState) -> PathVerdict {
    let Some((last, prefix)) = events.split_last() else {
        return PathVerdict::Clean;
    };
    let violated = match rule {
        Rule::Precedence { guard, target: t } => match t.matches(last, &Env::new()) {
            None => false,
            Some(env) => !prefix.iter().any(|e| guard.matches(e, &env).is_some()),
        },
        Rule::Response { antecedents, forbidden, reset } => {
            forbidden.could_match(last)
                && response_violated(antecedents, forbidden, reset.as_ref(), prefix, last, 0, 0, &Env::new())
        }
        Rule::ThreeStrikes { action, threshold } => strikes_violated(action, *threshold, prefix, last),
        Rule::Accumulation { .. } => {
            return accumulate(rule, events, target).map_or(PathVerdict::Clean, PathVerdict::Accumulated)
        }
    };
    if violated {
        PathVerdict::Violated
    } else {
        PathVerdict::Clean
    }
}

#[allow(clippy::too_many_arguments)]
fn response_violated(
    antecedents: &[EventPattern],
    forbidden: &EventPattern,
    reset: Option<&EventPattern>,
    prefix: &[&ResponseMsg],
    last: &ResponseMsg,
    k: usize,
    from: usize,
    env: &Env,
) -> bool {
    if k == antecedents.len() {
        let Some(env) = forbidden.matches(last, env) else {
            return false;
        };
        return match reset {
            None => true,
            Some(r) => !prefix[from..].iter().any(|e| r.matches(e, &env).is_some()),
        };
    }
    (from..prefix.len()).any(|i| match antecedents[k].matches(prefix[i], env) {
        Some(env) => response_violated(antecedents, forbidden, reset, prefix, last, k + 1, i + 1, &env),
        None => false,
    })
}

fn strikes_violated(action: &str, threshold: u32, prefix: &[&ResponseMsg], last: &ResponseMsg) -> bool {
    if last.decision != Decision::Authorized || &*last.request.action != action {
        return false;
    }
    let Some(who) = &last.binding else {
        return false;
    };
    let mut run = 0u32;
    let mut blocked = false;
    for e in prefix {
        if &*e.request.action != action || e.binding.as_ref() != Some(who) {
            continue;
        }
        match e.decision {
            Decision::Denied => {
                run += 1;
                blocked |= run >= threshold;
            }
            Decision::Authorized => run = 0,
            Decision::InvalidSession => {}
        }
    }
    blocked
}

/// The backward walk of the accumulation query. Returns `None` when the last
/// event is not an authorized `auth` with a binding.
fn accumulate(rule: &Rule, events: &[&ResponseMsg], target: &SystemState) -> Option<i64> {
    let Rule::Accumulation { forms, auth, link_key, value_key, dest_key, registry_task, registry_key, filter, .. } =
        rule
    else {
        return None;
    };
    let last = events.last()?;
    if last.decision != Decision::Authorized || last.request.action != *auth {
        return None;
    }
    let who = last.binding.as_ref()?;
    let registry = target
        .task_params(who.account, registry_task)
        .get(registry_key)
        .and_then(|v| match v {
            ParamValue::IntSet(s) => Some(s.clone()),
            _ => None,
        })
        .unwrap_or_default();
    let mut links: Vec<ParamValue> = Vec::new();
    let mut sum = 0i64;
    for e in events.iter().rev() {
        if e.decision != Decision::Authorized || e.binding.as_ref() != Some(who) {
            continue;
        }
        if e.request.action == *auth {
            if let Some(t) = e.attribute(link_key) {
                links.push(t.clone());
            }
        } else if e.request.action == *forms {
            let Some(t) = e.attribute(link_key) else { continue };
            let Some(pos) = links.iter().position(|l| l == t) else { continue };
            let dest = e.attribute(dest_key).and_then(ParamValue::as_int);
            let registered = dest.is_some_and(|d| registry.contains(&d));
            let passes = match filter {
                DestFilter::Registered => registered,
                DestFilter::Unregistered => !registered,
            };
            if passes {
                sum = sum.saturating_add(e.attribute(value_key).and_then(ParamValue::as_int).unwrap_or(0));
                links.remove(pos);
            }
        }
    }
    Some(sum)
}

/// Whether the rule's verdict on a path can depend on this event. Events
/// for which this is false may be dropped from a path without changing
/// [`eval_path`].
pub fn is_relevant(rule: &Rule, r: &ResponseMsg) -> bool {
    match rule {
        Rule::Precedence { guard, .. } => guard.could_match(r),
        Rule::Response { antecedents, reset, .. } => antecedents.iter().chain(reset.iter()).any(|p| p.could_match(r)),
        Rule::ThreeStrikes { action, .. } => r.request.action == *action,
        Rule::Accumulation { forms, auth, .. } => {
            r.decision == Decision::Authorized && (r.request.action == *forms || r.request.action == *auth)
        }
    }
}

fn node_events<'g>(g: &'g StateGraph, path: &[EdgeId]) -> Vec<&'g ResponseMsg> {
    path.iter().map(|&e| &g.label(e).response).collect()
}

struct NodeResult {
    violation: Option<Violation>,
    paths: usize,
    overrun: Option<PathBudgetExceeded>,
}

fn check_node(g: &StateGraph, def: &RuleDef, n: NodeId, cycles: Option<&CycleIndex>, budget: usize) -> NodeResult {
    let rule = &def.rule;
    let (action, decision) = rule.trigger();
    let mut res = NodeResult { violation: None, paths: 0, overrun: None };
    if let Some(ci) = cycles {
        if ci.contains(n) {
            res.violation = Some(Violation {
                insecure_state: n,
                rule: def.id.clone(),
                witness: Vec::new(),
                accumulated: None,
                on_cycle: true,
            });
            return res;
        }
    }
    let limit = rule.limit();
    let mut best: Option<(i64, Vec<EdgeId>)> = None;
    let target = g.state(n);
    for e in g.in_edges(n) {
        let l = g.label(e);
        if l.decision() != decision || l.action() != action {
            continue;
        }
        let edge = g.edge(e);
        for p in acyclic_paths_through_edge(g.topology(), g.root(), e, edge.from, n, budget) {
            let path = match p {
                Ok(p) => p,
                Err(over) => {
                    res.overrun = Some(over);
                    return res;
                }
            };
            res.paths += 1;
            match eval_path(rule, &node_events(g, &path), target) {
                PathVerdict::Clean => {}
                PathVerdict::Violated => {
                    res.violation = Some(Violation {
                        insecure_state: n,
                        rule: def.id.clone(),
                        witness: path,
                        accumulated: None,
                        on_cycle: false,
                    });
                    return res;
                }
                PathVerdict::Accumulated(s) => {
                    if best.as_ref().is_none_or(|(b, _)| s > *b) {
                        best = Some((s, path));
                    }
                }
            }
        }
    }
    if let (Some(limit), Some((sum, path))) = (limit, best) {
        if sum > limit {
            res.violation = Some(Violation {
                insecure_state: n,
                rule: def.id.clone(),
                witness: path,
                accumulated: Some(sum),
                on_cycle: false,
            });
        }
    }
    res
}

/// Nodes entered by an edge matching the rule's trigger, ascending.
pub fn candidate_nodes(g: &StateGraph, rule: &Rule) -> Vec<NodeId> {
    let (action, decision) = rule.trigger();
    g.nodes_entered_by(|l| l.decision() == decision && l.action() == action)
}

/// Checks one rule over the whole graph.
pub fn check_rule(g: &StateGraph, def: &RuleDef, cfg: &CheckConfig) -> Result<CheckOutcome, RuleError> {
    def.rule.validate().map_err(|msg| RuleError::Invalid { rule: def.id.clone(), msg })?;
    if cfg.strategy == Strategy::Auto {
        if let Some(order) = history::topological_order(g) {
            return history::check_acyclic(g, def, cfg, &order);
        }
    }
    let cycles = matches!(def.rule, Rule::Accumulation { .. }).then(|| CycleIndex::new(g.topology()));
    let candidates = candidate_nodes(g, &def.rule);
    let run = |&n: &NodeId| check_node(g, def, n, cycles.as_ref(), cfg.path_budget);
    let results: Vec<NodeResult> =
        if cfg.parallel { candidates.par_iter().map(run).collect() } else { candidates.iter().map(run).collect() };
    let mut out = CheckOutcome { violations: Vec::new(), complete: g.complete, paths_examined: 0 };
    for r in results {
        out.paths_examined += r.paths;
        if let Some(over) = r.overrun {
            out.violations.extend(r.violation);
            return Err(RuleError::PathBudget { rule: def.id.clone(), source: over, partial: out.violations });
        }
        out.violations.extend(r.violation);
    }
    Ok(out)
}

/// Accumulation-only entry point; rejects other rule kinds.
pub fn check_accumulation(g: &StateGraph, def: &RuleDef, cfg: &CheckConfig) -> Result<CheckOutcome, RuleError> {
    if !matches!(def.rule, Rule::Accumulation { .. }) {
        return Err(RuleError::Invalid { rule: def.id.clone(), msg: "not an accumulation rule".into() });
    }
    check_rule(g, def, cfg)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("edge {edge}: replay decided {got}, graph recorded {want}")]
    Decision { edge: EdgeId, got: Decision, want: Decision },
    #[error("edge {edge}: replayed state differs from node {node}")]
    State { edge: EdgeId, node: NodeId },
    #[error("witness is not a path from the root")]
    Broken,
}

/// Re-runs a witness through [`engine::step`] from the root state, checking
/// every decision and every intermediate state. Returns the decisions.
pub fn replay_witness(policy: &PolicySpec, g: &StateGraph, witness: &[EdgeId]) -> Result<Vec<Decision>, ReplayError> {
    let mut state = g.state(g.root()).clone();
    let mut at = g.root();
    let mut out = Vec::with_capacity(witness.len());
    for &e in witness {
        let edge = g.edge(e);
        if edge.from != at {
            return Err(ReplayError::Broken);
        }
        let label = g.label(e);
        let (next, resp) = engine::step(policy, &state, &label.response.request)?;
        if resp.decision != label.decision() {
            return Err(ReplayError::Decision { edge: e, got: resp.decision, want: label.decision() });
        }
        if !next.same_model(g.state(edge.to)) {
            return Err(ReplayError::State { edge: e, node: edge.to });
        }
        out.push(resp.decision);
        state = next;
        at = edge.to;
    }
    Ok(out)
}
