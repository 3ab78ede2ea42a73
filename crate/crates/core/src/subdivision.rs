//! Per-task subdivision of the analysis.
//!
//! An action is independent of a task when processing it, authorized or
//! denied, never changes the task's parameters, the clearances for the task,
//! or any session, and when it cannot change anything an action affecting
//! the task reads. Independent actions can be dropped from workloads used to
//! check rules about that task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::engine::{self, EngineError};
use crate::model::{Name, ParamSet, ParamValue, RequestMsg, SystemState};
use crate::policy::{stmt_exprs, ActionSpec, Expr, PolicySpec, Scope, Stmt};
use crate::rules::{check_rule, CheckConfig, RuleDef, RuleError};
use crate::statespace::{self, explore, ExploreConfig, ExploreError};
use crate::workload::Workload;

/// Largest graph whose states are all used as probe samples.
pub const FULL_SAMPLE_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum DependenceReason {
    MemberOfTask,
    TaskParamsChanged,
    ClearanceChanged,
    SessionParamsChanged,
    /// Writes something read by `via`, which itself affects the task.
    IndirectInfluence {
        via: Name,
    },
    ProbeFailed(String),
}

impl fmt::Display for DependenceReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DependenceReason::MemberOfTask => f.write_str("member-of-task"),
            DependenceReason::TaskParamsChanged => f.write_str("task-params-changed"),
            DependenceReason::ClearanceChanged => f.write_str("clearance-changed"),
            DependenceReason::SessionParamsChanged => f.write_str("session-params-changed"),
            DependenceReason::IndirectInfluence { via } => write!(f, "indirect-influence via {via}"),
            DependenceReason::ProbeFailed(msg) => write!(f, "probe-failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dependence {
    Independent,
    Dependent(DependenceReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndependenceReport {
    pub task: Name,
    pub independent_actions: BTreeSet<Name>,
    /// Every other action with the first reason found.
    pub exceptions: BTreeMap<Name, DependenceReason>,
    pub samples: usize,
}

/// A parameter a policy function reads or writes. `key: None` stands for a
/// key computed at run time, which may be any key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Cell {
    Param { task: Name, key: Option<String> },
    Clearance(Name),
    Session,
}

impl Cell {
    fn overlaps(&self, other: &Cell) -> bool {
        match (self, other) {
            (Cell::Param { task: a, key: ka }, Cell::Param { task: b, key: kb }) => {
                a == b && (ka.is_none() || kb.is_none() || ka == kb)
            }
            (a, b) => a == b,
        }
    }
}

fn literal_key(e: &Expr) -> Option<String> {
    match e {
        Expr::Lit(ParamValue::Text(k)) => Some(k.clone()),
        _ => None,
    }
}

fn expr_reads(e: &Expr, own: &Name, out: &mut BTreeSet<Cell>) {
    e.walk(&mut |sub| match sub {
        Expr::Param { scope, key, .. } => match scope {
            Scope::Req => {}
            Scope::Sess => {
                out.insert(Cell::Session);
            }
            Scope::Task => {
                out.insert(Cell::Param { task: own.clone(), key: literal_key(key) });
            }
            Scope::TaskOf(t) => {
                out.insert(Cell::Param { task: t.clone(), key: literal_key(key) });
            }
        },
        Expr::Clearance(t) => {
            out.insert(Cell::Clearance(t.clone()));
        }
        _ => {}
    });
}

fn reads(a: &ActionSpec) -> BTreeSet<Cell> {
    let mut out = BTreeSet::new();
    out.insert(Cell::Clearance(a.task.clone()));
    if let Some(c) = &a.constraint {
        expr_reads(c, &a.task, &mut out);
    }
    for variant in [&a.on_authorized, &a.on_denied] {
        for (_, block) in variant.blocks() {
            for stmt in &block.stmts {
                for e in stmt_exprs(stmt) {
                    expr_reads(e, &a.task, &mut out);
                }
            }
        }
    }
    out
}

fn writes(a: &ActionSpec) -> BTreeSet<Cell> {
    let mut out = BTreeSet::new();
    for variant in [&a.on_authorized, &a.on_denied] {
        for (_, block) in variant.blocks() {
            for stmt in &block.stmts {
                match stmt {
                    Stmt::Let(..) => {}
                    Stmt::SetTask { task, key, .. } => {
                        out.insert(Cell::Param { task: task.clone(), key: literal_key(key) });
                    }
                    Stmt::SetClearance { task, .. } => {
                        out.insert(Cell::Clearance(task.clone()));
                    }
                    Stmt::OpenSession { .. } | Stmt::CloseSession | Stmt::SetSess { .. } => {
                        out.insert(Cell::Session);
                    }
                }
            }
        }
    }
    out
}

/// Actions that can affect `task`: its own actions plus, transitively, every
/// action writing something such an action reads. Each added action maps to
/// the action whose reads it writes.
fn influence_closure(policy: &PolicySpec, task: &str) -> BTreeMap<Name, Option<Name>> {
    let mut closure: BTreeMap<Name, Option<Name>> =
        policy.actions_of_task(task).map(|a| (a.action.clone(), None)).collect();
    let all: Vec<(&ActionSpec, BTreeSet<Cell>, BTreeSet<Cell>)> =
        policy.actions.values().map(|a| (a, reads(a), writes(a))).collect();
    loop {
        let mut added = Vec::new();
        for (a, _, w) in &all {
            if closure.contains_key(&a.action) {
                continue;
            }
            let via = all.iter().find(|(b, r, _)| {
                closure.contains_key(&b.action) && r.iter().any(|rc| w.iter().any(|wc| wc.overlaps(rc)))
            });
            if let Some((b, ..)) = via {
                added.push((a.action.clone(), b.action.clone()));
            }
        }
        if added.is_empty() {
            return closure;
        }
        for (a, via) in added {
            closure.insert(a, Some(via));
        }
    }
}

fn static_dependence(task: &str, a: &ActionSpec, closure: &BTreeMap<Name, Option<Name>>) -> Option<DependenceReason> {
    if &*a.task == task {
        return Some(DependenceReason::MemberOfTask);
    }
    let w = writes(a);
    if w.iter().any(|c| matches!(c, Cell::Param { task: t, .. } if &**t == task)) {
        return Some(DependenceReason::TaskParamsChanged);
    }
    if w.contains(&Cell::Clearance(task.into())) {
        return Some(DependenceReason::ClearanceChanged);
    }
    if w.contains(&Cell::Session) {
        return Some(DependenceReason::SessionParamsChanged);
    }
    closure
        .get(&a.action)
        .map(|via| DependenceReason::IndirectInfluence { via: via.clone().unwrap_or_else(|| a.action.clone()) })
}

/// Requests exercising `a` in `state`: one per open session, plus one per
/// declared (user, account) when `a` can open a session. Request keys the
/// action reads by literal name are filled with their defaults.
fn probe_requests(policy: &PolicySpec, a: &ActionSpec, state: &SystemState) -> Vec<RequestMsg> {
    let mut base = ParamSet::new();
    let mut collect = |e: &Expr| {
        e.walk(&mut |sub| {
            if let Expr::Param { scope: Scope::Req, key, default } = sub {
                if let (Some(k), Expr::Lit(v)) = (literal_key(key), &**default) {
                    if k != "sess" {
                        base.insert(k, v.clone());
                    }
                }
            }
        })
    };
    if let Some(c) = &a.constraint {
        collect(c);
    }
    for variant in [&a.on_authorized, &a.on_denied] {
        for (_, block) in variant.blocks() {
            for stmt in &block.stmts {
                stmt_exprs(stmt).into_iter().for_each(&mut collect);
            }
        }
    }
    let mut out = Vec::new();
    for rec in state.open_sessions.values() {
        let params = base.clone().with("sess", ParamValue::Int(rec.id));
        out.push(RequestMsg::new("probe", &rec.user, &a.action, params));
    }
    if a.opens_session() {
        for u in &policy.users {
            for acc in &policy.accounts {
                let params = base.clone().with("usr", ParamValue::text(&**u)).with("acc", ParamValue::Int(*acc));
                out.push(RequestMsg::new("probe", u, &a.action, params));
            }
        }
    }
    out
}

fn dynamic_dependence(
    policy: &PolicySpec,
    task: &str,
    a: &ActionSpec,
    samples: &[SystemState],
) -> Option<DependenceReason> {
    let task_name: Name = task.into();
    for s in samples {
        for r in probe_requests(policy, a, s) {
            for authorized in [true, false] {
                let next = match engine::step_forced(policy, s, &r, authorized) {
                    Ok((next, _)) => next,
                    Err(e) => return Some(DependenceReason::ProbeFailed(e.to_string())),
                };
                for acc in &policy.accounts {
                    if s.task_params(*acc, task) != next.task_params(*acc, task) {
                        return Some(DependenceReason::TaskParamsChanged);
                    }
                }
                let clearances = |st: &SystemState| {
                    st.clearances
                        .iter()
                        .filter(|((_, _, t), _)| *t == task_name)
                        .map(|(k, v)| (k.clone(), *v))
                        .collect::<Vec<_>>()
                };
                if clearances(s) != clearances(&next) {
                    return Some(DependenceReason::ClearanceChanged);
                }
                if s.open_sessions != next.open_sessions {
                    return Some(DependenceReason::SessionParamsChanged);
                }
            }
        }
    }
    None
}

/// Decides whether `action` is independent of `task`: the static read/write
/// analysis must find no influence and no sampled state may show a change
/// under either decision.
pub fn probe_task_independence(policy: &PolicySpec, task: &str, action: &str, samples: &[SystemState]) -> Dependence {
    let Some(a) = policy.action(action) else {
        return Dependence::Dependent(DependenceReason::ProbeFailed(format!("unknown action `{action}`")));
    };
    let closure = influence_closure(policy, task);
    probe_with(policy, task, a, samples, &closure)
}

fn probe_with(
    policy: &PolicySpec,
    task: &str,
    a: &ActionSpec,
    samples: &[SystemState],
    closure: &BTreeMap<Name, Option<Name>>,
) -> Dependence {
    match static_dependence(task, a, closure).or_else(|| dynamic_dependence(policy, task, a, samples)) {
        Some(reason) => Dependence::Dependent(reason),
        None => Dependence::Independent,
    }
}

/// Probes every action of the policy against `task`.
pub fn independence_report(policy: &PolicySpec, task: &str, samples: &[SystemState]) -> IndependenceReport {
    let closure = influence_closure(policy, task);
    let mut report = IndependenceReport {
        task: task.into(),
        independent_actions: BTreeSet::new(),
        exceptions: BTreeMap::new(),
        samples: samples.len(),
    };
    for a in policy.actions.values() {
        match probe_with(policy, task, a, samples, &closure) {
            Dependence::Independent => {
                report.independent_actions.insert(a.action.clone());
            }
            Dependence::Dependent(reason) => {
                report.exceptions.insert(a.action.clone(), reason);
            }
        }
    }
    report
}

/// Probe samples for `w`: every state of its graph when that has at most
/// `limit` nodes, otherwise the initial state and the states reached by all
/// request prefixes of length one and two. Client queues are cleared.
pub fn sample_states(policy: &PolicySpec, w: &Workload, limit: usize) -> Result<Vec<SystemState>, ExploreError> {
    let init = statespace::initial_state(policy, w);
    let cfg = ExploreConfig { node_budget: limit, parallel: true };
    let mut out: Vec<SystemState> = match explore(policy, &init, w, &cfg) {
        Ok(g) => g.states().map(|(_, s)| s.clone()).collect(),
        Err(ExploreError::Budget { .. }) => {
            let mut out = vec![init.clone()];
            for (_, s1) in statespace::successors(policy, w, &init)? {
                for (_, s2) in statespace::successors(policy, w, &s1)? {
                    out.push(s2);
                }
                out.push(s1);
            }
            out
        }
        Err(e) => return Err(e),
    };
    for s in &mut out {
        s.client_queues.clear();
    }
    out.sort_by_cached_key(SystemState::canonical_bytes);
    out.dedup();
    Ok(out)
}

/// `w` without the requests of actions independent of the report's task.
pub fn project_workload(w: &Workload, report: &IndependenceReport) -> Workload {
    w.retain_actions(|a| !report.independent_actions.contains(a))
}

/// Rules whose trigger action belongs to `task`.
pub fn rules_for_task<'r>(policy: &PolicySpec, rules: &'r [RuleDef], task: &str) -> Vec<&'r RuleDef> {
    rules.iter().filter(|d| policy.action(d.rule.trigger().0).is_some_and(|a| &*a.task == task)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleAgreement {
    pub rule: String,
    pub full_violated: bool,
    pub projected_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Equivalence {
    Equivalent,
    Differs,
    /// The full graph or a rule check exceeded its budget.
    Inconclusive(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub task: Name,
    pub report: IndependenceReport,
    pub full_nodes: usize,
    pub projected_nodes: usize,
    pub rules: Vec<RuleAgreement>,
    pub verdict: Equivalence,
}

#[derive(Debug, Error)]
pub enum SubdivisionError {
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubdivisionConfig {
    pub explore: ExploreConfig,
    pub check: CheckConfig,
    pub sample_limit: usize,
}

impl Default for SubdivisionConfig {
    fn default() -> Self {
        SubdivisionConfig {
            explore: ExploreConfig::default(),
            check: CheckConfig::default(),
            sample_limit: FULL_SAMPLE_LIMIT,
        }
    }
}

/// Checks `rules` on the full graph of `w` and on the graph of its
/// projection for `task`, and compares per-rule verdicts.
pub fn verify_equivalence(
    policy: &PolicySpec,
    w: &Workload,
    task: &str,
    rules: &[&RuleDef],
    cfg: &SubdivisionConfig,
) -> Result<EquivalenceReport, SubdivisionError> {
    let samples = sample_states(policy, w, cfg.sample_limit)?;
    let report = independence_report(policy, task, &samples);
    let projected = project_workload(w, &report);
    let mut out = EquivalenceReport {
        task: task.into(),
        report,
        full_nodes: 0,
        projected_nodes: 0,
        rules: Vec::new(),
        verdict: Equivalence::Equivalent,
    };
    let graph = |w: &Workload| explore(policy, &statespace::initial_state(policy, w), w, &cfg.explore);
    let full = match graph(w) {
        Ok(g) => g,
        Err(ExploreError::Budget { limit, .. }) => {
            out.verdict = Equivalence::Inconclusive(format!("full graph exceeds {limit} nodes"));
            return Ok(out);
        }
        Err(e) => return Err(e.into()),
    };
    let proj = match graph(&projected) {
        Ok(g) => g,
        Err(ExploreError::Budget { limit, .. }) => {
            out.verdict = Equivalence::Inconclusive(format!("projected graph exceeds {limit} nodes"));
            return Ok(out);
        }
        Err(e) => return Err(e.into()),
    };
    out.full_nodes = full.node_count();
    out.projected_nodes = proj.node_count();
    for def in rules {
        let verdicts = check_rule(&full, def, &cfg.check).and_then(|a| Ok((a, check_rule(&proj, def, &cfg.check)?)));
        let (a, b) = match verdicts {
            Ok(v) => v,
            Err(e @ RuleError::PathBudget { .. }) => {
                out.verdict = Equivalence::Inconclusive(e.to_string());
                return Ok(out);
            }
            Err(e) => return Err(e.into()),
        };
        let agreement = RuleAgreement {
            rule: def.id.clone(),
            full_violated: !a.violations.is_empty(),
            projected_violated: !b.violations.is_empty(),
        };
        if agreement.full_violated != agreement.projected_violated {
            out.verdict = Equivalence::Differs;
        }
        out.rules.push(agreement);
    }
    Ok(out)
}
