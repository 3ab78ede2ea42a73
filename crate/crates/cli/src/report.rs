//! Run reports: the JSON documents written by `explore`, `check`,
//! `independence` and `report`.
//!
//! Everything except `timing` is a function of the inputs, so two runs on
//! the same inputs serialize identically once timings are dropped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wfsec_core::rules::{CheckOutcome, RuleDef, Violation};
use wfsec_core::subdivision::{Equivalence, EquivalenceReport, IndependenceReport};
use wfsec_core::{PolicySpec, StateGraph};

/// Identifier of the report layout, bumped on incompatible changes.
pub const SCHEMA: &str = "wfsec-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Explore,
    Check,
    Independence,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub kind: ReportKind,
    /// SHA-256 of the printed policy, so layout and comments do not matter.
    pub policy_hash: String,
    pub workload: Option<String>,
    pub budget: BudgetStatus,
    pub graph: Option<GraphStats>,
    #[serde(default)]
    pub rules: Vec<RuleResult>,
    #[serde(default)]
    pub independence: Vec<IndependenceResult>,
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetStatus {
    pub node_budget: usize,
    pub path_budget: usize,
    pub node_budget_exhausted: bool,
    pub path_budget_exhausted: bool,
    /// Some verdict rests on a truncated graph or path set.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub sccs: usize,
    pub cyclic_sccs: usize,
    pub terminal_nodes: usize,
    pub complete: bool,
}

impl GraphStats {
    pub fn of(g: &StateGraph) -> Self {
        GraphStats {
            nodes: g.node_count(),
            edges: g.edge_count(),
            sccs: g.sccs().len(),
            cyclic_sccs: g.cyclic_sccs().len(),
            terminal_nodes: g.terminal_nodes().len(),
            complete: g.complete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleStatus {
    Clean,
    Violated,
    /// No violation found, but the search was cut short.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub id: String,
    pub source: String,
    pub status: RuleStatus,
    pub paths_examined: usize,
    pub violations: Vec<ViolationRecord>,
}

impl RuleResult {
    /// Summarizes a finished check. `complete` says whether the graph and
    /// the path search both ran to the end.
    pub fn new(g: &StateGraph, def: &RuleDef, violations: &[Violation], paths_examined: usize, complete: bool) -> Self {
        let status = match (violations.is_empty(), complete) {
            (false, _) => RuleStatus::Violated,
            (true, true) => RuleStatus::Clean,
            (true, false) => RuleStatus::Unknown,
        };
        RuleResult {
            id: def.id.clone(),
            source: def.source.clone(),
            status,
            paths_examined,
            violations: violations.iter().map(|v| ViolationRecord::new(g, v)).collect(),
        }
    }

    pub fn from_outcome(g: &StateGraph, def: &RuleDef, out: &CheckOutcome) -> Self {
        Self::new(g, def, &out.violations, out.paths_examined, out.complete && g.complete)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub insecure_state: u32,
    pub accumulated: Option<i64>,
    pub on_cycle: bool,
    pub witness: Vec<WitnessStep>,
}

impl ViolationRecord {
    pub fn new(g: &StateGraph, v: &Violation) -> Self {
        let witness = v
            .witness
            .iter()
            .map(|&e| {
                let edge = g.edge(e);
                let label = g.label(e);
                let r = &label.response;
                WitnessStep {
                    from: edge.from,
                    to: edge.to,
                    client: label.client.to_string(),
                    user: r.request.user.to_string(),
                    action: r.request.action.to_string(),
                    params: r.request.params.to_string(),
                    decision: r.decision.to_string(),
                }
            })
            .collect();
        ViolationRecord { insecure_state: v.insecure_state, accumulated: v.accumulated, on_cycle: v.on_cycle, witness }
    }
}

/// One delivered request on a witness path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessStep {
    pub from: u32,
    pub to: u32,
    pub client: String,
    pub user: String,
    pub action: String,
    pub params: String,
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndependenceResult {
    pub task: String,
    pub samples: usize,
    pub independent_actions: Vec<String>,
    /// Dependent actions with the first reason found.
    pub exceptions: BTreeMap<String, String>,
    pub equivalence: Option<EquivalenceResult>,
}

impl IndependenceResult {
    pub fn new(report: &IndependenceReport, equivalence: Option<&EquivalenceReport>) -> Self {
        IndependenceResult {
            task: report.task.to_string(),
            samples: report.samples,
            independent_actions: report.independent_actions.iter().map(|a| a.to_string()).collect(),
            exceptions: report.exceptions.iter().map(|(a, r)| (a.to_string(), r.to_string())).collect(),
            equivalence: equivalence.map(EquivalenceResult::new),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivalenceVerdict {
    Equivalent,
    Differs,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub verdict: EquivalenceVerdict,
    pub detail: Option<String>,
    pub full_nodes: usize,
    pub projected_nodes: usize,
    pub rules: Vec<RuleAgreementRecord>,
}

impl EquivalenceResult {
    pub fn new(r: &EquivalenceReport) -> Self {
        let (verdict, detail) = match &r.verdict {
            Equivalence::Equivalent => (EquivalenceVerdict::Equivalent, None),
            Equivalence::Differs => (EquivalenceVerdict::Differs, None),
            Equivalence::Inconclusive(msg) => (EquivalenceVerdict::Inconclusive, Some(msg.clone())),
        };
        EquivalenceResult {
            verdict,
            detail,
            full_nodes: r.full_nodes,
            projected_nodes: r.projected_nodes,
            rules: r
                .rules
                .iter()
                .map(|a| RuleAgreementRecord {
                    id: a.rule.clone(),
                    full_violated: a.full_violated,
                    projected_violated: a.projected_violated,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleAgreementRecord {
    pub id: String,
    pub full_violated: bool,
    pub projected_violated: bool,
}

/// Wall-clock durations in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub explore_us: u64,
    pub check_us: u64,
    pub total_us: u64,
}

/// Several run reports with a combined verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub schema: String,
    pub kind: ReportKind,
    pub summary: Summary,
    pub runs: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    /// `workload/rule` for every violated rule, in run order.
    pub violated: Vec<String>,
    pub partial_runs: usize,
    pub status: Status,
}

/// Overall verdict of a run, which is also its exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Clean,
    Violations,
    /// Budget exhausted or some verdict unknown, and nothing violated.
    Partial,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Clean => 0,
            Status::Violations => 2,
            Status::Partial => 3,
        }
    }

    /// Violations dominate, then partial results.
    pub fn combine(self, other: Status) -> Status {
        match (self, other) {
            (Status::Violations, _) | (_, Status::Violations) => Status::Violations,
            (Status::Partial, _) | (_, Status::Partial) => Status::Partial,
            _ => Status::Clean,
        }
    }
}

impl RunReport {
    pub fn new(kind: ReportKind, policy: &PolicySpec, workload: Option<&str>, budget: BudgetStatus) -> Self {
        RunReport {
            schema: SCHEMA.to_string(),
            kind,
            policy_hash: policy_hash(policy),
            workload: workload.map(str::to_string),
            budget,
            graph: None,
            rules: Vec::new(),
            independence: Vec::new(),
            timing: None,
        }
    }

    pub fn status(&self) -> Status {
        let differs = self
            .independence
            .iter()
            .filter_map(|i| i.equivalence.as_ref())
            .any(|e| e.verdict == EquivalenceVerdict::Differs);
        if differs || self.rules.iter().any(|r| r.status == RuleStatus::Violated) {
            return Status::Violations;
        }
        let inconclusive = self
            .independence
            .iter()
            .filter_map(|i| i.equivalence.as_ref())
            .any(|e| e.verdict == EquivalenceVerdict::Inconclusive);
        if self.budget.partial || inconclusive || self.rules.iter().any(|r| r.status == RuleStatus::Unknown) {
            return Status::Partial;
        }
        Status::Clean
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

impl MergedReport {
    pub fn merge(runs: Vec<RunReport>) -> Self {
        let violated = runs
            .iter()
            .flat_map(|r| {
                let w = r.workload.clone().unwrap_or_default();
                r.rules.iter().filter(|x| x.status == RuleStatus::Violated).map(move |x| format!("{w}/{}", x.id))
            })
            .collect();
        let status = runs.iter().fold(Status::Clean, |s, r| s.combine(r.status()));
        MergedReport {
            schema: SCHEMA.to_string(),
            kind: ReportKind::Merged,
            summary: Summary {
                runs: runs.len(),
                violated,
                partial_runs: runs.iter().filter(|r| r.budget.partial).count(),
                status,
            },
            runs,
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

fn to_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

/// Hex SHA-256 of the policy's printed form.
pub fn policy_hash(policy: &PolicySpec) -> String {
    hex::encode(Sha256::digest(policy.to_string().as_bytes()))
}

/// Reads a run report or a merged report and returns its runs.
pub fn parse_runs(json: &str) -> Result<Vec<RunReport>, serde_json::Error> {
    #[derive(Deserialize)]
    struct Probe {
        kind: ReportKind,
    }
    match serde_json::from_str::<Probe>(json)?.kind {
        ReportKind::Merged => Ok(serde_json::from_str::<MergedReport>(json)?.runs),
        _ => Ok(vec![serde_json::from_str::<RunReport>(json)?]),
    }
}
