//! Command-line front end: loads policies, workloads and rules from files,
//! runs the engine, explorer and checker, and writes JSON run reports.
//!
//! Exit status: 0 clean, 1 usage or input error, 2 violations found,
//! 3 budget exhausted or result partial.

pub mod args;
pub mod report;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use wfsec_core::bank::{mutate_policy, BankError};
use wfsec_core::policy::PolicyError;
use wfsec_core::rules::{check_rule, parse_rules, CheckConfig, NotationError, RuleDef, RuleError};
use wfsec_core::statespace::{self, simulate, to_dot, ExploreError, DEFAULT_NODE_BUDGET, DEFAULT_PATH_BUDGET};
use wfsec_core::subdivision::{
    independence_report, rules_for_task, sample_states, verify_equivalence, SubdivisionConfig, SubdivisionError,
    FULL_SAMPLE_LIMIT,
};
use wfsec_core::workload::WorkloadError;
use wfsec_core::{engine, explore, parse_policy, parse_workload, ExploreConfig, PolicySpec, StateGraph, Workload};

use args::{BudgetArgs, CheckArgs, ExploreArgs, IndependenceArgs, OutputArgs, PolicyArgs, ReportArgs, SimulateArgs};
pub use args::{Cli, Command};
use report::{
    BudgetStatus, GraphStats, IndependenceResult, MergedReport, ReportKind, RuleResult, RunReport, Status, Timing,
};

/// Environment variable overriding the default node budget.
pub const BUDGET_ENV: &str = "WFSEC_BUDGET";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Policy { path: PathBuf, source: PolicyError },
    #[error("{}: {source}", path.display())]
    Workload { path: PathBuf, source: WorkloadError },
    #[error("{}: {source}", path.display())]
    Rules { path: PathBuf, source: NotationError },
    #[error("{}: not a report: {source}", path.display())]
    Report { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Mutation(#[from] BankError),
    #[error("{BUDGET_ENV} must be a positive integer, got `{0}`")]
    BudgetEnv(String),
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("--rule needs --rules")]
    RuleWithoutFile,
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Check(#[from] RuleError),
    #[error(transparent)]
    Subdivision(#[from] SubdivisionError),
    #[error("writing output: {0}")]
    Output(io::Error),
}

/// What a command produced besides its main output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub status: Status,
    /// One line for standard error.
    pub summary: String,
}

/// Runs `cli`. The main output goes to `stdout` unless redirected to a file;
/// `env_budget` is the value of [`BUDGET_ENV`], if set.
pub fn run(cli: &Cli, env_budget: Option<&str>, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::Explore(a) => cmd_explore(a, env_budget, stdout),
        Command::Check(a) => cmd_check(a, env_budget, stdout),
        Command::Independence(a) => cmd_independence(a, env_budget, stdout),
        Command::Report(a) => cmd_report(a, stdout),
    }
}

/// Node budget from the flag, else the environment, else the default.
pub fn node_budget(flag: Option<usize>, env: Option<&str>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match env {
        None => Ok(DEFAULT_NODE_BUDGET),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::BudgetEnv(v.to_string())),
        },
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn emit(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Io { path: p.to_path_buf(), source }),
        None => stdout.write_all(text.as_bytes()).map_err(CliError::Output),
    }
}

fn load_policy(a: &PolicyArgs) -> Result<PolicySpec, CliError> {
    let spec = parse_policy(&read(&a.policy)?).map_err(|source| CliError::Policy { path: a.policy.clone(), source })?;
    match &a.mutation {
        Some(id) => Ok(mutate_policy(&spec, id)?),
        None => Ok(spec),
    }
}

fn load_workload(path: &Path) -> Result<Workload, CliError> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_workload(&stem, &read(path)?).map_err(|source| CliError::Workload { path: path.to_path_buf(), source })
}

fn load_rules(path: &Path, only: &[String]) -> Result<Vec<RuleDef>, CliError> {
    let all = parse_rules(&read(path)?).map_err(|source| CliError::Rules { path: path.to_path_buf(), source })?;
    select_rules(all, only)
}

fn select_rules(all: Vec<RuleDef>, only: &[String]) -> Result<Vec<RuleDef>, CliError> {
    if only.is_empty() {
        return Ok(all);
    }
    if let Some(missing) = only.iter().find(|id| !all.iter().any(|d| &d.id == *id)) {
        return Err(CliError::UnknownRule(missing.clone()));
    }
    Ok(all.into_iter().filter(|d| only.contains(&d.id)).collect())
}

fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros().try_into().unwrap_or(u64::MAX)
}

fn cmd_simulate(a: &SimulateArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let policy = load_policy(&a.policy)?;
    let w = load_workload(&a.workload)?;
    let responses = simulate(&policy, &w, !a.ordered)?;
    let mut text = format!("# workload {} policy {}\n", w.name, report::policy_hash(&policy));
    for (i, (client, r)) in responses.iter().enumerate() {
        let q = &r.request;
        text += &format!("{} {client} {} {}{} -> {}", i + 1, q.user, q.action, q.params, r.decision);
        if !r.payload.is_empty() {
            text += &format!(" {}", r.payload);
        }
        text.push('\n');
    }
    emit(a.output.as_deref(), &text, stdout)?;
    Ok(Outcome { status: Status::Clean, summary: format!("{} responses", responses.len()) })
}

struct Explored {
    graph: StateGraph,
    report: RunReport,
    started: Instant,
    explore_us: u64,
}

fn explore_run(a: &ExploreArgs, kind: ReportKind, env_budget: Option<&str>) -> Result<Explored, CliError> {
    let started = Instant::now();
    let policy = load_policy(&a.policy)?;
    let mut w = load_workload(&a.workload)?;
    if a.stop_on_deny {
        w.stop_on_deny = true;
    }
    let node_budget = node_budget(a.budget.budget, env_budget)?;
    let cfg = ExploreConfig { node_budget, ..ExploreConfig::default() };
    let (graph, exhausted) = match explore(&policy, &statespace::initial_state(&policy, &w), &w, &cfg) {
        Ok(g) => (g, false),
        Err(ExploreError::Budget { partial, .. }) => (*partial, true),
        Err(e) => return Err(e.into()),
    };
    let budget = BudgetStatus {
        node_budget,
        path_budget: path_budget(&a.budget),
        node_budget_exhausted: exhausted,
        path_budget_exhausted: false,
        partial: exhausted,
    };
    let mut report = RunReport::new(kind, &policy, Some(&w.name), budget);
    report.graph = Some(GraphStats::of(&graph));
    let explore_us = micros(started);
    Ok(Explored { graph, report, started, explore_us })
}

fn path_budget(b: &BudgetArgs) -> usize {
    b.path_budget.unwrap_or(DEFAULT_PATH_BUDGET)
}

fn finish(
    mut report: RunReport,
    out: &OutputArgs,
    timing: Timing,
    stdout: &mut dyn Write,
) -> Result<Outcome, CliError> {
    if !out.no_timing {
        report.timing = Some(timing);
    }
    emit(out.output.as_deref(), &report.to_json(), stdout)?;
    let status = report.status();
    let mut summary = match &report.graph {
        Some(g) => format!("{} nodes, {} edges, {} sccs", g.nodes, g.edges, g.sccs),
        None => String::new(),
    };
    if !report.rules.is_empty() {
        let violated = report.rules.iter().filter(|r| r.status == report::RuleStatus::Violated).count();
        summary += &format!("; {violated} of {} rules violated", report.rules.len());
    }
    if report.budget.partial {
        summary += "; partial result";
    }
    Ok(Outcome { status, summary })
}

fn cmd_explore(a: &ExploreArgs, env_budget: Option<&str>, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let run = explore_run(a, ReportKind::Explore, env_budget)?;
    if let Some(path) = &a.dot {
        emit(Some(path), &to_dot(&run.graph), stdout)?;
    }
    let timing = Timing { explore_us: run.explore_us, check_us: 0, total_us: micros(run.started) };
    finish(run.report, &a.out, timing, stdout)
}

fn cmd_check(a: &CheckArgs, env_budget: Option<&str>, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let rules = load_rules(&a.rules, &a.only)?;
    let mut run = explore_run(&a.explore, ReportKind::Check, env_budget)?;
    if let Some(path) = &a.explore.dot {
        emit(Some(path), &to_dot(&run.graph), stdout)?;
    }
    let checking = Instant::now();
    let cfg = CheckConfig { path_budget: run.report.budget.path_budget, ..CheckConfig::default() };
    for def in &rules {
        let result = match check_rule(&run.graph, def, &cfg) {
            Ok(out) => RuleResult::from_outcome(&run.graph, def, &out),
            Err(RuleError::PathBudget { partial, .. }) => {
                run.report.budget.path_budget_exhausted = true;
                run.report.budget.partial = true;
                RuleResult::new(&run.graph, def, &partial, 0, false)
            }
            Err(e) => return Err(e.into()),
        };
        run.report.rules.push(result);
    }
    let timing = Timing { explore_us: run.explore_us, check_us: micros(checking), total_us: micros(run.started) };
    finish(run.report, &a.explore.out, timing, stdout)
}

fn cmd_independence(
    a: &IndependenceArgs,
    env_budget: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let policy = load_policy(&a.policy)?;
    if !policy.tasks.iter().any(|t| **t == *a.task) {
        return Err(CliError::UnknownTask(a.task.clone()));
    }
    if a.rules.is_none() && !a.only.is_empty() {
        return Err(CliError::RuleWithoutFile);
    }
    let workload = a.workload.as_deref().map(load_workload).transpose()?;
    let node_budget = node_budget(a.budget.budget, env_budget)?;
    let budget = BudgetStatus {
        node_budget,
        path_budget: path_budget(&a.budget),
        node_budget_exhausted: false,
        path_budget_exhausted: false,
        partial: false,
    };
    let mut report = RunReport::new(ReportKind::Independence, &policy, workload.as_ref().map(|w| &*w.name), budget);
    let mut explore_us = 0;
    let mut check_us = 0;
    let result = match (&workload, &a.rules) {
        (Some(w), Some(rules_path)) => {
            let all = parse_rules(&read(rules_path)?)
                .map_err(|source| CliError::Rules { path: rules_path.clone(), source })?;
            let selected: Vec<&RuleDef> = if a.only.is_empty() {
                rules_for_task(&policy, &all, &a.task)
            } else {
                let chosen = select_rules(all.clone(), &a.only)?;
                all.iter().filter(|d| chosen.iter().any(|c| c.id == d.id)).collect()
            };
            let cfg = SubdivisionConfig {
                explore: ExploreConfig { node_budget, ..ExploreConfig::default() },
                check: CheckConfig { path_budget: report.budget.path_budget, ..CheckConfig::default() },
                sample_limit: FULL_SAMPLE_LIMIT,
            };
            let checking = Instant::now();
            let eq = verify_equivalence(&policy, w, &a.task, &selected, &cfg)?;
            check_us = micros(checking);
            if matches!(eq.verdict, wfsec_core::subdivision::Equivalence::Inconclusive(_)) {
                report.budget.partial = true;
            }
            IndependenceResult::new(&eq.report, Some(&eq))
        }
        (w, _) => {
            let sampling = Instant::now();
            let samples = match w {
                Some(w) => sample_states(&policy, w, FULL_SAMPLE_LIMIT)?,
                None => vec![engine::initial_state(&policy)],
            };
            explore_us = micros(sampling);
            IndependenceResult::new(&independence_report(&policy, &a.task, &samples), None)
        }
    };
    let summary_line =
        format!("{} independent, {} dependent", result.independent_actions.len(), result.exceptions.len());
    report.independence.push(result);
    let timing = Timing { explore_us, check_us, total_us: micros(started) };
    let outcome = finish(report, &a.out, timing, stdout)?;
    Ok(Outcome { summary: summary_line, ..outcome })
}

fn cmd_report(a: &ReportArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let mut runs = Vec::new();
    for path in &a.inputs {
        let parsed =
            report::parse_runs(&read(path)?).map_err(|source| CliError::Report { path: path.clone(), source })?;
        runs.extend(parsed);
    }
    let merged = MergedReport::merge(runs);
    emit(a.output.as_deref(), &merged.to_json(), stdout)?;
    let s = &merged.summary;
    Ok(Outcome {
        status: s.status,
        summary: format!("{} runs, {} violated rules, {} partial", s.runs, s.violated.len(), s.partial_runs),
    })
}
