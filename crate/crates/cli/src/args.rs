//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Clone, Parser)]
#[command(
    name = "wfsec",
    version,
    about = "Explore workflow security policies and check rules over request interleavings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Deliver a workload once, without branching, and print the responses.
    Simulate(SimulateArgs),
    /// Build the reachability graph of a workload.
    Explore(ExploreArgs),
    /// Build the reachability graph and check rules on it.
    Check(CheckArgs),
    /// Report which actions are independent of a task.
    Independence(IndependenceArgs),
    /// Merge reports written by earlier runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Policy file.
    #[arg(short = 'p', long)]
    pub policy: PathBuf,
    /// Apply a mutation from the banking mutation catalog to the policy.
    #[arg(long, value_name = "ID")]
    pub mutation: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    /// Node budget. Overrides WFSEC_BUDGET.
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
    /// Path budget per rule query.
    #[arg(long, value_name = "N")]
    pub path_budget: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Write the report here instead of standard output.
    #[arg(short = 'o', long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Workload file.
    #[arg(short = 'w', long)]
    pub workload: PathBuf,
    /// Run each client to completion in turn instead of round-robin.
    #[arg(long)]
    pub ordered: bool,
    /// Write the transcript here instead of standard output.
    #[arg(short = 'o', long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExploreArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Workload file.
    #[arg(short = 'w', long)]
    pub workload: PathBuf,
    /// Halt a client after its first denied request.
    #[arg(long)]
    pub stop_on_deny: bool,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Write the graph in DOT format.
    #[arg(long, value_name = "FILE")]
    pub dot: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub explore: ExploreArgs,
    /// Rule file.
    #[arg(short = 'r', long)]
    pub rules: PathBuf,
    /// Check only these rules. Repeatable.
    #[arg(long = "rule", value_name = "ID")]
    pub only: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct IndependenceArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Task whose independent actions are reported.
    #[arg(short = 't', long)]
    pub task: String,
    /// Workload whose reachable states serve as probe samples.
    #[arg(short = 'w', long)]
    pub workload: Option<PathBuf>,
    /// Rule file. With a workload, the task's rules are checked on the full
    /// and on the projected workload and the verdicts compared.
    #[arg(short = 'r', long)]
    pub rules: Option<PathBuf>,
    /// Compare only these rules instead of those triggered by the task. Repeatable.
    #[arg(long = "rule", value_name = "ID")]
    pub only: Vec<String>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Reports to merge, in order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write the merged report here instead of standard output.
    #[arg(short = 'o', long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}
