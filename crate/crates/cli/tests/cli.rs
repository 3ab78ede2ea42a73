//! The `wfsec` binary: subcommands, exit statuses, budgets and reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wfsec_cli::report::{parse_runs, MergedReport, ReportKind, RuleStatus, RunReport, Status};
use wfsec_cli::{node_budget, CliError};

fn fixture(rel: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "fixtures", rel].iter().collect();
    p.to_string_lossy().into_owned()
}

fn wfsec(args: &[&str]) -> Output {
    wfsec_env(args, None)
}

fn wfsec_env(args: &[&str], budget: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wfsec"));
    cmd.args(args).env_remove("WFSEC_BUDGET");
    if let Some(b) = budget {
        cmd.env("WFSEC_BUDGET", b);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn run_report(o: &Output) -> RunReport {
    let runs = parse_runs(std::str::from_utf8(&o.stdout).unwrap()).unwrap();
    assert_eq!(runs.len(), 1);
    runs.into_iter().next().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn simulate_prints_one_line_per_response() {
    let policy = fixture("bank.policy");
    let w = fixture("table2/base.workload");
    let o = wfsec(&["simulate", "-p", &policy, "-w", &w, "--ordered"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.contains("-> authorized")), "{text}");
    assert!(lines[0].contains("idtf"));
    assert!(lines[6].contains("logout"));
}

#[test]
fn small_budget_gives_partial_result() {
    let policy = fixture("bank.policy");
    let w = fixture("table2/base.workload");
    let o = wfsec(&["explore", "-p", &policy, "-w", &w, "--budget", "10"]);
    assert_eq!(code(&o), 3);
    let r = run_report(&o);
    assert!(r.budget.partial && r.budget.node_budget_exhausted);
    assert_eq!(r.graph.unwrap().nodes, 10);
}

#[test]
fn budget_flag_beats_environment() {
    let policy = fixture("bank.policy");
    let w = fixture("table2/base.workload");
    let o = wfsec_env(&["explore", "-p", &policy, "-w", &w], Some("12"));
    assert_eq!(code(&o), 3);
    assert_eq!(run_report(&o).budget.node_budget, 12);
    let o = wfsec_env(&["explore", "-p", &policy, "-w", &w, "--budget", "1000"], Some("12"));
    assert_eq!(code(&o), 0);
    let r = run_report(&o);
    assert_eq!(r.budget.node_budget, 1000);
    assert_eq!(r.graph.unwrap().nodes, 210);
    assert_eq!(code(&wfsec_env(&["explore", "-p", &policy, "-w", &w], Some("lots"))), 1);
}

#[test]
fn budget_resolution() {
    assert_eq!(node_budget(None, None).unwrap(), 1_000_000);
    assert_eq!(node_budget(None, Some("50")).unwrap(), 50);
    assert_eq!(node_budget(Some(7), Some("50")).unwrap(), 7);
    assert!(matches!(node_budget(None, Some("0")), Err(CliError::BudgetEnv(_))));
}

#[test]
fn check_base_is_clean() {
    let o = wfsec(&[
        "check",
        "-p",
        &fixture("bank.policy"),
        "-w",
        &fixture("table2/base.workload"),
        "-r",
        &fixture("bank.rules"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = run_report(&o);
    assert_eq!(r.kind, ReportKind::Check);
    assert_eq!(r.rules.len(), 9);
    assert!(r.rules.iter().all(|x| x.status == RuleStatus::Clean));
    assert_eq!(r.graph.unwrap().nodes, 210);
    assert!(r.timing.is_some());
    assert_eq!(r.policy_hash.len(), 64);
}

#[test]
fn check_mutant_reports_witness() {
    let o = wfsec(&[
        "check",
        "-p",
        &fixture("bank.policy"),
        "--mutation",
        "drop-limit-7",
        "-w",
        &fixture("mutants/limit_7.workload"),
        "-r",
        &fixture("bank.rules"),
        "--rule",
        "r7",
    ]);
    assert_eq!(code(&o), 2);
    let r = run_report(&o);
    assert_eq!(r.rules.len(), 1);
    let v = &r.rules[0].violations[0];
    assert_eq!(v.accumulated, Some(200_000));
    let last = v.witness.last().unwrap();
    assert_eq!(
        (last.action.as_str(), last.decision.as_str(), last.to),
        ("transf_auth", "authorized", v.insecure_state)
    );
    assert_eq!(v.witness[0].from, 0);
    assert!(v.witness.windows(2).all(|p| p[0].to == p[1].from));
}

#[test]
fn unknown_rule_and_mutation_are_errors() {
    let args = |extra: &[&str]| {
        let mut a = vec![
            "check".to_string(),
            "-p".into(),
            fixture("bank.policy"),
            "-w".into(),
            fixture("table2/base.workload"),
            "-r".into(),
            fixture("bank.rules"),
        ];
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    };
    let o = wfsec(&args(&["--rule", "r99"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("r99"));
    let o = wfsec(&args(&["--mutation", "nope"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 1);
}

#[test]
fn malformed_policy_is_reported_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = path(dir.path(), "bad.policy");
    std::fs::write(&bad, "task a\naction x task a clearance { }\n").unwrap();
    let o = wfsec(&["explore", "-p", &bad, "-w", &fixture("table2/base.workload")]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.policy") && err.contains('2'), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&wfsec(&["check"])), 1);
    assert_eq!(code(&wfsec(&["frobnicate"])), 1);
    assert_eq!(code(&wfsec(&["--help"])), 0);
}

#[test]
fn explore_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let policy = fixture("bank.policy");
    let w = fixture("table2/helper_same_account.workload");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (dot, rep) = (path(dir.path(), &format!("g{i}.dot")), path(dir.path(), &format!("r{i}.json")));
        let o = wfsec(&["explore", "-p", &policy, "-w", &w, "--dot", &dot, "-o", &rep, "--no-timing"]);
        assert_eq!(code(&o), 0);
        outputs.push((std::fs::read(&dot).unwrap(), std::fs::read(&rep).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].0.starts_with(b"digraph"));
}

#[test]
fn stop_on_deny_flag_prunes() {
    let policy = fixture("bank.policy");
    let w = fixture("table2/wrong_login.workload");
    let nodes = |extra: &[&str]| {
        let mut a = vec!["explore", "-p", &policy, "-w", &w];
        a.extend_from_slice(extra);
        run_report(&wfsec(&a)).graph.unwrap().nodes
    };
    assert_eq!((nodes(&[]), nodes(&["--stop-on-deny"])), (160, 14));
}

#[test]
fn independence_with_rules_compares_verdicts() {
    let o = wfsec(&[
        "independence",
        "-p",
        &fixture("bank.policy"),
        "-t",
        "balance",
        "-w",
        &fixture("table2/base.workload"),
        "-r",
        &fixture("bank.rules"),
        "--rule",
        "r3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = run_report(&o);
    let ind = &r.independence[0];
    assert_eq!(ind.task, "balance");
    assert!(ind.exceptions.contains_key("balance"));
    let eq = ind.equivalence.as_ref().unwrap();
    assert_eq!(eq.rules.len(), 1);
    assert!(eq.projected_nodes < eq.full_nodes);

    let o = wfsec(&["independence", "-p", &fixture("bank.policy"), "-t", "nowhere"]);
    assert_eq!(code(&o), 1);
    let o = wfsec(&["independence", "-p", &fixture("bank.policy"), "-t", "eft"]);
    assert_eq!(code(&o), 0);
    assert_eq!(run_report(&o).independence[0].samples, 1);
}

#[test]
fn report_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    let clean = path(dir.path(), "clean.json");
    let bad = path(dir.path(), "bad.json");
    let partial = path(dir.path(), "partial.json");
    let merged = path(dir.path(), "merged.json");
    let (policy, rules) = (fixture("bank.policy"), fixture("bank.rules"));
    let base = fixture("table2/base.workload");
    wfsec(&["check", "-p", &policy, "-w", &base, "-r", &rules, "-o", &clean]);
    wfsec(&[
        "check",
        "-p",
        &policy,
        "--mutation",
        "drop-login-guard",
        "-w",
        &fixture("mutants/login_guard.workload"),
        "-r",
        &rules,
        "-o",
        &bad,
    ]);
    wfsec(&["explore", "-p", &policy, "-w", &base, "--budget", "10", "-o", &partial]);

    let o = wfsec(&["report", &clean, &partial, "-o", &merged]);
    assert_eq!(code(&o), 3);
    let o = wfsec(&["report", &clean, &bad, &partial, "-o", &merged]);
    assert_eq!(code(&o), 2);
    let m: MergedReport = serde_json::from_str(&std::fs::read_to_string(&merged).unwrap()).unwrap();
    assert_eq!(m.summary.runs, 3);
    assert_eq!(m.summary.violated, vec!["login_guard/r1".to_string()]);
    assert_eq!(m.summary.partial_runs, 1);
    assert_eq!(m.summary.status, Status::Violations);

    // A merged report can be merged again.
    let o = wfsec(&["report", &merged, &clean]);
    assert_eq!(code(&o), 2);
    assert_eq!(parse_runs(std::str::from_utf8(&o.stdout).unwrap()).unwrap().len(), 4);

    let junk = path(dir.path(), "junk.json");
    std::fs::write(&junk, "{}").unwrap();
    assert_eq!(code(&wfsec(&["report", &junk])), 1);
}

/// Field names in the shipped schema match what the reports serialize.
#[test]
fn schema_document_matches_reports() {
    use serde_json::Value;
    let schema_path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "docs", "report.schema.json"].iter().collect();
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let keys = |v: &Value| -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let required = |def: &str| -> Vec<String> {
        let mut k: Vec<String> = schema["$defs"][def]["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_str().unwrap().to_string())
            .collect();
        k.sort();
        assert_eq!(k, keys(&schema["$defs"][def]["properties"]), "{def}");
        k
    };

    let dir = tempfile::tempdir().unwrap();
    let (check, ind, merged) = (path(dir.path(), "c.json"), path(dir.path(), "i.json"), path(dir.path(), "m.json"));
    let (policy, rules) = (fixture("bank.policy"), fixture("bank.rules"));
    wfsec(&[
        "check",
        "-p",
        &policy,
        "--mutation",
        "drop-limit-7",
        "-w",
        &fixture("mutants/limit_7.workload"),
        "-r",
        &rules,
        "-o",
        &check,
    ]);
    wfsec(&[
        "independence",
        "-p",
        &policy,
        "-t",
        "eft",
        "-w",
        &fixture("table2/base.workload"),
        "-r",
        &rules,
        "-o",
        &ind,
    ]);
    wfsec(&["report", &check, &ind, "-o", &merged]);
    let read = |p: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (c, i, m) = (read(&check), read(&ind), read(&merged));

    assert_eq!(keys(&c), required("run"));
    assert_eq!(keys(&c["budget"]), required("budget"));
    assert_eq!(keys(&c["graph"]), required("graph"));
    assert_eq!(keys(&c["timing"]), required("timing"));
    let violated = c["rules"].as_array().unwrap().iter().find(|r| r["status"] == "violated").unwrap();
    assert_eq!(keys(violated), required("rule"));
    assert_eq!(keys(&violated["violations"][0]), required("violation"));
    assert_eq!(keys(&violated["violations"][0]["witness"][0]), required("step"));
    assert_eq!(keys(&i["independence"][0]), required("independence"));
    assert_eq!(keys(&i["independence"][0]["equivalence"]), required("equivalence"));
    assert_eq!(keys(&m), required("merged"));
    assert_eq!(keys(&m["summary"]), keys(&schema["$defs"]["merged"]["properties"]["summary"]["properties"]));
    assert_eq!(c["schema"], schema["$id"]);
}
