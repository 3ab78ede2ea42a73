//! Acceptance gate: runs every criterion, prints one `[PASS]` or `[FAIL]`
//! line each and exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wfsec_cli::report::{parse_runs, RunReport};
use wfsec_cli::{run, Cli};
use wfsec_core::bank::{
    bank_rules, build_bank_policy, mutant_workload, mutate_policy, table2_workload, table2_workloads, MUTANT_SOURCES,
    MUTATIONS,
};
use wfsec_core::engine::{self, run_sequence};
use wfsec_core::rules::{check_rule, replay_witness, CheckConfig, RuleDef, Strategy};
use wfsec_core::statespace::{deliver, explore, initial_state, ExploreConfig};
use wfsec_core::subdivision::{verify_equivalence, Equivalence, SubdivisionConfig};
use wfsec_core::{
    parse_policy, parse_workload, Decision, Name, ParamSet, ParamValue, PolicySpec, RequestMsg, StateGraph,
    SystemState, Workload,
};

type Criterion = Result<String, String>;
type CriterionFn = fn() -> Criterion;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn graph(p: &PolicySpec, w: &Workload) -> Result<StateGraph, String> {
    explore(p, &initial_state(p, w), w, &ExploreConfig::default()).map_err(|e| format!("{}: {e}", w.name))
}

fn rule<'r>(rules: &'r [RuleDef], id: &str) -> &'r RuleDef {
    rules.iter().find(|d| d.id == id).expect("shipped rule")
}

fn base_workload_is_clean() -> Criterion {
    let started = Instant::now();
    let p = build_bank_policy();
    let g = graph(&p, &table2_workload("base").unwrap())?;
    let rules = bank_rules();
    for def in &rules {
        let out = check_rule(&g, def, &CheckConfig::default()).map_err(|e| e.to_string())?;
        ensure!(out.violations.is_empty(), "{} violated", def.id);
        ensure!(out.complete, "{} incomplete", def.id);
    }
    ensure!(started.elapsed() < Duration::from_secs(60), "took {:?}", started.elapsed());
    let secs = started.elapsed().as_secs_f64();
    ensure!(g.node_count() < 1_000_000, "{} nodes", g.node_count());
    Ok(format!("{} nodes, {} rules clean in {secs:.2} s", g.node_count(), rules.len()))
}

/// Replays `witness` request by request through the engine, starting from
/// the root state, and compares decisions and reached states.
fn replay_by_hand(p: &PolicySpec, g: &StateGraph, witness: &[u32]) -> Result<(), String> {
    let strip = |s: &SystemState| SystemState { client_queues: Default::default(), ..s.clone() };
    let mut s = strip(g.state(g.root()));
    for &e in witness {
        let label = g.label(e);
        let (next, resp) = engine::step(p, &s, &label.response.request).map_err(|e| e.to_string())?;
        ensure!(resp == label.response, "edge {e}: response differs");
        ensure!(next == strip(g.state(g.edge(e).to)), "edge {e}: state differs");
        s = next;
    }
    Ok(())
}

fn mutations_are_caught() -> Criterion {
    let base = build_bank_policy();
    let rules = bank_rules();
    let mut witnesses = 0;
    for m in MUTATIONS {
        let p = mutate_policy(&base, m.id).map_err(|e| e.to_string())?;
        let g = graph(&p, &mutant_workload(m.id).map_err(|e| e.to_string())?)?;
        let out = check_rule(&g, rule(&rules, m.target_rule), &CheckConfig::default()).map_err(|e| e.to_string())?;
        ensure!(!out.violations.is_empty(), "{} does not violate {}", m.id, m.target_rule);
        for v in &out.violations {
            let recorded: Vec<Decision> = v.witness.iter().map(|&e| g.label(e).decision()).collect();
            let replayed = replay_witness(&p, &g, &v.witness).map_err(|e| format!("{}: {e}", m.id))?;
            ensure!(replayed == recorded, "{}: decisions differ on replay", m.id);
            replay_by_hand(&p, &g, &v.witness).map_err(|e| format!("{}: {e}", m.id))?;
            witnesses += 1;
        }
    }
    Ok(format!("{} mutations, {witnesses} witnesses replayed", MUTATIONS.len()))
}

fn registered_transfers(values: &[i64]) -> Workload {
    let mut src = String::from(
        "client c1 user master account 1 mode ordered {\n  idtf(usr = \"master\", acc = 1)\n  auth(sess = $session, pass = \"m1login\")\n",
    );
    for (i, v) in values.iter().enumerate() {
        src += &format!(
            "  transf_home(sess = $session)\n  transf_forms(sess = $session, dest = 2, val = {v})\n  transf_auth(sess = $session, tid = {}, pass = \"m1eft\")\n",
            i + 1
        );
    }
    src += "}\n";
    parse_workload("registered", &src).unwrap()
}

fn registered_limit_boundary() -> Criterion {
    // The unmutated policy refuses the approval that would break the limit,
    // so the boundary is probed on the policy without that check.
    let p = mutate_policy(&build_bank_policy(), "drop-limit-7").map_err(|e| e.to_string())?;
    let rules = bank_rules();
    let r7 = rule(&rules, "r7");
    let cases: [(&[i64], Option<i64>); 4] = [
        (&[100000, 50000], None),
        (&[50000, 50000, 50000], None),
        (&[100000, 50001], Some(150001)),
        (&[50000, 50000, 50001], Some(150001)),
    ];
    for (values, expected) in cases {
        let g = graph(&p, &registered_transfers(values))?;
        for strategy in [Strategy::Auto, Strategy::EnumeratePaths] {
            let out =
                check_rule(&g, r7, &CheckConfig { strategy, ..CheckConfig::default() }).map_err(|e| e.to_string())?;
            let got: Vec<Option<i64>> = out.violations.iter().map(|v| v.accumulated).collect();
            match expected {
                None => ensure!(got.is_empty(), "{values:?}: expected clean, got {got:?}"),
                Some(sum) => ensure!(got == vec![Some(sum)], "{values:?}: expected {sum}, got {got:?}"),
            }
        }
    }
    Ok("150000 clean, 150001 violated with accumulated 150001".into())
}

fn three_strikes() -> Criterion {
    let p = build_bank_policy();
    let r = |action: &str, params: &[(&str, ParamValue)]| {
        RequestMsg::new("c1", "master", action, params.iter().cloned().collect::<ParamSet>())
    };
    let idtf = r("idtf", &[("usr", ParamValue::text("master")), ("acc", ParamValue::Int(1))]);
    let auth = |pass: &str| r("auth", &[("sess", ParamValue::Int(1)), ("pass", ParamValue::text(pass))]);
    let last = |wrong: usize| -> Result<Decision, String> {
        let mut rs = vec![idtf.clone()];
        rs.extend((0..wrong).map(|_| auth("wrong")));
        rs.push(auth("m1login"));
        let out = run_sequence(&p, &engine::initial_state(&p), &rs).map_err(|e| e.to_string())?;
        ensure!(out[1..=wrong].iter().all(|x| x.decision == Decision::Denied), "a wrong password was accepted");
        Ok(out.last().unwrap().decision)
    };
    let (two, three) = (last(2)?, last(3)?);
    ensure!(two == Decision::Authorized, "2 wrong then correct: {two}");
    ensure!(three == Decision::Denied, "3 wrong then correct: {three}");
    Ok("2 wrong then correct authorized, 3 wrong then correct denied".into())
}

/// One step with the frame conditions checked.
fn local_step(p: &PolicySpec, s: &SystemState, r: &RequestMsg) -> Result<SystemState, String> {
    let (next, resp) = engine::step(p, s, r).map_err(|e| e.to_string())?;
    let Some(b) = &resp.binding else {
        ensure!(&next == s, "unbound request changed the state");
        return Ok(next);
    };
    for ((acc, task), params) in &s.account_task_params {
        if *acc != b.account {
            ensure!(next.account_task_params.get(&(*acc, task.clone())) == Some(params), "P_TA({task}, {acc}) changed");
        }
    }
    let keys = |st: &SystemState| -> BTreeSet<(i64, Name)> {
        st.account_task_params.keys().filter(|(acc, _)| *acc != b.account).cloned().collect()
    };
    ensure!(keys(s) == keys(&next), "another account gained parameters");
    for ((u, acc, t), cl) in &s.clearances {
        if (u, *acc) != (&b.user, b.account) {
            ensure!(
                next.clearances.get(&(u.clone(), *acc, t.clone())) == Some(cl),
                "clearance of ({u}, {acc}, {t}) changed"
            );
        }
    }
    ensure!(next.clearances.len() == s.clearances.len(), "clearance entries added or removed");
    Ok(next)
}

fn random_bank_request(rng: &mut ChaCha8Rng, s: &SystemState) -> RequestMsg {
    let user = *["master", "helper"].choose(rng).unwrap();
    let action =
        *["idtf", "auth", "balance", "transf_home", "transf_forms", "transf_auth", "logout"].choose(rng).unwrap();
    let mut params = ParamSet::new();
    let open: Vec<i64> = s.open_sessions.keys().copied().collect();
    match (action, open.choose(rng)) {
        ("idtf", _) | (_, None) => {
            params.insert("usr", ParamValue::text(user));
            params.insert("acc", ParamValue::Int(rng.gen_range(1..=2)));
        }
        (_, Some(&id)) => {
            params.insert("sess", ParamValue::Int(if rng.gen_bool(0.1) { 99 } else { id }));
        }
    }
    let passwords = ["m1login", "h1login", "m2login", "m1eft", "h1eft", "m2eft", "wrong"];
    params.insert("pass", ParamValue::text(*passwords.choose(rng).unwrap()));
    params.insert("dest", ParamValue::Int(rng.gen_range(1..=9)));
    params.insert("val", ParamValue::Int(rng.gen_range(0..=4) * 25000));
    params.insert("tid", ParamValue::Int(rng.gen_range(1..=3)));
    RequestMsg::new("c", user, action, params)
}

fn locality() -> Criterion {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let bank = build_bank_policy();
    let (mut steps, mut policies) = (0, 0);
    while steps < 10_000 {
        let use_bank = policies % 4 == 0;
        let p = if use_bank { bank.clone() } else { parse_policy(&common::random_policy_source(&mut rng)).unwrap() };
        policies += 1;
        let mut s = engine::initial_state(&p);
        for _ in 0..100 {
            let r = if use_bank { random_bank_request(&mut rng, &s) } else { common::random_request(&mut rng, &p, &s) };
            s = local_step(&p, &s, &r).map_err(|e| format!("step {steps}: {e}"))?;
            steps += 1;
        }
    }
    Ok(format!("{steps} steps over {policies} policies"))
}

const NOOP: &str = r#"
task t
users u
accounts 1
action noop task t clearance 0 {
  on_authorized { session_update { open_session(req("usr", ""), req("acc", 0)) close_session } }
}
"#;

fn interleavings() -> Criterion {
    let p = parse_policy(NOOP).unwrap();
    let mut counts = Vec::new();
    for k in [2usize, 3] {
        let src: String =
            (0..k).map(|i| format!("client c{i} user u mode free {{ noop(usr = \"u\", acc = 1) }}\n")).collect();
        let w = parse_workload("noop", &src).unwrap();
        let g = graph(&p, &w)?;
        let sinks = g.terminal_nodes();
        ensure!(sinks.len() == 1, "k = {k}: {} terminal nodes", sinks.len());
        let paths = g.acyclic_paths_to_root(sinks[0], 1000).map_err(|e| e.to_string())?.count();
        let factorial: usize = (1..=k).product();
        ensure!(paths == factorial, "k = {k}: {paths} paths");
        // Brute force: deliver along every order and collect visited states.
        let clients: Vec<Name> = w.clients.keys().cloned().collect();
        let mut seen = HashSet::new();
        let mut frontier = vec![initial_state(&p, &w)];
        while let Some(s) = frontier.pop() {
            if !seen.insert(s.clone()) {
                continue;
            }
            for c in &clients {
                for idx in w.eligible(c, &s.client_queues[c]) {
                    frontier.push(deliver(&p, &w, &s, c, idx).map_err(|e| e.to_string())?.0);
                }
            }
        }
        ensure!(g.node_count() == seen.len(), "k = {k}: {} nodes, brute force {}", g.node_count(), seen.len());
        counts.push(format!("k={k}: {paths} paths, {} nodes", g.node_count()));
    }
    Ok(counts.join("; "))
}

fn oracle_agreement() -> Criterion {
    let base = build_bank_policy();
    let rules = bank_rules();
    let mut runs: Vec<(String, PolicySpec, Workload)> =
        table2_workloads().into_iter().map(|(name, w)| (format!("bank/{name}"), base.clone(), w)).collect();
    for (name, src) in MUTANT_SOURCES {
        let w = parse_workload(name, src).unwrap();
        runs.push((format!("bank/{name}"), base.clone(), w.clone()));
        for m in MUTATIONS {
            runs.push((format!("{}/{name}", m.id), mutate_policy(&base, m.id).unwrap(), w.clone()));
        }
    }
    let limit7 = mutate_policy(&base, "drop-limit-7").unwrap();
    for values in [&[100000, 50000][..], &[100000, 50001], &[50000, 50000, 50001]] {
        runs.push((format!("drop-limit-7/{values:?}"), limit7.clone(), registered_transfers(values)));
    }
    let (mut graphs, mut checks, mut insecure) = (0, 0, 0);
    for (name, p, w) in &runs {
        let cfg = ExploreConfig { node_budget: 201, ..ExploreConfig::default() };
        let Ok(g) = explore(p, &initial_state(p, w), w, &cfg) else { continue };
        graphs += 1;
        for def in &rules {
            let oracle = common::naive_insecure_nodes(&g, def);
            for strategy in [Strategy::Auto, Strategy::EnumeratePaths] {
                let out = check_rule(&g, def, &CheckConfig { strategy, ..CheckConfig::default() })
                    .map_err(|e| e.to_string())?;
                let found: BTreeSet<u32> = out.violations.iter().map(|v| v.insecure_state).collect();
                ensure!(found == oracle, "{name} {} {strategy:?}: {found:?} vs oracle {oracle:?}", def.id);
                checks += 1;
            }
            insecure += oracle.len();
        }
    }
    ensure!(graphs > 0, "no fixture graph within 200 nodes");
    Ok(format!("{graphs} graphs, {checks} checks, {insecure} insecure nodes"))
}

fn subdivision() -> Criterion {
    let p = build_bank_policy();
    let rules = bank_rules();
    let w = table2_workload("base").unwrap();
    let mut out = Vec::new();
    for (task, ids) in [("eft", &["r5", "r6", "r7"][..]), ("balance", &["r3"][..])] {
        let selected: Vec<&RuleDef> = ids.iter().map(|id| rule(&rules, id)).collect();
        let rep =
            verify_equivalence(&p, &w, task, &selected, &SubdivisionConfig::default()).map_err(|e| e.to_string())?;
        ensure!(rep.verdict == Equivalence::Equivalent, "{task}: {:?}", rep.verdict);
        out.push(format!("{task} {} -> {} nodes", rep.full_nodes, rep.projected_nodes));
    }
    Ok(out.join("; "))
}

fn node_count_ordering() -> Criterion {
    let p = build_bank_policy();
    let count = |name: &str| graph(&p, &table2_workload(name).unwrap()).map(|g| g.node_count());
    let (base, wrong) = (count("base")?, count("wrong_login")?);
    let (same, two) = (count("helper_same_account")?, count("master_other_account")?);
    let msg = format!("wrong_login {wrong} < base {base}; same-account {same} < two-account {two}");
    ensure!(wrong < base && same < two, "{msg}");
    Ok(msg)
}

fn explore_via_cli(dir: &std::path::Path, workload: &str, tag: &str) -> Result<(Vec<u8>, String), String> {
    let dot = dir.join(format!("{tag}.dot"));
    let rep = dir.join(format!("{tag}.json"));
    let w = format!("{}/../core/fixtures/table2/{workload}.workload", env!("CARGO_MANIFEST_DIR"));
    let policy = format!("{}/../core/fixtures/bank.policy", env!("CARGO_MANIFEST_DIR"));
    let args =
        ["wfsec", "explore", "-p", &policy, "-w", &w, "--dot", dot.to_str().unwrap(), "-o", rep.to_str().unwrap()];
    let cli = Cli::try_parse_from(args).map_err(|e| e.to_string())?;
    run(&cli, None, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let json = std::fs::read_to_string(&rep).map_err(|e| e.to_string())?;
    let mut runs: Vec<RunReport> = parse_runs(&json).map_err(|e| e.to_string())?;
    ensure!(runs[0].timing.is_some(), "report without timing");
    runs[0].timing = None;
    Ok((std::fs::read(&dot).map_err(|e| e.to_string())?, runs[0].to_json()))
}

fn reproducible_output() -> Criterion {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for workload in ["base", "combined"] {
        let (dot_a, rep_a) = explore_via_cli(dir.path(), workload, "a")?;
        let (dot_b, rep_b) = explore_via_cli(dir.path(), workload, "b")?;
        ensure!(dot_a == dot_b, "{workload}: DOT differs");
        ensure!(rep_a == rep_b, "{workload}: report differs");
        bytes += dot_a.len() + rep_a.len();
    }
    Ok(format!("base and combined identical across runs ({bytes} bytes)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, CriterionFn); 10] = [
        ("base workload clean within budget", base_workload_is_clean),
        ("mutations caught with replayable witnesses", mutations_are_caught),
        ("registered-transfer limit boundary", registered_limit_boundary),
        ("three strikes", three_strikes),
        ("locality of updates", locality),
        ("interleavings of independent clients", interleavings),
        ("rule checker agrees with path oracle", oracle_agreement),
        ("task subdivision preserves verdicts", subdivision),
        ("node-count ordering", node_count_ordering),
        ("reproducible DOT and report", reproducible_output),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
