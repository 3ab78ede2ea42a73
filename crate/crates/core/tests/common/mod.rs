//! Shared generators for integration tests: random well-typed policies,
//! random requests and a naive rule oracle.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use wfsec_core::model::{Decision, ParamSet, ParamValue, RequestMsg, ResponseMsg, SystemState};
use wfsec_core::rules::{eval_path, PathVerdict, RuleDef};
use wfsec_core::statespace::{EdgeId, NodeId, StateGraph};
use wfsec_core::PolicySpec;

pub const USERS: &[&str] = &["u0", "u1", "u2"];
pub const ACCOUNTS: &[i64] = &[1, 2, 3];

/// Random policy source over tasks `t0..tN`. Every parameter key has one
/// kind: "n", "m" int; "s" int-set; "x" text; "ts" text-set; request keys
/// "v" int, "w" text; session key "k" int. Update right-hand sides grow at
/// most linearly so long random runs never overflow.
pub fn random_policy_source(rng: &mut ChaCha8Rng) -> String {
    let ntasks = rng.gen_range(2..=4);
    let tasks: Vec<String> = (0..ntasks).map(|i| format!("t{i}")).collect();
    let mut src = String::new();
    for t in &tasks {
        writeln!(src, "task {t}").unwrap();
    }
    writeln!(src, "users {}", USERS.join(" ")).unwrap();
    writeln!(src, "accounts 1 2 3").unwrap();
    writeln!(src, "initial_clearance {}", rng.gen_range(-1..=1)).unwrap();
    for _ in 0..rng.gen_range(0..3) {
        let u = USERS.choose(rng).unwrap();
        let a = ACCOUNTS.choose(rng).unwrap();
        let t = tasks.choose(rng).unwrap();
        writeln!(src, "initial_clearance {u} {a} {t} = {}", rng.gen_range(-2..=3)).unwrap();
    }
    for a in ACCOUNTS {
        for t in &tasks {
            if rng.gen_bool(0.3) {
                continue;
            }
            let n: i64 = rng.gen_range(-3..=5);
            let s: Vec<String> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..4).to_string()).collect();
            let ts: Vec<String> = USERS.iter().filter(|_| rng.gen_bool(0.4)).map(|u| format!("\"{u}\"")).collect();
            writeln!(
                src,
                "init account {a} task {t} {{ \"n\" = {n}, \"s\" = int{{{}}}, \"x\" = \"{}\", \"ts\" = text{{{}}} }}",
                s.join(", "),
                USERS.choose(rng).unwrap(),
                ts.join(", ")
            )
            .unwrap();
        }
    }
    let nactions = rng.gen_range(3..=6);
    for i in 0..nactions {
        let task = tasks.choose(rng).unwrap();
        writeln!(src, "action a{i} task {task} clearance {} {{", rng.gen_range(-1..=2)).unwrap();
        if rng.gen_bool(0.8) {
            writeln!(src, "  constraint {}", bool_expr(rng, &tasks, 3)).unwrap();
        }
        for variant in ["on_authorized", "on_denied"] {
            if rng.gen_bool(0.25) {
                continue;
            }
            writeln!(src, "  {variant} {{").unwrap();
            if rng.gen_bool(0.7) {
                writeln!(src, "    account_update {{").unwrap();
                for _ in 0..rng.gen_range(1..=3) {
                    let t = tasks.choose(rng).unwrap();
                    match rng.gen_range(0..4) {
                        0 => writeln!(src, "      set task {t}[\"n\"] = {}", growth(rng, &tasks)),
                        1 => writeln!(
                            src,
                            "      set task {t}[\"s\"] = insert(task(\"s\", int{{}}), {})",
                            int_atom(rng, &tasks)
                        ),
                        2 => {
                            writeln!(src, "      set task {t}[\"ts\"] = remove(taskof({t}, \"ts\", text{{}}), user())")
                        }
                        _ => writeln!(
                            src,
                            "      set task {t}[\"x\"] = if {} then user() else \"z\"",
                            bool_expr(rng, &tasks, 1)
                        ),
                    }
                    .unwrap();
                }
                writeln!(src, "    }}").unwrap();
            }
            if rng.gen_bool(0.6) {
                writeln!(src, "    clearance_update {{").unwrap();
                for _ in 0..rng.gen_range(1..=2) {
                    let t = tasks.choose(rng).unwrap();
                    writeln!(src, "      set clearance {t} = {}", rng.gen_range(-2..=3)).unwrap();
                }
                writeln!(src, "    }}").unwrap();
            }
            let session = match (i, variant) {
                (0, "on_authorized") => Some("open_session(user(), account())".to_string()),
                (1, "on_authorized") => Some("close_session".to_string()),
                _ if rng.gen_bool(0.4) => Some(format!("set sess[\"k\"] = {}", growth(rng, &tasks))),
                _ => None,
            };
            if let Some(stmt) = session {
                writeln!(src, "    session_update {{ {stmt} }}").unwrap();
            }
            writeln!(src, "  }}").unwrap();
        }
        writeln!(src, "}}").unwrap();
    }
    src
}

fn int_atom(rng: &mut ChaCha8Rng, tasks: &[String]) -> String {
    match rng.gen_range(0..7) {
        0 => rng.gen_range(-3..=5).to_string(),
        1 => "task(\"n\", 0)".into(),
        2 => format!("taskof({}, \"m\", 1)", tasks.choose(rng).unwrap()),
        3 => "req(\"v\", 0)".into(),
        4 => "sess(\"k\", 0)".into(),
        5 => "size(task(\"s\", int{}))".into(),
        _ => format!("clearance({})", tasks.choose(rng).unwrap()),
    }
}

fn growth(rng: &mut ChaCha8Rng, tasks: &[String]) -> String {
    match rng.gen_range(0..3) {
        0 => format!("{} + {}", int_atom(rng, tasks), rng.gen_range(-2..=2)),
        1 => format!("if {} then {} else {}", bool_expr(rng, tasks, 1), int_atom(rng, tasks), rng.gen_range(0..3)),
        _ => format!("task(\"n\", 0) - {}", rng.gen_range(0..3)),
    }
}

fn int_expr(rng: &mut ChaCha8Rng, tasks: &[String], depth: u32) -> String {
    if depth == 0 || rng.gen_bool(0.5) {
        return int_atom(rng, tasks);
    }
    let (a, b) = (int_expr(rng, tasks, depth - 1), int_expr(rng, tasks, depth - 1));
    match rng.gen_range(0..3) {
        0 => format!("({a} + {b})"),
        1 => format!("({a} - {b})"),
        _ => format!("(if {} then {a} else {b})", bool_expr(rng, tasks, depth - 1)),
    }
}

fn bool_expr(rng: &mut ChaCha8Rng, tasks: &[String], depth: u32) -> String {
    let leaf = |rng: &mut ChaCha8Rng| -> String {
        match rng.gen_range(0..6) {
            0 => "true".into(),
            1 => format!("{} < {}", int_expr(rng, tasks, 1), int_expr(rng, tasks, 1)),
            2 => format!("{} == {}", int_atom(rng, tasks), int_atom(rng, tasks)),
            3 => format!("member({}, task(\"s\", int{{}}))", int_atom(rng, tasks)),
            4 => "member(user(), task(\"ts\", text{}))".into(),
            _ => format!("req(\"w\", \"\") == task(\"x\", \"\") ++ \"{}\"", ["", "a"].choose(rng).unwrap()),
        }
    };
    if depth == 0 || rng.gen_bool(0.4) {
        return leaf(rng);
    }
    let (a, b) = (bool_expr(rng, tasks, depth - 1), bool_expr(rng, tasks, depth - 1));
    match rng.gen_range(0..3) {
        0 => format!("({a} and {b})"),
        1 => format!("({a} or {b})"),
        _ => format!("not ({a})"),
    }
}

/// A random request for `policy`: random sender, action and typed params,
/// and either no session, an open session or a dangling one.
pub fn random_request(rng: &mut ChaCha8Rng, policy: &PolicySpec, state: &SystemState) -> RequestMsg {
    let actions: Vec<&str> = policy.actions.keys().map(|a| &**a).collect();
    let action = *actions.choose(rng).unwrap();
    let user = *USERS.choose(rng).unwrap();
    let mut params = ParamSet::new()
        .with("v", ParamValue::Int(rng.gen_range(-3..=5)))
        .with("w", ParamValue::text(*["", "a", "u0", "u1a"].choose(rng).unwrap()));
    let open: Vec<i64> = state.open_sessions.keys().copied().collect();
    match rng.gen_range(0..10) {
        0..=3 => {
            params.insert("usr", ParamValue::text(*USERS.choose(rng).unwrap()));
            params.insert("acc", ParamValue::Int(*ACCOUNTS.choose(rng).unwrap()));
        }
        4 => {
            params.insert("sess", ParamValue::Int(rng.gen_range(50..60)));
        }
        _ => match open.choose(rng) {
            Some(&id) => {
                params.insert("sess", ParamValue::Int(id));
            }
            None => {
                params.insert("usr", ParamValue::text(user));
                params.insert("acc", ParamValue::Int(*ACCOUNTS.choose(rng).unwrap()));
            }
        },
    }
    RequestMsg::new("c", user, action, params)
}

/// Every simple root path ending with an edge into `target`, by forward
/// depth-first search from the root.
pub fn all_simple_paths_to(g: &StateGraph, target: NodeId) -> Vec<Vec<EdgeId>> {
    fn go(
        g: &StateGraph,
        at: NodeId,
        target: NodeId,
        on: &mut BTreeSet<NodeId>,
        path: &mut Vec<EdgeId>,
        out: &mut Vec<Vec<EdgeId>>,
    ) {
        for e in g.out_edges(at) {
            let to = g.edge(e).to;
            if on.contains(&to) {
                continue;
            }
            path.push(e);
            if to == target {
                out.push(path.clone());
            }
            on.insert(to);
            go(g, to, target, on, path, out);
            on.remove(&to);
            path.pop();
        }
    }
    let mut out = Vec::new();
    let mut on = BTreeSet::from([g.root()]);
    go(g, g.root(), target, &mut on, &mut Vec::new(), &mut out);
    out
}

/// Naive reading of a rule: a node is insecure iff some simple root path
/// ending with a trigger edge into it violates the rule, or, for limit
/// rules, the node is entered by an authorized trigger and lies on a cycle,
/// or the largest accumulated value over its paths exceeds the limit.
pub fn naive_insecure_nodes(g: &StateGraph, def: &RuleDef) -> BTreeSet<NodeId> {
    let (action, decision): (&str, Decision) = def.rule.trigger();
    let cyclic: BTreeSet<NodeId> = g.cyclic_sccs().into_iter().flatten().collect();
    let limit = def.rule.limit();
    let mut out = BTreeSet::new();
    for (n, state) in g.states() {
        let triggered = g.in_edges(n).any(|e| {
            let l = g.label(e);
            l.action() == action && l.decision() == decision
        });
        if !triggered {
            continue;
        }
        if limit.is_some() && cyclic.contains(&n) {
            out.insert(n);
            continue;
        }
        let mut best: Option<i64> = None;
        for path in all_simple_paths_to(g, n) {
            let last = g.label(*path.last().unwrap());
            if last.action() != action || last.decision() != decision {
                continue;
            }
            let events: Vec<&ResponseMsg> = path.iter().map(|&e| &g.label(e).response).collect();
            match eval_path(&def.rule, &events, state) {
                PathVerdict::Clean => {}
                PathVerdict::Violated => {
                    out.insert(n);
                }
                PathVerdict::Accumulated(s) => best = Some(best.map_or(s, |b| b.max(s))),
            }
        }
        if let (Some(limit), Some(b)) = (limit, best) {
            if b > limit {
                out.insert(n);
            }
        }
    }
    out
}
