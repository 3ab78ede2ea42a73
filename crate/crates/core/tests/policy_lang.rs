//! Policy language: parsing, diagnostics, printing and evaluation.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wfsec_core::bank::{build_bank_policy, POLICY_SOURCE};
use wfsec_core::model::ValueKind;
use wfsec_core::policy::{
    declared_key_kinds, eval_constraint, eval_update, EvalContext, EvalError, PolicyError, Scope, Slot, Stmt,
};
use wfsec_core::{parse_policy, Clearance, Name, ParamSet, ParamValue, PolicySpec};

fn ctx<'a>(
    policy: &PolicySpec,
    request: &'a ParamSet,
    session: &'a ParamSet,
    task_params: &'a BTreeMap<Name, ParamSet>,
    user: &'a str,
    task: &str,
) -> EvalContext<'a> {
    EvalContext {
        request,
        session,
        task_params: task_params.iter().map(|(k, v)| (k.clone(), v)).collect(),
        clearances: policy.tasks.iter().map(|t| (t.clone(), Clearance(0))).collect(),
        user,
        account: 1,
        task: task.into(),
    }
}

fn bank_params(policy: &PolicySpec) -> BTreeMap<Name, ParamSet> {
    policy
        .tasks
        .iter()
        .map(|t| (t.clone(), policy.initial_account_params.get(&(1, t.clone())).cloned().unwrap_or_default()))
        .collect()
}

#[test]
fn bank_policy_shape() {
    let p = build_bank_policy();
    assert_eq!(p.actions.len(), 7);
    assert_eq!(p.tasks.len(), 4);
    assert!(p.action("logout").unwrap().constraint.is_none());
}

#[test]
fn unknown_task_in_clearance_update_is_rejected() {
    let src = "task a\nusers u\naccounts 1\naction x task a clearance 0 {\n  on_authorized { clearance_update { set clearance nowhere = 1 } }\n}\n";
    match parse_policy(src) {
        Err(PolicyError::Unknown { what, name, pos }) => {
            assert_eq!((what, name.as_str()), ("task", "nowhere"));
            assert_eq!(pos.line, 5);
        }
        other => panic!("expected unknown task, got {other:?}"),
    }
}

#[test]
fn diagnostics_carry_positions() {
    let type_err =
        "task a\nusers u\naccounts 1\naction x task a clearance 0 {\n  constraint task(\"n\", 0) == int{}\n}\n";
    let e = parse_policy(type_err).unwrap_err();
    assert!(matches!(e, PolicyError::Type { .. }), "{e}");
    assert_eq!(e.pos().line, 5);

    let dup = "task a\nusers u\naccounts 1\naction x task a clearance 0 { }\naction x task a clearance 0 { }\n";
    assert!(matches!(parse_policy(dup), Err(PolicyError::Duplicate { what: "action", .. })));

    let syntax = "task a\naction x task a clearance { }\n";
    let e = parse_policy(syntax).unwrap_err();
    assert!(matches!(e, PolicyError::Syntax { .. }), "{e}");
    assert_eq!(e.pos().line, 2);

    let undeclared = "task a\nusers u\naccounts 1\naction x task b clearance 0 { }\n";
    assert!(matches!(parse_policy(undeclared), Err(PolicyError::Unknown { what: "task", .. })));
}

#[test]
fn bank_prints_and_reparses() {
    let p = build_bank_policy();
    let printed = p.to_string();
    assert_eq!(parse_policy(&printed).unwrap(), p);
    assert_eq!(parse_policy(POLICY_SOURCE).unwrap(), p);
}

#[test]
fn constant_true_constraint() {
    let p = build_bank_policy();
    let params = bank_params(&p);
    let (req, sess) = (ParamSet::new(), ParamSet::new());
    let c = ctx(&p, &req, &sess, &params, "master", "balance");
    assert_eq!(eval_constraint(p.action("balance").unwrap().constraint.as_ref().unwrap(), &c), Ok(true));
}

#[test]
fn transf_auth_without_pending_tid_is_refused() {
    let p = build_bank_policy();
    let params = bank_params(&p);
    let req = ParamSet::new().with("tid", ParamValue::Int(-1)).with("pass", ParamValue::text("m1eft"));
    let sess = ParamSet::new();
    let c = ctx(&p, &req, &sess, &params, "master", "eft");
    assert_eq!(eval_constraint(p.action("transf_auth").unwrap().constraint.as_ref().unwrap(), &c), Ok(false));
}

#[test]
fn transf_auth_registered_limit() {
    let p = build_bank_policy();
    let mut params = bank_params(&p);
    let eft = params.get_mut("eft").unwrap();
    eft.insert("pending", ParamValue::int_set([4]));
    eft.insert("dest_4", ParamValue::Int(2));
    eft.insert("usedReg", ParamValue::Int(130000));
    let req = ParamSet::new().with("tid", ParamValue::Int(4)).with("pass", ParamValue::text("m1eft"));
    let sess = ParamSet::new();
    let constraint = p.action("transf_auth").unwrap().constraint.clone().unwrap();

    let mut over = params.clone();
    over.get_mut("eft").unwrap().insert("val_4", ParamValue::Int(30000));
    assert_eq!(eval_constraint(&constraint, &ctx(&p, &req, &sess, &over, "master", "eft")), Ok(false));

    let mut exact = params.clone();
    exact.get_mut("eft").unwrap().insert("val_4", ParamValue::Int(20000));
    assert_eq!(eval_constraint(&constraint, &ctx(&p, &req, &sess, &exact, "master", "eft")), Ok(true));
}

#[test]
fn idtf_lowers_other_clearances() {
    let p = build_bank_policy();
    let params = bank_params(&p);
    let req = ParamSet::new().with("usr", ParamValue::text("master")).with("acc", ParamValue::Int(1));
    let sess = ParamSet::new();
    let c = ctx(&p, &req, &sess, &params, "master", "login");
    let block = p.action("idtf").unwrap().on_authorized.slot(Slot::Clearance).unwrap();
    let d = eval_update(block, &c).unwrap();
    for t in ["balance", "eft", "logout"] {
        assert!(d.clearance_writes[t] < Clearance(0), "{t}");
    }
    assert!(!d.clearance_writes.contains_key("login"));
    assert!(d.task_writes.is_empty());
}

#[test]
fn failed_auth_increments_failcount() {
    let p = build_bank_policy();
    let mut params = bank_params(&p);
    params.get_mut("login").unwrap().insert("failcount_master", ParamValue::Int(1));
    let (req, sess) = (ParamSet::new(), ParamSet::new());
    let c = ctx(&p, &req, &sess, &params, "master", "login");
    let block = p.action("auth").unwrap().on_denied.slot(Slot::Account).unwrap();
    let d = eval_update(block, &c).unwrap();
    assert_eq!(d.task_writes["login"].get("failcount_master"), Some(&ParamValue::Int(2)));
}

#[test]
fn empty_block_is_identity() {
    let p = parse_policy(
        "task a\nusers u\naccounts 1\naction x task a clearance 0 { on_authorized { account_update { } } }\n",
    )
    .unwrap();
    let params = bank_params(&p);
    let (req, sess) = (ParamSet::new(), ParamSet::new());
    let block = p.action("x").unwrap().on_authorized.slot(Slot::Account).unwrap();
    assert!(eval_update(block, &ctx(&p, &req, &sess, &params, "u", "a")).unwrap().is_empty());
}

#[test]
fn update_statements_name_no_account_or_user() {
    // Locality is structural: no statement form carries an account or user
    // target, so every write lands on the requesting account or pair.
    let p = build_bank_policy();
    for a in p.actions.values() {
        for variant in [&a.on_authorized, &a.on_denied] {
            for (_, block) in variant.blocks() {
                for stmt in &block.stmts {
                    match stmt {
                        Stmt::SetTask { task, .. } => assert!(p.tasks.contains(task)),
                        Stmt::SetClearance { task, .. } => assert!(p.tasks.contains(task)),
                        Stmt::Let(..) | Stmt::SetSess { .. } | Stmt::OpenSession { .. } | Stmt::CloseSession => {}
                    }
                }
            }
        }
    }
}

fn random_value(rng: &mut ChaCha8Rng, kind: ValueKind) -> ParamValue {
    let texts = ["", "a", "u0", "u1", "z"];
    match kind {
        ValueKind::Int => ParamValue::Int(rng.gen_range(-50..50)),
        ValueKind::Text => ParamValue::text(texts[rng.gen_range(0..texts.len())]),
        ValueKind::IntSet => ParamValue::int_set((0..rng.gen_range(0..4)).map(|_| rng.gen_range(-3..6))),
        ValueKind::TextSet => {
            ParamValue::text_set((0..rng.gen_range(0..3)).map(|_| texts[rng.gen_range(0..texts.len())]))
        }
    }
}

fn is_type_error(e: &EvalError) -> bool {
    matches!(e, EvalError::IllTyped(_) | EvalError::Param(_))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_policies_print_and_reparse(seed in any::<u64>()) {
        let src = common::random_policy_source(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = parse_policy(&src).map_err(|e| TestCaseError::fail(format!("{e}\n{src}")))?;
        let again = parse_policy(&p.to_string()).map_err(|e| TestCaseError::fail(format!("{e}\n{p}")))?;
        prop_assert_eq!(again, p);
    }

    #[test]
    fn well_typed_policies_never_fail_at_run_time(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = parse_policy(&common::random_policy_source(&mut rng)).unwrap();
        let kinds = declared_key_kinds(&p);
        for _ in 0..20 {
            let mut req = ParamSet::new();
            let mut sess = ParamSet::new();
            let mut params: BTreeMap<Name, ParamSet> = p.tasks.iter().map(|t| (t.clone(), ParamSet::new())).collect();
            for ((scope, key), kind) in &kinds {
                if rng.gen_bool(0.3) {
                    continue;
                }
                let v = random_value(&mut rng, *kind);
                match scope {
                    Scope::Req => { req.insert(key.clone(), v); }
                    Scope::Sess => { sess.insert(key.clone(), v); }
                    Scope::TaskOf(t) => { params.get_mut(t).unwrap().insert(key.clone(), v); }
                    Scope::Task => unreachable!("kinds are keyed by named task"),
                }
            }
            let user = common::USERS[rng.gen_range(0..common::USERS.len())];
            for a in p.actions.values() {
                let c = ctx(&p, &req, &sess, &params, user, &a.task);
                if let Some(e) = &a.constraint {
                    let first = eval_constraint(e, &c);
                    prop_assert!(!first.as_ref().is_err_and(is_type_error), "{:?} in {}", first, a.action);
                    prop_assert_eq!(&first, &eval_constraint(e, &c));
                }
                for variant in [&a.on_authorized, &a.on_denied] {
                    for (_, block) in variant.blocks() {
                        let d = eval_update(block, &c);
                        prop_assert!(!d.as_ref().is_err_and(is_type_error), "{:?} in {}", d, a.action);
                    }
                }
            }
        }
    }
}
