//! The online-banking example: policy, rules, reference workloads and a
//! catalog of policy mutations that each break one rule.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::Clearance;
use crate::policy::{parse_policy, PolicySpec};
use crate::rules::{parse_rules, RuleDef};
use crate::workload::{parse_workload, Workload};

pub const POLICY_SOURCE: &str = include_str!("../fixtures/bank.policy");
pub const RULES_SOURCE: &str = include_str!("../fixtures/bank.rules");
pub const EXPECTED_REPORT: &str = include_str!("../fixtures/expected.report");

/// Reference workloads as (file stem, source), base case first.
pub const TABLE2_SOURCES: &[(&str, &str)] = &[
    ("base", include_str!("../fixtures/table2/base.workload")),
    ("wrong_login", include_str!("../fixtures/table2/wrong_login.workload")),
    ("wrong_eft", include_str!("../fixtures/table2/wrong_eft.workload")),
    ("helper", include_str!("../fixtures/table2/helper.workload")),
    ("eft_500", include_str!("../fixtures/table2/eft_500.workload")),
    ("other_tid", include_str!("../fixtures/table2/other_tid.workload")),
    ("combined", include_str!("../fixtures/table2/combined.workload")),
    ("misc", include_str!("../fixtures/table2/misc.workload")),
    ("helper_same_account", include_str!("../fixtures/table2/helper_same_account.workload")),
    ("master_other_account", include_str!("../fixtures/table2/master_other_account.workload")),
];

/// Workloads exposing the mutations, keyed by file stem.
pub const MUTANT_SOURCES: &[(&str, &str)] = &[
    ("limit_6", include_str!("../fixtures/mutants/limit_6.workload")),
    ("limit_7", include_str!("../fixtures/mutants/limit_7.workload")),
    ("three_strikes", include_str!("../fixtures/mutants/three_strikes.workload")),
    ("login_guard", include_str!("../fixtures/mutants/login_guard.workload")),
    ("helper_auth", include_str!("../fixtures/mutants/helper_auth.workload")),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BankError {
    #[error("unknown mutation `{0}`")]
    UnknownMutation(String),
    #[error("mutation `{id}` found nothing to change")]
    NoEffect { id: String },
}

/// A policy mutation, the rule it is meant to break and the workload that
/// exposes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mutation {
    pub id: &'static str,
    pub target_rule: &'static str,
    pub workload: &'static str,
    pub description: &'static str,
}

pub const MUTATIONS: &[Mutation] = &[
    Mutation {
        id: "drop-limit-6",
        target_rule: "r6",
        workload: "limit_6",
        description: "transf_auth no longer checks the unregistered-destination limit",
    },
    Mutation {
        id: "drop-limit-7",
        target_rule: "r7",
        workload: "limit_7",
        description: "transf_auth no longer checks the registered-destination limit",
    },
    Mutation {
        id: "drop-three-strikes",
        target_rule: "r2",
        workload: "three_strikes",
        description: "a failed auth no longer counts towards the lockout",
    },
    Mutation {
        id: "drop-login-guard",
        target_rule: "r1",
        workload: "login_guard",
        description: "auth no longer refuses a user who is already logged in",
    },
    Mutation {
        id: "allow-helper-auth",
        target_rule: "r5",
        workload: "helper_auth",
        description: "transf_auth requires only the clearance the helper holds",
    },
];

pub fn mutation(id: &str) -> Result<&'static Mutation, BankError> {
    MUTATIONS.iter().find(|m| m.id == id).ok_or_else(|| BankError::UnknownMutation(id.to_string()))
}

pub fn build_bank_policy() -> PolicySpec {
    parse_policy(POLICY_SOURCE).expect("bank.policy parses")
}

pub fn bank_rules() -> Vec<RuleDef> {
    parse_rules(RULES_SOURCE).expect("bank.rules parses")
}

/// Reference workloads in table order, keyed by file stem.
pub fn table2_workloads() -> Vec<(&'static str, Workload)> {
    TABLE2_SOURCES.iter().map(|(name, src)| (*name, parse_workload(name, src).expect("workload parses"))).collect()
}

pub fn table2_workload(name: &str) -> Option<Workload> {
    TABLE2_SOURCES.iter().find(|(n, _)| *n == name).map(|(n, src)| parse_workload(n, src).expect("workload parses"))
}

/// The workload exposing mutation `id`.
pub fn mutant_workload(id: &str) -> Result<Workload, BankError> {
    let m = mutation(id)?;
    let (name, src) = MUTANT_SOURCES.iter().find(|(n, _)| *n == m.workload).expect("mutant workload shipped");
    Ok(parse_workload(name, src).expect("workload parses"))
}

/// Returns `spec` with mutation `id` applied.
pub fn mutate_policy(spec: &PolicySpec, id: &str) -> Result<PolicySpec, BankError> {
    mutation(id)?;
    let mut out = spec.clone();
    let no_effect = || BankError::NoEffect { id: id.to_string() };
    let drop_conjunct = |out: &mut PolicySpec, action: &str, key: &str| -> Result<(), BankError> {
        let a = out.actions.get_mut(action).ok_or_else(no_effect)?;
        let c = a.constraint.as_ref().ok_or_else(no_effect)?;
        let pruned = c.without_conjuncts(&|e| e.reads_key(key));
        if &pruned == c {
            return Err(no_effect());
        }
        a.constraint = Some(pruned);
        Ok(())
    };
    match id {
        "drop-limit-6" => drop_conjunct(&mut out, "transf_auth", "avLimit")?,
        "drop-limit-7" => drop_conjunct(&mut out, "transf_auth", "avLimitReg")?,
        "drop-login-guard" => drop_conjunct(&mut out, "auth", "logged")?,
        "drop-three-strikes" => {
            let a = out.actions.get_mut("auth").ok_or_else(no_effect)?;
            a.on_denied.account_update.take().ok_or_else(no_effect)?;
        }
        "allow-helper-auth" => {
            let a = out.actions.get_mut("transf_auth").ok_or_else(no_effect)?;
            a.required_clearance = Clearance(1);
        }
        _ => unreachable!("catalog checked above"),
    }
    Ok(out)
}

/// Expected rule verdicts: `(policy, workload, rule) -> violated`, where the
/// policy is `bank` or a mutation id.
pub fn expected_verdicts() -> BTreeMap<(String, String, String), bool> {
    let mut out = BTreeMap::new();
    for line in EXPECTED_REPORT.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [policy, workload, rule, verdict] = f.as_slice() else {
            panic!("malformed expected.report line: {line}");
        };
        let violated = match *verdict {
            "clean" => false,
            "violated" => true,
            other => panic!("unknown verdict {other} in expected.report"),
        };
        out.insert((policy.to_string(), workload.to_string(), rule.to_string()), violated);
    }
    out
}
