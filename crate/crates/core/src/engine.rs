//! Processing of a single request: session resolution, the two-stage
//! authorization (clearance floor, then the action constraint) and the
//! authorized- or denied-variant updates.
//!
//! All three update slots are evaluated against the pre-request state and
//! their deltas are merged into one successor, mirroring a single transition
//! firing.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::model::{
    AccountId, Binding, Decision, Name, ParamSet, ParamValue, RequestMsg, ResponseMsg, SessionRec, SystemState,
};
use crate::policy::{
    eval_constraint, exec_stmt, ActionSpec, EvalContext, EvalError, PolicySpec, SessionLifecycle, Slot, StateDelta,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("request names undeclared action `{0}`")]
    UnknownAction(String),
    #[error("policy error in action `{action}` at {site}: {source}")]
    Policy {
        action: String,
        site: String,
        #[source]
        source: EvalError,
    },
    #[error("action `{action}` opened a session for undeclared {what} `{name}`")]
    UndeclaredSessionOwner { action: String, what: &'static str, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionResolution {
    Existing(SessionRec),
    New,
    Invalid,
}

/// `sess` absent → new; present and open → existing; otherwise invalid.
pub fn resolve_session(state: &SystemState, r: &RequestMsg) -> SessionResolution {
    if !r.params.contains_key("sess") {
        return SessionResolution::New;
    }
    match r.session_ref().and_then(|id| state.open_sessions.get(&id)) {
        Some(rec) => SessionResolution::Existing(rec.clone()),
        None => SessionResolution::Invalid,
    }
}

/// The (user, account) a request runs as, plus its open session if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionBinding {
    pub user: Name,
    pub account: AccountId,
    pub session: Option<SessionRec>,
}

impl SessionBinding {
    pub fn binding(&self) -> Binding {
        Binding { user: self.user.clone(), account: self.account }
    }
}

/// Existing sessions bind their owner. A new-session request for an action
/// that opens sessions binds the declared user named by its `usr` parameter
/// (falling back to the sender) and the declared account named by `acc`.
/// Anything else is unbound.
pub fn bind(
    policy: &PolicySpec,
    action: &ActionSpec,
    r: &RequestMsg,
    resolution: &SessionResolution,
) -> Option<SessionBinding> {
    match resolution {
        SessionResolution::Invalid => None,
        SessionResolution::Existing(rec) => {
            Some(SessionBinding { user: rec.user.clone(), account: rec.account, session: Some(rec.clone()) })
        }
        SessionResolution::New => {
            if !action.opens_session() {
                return None;
            }
            let user = match r.params.get("usr") {
                Some(ParamValue::Text(u)) => policy.users.get(u.as_str())?.clone(),
                Some(_) => return None,
                None => policy.users.get(&*r.user)?.clone(),
            };
            let account = r.params.get("acc")?.as_int().filter(|a| policy.accounts.contains(a))?;
            Some(SessionBinding { user, account, session: None })
        }
    }
}

/// Clearance predicate: the bound pair's clearance for the action's task is
/// at least the action's floor.
pub fn check_clearance(policy: &PolicySpec, state: &SystemState, action: &ActionSpec, b: &SessionBinding) -> bool {
    let have = state
        .clearance(&b.user, b.account, &action.task)
        .unwrap_or_else(|| policy.initial_clearance(&b.user, b.account, &action.task));
    have >= action.required_clearance
}

fn context<'a>(
    policy: &'a PolicySpec,
    state: &'a SystemState,
    r: &'a RequestMsg,
    action: &ActionSpec,
    b: &'a SessionBinding,
) -> EvalContext<'a> {
    static EMPTY: std::sync::OnceLock<ParamSet> = std::sync::OnceLock::new();
    let session = b.session.as_ref().map_or_else(|| EMPTY.get_or_init(ParamSet::new), |s| &s.params);
    let task_params = policy.tasks.iter().map(|t| (t.clone(), state.task_params(b.account, t))).collect();
    let clearances = policy
        .tasks
        .iter()
        .map(|t| {
            let c = state
                .clearance(&b.user, b.account, t)
                .unwrap_or_else(|| policy.initial_clearance(&b.user, b.account, t));
            (t.clone(), c)
        })
        .collect();
    EvalContext {
        request: &r.params,
        session,
        task_params,
        clearances,
        user: &b.user,
        account: b.account,
        task: action.task.clone(),
    }
}

/// Full authorization predicate: clearance check conjoined with the
/// constraint. The constraint is not evaluated when the clearance check fails.
pub fn authorize(
    policy: &PolicySpec,
    state: &SystemState,
    r: &RequestMsg,
    b: &SessionBinding,
) -> Result<Decision, EngineError> {
    let action = policy.action(&r.action).ok_or_else(|| EngineError::UnknownAction(r.action.to_string()))?;
    if !check_clearance(policy, state, action, b) {
        return Ok(Decision::Denied);
    }
    let Some(constraint) = &action.constraint else {
        return Ok(Decision::Authorized);
    };
    let ctx = context(policy, state, r, action, b);
    let ok = eval_constraint(constraint, &ctx).map_err(|source| EngineError::Policy {
        action: action.action.to_string(),
        site: "constraint".into(),
        source,
    })?;
    Ok(if ok { Decision::Authorized } else { Decision::Denied })
}

fn updates(action: &ActionSpec, authorized: bool, ctx: &EvalContext<'_>) -> Result<StateDelta, EngineError> {
    let variant_name = if authorized { "on_authorized" } else { "on_denied" };
    let mut total = StateDelta::default();
    for (slot, block) in action.variant(authorized).blocks() {
        let mut env = Vec::new();
        let mut delta = StateDelta::default();
        for (i, stmt) in block.stmts.iter().enumerate() {
            exec_stmt(stmt, ctx, &mut env, &mut delta).map_err(|source| EngineError::Policy {
                action: action.action.to_string(),
                site: format!("{variant_name}.{} statement {} (`{stmt}`)", slot_name(slot), i + 1),
                source,
            })?;
        }
        total.merge(delta);
    }
    Ok(total)
}

fn slot_name(slot: Slot) -> &'static str {
    slot.keyword()
}

/// Processes `r` against `state`. Client queues are left untouched; the
/// caller owns delivery bookkeeping.
pub fn step(
    policy: &PolicySpec,
    state: &SystemState,
    r: &RequestMsg,
) -> Result<(SystemState, ResponseMsg), EngineError> {
    step_with(policy, state, r, None)
}

/// Like [`step`] but with the decision forced to the given variant, skipping
/// authorization. Used to probe both update variants of an action.
pub fn step_forced(
    policy: &PolicySpec,
    state: &SystemState,
    r: &RequestMsg,
    authorized: bool,
) -> Result<(SystemState, ResponseMsg), EngineError> {
    step_with(policy, state, r, Some(authorized))
}

fn step_with(
    policy: &PolicySpec,
    state: &SystemState,
    r: &RequestMsg,
    force: Option<bool>,
) -> Result<(SystemState, ResponseMsg), EngineError> {
    let action = policy.action(&r.action).ok_or_else(|| EngineError::UnknownAction(r.action.to_string()))?;
    let resolution = resolve_session(state, r);
    if resolution == SessionResolution::Invalid {
        let resp = ResponseMsg {
            request: r.clone(),
            decision: Decision::InvalidSession,
            payload: ParamSet::new(),
            binding: None,
        };
        return Ok((state.clone(), resp));
    }
    let Some(b) = bind(policy, action, r, &resolution) else {
        let resp =
            ResponseMsg { request: r.clone(), decision: Decision::Denied, payload: ParamSet::new(), binding: None };
        return Ok((state.clone(), resp));
    };

    let decision = match force {
        None => authorize(policy, state, r, &b)?,
        Some(true) => Decision::Authorized,
        Some(false) => Decision::Denied,
    };
    let authorized = decision == Decision::Authorized;
    let delta = {
        let ctx = context(policy, state, r, action, &b);
        updates(action, authorized, &ctx)?
    };

    let mut next = state.clone();
    apply_delta(policy, &mut next, action, &b, delta)?;

    let bound_id = b.session.as_ref().map(|s| s.id).or_else(|| {
        // A new session, if one was opened, took the pre-state counter value.
        Some(state.next_session_id)
            .filter(|id| next.open_sessions.contains_key(id) && !state.open_sessions.contains_key(id))
    });
    let mut payload = ParamSet::new();
    if let Some(rec) = bound_id.and_then(|id| next.open_sessions.get(&id)) {
        payload = rec.params.clone();
        payload.insert("sess", ParamValue::Int(rec.id));
    }
    let resp = ResponseMsg { request: r.clone(), decision, payload, binding: Some(b.binding()) };
    Ok((next, resp))
}

/// Writes a delta into `state` for the bound (user, account). Only the bound
/// account's task parameters and the bound pair's clearances are touched.
fn apply_delta(
    policy: &PolicySpec,
    state: &mut SystemState,
    action: &ActionSpec,
    b: &SessionBinding,
    delta: StateDelta,
) -> Result<(), EngineError> {
    for (task, writes) in delta.task_writes {
        if writes.is_empty() {
            continue;
        }
        let entry = state.account_task_params.entry((b.account, task)).or_insert_with(|| Arc::new(ParamSet::new()));
        Arc::make_mut(entry).merge_in_place(&writes);
    }
    for (task, cl) in delta.clearance_writes {
        state.clearances.insert((b.user.clone(), b.account, task), cl);
    }
    let existing = b.session.as_ref().map(|s| s.id);
    match delta.session.lifecycle {
        Some(SessionLifecycle::Open { user, account }) => {
            let user: Name = match policy.users.get(user.as_str()) {
                Some(u) => u.clone(),
                None => {
                    return Err(EngineError::UndeclaredSessionOwner {
                        action: action.action.to_string(),
                        what: "user",
                        name: user,
                    })
                }
            };
            if !policy.accounts.contains(&account) {
                return Err(EngineError::UndeclaredSessionOwner {
                    action: action.action.to_string(),
                    what: "account",
                    name: account.to_string(),
                });
            }
            let id = existing.unwrap_or(state.next_session_id);
            state.open_sessions.insert(id, SessionRec { id, user, account, params: delta.session.writes });
        }
        Some(SessionLifecycle::Close) => {
            if let Some(id) = existing {
                state.open_sessions.remove(&id);
            }
        }
        None => {
            if let Some(rec) = existing.and_then(|id| state.open_sessions.get_mut(&id)) {
                rec.params.merge_in_place(&delta.session.writes);
            }
        }
    }
    state.renumber_session_counter();
    Ok(())
}

/// Builds the initial state of `policy`: initial account parameters, every
/// (user, account, task) clearance, and no sessions or clients.
pub fn initial_state(policy: &PolicySpec) -> SystemState {
    let mut s = SystemState { next_session_id: 1, ..Default::default() };
    for ((acc, task), params) in &policy.initial_account_params {
        s.account_task_params.insert((*acc, task.clone()), Arc::new(params.clone()));
    }
    for u in &policy.users {
        for a in &policy.accounts {
            for t in &policy.tasks {
                s.clearances.insert((u.clone(), *a, t.clone()), policy.initial_clearance(u, *a, t));
            }
        }
    }
    s
}

/// Folds [`step`] over `rs`, returning every response in order.
pub fn run_sequence(
    policy: &PolicySpec,
    initial: &SystemState,
    rs: &[RequestMsg],
) -> Result<Vec<ResponseMsg>, EngineError> {
    let mut state = initial.clone();
    let mut out = Vec::with_capacity(rs.len());
    for r in rs {
        let (next, resp) = step(policy, &state, r)?;
        state = next;
        out.push(resp);
    }
    Ok(out)
}

/// Convenience wrapper holding the policy.
#[derive(Debug, Clone, Copy)]
pub struct Engine<'p> {
    pub policy: &'p PolicySpec,
}

impl<'p> Engine<'p> {
    pub fn new(policy: &'p PolicySpec) -> Self {
        Engine { policy }
    }

    pub fn initial_state(&self) -> SystemState {
        initial_state(self.policy)
    }

    pub fn step(&self, state: &SystemState, r: &RequestMsg) -> Result<(SystemState, ResponseMsg), EngineError> {
        step(self.policy, state, r)
    }

    pub fn run_sequence(&self, initial: &SystemState, rs: &[RequestMsg]) -> Result<Vec<ResponseMsg>, EngineError> {
        run_sequence(self.policy, initial, rs)
    }
}

/// Per-task decision coverage helper: which decision each action produced.
pub fn decision_histogram(responses: &[ResponseMsg]) -> BTreeMap<(Name, Decision), usize> {
    let mut out = BTreeMap::new();
    for r in responses {
        *out.entry((r.request.action.clone(), r.decision)).or_insert(0) += 1;
    }
    out
}
