//! Evaluation of constraint expressions and update blocks.
//!
//! Every read sees the pre-request snapshot carried by [`EvalContext`]; the
//! writes of an update block are collected into a [`StateDelta`] and never
//! observed by the block itself.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::*;
use crate::model::{AccountId, Clearance, Name, ParamSet, ParamValue, TypeMismatch};

/// Read-only inputs of one policy function call.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub request: &'a ParamSet,
    pub session: &'a ParamSet,
    /// Parameters of every task for the requesting account.
    pub task_params: BTreeMap<Name, &'a ParamSet>,
    /// Clearances of every task for the requesting (user, account).
    pub clearances: BTreeMap<Name, Clearance>,
    pub user: &'a str,
    pub account: AccountId,
    /// Task of the action being processed.
    pub task: Name,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Param(#[from] TypeMismatch),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
    #[error("ill-typed expression: {0}")]
    IllTyped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Val {
    Bool(bool),
    Value(ParamValue),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionLifecycle {
    Open { user: String, account: AccountId },
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SessionDelta {
    /// Last open/close statement executed, if any.
    pub lifecycle: Option<SessionLifecycle>,
    pub writes: ParamSet,
}

/// Writes produced by update blocks, all relative to the requesting
/// account and (user, account) pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateDelta {
    pub task_writes: BTreeMap<Name, ParamSet>,
    pub clearance_writes: BTreeMap<Name, Clearance>,
    pub session: SessionDelta,
}

impl StateDelta {
    pub fn is_empty(&self) -> bool {
        self.task_writes.values().all(ParamSet::is_empty)
            && self.clearance_writes.is_empty()
            && self.session.lifecycle.is_none()
            && self.session.writes.is_empty()
    }

    /// Later writes win.
    pub fn merge(&mut self, other: StateDelta) {
        for (task, writes) in other.task_writes {
            self.task_writes.entry(task).or_default().merge_in_place(&writes);
        }
        self.clearance_writes.extend(other.clearance_writes);
        if other.session.lifecycle.is_some() {
            self.session.lifecycle = other.session.lifecycle;
        }
        self.session.writes.merge_in_place(&other.session.writes);
    }
}

pub fn eval_constraint(e: &Expr, ctx: &EvalContext<'_>) -> Result<bool, EvalError> {
    match eval_expr(e, ctx, &mut Vec::new())? {
        Val::Bool(b) => Ok(b),
        other => Err(EvalError::IllTyped(format!("constraint produced {other:?}"))),
    }
}

pub fn eval_update(block: &UpdateBlock, ctx: &EvalContext<'_>) -> Result<StateDelta, EvalError> {
    let mut delta = StateDelta::default();
    let mut env: Vec<(String, Val)> = Vec::new();
    for stmt in &block.stmts {
        exec_stmt(stmt, ctx, &mut env, &mut delta)?;
    }
    Ok(delta)
}

/// Executes one statement; exposed so diagnostics can name the failing one.
pub(crate) fn exec_stmt(
    stmt: &Stmt,
    ctx: &EvalContext<'_>,
    env: &mut Vec<(String, Val)>,
    delta: &mut StateDelta,
) -> Result<(), EvalError> {
    match stmt {
        Stmt::Let(name, e) => {
            let v = eval_expr(e, ctx, env)?;
            env.push((name.clone(), v));
        }
        Stmt::SetTask { task, key, value } => {
            let key = text(eval_expr(key, ctx, env)?)?;
            let value = value_of(eval_expr(value, ctx, env)?)?;
            delta.task_writes.entry(task.clone()).or_default().insert(key, value);
        }
        Stmt::SetClearance { task, value } => {
            let v = int(eval_expr(value, ctx, env)?)?;
            delta.clearance_writes.insert(task.clone(), Clearance(v));
        }
        Stmt::OpenSession { user, account } => {
            let user = text(eval_expr(user, ctx, env)?)?;
            let account = int(eval_expr(account, ctx, env)?)?;
            delta.session.lifecycle = Some(SessionLifecycle::Open { user, account });
        }
        Stmt::CloseSession => delta.session.lifecycle = Some(SessionLifecycle::Close),
        Stmt::SetSess { key, value } => {
            let key = text(eval_expr(key, ctx, env)?)?;
            let value = value_of(eval_expr(value, ctx, env)?)?;
            delta.session.writes.insert(key, value);
        }
    }
    Ok(())
}

fn value_of(v: Val) -> Result<ParamValue, EvalError> {
    match v {
        Val::Value(p) => Ok(p),
        Val::Bool(_) => Err(EvalError::IllTyped("expected a value, found bool".into())),
    }
}

fn int(v: Val) -> Result<i64, EvalError> {
    match v {
        Val::Value(ParamValue::Int(i)) => Ok(i),
        other => Err(EvalError::IllTyped(format!("expected int, found {other:?}"))),
    }
}

fn text(v: Val) -> Result<String, EvalError> {
    match v {
        Val::Value(ParamValue::Text(s)) => Ok(s),
        other => Err(EvalError::IllTyped(format!("expected text, found {other:?}"))),
    }
}

fn boolean(v: Val) -> Result<bool, EvalError> {
    match v {
        Val::Bool(b) => Ok(b),
        other => Err(EvalError::IllTyped(format!("expected bool, found {other:?}"))),
    }
}

static EMPTY: std::sync::OnceLock<ParamSet> = std::sync::OnceLock::new();

fn scope_params<'a>(scope: &Scope, ctx: &'a EvalContext<'_>) -> &'a ParamSet {
    let empty = || EMPTY.get_or_init(ParamSet::new);
    match scope {
        Scope::Req => ctx.request,
        Scope::Sess => ctx.session,
        Scope::Task => ctx.task_params.get(&ctx.task).copied().unwrap_or_else(empty),
        Scope::TaskOf(t) => ctx.task_params.get(t).copied().unwrap_or_else(empty),
    }
}

fn eval_expr(e: &Expr, ctx: &EvalContext<'_>, env: &mut Vec<(String, Val)>) -> Result<Val, EvalError> {
    Ok(match e {
        Expr::Lit(v) => Val::Value(v.clone()),
        Expr::Bool(b) => Val::Bool(*b),
        Expr::User => Val::Value(ParamValue::text(ctx.user)),
        Expr::Account => Val::Value(ParamValue::Int(ctx.account)),
        Expr::Clearance(task) => Val::Value(ParamValue::Int(ctx.clearances.get(task).map_or(0, |c| c.0))),
        Expr::Var(name) => env
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| EvalError::IllTyped(format!("unbound variable `{name}`")))?,
        Expr::Param { scope, key, default } => {
            let key = text(eval_expr(key, ctx, env)?)?;
            let default = value_of(eval_expr(default, ctx, env)?)?;
            Val::Value(scope_params(scope, ctx).get_or(&key, &default)?)
        }
        Expr::Unary(UnOp::Neg, a) => {
            let v = int(eval_expr(a, ctx, env)?)?;
            Val::Value(ParamValue::Int(v.checked_neg().ok_or(EvalError::Overflow)?))
        }
        Expr::Unary(UnOp::Not, a) => Val::Bool(!boolean(eval_expr(a, ctx, env)?)?),
        Expr::Binary(BinOp::And, a, b) => {
            Val::Bool(boolean(eval_expr(a, ctx, env)?)? && boolean(eval_expr(b, ctx, env)?)?)
        }
        Expr::Binary(BinOp::Or, a, b) => {
            Val::Bool(boolean(eval_expr(a, ctx, env)?)? || boolean(eval_expr(b, ctx, env)?)?)
        }
        Expr::Binary(op, a, b) => {
            let va = eval_expr(a, ctx, env)?;
            let vb = eval_expr(b, ctx, env)?;
            binary(*op, va, vb)?
        }
        Expr::Call(func, args) => {
            let vals = args.iter().map(|a| eval_expr(a, ctx, env)).collect::<Result<Vec<_>, _>>()?;
            call(*func, vals)?
        }
        Expr::If(c, t, f) => {
            if boolean(eval_expr(c, ctx, env)?)? {
                eval_expr(t, ctx, env)?
            } else {
                eval_expr(f, ctx, env)?
            }
        }
        Expr::Let(name, value, body) => {
            let v = eval_expr(value, ctx, env)?;
            env.push((name.clone(), v));
            let out = eval_expr(body, ctx, env);
            env.pop();
            out?
        }
    })
}

fn binary(op: BinOp, a: Val, b: Val) -> Result<Val, EvalError> {
    use ParamValue::*;
    let arith = |f: fn(i64, i64) -> Option<i64>, a: Val, b: Val| -> Result<Val, EvalError> {
        Ok(Val::Value(Int(f(int(a)?, int(b)?).ok_or(EvalError::Overflow)?)))
    };
    match op {
        BinOp::Add => arith(i64::checked_add, a, b),
        BinOp::Sub => arith(i64::checked_sub, a, b),
        BinOp::Mul => arith(i64::checked_mul, a, b),
        BinOp::Div => {
            let (x, y) = (int(a)?, int(b)?);
            if y == 0 {
                return Err(EvalError::DivisionByZero);
            }
            Ok(Val::Value(Int(x.checked_div(y).ok_or(EvalError::Overflow)?)))
        }
        BinOp::Concat => Ok(Val::Value(Text(text(a)? + &text(b)?))),
        BinOp::Eq => Ok(Val::Bool(a == b)),
        BinOp::Ne => Ok(Val::Bool(a != b)),
        BinOp::Lt => Ok(Val::Bool(int(a)? < int(b)?)),
        BinOp::Le => Ok(Val::Bool(int(a)? <= int(b)?)),
        BinOp::Gt => Ok(Val::Bool(int(a)? > int(b)?)),
        BinOp::Ge => Ok(Val::Bool(int(a)? >= int(b)?)),
        BinOp::And | BinOp::Or => unreachable!("short-circuit operators handled by caller"),
    }
}

fn call(func: Func, mut args: Vec<Val>) -> Result<Val, EvalError> {
    use ParamValue::*;
    let ill = |what: &str| EvalError::IllTyped(format!("bad arguments to {what}"));
    match func {
        Func::Member => {
            let set = args.pop().ok_or_else(|| ill("member"))?;
            let elem = args.pop().ok_or_else(|| ill("member"))?;
            Ok(Val::Bool(match (elem, set) {
                (Val::Value(Int(i)), Val::Value(IntSet(s))) => s.contains(&i),
                (Val::Value(Text(t)), Val::Value(TextSet(s))) => s.contains(&t),
                _ => return Err(ill("member")),
            }))
        }
        Func::Insert | Func::Remove => {
            let elem = args.pop().ok_or_else(|| ill(func.name()))?;
            let set = args.pop().ok_or_else(|| ill(func.name()))?;
            let insert = func == Func::Insert;
            Ok(Val::Value(match (set, elem) {
                (Val::Value(IntSet(mut s)), Val::Value(Int(i))) => {
                    edit(&mut s, i, insert);
                    IntSet(s)
                }
                (Val::Value(TextSet(mut s)), Val::Value(Text(t))) => {
                    edit(&mut s, t, insert);
                    TextSet(s)
                }
                _ => return Err(ill(func.name())),
            }))
        }
        Func::Size => match args.pop() {
            Some(Val::Value(IntSet(s))) => Ok(Val::Value(Int(s.len() as i64))),
            Some(Val::Value(TextSet(s))) => Ok(Val::Value(Int(s.len() as i64))),
            _ => Err(ill("size")),
        },
        Func::Str => match args.pop() {
            Some(Val::Value(Int(i))) => Ok(Val::Value(Text(i.to_string()))),
            Some(Val::Value(Text(t))) => Ok(Val::Value(Text(t))),
            _ => Err(ill("str")),
        },
    }
}

fn edit<T: Ord>(set: &mut BTreeSet<T>, item: T, insert: bool) {
    if insert {
        set.insert(item);
    } else {
        set.remove(&item);
    }
}
