//! Policy definition language: AST, parser with type checking, evaluator and
//! printer.
//!
//! A policy declares tasks, users, accounts, initial account-task parameters
//! and clearances, and one `action` block per action with its clearance floor,
//! optional constraint and the authorized/denied update slots.

mod ast;
mod eval;
mod parser;
mod print;

pub use ast::*;
pub use eval::{eval_constraint, eval_update, EvalContext, EvalError, SessionDelta, SessionLifecycle, StateDelta, Val};
pub use parser::{declared_key_kinds, parse_constraint, parse_policy, stmt_exprs, PolicyError};

pub(crate) use eval::exec_stmt;
