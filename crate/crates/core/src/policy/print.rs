//! Pretty-printer emitting sources that reparse to an equal [`PolicySpec`].

use std::fmt::{self, Display, Formatter, Write};

use super::ast::*;
use crate::model::quote;

impl Display for Expr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => write!(f, "{v}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Param { scope, key, default } => match scope {
                Scope::Req => write!(f, "req({key}, {default})"),
                Scope::Sess => write!(f, "sess({key}, {default})"),
                Scope::Task => write!(f, "task({key}, {default})"),
                Scope::TaskOf(t) => write!(f, "taskof({t}, {key}, {default})"),
            },
            Expr::User => f.write_str("user()"),
            Expr::Account => f.write_str("account()"),
            Expr::Clearance(t) => write!(f, "clearance({t})"),
            Expr::Var(v) => f.write_str(v),
            Expr::Unary(UnOp::Neg, e) => write!(f, "(-({e}))"),
            Expr::Unary(UnOp::Not, e) => write!(f, "(not {e})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::If(c, t, e) => write!(f, "(if {c} then {t} else {e})"),
            Expr::Let(n, v, b) => write!(f, "(let {n} = {v} in {b})"),
        }
    }
}

impl Display for Stmt {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Let(n, e) => write!(f, "let {n} = {e}"),
            Stmt::SetTask { task, key, value } => write!(f, "set task {task}[{key}] = {value}"),
            Stmt::SetClearance { task, value } => write!(f, "set clearance {task} = {value}"),
            Stmt::OpenSession { user, account } => write!(f, "open_session({user}, {account})"),
            Stmt::CloseSession => f.write_str("close_session"),
            Stmt::SetSess { key, value } => write!(f, "set sess[{key}] = {value}"),
        }
    }
}

fn write_variant(out: &mut String, name: &str, v: &VariantUpdates) -> fmt::Result {
    if v.blocks().next().is_none() {
        return Ok(());
    }
    writeln!(out, "  {name} {{")?;
    for (slot, block) in v.blocks() {
        writeln!(out, "    {} {{", slot.keyword())?;
        for stmt in &block.stmts {
            writeln!(out, "      {stmt}")?;
        }
        writeln!(out, "    }}")?;
    }
    writeln!(out, "  }}")
}

impl Display for ActionSpec {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "action {} task {} clearance {} {{", self.action, self.task, self.required_clearance)?;
        if let Some(c) = &self.constraint {
            writeln!(out, "  constraint {c}")?;
        }
        write_variant(&mut out, "on_authorized", &self.on_authorized)?;
        write_variant(&mut out, "on_denied", &self.on_denied)?;
        out.push('}');
        f.write_str(&out)
    }
}

impl Display for PolicySpec {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        for t in &self.tasks {
            writeln!(f, "task {t}")?;
        }
        if !self.users.is_empty() {
            let users: Vec<&str> = self.users.iter().map(|u| &**u).collect();
            writeln!(f, "users {}", users.join(" "))?;
        }
        if !self.accounts.is_empty() {
            let accs: Vec<String> = self.accounts.iter().map(|a| a.to_string()).collect();
            writeln!(f, "accounts {}", accs.join(" "))?;
        }
        writeln!(f, "initial_clearance {}", self.default_clearance)?;
        for ((u, a, t), c) in &self.clearance_overrides {
            writeln!(f, "initial_clearance {u} {a} {t} = {c}")?;
        }
        for ((acc, task), params) in &self.initial_account_params {
            write!(f, "init account {acc} task {task} {{")?;
            for (i, (k, v)) in params.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, " {} = {v}", quote(k))?;
            }
            writeln!(f, " }}")?;
        }
        for a in self.actions.values() {
            writeln!(f)?;
            writeln!(f, "{a}")?;
        }
        Ok(())
    }
}
