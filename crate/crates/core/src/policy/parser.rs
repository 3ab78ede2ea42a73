//! Recursive-descent parser and type checker for `.policy` sources.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::*;
use crate::lex::{tokenize, Cursor, LexError, Pos, Tok};
use crate::model::{AccountId, Clearance, Name, ParamValue, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("{pos}: syntax error: {msg}")]
    Syntax { pos: Pos, msg: String },
    #[error("{pos}: type error: {msg}")]
    Type { pos: Pos, msg: String },
    #[error("{pos}: unknown {what} `{name}`")]
    Unknown { pos: Pos, what: &'static str, name: String },
    #[error("{pos}: duplicate {what} `{name}`")]
    Duplicate { pos: Pos, what: &'static str, name: String },
}

impl PolicyError {
    pub fn pos(&self) -> Pos {
        match self {
            PolicyError::Lex(e) => e.pos,
            PolicyError::Syntax { pos, .. }
            | PolicyError::Type { pos, .. }
            | PolicyError::Unknown { pos, .. }
            | PolicyError::Duplicate { pos, .. } => *pos,
        }
    }
}

type PResult<T> = Result<T, PolicyError>;

const RESERVED: &[&str] = &[
    "let",
    "in",
    "if",
    "then",
    "else",
    "and",
    "or",
    "not",
    "true",
    "false",
    "req",
    "sess",
    "task",
    "taskof",
    "user",
    "account",
    "clearance",
    "member",
    "insert",
    "remove",
    "size",
    "str",
    "int",
    "text",
];

const DECL_KEYWORDS: &[&str] = &["task", "users", "accounts", "init", "action", "initial_clearance"];

/// Parses and validates a policy source.
pub fn parse_policy(src: &str) -> PResult<PolicySpec> {
    let mut p = Parser { cur: Cursor::new(tokenize(src)?), spec: PolicySpec::default() };
    p.policy()?;
    Ok(p.spec)
}

/// Parses a standalone boolean expression against an already-parsed policy's
/// task set. Used by tests and tooling.
pub fn parse_constraint(src: &str, tasks: &BTreeSet<Name>) -> PResult<Expr> {
    let spec = PolicySpec { tasks: tasks.clone(), ..Default::default() };
    let mut p = Parser { cur: Cursor::new(tokenize(src)?), spec };
    let pos = p.cur.pos();
    let e = p.expr()?;
    p.expect_eof()?;
    let mut env = Vec::new();
    expect_type(&e, Type::Bool, &mut env, pos)?;
    Ok(e)
}

struct Parser {
    cur: Cursor,
    spec: PolicySpec,
}

impl Parser {
    fn syntax<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(PolicyError::Syntax { pos: self.cur.pos(), msg: msg.into() })
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.cur.eat_sym(s) {
            Ok(())
        } else {
            self.syntax(format!("expected `{s}`, found {}", self.cur.peek()))
        }
    }

    fn expect_kw(&mut self, s: &str) -> PResult<()> {
        if self.cur.eat_ident(s) {
            Ok(())
        } else {
            self.syntax(format!("expected `{s}`, found {}", self.cur.peek()))
        }
    }

    fn expect_eof(&mut self) -> PResult<()> {
        if self.cur.at_eof() {
            Ok(())
        } else {
            self.syntax(format!("unexpected {}", self.cur.peek()))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.cur.peek().clone() {
            Tok::Ident(s) => {
                self.cur.next();
                Ok(s)
            }
            other => self.syntax(format!("expected a name, found {other}")),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        let neg = self.cur.eat_sym("-");
        match *self.cur.peek() {
            Tok::Int(v) => {
                self.cur.next();
                Ok(if neg { -v } else { v })
            }
            ref other => self.syntax(format!("expected an integer, found {other}")),
        }
    }

    fn string(&mut self) -> PResult<String> {
        match self.cur.peek().clone() {
            Tok::Str(s) => {
                self.cur.next();
                Ok(s)
            }
            other => self.syntax(format!("expected a string, found {other}")),
        }
    }

    fn task_ref(&mut self) -> PResult<Name> {
        let pos = self.cur.pos();
        let name = self.ident()?;
        match self.spec.tasks.get(name.as_str()) {
            Some(t) => Ok(t.clone()),
            None => Err(PolicyError::Unknown { pos, what: "task", name }),
        }
    }

    fn account_ref(&mut self) -> PResult<AccountId> {
        let pos = self.cur.pos();
        let acc = self.int()?;
        if self.spec.accounts.contains(&acc) {
            Ok(acc)
        } else {
            Err(PolicyError::Unknown { pos, what: "account", name: acc.to_string() })
        }
    }

    fn user_ref(&mut self) -> PResult<Name> {
        let pos = self.cur.pos();
        let name = self.ident()?;
        match self.spec.users.get(name.as_str()) {
            Some(u) => Ok(u.clone()),
            None => Err(PolicyError::Unknown { pos, what: "user", name }),
        }
    }

    fn at_decl_keyword(&self) -> bool {
        matches!(self.cur.peek(), Tok::Ident(s) if DECL_KEYWORDS.contains(&s.as_str()))
    }

    fn policy(&mut self) -> PResult<()> {
        while !self.cur.at_eof() {
            let pos = self.cur.pos();
            let kw = self.ident()?;
            match kw.as_str() {
                "task" => {
                    let name = self.ident()?;
                    if !self.spec.tasks.insert(name.as_str().into()) {
                        return Err(PolicyError::Duplicate { pos, what: "task", name });
                    }
                }
                "users" => {
                    let mut any = false;
                    while matches!(self.cur.peek(), Tok::Ident(_)) && !self.at_decl_keyword() {
                        let name = self.ident()?;
                        if !self.spec.users.insert(name.as_str().into()) {
                            return Err(PolicyError::Duplicate { pos, what: "user", name });
                        }
                        any = true;
                    }
                    if !any {
                        return self.syntax("`users` needs at least one name");
                    }
                }
                "accounts" => {
                    let mut any = false;
                    while matches!(self.cur.peek(), Tok::Int(_)) || self.cur.is_sym("-") {
                        let acc = self.int()?;
                        if !self.spec.accounts.insert(acc) {
                            return Err(PolicyError::Duplicate { pos, what: "account", name: acc.to_string() });
                        }
                        any = true;
                    }
                    if !any {
                        return self.syntax("`accounts` needs at least one id");
                    }
                }
                "initial_clearance" => {
                    if matches!(self.cur.peek(), Tok::Int(_)) || self.cur.is_sym("-") {
                        self.spec.default_clearance = Clearance(self.int()?);
                    } else {
                        let user = self.user_ref()?;
                        let acc = self.account_ref()?;
                        let task = self.task_ref()?;
                        self.expect_sym("=")?;
                        let cl = Clearance(self.int()?);
                        self.spec.clearance_overrides.insert((user, acc, task), cl);
                    }
                }
                "init" => {
                    self.expect_kw("account")?;
                    let acc = self.account_ref()?;
                    self.expect_kw("task")?;
                    let task = self.task_ref()?;
                    self.expect_sym("{")?;
                    let mut params =
                        self.spec.initial_account_params.get(&(acc, task.clone())).cloned().unwrap_or_default();
                    while !self.cur.eat_sym("}") {
                        let key = self.string()?;
                        self.expect_sym("=")?;
                        let v = self.literal()?;
                        params.insert(key, v);
                        self.cur.eat_sym(",");
                    }
                    self.spec.initial_account_params.insert((acc, task), params);
                }
                "action" => self.action(pos)?,
                other => return Err(PolicyError::Syntax { pos, msg: format!("unknown declaration `{other}`") }),
            }
        }
        Ok(())
    }

    fn action(&mut self, pos: Pos) -> PResult<()> {
        let name = self.ident()?;
        if self.spec.actions.contains_key(name.as_str()) {
            return Err(PolicyError::Duplicate { pos, what: "action", name });
        }
        self.expect_kw("task")?;
        let task = self.task_ref()?;
        self.expect_kw("clearance")?;
        let required = Clearance(self.int()?);
        self.expect_sym("{")?;
        let mut spec = ActionSpec {
            action: name.as_str().into(),
            task: task.clone(),
            required_clearance: required,
            constraint: None,
            on_authorized: VariantUpdates::default(),
            on_denied: VariantUpdates::default(),
        };
        let mut seen = BTreeSet::new();
        while !self.cur.eat_sym("}") {
            let vpos = self.cur.pos();
            let kw = self.ident()?;
            if !seen.insert(kw.clone()) {
                return Err(PolicyError::Duplicate { pos: vpos, what: "section", name: kw });
            }
            match kw.as_str() {
                "constraint" => {
                    let e = self.expr()?;
                    expect_type(&e, Type::Bool, &mut Vec::new(), vpos)?;
                    spec.constraint = Some(e);
                }
                "on_authorized" => spec.on_authorized = self.variant()?,
                "on_denied" => spec.on_denied = self.variant()?,
                other => {
                    return Err(PolicyError::Syntax {
                        pos: vpos,
                        msg: format!("expected `constraint`, `on_authorized` or `on_denied`, found `{other}`"),
                    })
                }
            }
        }
        self.spec.actions.insert(spec.action.clone(), spec);
        Ok(())
    }

    fn variant(&mut self) -> PResult<VariantUpdates> {
        self.expect_sym("{")?;
        let mut v = VariantUpdates::default();
        while !self.cur.eat_sym("}") {
            let pos = self.cur.pos();
            let kw = self.ident()?;
            let slot = match kw.as_str() {
                "account_update" => Slot::Account,
                "clearance_update" => Slot::Clearance,
                "session_update" => Slot::Session,
                other => {
                    return Err(PolicyError::Syntax { pos, msg: format!("expected an update slot, found `{other}`") })
                }
            };
            if v.slot(slot).is_some() {
                return Err(PolicyError::Duplicate { pos, what: "slot", name: kw });
            }
            let block = self.block(slot)?;
            *v.slot_mut(slot) = Some(block);
        }
        Ok(v)
    }

    fn block(&mut self, slot: Slot) -> PResult<UpdateBlock> {
        self.expect_sym("{")?;
        let mut env: Vec<(String, Type)> = Vec::new();
        let mut stmts = Vec::new();
        while !self.cur.eat_sym("}") {
            let pos = self.cur.pos();
            let stmt = self.stmt()?;
            let allowed = matches!(
                (slot, &stmt),
                (_, Stmt::Let(..))
                    | (Slot::Account, Stmt::SetTask { .. })
                    | (Slot::Clearance, Stmt::SetClearance { .. })
                    | (Slot::Session, Stmt::OpenSession { .. } | Stmt::CloseSession | Stmt::SetSess { .. })
            );
            if !allowed {
                return Err(PolicyError::Type { pos, msg: format!("statement not allowed in {}", slot.keyword()) });
            }
            check_stmt(&stmt, &mut env, pos)?;
            stmts.push(stmt);
            self.cur.eat_sym(";");
        }
        Ok(UpdateBlock { stmts })
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        if self.cur.eat_ident("let") {
            let name = self.binder()?;
            self.expect_sym("=")?;
            let e = self.expr()?;
            return Ok(Stmt::Let(name, e));
        }
        if self.cur.eat_ident("open_session") {
            self.expect_sym("(")?;
            let user = self.expr()?;
            self.expect_sym(",")?;
            let account = self.expr()?;
            self.expect_sym(")")?;
            return Ok(Stmt::OpenSession { user, account });
        }
        if self.cur.eat_ident("close_session") {
            return Ok(Stmt::CloseSession);
        }
        self.expect_kw("set")?;
        if self.cur.eat_ident("task") {
            let task = self.task_ref()?;
            self.expect_sym("[")?;
            let key = self.expr()?;
            self.expect_sym("]")?;
            self.expect_sym("=")?;
            let value = self.expr()?;
            Ok(Stmt::SetTask { task, key, value })
        } else if self.cur.eat_ident("clearance") {
            let task = self.task_ref()?;
            self.expect_sym("=")?;
            let value = self.expr()?;
            Ok(Stmt::SetClearance { task, value })
        } else if self.cur.eat_ident("sess") {
            self.expect_sym("[")?;
            let key = self.expr()?;
            self.expect_sym("]")?;
            self.expect_sym("=")?;
            let value = self.expr()?;
            Ok(Stmt::SetSess { key, value })
        } else {
            self.syntax(format!("expected `task`, `clearance` or `sess` after `set`, found {}", self.cur.peek()))
        }
    }

    fn binder(&mut self) -> PResult<String> {
        let pos = self.cur.pos();
        let name = self.ident()?;
        if RESERVED.contains(&name.as_str()) {
            return Err(PolicyError::Syntax { pos, msg: format!("`{name}` is reserved") });
        }
        Ok(name)
    }

    fn literal(&mut self) -> PResult<ParamValue> {
        match self.cur.peek().clone() {
            Tok::Int(_) => Ok(ParamValue::Int(self.int()?)),
            Tok::Sym("-") => Ok(ParamValue::Int(self.int()?)),
            Tok::Str(s) => {
                self.cur.next();
                Ok(ParamValue::Text(s))
            }
            Tok::Sym("{") => self.set_literal(None),
            Tok::Ident(s) if s == "int" || s == "text" => {
                self.cur.next();
                let kind = if s == "int" { ValueKind::IntSet } else { ValueKind::TextSet };
                self.set_literal(Some(kind))
            }
            other => self.syntax(format!("expected a literal, found {other}")),
        }
    }

    fn set_literal(&mut self, declared: Option<ValueKind>) -> PResult<ParamValue> {
        let pos = self.cur.pos();
        self.expect_sym("{")?;
        let mut ints = BTreeSet::new();
        let mut texts = BTreeSet::new();
        while !self.cur.eat_sym("}") {
            match self.cur.peek().clone() {
                Tok::Int(_) | Tok::Sym("-") => {
                    ints.insert(self.int()?);
                }
                Tok::Str(s) => {
                    self.cur.next();
                    texts.insert(s);
                }
                other => return self.syntax(format!("expected a set element, found {other}")),
            }
            if !self.cur.eat_sym(",") && !self.cur.is_sym("}") {
                return self.syntax("expected `,` or `}` in set literal");
            }
        }
        let kind = match (declared, ints.is_empty(), texts.is_empty()) {
            (_, false, false) => {
                return Err(PolicyError::Type { pos, msg: "set literal mixes integers and text".into() })
            }
            (Some(k), _, _) => k,
            (None, false, true) => ValueKind::IntSet,
            (None, true, false) => ValueKind::TextSet,
            (None, true, true) => {
                return Err(PolicyError::Type { pos, msg: "empty set needs `int{}` or `text{}`".into() })
            }
        };
        match kind {
            ValueKind::IntSet if texts.is_empty() => Ok(ParamValue::IntSet(ints)),
            ValueKind::TextSet if ints.is_empty() => Ok(ParamValue::TextSet(texts)),
            _ => Err(PolicyError::Type { pos, msg: "set literal elements do not match its type".into() }),
        }
    }

    pub(crate) fn expr(&mut self) -> PResult<Expr> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.cur.eat_ident("or") {
            let rhs = self.and_expr()?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.not_expr()?;
        while self.cur.eat_ident("and") {
            let rhs = self.not_expr()?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.cur.eat_ident("not") {
            let e = self.not_expr()?;
            return Ok(Expr::Unary(UnOp::Not, Box::new(e)));
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> PResult<Expr> {
        let lhs = self.add_expr()?;
        let op = match self.cur.peek() {
            Tok::Sym("==") => BinOp::Eq,
            Tok::Sym("!=") => BinOp::Ne,
            Tok::Sym("<") => BinOp::Lt,
            Tok::Sym("<=") => BinOp::Le,
            Tok::Sym(">") => BinOp::Gt,
            Tok::Sym(">=") => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.cur.next();
        let rhs = self.add_expr()?;
        Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.cur.peek() {
                Tok::Sym("+") => BinOp::Add,
                Tok::Sym("-") => BinOp::Sub,
                Tok::Sym("++") => BinOp::Concat,
                _ => return Ok(lhs),
            };
            self.cur.next();
            let rhs = self.mul_expr()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn mul_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary_expr()?;
        loop {
            let op = match self.cur.peek() {
                Tok::Sym("*") => BinOp::Mul,
                Tok::Sym("/") => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.cur.next();
            let rhs = self.unary_expr()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary_expr(&mut self) -> PResult<Expr> {
        if self.cur.is_sym("-") {
            if let Tok::Int(v) = *self.cur.peek_at(1) {
                self.cur.next();
                self.cur.next();
                return Ok(Expr::Lit(ParamValue::Int(-v)));
            }
            self.cur.next();
            let e = self.unary_expr()?;
            return Ok(Expr::Unary(UnOp::Neg, Box::new(e)));
        }
        self.primary()
    }

    fn args(&mut self, n: usize) -> PResult<Vec<Expr>> {
        self.expect_sym("(")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                self.expect_sym(",")?;
            }
            out.push(self.expr()?);
        }
        self.expect_sym(")")?;
        Ok(out)
    }

    fn primary(&mut self) -> PResult<Expr> {
        match self.cur.peek().clone() {
            Tok::Int(v) => {
                self.cur.next();
                Ok(Expr::Lit(ParamValue::Int(v)))
            }
            Tok::Str(s) => {
                self.cur.next();
                Ok(Expr::Lit(ParamValue::Text(s)))
            }
            Tok::Sym("(") => {
                self.cur.next();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Sym("{") => Ok(Expr::Lit(self.set_literal(None)?)),
            Tok::Ident(id) => {
                let followed_by_paren = matches!(self.cur.peek_at(1), Tok::Sym("("));
                match id.as_str() {
                    "true" => {
                        self.cur.next();
                        Ok(Expr::Bool(true))
                    }
                    "false" => {
                        self.cur.next();
                        Ok(Expr::Bool(false))
                    }
                    "int" | "text" if matches!(self.cur.peek_at(1), Tok::Sym("{")) => Ok(Expr::Lit(self.literal()?)),
                    "let" => {
                        self.cur.next();
                        let name = self.binder()?;
                        self.expect_sym("=")?;
                        let value = self.expr()?;
                        self.expect_kw("in")?;
                        let body = self.expr()?;
                        Ok(Expr::Let(name, Box::new(value), Box::new(body)))
                    }
                    "if" => {
                        self.cur.next();
                        let c = self.expr()?;
                        self.expect_kw("then")?;
                        let t = self.expr()?;
                        self.expect_kw("else")?;
                        let e = self.expr()?;
                        Ok(Expr::If(Box::new(c), Box::new(t), Box::new(e)))
                    }
                    "req" | "sess" | "task" if followed_by_paren => {
                        self.cur.next();
                        let scope = match id.as_str() {
                            "req" => Scope::Req,
                            "sess" => Scope::Sess,
                            _ => Scope::Task,
                        };
                        let mut a = self.args(2)?;
                        let default = a.pop().expect("two args");
                        let key = a.pop().expect("two args");
                        Ok(Expr::Param { scope, key: Box::new(key), default: Box::new(default) })
                    }
                    "taskof" if followed_by_paren => {
                        self.cur.next();
                        self.expect_sym("(")?;
                        let task = self.task_ref()?;
                        self.expect_sym(",")?;
                        let key = self.expr()?;
                        self.expect_sym(",")?;
                        let default = self.expr()?;
                        self.expect_sym(")")?;
                        Ok(Expr::Param { scope: Scope::TaskOf(task), key: Box::new(key), default: Box::new(default) })
                    }
                    "user" | "account" if followed_by_paren => {
                        self.cur.next();
                        self.args(0)?;
                        Ok(if id == "user" { Expr::User } else { Expr::Account })
                    }
                    "clearance" if followed_by_paren => {
                        self.cur.next();
                        self.expect_sym("(")?;
                        let task = self.task_ref()?;
                        self.expect_sym(")")?;
                        Ok(Expr::Clearance(task))
                    }
                    "member" | "insert" | "remove" | "size" | "str" if followed_by_paren => {
                        self.cur.next();
                        let func = match id.as_str() {
                            "member" => Func::Member,
                            "insert" => Func::Insert,
                            "remove" => Func::Remove,
                            "size" => Func::Size,
                            _ => Func::Str,
                        };
                        let args = self.args(func.arity())?;
                        Ok(Expr::Call(func, args))
                    }
                    _ if RESERVED.contains(&id.as_str()) => self.syntax(format!("unexpected `{id}`")),
                    _ => {
                        self.cur.next();
                        Ok(Expr::Var(id))
                    }
                }
            }
            other => self.syntax(format!("expected an expression, found {other}")),
        }
    }
}

fn type_err<T>(pos: Pos, msg: impl Into<String>) -> PResult<T> {
    Err(PolicyError::Type { pos, msg: msg.into() })
}

fn expect_type(e: &Expr, want: Type, env: &mut Vec<(String, Type)>, pos: Pos) -> PResult<()> {
    let got = type_of(e, env, pos)?;
    if got == want {
        Ok(())
    } else {
        type_err(pos, format!("expected {want}, found {got}"))
    }
}

fn expect_value(e: &Expr, env: &mut Vec<(String, Type)>, pos: Pos, what: &str) -> PResult<ValueKind> {
    match type_of(e, env, pos)? {
        Type::Value(k) => Ok(k),
        Type::Bool => type_err(pos, format!("{what} must be a value, found bool")),
    }
}

fn check_stmt(stmt: &Stmt, env: &mut Vec<(String, Type)>, pos: Pos) -> PResult<()> {
    match stmt {
        Stmt::Let(name, e) => {
            let t = type_of(e, env, pos)?;
            env.push((name.clone(), t));
        }
        Stmt::SetTask { key, value, .. } | Stmt::SetSess { key, value } => {
            expect_type(key, Type::Value(ValueKind::Text), env, pos)?;
            expect_value(value, env, pos, "parameter value")?;
        }
        Stmt::SetClearance { value, .. } => expect_type(value, Type::Value(ValueKind::Int), env, pos)?,
        Stmt::OpenSession { user, account } => {
            expect_type(user, Type::Value(ValueKind::Text), env, pos)?;
            expect_type(account, Type::Value(ValueKind::Int), env, pos)?;
        }
        Stmt::CloseSession => {}
    }
    Ok(())
}

/// Infers the static type of `e` under the let-bound variables in `env`.
pub(crate) fn type_of(e: &Expr, env: &mut Vec<(String, Type)>, pos: Pos) -> PResult<Type> {
    use Type::Value as V;
    use ValueKind::*;
    Ok(match e {
        Expr::Lit(v) => V(v.kind()),
        Expr::Bool(_) => Type::Bool,
        Expr::User => V(Text),
        Expr::Account | Expr::Clearance(_) => V(Int),
        Expr::Var(name) => match env.iter().rev().find(|(n, _)| n == name) {
            Some((_, t)) => *t,
            None => return type_err(pos, format!("unbound variable `{name}`")),
        },
        Expr::Param { key, default, .. } => {
            expect_type(key, V(Text), env, pos)?;
            V(expect_value(default, env, pos, "parameter default")?)
        }
        Expr::Unary(UnOp::Neg, a) => {
            expect_type(a, V(Int), env, pos)?;
            V(Int)
        }
        Expr::Unary(UnOp::Not, a) => {
            expect_type(a, Type::Bool, env, pos)?;
            Type::Bool
        }
        Expr::Binary(op, a, b) => match op {
            BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
                expect_type(a, V(Int), env, pos)?;
                expect_type(b, V(Int), env, pos)?;
                V(Int)
            }
            BinOp::Concat => {
                expect_type(a, V(Text), env, pos)?;
                expect_type(b, V(Text), env, pos)?;
                V(Text)
            }
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                expect_type(a, V(Int), env, pos)?;
                expect_type(b, V(Int), env, pos)?;
                Type::Bool
            }
            BinOp::Eq | BinOp::Ne => {
                let ta = type_of(a, env, pos)?;
                let tb = type_of(b, env, pos)?;
                if ta != tb {
                    return type_err(pos, format!("cannot compare {ta} with {tb}"));
                }
                Type::Bool
            }
            BinOp::And | BinOp::Or => {
                expect_type(a, Type::Bool, env, pos)?;
                expect_type(b, Type::Bool, env, pos)?;
                Type::Bool
            }
        },
        Expr::Call(func, args) => {
            if args.len() != func.arity() {
                return type_err(pos, format!("{} takes {} arguments", func.name(), func.arity()));
            }
            match func {
                Func::Member => {
                    let elem = expect_value(&args[0], env, pos, "member element")?;
                    let set = expect_value(&args[1], env, pos, "member set")?;
                    if set_of(elem) != Some(set) {
                        return type_err(pos, format!("member: {elem} is not an element of {set}"));
                    }
                    Type::Bool
                }
                Func::Insert | Func::Remove => {
                    let set = expect_value(&args[0], env, pos, "set")?;
                    let elem = expect_value(&args[1], env, pos, "element")?;
                    if set_of(elem) != Some(set) {
                        return type_err(pos, format!("{}: {elem} is not an element of {set}", func.name()));
                    }
                    V(set)
                }
                Func::Size => match expect_value(&args[0], env, pos, "size argument")? {
                    IntSet | TextSet => V(Int),
                    other => return type_err(pos, format!("size of {other}")),
                },
                Func::Str => match expect_value(&args[0], env, pos, "str argument")? {
                    Int | Text => V(Text),
                    other => return type_err(pos, format!("str of {other}")),
                },
            }
        }
        Expr::If(c, t, f) => {
            expect_type(c, Type::Bool, env, pos)?;
            let tt = type_of(t, env, pos)?;
            let tf = type_of(f, env, pos)?;
            if tt != tf {
                return type_err(pos, format!("if branches differ: {tt} vs {tf}"));
            }
            tt
        }
        Expr::Let(name, value, body) => {
            let tv = type_of(value, env, pos)?;
            env.push((name.clone(), tv));
            let out = type_of(body, env, pos);
            env.pop();
            out?
        }
    })
}

fn set_of(elem: ValueKind) -> Option<ValueKind> {
    match elem {
        ValueKind::Int => Some(ValueKind::IntSet),
        ValueKind::Text => Some(ValueKind::TextSet),
        _ => None,
    }
}

/// Static key → kind table collected from every parameter reference and
/// write with a literal key. Used to generate well-typed contexts.
pub fn declared_key_kinds(spec: &PolicySpec) -> BTreeMap<(Scope, String), ValueKind> {
    let mut out = BTreeMap::new();
    let mut visit = |e: &Expr, task: &Name| {
        e.walk(&mut |sub| {
            if let Expr::Param { scope, key, default } = sub {
                if let (Expr::Lit(ParamValue::Text(k)), Some(kind)) = (&**key, literal_kind(default)) {
                    let scope = match scope {
                        Scope::Task => Scope::TaskOf(task.clone()),
                        other => other.clone(),
                    };
                    out.entry((scope, k.clone())).or_insert(kind);
                }
            }
        });
    };
    for a in spec.actions.values() {
        if let Some(c) = &a.constraint {
            visit(c, &a.task);
        }
        for variant in [&a.on_authorized, &a.on_denied] {
            for (_, block) in variant.blocks() {
                for stmt in &block.stmts {
                    for e in stmt_exprs(stmt) {
                        visit(e, &a.task);
                    }
                }
            }
        }
    }
    out
}

fn literal_kind(e: &Expr) -> Option<ValueKind> {
    match e {
        Expr::Lit(v) => Some(v.kind()),
        _ => None,
    }
}

pub fn stmt_exprs(stmt: &Stmt) -> Vec<&Expr> {
    match stmt {
        Stmt::Let(_, e) => vec![e],
        Stmt::SetTask { key, value, .. } | Stmt::SetSess { key, value } => vec![key, value],
        Stmt::SetClearance { value, .. } => vec![value],
        Stmt::OpenSession { user, account } => vec![user, account],
        Stmt::CloseSession => vec![],
    }
}
