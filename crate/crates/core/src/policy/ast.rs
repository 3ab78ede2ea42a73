use std::collections::{BTreeMap, BTreeSet};

use crate::model::{AccountId, Clearance, Name, ParamSet, ParamValue, ValueKind};

/// Static type of an expression: one of the four value kinds, or boolean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Type {
    Bool,
    Value(ValueKind),
}

impl std::fmt::Display for Type {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Type::Bool => f.write_str("bool"),
            Type::Value(k) => write!(f, "{k}"),
        }
    }
}

/// Which parameter set a reference reads.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    /// Request parameters.
    Req,
    /// Parameters of the session the request runs in.
    Sess,
    /// Parameters of the action's own task for the requesting account.
    Task,
    /// Parameters of a named task for the requesting account.
    TaskOf(Name),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Concat,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Concat => "++",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

/// Built-in set and string operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    /// `member(elem, set)`
    Member,
    /// `insert(set, elem)`
    Insert,
    /// `remove(set, elem)`
    Remove,
    /// `size(set)`
    Size,
    /// `str(value)`
    Str,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Member => "member",
            Func::Insert => "insert",
            Func::Remove => "remove",
            Func::Size => "size",
            Func::Str => "str",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Size | Func::Str => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(ParamValue),
    Bool(bool),
    /// Parameter lookup with an inline default; absent keys never fail.
    Param {
        scope: Scope,
        key: Box<Expr>,
        default: Box<Expr>,
    },
    User,
    Account,
    /// Requesting pair's clearance for a task (pre-state snapshot).
    Clearance(Name),
    Var(String),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    Let(String, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Pre-order traversal of this expression and all sub-expressions.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Lit(_) | Expr::Bool(_) | Expr::User | Expr::Account | Expr::Clearance(_) | Expr::Var(_) => {}
            Expr::Param { key, default, .. } => {
                key.walk(f);
                default.walk(f);
            }
            Expr::Unary(_, e) => e.walk(f),
            Expr::Binary(_, a, b) => {
                a.walk(f);
                b.walk(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
            Expr::If(c, t, e) => {
                c.walk(f);
                t.walk(f);
                e.walk(f);
            }
            Expr::Let(_, v, body) => {
                v.walk(f);
                body.walk(f);
            }
        }
    }

    /// Splits a conjunction into its conjuncts, looking through `let` bodies.
    pub fn conjuncts(&self) -> Vec<&Expr> {
        match self {
            Expr::Binary(BinOp::And, a, b) => {
                let mut out = a.conjuncts();
                out.extend(b.conjuncts());
                out
            }
            Expr::Let(_, _, body) => body.conjuncts(),
            other => vec![other],
        }
    }

    /// Drops the conjuncts (as split by [`Expr::conjuncts`]) for which `drop`
    /// holds, keeping enclosing `let`s. A conjunction emptied this way becomes
    /// `true`.
    pub fn without_conjuncts(&self, drop: &dyn Fn(&Expr) -> bool) -> Expr {
        self.prune(drop).unwrap_or(Expr::Bool(true))
    }

    fn prune(&self, drop: &dyn Fn(&Expr) -> bool) -> Option<Expr> {
        match self {
            Expr::Binary(BinOp::And, a, b) => match (a.prune(drop), b.prune(drop)) {
                (Some(a), Some(b)) => Some(Expr::Binary(BinOp::And, Box::new(a), Box::new(b))),
                (one, None) | (None, one) => one,
            },
            Expr::Let(n, v, body) => body.prune(drop).map(|b| Expr::Let(n.clone(), v.clone(), Box::new(b))),
            other if drop(other) => None,
            other => Some(other.clone()),
        }
    }

    /// Whether some parameter reference in `e` uses the literal key `key`.
    pub fn reads_key(&self, key: &str) -> bool {
        let mut hit = false;
        self.walk(&mut |e| {
            if let Expr::Param { key: k, .. } = e {
                if matches!(&**k, Expr::Lit(ParamValue::Text(t)) if t == key) {
                    hit = true;
                }
            }
        });
        hit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Let(String, Expr),
    /// Writes a parameter of `task` for the requesting account. There is no
    /// account argument: other accounts are unreachable.
    SetTask {
        task: Name,
        key: Expr,
        value: Expr,
    },
    /// Writes the requesting (user, account) pair's clearance for `task`.
    SetClearance {
        task: Name,
        value: Expr,
    },
    OpenSession {
        user: Expr,
        account: Expr,
    },
    CloseSession,
    SetSess {
        key: Expr,
        value: Expr,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateBlock {
    pub stmts: Vec<Stmt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Account,
    Clearance,
    Session,
}

impl Slot {
    pub fn keyword(self) -> &'static str {
        match self {
            Slot::Account => "account_update",
            Slot::Clearance => "clearance_update",
            Slot::Session => "session_update",
        }
    }

    pub fn all() -> [Slot; 3] {
        [Slot::Account, Slot::Clearance, Slot::Session]
    }
}

/// The three optional update functions run after one decision outcome.
/// An absent slot is the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VariantUpdates {
    pub account_update: Option<UpdateBlock>,
    pub clearance_update: Option<UpdateBlock>,
    pub session_update: Option<UpdateBlock>,
}

impl VariantUpdates {
    pub fn slot(&self, slot: Slot) -> Option<&UpdateBlock> {
        match slot {
            Slot::Account => self.account_update.as_ref(),
            Slot::Clearance => self.clearance_update.as_ref(),
            Slot::Session => self.session_update.as_ref(),
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut Option<UpdateBlock> {
        match slot {
            Slot::Account => &mut self.account_update,
            Slot::Clearance => &mut self.clearance_update,
            Slot::Session => &mut self.session_update,
        }
    }

    pub fn is_identity(&self) -> bool {
        Slot::all().iter().all(|s| self.slot(*s).is_none_or(|b| b.stmts.is_empty()))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Slot, &UpdateBlock)> {
        Slot::all().into_iter().filter_map(|s| self.slot(s).map(|b| (s, b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    pub action: Name,
    pub task: Name,
    pub required_clearance: Clearance,
    /// Absent ⇔ constant true.
    pub constraint: Option<Expr>,
    pub on_authorized: VariantUpdates,
    pub on_denied: VariantUpdates,
}

impl ActionSpec {
    pub fn variant(&self, authorized: bool) -> &VariantUpdates {
        if authorized {
            &self.on_authorized
        } else {
            &self.on_denied
        }
    }

    /// Whether the authorized variant can open a session. Only such actions
    /// may be requested without a session.
    pub fn opens_session(&self) -> bool {
        self.on_authorized
            .session_update
            .as_ref()
            .is_some_and(|b| b.stmts.iter().any(|s| matches!(s, Stmt::OpenSession { .. })))
    }
}

/// A complete, validated policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicySpec {
    pub tasks: BTreeSet<Name>,
    pub users: BTreeSet<Name>,
    pub accounts: BTreeSet<AccountId>,
    pub actions: BTreeMap<Name, ActionSpec>,
    pub initial_account_params: BTreeMap<(AccountId, Name), ParamSet>,
    pub default_clearance: Clearance,
    pub clearance_overrides: BTreeMap<(Name, AccountId, Name), Clearance>,
}

impl PolicySpec {
    pub fn action(&self, name: &str) -> Option<&ActionSpec> {
        self.actions.get(name)
    }

    pub fn actions_of_task<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a ActionSpec> + 'a {
        self.actions.values().filter(move |a| &*a.task == task)
    }

    pub fn initial_clearance(&self, user: &str, account: AccountId, task: &str) -> Clearance {
        self.clearance_overrides
            .get(&(Name::from(user), account, Name::from(task)))
            .copied()
            .unwrap_or(self.default_clearance)
    }
}
