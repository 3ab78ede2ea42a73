//! Workloads: the request sequences each simulated client sends.
//!
//! ```text
//! workload base
//! stop_on_deny false
//! client c1 user master account 1 mode free {
//!   idtf(usr = "master", acc = 1)
//!   auth(sess = $session, pass = "secret")
//! }
//! ```
//!
//! `$session` stands for the session id the client currently holds; the
//! parameter is left out while the client holds none.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::lex::{tokenize, Cursor, LexError, Pos, Tok};
use crate::model::{quote, AccountId, ClientQueue, Name, ParamSet, ParamValue, RequestMsg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("{pos}: {msg}")]
    Syntax { pos: Pos, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TemplateValue {
    Lit(ParamValue),
    /// The client's current session id.
    Session,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestTemplate {
    pub action: Name,
    pub params: Vec<(String, TemplateValue)>,
}

impl RequestTemplate {
    pub fn new(action: &str) -> Self {
        RequestTemplate { action: action.into(), params: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: ParamValue) -> Self {
        self.params.push((key.to_string(), TemplateValue::Lit(value)));
        self
    }

    pub fn with_session(mut self) -> Self {
        self.params.push(("sess".to_string(), TemplateValue::Session));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DeliveryMode {
    /// Strictly head-first.
    #[default]
    Ordered,
    /// Any pending template may go next.
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSpec {
    pub user: Name,
    pub account_hint: Option<AccountId>,
    pub templates: Vec<RequestTemplate>,
    pub mode: DeliveryMode,
    /// Refill the queue once every template was sent, so workflows can recur.
    pub repeat: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub name: String,
    pub clients: BTreeMap<Name, ClientSpec>,
    /// A client stops sending after its first denied request.
    pub stop_on_deny: bool,
}

impl Workload {
    pub fn request_count(&self) -> usize {
        self.clients.values().map(|c| c.templates.len()).sum()
    }

    pub fn initial_queues(&self) -> BTreeMap<Name, ClientQueue> {
        self.clients.iter().map(|(id, c)| (id.clone(), ClientQueue::full(c.templates.len()))).collect()
    }

    /// Template indices the client may send next, ascending.
    pub fn eligible(&self, client: &str, q: &ClientQueue) -> Vec<usize> {
        let Some(spec) = self.clients.get(client) else {
            return Vec::new();
        };
        if q.halted {
            return Vec::new();
        }
        match spec.mode {
            DeliveryMode::Ordered => q.pending().take(1).collect(),
            DeliveryMode::Free => q.pending().collect(),
        }
    }

    /// Concrete request for template `idx` given the client's queue state.
    pub fn instantiate(&self, client: &Name, idx: usize, q: &ClientQueue) -> RequestMsg {
        let spec = &self.clients[client];
        let t = &spec.templates[idx];
        let mut params = ParamSet::new();
        for (k, v) in &t.params {
            match v {
                TemplateValue::Lit(p) => {
                    params.insert(k.clone(), p.clone());
                }
                TemplateValue::Session => {
                    if let Some(id) = q.session {
                        params.insert(k.clone(), ParamValue::Int(id));
                    }
                }
            }
        }
        RequestMsg { client: client.clone(), user: spec.user.clone(), action: t.action.clone(), params }
    }

    /// Every action named by some template.
    pub fn actions(&self) -> BTreeSet<Name> {
        self.clients.values().flat_map(|c| c.templates.iter().map(|t| t.action.clone())).collect()
    }

    /// Keeps only the templates whose action satisfies `keep`.
    pub fn retain_actions(&self, keep: impl Fn(&str) -> bool) -> Workload {
        let mut out = self.clone();
        for c in out.clients.values_mut() {
            c.templates.retain(|t| keep(&t.action));
        }
        out
    }
}

impl fmt::Display for TemplateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateValue::Lit(v) => write!(f, "{v}"),
            TemplateValue::Session => f.write_str("$session"),
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.name.is_empty() {
            writeln!(f, "workload {}", self.name)?;
        }
        writeln!(f, "stop_on_deny {}", self.stop_on_deny)?;
        for (id, c) in &self.clients {
            write!(f, "client {id} user {}", c.user)?;
            if let Some(a) = c.account_hint {
                write!(f, " account {a}")?;
            }
            let mode = match c.mode {
                DeliveryMode::Ordered => "ordered",
                DeliveryMode::Free => "free",
            };
            write!(f, " mode {mode}")?;
            if c.repeat {
                f.write_str(" repeat")?;
            }
            writeln!(f, " {{")?;
            for t in &c.templates {
                write!(f, "  {}(", t.action)?;
                for (i, (k, v)) in t.params.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{} = {v}", key_syntax(k))?;
                }
                writeln!(f, ")")?;
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

/// Parses a workload file. `default_name` is used when the file has no
/// `workload` line.
pub fn parse_workload(default_name: &str, src: &str) -> Result<Workload, WorkloadError> {
    let mut p = WParser { cur: Cursor::new(tokenize(src)?) };
    let mut w = Workload { name: default_name.to_string(), ..Default::default() };
    while !p.cur.at_eof() {
        let pos = p.cur.pos();
        let kw = p.ident()?;
        match kw.as_str() {
            "workload" => w.name = p.ident()?,
            "stop_on_deny" => w.stop_on_deny = p.boolean()?,
            "client" => {
                let id = p.ident()?;
                let spec = p.client()?;
                if spec.templates.len() > 64 {
                    return Err(WorkloadError::Syntax { pos, msg: format!("client `{id}` has more than 64 requests") });
                }
                if w.clients.insert(id.as_str().into(), spec).is_some() {
                    return Err(WorkloadError::Syntax { pos, msg: format!("duplicate client `{id}`") });
                }
            }
            other => return Err(WorkloadError::Syntax { pos, msg: format!("unexpected `{other}`") }),
        }
    }
    Ok(w)
}

struct WParser {
    cur: Cursor,
}

impl WParser {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, WorkloadError> {
        Err(WorkloadError::Syntax { pos: self.cur.pos(), msg: msg.into() })
    }

    fn ident(&mut self) -> Result<String, WorkloadError> {
        match self.cur.peek().clone() {
            Tok::Ident(s) => {
                self.cur.next();
                Ok(s)
            }
            other => self.err(format!("expected a name, found {other}")),
        }
    }

    fn int(&mut self) -> Result<i64, WorkloadError> {
        let neg = self.cur.eat_sym("-");
        match *self.cur.peek() {
            Tok::Int(v) => {
                self.cur.next();
                Ok(if neg { -v } else { v })
            }
            ref other => self.err(format!("expected an integer, found {other}")),
        }
    }

    fn boolean(&mut self) -> Result<bool, WorkloadError> {
        match self.ident()?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => self.err(format!("expected true or false, found `{other}`")),
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), WorkloadError> {
        if self.cur.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", self.cur.peek()))
        }
    }

    fn client(&mut self) -> Result<ClientSpec, WorkloadError> {
        let mut spec = ClientSpec {
            user: "".into(),
            account_hint: None,
            templates: Vec::new(),
            mode: DeliveryMode::Ordered,
            repeat: false,
        };
        let mut has_user = false;
        while !self.cur.is_sym("{") {
            match self.ident()?.as_str() {
                "user" => {
                    spec.user = self.ident()?.as_str().into();
                    has_user = true;
                }
                "account" => spec.account_hint = Some(self.int()?),
                "mode" => {
                    spec.mode = match self.ident()?.as_str() {
                        "free" => DeliveryMode::Free,
                        "ordered" => DeliveryMode::Ordered,
                        other => return self.err(format!("unknown mode `{other}`")),
                    }
                }
                "repeat" => spec.repeat = true,
                other => return self.err(format!("unknown client option `{other}`")),
            }
        }
        if !has_user {
            return self.err("client needs a `user`");
        }
        self.expect("{")?;
        while !self.cur.eat_sym("}") {
            spec.templates.push(self.template()?);
        }
        Ok(spec)
    }

    fn template(&mut self) -> Result<RequestTemplate, WorkloadError> {
        let action = match self.cur.peek().clone() {
            Tok::Ident(s) | Tok::Str(s) => {
                self.cur.next();
                s
            }
            other => return self.err(format!("expected an action name, found {other}")),
        };
        let mut t = RequestTemplate::new(&action);
        self.expect("(")?;
        let mut seen = BTreeSet::new();
        while !self.cur.eat_sym(")") {
            if !t.params.is_empty() {
                self.expect(",")?;
            }
            let key = match self.cur.peek().clone() {
                Tok::Ident(s) | Tok::Str(s) => {
                    self.cur.next();
                    s
                }
                other => return self.err(format!("expected a parameter key, found {other}")),
            };
            if !seen.insert(key.clone()) {
                return self.err(format!("duplicate parameter `{key}`"));
            }
            self.expect("=")?;
            let v = self.value()?;
            if key == "sess" && !matches!(v, TemplateValue::Session | TemplateValue::Lit(ParamValue::Int(_))) {
                return self.err("`sess` must be an integer or $session");
            }
            t.params.push((key, v));
        }
        Ok(t)
    }

    fn value(&mut self) -> Result<TemplateValue, WorkloadError> {
        match self.cur.peek().clone() {
            Tok::Sym("$") => {
                self.cur.next();
                match self.ident()?.as_str() {
                    "session" => Ok(TemplateValue::Session),
                    other => self.err(format!("unknown placeholder `${other}`")),
                }
            }
            Tok::Str(s) => {
                self.cur.next();
                Ok(TemplateValue::Lit(ParamValue::Text(s)))
            }
            Tok::Int(_) | Tok::Sym("-") => Ok(TemplateValue::Lit(ParamValue::Int(self.int()?))),
            Tok::Ident(k) if (k == "int" || k == "text") && matches!(self.cur.peek_at(1), Tok::Sym("{")) => {
                self.cur.next();
                self.expect("{")?;
                self.expect("}")?;
                Ok(TemplateValue::Lit(if k == "int" {
                    ParamValue::int_set([])
                } else {
                    ParamValue::text_set::<String>([])
                }))
            }
            Tok::Sym("{") => {
                self.cur.next();
                let mut ints = BTreeSet::new();
                let mut texts = BTreeSet::new();
                while !self.cur.eat_sym("}") {
                    if !ints.is_empty() || !texts.is_empty() {
                        self.expect(",")?;
                    }
                    match self.cur.peek().clone() {
                        Tok::Str(s) => {
                            self.cur.next();
                            texts.insert(s);
                        }
                        _ => {
                            ints.insert(self.int()?);
                        }
                    }
                }
                match (ints.is_empty(), texts.is_empty()) {
                    (_, true) => Ok(TemplateValue::Lit(ParamValue::IntSet(ints))),
                    (true, false) => Ok(TemplateValue::Lit(ParamValue::TextSet(texts))),
                    _ => self.err("set literal mixes integers and text"),
                }
            }
            other => self.err(format!("expected a value, found {other}")),
        }
    }
}

/// Quotes a key when it is not a bare identifier.
fn key_syntax(k: &str) -> String {
    if k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !k.starts_with(|c: char| c.is_ascii_digit()) {
        k.to_string()
    } else {
        quote(k)
    }
}
