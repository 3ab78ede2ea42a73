//! Domain value types shared by every other module: parameter sets, clearances,
//! request/response messages, sessions and the canonical system state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Interned-ish name for users, tasks, actions and clients.
pub type Name = Arc<str>;
pub type AccountId = i64;
pub type SessionId = i64;

/// The four value variants a parameter may carry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamValue {
    Int(i64),
    Text(String),
    IntSet(BTreeSet<i64>),
    TextSet(BTreeSet<String>),
}

/// Discriminant of a [`ParamValue`], used for type checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueKind {
    Int,
    Text,
    IntSet,
    TextSet,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Int => "int",
            ValueKind::Text => "text",
            ValueKind::IntSet => "int-set",
            ValueKind::TextSet => "text-set",
        })
    }
}

impl ParamValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            ParamValue::Int(_) => ValueKind::Int,
            ParamValue::Text(_) => ValueKind::Text,
            ParamValue::IntSet(_) => ValueKind::IntSet,
            ParamValue::TextSet(_) => ValueKind::TextSet,
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        ParamValue::Text(s.into())
    }

    pub fn int_set(items: impl IntoIterator<Item = i64>) -> Self {
        ParamValue::IntSet(items.into_iter().collect())
    }

    pub fn text_set<S: Into<String>>(items: impl IntoIterator<Item = S>) -> Self {
        ParamValue::TextSet(items.into_iter().map(Into::into).collect())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

/// Literal syntax shared by the policy language, workload files and reports.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Text(s) => write!(f, "{}", quote(s)),
            ParamValue::IntSet(set) => {
                if set.is_empty() {
                    return f.write_str("int{}");
                }
                let items: Vec<String> = set.iter().map(|v| v.to_string()).collect();
                write!(f, "{{{}}}", items.join(", "))
            }
            ParamValue::TextSet(set) => {
                if set.is_empty() {
                    return f.write_str("text{}");
                }
                let items: Vec<String> = set.iter().map(|s| quote(s)).collect();
                write!(f, "{{{}}}", items.join(", "))
            }
        }
    }
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parameter {key:?} holds a {found} value, expected {expected}")]
pub struct TypeMismatch {
    pub key: String,
    pub expected: ValueKind,
    pub found: ValueKind,
}

/// A key → value attribute set attached to requests, sessions and
/// (account, task) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamValue>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Value stored under `key`, or `default` when absent. The stored
    /// variant must match the default's variant.
    pub fn get_or(&self, key: &str, default: &ParamValue) -> Result<ParamValue, TypeMismatch> {
        match self.entries.get(key) {
            None => Ok(default.clone()),
            Some(v) if v.kind() == default.kind() => Ok(v.clone()),
            Some(v) => Err(TypeMismatch { key: key.to_string(), expected: default.kind(), found: v.kind() }),
        }
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: ParamValue) -> Option<ParamValue> {
        self.entries.insert(key.into(), value)
    }

    pub fn remove(&mut self, key: &str) -> Option<ParamValue> {
        self.entries.remove(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn with(mut self, key: impl Into<String>, value: ParamValue) -> Self {
        self.insert(key, value);
        self
    }

    /// Keys of `updates` overwrite `self`; other keys are kept.
    pub fn merge(&self, updates: &ParamSet) -> ParamSet {
        let mut out = self.clone();
        out.merge_in_place(updates);
        out
    }

    pub fn merge_in_place(&mut self, updates: &ParamSet) {
        for (k, v) in &updates.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<K: Into<String>> FromIterator<(K, ParamValue)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (K, ParamValue)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }
}

impl fmt::Display for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str("}")
    }
}

/// Free-standing form of [`ParamSet::get_or`].
pub fn param_get(p: &ParamSet, key: &str, default: &ParamValue) -> Result<ParamValue, TypeMismatch> {
    p.get_or(key, default)
}

/// Free-standing form of [`ParamSet::merge`].
pub fn param_merge(base: &ParamSet, updates: &ParamSet) -> ParamSet {
    base.merge(updates)
}

/// Authority level of a (user, account, task) triple or the floor of an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Clearance(pub i64);

impl fmt::Display for Clearance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Decision {
    Authorized,
    Denied,
    InvalidSession,
}

impl Decision {
    pub fn short(self) -> &'static str {
        match self {
            Decision::Authorized => "A",
            Decision::Denied => "D",
            Decision::InvalidSession => "I",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Authorized => "authorized",
            Decision::Denied => "denied",
            Decision::InvalidSession => "invalid-session",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestMsg {
    pub client: Name,
    pub user: Name,
    pub action: Name,
    pub params: ParamSet,
}

impl RequestMsg {
    pub fn new(client: &str, user: &str, action: &str, params: ParamSet) -> Self {
        RequestMsg { client: client.into(), user: user.into(), action: action.into(), params }
    }

    /// The `sess` parameter, if present and integer-valued.
    pub fn session_ref(&self) -> Option<SessionId> {
        self.params.get("sess").and_then(ParamValue::as_int)
    }
}

/// The (user, account) pair a request was processed for.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Binding {
    pub user: Name,
    pub account: AccountId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResponseMsg {
    pub request: RequestMsg,
    pub decision: Decision,
    /// `sess` plus the session's parameters after processing, when a session
    /// remains bound to the request.
    pub payload: ParamSet,
    /// Absent for invalid-session requests and for new-session requests
    /// whose claimed user/account are not declared.
    pub binding: Option<Binding>,
}

impl ResponseMsg {
    /// Event attribute lookup: request parameters first, then the payload.
    pub fn attribute(&self, key: &str) -> Option<&ParamValue> {
        self.request.params.get(key).or_else(|| self.payload.get(key))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionRec {
    pub id: SessionId,
    pub user: Name,
    pub account: AccountId,
    pub params: ParamSet,
}

/// Per-client delivery state: which workload items are still pending, the
/// session the client currently holds, and whether it stopped after a denial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClientQueue {
    /// Bit `i` set ⇔ request template `i` not yet sent.
    pub remaining: u64,
    pub session: Option<SessionId>,
    pub halted: bool,
}

impl ClientQueue {
    pub fn full(len: usize) -> Self {
        ClientQueue { remaining: full_mask(len), session: None, halted: false }
    }

    pub fn pending(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(move |i| self.remaining & (1u64 << i) != 0)
    }

    pub fn is_drained(&self) -> bool {
        self.remaining == 0
    }
}

pub(crate) fn full_mask(len: usize) -> u64 {
    assert!(len <= 64, "at most 64 request templates per client");
    if len == 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

/// Complete snapshot of the workflow system.
///
/// Account-task parameter sets are reference counted so successor states
/// share every set a step leaves untouched.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SystemState {
    pub open_sessions: BTreeMap<SessionId, SessionRec>,
    pub next_session_id: SessionId,
    pub account_task_params: BTreeMap<(AccountId, Name), Arc<ParamSet>>,
    pub clearances: BTreeMap<(Name, AccountId, Name), Clearance>,
    pub client_queues: BTreeMap<Name, ClientQueue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateInvariantError {
    #[error("next_session_id {next} is not above open session {open}")]
    SessionCounter { next: SessionId, open: SessionId },
    #[error("session record keyed {key} carries id {id}")]
    SessionKey { key: SessionId, id: SessionId },
}

static EMPTY_PARAMS: std::sync::OnceLock<ParamSet> = std::sync::OnceLock::new();

impl SystemState {
    pub fn task_params(&self, account: AccountId, task: &str) -> &ParamSet {
        self.account_task_params
            .get(&(account, Name::from(task)))
            .map(|p| p.as_ref())
            .unwrap_or_else(|| EMPTY_PARAMS.get_or_init(ParamSet::new))
    }

    pub fn clearance(&self, user: &str, account: AccountId, task: &str) -> Option<Clearance> {
        self.clearances.get(&(Name::from(user), account, Name::from(task))).copied()
    }

    /// Smallest id strictly above every open session.
    pub fn renumber_session_counter(&mut self) {
        self.next_session_id = self.open_sessions.keys().next_back().map_or(1, |max| max + 1);
    }

    pub fn check_invariants(&self) -> Result<(), StateInvariantError> {
        for (key, rec) in &self.open_sessions {
            if *key != rec.id {
                return Err(StateInvariantError::SessionKey { key: *key, id: rec.id });
            }
            if rec.id >= self.next_session_id {
                return Err(StateInvariantError::SessionCounter { next: self.next_session_id, open: rec.id });
            }
        }
        Ok(())
    }

    /// Equality ignoring client queues: the part of the state the policy acts on.
    pub fn same_model(&self, other: &SystemState) -> bool {
        self.open_sessions == other.open_sessions
            && self.next_session_id == other.next_session_id
            && self.account_task_params == other.account_task_params
            && self.clearances == other.clearances
    }

    /// Deterministic byte encoding: every map and set is emitted in sorted order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(256));
        w.0.extend_from_slice(MAGIC);
        w.len(self.open_sessions.len());
        for rec in self.open_sessions.values() {
            w.i64(rec.id);
            w.str(&rec.user);
            w.i64(rec.account);
            w.params(&rec.params);
        }
        w.i64(self.next_session_id);
        w.len(self.account_task_params.len());
        for ((acc, task), params) in &self.account_task_params {
            w.i64(*acc);
            w.str(task);
            w.params(params);
        }
        w.len(self.clearances.len());
        for ((user, acc, task), cl) in &self.clearances {
            w.str(user);
            w.i64(*acc);
            w.str(task);
            w.i64(cl.0);
        }
        w.len(self.client_queues.len());
        for (client, q) in &self.client_queues {
            w.str(client);
            w.0.extend_from_slice(&q.remaining.to_le_bytes());
            match q.session {
                None => w.0.push(0),
                Some(id) => {
                    w.0.push(1);
                    w.i64(id);
                }
            }
            w.0.push(q.halted as u8);
        }
        w.0
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<SystemState, DecodeError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let mut state = SystemState::default();
        for _ in 0..r.len()? {
            let id = r.i64()?;
            let user: Name = r.str()?.into();
            let account = r.i64()?;
            let params = r.params()?;
            state.open_sessions.insert(id, SessionRec { id, user, account, params });
        }
        state.next_session_id = r.i64()?;
        for _ in 0..r.len()? {
            let acc = r.i64()?;
            let task: Name = r.str()?.into();
            let params = r.params()?;
            state.account_task_params.insert((acc, task), Arc::new(params));
        }
        for _ in 0..r.len()? {
            let user: Name = r.str()?.into();
            let acc = r.i64()?;
            let task: Name = r.str()?.into();
            let cl = Clearance(r.i64()?);
            state.clearances.insert((user, acc, task), cl);
        }
        for _ in 0..r.len()? {
            let client: Name = r.str()?.into();
            let remaining = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let session = match r.byte()? {
                0 => None,
                1 => Some(r.i64()?),
                t => return Err(DecodeError::BadTag(t)),
            };
            let halted = match r.byte()? {
                0 => false,
                1 => true,
                t => return Err(DecodeError::BadTag(t)),
            };
            state.client_queues.insert(client, ClientQueue { remaining, session, halted });
        }
        if r.pos != bytes.len() {
            return Err(DecodeError::Trailing(bytes.len() - r.pos));
        }
        Ok(state)
    }
}

const MAGIC: &[u8] = b"WFS1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("missing state header")]
    BadMagic,
    #[error("unexpected end of input")]
    Truncated,
    #[error("unknown tag {0}")]
    BadTag(u8),
    #[error("invalid utf-8 in string")]
    Utf8,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

struct Writer(Vec<u8>);

impl Writer {
    fn len(&mut self, n: usize) {
        self.0.extend_from_slice(&(n as u32).to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.len(p.len());
        for (k, v) in p.iter() {
            self.str(k);
            self.value(v);
        }
    }
    fn value(&mut self, v: &ParamValue) {
        match v {
            ParamValue::Int(i) => {
                self.0.push(0);
                self.i64(*i);
            }
            ParamValue::Text(s) => {
                self.0.push(1);
                self.str(s);
            }
            ParamValue::IntSet(set) => {
                self.0.push(2);
                self.len(set.len());
                for i in set {
                    self.i64(*i);
                }
            }
            ParamValue::TextSet(set) => {
                self.0.push(3);
                self.len(set.len());
                for s in set {
                    self.str(s);
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn byte(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn len(&mut self) -> Result<usize, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<&'a str, DecodeError> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| DecodeError::Utf8)
    }
    fn params(&mut self) -> Result<ParamSet, DecodeError> {
        let mut p = ParamSet::new();
        for _ in 0..self.len()? {
            let k = self.str()?.to_string();
            let v = self.value()?;
            p.insert(k, v);
        }
        Ok(p)
    }
    fn value(&mut self) -> Result<ParamValue, DecodeError> {
        Ok(match self.byte()? {
            0 => ParamValue::Int(self.i64()?),
            1 => ParamValue::Text(self.str()?.to_string()),
            2 => {
                let n = self.len()?;
                let mut set = BTreeSet::new();
                for _ in 0..n {
                    set.insert(self.i64()?);
                }
                ParamValue::IntSet(set)
            }
            3 => {
                let n = self.len()?;
                let mut set = BTreeSet::new();
                for _ in 0..n {
                    set.insert(self.str()?.to_string());
                }
                ParamValue::TextSet(set)
            }
            t => return Err(DecodeError::BadTag(t)),
        })
    }
}
