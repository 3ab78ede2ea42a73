//! Security-policy metamodel for workflow systems and an explicit-state
//! checker for high-level rules over request interleavings.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: parameter sets, messages and the canonical [`SystemState`].
//! - [`policy`]: the policy language (parser, type checker, evaluator).
//! - [`engine`]: processing one request against a state.
//! - [`workload`]: client request scripts driving exploration.
//! - [`statespace`]: reachability graph construction and graph queries.
//! - [`rules`]: rule notation and path-based rule checking.
//! - [`subdivision`]: per-task independence and workload projection.
//! - [`bank`]: the online-banking example policy, rules and workloads.

pub mod bank;
pub mod engine;
pub mod lex;
pub mod model;
pub mod policy;
pub mod rules;
pub mod statespace;
pub mod subdivision;
pub mod workload;

pub use engine::{Engine, EngineError};
pub use model::{
    AccountId, Binding, Clearance, ClientQueue, Decision, Name, ParamSet, ParamValue, RequestMsg, ResponseMsg,
    SessionId, SessionRec, SystemState,
};
pub use policy::{parse_policy, PolicySpec};
pub use rules::{Rule, Violation};
pub use statespace::{explore, ExploreConfig, StateGraph};
pub use workload::{parse_workload, Workload};
