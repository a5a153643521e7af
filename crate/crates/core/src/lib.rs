//! Zero-trust sanitization pipeline and provenance ledger for multi-agent
//! LLM workflows.
//!
//! Every input (user text, tool output, external document, image,
//! inter-agent message) is sanitized and trust-scored before it enters the
//! agent graph, every assembled prompt is masked by trust before model
//! inference, and every model output is validated by influence attribution
//! before it may propagate or trigger tool actions.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`trust`] — trust scores, source classes, envelopes, the trust model
//! - [`rulepack`] — versioned pattern pack shared by all detection stages
//! - [`normalize`] — obfuscation-resistant text normalization
//! - [`ledger`] — hash-chained, append-only provenance store
//! - [`text`] — span-level text sanitizer (agent A_t)
//! - [`image`] — patch-level visual sanitizer (agent A_v)
//! - [`gate`] — pre-inference trust masking and policy enforcement
//! - [`model`] — model adapter with a deterministic mock backend
//! - [`validator`] — output validation: policy, secrets, attribution
//! - [`graph`] — agent graph executor with gated routing and tool checks
//! - [`harness`] — corpus generator, runner, and metrics reports

pub mod config;
pub mod gate;
pub mod graph;
pub mod harness;
pub mod image;
pub mod ledger;
pub mod model;
pub mod normalize;
pub mod rulepack;
pub mod text;
pub mod trust;
pub mod validator;

pub use config::{DefenseMode, Thresholds};
pub use trust::{
    AgentId, InjectionIntent, InjectionVerdict, MessageEnvelope, Modality, ProvenanceId,
    SessionId, SourceClass, SourceKind, SourcePriors, TrustScore,
};
