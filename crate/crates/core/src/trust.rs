//! Shared vocabulary of the pipeline: trust scores, source classes,
//! identifiers, modality tags, and the trust model.
//!
//! All types here are immutable values, safe to share and send between
//! concurrent pipeline stages. Invariants are enforced at construction:
//! a [`TrustScore`] outside `[0, 1]` or a [`SourceClass`] with a
//! mismatched origin cannot exist.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by trust-model operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrustError {
    /// Trust scores live in `[0, 1]`.
    #[error("trust score {0} outside [0, 1]")]
    OutOfRange(f64),
    /// Agent messages require a resolvable origin envelope.
    #[error("agent message from {0} has no resolvable origin envelope")]
    MissingOrigin(AgentId),
    /// Source-prior configuration failed to parse or validate.
    #[error("invalid source-prior configuration: {0}")]
    InvalidPriors(String),
    /// Origin constraints on the source class were violated.
    #[error("{0}")]
    InvalidSource(String),
}

/// Scalar trust in `[0, 1]`: 1 = fully trusted system content, 0 = fully
/// untrusted. Composes multiplicatively and thresholds cleanly.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct TrustScore(f64);

impl TrustScore {
    pub const MAX: TrustScore = TrustScore(1.0);
    pub const MIN: TrustScore = TrustScore(0.0);

    /// Construct a trust score, rejecting values outside `[0, 1]` or NaN.
    pub fn new(value: f64) -> Result<Self, TrustError> {
        if value.is_nan() || !(0.0..=1.0).contains(&value) {
            return Err(TrustError::OutOfRange(value));
        }
        Ok(Self(value))
    }

    /// Construct a trust score, clamping into `[0, 1]`. NaN clamps to 0.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return Self(0.0);
        }
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Eq for TrustScore {}

impl Ord for TrustScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Construction rejects NaN, so total order is safe.
        self.0.partial_cmp(&other.0).expect("trust scores are never NaN")
    }
}

impl fmt::Display for TrustScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

impl<'de> Deserialize<'de> for TrustScore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        TrustScore::new(v).map_err(serde::de::Error::custom)
    }
}

/// Identifier of an agent node in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of a pipeline session. Sessions are independent; provenance
/// chains and identifier uniqueness are scoped to one session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque provenance identifier. Envelopes get sequential ids within a
/// session; content units (spans, patches) derive ids from their envelope.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProvenanceId(pub String);

impl ProvenanceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
    /// Id of the span at `index` within this envelope.
    pub fn span(&self, index: usize) -> ProvenanceId {
        ProvenanceId(format!("{}.s{index}", self.0))
    }
    /// Id of the patch at grid position `(row, col)` within this envelope.
    pub fn patch(&self, row: u32, col: u32) -> ProvenanceId {
        ProvenanceId(format!("{}.p{row}x{col}", self.0))
    }
    /// Id of the text derived from metadata key slot `k` of this envelope.
    pub fn metadata(&self, k: usize) -> ProvenanceId {
        ProvenanceId(format!("{}.m{k}", self.0))
    }
    /// Id of the text derived from overlay entry `k` of this envelope.
    pub fn overlay(&self, k: usize) -> ProvenanceId {
        ProvenanceId(format!("{}.o{k}", self.0))
    }
}

impl fmt::Display for ProvenanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Content modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

/// Where a piece of content came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    System,
    User,
    Tool,
    ExternalDocument,
    AgentMessage,
    ImageMetadata,
    ImageOverlayText,
}

impl SourceKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            SourceKind::System => 0,
            SourceKind::User => 1,
            SourceKind::Tool => 2,
            SourceKind::ExternalDocument => 3,
            SourceKind::AgentMessage => 4,
            SourceKind::ImageMetadata => 5,
            SourceKind::ImageOverlayText => 6,
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceKind::System => "system",
            SourceKind::User => "user",
            SourceKind::Tool => "tool",
            SourceKind::ExternalDocument => "external_document",
            SourceKind::AgentMessage => "agent_message",
            SourceKind::ImageMetadata => "image_metadata",
            SourceKind::ImageOverlayText => "image_overlay_text",
        };
        f.write_str(s)
    }
}

/// Source class of an envelope: the kind plus, for agent messages only,
/// the agent that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SourceClassRepr", into = "SourceClassRepr")]
pub struct SourceClass {
    kind: SourceKind,
    origin_agent: Option<AgentId>,
}

#[derive(Serialize, Deserialize, Clone)]
struct SourceClassRepr {
    kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_agent: Option<AgentId>,
}

impl TryFrom<SourceClassRepr> for SourceClass {
    type Error = TrustError;
    fn try_from(r: SourceClassRepr) -> Result<Self, TrustError> {
        match r.origin_agent {
            Some(agent) => SourceClass::agent_message(agent),
            None => SourceClass::new(r.kind),
        }
    }
}

impl From<SourceClass> for SourceClassRepr {
    fn from(s: SourceClass) -> Self {
        SourceClassRepr { kind: s.kind, origin_agent: s.origin_agent }
    }
}

impl SourceClass {
    /// Build a non-agent source. Rejects `AgentMessage`, which requires an
    /// origin agent.
    pub fn new(kind: SourceKind) -> Result<Self, TrustError> {
        if kind == SourceKind::AgentMessage {
            return Err(TrustError::InvalidSource(
                "agent_message sources require an origin agent".into(),
            ));
        }
        Ok(Self { kind, origin_agent: None })
    }

    /// Build an agent-message source from the producing agent.
    pub fn agent_message(origin: AgentId) -> Result<Self, TrustError> {
        Ok(Self { kind: SourceKind::AgentMessage, origin_agent: Some(origin) })
    }

    pub fn system() -> Self {
        Self { kind: SourceKind::System, origin_agent: None }
    }
    pub fn user() -> Self {
        Self { kind: SourceKind::User, origin_agent: None }
    }
    pub fn tool() -> Self {
        Self { kind: SourceKind::Tool, origin_agent: None }
    }
    pub fn external_document() -> Self {
        Self { kind: SourceKind::ExternalDocument, origin_agent: None }
    }
    pub fn image_metadata() -> Self {
        Self { kind: SourceKind::ImageMetadata, origin_agent: None }
    }
    pub fn image_overlay_text() -> Self {
        Self { kind: SourceKind::ImageOverlayText, origin_agent: None }
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn origin_agent(&self) -> Option<&AgentId> {
        self.origin_agent.as_ref()
    }
}

impl fmt::Display for SourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.origin_agent {
            Some(a) => write!(f, "{}({a})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Detected injection intent class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionIntent {
    None,
    Override,
    RoleImpersonation,
    Exfiltration,
    ToolAbuse,
    EncodedPayload,
}

impl InjectionIntent {
    pub(crate) fn tag(self) -> u8 {
        match self {
            InjectionIntent::None => 0,
            InjectionIntent::Override => 1,
            InjectionIntent::RoleImpersonation => 2,
            InjectionIntent::Exfiltration => 3,
            InjectionIntent::ToolAbuse => 4,
            InjectionIntent::EncodedPayload => 5,
        }
    }
}

impl fmt::Display for InjectionIntent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InjectionIntent::None => "none",
            InjectionIntent::Override => "override",
            InjectionIntent::RoleImpersonation => "role_impersonation",
            InjectionIntent::Exfiltration => "exfiltration",
            InjectionIntent::ToolAbuse => "tool_abuse",
            InjectionIntent::EncodedPayload => "encoded_payload",
        };
        f.write_str(s)
    }
}

/// Classifier verdict for one content unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionVerdict {
    pub intent: InjectionIntent,
    /// Detection confidence in `[0, 1]`. Zero iff `intent` is `None` in
    /// the reference classifier.
    pub confidence: f64,
}

impl InjectionVerdict {
    pub fn none() -> Self {
        Self { intent: InjectionIntent::None, confidence: 0.0 }
    }

    pub fn new(intent: InjectionIntent, confidence: f64) -> Self {
        Self { intent, confidence: confidence.clamp(0.0, 1.0) }
    }

    pub fn is_clean(&self) -> bool {
        self.intent == InjectionIntent::None
    }
}

/// Configured trust priors per source class. Priors are configuration,
/// not code; see `data/source_priors.toml` for the shipped defaults and
/// the file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePriors {
    pub system: f64,
    pub user: f64,
    pub tool: f64,
    pub external_document: f64,
    pub image_metadata: f64,
    pub image_overlay_text: f64,
    /// Per-hop decay applied to agent-message trust: the prior for a
    /// message from agent A is `decay x trust(origin envelope)`.
    pub agent_message_decay: f64,
}

const DEFAULT_PRIORS: &str = include_str!("../data/source_priors.toml");

impl Default for SourcePriors {
    fn default() -> Self {
        Self::from_toml(DEFAULT_PRIORS).expect("shipped source priors are valid")
    }
}

impl SourcePriors {
    /// Parse a source-prior configuration file.
    pub fn from_toml(text: &str) -> Result<Self, TrustError> {
        #[derive(Deserialize)]
        struct File {
            priors: Table,
            agent_message: Decay,
        }
        #[derive(Deserialize)]
        struct Table {
            system: f64,
            user: f64,
            tool: f64,
            external_document: f64,
            image_metadata: f64,
            image_overlay_text: f64,
        }
        #[derive(Deserialize)]
        struct Decay {
            decay: f64,
        }

        let file: File =
            toml::from_str(text).map_err(|e| TrustError::InvalidPriors(e.to_string()))?;
        let priors = Self {
            system: file.priors.system,
            user: file.priors.user,
            tool: file.priors.tool,
            external_document: file.priors.external_document,
            image_metadata: file.priors.image_metadata,
            image_overlay_text: file.priors.image_overlay_text,
            agent_message_decay: file.agent_message.decay,
        };
        priors.validate()?;
        Ok(priors)
    }

    fn validate(&self) -> Result<(), TrustError> {
        for (name, v) in [
            ("system", self.system),
            ("user", self.user),
            ("tool", self.tool),
            ("external_document", self.external_document),
            ("image_metadata", self.image_metadata),
            ("image_overlay_text", self.image_overlay_text),
            ("agent_message.decay", self.agent_message_decay),
        ] {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(TrustError::InvalidPriors(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Prior trust for a source class. Agent messages decay the trust of
    /// their origin envelope; a missing origin is an error, never a
    /// default.
    pub fn base_trust(
        &self,
        source: &SourceClass,
        origin_trust: Option<TrustScore>,
    ) -> Result<TrustScore, TrustError> {
        let v = match source.kind() {
            SourceKind::System => self.system,
            SourceKind::User => self.user,
            SourceKind::Tool => self.tool,
            SourceKind::ExternalDocument => self.external_document,
            SourceKind::ImageMetadata => self.image_metadata,
            SourceKind::ImageOverlayText => self.image_overlay_text,
            SourceKind::AgentMessage => {
                let origin = origin_trust.ok_or_else(|| {
                    TrustError::MissingOrigin(
                        source.origin_agent().cloned().unwrap_or_else(|| AgentId::new("?")),
                    )
                })?;
                self.agent_message_decay * origin.value()
            }
        };
        Ok(TrustScore::clamped(v))
    }

    /// The trust model: prior trust scaled down by detection confidence,
    /// `s = base_trust(source) x (1 - confidence)`, clamped to `[0, 1]`.
    pub fn trust_model(
        &self,
        source: &SourceClass,
        origin_trust: Option<TrustScore>,
        verdict: &InjectionVerdict,
    ) -> Result<TrustScore, TrustError> {
        let base = self.base_trust(source, origin_trust)?;
        Ok(TrustScore::clamped(base.value() * (1.0 - verdict.confidence)))
    }
}

/// Payload of a sanitized envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Sanitized text spans.
    Text(crate::text::SanitizedText),
    /// Sanitized image: redacted container plus the text extracted and
    /// sanitized from its overlay and metadata.
    Image(crate::image::SanitizedImagePayload),
}

/// Any content moving between agents, tools, and models. An envelope with
/// `sanitized() == false` exists only between ingress and the sanitizer;
/// the graph refuses to route it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    provenance_id: ProvenanceId,
    session_id: SessionId,
    source: SourceClass,
    modality: Modality,
    trust: TrustScore,
    payload: Payload,
    sanitized: bool,
}

impl MessageEnvelope {
    /// Assemble a sanitized envelope. Used by the sanitizers; `trust` must
    /// already equal the minimum span/patch trust of the payload.
    pub(crate) fn sanitized(
        provenance_id: ProvenanceId,
        session_id: SessionId,
        source: SourceClass,
        modality: Modality,
        trust: TrustScore,
        payload: Payload,
    ) -> Self {
        Self { provenance_id, session_id, source, modality, trust, payload, sanitized: true }
    }

    /// Forge an unsanitized envelope. Only useful for proving that the
    /// graph refuses to route one; nothing in the pipeline accepts it.
    pub fn forged_unsanitized(
        provenance_id: ProvenanceId,
        session_id: SessionId,
        source: SourceClass,
        modality: Modality,
        trust: TrustScore,
        payload: Payload,
    ) -> Self {
        Self { provenance_id, session_id, source, modality, trust, payload, sanitized: false }
    }

    pub fn provenance_id(&self) -> &ProvenanceId {
        &self.provenance_id
    }
    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }
    pub fn source(&self) -> &SourceClass {
        &self.source
    }
    pub fn modality(&self) -> Modality {
        self.modality
    }
    pub fn trust(&self) -> TrustScore {
        self.trust
    }
    pub fn payload(&self) -> &Payload {
        &self.payload
    }
    pub fn is_sanitized(&self) -> bool {
        self.sanitized
    }
}
