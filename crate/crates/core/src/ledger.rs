//! Hash-chained, append-only provenance store.
//!
//! Every span/patch trust decision, gate event, model call, validation
//! verdict, hop, and attribution edge is recorded as a [`ProvenanceEntry`]
//! in a per-session chain. Entry `n` carries the SHA-256 digest of entry
//! `n - 1`'s canonical serialization; entry 0 links to the all-zero
//! digest. The store keeps a running head digest per session so tampering
//! with any entry, including the last, is detectable.
//!
//! Content is never stored verbatim: entries carry a digest of the
//! original content unit, never the content itself.
//!
//! The canonical, length-prefixed encoding used for hashing is documented
//! in `docs/formats.md` and must stay bit-exact across platforms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trust::{
    AgentId, InjectionIntent, ProvenanceId, SessionId, SourceClass, TrustScore,
};

/// 256-bit digest used for chain links and content hashes.
pub type Hash32 = [u8; 32];

pub const ZERO_HASH: Hash32 = [0u8; 32];

/// SHA-256 of arbitrary content bytes. Used for `content_hash` fields.
pub fn content_digest(bytes: &[u8]) -> Hash32 {
    Sha256::digest(bytes).into()
}

/// Errors raised by ledger operations. The pipeline fails closed on
/// `Unavailable`: no append, no routing.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("ledger unavailable: {0}")]
    Unavailable(String),
    #[error("dangling provenance reference {0}")]
    DanglingReference(ProvenanceId),
    #[error("ledger export parse error: {0}")]
    Parse(String),
}

/// What happened to a text span during sanitization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTag {
    Kept,
    Rewritten,
    Removed,
}

impl ActionTag {
    fn tag(self) -> u8 {
        match self {
            ActionTag::Kept => 0,
            ActionTag::Rewritten => 1,
            ActionTag::Removed => 2,
        }
    }
}

/// Which backend served a model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    External,
}

impl BackendKind {
    fn tag(self) -> u8 {
        match self {
            BackendKind::Mock => 0,
            BackendKind::External => 1,
        }
    }
}

/// Validator decision recorded for an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionTag {
    Approved,
    Regenerate,
    Rejected,
}

impl DecisionTag {
    fn tag(self) -> u8 {
        match self {
            DecisionTag::Approved => 0,
            DecisionTag::Regenerate => 1,
            DecisionTag::Rejected => 2,
        }
    }
}

/// Classification of a routed envelope, used by the gate-totality audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopClass {
    /// A validated model output routed onward.
    ModelOutput,
    /// A relay forwarding of already-sanitized content, no inference.
    Relay,
    /// An explicit error envelope (rejected or failed step).
    SystemError,
}

impl HopClass {
    fn tag(self) -> u8 {
        match self {
            HopClass::ModelOutput => 0,
            HopClass::Relay => 1,
            HopClass::SystemError => 2,
        }
    }
}

mod hexhash {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &super::Hash32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<super::Hash32, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        bytes.try_into().map_err(|_| serde::de::Error::custom("expected 32-byte hex digest"))
    }
}

/// The recorded fact. Span and patch entries are the per-unit trust
/// records; the remaining kinds are pipeline events that make runs
/// auditable end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryBody {
    Span {
        unit: ProvenanceId,
        envelope: ProvenanceId,
        source: SourceClass,
        trust: TrustScore,
        index: u32,
        #[serde(with = "hexhash")]
        content_hash: Hash32,
        intent: InjectionIntent,
        confidence: f64,
        action: ActionTag,
    },
    Patch {
        unit: ProvenanceId,
        envelope: ProvenanceId,
        source: SourceClass,
        trust: TrustScore,
        row: u32,
        col: u32,
        #[serde(with = "hexhash")]
        content_hash: Hash32,
        anomaly: f64,
        redacted: bool,
    },
    /// Influence edges from an attribution event: `weights` maps source
    /// units to their share of the output. Stored trust-free.
    Attribution {
        output: ProvenanceId,
        weights: Vec<(ProvenanceId, f64)>,
    },
    /// A pre-inference gate event: the emitted span units and their mask
    /// weights (zero-weight units were excised from the prompt).
    Gate {
        node: AgentId,
        step: u64,
        attempt: u32,
        theta_low: f64,
        theta_block: f64,
        units: Vec<ProvenanceId>,
        weights: Vec<f64>,
    },
    ModelCall {
        node: AgentId,
        step: u64,
        attempt: u32,
        backend: BackendKind,
        output: ProvenanceId,
    },
    Validation {
        node: AgentId,
        step: u64,
        attempt: u32,
        output: ProvenanceId,
        decision: DecisionTag,
        leakage: f64,
        violations: u32,
    },
    /// An envelope delivered from one agent node to another.
    Hop {
        envelope: ProvenanceId,
        from: AgentId,
        to: AgentId,
        trust: TrustScore,
        class: HopClass,
        origin_output: Option<ProvenanceId>,
    },
    /// An envelope admitted at the graph boundary.
    Ingress {
        envelope: ProvenanceId,
        target: AgentId,
        source: SourceClass,
        trust: TrustScore,
    },
    ToolDecision {
        node: AgentId,
        tool: String,
        allowed: bool,
        reason: String,
        min_trust: f64,
    },
}

/// One ledger record: chain position plus the recorded fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub session: SessionId,
    pub entry_id: u64,
    #[serde(with = "hexhash")]
    pub prev_hash: Hash32,
    #[serde(flatten)]
    pub body: EntryBody,
}

// --- canonical encoding -------------------------------------------------

struct Canon(Vec<u8>);

impl Canon {
    fn new() -> Self {
        Self(Vec::with_capacity(256))
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.0.push(v as u8);
    }
    fn bytes32(&mut self, v: &Hash32) {
        self.0.extend_from_slice(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn source(&mut self, s: &SourceClass) {
        self.u8(s.kind().tag());
        match s.origin_agent() {
            Some(a) => {
                self.u8(1);
                self.str(a.as_str());
            }
            None => self.u8(0),
        }
    }
}

fn body_kind_tag(body: &EntryBody) -> u8 {
    match body {
        EntryBody::Span { .. } => 1,
        EntryBody::Patch { .. } => 2,
        EntryBody::Attribution { .. } => 3,
        EntryBody::Gate { .. } => 4,
        EntryBody::ModelCall { .. } => 5,
        EntryBody::Validation { .. } => 6,
        EntryBody::Hop { .. } => 7,
        EntryBody::Ingress { .. } => 8,
        EntryBody::ToolDecision { .. } => 9,
    }
}

/// Canonical serialization of an entry: the exact bytes that are hashed.
pub fn canonical_bytes(entry: &ProvenanceEntry) -> Vec<u8> {
    let mut c = Canon::new();
    c.str(entry.session.as_str());
    c.u64(entry.entry_id);
    c.bytes32(&entry.prev_hash);
    c.u8(body_kind_tag(&entry.body));
    match &entry.body {
        EntryBody::Span {
            unit,
            envelope,
            source,
            trust,
            index,
            content_hash,
            intent,
            confidence,
            action,
        } => {
            c.str(unit.as_str());
            c.str(envelope.as_str());
            c.source(source);
            c.f64(trust.value());
            c.u32(*index);
            c.bytes32(content_hash);
            c.u8(intent.tag());
            c.f64(*confidence);
            c.u8(action.tag());
        }
        EntryBody::Patch {
            unit,
            envelope,
            source,
            trust,
            row,
            col,
            content_hash,
            anomaly,
            redacted,
        } => {
            c.str(unit.as_str());
            c.str(envelope.as_str());
            c.source(source);
            c.f64(trust.value());
            c.u32(*row);
            c.u32(*col);
            c.bytes32(content_hash);
            c.f64(*anomaly);
            c.bool(*redacted);
        }
        EntryBody::Attribution { output, weights } => {
            c.str(output.as_str());
            c.u32(weights.len() as u32);
            for (id, w) in weights {
                c.str(id.as_str());
                c.f64(*w);
            }
        }
        EntryBody::Gate { node, step, attempt, theta_low, theta_block, units, weights } => {
            c.str(node.as_str());
            c.u64(*step);
            c.u32(*attempt);
            c.f64(*theta_low);
            c.f64(*theta_block);
            c.u32(units.len() as u32);
            for u in units {
                c.str(u.as_str());
            }
            c.u32(weights.len() as u32);
            for w in weights {
                c.f64(*w);
            }
        }
        EntryBody::ModelCall { node, step, attempt, backend, output } => {
            c.str(node.as_str());
            c.u64(*step);
            c.u32(*attempt);
            c.u8(backend.tag());
            c.str(output.as_str());
        }
        EntryBody::Validation { node, step, attempt, output, decision, leakage, violations } => {
            c.str(node.as_str());
            c.u64(*step);
            c.u32(*attempt);
            c.str(output.as_str());
            c.u8(decision.tag());
            c.f64(*leakage);
            c.u32(*violations);
        }
        EntryBody::Hop { envelope, from, to, trust, class, origin_output } => {
            c.str(envelope.as_str());
            c.str(from.as_str());
            c.str(to.as_str());
            c.f64(trust.value());
            c.u8(class.tag());
            match origin_output {
                Some(o) => {
                    c.u8(1);
                    c.str(o.as_str());
                }
                None => c.u8(0),
            }
        }
        EntryBody::Ingress { envelope, target, source, trust } => {
            c.str(envelope.as_str());
            c.str(target.as_str());
            c.source(source);
            c.f64(trust.value());
        }
        EntryBody::ToolDecision { node, tool, allowed, reason, min_trust } => {
            c.str(node.as_str());
            c.str(tool);
            c.bool(*allowed);
            c.str(reason);
            c.f64(*min_trust);
        }
    }
    c.0
}

/// Digest of an entry's canonical serialization.
pub fn entry_digest(entry: &ProvenanceEntry) -> Hash32 {
    Sha256::digest(canonical_bytes(entry)).into()
}

// --- store --------------------------------------------------------------

/// Pluggable ledger backend. Implementations must serialize appends per
/// session to preserve the chain; reads are snapshot-isolated.
pub trait LedgerStore: Send + Sync {
    /// Append a body, assigning the next entry id and linking the chain.
    fn append(&self, session: &SessionId, body: EntryBody) -> Result<u64, LedgerError>;
    /// Snapshot of all entries of a session, in chain order.
    fn snapshot(&self, session: &SessionId) -> Result<Vec<ProvenanceEntry>, LedgerError>;
    /// Digest of the last entry, or `None` for an empty/unknown session.
    fn head(&self, session: &SessionId) -> Result<Option<Hash32>, LedgerError>;
    /// All session ids with at least one entry, sorted.
    fn sessions(&self) -> Result<Vec<SessionId>, LedgerError>;
}

struct SessionChain {
    entries: Vec<ProvenanceEntry>,
    head: Hash32,
}

/// Embedded in-process store: the default backend.
#[derive(Default)]
pub struct MemoryLedgerStore {
    inner: Mutex<HashMap<SessionId, SessionChain>>,
}

impl MemoryLedgerStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test support: corrupt one stored entry in place, simulating a
    /// single-byte tamper of the backing storage. Returns false when the
    /// session has no entries. Chain verification must detect every such
    /// mutation.
    pub fn tamper_entry(&self, session: &SessionId, pick: u64, variant: u8) -> bool {
        let mut inner = self.inner.lock().expect("ledger store poisoned");
        let Some(chain) = inner.get_mut(session) else {
            return false;
        };
        if chain.entries.is_empty() {
            return false;
        }
        let idx = (pick % chain.entries.len() as u64) as usize;
        let entry = &mut chain.entries[idx];
        match variant % 4 {
            0 => entry.prev_hash[(variant as usize / 4) % 32] ^= 0x01,
            1 => entry.entry_id ^= 1,
            2 => {
                let mut owned = entry.session.as_str().to_owned();
                owned.push('x');
                entry.session = SessionId::new(owned);
            }
            _ => match &mut entry.body {
                EntryBody::Span { trust, .. }
                | EntryBody::Patch { trust, .. }
                | EntryBody::Ingress { trust, .. }
                | EntryBody::Hop { trust, .. } => {
                    let flipped = f64::from_bits(trust.value().to_bits() ^ 0x1);
                    *trust = TrustScore::clamped(flipped);
                }
                EntryBody::Attribution { output, .. }
                | EntryBody::ModelCall { output, .. }
                | EntryBody::Validation { output, .. } => {
                    let mut owned = output.as_str().to_owned();
                    owned.push('x');
                    *output = ProvenanceId::new(owned);
                }
                EntryBody::Gate { theta_low, .. } => {
                    *theta_low = f64::from_bits(theta_low.to_bits() ^ 0x1);
                }
                EntryBody::ToolDecision { min_trust, .. } => {
                    *min_trust = f64::from_bits(min_trust.to_bits() ^ 0x1);
                }
            },
        }
        true
    }
}

impl LedgerStore for MemoryLedgerStore {
    fn append(&self, session: &SessionId, body: EntryBody) -> Result<u64, LedgerError> {
        let mut inner = self
            .inner
            .lock()
            .map_err(|_| LedgerError::Unavailable("store lock poisoned".into()))?;
        let chain = inner
            .entry(session.clone())
            .or_insert_with(|| SessionChain { entries: Vec::new(), head: ZERO_HASH });
        let entry = ProvenanceEntry {
            session: session.clone(),
            entry_id: chain.entries.len() as u64,
            prev_hash: if chain.entries.is_empty() { ZERO_HASH } else { chain.head },
            body,
        };
        let id = entry.entry_id;
        chain.head = entry_digest(&entry);
        chain.entries.push(entry);
        Ok(id)
    }

    fn snapshot(&self, session: &SessionId) -> Result<Vec<ProvenanceEntry>, LedgerError> {
        let inner = self
            .inner
            .lock()
            .map_err(|_| LedgerError::Unavailable("store lock poisoned".into()))?;
        Ok(inner.get(session).map(|c| c.entries.clone()).unwrap_or_default())
    }

    fn head(&self, session: &SessionId) -> Result<Option<Hash32>, LedgerError> {
        let inner = self
            .inner
            .lock()
            .map_err(|_| LedgerError::Unavailable("store lock poisoned".into()))?;
        Ok(inner.get(session).filter(|c| !c.entries.is_empty()).map(|c| c.head))
    }

    fn sessions(&self) -> Result<Vec<SessionId>, LedgerError> {
        let inner = self
            .inner
            .lock()
            .map_err(|_| LedgerError::Unavailable("store lock poisoned".into()))?;
        let mut ids: Vec<SessionId> = inner.keys().cloned().collect();
        ids.sort();
        Ok(ids)
    }
}

/// Fault-injection wrapper: fails every append once tripped. Used to
/// drill the fail-closed paths.
pub struct FaultInjectingStore<S> {
    inner: S,
    fail_appends: std::sync::atomic::AtomicBool,
}

impl<S: LedgerStore> FaultInjectingStore<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, fail_appends: std::sync::atomic::AtomicBool::new(false) }
    }

    /// Start failing all subsequent appends.
    pub fn trip(&self) {
        self.fail_appends.store(true, std::sync::atomic::Ordering::SeqCst);
    }

    pub fn restore(&self) {
        self.fail_appends.store(false, std::sync::atomic::Ordering::SeqCst);
    }
}

impl<S: LedgerStore> LedgerStore for FaultInjectingStore<S> {
    fn append(&self, session: &SessionId, body: EntryBody) -> Result<u64, LedgerError> {
        if self.fail_appends.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(LedgerError::Unavailable("injected storage failure".into()));
        }
        self.inner.append(session, body)
    }
    fn snapshot(&self, session: &SessionId) -> Result<Vec<ProvenanceEntry>, LedgerError> {
        self.inner.snapshot(session)
    }
    fn head(&self, session: &SessionId) -> Result<Option<Hash32>, LedgerError> {
        self.inner.head(session)
    }
    fn sessions(&self) -> Result<Vec<SessionId>, LedgerError> {
        self.inner.sessions()
    }
}

// --- ledger facade ------------------------------------------------------

/// Read-only snapshot of one session's chain.
#[derive(Debug, Clone)]
pub struct LedgerView {
    session: SessionId,
    entries: Arc<Vec<ProvenanceEntry>>,
    head: Option<Hash32>,
}

impl LedgerView {
    pub fn session(&self) -> &SessionId {
        &self.session
    }

    pub fn entries(&self) -> &[ProvenanceEntry] {
        &self.entries
    }

    /// All provenance ids this view can resolve: content units, admitted
    /// and routed envelopes, and model outputs.
    pub fn known_ids(&self) -> BTreeSet<&ProvenanceId> {
        let mut ids = BTreeSet::new();
        for e in self.entries.iter() {
            match &e.body {
                EntryBody::Span { unit, envelope, .. } | EntryBody::Patch { unit, envelope, .. } => {
                    ids.insert(unit);
                    ids.insert(envelope);
                }
                EntryBody::Ingress { envelope, .. } | EntryBody::Hop { envelope, .. } => {
                    ids.insert(envelope);
                }
                EntryBody::ModelCall { output, .. } => {
                    ids.insert(output);
                }
                _ => {}
            }
        }
        ids
    }

    /// Trust recorded for a content unit (span or patch).
    pub fn unit_trust(&self, id: &ProvenanceId) -> Option<TrustScore> {
        self.entries.iter().find_map(|e| match &e.body {
            EntryBody::Span { unit, trust, .. } | EntryBody::Patch { unit, trust, .. }
                if unit == id =>
            {
                Some(*trust)
            }
            _ => None,
        })
    }

    /// Verdict recorded for a span unit.
    pub fn unit_verdict(&self, id: &ProvenanceId) -> Option<(InjectionIntent, f64)> {
        self.entries.iter().find_map(|e| match &e.body {
            EntryBody::Span { unit, intent, confidence, .. } if unit == id => {
                Some((*intent, *confidence))
            }
            _ => None,
        })
    }

    /// Ids of all content units with trust strictly below the threshold.
    pub fn low_trust_set(&self, threshold: TrustScore) -> BTreeSet<ProvenanceId> {
        self.entries
            .iter()
            .filter_map(|e| match &e.body {
                EntryBody::Span { unit, trust, .. } | EntryBody::Patch { unit, trust, .. }
                    if *trust < threshold =>
                {
                    Some(unit.clone())
                }
                _ => None,
            })
            .collect()
    }

    /// Attribution weights recorded for an output, if any.
    pub fn attribution_for(&self, output: &ProvenanceId) -> Option<&[(ProvenanceId, f64)]> {
        self.entries.iter().rev().find_map(|e| match &e.body {
            EntryBody::Attribution { output: o, weights } if o == output => {
                Some(weights.as_slice())
            }
            _ => None,
        })
    }

    /// Recompute every digest and link. True iff the chain verifies,
    /// including the stored head.
    pub fn verify(&self) -> bool {
        let mut prev = ZERO_HASH;
        for (i, entry) in self.entries.iter().enumerate() {
            if entry.entry_id != i as u64 || entry.session != self.session {
                return false;
            }
            if entry.prev_hash != prev {
                return false;
            }
            prev = entry_digest(entry);
        }
        match (self.entries.is_empty(), self.head) {
            (true, None) => true,
            (false, Some(head)) => head == prev,
            // A head without entries, or entries without a head, is
            // itself an integrity failure.
            _ => false,
        }
    }
}

/// Thread-safe handle over a pluggable store.
#[derive(Clone)]
pub struct Ledger {
    store: Arc<dyn LedgerStore>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self { store: Arc::new(MemoryLedgerStore::new()) }
    }

    pub fn with_store(store: Arc<dyn LedgerStore>) -> Self {
        Self { store }
    }

    /// Append an entry; the session is created on first append.
    pub fn append(&self, session: &SessionId, body: EntryBody) -> Result<u64, LedgerError> {
        self.store.append(session, body)
    }

    /// Record influence edges for an output. Weights are clamped to be
    /// non-negative and normalized so they sum to at most 1; every
    /// referenced id must already exist in the session.
    pub fn record_attribution(
        &self,
        session: &SessionId,
        output: &ProvenanceId,
        weights: &BTreeMap<ProvenanceId, f64>,
    ) -> Result<u64, LedgerError> {
        let view = self.view(session)?;
        let known = view.known_ids();
        if !known.contains(output) {
            return Err(LedgerError::DanglingReference(output.clone()));
        }
        for id in weights.keys() {
            if !known.contains(id) {
                return Err(LedgerError::DanglingReference(id.clone()));
            }
        }
        let clamped: Vec<(ProvenanceId, f64)> =
            weights.iter().map(|(id, w)| (id.clone(), w.max(0.0))).collect();
        let sum: f64 = clamped.iter().map(|(_, w)| w).sum();
        let scale = if sum > 1.0 { 1.0 / sum } else { 1.0 };
        let normalized: Vec<(ProvenanceId, f64)> =
            clamped.into_iter().map(|(id, w)| (id, w * scale)).collect();
        self.append(session, EntryBody::Attribution { output: output.clone(), weights: normalized })
    }

    /// Snapshot-isolated read of a session. Unknown sessions read as
    /// empty.
    pub fn view(&self, session: &SessionId) -> Result<LedgerView, LedgerError> {
        let entries = self.store.snapshot(session)?;
        let head = self.store.head(session)?;
        Ok(LedgerView { session: session.clone(), entries: Arc::new(entries), head })
    }

    /// True iff every prev-hash link and every entry digest recomputes
    /// exactly. Tampering yields false, not an error.
    pub fn verify_chain(&self, session: &SessionId) -> Result<bool, LedgerError> {
        Ok(self.view(session)?.verify())
    }

    /// Ids of all content units with trust strictly below the threshold.
    pub fn low_trust_set(
        &self,
        session: &SessionId,
        threshold: TrustScore,
    ) -> Result<BTreeSet<ProvenanceId>, LedgerError> {
        Ok(self.view(session)?.low_trust_set(threshold))
    }

    pub fn sessions(&self) -> Result<Vec<SessionId>, LedgerError> {
        self.store.sessions()
    }

    /// JSON-lines export of one session: one entry per line, closed by a
    /// head record. Schema documented in `docs/formats.md`.
    pub fn export_jsonl(&self, session: &SessionId) -> Result<String, LedgerError> {
        let view = self.view(session)?;
        let mut out = String::new();
        for entry in view.entries() {
            let line = serde_json::to_string(entry)
                .map_err(|e| LedgerError::Unavailable(e.to_string()))?;
            out.push_str(&line);
            out.push('\n');
        }
        if let Some(head) = view.head {
            out.push_str(&format!(
                "{{\"session\":{},\"head\":\"{}\"}}\n",
                serde_json::to_string(session.as_str())
                    .map_err(|e| LedgerError::Unavailable(e.to_string()))?,
                hex::encode(head)
            ));
        }
        Ok(out)
    }

    /// Export every session, in sorted session order.
    pub fn export_all_jsonl(&self) -> Result<String, LedgerError> {
        let mut out = String::new();
        for session in self.sessions()? {
            out.push_str(&self.export_jsonl(&session)?);
        }
        Ok(out)
    }
}

/// Head record closing each session in a JSON-lines export.
#[derive(Debug, Deserialize)]
struct HeadRecord {
    session: String,
    head: String,
}

/// Re-verify a session chain from a JSON-lines export. Returns false on
/// any broken link, digest mismatch, or head mismatch.
pub fn verify_export_jsonl(text: &str, session: &SessionId) -> Result<bool, LedgerError> {
    let mut entries = Vec::new();
    let mut head: Option<Hash32> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Ok(entry) = serde_json::from_str::<ProvenanceEntry>(line) {
            if &entry.session == session {
                entries.push(entry);
            }
            continue;
        }
        if let Ok(h) = serde_json::from_str::<HeadRecord>(line) {
            if h.session == session.as_str() {
                let bytes = hex::decode(&h.head).map_err(|e| LedgerError::Parse(e.to_string()))?;
                head = Some(
                    bytes
                        .try_into()
                        .map_err(|_| LedgerError::Parse("head is not 32 bytes".into()))?,
                );
            }
            continue;
        }
        return Err(LedgerError::Parse(format!("unparseable ledger line: {line}")));
    }
    let view =
        LedgerView { session: session.clone(), entries: Arc::new(entries), head };
    Ok(view.verify())
}
