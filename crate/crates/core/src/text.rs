//! Span-level text sanitizer: segmentation, injection classification,
//! trust scoring, rewriting/removal, and provenance recording.
//!
//! Spans are sentences rather than tokens: sentence granularity keeps
//! provenance maps small and matches how injected imperatives appear.
//! Every span gets a ledger entry; the concatenation of kept and
//! rewritten spans reconstructs the sanitized output exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DefenseMode, Thresholds};
use crate::ledger::{content_digest, ActionTag, EntryBody, Ledger, LedgerError};
use crate::normalize::{casefold, normalize};
use crate::rulepack::RulePack;
use crate::trust::{
    InjectionIntent, InjectionVerdict, ProvenanceId, SessionId, SourceClass, SourcePriors,
    TrustError, TrustScore,
};

/// Fixed neutralization marker substituted for rewritten spans. Visible
/// by design: downstream models should see that content was removed.
/// Must never match any rule in the shipped pack (re-scan clean).
pub const REDACTION_MARKER: &str = "[redacted: suspected instruction]";

/// Errors from sanitization. Ledger failures propagate so callers fail
/// closed.
#[derive(Debug, Error)]
pub enum SanitizeError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Trust(#[from] TrustError),
}

/// Action taken on a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanAction {
    Keep,
    Rewrite,
    Remove,
}

impl SpanAction {
    pub(crate) fn tag(self) -> ActionTag {
        match self {
            SpanAction::Keep => ActionTag::Kept,
            SpanAction::Rewrite => ActionTag::Rewritten,
            SpanAction::Remove => ActionTag::Removed,
        }
    }

    /// Kept and rewritten spans are present in the sanitized output.
    pub fn emitted(self) -> bool {
        !matches!(self, SpanAction::Remove)
    }
}

/// One sanitized span. `text` is the post-sanitization slice (empty for
/// removed spans; the original content survives only as a digest in the
/// ledger).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub index: u32,
    pub unit: ProvenanceId,
    pub entry_id: u64,
    pub text: String,
    pub verdict: InjectionVerdict,
    pub trust: TrustScore,
    pub action: SpanAction,
}

/// Sanitized text plus the span-to-ledger-entry provenance map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedText {
    spans: Vec<Span>,
    provenance_map: BTreeMap<u32, u64>,
}

impl SanitizedText {
    /// Rebuild from an already-recorded span subset (the provenance map
    /// is derived from the spans' ledger entry ids).
    pub fn from_spans(spans: Vec<Span>) -> Self {
        let provenance_map = spans.iter().map(|s| (s.index, s.entry_id)).collect();
        Self { spans, provenance_map }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn provenance_map(&self) -> &BTreeMap<u32, u64> {
        &self.provenance_map
    }

    /// Spans present in the sanitized output, in order.
    pub fn emitted_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.action.emitted())
    }

    /// Reconstructed sanitized output.
    pub fn sanitized_string(&self) -> String {
        self.emitted_spans().map(|s| s.text.as_str()).collect()
    }

    /// Minimum span trust, `None` for empty payloads.
    pub fn min_trust(&self) -> Option<TrustScore> {
        self.spans.iter().map(|s| s.trust).min()
    }
}

/// Raw sentence span produced by [`segment`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSpan {
    pub index: u32,
    pub text: String,
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '\n' | '\r')
}

/// Sentence-level segmentation: split after runs of sentence terminators
/// or line breaks plus any following whitespace. Spans cover the input
/// exactly, without overlap, and each is non-empty after trimming;
/// whitespace-only input yields no spans.
pub fn segment(text: &str) -> Vec<RawSpan> {
    let mut pieces: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if is_terminator(c) {
            // Consume the rest of the terminator run and trailing spaces.
            while let Some(&n) = chars.peek() {
                if is_terminator(n) || n == ' ' || n == '\t' {
                    current.push(n);
                    chars.next();
                } else {
                    break;
                }
            }
            pieces.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }

    // Merge pieces that are empty after trimming into a neighbor so every
    // span carries content.
    let mut merged: Vec<String> = Vec::new();
    let mut pending_prefix = String::new();
    for piece in pieces {
        if piece.trim().is_empty() {
            match merged.last_mut() {
                Some(last) => last.push_str(&piece),
                None => pending_prefix.push_str(&piece),
            }
        } else if pending_prefix.is_empty() {
            merged.push(piece);
        } else {
            merged.push(format!("{pending_prefix}{piece}"));
            pending_prefix.clear();
        }
    }
    // Whitespace-only input: no spans.
    merged
        .into_iter()
        .enumerate()
        .map(|(i, text)| RawSpan { index: i as u32, text })
        .collect()
}

/// Trailing run of terminators and whitespace, preserved when a span is
/// rewritten so segmentation boundaries survive a re-scan.
fn suffix_split(text: &str) -> (&str, &str) {
    let cut = text
        .rfind(|c: char| !is_terminator(c) && !c.is_whitespace())
        .map(|i| i + text[i..].chars().next().map(char::len_utf8).unwrap_or(0))
        .unwrap_or(0);
    text.split_at(cut)
}

/// Neighboring-span context offered to classifier providers.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanContext<'a> {
    pub prev: Option<&'a str>,
    pub next: Option<&'a str>,
}

/// Pluggable injection classifier. The reference implementation is the
/// rule engine below; a learned classifier can be swapped in behind this
/// interface.
pub trait InjectionClassifier: Send + Sync {
    fn classify(&self, span_text: &str, context: SpanContext<'_>) -> InjectionVerdict;
}

/// Reference classifier: weighted pattern matching against the rule
/// pack, with confidence `1 - prod(1 - w)` over matched rules. Rules
/// with intent `none` never contribute.
pub struct RuleClassifier {
    pack: Arc<RulePack>,
    /// Keyword-baseline mode: literal patterns against case-folded raw
    /// text instead of glob patterns against normalized text.
    literal_only: bool,
}

impl RuleClassifier {
    pub fn new(pack: Arc<RulePack>, literal_only: bool) -> Self {
        Self { pack, literal_only }
    }
}

impl InjectionClassifier for RuleClassifier {
    fn classify(&self, span_text: &str, _context: SpanContext<'_>) -> InjectionVerdict {
        let view =
            if self.literal_only { casefold(span_text) } else { normalize(span_text) };
        let matched = self.pack.match_input(&view, self.literal_only);

        let mut overall = 1.0f64;
        let mut per_class: BTreeMap<InjectionIntent, f64> = BTreeMap::new();
        for rule in matched {
            if rule.intent == InjectionIntent::None {
                continue;
            }
            overall *= 1.0 - rule.weight;
            let slot = per_class.entry(rule.intent).or_insert(1.0);
            *slot *= 1.0 - rule.weight;
        }
        let confidence = 1.0 - overall;
        if confidence <= 0.0 {
            return InjectionVerdict::none();
        }
        let intent = per_class
            .iter()
            .map(|(intent, rem)| (*intent, 1.0 - rem))
            .max_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    // Deterministic tie break: lower intent tag wins.
                    .then(b.0.tag().cmp(&a.0.tag()))
            })
            .map(|(intent, _)| intent)
            .unwrap_or(InjectionIntent::None);
        InjectionVerdict::new(intent, confidence)
    }
}

/// The text sanitizer: Agent A_t.
pub struct TextSanitizer {
    priors: SourcePriors,
    thresholds: Thresholds,
    mode: DefenseMode,
    classifier: Arc<dyn InjectionClassifier>,
}

impl TextSanitizer {
    pub fn new(
        pack: Arc<RulePack>,
        priors: SourcePriors,
        thresholds: Thresholds,
        mode: DefenseMode,
    ) -> Self {
        let literal_only = !mode.normalization_enabled();
        Self {
            priors,
            thresholds,
            mode,
            classifier: Arc::new(RuleClassifier::new(pack, literal_only)),
        }
    }

    /// Swap in a different classifier provider.
    pub fn with_classifier(mut self, classifier: Arc<dyn InjectionClassifier>) -> Self {
        self.classifier = classifier;
        self
    }

    /// Classify one span with its neighbors as context.
    pub fn classify(&self, span_text: &str, context: SpanContext<'_>) -> InjectionVerdict {
        if !self.mode.classify_enabled() {
            return InjectionVerdict::none();
        }
        self.classifier.classify(span_text, context)
    }

    /// Sanitize raw text into trust-scored spans, recording one ledger
    /// entry per span under the given envelope id. Fails closed on
    /// ledger errors.
    pub fn sanitize(
        &self,
        ledger: &Ledger,
        session: &SessionId,
        envelope: &ProvenanceId,
        source: &SourceClass,
        origin_trust: Option<TrustScore>,
        raw_text: &str,
    ) -> Result<SanitizedText, SanitizeError> {
        let raw_spans = segment(raw_text);
        let mut spans = Vec::with_capacity(raw_spans.len());
        let mut provenance_map = BTreeMap::new();

        for raw in &raw_spans {
            let context = SpanContext {
                prev: raw
                    .index
                    .checked_sub(1)
                    .map(|i| raw_spans[i as usize].text.as_str()),
                next: raw_spans.get(raw.index as usize + 1).map(|s| s.text.as_str()),
            };
            let verdict = self.classify(&raw.text, context);
            let trust = self.priors.trust_model(source, origin_trust, &verdict)?;
            let action = self.choose_action(&verdict);
            let unit = envelope.span(raw.index as usize);

            let entry_id = ledger.append(
                session,
                EntryBody::Span {
                    unit: unit.clone(),
                    envelope: envelope.clone(),
                    source: source.clone(),
                    trust,
                    index: raw.index,
                    content_hash: content_digest(raw.text.as_bytes()),
                    intent: verdict.intent,
                    confidence: verdict.confidence,
                    action: action.tag(),
                },
            )?;
            provenance_map.insert(raw.index, entry_id);

            let text = match action {
                SpanAction::Keep => raw.text.clone(),
                SpanAction::Rewrite => {
                    let (_, suffix) = suffix_split(&raw.text);
                    format!("{REDACTION_MARKER}{suffix}")
                }
                SpanAction::Remove => String::new(),
            };
            spans.push(Span { index: raw.index, unit, entry_id, text, verdict, trust, action });
        }

        Ok(SanitizedText { spans, provenance_map })
    }

    pub fn mode(&self) -> DefenseMode {
        self.mode
    }

    fn choose_action(&self, verdict: &InjectionVerdict) -> SpanAction {
        if !self.mode.sanitizer_actions_enabled() {
            return SpanAction::Keep;
        }
        let removable = matches!(
            verdict.intent,
            InjectionIntent::Override | InjectionIntent::RoleImpersonation | InjectionIntent::ToolAbuse
        );
        if removable && verdict.confidence >= self.thresholds.theta_remove {
            SpanAction::Remove
        } else if removable && verdict.confidence >= self.thresholds.theta_rewrite {
            SpanAction::Rewrite
        } else {
            SpanAction::Keep
        }
    }

    pub fn priors(&self) -> &SourcePriors {
        &self.priors
    }
}

/// Record deployment-configured text (system policy, node role
/// descriptions) as trusted spans: segmented and provenance-recorded,
/// but never classified. Trust equals the source prior.
pub fn record_trusted_text(
    ledger: &Ledger,
    session: &SessionId,
    envelope: &ProvenanceId,
    source: &SourceClass,
    text: &str,
) -> Result<SanitizedText, SanitizeError> {
    let priors = SourcePriors::default();
    record_trusted_text_with(ledger, session, envelope, source, text, &priors)
}

/// As [`record_trusted_text`], with explicit priors.
pub fn record_trusted_text_with(
    ledger: &Ledger,
    session: &SessionId,
    envelope: &ProvenanceId,
    source: &SourceClass,
    text: &str,
    priors: &SourcePriors,
) -> Result<SanitizedText, SanitizeError> {
    let trust = priors.base_trust(source, None)?;
    let mut spans = Vec::new();
    for raw in segment(text) {
        let unit = envelope.span(raw.index as usize);
        let entry_id = ledger.append(
            session,
            EntryBody::Span {
                unit: unit.clone(),
                envelope: envelope.clone(),
                source: source.clone(),
                trust,
                index: raw.index,
                content_hash: content_digest(raw.text.as_bytes()),
                intent: InjectionIntent::None,
                confidence: 0.0,
                action: ActionTag::Kept,
            },
        )?;
        spans.push(Span {
            index: raw.index,
            unit,
            entry_id,
            text: raw.text,
            verdict: InjectionVerdict::none(),
            trust,
            action: SpanAction::Keep,
        });
    }
    Ok(SanitizedText::from_spans(spans))
}
