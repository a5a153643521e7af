//! Pre-inference sanitization layer: trust lookups, span attenuation and
//! removal, policy enforcement, and trust-aware mask construction for
//! fully assembled prompts.
//!
//! Every model call in the system passes through [`PreLlmGate::gate`].
//! This is enforced structurally — the model adapter accepts only
//! [`SafePrompt`], which nothing else can construct — and checked by the
//! end-to-end audit over ledger exports.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DefenseMode;
use crate::ledger::{EntryBody, Ledger, LedgerError, LedgerView};
use crate::rulepack::RulePack;
use crate::text::{SanitizedText, Span};
use crate::trust::{AgentId, InjectionIntent, ProvenanceId, SessionId};

/// Role of a prompt segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    System,
    Developer,
    User,
    AgentContext,
    ToolResult,
}

impl PromptRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::System => "system",
            PromptRole::Developer => "developer",
            PromptRole::User => "user",
            PromptRole::AgentContext => "agent_context",
            PromptRole::ToolResult => "tool_result",
        }
    }
}

/// One segment of an assembled prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub role: PromptRole,
    pub text: SanitizedText,
    /// Carried from the originating envelope; the gate refuses prompts
    /// containing unsanitized segments.
    pub sanitized: bool,
}

/// A fully assembled prompt: exactly one System segment, first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    segments: Vec<PromptSegment>,
}

/// Errors from prompt assembly and gating. All of them fail closed: no
/// prompt is emitted.
#[derive(Debug, Error)]
pub enum GateError {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("prompt contains unsanitized segments")]
    UnsanitizedInput,
    #[error("system policy text was modified")]
    PolicyViolation,
    #[error("theta_block {block} exceeds theta_low {low}")]
    BadThresholds { low: f64, block: f64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl AssembledPrompt {
    pub fn new(segments: Vec<PromptSegment>) -> Result<Self, GateError> {
        let system_count =
            segments.iter().filter(|s| s.role == PromptRole::System).count();
        if system_count != 1 {
            return Err(GateError::InvalidPrompt(format!(
                "expected exactly one system segment, found {system_count}"
            )));
        }
        if segments.first().map(|s| s.role) != Some(PromptRole::System) {
            return Err(GateError::InvalidPrompt(
                "the system segment must precede all others".into(),
            ));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[PromptSegment] {
        &self.segments
    }

    /// The flattened sequence of emitted spans (kept and rewritten), in
    /// segment order. Masks align to this sequence.
    pub fn flattened_spans(&self) -> Vec<(PromptRole, &Span)> {
        self.segments
            .iter()
            .flat_map(|seg| seg.text.emitted_spans().map(move |s| (seg.role, s)))
            .collect()
    }

    /// Byte-exact text of the System segment.
    pub fn system_text(&self) -> String {
        self.segments[0].text.sanitized_string()
    }
}

/// Per-span effective weights aligned to the flattened span sequence of
/// the prompt handed to the gate. Weight 0 means the span was removed
/// from the emitted prompt; System-role spans always carry weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustMask {
    weights: Vec<f64>,
}

impl TrustMask {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// One span of a gated prompt, with its effective weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedSpan {
    pub unit: ProvenanceId,
    pub role: PromptRole,
    pub text: String,
    pub weight: f64,
}

/// A prompt that passed the gate. Only [`PreLlmGate::gate`] can build
/// one, so a model call without a preceding gate event cannot be typed.
#[derive(Debug, Clone, PartialEq)]
pub struct SafePrompt {
    spans: Vec<GatedSpan>,
}

impl SafePrompt {
    pub(crate) fn from_gated(spans: Vec<GatedSpan>) -> Self {
        Self { spans }
    }

    pub fn spans(&self) -> &[GatedSpan] {
        &self.spans
    }

    /// Concatenated text of the emitted prompt.
    pub fn rendered(&self) -> String {
        self.spans.iter().map(|s| s.text.as_str()).collect()
    }

    /// Render for an external text-only backend: attenuated spans are
    /// wrapped in an explicit distrust annotation since remote models
    /// accept no numeric attention mask.
    pub fn rendered_for_external(&self) -> Vec<(PromptRole, String)> {
        self.spans
            .iter()
            .map(|s| {
                let text = if s.weight < 1.0 {
                    format!("[low-trust content, weight {:.3}]: {}", s.weight, s.text)
                } else {
                    s.text.clone()
                };
                (s.role, text)
            })
            .collect()
    }
}

/// The piecewise-linear attenuation curve: full weight at or above
/// `theta_low`, proportional attenuation between the thresholds, removal
/// below `theta_block`.
pub fn mask_weight(trust: f64, theta_low: f64, theta_block: f64) -> f64 {
    if trust >= theta_low {
        1.0
    } else if trust >= theta_block {
        if theta_low <= 0.0 {
            1.0
        } else {
            trust / theta_low
        }
    } else {
        0.0
    }
}

/// The pre-inference gate.
pub struct PreLlmGate {
    pack: Arc<RulePack>,
    mode: DefenseMode,
    /// The deployment's system policy text; prompts whose System segment
    /// differs byte-for-byte are refused.
    policy_text: String,
}

impl PreLlmGate {
    pub fn new(pack: Arc<RulePack>, mode: DefenseMode, policy_text: impl Into<String>) -> Self {
        Self { pack, mode, policy_text: policy_text.into() }
    }

    pub fn policy_text(&self) -> &str {
        &self.policy_text
    }

    /// Which flattened spans survive policy enforcement. Three rules:
    /// non-System spans matching role-impersonation patterns are removed
    /// regardless of trust, spans with an Override verdict in the ledger
    /// are removed even if a prior stage only attenuated them, and the
    /// System segment must be byte-identical to the configured policy
    /// text.
    fn policy_keep_flags(
        &self,
        prompt: &AssembledPrompt,
        view: &LedgerView,
    ) -> Result<Vec<bool>, GateError> {
        if prompt.system_text() != self.policy_text {
            return Err(GateError::PolicyViolation);
        }
        let flattened = prompt.flattened_spans();
        let mut keep = Vec::with_capacity(flattened.len());
        for (role, span) in &flattened {
            if *role == PromptRole::System {
                keep.push(true);
                continue;
            }
            let normalized = crate::normalize::normalize(&span.text);
            let impersonates = self
                .pack
                .match_input(&normalized, false)
                .iter()
                .any(|r| r.intent == InjectionIntent::RoleImpersonation);
            let override_recorded = matches!(
                view.unit_verdict(&span.unit),
                Some((InjectionIntent::Override, _))
            );
            keep.push(!impersonates && !override_recorded);
        }
        Ok(keep)
    }

    /// Enforce system policies, returning the prompt with offending spans
    /// removed. Identity on clean input.
    pub fn enforce_policies(
        &self,
        prompt: &AssembledPrompt,
        view: &LedgerView,
    ) -> Result<AssembledPrompt, GateError> {
        let keep = self.policy_keep_flags(prompt, view)?;
        let mut cursor = 0usize;
        let segments = prompt
            .segments()
            .iter()
            .map(|seg| {
                let spans: Vec<Span> = seg
                    .text
                    .spans()
                    .iter()
                    .filter(|s| {
                        if !s.action.emitted() {
                            return true;
                        }
                        let keep_this = keep[cursor];
                        cursor += 1;
                        keep_this
                    })
                    .cloned()
                    .collect();
                PromptSegment {
                    role: seg.role,
                    text: SanitizedText::from_spans(spans),
                    sanitized: seg.sanitized,
                }
            })
            .collect();
        AssembledPrompt::new(segments)
    }

    /// Trust-aware mask over the flattened span sequence: 1 at or above
    /// `theta_low`, `trust / theta_low` between the thresholds, 0 below
    /// `theta_block`. System spans are always 1. Every unit id must
    /// resolve in the ledger.
    pub fn build_mask(
        &self,
        prompt: &AssembledPrompt,
        view: &LedgerView,
        theta_low: f64,
        theta_block: f64,
    ) -> Result<TrustMask, GateError> {
        if theta_block > theta_low {
            return Err(GateError::BadThresholds { low: theta_low, block: theta_block });
        }
        let mut weights = Vec::new();
        for (role, span) in prompt.flattened_spans() {
            if role == PromptRole::System {
                weights.push(1.0);
                continue;
            }
            let trust = view
                .unit_trust(&span.unit)
                .ok_or_else(|| LedgerError::DanglingReference(span.unit.clone()))?;
            weights.push(mask_weight(trust.value(), theta_low, theta_block));
        }
        Ok(TrustMask { weights })
    }

    /// The gate: policy enforcement, mask construction, excision of
    /// zero-weight spans, and a ledger record of the event. Returns the
    /// safe prompt and the mask aligned to the input prompt's flattened
    /// span sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn gate(
        &self,
        ledger: &Ledger,
        session: &SessionId,
        node: &AgentId,
        step: u64,
        attempt: u32,
        prompt: &AssembledPrompt,
        theta_low: f64,
        theta_block: f64,
        hard_removed: &BTreeSet<ProvenanceId>,
    ) -> Result<(SafePrompt, TrustMask), GateError> {
        if prompt.segments().iter().any(|s| !s.sanitized) {
            return Err(GateError::UnsanitizedInput);
        }
        if theta_block > theta_low {
            return Err(GateError::BadThresholds { low: theta_low, block: theta_block });
        }
        let view = ledger.view(session)?;
        let flattened = prompt.flattened_spans();

        let gate_on = self.mode.gate_enabled();
        let keep = if gate_on {
            self.policy_keep_flags(prompt, &view)?
        } else {
            // Measure-only regime: policies off, but the System text
            // check and provenance resolution still hold.
            if prompt.system_text() != self.policy_text {
                return Err(GateError::PolicyViolation);
            }
            vec![true; flattened.len()]
        };

        let mut weights = Vec::with_capacity(flattened.len());
        let mut gated = Vec::new();
        for (i, (role, span)) in flattened.iter().enumerate() {
            let trust = if *role == PromptRole::System {
                1.0
            } else {
                view.unit_trust(&span.unit)
                    .ok_or_else(|| LedgerError::DanglingReference(span.unit.clone()))?
                    .value()
            };
            let mut weight = if !gate_on || *role == PromptRole::System {
                1.0
            } else {
                mask_weight(trust, theta_low, theta_block)
            };
            if !keep[i] || (gate_on && hard_removed.contains(&span.unit)) {
                weight = 0.0;
            }
            weights.push(weight);
            if weight > 0.0 {
                gated.push(GatedSpan {
                    unit: span.unit.clone(),
                    role: *role,
                    text: span.text.clone(),
                    weight,
                });
            }
        }

        ledger.append(
            session,
            EntryBody::Gate {
                node: node.clone(),
                step,
                attempt,
                theta_low,
                theta_block,
                units: flattened.iter().map(|(_, s)| s.unit.clone()).collect(),
                weights: weights.clone(),
            },
        )?;

        Ok((SafePrompt::from_gated(gated), TrustMask { weights }))
    }
}
