//! Model adapter: executes gated prompts on a backend and writes
//! attribution back to the ledger.
//!
//! The mock backend is the primary test oracle: fully deterministic
//! given prompt and mask, it scans spans for imperative instructions,
//! computes effective salience as instruction strength times mask
//! weight, obeys the single highest-salience instruction (ties broken by
//! earliest span), and answers benign tasks from the remaining content
//! spans. Instruction strengths live in the rule pack, so the attack
//! corpus and the mock obedience share one source of truth.
//!
//! The external backend speaks a chat-completion-style HTTP protocol
//! (documented in `docs/formats.md`); endpoint and credentials come from
//! environment variables. It exists to demonstrate integration, not to
//! gate acceptance.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{PromptRole, SafePrompt};
use crate::ledger::{BackendKind, EntryBody, Ledger, LedgerError};
use crate::normalize::normalize;
use crate::rulepack::{Rule, RulePack};
use crate::trust::{AgentId, InjectionIntent, ProvenanceId, SessionId};

/// Errors from model execution. `BackendUnavailable` surfaces to the
/// agent graph as an explicit error state, never a silent drop.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// A model response with its influence attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    /// Provenance id assigned to this output.
    pub provenance_id: ProvenanceId,
    pub text: String,
    /// Influence weights per contributing unit, summing to at most 1.
    pub attribution: BTreeMap<ProvenanceId, f64>,
    pub backend: BackendKind,
}

/// Configuration for the external chat-completion backend.
#[derive(Debug, Clone)]
pub struct ExternalBackendConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl ExternalBackendConfig {
    /// Read `PROVGATE_BACKEND_URL`, `PROVGATE_BACKEND_KEY`,
    /// `PROVGATE_BACKEND_MODEL`, and `PROVGATE_BACKEND_TIMEOUT_MS`.
    /// Returns `None` when no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("PROVGATE_BACKEND_URL").ok()?;
        let timeout_ms = std::env::var("PROVGATE_BACKEND_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(30_000u64);
        Some(Self {
            endpoint,
            api_key: std::env::var("PROVGATE_BACKEND_KEY").ok(),
            model: std::env::var("PROVGATE_BACKEND_MODEL").unwrap_or_else(|_| "default".into()),
            timeout: Duration::from_millis(timeout_ms),
        })
    }
}

/// Which backend serves inference.
pub enum ModelBackend {
    Mock,
    External(ExternalBackendConfig),
}

/// Agent M: runs gated prompts and records attribution.
pub struct ModelAdapter {
    pack: Arc<RulePack>,
    backend: ModelBackend,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage>,
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: String,
}

impl ModelAdapter {
    pub fn mock(pack: Arc<RulePack>) -> Self {
        Self { pack, backend: ModelBackend::Mock }
    }

    pub fn external(pack: Arc<RulePack>, config: ExternalBackendConfig) -> Self {
        Self { pack, backend: ModelBackend::External(config) }
    }

    pub fn backend_kind(&self) -> BackendKind {
        match self.backend {
            ModelBackend::Mock => BackendKind::Mock,
            ModelBackend::External(_) => BackendKind::External,
        }
    }

    /// Execute a gated prompt. Records the model call and the resulting
    /// attribution in the ledger. `adversarial_leak` forces the mock to
    /// emit the system text every round, the scripted persistent-leaker
    /// used to drill the regeneration bound.
    #[allow(clippy::too_many_arguments)]
    pub fn infer(
        &self,
        ledger: &Ledger,
        session: &SessionId,
        node: &AgentId,
        step: u64,
        attempt: u32,
        prompt: &SafePrompt,
        adversarial_leak: bool,
    ) -> Result<ModelOutput, ModelError> {
        let output_id = ProvenanceId::new(format!("{node}.out{step}a{attempt}"));
        ledger.append(
            session,
            EntryBody::ModelCall {
                node: node.clone(),
                step,
                attempt,
                backend: self.backend_kind(),
                output: output_id.clone(),
            },
        )?;

        let (text, contributions) = match &self.backend {
            ModelBackend::Mock => mock_respond(&self.pack, prompt, adversarial_leak),
            ModelBackend::External(config) => {
                let text = call_external(config, prompt)?;
                let spans: Vec<(ProvenanceId, String)> = prompt
                    .spans()
                    .iter()
                    .map(|s| (s.unit.clone(), s.text.clone()))
                    .collect();
                let attribution = fallback_attribution(&text, &spans);
                (text, attribution)
            }
        };

        ledger.record_attribution(session, &output_id, &contributions)?;
        // Read back the normalized form so the output carries exactly
        // what the ledger recorded.
        let view = ledger.view(session)?;
        let attribution: BTreeMap<ProvenanceId, f64> = view
            .attribution_for(&output_id)
            .map(|w| w.iter().cloned().collect())
            .unwrap_or_default();

        Ok(ModelOutput {
            provenance_id: output_id,
            text,
            attribution,
            backend: self.backend_kind(),
        })
    }
}

// --- mock behavior ---------------------------------------------------------

struct InstructionHit<'a> {
    span_idx: usize,
    rule: &'a Rule,
    salience: f64,
}

/// Deterministic mock response: obeys the highest-salience instruction
/// and answers benign tasks from the remaining spans.
fn mock_respond(
    pack: &RulePack,
    prompt: &SafePrompt,
    adversarial_leak: bool,
) -> (String, BTreeMap<ProvenanceId, f64>) {
    let spans = prompt.spans();

    if adversarial_leak {
        let system_text = role_text(prompt, PromptRole::System);
        let mut contributions = BTreeMap::new();
        for s in spans.iter().filter(|s| s.role == PromptRole::System) {
            contributions.insert(s.unit.clone(), 1.0);
        }
        return (format!("{system_text} [leak]"), normalize_contributions(contributions));
    }

    // Strongest instruction per span, then the global winner. Ties fall
    // to the earliest span, then the lexicographically smallest rule id.
    let mut winner: Option<InstructionHit<'_>> = None;
    let mut instruction_spans = vec![false; spans.len()];
    for (i, span) in spans.iter().enumerate() {
        let normalized = normalize(&span.text);
        let mut best: Option<&Rule> = None;
        for rule in pack.match_input(&normalized, false) {
            if rule.strength <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    rule.strength > b.strength
                        || (rule.strength == b.strength && rule.id < b.id)
                }
            };
            if better {
                best = Some(rule);
            }
        }
        if let Some(rule) = best {
            instruction_spans[i] = true;
            let salience = rule.strength * span.weight;
            let better = match &winner {
                None => salience > 0.0,
                Some(w) => salience > w.salience,
            };
            if better {
                winner = Some(InstructionHit { span_idx: i, rule, salience });
            }
        }
    }

    let Some(win) = winner else {
        return ("no actionable instruction found".into(), BTreeMap::new());
    };
    let win_span = &spans[win.span_idx];

    if win.rule.intent != InjectionIntent::None {
        // Injection obeyed: the task is hijacked.
        let mut contributions = BTreeMap::new();
        contributions.insert(win_span.unit.clone(), win.salience);
        let text = if win.rule.intent == InjectionIntent::Exfiltration {
            let system_text = role_text(prompt, PromptRole::System);
            let sys_spans: Vec<_> =
                spans.iter().filter(|s| s.role == PromptRole::System).collect();
            for s in &sys_spans {
                contributions.insert(
                    s.unit.clone(),
                    0.5 * win.salience / sys_spans.len().max(1) as f64,
                );
            }
            format!("COMPLY[{}] {}", win_span.text.trim(), system_text)
        } else {
            format!("COMPLY[{}]", win_span.text.trim())
        };
        return (text, normalize_contributions(contributions));
    }

    // Benign task: answer from content spans (weight > 0, non-policy
    // roles, not instructions themselves).
    let content: Vec<usize> = (0..spans.len())
        .filter(|&i| {
            i != win.span_idx
                && !instruction_spans[i]
                && !matches!(spans[i].role, PromptRole::System | PromptRole::Developer)
        })
        .collect();

    let text = answer_task(win.rule, win_span.text.trim(), &content, spans);

    let mut contributions = BTreeMap::new();
    contributions.insert(win_span.unit.clone(), win.salience);
    for &i in &content {
        contributions.insert(spans[i].unit.clone(), 0.3 * spans[i].weight);
    }
    (text, normalize_contributions(contributions))
}

fn role_text(prompt: &SafePrompt, role: PromptRole) -> String {
    prompt
        .spans()
        .iter()
        .filter(|s| s.role == role)
        .map(|s| s.text.as_str())
        .collect::<String>()
        .trim()
        .to_string()
}

/// Task semantics shared with the corpus generator's expected-answer
/// oracle; see `harness::oracle`.
fn answer_task(
    rule: &Rule,
    winner_text: &str,
    content: &[usize],
    spans: &[crate::gate::GatedSpan],
) -> String {
    match rule.id.as_str() {
        "task.repeat" => {
            let folded = winner_text.to_lowercase();
            match folded.find("repeat exactly:") {
                Some(pos) => {
                    let after = pos + "repeat exactly:".len();
                    winner_text[after..].trim().trim_end_matches(['.', '!', '?']).to_string()
                }
                None => winner_text.to_string(),
            }
        }
        "task.summarize" => {
            let parts: Vec<String> = content
                .iter()
                .map(|&i| {
                    spans[i]
                        .text
                        .split_whitespace()
                        .take(5)
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .filter(|p| !p.is_empty())
                .collect();
            format!("summary: {}", parts.join(" / "))
        }
        "task.count" => {
            let n: usize =
                content.iter().map(|&i| spans[i].text.split_whitespace().count()).sum();
            format!("word count: {n}")
        }
        "task.forward" => {
            let parts: Vec<&str> = content
                .iter()
                .map(|&i| spans[i].text.trim())
                .filter(|p| !p.is_empty())
                .collect();
            parts.join(" ")
        }
        _ => "ok".to_string(),
    }
}

fn normalize_contributions(
    contributions: BTreeMap<ProvenanceId, f64>,
) -> BTreeMap<ProvenanceId, f64> {
    let total: f64 = contributions.values().sum();
    if total <= 0.0 {
        return BTreeMap::new();
    }
    contributions.into_iter().map(|(id, w)| (id, w / total)).collect()
}

// --- lexical attribution proxy -----------------------------------------------

/// Attribution proxy for backends that expose neither attention nor
/// gradients: weight per span proportional to the longest common word
/// n-gram (n >= 3) between the output and the span, normalized. Spans
/// with no 3-gram overlap get exactly 0.
pub fn fallback_attribution(
    output: &str,
    spans: &[(ProvenanceId, String)],
) -> BTreeMap<ProvenanceId, f64> {
    let out_words = words(output);
    let mut raw: Vec<(ProvenanceId, f64)> = Vec::new();
    for (id, text) in spans {
        let span_words = words(text);
        let l = longest_common_run(&out_words, &span_words);
        if l >= 3 {
            raw.push((id.clone(), l as f64));
        }
    }
    let total: f64 = raw.iter().map(|(_, l)| l).sum();
    if total <= 0.0 {
        return BTreeMap::new();
    }
    raw.into_iter().map(|(id, l)| (id, l / total)).collect()
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Length of the longest common contiguous word run.
fn longest_common_run(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut best = 0usize;
    let mut prev = vec![0usize; b.len() + 1];
    for i in 0..a.len() {
        let mut row = vec![0usize; b.len() + 1];
        for j in 0..b.len() {
            if a[i] == b[j] {
                row[j + 1] = prev[j] + 1;
                best = best.max(row[j + 1]);
            }
        }
        prev = row;
    }
    best
}

// --- external backend --------------------------------------------------------

fn wire_role(role: PromptRole) -> &'static str {
    match role {
        PromptRole::System | PromptRole::Developer => "system",
        PromptRole::User | PromptRole::AgentContext | PromptRole::ToolResult => "user",
    }
}

fn call_external(
    config: &ExternalBackendConfig,
    prompt: &SafePrompt,
) -> Result<String, ModelError> {
    let rendered = prompt.rendered_for_external();
    // Adjacent spans of the same wire role collapse into one message.
    let mut messages: Vec<WireMessage> = Vec::new();
    for (role, text) in rendered {
        let role = wire_role(role);
        match messages.last_mut() {
            Some(last) if last.role == role => {
                last.content.push(' ');
                last.content.push_str(&text);
            }
            _ => messages.push(WireMessage { role, content: text }),
        }
    }
    let request = WireRequest { model: &config.model, temperature: 0.0, messages };

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .build()
        .into();
    let mut call = agent.post(&config.endpoint);
    if let Some(key) = &config.api_key {
        call = call.header("Authorization", &format!("Bearer {key}"));
    }
    let mut response = call
        .send_json(&request)
        .map_err(|e| ModelError::BackendUnavailable(e.to_string()))?;
    let parsed: WireResponse = response
        .body_mut()
        .read_json()
        .map_err(|e| ModelError::BackendUnavailable(format!("bad response: {e}")))?;
    parsed
        .choices
        .first()
        .map(|c| c.message.content.clone())
        .ok_or_else(|| ModelError::BackendUnavailable("response carried no choices".into()))
}
