//! Versioned rule pack shared by the text sanitizer, the pre-inference
//! gate, the output validator, and the mock model.
//!
//! Patterns use a restricted glob syntax so semantics stay identical
//! across implementations in any language: `*` matches any run of
//! characters (including none), `?` matches exactly one character, and
//! everything else is literal. A pattern matches a text when the text
//! contains a substring matched by it. Patterns are applied to the
//! normalized form of the text (see [`crate::normalize`]); the keyword
//! baseline restricts the pack to literal patterns matched against
//! case-folded raw text.
//!
//! Rules with intent `none` describe benign task imperatives. They are
//! invisible to the injection classifier and exist so attack strengths
//! and task strengths share one source of truth for the mock model.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trust::InjectionIntent;

/// Where a rule applies: ingress spans, model outputs, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    Input,
    Output,
    Both,
}

impl RuleScope {
    fn tag(self) -> u8 {
        match self {
            RuleScope::Input => 0,
            RuleScope::Output => 1,
            RuleScope::Both => 2,
        }
    }

    pub fn applies_to_input(self) -> bool {
        matches!(self, RuleScope::Input | RuleScope::Both)
    }

    pub fn applies_to_output(self) -> bool {
        matches!(self, RuleScope::Output | RuleScope::Both)
    }
}

/// One detection pattern with its classifier weight and the instruction
/// strength consumed by the mock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub intent: InjectionIntent,
    pub pattern: String,
    /// Classifier weight in `(0, 1]`. Ignored for intent `none`.
    pub weight: f64,
    /// Imperative strength in `[0, 1]` for the mock obedience model.
    pub strength: f64,
    pub scope: RuleScope,
}

impl Rule {
    /// Literal rules contain no glob metacharacters. The keyword-only
    /// baseline is exactly the literal subset of the pack.
    pub fn is_literal(&self) -> bool {
        !self.pattern.contains('*') && !self.pattern.contains('?')
    }

    /// Does this rule match the given (already normalized or case-folded)
    /// text?
    pub fn matches(&self, text: &str) -> bool {
        if self.is_literal() {
            text.contains(self.pattern.as_str())
        } else {
            glob_contains(text, &self.pattern)
        }
    }
}

/// Errors from loading or validating a rule pack.
#[derive(Debug, Error)]
pub enum PackError {
    #[error("rule pack parse error: {0}")]
    Parse(String),
    #[error("rule {id}: {reason}")]
    InvalidRule { id: String, reason: String },
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
    #[error("unsupported rule pack version {0}")]
    Version(u32),
}

#[derive(Deserialize)]
struct PackFile {
    version: u32,
    name: String,
    rules: Vec<Rule>,
}

/// Immutable, validated rule pack with a content digest.
#[derive(Debug, Clone)]
pub struct RulePack {
    pub version: u32,
    pub name: String,
    rules: Vec<Rule>,
    digest: [u8; 32],
}

const DEFAULT_PACK: &str = include_str!("../data/rulepack.json");

impl Default for RulePack {
    fn default() -> Self {
        Self::load(DEFAULT_PACK).expect("shipped rule pack is valid")
    }
}

impl RulePack {
    /// Parse and validate a rule pack file (JSON, documented schema).
    pub fn load(text: &str) -> Result<Self, PackError> {
        let file: PackFile = serde_json::from_str(text).map_err(|e| PackError::Parse(e.to_string()))?;
        if file.version != 1 {
            return Err(PackError::Version(file.version));
        }
        let mut seen = std::collections::HashSet::new();
        for rule in &file.rules {
            if !seen.insert(rule.id.as_str()) {
                return Err(PackError::DuplicateId(rule.id.clone()));
            }
            if rule.pattern.is_empty() {
                return Err(PackError::InvalidRule {
                    id: rule.id.clone(),
                    reason: "empty pattern".into(),
                });
            }
            if rule.pattern.to_lowercase() != rule.pattern {
                return Err(PackError::InvalidRule {
                    id: rule.id.clone(),
                    reason: "patterns must be lowercase (matching is case-folded)".into(),
                });
            }
            if !(rule.weight > 0.0 && rule.weight <= 1.0) {
                return Err(PackError::InvalidRule {
                    id: rule.id.clone(),
                    reason: format!("weight {} outside (0, 1]", rule.weight),
                });
            }
            if !(0.0..=1.0).contains(&rule.strength) {
                return Err(PackError::InvalidRule {
                    id: rule.id.clone(),
                    reason: format!("strength {} outside [0, 1]", rule.strength),
                });
            }
        }
        let digest = digest_rules(file.version, &file.name, &file.rules);
        Ok(Self { version: file.version, name: file.name, rules: file.rules, digest })
    }

    /// Load a pack from a file on disk.
    pub fn load_file(path: &std::path::Path) -> Result<Self, PackError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PackError::Parse(format!("{}: {e}", path.display())))?;
        Self::load(&text)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Content digest over the canonical encoding of the pack. Recorded
    /// in every run report so audits can tell what defended the run.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// The literal-pattern subset used by the keyword-only baseline.
    pub fn literal_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.is_literal())
    }

    /// Rules matching `text`, filtered to the given side of the pipeline.
    /// With `literal_only`, glob rules are skipped entirely.
    pub fn match_input(&self, text: &str, literal_only: bool) -> Vec<&Rule> {
        self.rules
            .iter()
            .filter(|r| r.scope.applies_to_input())
            .filter(|r| !literal_only || r.is_literal())
            .filter(|r| r.matches(text))
            .collect()
    }

    /// Output-side rule matches for the validator's policy scan.
    pub fn match_output(&self, text: &str) -> Vec<&Rule> {
        self.rules
            .iter()
            .filter(|r| r.scope.applies_to_output())
            .filter(|r| r.matches(text))
            .collect()
    }
}

fn digest_rules(version: u32, name: &str, rules: &[Rule]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(version.to_be_bytes());
    h.update((name.len() as u32).to_be_bytes());
    h.update(name.as_bytes());
    for r in rules {
        for s in [&r.id, &r.pattern] {
            h.update((s.len() as u32).to_be_bytes());
            h.update(s.as_bytes());
        }
        h.update([r.intent.tag(), r.scope.tag()]);
        h.update(r.weight.to_bits().to_be_bytes());
        h.update(r.strength.to_bits().to_be_bytes());
    }
    h.finalize().into()
}

/// True when `text` contains a substring matched by the restricted-glob
/// `pattern` (`*` = any run of characters, `?` = exactly one).
pub fn glob_contains(text: &str, pattern: &str) -> bool {
    let t: Vec<char> = text.chars().collect();
    let mut p: Vec<char> = Vec::with_capacity(pattern.len() + 2);
    p.push('*');
    p.extend(pattern.chars());
    p.push('*');
    wildcard_match(&t, &p)
}

fn wildcard_match(t: &[char], p: &[char]) -> bool {
    let (mut ti, mut pi) = (0usize, 0usize);
    let mut star: Option<usize> = None;
    let mut mark = 0usize;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            ti += 1;
            pi += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}
