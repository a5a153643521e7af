//! Pipeline-wide thresholds and defense-mode switches.

use serde::{Deserialize, Serialize};

/// All trust and policy thresholds used across the pipeline, with the
/// shipped defaults. Every value is per-deployment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Spans with trust below this are attenuated in the prompt mask.
    pub theta_low: f64,
    /// Spans with trust below this are excised from the prompt.
    pub theta_block: f64,
    /// Classifier confidence at or above which a span is removed
    /// (override / role-impersonation / tool-abuse intents).
    pub theta_remove: f64,
    /// Classifier confidence at or above which a span is rewritten to the
    /// neutralization marker (below `theta_remove`).
    pub theta_rewrite: f64,
    /// Image patches with trust below this are redacted.
    pub theta_redact: f64,
    /// Minimum contributing trust required for tool-call arguments.
    pub theta_tool: f64,
    /// Maximum tolerated trust leakage before regeneration is requested.
    pub lambda_max: f64,
    /// Regeneration attempts before an output is rejected outright.
    pub max_regenerations: u32,
    /// Added to `theta_low` on each regeneration round (capped at 1.0).
    pub regen_theta_low_step: f64,
    /// Added to `theta_block` on each regeneration round.
    pub regen_theta_block_step: f64,
    /// Weight at which image-wide metadata verdicts influence each patch.
    pub metadata_patch_weight: f64,
    /// Edge length of the square image patches, in pixels.
    pub patch_size: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_low: 0.3,
            theta_block: 0.1,
            theta_remove: 0.8,
            theta_rewrite: 0.5,
            theta_redact: 0.2,
            theta_tool: 0.5,
            lambda_max: 0.15,
            max_regenerations: 3,
            regen_theta_low_step: 0.2,
            regen_theta_block_step: 0.1,
            metadata_patch_weight: 0.5,
            patch_size: 16,
        }
    }
}

impl Thresholds {
    /// Thresholds for a given regeneration attempt (1-based). Attempt 1
    /// uses the configured values; each later attempt tightens them.
    pub fn for_attempt(&self, attempt: u32) -> (f64, f64) {
        let rounds = attempt.saturating_sub(1) as f64;
        let low = (self.theta_low + rounds * self.regen_theta_low_step).min(1.0);
        let block = (self.theta_block + rounds * self.regen_theta_block_step).min(low);
        (low, block)
    }
}

/// Which layers of the defense are active. `Full` is the proposed
/// configuration; the others are ablations used by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseMode {
    /// All layers on.
    Full,
    /// Sanitizers score and record but take no action; the pre-inference
    /// mask passes everything and outputs are released unvalidated.
    /// This is the measure-only baseline regime.
    GatesOff,
    /// Ingress sanitizers record source priors without classifying;
    /// masking and validation stay on.
    SanitizersOff,
    /// Classification restricted to literal patterns on case-folded raw
    /// text, with no normalization and no visual anomaly detection.
    KeywordOnly,
}

impl DefenseMode {
    /// Injection classification runs at ingress.
    pub fn classify_enabled(self) -> bool {
        !matches!(self, DefenseMode::SanitizersOff)
    }

    /// Obfuscation-resistant normalization and glob patterns are used.
    pub fn normalization_enabled(self) -> bool {
        matches!(self, DefenseMode::Full | DefenseMode::GatesOff)
    }

    /// Sanitizers may remove/rewrite spans and redact patches.
    pub fn sanitizer_actions_enabled(self) -> bool {
        matches!(self, DefenseMode::Full | DefenseMode::KeywordOnly)
    }

    /// The pre-inference gate masks, attenuates, and enforces policies.
    pub fn gate_enabled(self) -> bool {
        !matches!(self, DefenseMode::GatesOff)
    }

    /// Outputs are validated before release.
    pub fn validator_enabled(self) -> bool {
        !matches!(self, DefenseMode::GatesOff)
    }

    /// Tool calls are authorized against provenance-checked constraints.
    pub fn tool_authorization_enabled(self) -> bool {
        !matches!(self, DefenseMode::GatesOff)
    }

    /// The least-significant-bit anomaly detector runs on image patches.
    pub fn anomaly_detection_enabled(self) -> bool {
        matches!(self, DefenseMode::Full | DefenseMode::GatesOff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_documented_values() {
        let t = Thresholds::default();
        assert_eq!(t.theta_low, 0.3);
        assert_eq!(t.theta_block, 0.1);
        assert_eq!(t.lambda_max, 0.15);
        assert_eq!(t.max_regenerations, 3);
    }

    #[test]
    fn attempt_thresholds_tighten_and_cap() {
        let t = Thresholds::default();
        assert_eq!(t.for_attempt(1), (0.3, 0.1));
        let (l2, b2) = t.for_attempt(2);
        assert!((l2 - 0.5).abs() < 1e-12 && (b2 - 0.2).abs() < 1e-12);
        let (l9, _) = t.for_attempt(9);
        assert_eq!(l9, 1.0);
    }
}
