use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{MiCandidates, MiMode};
use crate::lru::ScanMode;
use crate::time_encoder::TimeStrategy;

/// Every knob of a run. All keys have defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub time_strategy: TimeStrategy,
    pub mi_mode: MiMode,
    pub lru_mode: ScanMode,
    pub mi_candidates: MiCandidates,
    pub time_aware: bool,
    pub multi_interest: bool,
    pub explanation_personalization: bool,
    /// Scale inputs by `√(1−|λ|²)` inside each recurrence.
    pub lru_normalize: bool,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Exclude items already in the history when ranking.
    pub mask_seen: bool,
    pub eval_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.9,
            beta: 0.1,
            d: 50,
            heads: 2,
            max_len: 50,
            batch_size: 32,
            epochs: 30,
            seed: 42,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            time_strategy: TimeStrategy::Gated,
            mi_mode: MiMode::DynamicDual,
            lru_mode: ScanMode::Scan,
            mi_candidates: MiCandidates::Full,
            time_aware: true,
            multi_interest: true,
            explanation_personalization: true,
            lru_normalize: true,
            dropout: 0.0,
            weight_decay: 0.0,
            mask_seen: false,
            eval_k: 10,
        }
    }
}

/// Components actually active after applying the toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub strategy: TimeStrategy,
    pub heads: usize,
    pub mi_mode: MiMode,
}

pub const CONFIG_KEYS: [&str; 24] = [
    "alpha",
    "beta",
    "d",
    "H",
    "max_len",
    "batch_size",
    "epochs",
    "seed",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "time_strategy",
    "mi_mode",
    "lru_mode",
    "mi_candidates",
    "time_aware",
    "multi_interest",
    "explanation_personalization",
    "lru_normalize",
    "dropout",
    "weight_decay",
    "mask_seen",
    "eval_k",
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha = {} must lie in [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta = {} must be finite and ≥ 0", self.beta));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            problems.push(format!("H = {} must divide d = {}", self.heads, self.d));
        }
        if self.max_len < 2 {
            problems.push("max_len must be at least 2".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be finite and ≥ 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            problems.push("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            problems.push("adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("dropout must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be ≥ 0".into());
        }
        if self.eval_k == 0 {
            problems.push("eval_k must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    /// Time off ⇒ `disabled`; multi-interest off ⇒ one head; explanation
    /// personalization off ⇒ no alignment term.
    pub fn resolved(&self) -> Resolved {
        Resolved {
            strategy: if self.time_aware {
                self.time_strategy
            } else {
                TimeStrategy::Disabled
            },
            heads: if self.multi_interest { self.heads } else { 1 },
            mi_mode: if self.explanation_personalization {
                self.mi_mode
            } else {
                MiMode::Disabled
            },
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.alpha, c.beta, c.d, c.heads), (0.9, 0.1, 50, 2));
    }

    #[test]
    fn rejects_bad_values() {
        let c = ExperimentConfig {
            d: 50,
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().contains("divide"));
        let c = ExperimentConfig {
            alpha: 1.2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toggles_route_components() {
        let c = ExperimentConfig {
            time_aware: false,
            multi_interest: false,
            explanation_personalization: false,
            ..Default::default()
        };
        let r = c.resolved();
        assert_eq!(r.strategy, TimeStrategy::Disabled);
        assert_eq!(r.heads, 1);
        assert_eq!(r.mi_mode, MiMode::Disabled);
    }

    #[test]
    fn keys_round_trip_and_unknown_rejected() {
        let c = ExperimentConfig::default();
        let v: serde_json::Value = serde_json::from_str(&c.canonical_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want = CONFIG_KEYS.to_vec();
        let mut got = keys.clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"gamma": 1}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"H": 5, "mi_candidates": "sampled:20"}"#).unwrap();
        assert_eq!(partial.heads, 5);
        assert_eq!(partial.mi_candidates, MiCandidates::Sampled(20));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        let b = ExperimentConfig {
            seed: 7,
            ..Default::default()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
