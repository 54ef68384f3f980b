//! Model and training configuration, and the flat JSON config file.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attention::{AttentionConfig, AttentionKind, GateMode};
use crate::bet::DiagPolicy;
use crate::syntax::DEFAULT_LAMBDA_P;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Standard,
    /// Bird-eye attention with the learned gate.
    BetSf,
    /// Standard attention supervised by syntax hints.
    BetSg,
    /// Bird-eye attention plus syntax-hint supervision.
    BetSfSg,
}

impl Variant {
    pub fn attention_kind(self) -> AttentionKind {
        match self {
            Variant::Standard | Variant::BetSg => AttentionKind::Standard,
            Variant::BetSf | Variant::BetSfSg => AttentionKind::BetSf,
        }
    }

    pub fn uses_hints(self) -> bool {
        matches!(self, Variant::BetSg | Variant::BetSfSg)
    }

    /// Diagonal policy used when the config does not name one.
    pub fn default_policy(self) -> DiagPolicy {
        match self.attention_kind() {
            AttentionKind::Standard => DiagPolicy::Keep,
            AttentionKind::BetSf => DiagPolicy::MaskOut,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Char,
    Word,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub diag_policy: DiagPolicy,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lambda_p: f64,
    pub tokenization: Tokenization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Standard,
            diag_policy: DiagPolicy::Keep,
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 64,
            lambda_p: DEFAULT_LAMBDA_P,
            tokenization: Tokenization::Char,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            kind: self.variant.attention_kind(),
            policy: self.diag_policy,
            gate: GateMode::Learned,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Pointer-loss weight actually applied during training. Hints are only
    /// defined for word-level corpora.
    pub fn effective_lambda_p(&self) -> f64 {
        if self.variant.uses_hints() && self.tokenization == Tokenization::Word {
            self.lambda_p
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("n_layers, n_heads, d_model and d_ff must all be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad(format!("lambda_p must be a non-negative number, got {}", self.lambda_p));
        }
        self.diag_policy
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub gradient_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            batch_size: 8,
            total_steps: 2000,
            eval_interval: 200,
            seed: 0,
            gradient_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < self.adam_beta2 && self.adam_beta2 < 1.0) {
            return bad(format!(
                "need 0 < adam_beta1 < adam_beta2 < 1, got {} and {}",
                self.adam_beta1, self.adam_beta2
            ));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.gradient_clip_norm > 0.0) {
            return bad("gradient_clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Flat config document: every field of [`ModelConfig`] and [`TrainConfig`],
/// all optional. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_policy: Option<DiagPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    /// Upper bound on the vocabulary, `<unk>` included. Absent means every
    /// type in the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenization: Option<Tokenization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_clip_norm: Option<f64>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    /// Fills defaults. `vocab_size` stays 0 when absent; the vocabulary
    /// builder resolves it.
    pub fn resolve(&self) -> Result<(ModelConfig, TrainConfig), HarnessError> {
        let md = ModelConfig::default();
        let td = TrainConfig::default();
        let variant = self.variant.unwrap_or(md.variant);
        let model = ModelConfig {
            variant,
            diag_policy: self.diag_policy.unwrap_or_else(|| variant.default_policy()),
            n_layers: self.n_layers.unwrap_or(md.n_layers),
            n_heads: self.n_heads.unwrap_or(md.n_heads),
            d_model: self.d_model.unwrap_or(md.d_model),
            d_ff: self.d_ff.unwrap_or(md.d_ff),
            vocab_size: self.vocab_size.unwrap_or(0),
            max_seq_len: self.max_seq_len.unwrap_or(md.max_seq_len),
            lambda_p: self.lambda_p.unwrap_or(md.lambda_p),
            tokenization: self.tokenization.unwrap_or(md.tokenization),
        };
        let train = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(td.learning_rate),
            adam_beta1: self.adam_beta1.unwrap_or(td.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(td.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(td.adam_eps),
            batch_size: self.batch_size.unwrap_or(td.batch_size),
            total_steps: self.total_steps.unwrap_or(td.total_steps),
            eval_interval: self.eval_interval.unwrap_or(td.eval_interval),
            seed: self.seed.unwrap_or(td.seed),
            gradient_clip_norm: self.gradient_clip_norm.unwrap_or(td.gradient_clip_norm),
        };
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }

    /// The fully specified document for a resolved pair.
    pub fn from_resolved(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            variant: Some(model.variant),
            diag_policy: Some(model.diag_policy),
            n_layers: Some(model.n_layers),
            n_heads: Some(model.n_heads),
            d_model: Some(model.d_model),
            d_ff: Some(model.d_ff),
            vocab_size: Some(model.vocab_size),
            max_seq_len: Some(model.max_seq_len),
            lambda_p: Some(model.lambda_p),
            tokenization: Some(model.tokenization),
            learning_rate: Some(train.learning_rate),
            adam_beta1: Some(train.adam_beta1),
            adam_beta2: Some(train.adam_beta2),
            adam_eps: Some(train.adam_eps),
            batch_size: Some(train.batch_size),
            total_steps: Some(train.total_steps),
            eval_interval: Some(train.eval_interval),
            seed: Some(train.seed),
            gradient_clip_norm: Some(train.gradient_clip_norm),
        }
    }
}
