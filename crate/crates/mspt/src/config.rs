use serde::{Deserialize, Serialize};

use crate::data::TokenLimits;
use crate::error::{Error, Result};
use crate::tensor::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Hard,
    Soft,
}

/// Ablation variants. `NoQa` builds a model with no user-content
/// parameters at all; `NoPga` keeps the Q&A pipeline but replaces the
/// product-guided attention weights with uniform ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoQa,
    NoPga,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaKind {
    Tanh,
    Sigmoid,
}

/// Which fused representation conditions the decoder at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceConditioning {
    Prior,
    PosteriorIfAvailable,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Paths {
    pub train: Option<String>,
    pub valid: Option<String>,
    pub test: Option<String>,
    pub out_dir: Option<String>,
}

/// Everything a run needs; serialized next to every checkpoint so a run
/// is reproducible from (config, seed, corpus).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    // model dimensions
    pub embed_dim: usize,
    /// LSTM hidden size per direction; the model width is `2 * hidden`.
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,

    // fusion and variants
    pub lambda1: f64,
    pub learn_lambda1: bool,
    pub lambda2: f64,
    pub fusion: FusionMode,
    pub variant: Variant,
    pub sigma: SigmaKind,
    pub detach_posterior: bool,
    pub inference: InferenceConditioning,
    pub residual_ln: bool,
    pub share_qa_lstm: bool,
    pub bow_autoregressive: bool,
    pub qa_cap: usize,

    // loss weights (the objective is an unweighted sum by default)
    pub w_kl: f64,
    pub w_nll: f64,
    pub w_reg: f64,

    // tokenization
    pub limits: TokenLimits,
    pub vocab_max: usize,
    pub vocab_min_freq: usize,

    // training
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,

    // generation
    pub beam_width: usize,
    pub max_gen_len: usize,
    pub length_norm: f64,

    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            embed_dim: 64,
            hidden: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            lambda1: 0.5,
            learn_lambda1: false,
            lambda2: 0.5,
            fusion: FusionMode::Soft,
            variant: Variant::Full,
            sigma: SigmaKind::Tanh,
            detach_posterior: false,
            inference: InferenceConditioning::Prior,
            residual_ln: true,
            share_qa_lstm: false,
            bow_autoregressive: false,
            qa_cap: 32,
            w_kl: 1.0,
            w_nll: 1.0,
            w_reg: 1.0,
            limits: TokenLimits::default(),
            vocab_max: 2000,
            vocab_min_freq: 1,
            optimizer: OptimizerKind::Adam,
            lr: 2e-3,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 42,
            beam_width: 1,
            max_gen_len: 32,
            length_norm: 0.0,
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Width of every hidden representation: the Bi-LSTM output.
    pub fn model_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.model_dim() {
            return Err(Error::Config(format!(
                "embed_dim {} must equal 2*hidden = {} so decoder embeddings match the model width",
                self.embed_dim,
                self.model_dim()
            )));
        }
        if self.model_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim(),
                self.heads
            )));
        }
        if self.model_dim() % 2 != 0 {
            return Err(Error::Config("model dim must be even for positional encoding".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.max_gen_len == 0 {
            return Err(Error::Config(
                "batch_size, beam_width and max_gen_len must be >= 1".into(),
            ));
        }
        if self.qa_cap == 0 {
            return Err(Error::Config("qa_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON form, hex-encoded. Embedded in every
    /// artifact so runs can verify they were produced by this exact
    /// configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::tensor::fnv1a_str(&json))
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("config {}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn mismatched_embed_dim_rejected() {
        let cfg = ExperimentConfig {
            embed_dim: 32,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let cfg = ExperimentConfig {
            lambda2: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            lr: 1e-4,
            ..Default::default()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn variant_names_round_trip_kebab_case() {
        let json = serde_json::to_string(&Variant::NoQa).unwrap();
        assert_eq!(json, "\"no-qa\"");
        let v: Variant = serde_json::from_str("\"no-pga\"").unwrap();
        assert_eq!(v, Variant::NoPga);
    }
}
