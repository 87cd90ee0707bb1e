//! TOML training configuration.

use std::fs;
use std::path::{Path, PathBuf};

use a3_core::io::{Tokenizer, BOS};
use a3_core::train::CurriculumPlan;
use a3_core::ModelConfig;
use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub plan: CurriculumPlan,
    pub data: DataSection,
    pub out: OutSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest input including BOS; defaults to `plan.seq_len + 1`.
    pub max_len: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Byte,
    /// Characters seen in the training file.
    Char,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default)]
    pub mode: TokenizerMode,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    pub dir: PathBuf,
}

impl TrainConfig {
    /// Reads `path`; relative data and output paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        if cfg.out.dir.is_relative() {
            cfg.out.dir = base.join(&cfg.out.dir);
        }
        Ok(cfg)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(match self.data.mode {
            TokenizerMode::Byte => Tokenizer::Byte,
            TokenizerMode::Char => {
                let text = fs::read_to_string(&self.data.path)
                    .with_context(|| format!("reading {}", self.data.path.display()))?;
                Tokenizer::char_from_text(&text)
            }
        })
    }

    pub fn model_config(&self, tokenizer: &Tokenizer) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_len: self.model.max_len.unwrap_or(self.plan.seq_len + 1),
            bos: BOS,
            pad: None,
        }
    }

    /// The plan with the top-level seed applied.
    pub fn plan(&self) -> CurriculumPlan {
        CurriculumPlan {
            seed: self.seed,
            ..self.plan.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: TrainConfig = toml::from_str(
            r#"
            seed = 3
            [data]
            path = "a.txt"
            [out]
            dir = "run"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.plan().seed, 3);
        assert_eq!(cfg.model_config(&Tokenizer::Byte).max_len, 257);
        assert_eq!(cfg.data.mode, TokenizerMode::Byte);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainConfig>("[data]\npath='a'\nmod='char'\n[out]\ndir='x'\n");
        assert!(err.is_err());
    }
}
