use sha2::{Digest, Sha256};

use crate::adapt::StrategySpec;
use crate::model::EncoderConfig;

use super::{IoError, Result};

/// Flat, fully-enumerated experiment configuration. Serializes to a
/// canonical `key=value` text with sorted keys; the run digest is the
/// SHA-256 of that text. Unknown keys are rejected on parse.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // model.*
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    pub patch_size: usize,
    pub image_side: usize,
    /// Defaults to 32 (not the encoder type default 16) so every prompt
    /// length in {4, 8, 16, 24} satisfies M+3 <= context_len.
    pub context_len: usize,
    // strategy.*
    pub strategy_kind: String,
    pub strategy_m: usize,
    pub strategy_alpha: f64,
    pub strategy_reduction: usize,
    /// 0 means "use the strategy's default learning rate".
    pub strategy_lr: f64,
    // data.*
    pub train_size: usize,
    pub eval_size: usize,
    pub categories: u32,
    /// Fake families evaluated against fresh REAL samples.
    pub families: Vec<String>,
    /// Ablation sizes are the paper's {20k,40k,60k,80k} divided by this.
    pub scale_divisor: usize,
    // train.*
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_size: usize,
    pub pretrain_lr: f64,
    pub augment: bool,
    // eval.*
    pub qualities: Vec<u32>,
    pub sigmas: Vec<f64>,
    pub kshot: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_embed: 64,
            patch_size: 8,
            image_side: 64,
            context_len: 32,
            strategy_kind: "none".into(),
            strategy_m: 16,
            strategy_alpha: 0.2,
            strategy_reduction: 2,
            strategy_lr: 0.0,
            train_size: 2000,
            eval_size: 200,
            categories: 20,
            families: vec![
                "gan_like".into(),
                "diffusion_like".into(),
                "commercial_like".into(),
            ],
            scale_divisor: 10,
            epochs: 10,
            batch: 32,
            seed: 7,
            pretrain_epochs: 4,
            pretrain_size: 2000,
            pretrain_lr: 3e-4,
            augment: false,
            qualities: vec![75, 50],
            sigmas: vec![1.0, 2.0],
            kshot: 16,
        }
    }
}

impl ExperimentConfig {
    /// Sorted `key=value` lines, one per field.
    pub fn to_canonical_text(&self) -> String {
        let mut pairs = vec![
            ("data.categories".to_string(), self.categories.to_string()),
            ("data.eval_size".into(), self.eval_size.to_string()),
            ("data.families".into(), self.families.join(",")),
            ("data.scale_divisor".into(), self.scale_divisor.to_string()),
            ("data.train_size".into(), self.train_size.to_string()),
            ("eval.kshot".into(), self.kshot.to_string()),
            (
                "eval.qualities".into(),
                self.qualities
                    .iter()
                    .map(|q| q.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "eval.sigmas".into(),
                self.sigmas
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.context_len".into(), self.context_len.to_string()),
            ("model.d_embed".into(), self.d_embed.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.image_side".into(), self.image_side.to_string()),
            ("model.n_heads".into(), self.n_heads.to_string()),
            ("model.n_layers".into(), self.n_layers.to_string()),
            ("model.patch_size".into(), self.patch_size.to_string()),
            ("strategy.alpha".into(), self.strategy_alpha.to_string()),
            ("strategy.kind".into(), self.strategy_kind.clone()),
            ("strategy.lr".into(), self.strategy_lr.to_string()),
            ("strategy.m".into(), self.strategy_m.to_string()),
            (
                "strategy.reduction".into(),
                self.strategy_reduction.to_string(),
            ),
            ("train.augment".into(), self.augment.to_string()),
            ("train.batch".into(), self.batch.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            (
                "train.pretrain_epochs".into(),
                self.pretrain_epochs.to_string(),
            ),
            ("train.pretrain_lr".into(), self.pretrain_lr.to_string()),
            (
                "train.pretrain_size".into(),
                self.pretrain_size.to_string(),
            ),
            ("train.seed".into(), self.seed.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(IoError::MalformedConfigLine(line.to_string()));
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| IoError::BadConfigValue {
                key: key.to_string(),
                message: e.to_string(),
            })
        }
        match key {
            "data.categories" => self.categories = parse(key, value)?,
            "data.eval_size" => self.eval_size = parse(key, value)?,
            "data.families" => {
                let families: Vec<String> =
                    value.split(',').map(|v| v.trim().to_string()).collect();
                for f in &families {
                    crate::data::GeneratorFamily::parse(f).map_err(|e| {
                        IoError::BadConfigValue {
                            key: key.to_string(),
                            message: e.to_string(),
                        }
                    })?;
                }
                self.families = families;
            }
            "data.scale_divisor" => self.scale_divisor = parse(key, value)?,
            "data.train_size" => self.train_size = parse(key, value)?,
            "eval.kshot" => self.kshot = parse(key, value)?,
            "eval.qualities" => {
                self.qualities = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "eval.sigmas" => {
                self.sigmas = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "model.context_len" => self.context_len = parse(key, value)?,
            "model.d_embed" => self.d_embed = parse(key, value)?,
            "model.d_model" => self.d_model = parse(key, value)?,
            "model.image_side" => self.image_side = parse(key, value)?,
            "model.n_heads" => self.n_heads = parse(key, value)?,
            "model.n_layers" => self.n_layers = parse(key, value)?,
            "model.patch_size" => self.patch_size = parse(key, value)?,
            "strategy.alpha" => self.strategy_alpha = parse(key, value)?,
            "strategy.kind" => self.strategy_kind = value.to_string(),
            "strategy.lr" => self.strategy_lr = parse(key, value)?,
            "strategy.m" => self.strategy_m = parse(key, value)?,
            "strategy.reduction" => self.strategy_reduction = parse(key, value)?,
            "train.augment" => self.augment = parse(key, value)?,
            "train.batch" => self.batch = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "train.pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "train.pretrain_size" => self.pretrain_size = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            other => return Err(IoError::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_text().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_embed: self.d_embed,
            patch_size: self.patch_size,
            image_side: self.image_side,
            context_len: self.context_len,
        }
    }

    /// Build the strategy from the `strategy.*` keys ("none" yields None).
    pub fn strategy_spec(&self) -> Result<Option<StrategySpec>> {
        let spec = match self.strategy_kind.as_str() {
            "none" => return Ok(None),
            "probe" => StrategySpec::LinearProbe,
            "prompt" => StrategySpec::PromptTune {
                m: self.strategy_m,
            },
            "adapter" => StrategySpec::Adapter {
                reduction: self.strategy_reduction,
                alpha: self.strategy_alpha,
            },
            "finetune" => StrategySpec::FineTune {
                lr: if self.strategy_lr > 0.0 {
                    self.strategy_lr
                } else {
                    1e-5
                },
            },
            other => {
                return Err(IoError::BadConfigValue {
                    key: "strategy.kind".into(),
                    message: format!("unknown strategy '{other}'"),
                })
            }
        };
        Ok(Some(spec))
    }

    /// Learning-rate override for adaptation training (None = per-strategy default).
    pub fn lr_override(&self) -> Option<f64> {
        (self.strategy_lr > 0.0).then_some(self.strategy_lr)
    }

    /// Paper ablation sizes {20k, 40k, 60k, 80k} scaled down.
    pub fn ablation_sizes(&self) -> Vec<usize> {
        [20_000usize, 40_000, 60_000, 80_000]
            .iter()
            .map(|s| {
                let scaled = s / self.scale_divisor.max(1);
                scaled - scaled % 2
            })
            .collect()
    }
}
