//! Flat key=value run configuration. Every key has a default; unknown
//! keys are rejected so ablation logs stay diff-clean.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model_dim: usize,
    pub model_blocks: usize,
    pub model_patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub support_k: usize,
    /// Defaults to the support-set size when not given.
    pub bank_capacity: Option<usize>,
    pub loss_dice: f32,
    pub loss_ce: f32,
    pub loss_kl: f32,
    pub train_lr: f32,
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model_dim: 32,
            model_blocks: 2,
            model_patch: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            support_k: 4,
            bank_capacity: None,
            loss_dice: 1.0,
            loss_ce: 1.0,
            loss_kl: 0.1,
            train_lr: 1e-3,
            train_steps: 2000,
            seed: 42,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("config key {k}: bad {what} {v:?}"));
            let as_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("integer"));
            let as_f32 = |v: &str| {
                v.parse::<f32>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad("number"))
            };
            match k {
                "model.dim" => cfg.model_dim = as_usize(v)?,
                "model.blocks" => cfg.model_blocks = as_usize(v)?,
                "model.patch" => cfg.model_patch = as_usize(v)?,
                "lora.rank" => cfg.lora_rank = as_usize(v)?,
                "lora.alpha" => cfg.lora_alpha = as_f32(v)?,
                "support.k" => cfg.support_k = as_usize(v)?,
                "bank.capacity" => cfg.bank_capacity = Some(as_usize(v)?),
                "loss.dice" => cfg.loss_dice = as_f32(v)?,
                "loss.ce" => cfg.loss_ce = as_f32(v)?,
                "loss.kl" => cfg.loss_kl = as_f32(v)?,
                "train.lr" => cfg.train_lr = as_f32(v)?,
                "train.steps" => cfg.train_steps = as_usize(v)?,
                "seed" => {
                    cfg.seed = v.parse::<u64>().map_err(|_| bad("seed"))?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Canonical serialized form (defaults resolved).
    pub fn render(&self) -> String {
        format!(
            "model.dim={}\nmodel.blocks={}\nmodel.patch={}\nlora.rank={}\nlora.alpha={}\n\
             support.k={}\nbank.capacity={}\nloss.dice={}\nloss.ce={}\nloss.kl={}\n\
             train.lr={}\ntrain.steps={}\nseed={}\n",
            self.model_dim,
            self.model_blocks,
            self.model_patch,
            self.lora_rank,
            self.lora_alpha,
            self.support_k,
            self.resolved_capacity(),
            self.loss_dice,
            self.loss_ce,
            self.loss_kl,
            self.train_lr,
            self.train_steps,
            self.seed
        )
    }

    pub fn resolved_capacity(&self) -> usize {
        // the bank budget defaults to the support-set size
        self.bank_capacity.unwrap_or(self.support_k)
    }

    pub fn model_config(&self, in_channels: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            dim: self.model_dim,
            blocks: self.model_blocks,
            patch: self.model_patch,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            in_channels,
            classes,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            lr: self.train_lr,
            support_k: self.support_k,
            bank_capacity: self.resolved_capacity(),
            loss: LossConfig { dice: self.loss_dice, ce: self.loss_ce, kl: self.loss_kl },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}
