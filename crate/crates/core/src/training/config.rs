use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, RoutingMode};
use crate::error::{Error, Result};
use crate::generator::GenConfig;
use crate::discriminators::{DimConfig, DstConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    StepDecay,
    Warmup,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::StepDecay => "step_decay",
            Scheduler::Warmup => "warmup",
        })
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step_decay" | "step-decay" => Ok(Scheduler::StepDecay),
            "warmup" => Ok(Scheduler::Warmup),
            other => Err(Error::Config(format!("unknown scheduler {other:?}"))),
        }
    }
}

/// Network size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small widths for tests and quick experiments.
    Tiny,
    Desk,
    /// Desk networks with the large transformer encoder.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_dim: f64,
    pub lr_dst: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_every: usize,
    pub scheduler: Scheduler,
    pub warmup_steps: u64,
    pub routing_mode: RoutingMode,
    pub label_smooth: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub profile: Profile,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Capacity of the in-memory loss history.
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_dim: 4e-4,
            lr_dst: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            epochs: 30,
            decay_every: 20,
            scheduler: Scheduler::StepDecay,
            warmup_steps: 4000,
            routing_mode: RoutingMode::Impartial,
            label_smooth: 0.9,
            kl_weight: 1.0,
            seed: 0,
            profile: Profile::Desk,
            precision: Precision::F32,
            checkpoint_every: 5,
            history_len: 1000,
        }
    }
}

const LR_KEYS: [&str; 3] = ["lr_g", "lr_dim", "lr_dst"];

impl TrainConfig {
    /// Defaults overridden by the keys of `table`. Picking the warmup
    /// scheduler while also setting per-network learning rates is rejected,
    /// since warmup ignores them.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.scheduler == Scheduler::Warmup {
            let explicit: Vec<&str> = LR_KEYS.iter().copied().filter(|k| table.contains_key(*k)).collect();
            if !explicit.is_empty() {
                return Err(Error::Config(format!(
                    "scheduler = warmup conflicts with explicit {}",
                    explicit.join(", ")
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_g", self.lr_g), ("lr_dim", self.lr_dim), ("lr_dst", self.lr_dst)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.label_smooth > 0.5 && self.label_smooth <= 1.0) {
            return Err(Error::Config(format!("label_smooth {} outside (0.5, 1]", self.label_smooth)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("batch_size, decay_every and warmup_steps must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Flat `key = value` rendering accepted by [`TrainConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(e.message().to_string()))
}

/// Parses a `key=value` override; bare words are taken as strings.
pub fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match parse_table(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Architecture of every network, fixed for the life of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GenConfig,
    pub dim: DimConfig,
    pub dst: DstConfig,
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile, frames: usize, image_h: usize, image_w: usize, vocab_size: usize) -> Result<Self> {
        if image_h != image_w || image_h < 16 || !image_h.is_power_of_two() {
            return Err(Error::Config(format!("images must be square powers of two >= 16, got {image_h}x{image_w}")));
        }
        let blocks = (image_h / 4).trailing_zeros() as usize;
        let encoder = match profile {
            Profile::Tiny => EncoderConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 1,
                d_ca: 16,
                d_embed: 16,
                vocab_size,
            },
            Profile::Desk => EncoderConfig::desk(vocab_size),
            Profile::Paper => EncoderConfig::paper(vocab_size),
        };
        let (seed_c, z_dim, dim_base, dst_base, d_shared) = match profile {
            Profile::Tiny => (32, 16, 8, 4, 16),
            Profile::Desk | Profile::Paper => (128, 64, 32, 16, 128),
        };
        let cfg = Self {
            encoder,
            generator: GenConfig::for_output(seed_c, z_dim, image_h, image_w, encoder.d_model),
            dim: DimConfig {
                n_down_blocks: blocks,
                base_channels: dim_base,
                image_h,
                image_w,
                ..DimConfig::desk(encoder.d_model, encoder.d_embed)
            },
            dst: DstConfig {
                d_shared,
                n_down_blocks: blocks,
                base_channels: dst_base,
                image_h,
                image_w,
                ..DstConfig::desk(encoder.d_embed, frames)
            },
            frames,
            image_h,
            image_w,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.generator.validate()?;
        self.dim.validate()?;
        self.dst.validate()?;
        let g = &self.generator;
        if g.out_h != self.image_h || g.out_w != self.image_w || g.d_model != self.encoder.d_model {
            return Err(Error::Config("generator does not match image size or encoder width".into()));
        }
        if self.dst.frames != self.frames {
            return Err(Error::FrameMismatch {
                expected: self.frames,
                found: self.dst.frames,
            });
        }
        Ok(())
    }
}
