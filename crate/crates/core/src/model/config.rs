// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy model geometry and named presets.
//!
//! The `kimi-like`, `qwen-like` and `llama-like` presets copy the per-layer
//! expert counts of the corresponding production architectures; everything
//! else (hidden size, vocabulary, expert width) stays at desk scale.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::ExpertGrid;

/// Environment variable naming a directory of extra `<name>.json` presets.
pub const PRESET_DIR_ENV: &str = "MOE_LENS_PRESET_DIR";

/// Names of the built-in presets.
pub const PRESET_NAMES: [&str; 4] = ["desk", "kimi-like", "qwen-like", "llama-like"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyMoEConfig {
    pub num_layers: usize,
    pub num_routed_experts_per_layer: usize,
    pub top_k: usize,
    pub num_shared_experts_per_layer: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Width of the inner layer of each expert feed-forward block.
    pub expert_ffn_dim: usize,
    pub seed: u64,
}

impl ToyMoEConfig {
    /// 4 layers, 8 routed experts, Top-2, hidden size 32.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_layers: 4,
            num_routed_experts_per_layer: 8,
            top_k: 2,
            num_shared_experts_per_layer: 0,
            hidden_dim: 32,
            vocab_size: 8,
            expert_ffn_dim: 16,
            seed,
        }
    }

    /// 27 layers, 64 routed experts, Top-6, 2 shared experts.
    pub fn kimi_like(seed: u64) -> Self {
        Self::scaled(27, 64, 6, 2, seed)
    }

    /// 48 layers, 128 routed experts, Top-8, no shared experts.
    pub fn qwen_like(seed: u64) -> Self {
        Self::scaled(48, 128, 8, 0, seed)
    }

    /// 48 layers, 16 routed experts, Top-1, 1 shared expert.
    pub fn llama_like(seed: u64) -> Self {
        Self::scaled(48, 16, 1, 1, seed)
    }

    fn scaled(layers: usize, experts: usize, k: usize, shared: usize, seed: u64) -> Self {
        Self {
            num_layers: layers,
            num_routed_experts_per_layer: experts,
            top_k: k,
            num_shared_experts_per_layer: shared,
            ..Self::desk(seed)
        }
    }

    /// Resolves a preset by name. Built-in names win; otherwise
    /// `$MOE_LENS_PRESET_DIR/<name>.json` is consulted, with `seed`
    /// overriding the file's seed.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "kimi-like" => Ok(Self::kimi_like(seed)),
            "qwen-like" => Ok(Self::qwen_like(seed)),
            "llama-like" => Ok(Self::llama_like(seed)),
            other => {
                let Some(dir) = std::env::var_os(PRESET_DIR_ENV) else {
                    return Err(Error::UnknownPreset(other.to_string()));
                };
                let path = PathBuf::from(dir).join(format!("{other}.json"));
                if !path.is_file() {
                    return Err(Error::UnknownPreset(other.to_string()));
                }
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut cfg: Self = serde_json::from_str(&text)?;
                cfg.seed = seed;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn grid(&self) -> ExpertGrid {
        ExpertGrid::new(self.num_layers, self.num_routed_experts_per_layer)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_routed_experts_per_layer", self.num_routed_experts_per_layer),
            ("top_k", self.top_k),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("expert_ffn_dim", self.expert_ffn_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.top_k > self.num_routed_experts_per_layer {
            return Err(Error::Config(format!(
                "top_k {} exceeds {} routed experts per layer",
                self.top_k, self.num_routed_experts_per_layer
            )));
        }
        Ok(())
    }
}
