// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config resolution: command-line flag, then TOML config file, then the
//! built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use swea_core::osfusion::FusionConfig;
use swea_core::toylm::{ModelConfig, TrainConfig};

use crate::args::FusionFlags;

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub fn resolve_fusion(flags: &FusionFlags) -> Result<FusionConfig> {
    let mut c = ConfigFile::load(flags.config.as_deref())?.fusion;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = flags.$flag { c.$field = v; })*
        };
    }
    set!(
        alpha => alpha,
        beta => beta,
        gamma => gamma,
        t_threshold => t_threshold,
        n => riemann_n,
        steps => opt_steps,
        lr => learning_rate,
        weight_decay => weight_decay,
        clamp => clamp_factor,
        prefixes => prefix_count,
        prefix_length => prefix_length,
        seed => seed
    );
    c.validate()?;
    Ok(c)
}
