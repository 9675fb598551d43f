//! Top-level configuration bundle. Every field falls back to its module default.

use serde::{Deserialize, Serialize};

use crate::decoder::WorldDecoderConfig;
use crate::error::Result;
use crate::grid::GridConfig;
use crate::metrics::EvalConfig;
use crate::planner::PlannerConfig;
use crate::synthworld::RasterOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub grid: GridConfig,
    pub decoder: WorldDecoderConfig,
    pub planner: PlannerConfig,
    pub eval: EvalConfig,
    pub raster: RasterOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::desk(),
            decoder: WorldDecoderConfig::default(),
            planner: PlannerConfig::default(),
            eval: EvalConfig::default(),
            raster: RasterOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.planner.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
