//! Run configuration and plan files.

use std::collections::BTreeMap;
use std::path::Path;

use relactrl_core::backbone::{BlockKind, ModelConfig, PlacementPlan, PlanEntry};
use relactrl_core::costmodel::ArchSpec;
use relactrl_core::relevance::{ScoreBasis, TierPolicy};
use relactrl_core::tdsm::FeatureGeometry;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub cross_attention: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, u64>,
}

fn default_ffn_mult() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<u64>,
}

/// How a plan is derived when no plan file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub tiers: TierPolicy,
    #[serde(default)]
    pub basis: ScoreBasis,
}

fn default_k() -> usize {
    11
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            tiers: TierPolicy::default(),
            basis: ScoreBasis::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub placement: PlacementConfig,
}

impl RunConfig {
    /// PixArt-α-sized backbone at 512 px (32×32 latent tokens).
    pub fn pixart() -> Self {
        let a = ArchSpec::pixart_alpha_512();
        Self {
            arch: ArchConfig {
                d: a.d,
                l: a.depth,
                heads: a.heads,
                ffn_mult: a.ffn_mult,
                cross_attention: a.cross_attention,
                extras: BTreeMap::new(),
            },
            geometry: GeometryConfig { h: 32, w: 32 },
            seeds: Seeds::default(),
            placement: PlacementConfig::default(),
        }
    }

    /// 27 narrow blocks over a 4×4 grid; small enough for full sweeps.
    pub fn toy() -> Self {
        Self {
            arch: ArchConfig {
                d: 8,
                l: 27,
                heads: 2,
                ffn_mult: 4,
                cross_attention: false,
                extras: BTreeMap::new(),
            },
            geometry: GeometryConfig { h: 4, w: 4 },
            seeds: Seeds::default(),
            placement: PlacementConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or(path: Option<&Path>, fallback: fn() -> Self) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(fallback()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.arch_spec().validate()?;
        self.model_config()?.validate()?;
        self.placement.tiers.validate()?;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.geometry.h * self.geometry.w
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            d: self.arch.d,
            depth: self.arch.l,
            heads: self.arch.heads,
            ffn_mult: self.arch.ffn_mult,
            tokens: self.tokens(),
            cross_attention: self.arch.cross_attention,
            extras: self.arch.extras.clone(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let geom = FeatureGeometry::new(self.geometry.h, self.geometry.w, self.arch.d)?;
        let mut cfg = ModelConfig::toy(self.arch.l, geom);
        cfg.heads = self.arch.heads;
        cfg.ffn_mult = self.arch.ffn_mult;
        cfg.cross_attention = self.arch.cross_attention;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    entries: Vec<PlanEntry>,
    #[serde(default)]
    block: BlockKind,
}

pub fn load_plan(path: &Path) -> Result<PlacementPlan, CliError> {
    let text = read(path)?;
    let file: PlanFile = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("plan {}: {e}", path.display())))?;
    Ok(PlacementPlan::new(file.entries)?.with_block(file.block))
}

pub(crate) fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))
}
