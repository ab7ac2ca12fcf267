//! Closed-form parameter and FLOP accounting.
//!
//! Conventions:
//! * one multiply-accumulate = 2 FLOPs;
//! * projections carry no bias;
//! * each modulated block holds two `[D]` vectors (weight, bias) per
//!   modulation row: 6 rows for a transformer block, 3 for a control block;
//! * cross-attention costs `4D²` parameters and `8ND²` FLOPs, with the text
//!   context length folded into that constant;
//! * ratios compare block sums only. Embedders and other glue live in
//!   [`ArchSpec::extras`] and are reported separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{BlockKind, PlacementPlan};
use crate::error::{invalid, Result};
use crate::tdsm::split_widths;

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs";

pub const BACKBONE_MODULATION_ROWS: usize = 6;
pub const CONTROL_MODULATION_ROWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub tokens: usize,
    pub cross_attention: bool,
    #[serde(default)]
    pub extras: BTreeMap<String, u64>,
}

impl ArchSpec {
    /// PixArt-α-sized backbone at 512 px: 27 controllable blocks of width
    /// 1152 over 32×32 latent tokens.
    pub fn pixart_alpha_512() -> Self {
        Self {
            d: 1152,
            depth: 27,
            heads: 16,
            ffn_mult: 4,
            tokens: 1024,
            cross_attention: true,
            extras: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.depth == 0
            || self.heads == 0
            || self.ffn_mult == 0
            || self.tokens == 0
        {
            return invalid("architecture extents must all be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return invalid(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            ));
        }
        Ok(())
    }
}

/// Kind of block being costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostedBlock {
    Backbone,
    Copy,
    Rglc { n_groups: usize, window_s: usize },
}

fn sum_sq_widths(d: usize, n: usize) -> Result<u64> {
    Ok(split_widths(d, n)?.iter().map(|&w| (w * w) as u64).sum())
}

pub fn block_params(spec: &ArchSpec, kind: CostedBlock) -> Result<u64> {
    let d = spec.d as u64;
    Ok(match kind {
        CostedBlock::Backbone | CostedBlock::Copy => {
            let cross = if spec.cross_attention { 4 * d * d } else { 0 };
            4 * d * d
                + cross
                + 2 * spec.ffn_mult as u64 * d * d
                + 2 * BACKBONE_MODULATION_ROWS as u64 * d
        }
        CostedBlock::Rglc { n_groups, .. } => {
            2 * d * d
                + 4 * sum_sq_widths(spec.d, n_groups)?
                + 2 * CONTROL_MODULATION_ROWS as u64 * d
        }
    })
}

/// Dense single-head attention over `n` tokens: four projections plus the
/// score and value products.
pub fn full_attention_flops(n: u64, d: u64) -> u64 {
    8 * n * d * d + 4 * n * n * d
}

/// Windowed attention over `n_groups` channel groups with `s × s` windows.
pub fn grouped_attention_flops(n: u64, d: usize, n_groups: usize, s: usize) -> Result<u64> {
    let s2 = (s * s) as u64;
    if s == 0 || !n.is_multiple_of(s2) {
        return invalid(format!("window of {s2} tokens does not tile {n} tokens"));
    }
    let windows = n / s2;
    Ok(split_widths(d, n_groups)?
        .iter()
        .map(|&w| {
            let w = w as u64;
            windows * (8 * s2 * w * w + 4 * s2 * s2 * w)
        })
        .sum())
}

pub fn block_flops(spec: &ArchSpec, kind: CostedBlock, n: u64) -> Result<u64> {
    if n == 0 {
        return invalid("token count must be at least 1");
    }
    let d = spec.d as u64;
    Ok(match kind {
        CostedBlock::Backbone | CostedBlock::Copy => {
            let cross = if spec.cross_attention {
                8 * n * d * d
            } else {
                0
            };
            full_attention_flops(n, d) + cross + 4 * spec.ffn_mult as u64 * n * d * d
        }
        CostedBlock::Rglc { n_groups, window_s } => {
            grouped_attention_flops(n, spec.d, n_groups, window_s)? + 4 * n * d * d
        }
    })
}

/// Reference the added cost is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Baseline {
    /// Copy blocks on the first `k` layers.
    CopyFirstK(usize),
    None,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::CopyFirstK(13)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub layer: usize,
    pub block: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub tokens: u64,
    pub components: Vec<ComponentCost>,
    pub added_params: u64,
    pub added_flops: u64,
    pub backbone_params: u64,
    pub backbone_flops: u64,
    pub extras_params: u64,
    pub param_ratio_vs_backbone: f64,
    pub flop_ratio_vs_backbone: f64,
    pub baseline: Baseline,
    pub baseline_params: Option<u64>,
    pub baseline_flops: Option<u64>,
    pub param_ratio_vs_copy_baseline: Option<f64>,
    pub flop_ratio_vs_copy_baseline: Option<f64>,
}

fn costed_kind(block: BlockKind, n_groups: usize, window_s: usize) -> CostedBlock {
    match block {
        BlockKind::Rglc => CostedBlock::Rglc { n_groups, window_s },
        BlockKind::Copy => CostedBlock::Copy,
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Costs `plan` at the spec's own token count.
pub fn plan_cost(spec: &ArchSpec, plan: &PlacementPlan, baseline: Baseline) -> Result<CostReport> {
    plan_flops_with(spec, plan, spec.tokens as u64, baseline)
}

/// Costs `plan` at `n` tokens against copies of the first 13 blocks (or all
/// blocks for shallower backbones).
pub fn plan_flops(spec: &ArchSpec, plan: &PlacementPlan, n: u64) -> Result<CostReport> {
    plan_flops_with(spec, plan, n, Baseline::CopyFirstK(spec.depth.min(13)))
}

pub fn plan_flops_with(
    spec: &ArchSpec,
    plan: &PlacementPlan,
    n: u64,
    baseline: Baseline,
) -> Result<CostReport> {
    spec.validate()?;
    if n == 0 {
        return invalid("token count must be at least 1");
    }
    plan.check_layers(spec.depth)?;
    let mut components = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        let kind = costed_kind(plan.block, e.n_groups, e.window_s);
        components.push(ComponentCost {
            layer: e.layer,
            block: match kind {
                CostedBlock::Rglc { n_groups, window_s } => {
                    format!("rglc(n={n_groups}, s={window_s})")
                }
                _ => "copy".to_string(),
            },
            params: block_params(spec, kind)?,
            flops: block_flops(spec, kind, n)?,
        });
    }
    let added_params = components.iter().map(|c| c.params).sum();
    let added_flops = components.iter().map(|c| c.flops).sum();
    let depth = spec.depth as u64;
    let backbone_params = depth * block_params(spec, CostedBlock::Backbone)?;
    let backbone_flops = depth * block_flops(spec, CostedBlock::Backbone, n)?;

    let (baseline_params, baseline_flops) = match baseline {
        Baseline::CopyFirstK(k) => {
            if k == 0 || k > spec.depth {
                return invalid(format!(
                    "baseline copy count {k} outside [1, {}]",
                    spec.depth
                ));
            }
            let k = k as u64;
            (
                Some(k * block_params(spec, CostedBlock::Copy)?),
                Some(k * block_flops(spec, CostedBlock::Copy, n)?),
            )
        }
        Baseline::None => (None, None),
    };

    Ok(CostReport {
        convention: FLOP_CONVENTION.to_string(),
        tokens: n,
        components,
        added_params,
        added_flops,
        backbone_params,
        backbone_flops,
        extras_params: spec.extras.values().sum(),
        param_ratio_vs_backbone: ratio(added_params, backbone_params),
        flop_ratio_vs_backbone: ratio(added_flops, backbone_flops),
        baseline,
        baseline_params,
        baseline_flops,
        param_ratio_vs_copy_baseline: baseline_params.map(|b| ratio(added_params, b)),
        flop_ratio_vs_copy_baseline: baseline_flops.map(|b| ratio(added_flops, b)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PlanEntry;

    fn tiny(d: usize) -> ArchSpec {
        ArchSpec {
            d,
            depth: 4,
            heads: 1,
            ffn_mult: 4,
            tokens: 4,
            cross_attention: false,
            extras: BTreeMap::new(),
        }
    }

    #[test]
    fn hand_counted_control_block() {
        // Two 2×2 zero-convs + four 2×2 projections, modulation excluded.
        let p = block_params(
            &tiny(2),
            CostedBlock::Rglc {
                n_groups: 1,
                window_s: 1,
            },
        )
        .unwrap();
        assert_eq!(p - 2 * CONTROL_MODULATION_ROWS as u64 * 2, 24);
    }

    #[test]
    fn degenerate_grouping_equals_full_attention() {
        let g = grouped_attention_flops(64, 12, 1, 8).unwrap();
        assert_eq!(g, full_attention_flops(64, 12));
    }

    #[test]
    fn grouping_saves_and_savings_grow() {
        let full = full_attention_flops(256, 32);
        let mut prev = u64::MAX;
        for n in [1, 2, 4, 8] {
            let g = grouped_attention_flops(256, 32, n, 2).unwrap();
            assert!(g < full);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn empty_plan_costs_nothing() {
        let r = plan_cost(&tiny(4), &PlacementPlan::default(), Baseline::CopyFirstK(2)).unwrap();
        assert_eq!(r.added_params, 0);
        assert_eq!(r.added_flops, 0);
        assert_eq!(r.param_ratio_vs_backbone, 0.0);
    }

    #[test]
    fn bad_inputs() {
        let plan = PlacementPlan::new(vec![PlanEntry {
            layer: 9,
            n_groups: 1,
            window_s: 1,
        }])
        .unwrap();
        assert!(plan_cost(&tiny(4), &plan, Baseline::None).is_err());
        assert!(plan_cost(&tiny(4), &PlacementPlan::default(), Baseline::CopyFirstK(5)).is_err());
        assert!(plan_flops(&tiny(4), &PlacementPlan::default(), 0).is_err());
        assert!(grouped_attention_flops(10, 4, 1, 2).is_err());
    }
}
