//! Layer relevance scores and relevance-guided placement.
//!
//! Skip-one ablations give each control layer a quality metric and a fidelity
//! metric (larger = more damage when skipped). Both are turned into ascending
//! ranks, min-max normalised and averaged:
//!
//! ```text
//! crs_i = ½ · ((F_i − F_min)/(F_max − F_min) + (H_i − H_min)/(H_max − H_min))
//! ```
//!
//! The `k` highest-scoring layers receive control blocks, and the most
//! relevant of those get the fewest (widest) channel groups.

use serde::{Deserialize, Serialize};

use crate::backbone::{PlacementPlan, PlanEntry};
use crate::error::{invalid, Result};

/// Ascending 1-based ranks; equal values are ranked by position.
pub fn rank_ascending(values: &[f64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return invalid("cannot rank an empty sequence");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("cannot rank non-finite values");
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps the lower index first among ties.
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    Ok(ranks)
}

fn min_max_normalise(values: &[f64], metric: &str) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return invalid(format!(
            "{metric} sequence is constant; min-max normalisation would divide by zero"
        ));
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Relevance score over two sequences (normally rank values).
pub fn crs(f: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if f.len() != h.len() {
        return invalid(format!(
            "metric sequences differ in length ({} vs {})",
            f.len(),
            h.len()
        ));
    }
    if f.len() < 2 {
        return invalid("relevance scores need at least two layers");
    }
    let fnorm = min_max_normalise(f, "fid")?;
    let hnorm = min_max_normalise(h, "hdd")?;
    Ok(fnorm
        .iter()
        .zip(&hnorm)
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

pub fn crs_from_ranks(f_ranks: &[usize], h_ranks: &[usize]) -> Result<Vec<f64>> {
    let f: Vec<f64> = f_ranks.iter().map(|&r| r as f64).collect();
    let h: Vec<f64> = h_ranks.iter().map(|&r| r as f64).collect();
    crs(&f, &h)
}

/// What gets min-max normalised inside the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBasis {
    #[default]
    Ranks,
    RawValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub layer_index: usize,
    pub raw_fid: f64,
    pub raw_hdd: f64,
    pub fid_rank: usize,
    pub hdd_rank: usize,
    pub crs: f64,
}

/// Scores `(layer_index, fid, hdd)` rows.
pub fn score_layers(rows: &[(usize, f64, f64)], basis: ScoreBasis) -> Result<Vec<RelevanceRecord>> {
    let fid: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let hdd: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let fr = rank_ascending(&fid)?;
    let hr = rank_ascending(&hdd)?;
    let scores = match basis {
        ScoreBasis::Ranks => crs_from_ranks(&fr, &hr)?,
        ScoreBasis::RawValues => crs(&fid, &hdd)?,
    };
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, &(layer_index, raw_fid, raw_hdd))| RelevanceRecord {
            layer_index,
            raw_fid,
            raw_hdd,
            fid_rank: fr[i],
            hdd_rank: hr[i],
            crs: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    /// Exclusive upper bound on the relevance position `r / (k − 1)`
    /// (0 = most relevant selected layer). The last tier takes the rest.
    pub below: f64,
    pub n_groups: usize,
    pub window_s: usize,
}

/// Channel-group budget by relevance position among the selected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierPolicy {
    pub tiers: Vec<Tier>,
}

impl Default for TierPolicy {
    fn default() -> Self {
        Self {
            tiers: vec![
                Tier {
                    below: 1.0 / 3.0,
                    n_groups: 2,
                    window_s: 2,
                },
                Tier {
                    below: 2.0 / 3.0,
                    n_groups: 4,
                    window_s: 2,
                },
                Tier {
                    below: 1.0,
                    n_groups: 8,
                    window_s: 2,
                },
            ],
        }
    }
}

impl TierPolicy {
    pub fn uniform(n_groups: usize, window_s: usize) -> Self {
        Self {
            tiers: vec![Tier {
                below: 1.0,
                n_groups,
                window_s,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return invalid("tier policy has no tiers");
        }
        let mut prev: Option<&Tier> = None;
        for t in &self.tiers {
            if t.n_groups == 0 || t.window_s == 0 {
                return invalid("tier n_groups and window_s must be positive");
            }
            if !(t.below > 0.0 && t.below <= 1.0) {
                return invalid(format!("tier bound {} outside (0, 1]", t.below));
            }
            if let Some(p) = prev {
                if t.below <= p.below {
                    return invalid("tier bounds must increase");
                }
                if t.n_groups < p.n_groups {
                    return invalid(
                        "more relevant tiers must not use more channel groups than less relevant ones",
                    );
                }
            }
            prev = Some(t);
        }
        Ok(())
    }

    fn tier_for(&self, position: f64) -> &Tier {
        let last = self.tiers.len() - 1;
        self.tiers[..last]
            .iter()
            .find(|t| position < t.below)
            .unwrap_or(&self.tiers[last])
    }
}

/// Indices into `records`, most relevant first; ties go to the lower layer.
pub fn relevance_order(records: &[RelevanceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .crs
            .total_cmp(&records[a].crs)
            .then(records[a].layer_index.cmp(&records[b].layer_index))
    });
    order
}

/// Picks the `k` most relevant layers and tiers them by `policy`.
pub fn plan_placement(
    records: &[RelevanceRecord],
    k: usize,
    policy: &TierPolicy,
) -> Result<PlacementPlan> {
    if k == 0 || k > records.len() {
        return invalid(format!("k = {k} outside [1, {}]", records.len()));
    }
    policy.validate()?;
    let order = relevance_order(records);
    let entries = order[..k]
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let position = if k == 1 {
                0.0
            } else {
                r as f64 / (k - 1) as f64
            };
            let tier = policy.tier_for(position);
            PlanEntry {
                layer: records[i].layer_index,
                n_groups: tier.n_groups,
                window_s: tier.window_s,
            }
        })
        .collect();
    PlacementPlan::new(entries)
}
