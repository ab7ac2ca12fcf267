//! Toy frozen transformer with a relevance-placed control branch.
//!
//! Every backbone block is `adaLN → self-attention → residual → adaLN → FFN →
//! residual`, optionally with cross-attention over a fixed seeded context.
//! Control blocks read the hidden state entering their layer and add their
//! injection to that layer's output.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::rglc::{modulate, rglc_forward_var, Modulation, RglcParams};
use crate::tdsm::{make_shuffle_spec, FeatureGeometry, GroupWindow, ShuffleSpec};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// What a plan places at each position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Rglc,
    /// Full copy of the backbone block (cost accounting only).
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub n_groups: usize,
    pub window_s: usize,
}

/// Control block positions, sorted by layer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub entries: Vec<PlanEntry>,
    #[serde(default)]
    pub block: BlockKind,
}

impl PlacementPlan {
    /// Sorts `entries` by layer and rejects duplicates.
    pub fn new(mut entries: Vec<PlanEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.layer);
        if let Some(w) = entries.windows(2).find(|w| w[0].layer == w[1].layer) {
            return invalid(format!("layer {} planned twice", w[0].layer));
        }
        Ok(Self {
            entries,
            block: BlockKind::Rglc,
        })
    }

    /// Every layer with the same mixer settings.
    pub fn uniform(
        layers: impl IntoIterator<Item = usize>,
        n_groups: usize,
        window_s: usize,
    ) -> Result<Self> {
        Self::new(
            layers
                .into_iter()
                .map(|layer| PlanEntry {
                    layer,
                    n_groups,
                    window_s,
                })
                .collect(),
        )
    }

    pub fn with_block(mut self, block: BlockKind) -> Self {
        self.block = block;
        self
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layers strictly inside `[0, depth)`, unique and ascending.
    pub fn check_layers(&self, depth: usize) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[0].layer >= w[1].layer {
                return invalid("plan layers must be unique and ascending");
            }
        }
        if let Some(e) = self.entries.iter().find(|e| e.layer >= depth) {
            return invalid(format!("plan layer {} outside [0, {depth})", e.layer));
        }
        Ok(())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_layers(cfg.depth)?;
        for e in &self.entries {
            if e.n_groups == 0 || e.n_groups > cfg.geom.d {
                return invalid(format!(
                    "layer {}: {} channel groups invalid for width {}",
                    e.layer, e.n_groups, cfg.geom.d
                ));
            }
            GroupWindow { s: e.window_s }
                .validate(cfg.geom.h, cfg.geom.w)
                .map_err(|err| {
                    crate::Error::InvalidArgument(format!("layer {}: {err}", e.layer))
                })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub geom: FeatureGeometry,
    pub heads: usize,
    pub ffn_mult: usize,
    pub cross_attention: bool,
    /// Length of the fixed context used when cross-attention is on.
    pub context_tokens: usize,
}

impl ModelConfig {
    pub fn toy(depth: usize, geom: FeatureGeometry) -> Self {
        Self {
            depth,
            geom,
            heads: 2,
            ffn_mult: 4,
            cross_attention: false,
            context_tokens: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return invalid("depth must be at least 1");
        }
        if self.heads == 0 || !self.geom.d.is_multiple_of(self.heads) {
            return invalid(format!(
                "width {} not divisible by {} heads",
                self.geom.d, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return invalid("ffn_mult must be positive");
        }
        if self.cross_attention && self.context_tokens == 0 {
            return invalid("cross-attention needs at least one context token");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

impl AttentionParams {
    fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            q: Tensor::randn(&[d, d], std, rng),
            k: Tensor::randn(&[d, d], std, rng),
            v: Tensor::randn(&[d, d], std, rng),
            o: Tensor::randn(&[d, d], std, rng),
        }
    }

    fn param_count(&self) -> usize {
        self.q.numel() + self.k.numel() + self.v.numel() + self.o.numel()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneBlock {
    pub attn: AttentionParams,
    pub cross: Option<AttentionParams>,
    pub ffn_in: Tensor,
    pub ffn_out: Tensor,
    /// Six rows: shift, scale, gate for attention then for the FFN.
    pub modulation: Modulation,
}

impl BackboneBlock {
    fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.geom.d;
        let hidden = cfg.ffn_mult * d;
        let attn = AttentionParams::random(d, rng);
        let cross = cfg.cross_attention.then(|| AttentionParams::random(d, rng));
        Self {
            attn,
            cross,
            ffn_in: Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            ffn_out: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            modulation: Modulation::random(6, d, 0.02, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count()
            + self.cross.as_ref().map_or(0, AttentionParams::param_count)
            + self.ffn_in.numel()
            + self.ffn_out.numel()
            + self.modulation.param_count()
    }
}

/// Multi-head scaled dot-product attention; `x: [N, D]`, `ctx: [M, D]`.
fn attention<'g>(x: Var<'g>, ctx: Var<'g>, p: &AttentionParams, heads: usize) -> Result<Var<'g>> {
    let g = x.graph();
    let n = x.shape()[0];
    let m = ctx.shape()[0];
    let d = x.shape()[1];
    let dh = d / heads;
    let q = x.matmul(g.leaf(p.q.clone()))?;
    let k = ctx.matmul(g.leaf(p.k.clone()))?;
    let v = ctx.matmul(g.leaf(p.v.clone()))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = |rows: usize| -> Vec<usize> {
            (0..rows)
                .flat_map(|r| (0..dh).map(move |c| r * d + h * dh + c))
                .collect()
        };
        let kt: Vec<usize> = (0..dh)
            .flat_map(|c| (0..m).map(move |r| r * d + h * dh + c))
            .collect();
        let qh = q.gather(cols(n), &[n, dh])?;
        let kh = k.gather(kt, &[dh, m])?;
        let vh = v.gather(cols(m), &[m, dh])?;
        outs.push(qh.matmul(kh)?.scale(scale).softmax_rows()?.matmul(vh)?);
    }
    // [heads, N, dh] → [N, D]
    let back: Vec<usize> = (0..n * d)
        .map(|i| {
            let (r, col) = (i / d, i % d);
            (col / dh) * n * dh + r * dh + col % dh
        })
        .collect();
    Var::concat(&outs)?
        .gather(back, &[n, d])?
        .matmul(g.leaf(p.o.clone()))
}

fn block_forward<'g>(
    x: Var<'g>,
    t: Var<'g>,
    block: &BackboneBlock,
    cfg: &ModelConfig,
    context: Option<&Tensor>,
) -> Result<Var<'g>> {
    let g = x.graph();
    let n = x.shape()[0];
    let d = cfg.geom.d;
    let zero = g.leaf(Tensor::zeros(&[d]));
    let mods = block.modulation.vectors(t)?;
    let gated = |branch: Var<'g>, gate: Var<'g>| -> Result<Var<'g>> {
        let ones = g.leaf(Tensor::full(&[d], 1.0));
        branch.mul(gate.add(ones)?.broadcast_rows(n)?)
    };

    let a_in = modulate(x, mods[0], mods[1], zero, true)?;
    let x = x.add(gated(
        attention(a_in, a_in, &block.attn, cfg.heads)?,
        mods[2],
    )?)?;
    let x = match (&block.cross, context) {
        (Some(p), Some(ctx)) => {
            let c_in = x.layer_norm(LAYER_NORM_EPS);
            x.add(attention(c_in, g.leaf(ctx.clone()), p, cfg.heads)?)?
        }
        _ => x,
    };
    let f_in = modulate(x, mods[3], mods[4], zero, true)?;
    let f = f_in
        .matmul(g.leaf(block.ffn_in.clone()))?
        .gelu()
        .matmul(g.leaf(block.ffn_out.clone()))?;
    x.add(gated(f, mods[5])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBlock {
    pub params: RglcParams,
    pub spec: ShuffleSpec,
    pub window: GroupWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledModel {
    pub cfg: ModelConfig,
    pub plan: PlacementPlan,
    pub blocks: Vec<BackboneBlock>,
    /// Fixed text-like context for cross-attention.
    pub context: Option<Tensor>,
    /// Per-token linear embedding of the condition volume.
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub controls: BTreeMap<usize, ControlBlock>,
}

/// Stream ids carved out of the model seed.
const STREAM_BACKBONE: u64 = 0;
const STREAM_CONTROL: u64 = 1;
const STREAM_DEMO: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a model whose control branch is an exact no-op.
pub fn build_model(cfg: &ModelConfig, plan: &PlacementPlan, seed: u64) -> Result<ControlledModel> {
    cfg.validate()?;
    plan.validate(cfg)?;
    if plan.block != BlockKind::Rglc {
        return invalid(
            "only lightweight control blocks can be instantiated; copy plans are for costing",
        );
    }
    let d = cfg.geom.d;
    let mut rng = rng_for(seed, STREAM_BACKBONE);
    let blocks = (0..cfg.depth)
        .map(|_| BackboneBlock::random(cfg, &mut rng))
        .collect();
    let context = cfg
        .cross_attention
        .then(|| Tensor::randn(&[cfg.context_tokens, d], 1.0, &mut rng));
    let embed_w = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    let embed_b = Tensor::zeros(&[d]);

    let mut crng = rng_for(seed, STREAM_CONTROL);
    let mut controls = BTreeMap::new();
    for e in &plan.entries {
        let spec = make_shuffle_spec(cfg.geom, e.n_groups, crng.random())?;
        let params = RglcParams::init(&spec, &mut crng);
        controls.insert(
            e.layer,
            ControlBlock {
                params,
                spec,
                window: GroupWindow { s: e.window_s },
            },
        );
    }
    Ok(ControlledModel {
        cfg: cfg.clone(),
        plan: plan.clone(),
        blocks,
        context,
        embed_w,
        embed_b,
        controls,
    })
}

/// Inputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardInputs {
    pub latent: Tensor,
    pub cond: Tensor,
    pub t_embed: Tensor,
}

impl ForwardInputs {
    pub fn random<R: Rng + ?Sized>(geom: FeatureGeometry, rng: &mut R) -> Self {
        Self {
            latent: Tensor::randn(&geom.shape(), 1.0, rng),
            cond: Tensor::randn(&geom.shape(), 1.0, rng),
            t_embed: Tensor::randn(&[geom.d], 1.0, rng),
        }
    }
}

impl ControlledModel {
    /// Draws both zero-convs of every control block from `N(0, std²)`.
    pub fn demo_init(&mut self, seed: u64, std: f64) {
        let mut rng = rng_for(seed, STREAM_DEMO);
        for cb in self.controls.values_mut() {
            cb.params.demo_init(std, &mut rng);
        }
    }

    pub fn hosted_layers(&self) -> Vec<usize> {
        self.controls.keys().copied().collect()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.blocks.iter().map(BackboneBlock::param_count).sum()
    }

    pub fn control_param_count(&self) -> usize {
        self.controls.values().map(|c| c.params.param_count()).sum()
    }

    /// True when every control injection is identically zero.
    pub fn injections_are_zero(&self) -> bool {
        self.controls
            .values()
            .all(|c| c.params.zc_out.is_all_zero())
    }

    fn check_skip(&self, skip: &BTreeSet<usize>) -> Result<()> {
        if let Some(l) = skip.iter().find(|l| !self.controls.contains_key(l)) {
            return invalid(format!(
                "layer {l} hosts no control block and cannot be skipped"
            ));
        }
        Ok(())
    }

    /// Runs the backbone, adding each hosted control injection unless its
    /// layer is in `skip`. Skipped blocks still advance the control stream.
    pub fn forward(&self, inp: &ForwardInputs, skip: &BTreeSet<usize>) -> Result<Tensor> {
        let geom = self.cfg.geom;
        geom.check(inp.latent.shape(), "latent")?;
        geom.check(inp.cond.shape(), "condition")?;
        if inp.t_embed.shape() != [geom.d] {
            return invalid(format!(
                "timestep embedding has shape {:?}, expected [{}]",
                inp.t_embed.shape(),
                geom.d
            ));
        }
        self.check_skip(skip)?;

        let g = Graph::new();
        let n = geom.tokens();
        let shape = geom.shape();
        let t = g.leaf(inp.t_embed.clone());
        let mut x = g.leaf(inp.latent.clone()).reshape(&[n, geom.d])?;
        let mut c = g
            .leaf(inp.cond.clone())
            .reshape(&[n, geom.d])?
            .matmul(g.leaf(self.embed_w.clone()))?
            .add(g.leaf(self.embed_b.clone()).broadcast_rows(n)?)?
            .reshape(&shape)?;

        for (layer, block) in self.blocks.iter().enumerate() {
            let x_in = x;
            x = block_forward(x_in, t, block, &self.cfg, self.context.as_ref())?;
            if let Some(cb) = self.controls.get(&layer) {
                let (cond, next) =
                    rglc_forward_var(x_in.reshape(&shape)?, c, t, &cb.params, &cb.spec, cb.window)?;
                c = next;
                if !skip.contains(&layer) {
                    x = x.add(cond.reshape(&[n, geom.d])?)?;
                }
            }
        }
        Ok(x.reshape(&shape)?.value().as_ref().clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_index: usize,
    pub proxy_fid: f64,
    pub proxy_hdd: f64,
}

/// Mean squared deviation and largest per-token L2 deviation.
fn deviations(a: &Tensor, b: &Tensor, d: usize) -> (f64, f64) {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    let sup = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    (mse, sup)
}

/// Compares two forward outputs: `(mean squared deviation, max per-token L2
/// deviation)`.
pub fn output_deviation(a: &Tensor, b: &Tensor) -> (f64, f64) {
    deviations(a, b, a.last_dim())
}

/// Skip-one ablation over every hosted layer, averaged over `trials` random
/// input draws derived from `seed`.
pub fn skip_sweep(model: &ControlledModel, trials: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return invalid("skip sweep needs at least one trial");
    }
    if model.injections_are_zero() {
        return invalid(
            "every control injection is zero (fresh initialisation); skipping is undetectable, use demo initialisation",
        );
    }
    let geom = model.cfg.geom;
    let inputs: Vec<ForwardInputs> = (0..trials)
        .map(|i| ForwardInputs::random(geom, &mut rng_for(seed, i as u64)))
        .collect();
    let full: Vec<Tensor> = inputs
        .par_iter()
        .map(|inp| model.forward(inp, &BTreeSet::new()))
        .collect::<Result<_>>()?;

    model
        .hosted_layers()
        .into_par_iter()
        .map(|layer| {
            let skip = BTreeSet::from([layer]);
            let (mut fid, mut hdd) = (0.0, 0.0);
            for (inp, reference) in inputs.iter().zip(&full) {
                let out = model.forward(inp, &skip)?;
                let (m, s) = deviations(reference, &out, geom.d);
                fid += m;
                hdd += s;
            }
            Ok(SweepRow {
                layer_index: layer,
                proxy_fid: fid / trials as f64,
                proxy_hdd: hdd / trials as f64,
            })
        })
        .collect()
}
