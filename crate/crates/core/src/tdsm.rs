//! Two-dimensional shuffle mixer.
//!
//! The input volume `[H, W, D]` is split into `n` random channel groups, the
//! scalar elements of each group are permuted across the whole
//! `H × W × d_i` volume, and single-head attention runs inside `s × s` token
//! windows of each permuted group. The permutation is then undone so the
//! output lines up with the input token and channel layout.
//!
//! Element positions are flat row-major offsets into a group volume
//! `[H, W, d_i]`. Offset `p` sits at row `p / (W·d_i)`, column `p % (W·d_i)`
//! of the flattened `H × (W·d_i)` grid the distance analysis works on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl FeatureGeometry {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return invalid(format!(
                "geometry extents must be positive, got {h}×{w}×{d}"
            ));
        }
        Ok(Self { h, w, d })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub(crate) fn check(&self, t: &[usize], what: &str) -> Result<()> {
        if t != self.shape() {
            return invalid(format!(
                "{what} has shape {t:?}, expected {:?}",
                self.shape()
            ));
        }
        Ok(())
    }
}

/// Channel widths for an equal split of `d` into `n` groups; the remainder
/// goes to the leading groups.
pub fn split_widths(d: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > d {
        return invalid(format!("group count {n} must lie in [1, {d}]"));
    }
    let base = d / n;
    let rem = d % n;
    Ok((0..n).map(|i| base + usize::from(i < rem)).collect())
}

fn random_perm(len: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng);
    p
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Random channel partition plus per-group element permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSpec {
    geom: FeatureGeometry,
    widths: Vec<usize>,
    /// Channels of each group, in within-group slot order.
    group_channels: Vec<Vec<usize>>,
    /// `channel → (group, slot)`.
    channel_assignment: Vec<(usize, usize)>,
    /// `element_perms[g][p]` is the pre-shuffle offset that lands at
    /// post-shuffle offset `p` of group `g`.
    element_perms: Vec<Vec<usize>>,
    inverse_perms: Vec<Vec<usize>>,
    seed: Option<u64>,
}

impl ShuffleSpec {
    /// Draws a spec. Stream 0 of the ChaCha generator keyed by `seed` orders
    /// the channels; stream `1 + g` permutes group `g`.
    pub fn random(geom: FeatureGeometry, n: usize, seed: u64) -> Result<Self> {
        let widths = split_widths(geom.d, n)?;
        let order = random_perm(geom.d, seed, 0);
        let perms = widths
            .iter()
            .enumerate()
            .map(|(g, &dg)| random_perm(geom.tokens() * dg, seed, 1 + g as u64))
            .collect();
        Ok(Self::assemble(geom, widths, &order, perms, Some(seed)))
    }

    /// Contiguous channel slices and no element movement.
    pub fn identity(geom: FeatureGeometry, n: usize) -> Result<Self> {
        let widths = split_widths(geom.d, n)?;
        let order: Vec<usize> = (0..geom.d).collect();
        let perms = widths
            .iter()
            .map(|&dg| (0..geom.tokens() * dg).collect())
            .collect();
        Ok(Self::assemble(geom, widths, &order, perms, None))
    }

    fn assemble(
        geom: FeatureGeometry,
        widths: Vec<usize>,
        channel_order: &[usize],
        element_perms: Vec<Vec<usize>>,
        seed: Option<u64>,
    ) -> Self {
        let mut group_channels = Vec::with_capacity(widths.len());
        let mut channel_assignment = vec![(0, 0); geom.d];
        let mut offset = 0;
        for (g, &dg) in widths.iter().enumerate() {
            let chans = channel_order[offset..offset + dg].to_vec();
            for (slot, &c) in chans.iter().enumerate() {
                channel_assignment[c] = (g, slot);
            }
            group_channels.push(chans);
            offset += dg;
        }
        let inverse_perms = element_perms.iter().map(|p| invert(p)).collect();
        Self {
            geom,
            widths,
            group_channels,
            channel_assignment,
            element_perms,
            inverse_perms,
            seed,
        }
    }

    pub fn geometry(&self) -> FeatureGeometry {
        self.geom
    }

    pub fn groups(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn group_channels(&self, g: usize) -> &[usize] {
        &self.group_channels[g]
    }

    pub fn channel_assignment(&self) -> &[(usize, usize)] {
        &self.channel_assignment
    }

    pub fn element_perm(&self, g: usize) -> &[usize] {
        &self.element_perms[g]
    }

    pub fn inverse_perm(&self, g: usize) -> &[usize] {
        &self.inverse_perms[g]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// For each post-shuffle offset of group `g`, the flat offset into the
    /// `[H, W, D]` input it reads from.
    pub fn gather_index(&self, g: usize) -> Vec<usize> {
        let dg = self.widths[g];
        let chans = &self.group_channels[g];
        self.element_perms[g]
            .iter()
            .map(|&q| (q / dg) * self.geom.d + chans[q % dg])
            .collect()
    }

    /// For each flat offset of the `[H, W, D]` output, its position inside the
    /// concatenation of all group volumes.
    pub fn recovery_index(&self) -> Vec<usize> {
        let mut group_offset = Vec::with_capacity(self.widths.len());
        let mut acc = 0;
        for &dg in &self.widths {
            group_offset.push(acc);
            acc += self.geom.tokens() * dg;
        }
        let d = self.geom.d;
        (0..self.geom.tokens() * d)
            .map(|flat| {
                let (token, channel) = (flat / d, flat % d);
                let (g, slot) = self.channel_assignment[channel];
                let q = token * self.widths[g] + slot;
                group_offset[g] + self.inverse_perms[g][q]
            })
            .collect()
    }
}

/// Draws a [`ShuffleSpec`]; a pure function of `(geom, n, seed)`.
pub fn make_shuffle_spec(geom: FeatureGeometry, n: usize, seed: u64) -> Result<ShuffleSpec> {
    ShuffleSpec::random(geom, n, seed)
}

pub fn shuffle(c_in: &Tensor, spec: &ShuffleSpec) -> Result<Vec<Tensor>> {
    spec.geom.check(c_in.shape(), "shuffle input")?;
    let g = spec.geom;
    (0..spec.groups())
        .map(|i| c_in.gather(&spec.gather_index(i), &[g.h, g.w, spec.widths[i]]))
        .collect()
}

fn check_group_shapes(shapes: &[Vec<usize>], spec: &ShuffleSpec) -> Result<()> {
    let g = spec.geom;
    if shapes.len() != spec.groups() {
        return invalid(format!(
            "expected {} group volumes, got {}",
            spec.groups(),
            shapes.len()
        ));
    }
    for (i, (shape, &dg)) in shapes.iter().zip(&spec.widths).enumerate() {
        if shape[..] != [g.h, g.w, dg] {
            return invalid(format!(
                "group {i} has shape {shape:?}, expected {:?}",
                [g.h, g.w, dg]
            ));
        }
    }
    Ok(())
}

pub fn unshuffle(groups: &[Tensor], spec: &ShuffleSpec) -> Result<Tensor> {
    let shapes: Vec<Vec<usize>> = groups.iter().map(|t| t.shape().to_vec()).collect();
    check_group_shapes(&shapes, spec)?;
    let refs: Vec<&Tensor> = groups.iter().collect();
    Tensor::concat_flat(&refs).gather(&spec.recovery_index(), &spec.geom.shape())
}

/// Square attention window of side `s` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupWindow {
    pub s: usize,
}

impl GroupWindow {
    pub fn new(s: usize) -> Result<Self> {
        if s == 0 {
            return invalid("window side must be positive");
        }
        Ok(Self { s })
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.s == 0 || !h.is_multiple_of(self.s) || !w.is_multiple_of(self.s) {
            return invalid(format!(
                "window side {} does not divide the {h}×{w} token grid",
                self.s
            ));
        }
        Ok(())
    }

    pub fn count(&self, h: usize, w: usize) -> usize {
        (h / self.s) * (w / self.s)
    }

    /// Token indices (row-major over the `h × w` grid) of every window, in
    /// window-major order.
    pub fn token_lists(&self, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        self.validate(h, w)?;
        let s = self.s;
        let mut out = Vec::with_capacity(self.count(h, w));
        for wr in 0..h / s {
            for wc in 0..w / s {
                let mut toks = Vec::with_capacity(s * s);
                for r in 0..s {
                    for c in 0..s {
                        toks.push((wr * s + r) * w + wc * s + c);
                    }
                }
                out.push(toks);
            }
        }
        Ok(out)
    }

    /// Window index of every token.
    pub fn window_of(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        let mut out = vec![0; h * w];
        for (i, toks) in self.token_lists(h, w)?.iter().enumerate() {
            for &t in toks {
                out[t] = i;
            }
        }
        Ok(out)
    }
}

/// Projections for one channel group; every matrix is `d_i × d_i` and acts on
/// row vectors (`x · Q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    /// Optional `[d_i]` biases for the q, k, v and o projections.
    pub bias: Option<[Tensor; 4]>,
}

impl GroupParams {
    pub fn width(&self) -> usize {
        self.q.rows()
    }

    pub fn identity(d: usize) -> Self {
        Self {
            q: Tensor::eye(d),
            k: Tensor::eye(d),
            v: Tensor::eye(d),
            o: Tensor::eye(d),
            bias: None,
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(d: usize, with_bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut m = || Tensor::randn(&[d, d], std, rng);
        let (q, k, v, o) = (m(), m(), m(), m());
        let bias = with_bias.then(|| std::array::from_fn(|_| Tensor::randn(&[d], 0.1, rng)));
        Self { q, k, v, o, bias }
    }

    pub fn param_count(&self) -> usize {
        let d = self.width();
        4 * d * d + if self.bias.is_some() { 4 * d } else { 0 }
    }

    fn check(&self, d: usize) -> Result<()> {
        for (name, m) in [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
        ] {
            if m.shape() != [d, d] {
                return invalid(format!(
                    "projection {name} has shape {:?}, expected [{d}, {d}]",
                    m.shape()
                ));
            }
        }
        if let Some(b) = &self.bias {
            if b.iter().any(|t| t.shape() != [d]) {
                return invalid(format!("projection biases must have shape [{d}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdsmParams {
    pub groups: Vec<GroupParams>,
}

impl TdsmParams {
    pub fn random<R: rand::Rng + ?Sized>(widths: &[usize], with_bias: bool, rng: &mut R) -> Self {
        Self {
            groups: widths
                .iter()
                .map(|&d| GroupParams::random(d, with_bias, rng))
                .collect(),
        }
    }

    pub fn identity(widths: &[usize]) -> Self {
        Self {
            groups: widths.iter().map(|&d| GroupParams::identity(d)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(GroupParams::param_count).sum()
    }

    fn check(&self, spec: &ShuffleSpec) -> Result<()> {
        if self.groups.len() != spec.groups() {
            return invalid(format!(
                "{} projection sets for {} channel groups",
                self.groups.len(),
                spec.groups()
            ));
        }
        for (p, &d) in self.groups.iter().zip(spec.widths()) {
            p.check(d)?;
        }
        Ok(())
    }
}

fn project<'g>(x: Var<'g>, w: &Tensor, b: Option<&Tensor>) -> Result<Var<'g>> {
    let g = x.graph();
    let y = x.matmul(g.leaf(w.clone()))?;
    match b {
        Some(b) => y.add(g.leaf(b.clone()).broadcast_rows(y.shape()[0])?),
        None => Ok(y),
    }
}

/// Differentiable windowed attention over one `[H, W, d_i]` group volume.
pub fn grouped_attention_var<'g>(
    group: Var<'g>,
    window: GroupWindow,
    params: &GroupParams,
) -> Result<Var<'g>> {
    let shape = group.shape();
    let [h, w, d] = shape[..] else {
        return invalid(format!("group volume must be 3-d, got {shape:?}"));
    };
    params.check(d)?;
    let windows = window.token_lists(h, w)?;
    let bias = params.bias.as_ref();
    let x = group.reshape(&[h * w, d])?;
    let q = project(x, &params.q, bias.map(|b| &b[0]))?;
    let k = project(x, &params.k, bias.map(|b| &b[1]))?;
    let v = project(x, &params.v, bias.map(|b| &b[2]))?;
    let s2 = window.s * window.s;
    let scale = 1.0 / (d as f64).sqrt();

    let mut outs = Vec::with_capacity(windows.len());
    for toks in &windows {
        let rows: Vec<usize> = toks
            .iter()
            .flat_map(|&t| (0..d).map(move |c| t * d + c))
            .collect();
        let cols: Vec<usize> = (0..d)
            .flat_map(|c| toks.iter().map(move |&t| t * d + c))
            .collect();
        let qw = q.gather(rows.clone(), &[s2, d])?;
        let kt = k.gather(cols, &[d, s2])?;
        let vw = v.gather(rows, &[s2, d])?;
        let attn = qw.matmul(kt)?.scale(scale).softmax_rows()?;
        outs.push(attn.matmul(vw)?);
    }
    // Window-major rows back to row-major token order.
    let mut slot_of = vec![0; h * w];
    for (wi, toks) in windows.iter().enumerate() {
        for (j, &t) in toks.iter().enumerate() {
            slot_of[t] = wi * s2 + j;
        }
    }
    let back: Vec<usize> = (0..h * w * d).map(|i| slot_of[i / d] * d + i % d).collect();
    let mixed = Var::concat(&outs)?.gather(back, &[h * w, d])?;
    project(mixed, &params.o, bias.map(|b| &b[3]))?.reshape(&[h, w, d])
}

/// Windowed attention over one group volume.
pub fn grouped_attention(
    group: &Tensor,
    window: GroupWindow,
    params: &GroupParams,
) -> Result<Tensor> {
    let g = Graph::new();
    let out = grouped_attention_var(g.leaf(group.clone()), window, params)?;
    Ok(out.value().as_ref().clone())
}

/// Differentiable shuffle → grouped attention → recovery.
pub fn tdsm_forward_var<'g>(
    c_in: Var<'g>,
    spec: &ShuffleSpec,
    window: GroupWindow,
    params: &TdsmParams,
) -> Result<Var<'g>> {
    let geom = spec.geom;
    geom.check(&c_in.shape(), "mixer input")?;
    window.validate(geom.h, geom.w)?;
    params.check(spec)?;
    let mut mixed = Vec::with_capacity(spec.groups());
    for (g, p) in params.groups.iter().enumerate() {
        let vol = c_in.gather(spec.gather_index(g), &[geom.h, geom.w, spec.widths[g]])?;
        mixed.push(grouped_attention_var(vol, window, p)?);
    }
    Var::concat(&mixed)?.gather(spec.recovery_index(), &geom.shape())
}

pub fn tdsm_forward(
    c_in: &Tensor,
    spec: &ShuffleSpec,
    window: GroupWindow,
    params: &TdsmParams,
) -> Result<Tensor> {
    let g = Graph::new();
    let out = tdsm_forward_var(g.leaf(c_in.clone()), spec, window, params)?;
    Ok(out.value().as_ref().clone())
}
