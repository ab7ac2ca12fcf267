//! Lightweight control block: zero-initialised 1×1 projections around a
//! shuffle mixer, with timestep-conditioned modulation.
//!
//! ```text
//! c_in   = zero_conv(x, zc_in) + c
//! h      = tdsm(modulate(c_in, t)) + c_in
//! c_cond = zero_conv(h, zc_out)          // injected into the backbone
//! c_next = h                             // fed to the next control block
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tdsm::{tdsm_forward_var, FeatureGeometry, GroupWindow, ShuffleSpec, TdsmParams};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Per-channel affine maps from the timestep embedding to `rows` modulation
/// vectors: `vec_j = weight[j] ⊙ t + bias[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Modulation {
    pub fn zeros(rows: usize, d: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[rows, d]),
            bias: Tensor::zeros(&[rows, d]),
        }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[rows, d], std, rng),
            bias: Tensor::zeros(&[rows, d]),
        }
    }

    pub fn rows(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Evaluates every modulation vector for embedding `t` (`[D]`).
    pub fn vectors<'g>(&self, t: Var<'g>) -> Result<Vec<Var<'g>>> {
        let g = t.graph();
        let [rows, d] = self.weight.shape()[..] else {
            return invalid("modulation weight must be a matrix");
        };
        if t.shape() != [d] {
            return invalid(format!(
                "timestep embedding has shape {:?}, expected [{d}]",
                t.shape()
            ));
        }
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        (0..rows)
            .map(|j| {
                let idx: Vec<usize> = (j * d..(j + 1) * d).collect();
                let wj = w.gather(idx.clone(), &[d])?;
                let bj = b.gather(idx, &[d])?;
                wj.mul(t)?.add(bj)
            })
            .collect()
    }
}

/// `(1 + gate) ⊙ ((1 + scale) ⊙ norm(v) + shift)` over the rows of
/// `v: [tokens, D]`; with all three vectors zero this reduces to `norm(v)`.
pub fn modulate<'g>(
    v: Var<'g>,
    shift: Var<'g>,
    scale: Var<'g>,
    gate: Var<'g>,
    layer_norm: bool,
) -> Result<Var<'g>> {
    let g = v.graph();
    let shape = v.shape();
    let (rows, d) = (shape[0], shape[1]);
    let ones = g.leaf(Tensor::full(&[d], 1.0));
    let normed = if layer_norm {
        v.layer_norm(LAYER_NORM_EPS)
    } else {
        v
    };
    let scale = scale.add(ones)?.broadcast_rows(rows)?;
    let gate = gate.add(ones)?.broadcast_rows(rows)?;
    normed
        .mul(scale)?
        .add(shift.broadcast_rows(rows)?)?
        .mul(gate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RglcParams {
    /// `D × D`, zero at initialisation.
    pub zc_in: Tensor,
    /// `D × D`, zero at initialisation.
    pub zc_out: Tensor,
    pub tdsm: TdsmParams,
    /// Three rows: shift, scale, gate.
    pub modulation: Modulation,
    /// Whether `modulate` normalises before the affine part.
    pub layer_norm: bool,
}

impl RglcParams {
    /// Fresh block: zero-convs exactly zero, mixer projections random.
    pub fn init<R: Rng + ?Sized>(spec: &ShuffleSpec, rng: &mut R) -> Self {
        let d = spec.geometry().d;
        Self {
            zc_in: Tensor::zeros(&[d, d]),
            zc_out: Tensor::zeros(&[d, d]),
            tdsm: TdsmParams::random(spec.widths(), false, rng),
            modulation: Modulation::random(3, d, 0.02, rng),
            layer_norm: true,
        }
    }

    /// Replaces both zero-convs with `N(0, std²)` draws.
    pub fn demo_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let d = self.zc_in.rows();
        self.zc_in = Tensor::randn(&[d, d], std, rng);
        self.zc_out = Tensor::randn(&[d, d], std, rng);
    }

    pub fn width(&self) -> usize {
        self.zc_in.rows()
    }

    pub fn param_count(&self) -> usize {
        self.zc_in.numel()
            + self.zc_out.numel()
            + self.tdsm.param_count()
            + self.modulation.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RglcInputs {
    /// Frozen-block hidden state `[H, W, D]`.
    pub x: Tensor,
    /// Running control stream `[H, W, D]`.
    pub c: Tensor,
    /// Timestep embedding `[D]`.
    pub t: Tensor,
}

/// Per-token linear map (`1×1` convolution) of `v: [H, W, D]` by `w: [D, D]`.
pub fn zero_conv_var<'g>(v: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    let shape = v.shape();
    let d = *shape.last().expect("non-empty shape");
    if w.shape() != [d, d] {
        return invalid(format!(
            "zero-conv weight {:?} does not match channel width {d}",
            w.shape()
        ));
    }
    let g = v.graph();
    v.as_matrix()?.matmul(g.leaf(w.clone()))?.reshape(&shape)
}

pub fn zero_conv(v: &Tensor, w: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    Ok(zero_conv_var(g.leaf(v.clone()), w)?
        .value()
        .as_ref()
        .clone())
}

/// Differentiable block forward; returns `(c_cond, c_next)`.
pub fn rglc_forward_var<'g>(
    x: Var<'g>,
    c: Var<'g>,
    t: Var<'g>,
    params: &RglcParams,
    spec: &ShuffleSpec,
    window: GroupWindow,
) -> Result<(Var<'g>, Var<'g>)> {
    let geom: FeatureGeometry = spec.geometry();
    geom.check(&x.shape(), "control block input x")?;
    geom.check(&c.shape(), "control stream c")?;
    if params.width() != geom.d {
        return invalid(format!(
            "control block width {} does not match geometry width {}",
            params.width(),
            geom.d
        ));
    }
    let c_in = zero_conv_var(x, &params.zc_in)?.add(c)?;
    let mods = params.modulation.vectors(t)?;
    let [shift, scale, gate] = mods[..] else {
        return invalid("control block modulation needs exactly 3 rows");
    };
    let m = modulate(c_in.as_matrix()?, shift, scale, gate, params.layer_norm)?
        .reshape(&geom.shape())?;
    let h = tdsm_forward_var(m, spec, window, &params.tdsm)?.add(c_in)?;
    let c_cond = zero_conv_var(h, &params.zc_out)?;
    Ok((c_cond, h))
}

pub fn rglc_forward(
    inp: &RglcInputs,
    params: &RglcParams,
    spec: &ShuffleSpec,
    window: GroupWindow,
) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let (cond, next) = rglc_forward_var(
        g.leaf(inp.x.clone()),
        g.leaf(inp.c.clone()),
        g.leaf(inp.t.clone()),
        params,
        spec,
        window,
    )?;
    let cond = cond.value().as_ref().clone();
    let next = next.value().as_ref().clone();
    Ok((cond, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdsm::{make_shuffle_spec, tdsm_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        h: usize,
        w: usize,
        d: usize,
        n: usize,
        seed: u64,
    ) -> (ShuffleSpec, RglcParams, RglcInputs) {
        let geom = FeatureGeometry::new(h, w, d).unwrap();
        let spec = make_shuffle_spec(geom, n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RglcParams::init(&spec, &mut rng);
        let inp = RglcInputs {
            x: Tensor::randn(&geom.shape(), 1.0, &mut rng),
            c: Tensor::randn(&geom.shape(), 1.0, &mut rng),
            t: Tensor::randn(&[d], 1.0, &mut rng),
        };
        (spec, params, inp)
    }

    #[test]
    fn zero_conv_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        assert!(zero_conv(&v, &Tensor::zeros(&[3, 3]))
            .unwrap()
            .is_all_zero());
        assert!(zero_conv(&v, &Tensor::eye(3)).unwrap().bit_eq(&v));
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let out = zero_conv(&v, &w).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                let want: f64 = (0..3)
                    .map(|k| v.data()[t * 3 + k] * w.data()[k * 3 + j])
                    .sum();
                assert!((out.data()[t * 3 + j] - want).abs() < 1e-14);
            }
        }
        assert!(zero_conv(&v, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn fresh_block_injects_exact_zero() {
        let (spec, params, inp) = setup(4, 4, 4, 2, 3);
        let (cond, next) = rglc_forward(&inp, &params, &spec, GroupWindow { s: 2 }).unwrap();
        assert!(cond.is_all_zero());
        assert_eq!(next.shape(), inp.c.shape());
    }

    #[test]
    fn identity_modulation_reduces_to_mixer_plus_residual() {
        let (spec, mut params, inp) = setup(4, 4, 4, 2, 4);
        params.modulation = Modulation::zeros(3, 4);
        params.layer_norm = false;
        let win = GroupWindow { s: 2 };
        let (_, next) = rglc_forward(&inp, &params, &spec, win).unwrap();
        let want = tdsm_forward(&inp.c, &spec, win, &params.tdsm)
            .unwrap()
            .add(&inp.c)
            .unwrap();
        assert!(next.bit_eq(&want));
    }

    #[test]
    fn next_stream_ignores_output_projection() {
        let (spec, mut params, inp) = setup(2, 2, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        params.demo_init(0.5, &mut rng);
        let win = GroupWindow { s: 1 };
        let (cond_a, next_a) = rglc_forward(&inp, &params, &spec, win).unwrap();
        params.zc_out = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let (cond_b, next_b) = rglc_forward(&inp, &params, &spec, win).unwrap();
        assert!(next_a.bit_eq(&next_b));
        assert!(cond_a.max_abs_diff(&cond_b) > 0.0);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let (spec, params, mut inp) = setup(2, 2, 4, 2, 6);
        inp.c = Tensor::zeros(&[2, 2, 3]);
        assert!(rglc_forward(&inp, &params, &spec, GroupWindow { s: 1 }).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let (_, params, _) = setup(2, 2, 8, 4, 7);
        assert_eq!(params.param_count(), 2 * 64 + 4 * 4 * 4 + 6 * 8);
    }
}
