//! Naive loop-based reference implementations checked against the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relactrl_core::tdsm::{
    grouped_attention, make_shuffle_spec, shuffle, tdsm_forward, FeatureGeometry, GroupParams,
    GroupWindow, ShuffleSpec, TdsmParams,
};
use relactrl_core::Tensor;

fn at(m: &Tensor, r: usize, c: usize) -> f64 {
    m.data()[r * m.shape()[1] + c]
}

/// `y = x · w` for one row vector.
fn rowvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let d = w.shape()[1];
    (0..d)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * at(w, i, j)).sum())
        .collect()
}

/// Dense attention over each window, written with explicit loops.
fn dense_window_attention(vol: &Tensor, s: usize, p: &GroupParams) -> Vec<f64> {
    let (h, w, d) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let tok = |t: usize| &vol.data()[t * d..(t + 1) * d];
    let q: Vec<Vec<f64>> = (0..h * w).map(|t| rowvec(tok(t), &p.q)).collect();
    let k: Vec<Vec<f64>> = (0..h * w).map(|t| rowvec(tok(t), &p.k)).collect();
    let v: Vec<Vec<f64>> = (0..h * w).map(|t| rowvec(tok(t), &p.v)).collect();
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let me = r * w + c;
            let (r0, c0) = (r / s * s, c / s * s);
            let members: Vec<usize> = (r0..r0 + s)
                .flat_map(|rr| (c0..c0 + s).map(move |cc| rr * w + cc))
                .collect();
            let logits: Vec<f64> = members
                .iter()
                .map(|&o| {
                    q[me].iter().zip(&k[o]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = vec![0.0; d];
            for (wgt, &o) in e.iter().zip(&members) {
                for j in 0..d {
                    mixed[j] += wgt / z * v[o][j];
                }
            }
            out[me * d..(me + 1) * d].copy_from_slice(&rowvec(&mixed, &p.o));
        }
    }
    out
}

/// Channel list of every group, rebuilt from the public channel assignment.
fn channels_by_group(spec: &ShuffleSpec) -> Vec<Vec<usize>> {
    let mut chans: Vec<Vec<usize>> = spec.widths().iter().map(|&w| vec![usize::MAX; w]).collect();
    for (ch, &(g, slot)) in spec.channel_assignment().iter().enumerate() {
        chans[g][slot] = ch;
    }
    chans
}

/// Monolithic oracle: build each shuffled group with coordinate arithmetic,
/// attend densely, and scatter every element back to where it came from.
fn monolithic_tdsm(x: &Tensor, spec: &ShuffleSpec, s: usize, params: &TdsmParams) -> Vec<f64> {
    let geom = spec.geometry();
    let d = geom.d;
    let chans = channels_by_group(spec);
    let mut out = vec![f64::NAN; x.numel()];
    for g in 0..spec.groups() {
        let dg = spec.widths()[g];
        let perm = spec.element_perm(g);
        let mut vol = vec![0.0; geom.tokens() * dg];
        for p in 0..vol.len() {
            let src = perm[p];
            vol[p] = x.data()[(src / dg) * d + chans[g][src % dg]];
        }
        let vol = Tensor::new(vec![geom.h, geom.w, dg], vol).unwrap();
        let mixed = dense_window_attention(&vol, s, &params.groups[g]);
        for p in 0..mixed.len() {
            let src = perm[p];
            out[(src / dg) * d + chans[g][src % dg]] = mixed[p];
        }
    }
    out
}

fn random_case(rng: &mut ChaCha8Rng) -> (FeatureGeometry, usize, usize) {
    let s = rng.random_range(1..=2);
    let h = s * rng.random_range(1..=3);
    let w = s * rng.random_range(1..=3);
    let d = rng.random_range(1..=7);
    let n = rng.random_range(1..=d);
    (FeatureGeometry::new(h, w, d).unwrap(), n, s)
}

#[test]
fn mixer_matches_monolithic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (geom, n, s) = random_case(&mut rng);
        let spec = make_shuffle_spec(geom, n, rng.random()).unwrap();
        let params = TdsmParams::random(spec.widths(), false, &mut rng);
        let x = Tensor::randn(&geom.shape(), 1.0, &mut rng);
        let got = tdsm_forward(&x, &spec, GroupWindow { s }, &params).unwrap();
        let want = monolithic_tdsm(&x, &spec, s, &params);
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{geom:?} n={n} s={s}: {err}");
    }
}

#[test]
fn grouped_attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (geom, _, s) = random_case(&mut rng);
        let p = GroupParams::random(geom.d, false, &mut rng);
        let vol = Tensor::randn(&geom.shape(), 1.0, &mut rng);
        let got = grouped_attention(&vol, GroupWindow { s }, &p).unwrap();
        let want = dense_window_attention(&vol, s, &p);
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{geom:?} s={s}: {err}");
    }
}

#[test]
fn tokens_only_see_their_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let geom = FeatureGeometry::new(4, 4, 3).unwrap();
    let p = GroupParams::random(3, false, &mut rng);
    let a = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let mut b = a.clone();
    // Perturb token (3, 3), which lives in the bottom-right 2×2 window.
    for c in 0..3 {
        b.data_mut()[(3 * 4 + 3) * 3 + c] += 1.0;
    }
    let ya = grouped_attention(&a, GroupWindow { s: 2 }, &p).unwrap();
    let yb = grouped_attention(&b, GroupWindow { s: 2 }, &p).unwrap();
    for t in 0..16 {
        let (r, c) = (t / 4, t % 4);
        let changed = (0..3).any(|k| ya.data()[t * 3 + k] != yb.data()[t * 3 + k]);
        assert_eq!(changed, r >= 2 && c >= 2, "token ({r}, {c})");
    }
}

#[test]
fn shuffled_group_holds_the_mapped_elements() {
    let geom = FeatureGeometry::new(2, 3, 5).unwrap();
    let spec = make_shuffle_spec(geom, 2, 99).unwrap();
    let x = Tensor::new(geom.shape().to_vec(), (0..30).map(f64::from).collect()).unwrap();
    let groups = shuffle(&x, &spec).unwrap();
    let chans = channels_by_group(&spec);
    for (g, vol) in groups.iter().enumerate() {
        let dg = spec.widths()[g];
        for (p, &v) in vol.data().iter().enumerate() {
            let src = spec.element_perm(g)[p];
            assert_eq!(v, ((src / dg) * 5 + chans[g][src % dg]) as f64);
        }
    }
}
