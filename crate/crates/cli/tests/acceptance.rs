//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p relactrl-cli --test acceptance -- --nocapture` to
//! see the lines.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relactrl_cli::metrics::MetricsTable;
use relactrl_cli::{run, EXIT_OK};
use relactrl_core::autograd::{grad_check, Graph, Var};
use relactrl_core::backbone::{
    build_model, BlockKind, ForwardInputs, ModelConfig, PlacementPlan, PlanEntry,
};
use relactrl_core::costmodel::{plan_cost, plan_flops, ArchSpec, Baseline};
use relactrl_core::distance::{
    average_distance, exact_expected_distance, exact_grid, lower_bound, mc_distance, DistanceQuery,
    GroupContext,
};
use relactrl_core::relevance::{plan_placement, score_layers, ScoreBasis, TierPolicy};
use relactrl_core::rglc::{rglc_forward_var, RglcParams};
use relactrl_core::tdsm::{
    grouped_attention, make_shuffle_spec, shuffle, tdsm_forward, tdsm_forward_var, unshuffle,
    FeatureGeometry, GroupParams, GroupWindow, ShuffleSpec, TdsmParams,
};
use relactrl_core::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pixart() -> ArchSpec {
    ArchSpec::pixart_alpha_512()
}

fn bundled_plan(k: usize) -> PlacementPlan {
    let table = MetricsTable::bundled();
    let recs = score_layers(&table.rows, ScoreBasis::Ranks).unwrap();
    plan_placement(&recs, k, &TierPolicy::default()).unwrap()
}

fn copy_first(k: usize) -> PlacementPlan {
    PlacementPlan::uniform(0..k, 1, 1)
        .unwrap()
        .with_block(BlockKind::Copy)
}

fn c1_copy_param_ratio() -> Outcome {
    let r = plan_cost(&pixart(), &copy_first(13), Baseline::CopyFirstK(13)).unwrap();
    let pct = 100.0 * r.param_ratio_vs_backbone;
    outcome(
        (pct - 48.15).abs() <= 0.05,
        format!("copy-13 params +{pct:.2}% of backbone (paper +48.16%)"),
    )
}

fn c2_placement_ratios() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (k, want) in [(11usize, 84.62), (10, 76.92), (12, 92.31)] {
        let plan = bundled_plan(k).with_block(BlockKind::Copy);
        let r = plan_cost(&pixart(), &plan, Baseline::CopyFirstK(13)).unwrap();
        let pct = 100.0 * r.param_ratio_vs_copy_baseline.unwrap();
        pass &= format!("{pct:.2}") == format!("{want:.2}");
        parts.push(format!("top{k} {pct:.2}%"));
    }
    outcome(
        pass,
        format!(
            "{} (paper 84.6% / 76.9% / 92.5%; 12/13 is 92.31%)",
            parts.join(", ")
        ),
    )
}

fn c3_budget() -> Outcome {
    let r = plan_cost(&pixart(), &bundled_plan(11), Baseline::CopyFirstK(13)).unwrap();
    let m = r.added_params as f64 / 1e6;
    let vs = 100.0 * r.param_ratio_vs_copy_baseline.unwrap();
    outcome(
        (43.0..=47.5).contains(&m) && (14.0..=17.0).contains(&vs),
        format!("+{m:.2}M params (paper +45.15M), {vs:.2}% of copy-13 (paper 15.3%)"),
    )
}

fn c4_flops() -> Outcome {
    let copy = plan_flops(&pixart(), &copy_first(13), 1024).unwrap();
    let rela = plan_flops(&pixart(), &bundled_plan(11), 1024).unwrap();
    let (a, b) = (
        100.0 * copy.flop_ratio_vs_backbone,
        100.0 * rela.flop_ratio_vs_backbone,
    );
    outcome(
        (48.0..=52.0).contains(&a) && (6.0..=11.0).contains(&b),
        format!("copy-13 +{a:.2}% (paper +49.87%), lightweight +{b:.2}% (paper +8.61%)"),
    )
}

fn c5_bound_sweep() -> Outcome {
    let (mut checked, mut violations) = (0, 0);
    for h in 1..=12 {
        for cols in 1..=12 {
            if h * cols < 2 {
                continue;
            }
            for th in 0..h {
                for tw in 0..cols {
                    let q = DistanceQuery::new(h, cols, 1, th, tw).unwrap();
                    checked += 1;
                    if lower_bound(&q).unwrap() > exact_expected_distance(&q).unwrap() + 1e-12 {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("{checked} positions, {violations} violations"),
    )
}

fn c6_average() -> Outcome {
    let avg = average_distance(8, 8, 2, GroupWindow { s: 2 }, 20_000, 6).unwrap();
    let exact = exact_grid(8, 8, 2).unwrap();
    let mean = exact.iter().sum::<f64>() / exact.len() as f64;
    let rel = (avg - mean).abs() / mean;
    outcome(
        rel < 0.05,
        format!(
            "mc {avg:.4} vs exact mean {mean:.4}, rel dev {:.3}%",
            100.0 * rel
        ),
    )
}

fn c7_mc_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut covered = 0;
    let mut total = 0;
    while total < 50 {
        let s = rng.random_range(1..=2);
        let (h, w) = (s * rng.random_range(1..=3), s * rng.random_range(1..=3));
        let d = rng.random_range(1..=3);
        if s * s * d < 2 {
            continue;
        }
        total += 1;
        let q = DistanceQuery::new(h, w, d, rng.random_range(0..h), rng.random_range(0..w * d))
            .unwrap();
        let mc = mc_distance(
            &q,
            GroupContext::single(d),
            GroupWindow { s },
            4_000,
            rng.random(),
        )
        .unwrap();
        if (mc.estimate - exact_expected_distance(&q).unwrap()).abs() <= 3.0 * mc.stderr + 1e-12 {
            covered += 1;
        }
    }
    outcome(covered >= 48, format!("{covered}/50 inside 3σ"))
}

fn c8_reversibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut failures = 0;
    for _ in 0..500 {
        let geom = FeatureGeometry::new(
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..13),
        )
        .unwrap();
        let n = rng.random_range(1..=geom.d);
        let spec = make_shuffle_spec(geom, n, rng.random()).unwrap();
        let x = Tensor::randn(&geom.shape(), 1.0, &mut rng);
        if !unshuffle(&shuffle(&x, &spec).unwrap(), &spec)
            .unwrap()
            .bit_eq(&x)
        {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("500 round trips, {failures} mismatches"),
    )
}

fn c9_transparency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut same = 0;
    for _ in 0..20 {
        let s = rng.random_range(1..=2);
        let d = 2 * rng.random_range(1..=4);
        let geom =
            FeatureGeometry::new(s * rng.random_range(1..=3), s * rng.random_range(1..=3), d)
                .unwrap();
        let mut cfg = ModelConfig::toy(rng.random_range(1..=6), geom);
        cfg.cross_attention = rng.random_bool(0.5);
        let layers: Vec<usize> = (0..cfg.depth).filter(|_| rng.random_bool(0.6)).collect();
        let entries = layers
            .iter()
            .map(|&layer| PlanEntry {
                layer,
                n_groups: rng.random_range(1..=d),
                window_s: s,
            })
            .collect();
        let seed = rng.random();
        let controlled = build_model(&cfg, &PlacementPlan::new(entries).unwrap(), seed).unwrap();
        let bare = build_model(&cfg, &PlacementPlan::default(), seed).unwrap();
        let inp = ForwardInputs::random(geom, &mut rng);
        let a = controlled.forward(&inp, &BTreeSet::new()).unwrap();
        let b = bare.forward(&inp, &BTreeSet::new()).unwrap();
        same += usize::from(a.bit_eq(&b));
    }
    outcome(same == 20, format!("{same}/20 bit-identical"))
}

fn weighted<'g>(y: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    Ok(y.mul(y.graph().leaf(w.clone()))?.sum())
}

fn c10_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let geom = FeatureGeometry::new(4, 4, 6).unwrap();
    let spec = make_shuffle_spec(geom, 3, 5).unwrap();
    let window = GroupWindow { s: 2 };
    let tp = TdsmParams::random(spec.widths(), true, &mut rng);
    let x = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let c = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let t = Tensor::randn(&[6], 1.0, &mut rng);
    let w1 = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let w2 = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let e_tdsm = grad_check(
        |_: &Graph, v| weighted(tdsm_forward_var(v, &spec, window, &tp)?, &w1),
        &x,
        1e-5,
    )
    .unwrap();

    let mut rp = RglcParams::init(&spec, &mut rng);
    rp.demo_init(0.3, &mut rng);
    let e_rglc = grad_check(
        |g: &Graph, v| {
            let (cond, next) =
                rglc_forward_var(v, g.leaf(c.clone()), g.leaf(t.clone()), &rp, &spec, window)?;
            weighted(cond, &w1)?.add(weighted(next, &w2)?)
        },
        &x,
        1e-5,
    )
    .unwrap();
    outcome(
        e_tdsm <= 1e-5 && e_rglc <= 1e-5,
        format!("max rel err mixer {e_tdsm:.2e}, control block {e_rglc:.2e}"),
    )
}

fn at(m: &Tensor, r: usize, c: usize) -> f64 {
    m.data()[r * m.shape()[1] + c]
}

fn rowvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.shape()[1])
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * at(w, i, j)).sum())
        .collect()
}

/// Dense per-window attention with explicit loops.
fn dense(vol: &Tensor, s: usize, p: &GroupParams) -> Vec<f64> {
    let (h, w, d) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let tok = |t: usize| &vol.data()[t * d..(t + 1) * d];
    let proj = |m: &Tensor| -> Vec<Vec<f64>> { (0..h * w).map(|t| rowvec(tok(t), m)).collect() };
    let (q, k, v) = (proj(&p.q), proj(&p.k), proj(&p.v));
    let mut out = vec![0.0; h * w * d];
    for me in 0..h * w {
        let (r0, c0) = (me / w / s * s, me % w / s * s);
        let members: Vec<usize> = (r0..r0 + s)
            .flat_map(|r| (c0..c0 + s).map(move |c| r * w + c))
            .collect();
        let logits: Vec<f64> = members
            .iter()
            .map(|&o| q[me].iter().zip(&k[o]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut mixed = vec![0.0; d];
        for (wt, &o) in e.iter().zip(&members) {
            for j in 0..d {
                mixed[j] += wt / z * v[o][j];
            }
        }
        out[me * d..(me + 1) * d].copy_from_slice(&rowvec(&mixed, &p.o));
    }
    out
}

/// Index-map oracle for the whole mixer.
fn monolithic(x: &Tensor, spec: &ShuffleSpec, s: usize, params: &TdsmParams) -> Vec<f64> {
    let geom = spec.geometry();
    let mut chans: Vec<Vec<usize>> = spec.widths().iter().map(|&w| vec![0; w]).collect();
    for (ch, &(g, slot)) in spec.channel_assignment().iter().enumerate() {
        chans[g][slot] = ch;
    }
    let mut out = vec![f64::NAN; x.numel()];
    #[allow(clippy::needless_range_loop)]
    for g in 0..spec.groups() {
        let dg = spec.widths()[g];
        let perm = spec.element_perm(g);
        let flat = |q: usize| (q / dg) * geom.d + chans[g][q % dg];
        let vol: Vec<f64> = perm.iter().map(|&q| x.data()[flat(q)]).collect();
        let vol = Tensor::new(vec![geom.h, geom.w, dg], vol).unwrap();
        for (p, y) in dense(&vol, s, &params.groups[g]).into_iter().enumerate() {
            out[flat(perm[p])] = y;
        }
    }
    out
}

fn max_diff(a: &Tensor, b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn c11_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let (mut worst_mixer, mut worst_attn): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let s = rng.random_range(1..=2);
        let geom = FeatureGeometry::new(
            s * rng.random_range(1..=3),
            s * rng.random_range(1..=3),
            rng.random_range(1..=7),
        )
        .unwrap();
        let n = rng.random_range(1..=geom.d);
        let spec = make_shuffle_spec(geom, n, rng.random()).unwrap();
        let params = TdsmParams::random(spec.widths(), false, &mut rng);
        let x = Tensor::randn(&geom.shape(), 1.0, &mut rng);
        let got = tdsm_forward(&x, &spec, GroupWindow { s }, &params).unwrap();
        worst_mixer = worst_mixer.max(max_diff(&got, &monolithic(&x, &spec, s, &params)));

        let p = GroupParams::random(geom.d, false, &mut rng);
        let got = grouped_attention(&x, GroupWindow { s }, &p).unwrap();
        worst_attn = worst_attn.max(max_diff(&got, &dense(&x, s, &p)));
    }
    outcome(
        worst_mixer <= 1e-10 && worst_attn <= 1e-10,
        format!("max abs diff mixer {worst_mixer:.1e}, attention {worst_attn:.1e}"),
    )
}

fn c12_pipeline() -> Outcome {
    let dir = std::env::temp_dir().join(format!("relactrl-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("sweep.csv");
    let csv_s = csv.to_str().unwrap();
    let mut sink = Vec::new();
    let mut err = Vec::new();
    let demo = run(
        [
            "relactrl",
            "demo",
            "--demo-init",
            "--seed",
            "12",
            "--sweep",
            csv_s,
        ],
        &mut sink,
        &mut err,
    );
    let rows = std::fs::read_to_string(&csv)
        .map(|t| t.lines().count() - 1)
        .unwrap_or(0);
    let rel = run(
        ["relactrl", "relevance", "--metrics", csv_s, "--top", "11"],
        &mut sink,
        &mut err,
    );

    // Peaked synthetic tables with random monotone distortions and noise.
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut peak_kept = 0;
    for _ in 0..200 {
        let k = rng.random_range(3..=27);
        let scale = rng.random_range(0.5..5.0);
        let rows: Vec<(usize, f64, f64)> = (0..27)
            .map(|i| {
                let base = match i {
                    5..=7 => 10.0,
                    i if i < 5 => 4.0 + i as f64,
                    i => 8.5 - 0.25 * (i - 7) as f64,
                };
                (
                    i,
                    scale * (base + rng.random_range(0.0..0.45)),
                    (base + rng.random_range(0.0..0.45)).powi(2),
                )
            })
            .collect();
        let recs = score_layers(&rows, ScoreBasis::Ranks).unwrap();
        let layers = plan_placement(&recs, k, &TierPolicy::default())
            .unwrap()
            .layers();
        peak_kept += usize::from((5..=7).all(|l| layers.contains(&l)));
    }
    let bundled = bundled_plan(11).layers();
    let bundled_ok = (5..=7).all(|l| bundled.contains(&l));
    outcome(
        demo == EXIT_OK && rows == 27 && rel == EXIT_OK && peak_kept == 200 && bundled_ok,
        format!(
            "demo exit {demo}, {rows} CSV rows, relevance exit {rel}; peak kept {peak_kept}/200, bundled top-11 {bundled:?}"
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        (
            "copy-baseline param ratio",
            Duration::from_secs(1),
            c1_copy_param_ratio,
        ),
        (
            "placement ratios",
            Duration::from_secs(1),
            c2_placement_ratios,
        ),
        (
            "lightweight control budget",
            Duration::from_secs(1),
            c3_budget,
        ),
        ("FLOP ratios", Duration::from_secs(1), c4_flops),
        (
            "distance lower bound sweep",
            Duration::from_secs(10),
            c5_bound_sweep,
        ),
        (
            "average distance approximation",
            Duration::from_secs(30),
            c6_average,
        ),
        (
            "Monte-Carlo consistency",
            Duration::from_secs(120),
            c7_mc_consistency,
        ),
        (
            "shuffle reversibility",
            Duration::from_secs(5),
            c8_reversibility,
        ),
        (
            "zero-init transparency",
            Duration::from_secs(10),
            c9_transparency,
        ),
        ("gradient fidelity", Duration::from_secs(10), c10_gradients),
        ("oracle equivalence", Duration::from_secs(5), c11_oracles),
        ("end-to-end pipeline", Duration::from_secs(60), c12_pipeline),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = check();
        let took = t0.elapsed();
        let in_time = took <= *budget;
        let pass = o.pass && in_time;
        println!(
            "[{}] {:>2}. {name}: {} ({:.2}s of {}s{})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
