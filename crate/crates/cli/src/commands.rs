use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relactrl_core::backbone::{
    build_model, output_deviation, skip_sweep, BlockKind, ForwardInputs, PlacementPlan,
};
use relactrl_core::costmodel::{
    full_attention_flops, grouped_attention_flops, plan_cost, Baseline,
};
use relactrl_core::distance::{self, DistanceQuery, GroupContext};
use relactrl_core::relevance::{
    plan_placement, relevance_order, score_layers, ScoreBasis, TierPolicy,
};
use relactrl_core::tdsm::{
    grouped_attention, make_shuffle_spec, tdsm_forward, FeatureGeometry, GroupParams, GroupWindow,
    TdsmParams,
};
use relactrl_core::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_plan, RunConfig};
use crate::metrics::{write_sweep, MetricsTable};
use crate::{
    svg, BasisArg, BenchArgs, BlockArg, CliError, CostArgs, DemoArgs, DistanceArgs, RelevanceArgs,
};
use crate::{EXIT_OK, EXIT_VERIFY, SCHEMA_VERSION};

const BUNDLED_NAME: &str = "bundled:synthetic_relevance_27.csv";
const DEMO_INIT_STD: f64 = 0.02;

type CmdResult = Result<i32, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::invalid(format!("cannot write {}: {e}", path.display()))
}

/// Writes the JSON report to `path`, or to `out` when no path is given.
fn emit<T: Serialize>(
    report: &T,
    path: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| CliError::invalid(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::invalid(e.to_string())),
    }
}

fn pct(r: f64) -> String {
    format!("{:.2}%", 100.0 * r)
}

fn load_table(path: Option<&PathBuf>) -> Result<(MetricsTable, String), CliError> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p)
                .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", p.display())))?;
            Ok((MetricsTable::parse(file)?, p.display().to_string()))
        }
        None => Ok((MetricsTable::bundled(), BUNDLED_NAME.to_string())),
    }
}

fn basis(b: BasisArg) -> ScoreBasis {
    match b {
        BasisArg::Ranks => ScoreBasis::Ranks,
        BasisArg::Raw => ScoreBasis::RawValues,
    }
}

pub fn relevance(a: &RelevanceArgs, out: &mut dyn Write) -> CmdResult {
    let tiers = match &a.config {
        Some(p) => RunConfig::load(p)?.placement.tiers,
        None => TierPolicy::default(),
    };
    let (table, source) = load_table(a.metrics.as_ref())?;
    let basis = basis(a.basis);
    let records = score_layers(&table.rows, basis)?;
    let plan = plan_placement(&records, a.top, &tiers)?;
    let ranking: Vec<usize> = relevance_order(&records)
        .iter()
        .map(|&i| records[i].layer_index)
        .collect();
    let selected = plan.layers();

    if let Some(p) = &a.svg {
        std::fs::write(p, svg::crs_chart(&records, &selected)).map_err(|e| io_err(p, e))?;
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "relevance",
        "config": {
            "metrics": source,
            "synthetic": a.metrics.is_none(),
            "input_index_base": table.index_base,
            "top": a.top,
            "basis": basis,
            "tiers": tiers,
            "svg": a.svg.as_ref().map(|p| p.display().to_string()),
        },
        "records": records,
        "ranking": ranking,
        "selected": selected,
        "plan": plan,
    });
    emit(&report, a.out.as_ref(), out)?;
    if a.out.is_some() {
        let _ = writeln!(out, "selected layers: {selected:?}");
    }
    Ok(EXIT_OK)
}

pub fn parse_baseline(s: &str) -> Result<Baseline, CliError> {
    if s == "none" {
        return Ok(Baseline::None);
    }
    s.strip_prefix("copy:")
        .and_then(|k| k.parse().ok())
        .map(Baseline::CopyFirstK)
        .ok_or_else(|| CliError::invalid(format!("baseline must be `copy:K` or `none`, got `{s}`")))
}

pub fn cost(a: &CostArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::load_or(a.config.as_deref(), RunConfig::pixart)?;
    let baseline = parse_baseline(&a.baseline)?;
    let (plan, plan_source) = match &a.plan {
        Some(p) => (load_plan(p)?, p.display().to_string()),
        None => {
            let (table, source) = load_table(a.metrics.as_ref())?;
            let k = a.k.unwrap_or(cfg.placement.k);
            let records = score_layers(&table.rows, cfg.placement.basis)?;
            let block = match a.block {
                BlockArg::Rglc => BlockKind::Rglc,
                BlockArg::Copy => BlockKind::Copy,
            };
            let plan = plan_placement(&records, k, &cfg.placement.tiers)?.with_block(block);
            (plan, format!("relevance top-{k} from {source}"))
        }
    };
    let r = plan_cost(&cfg.arch_spec(), &plan, baseline)?;
    let summary = json!({
        "added_params_m": format!("{:.2}M", r.added_params as f64 / 1e6),
        "added_gflops": format!("{:.2}", r.added_flops as f64 / 1e9),
        "param_ratio_vs_backbone": pct(r.param_ratio_vs_backbone),
        "flop_ratio_vs_backbone": pct(r.flop_ratio_vs_backbone),
        "param_ratio_vs_copy_baseline": r.param_ratio_vs_copy_baseline.map(pct),
        "flop_ratio_vs_copy_baseline": r.flop_ratio_vs_copy_baseline.map(pct),
    });
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "cost",
        "config": {
            "run": cfg,
            "plan_source": plan_source,
            "plan": plan,
            "baseline": baseline,
        },
        "summary": summary,
        "report": r,
    });
    emit(&report, a.out.as_ref(), out)?;
    if a.out.is_some() {
        let _ = writeln!(
            out,
            "{} added params; param ratio vs backbone {}; vs copy baseline {}",
            summary["added_params_m"].as_str().unwrap_or_default(),
            pct(r.param_ratio_vs_backbone),
            r.param_ratio_vs_copy_baseline
                .map(pct)
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(EXIT_OK)
}

pub fn verify_distance(a: &DistanceArgs, out: &mut dyn Write) -> CmdResult {
    let q = DistanceQuery::new(a.h, a.w, a.d, a.th, a.tw)?;
    let window = GroupWindow::new(a.s)?;
    let rep = distance::report(&q, GroupContext::single(a.d), window, a.samples, a.seed)?;
    let bound_holds = rep.lower_bound <= rep.exact + 1e-12;
    let mc_ok = (rep.mc_estimate - rep.exact).abs() <= 3.0 * rep.mc_stderr + 1e-12;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "verify-distance",
        "config": {
            "H": a.h, "W": a.w, "d": a.d, "s": a.s,
            "samples": a.samples, "seed": a.seed,
            "t": [a.th, a.tw],
        },
        "report": rep,
        "checks": { "bound_holds": bound_holds, "mc_within_3_sigma": mc_ok },
    });
    emit(&report, a.out.as_ref(), out)?;
    if a.out.is_some() {
        let _ = writeln!(
            out,
            "exact {:.6}  bound {:.6}  mc {:.6} ± {:.6}",
            rep.exact, rep.lower_bound, rep.mc_estimate, rep.mc_stderr
        );
    }
    Ok(if bound_holds && mc_ok {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

/// A control block on every layer, two groups, 2×2 windows where they fit.
fn every_layer_plan(cfg: &RunConfig) -> Result<PlacementPlan, CliError> {
    let n = cfg.arch.d.min(2);
    let s = if cfg.geometry.h.is_multiple_of(2) && cfg.geometry.w.is_multiple_of(2) {
        2
    } else {
        1
    };
    Ok(PlacementPlan::uniform(0..cfg.arch.l, n, s)?)
}

pub fn demo(a: &DemoArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::load_or(a.config.as_deref(), RunConfig::toy)?;
    if a.sweep.is_some() && !a.demo_init {
        return Err(CliError::invalid(
            "--sweep needs --demo-init: with zero-initialised injections every skip is a no-op",
        ));
    }
    let plan = match &a.plan {
        Some(p) => load_plan(p)?,
        None => every_layer_plan(&cfg)?,
    };
    let seed = a.seed.or(cfg.seeds.model).unwrap_or(0);
    let sweep_seed = cfg.seeds.sweep.unwrap_or(seed);
    let mcfg = cfg.model_config()?;
    let mut model = build_model(&mcfg, &plan, seed)?;
    if a.demo_init {
        model.demo_init(seed, DEMO_INIT_STD);
    }
    let inputs = ForwardInputs::random(mcfg.geom, &mut ChaCha8Rng::seed_from_u64(seed));
    let full = model.forward(&inputs, &BTreeSet::new())?;
    let skip_dev = match a.skip {
        Some(l) => {
            let skipped = model.forward(&inputs, &BTreeSet::from([l]))?;
            let (mse, max_l2) = output_deviation(&full, &skipped);
            Some(json!({ "layer": l, "mse": mse, "max_token_l2": max_l2 }))
        }
        None => None,
    };
    let sweep_rows = match &a.sweep {
        Some(path) => {
            let rows = skip_sweep(&model, a.trials, sweep_seed)?;
            let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
            write_sweep(file, &rows)?;
            Some(rows)
        }
        None => None,
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "demo",
        "config": {
            "run": cfg,
            "plan": plan,
            "seed": seed,
            "sweep_seed": sweep_seed,
            "demo_init": a.demo_init,
            "demo_init_std": a.demo_init.then_some(DEMO_INIT_STD),
            "skip": a.skip,
            "trials": a.trials,
            "sweep_csv": a.sweep.as_ref().map(|p| p.display().to_string()),
        },
        "hosted_layers": model.hosted_layers(),
        "backbone_params": model.backbone_param_count(),
        "control_params": model.control_param_count(),
        "output_sum": full.sum(),
        "skip_deviation": skip_dev,
        "sweep": sweep_rows,
    });
    emit(&report, a.out.as_ref(), out)?;
    if let (Some(_), Some(d)) = (&a.out, &report["skip_deviation"].as_object()) {
        let _ = writeln!(
            out,
            "skip deviation: mse {} max token L2 {}",
            d["mse"], d["max_token_l2"]
        );
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct TimingRow {
    iter: usize,
    mixer_ms: f64,
    full_attention_ms: f64,
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    let base = match &a.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let d = a.d.or(base.as_ref().map(|c| c.arch.d)).unwrap_or(256);
    let h = a.h.or(base.as_ref().map(|c| c.geometry.h)).unwrap_or(32);
    let w = a.w.or(base.as_ref().map(|c| c.geometry.w)).unwrap_or(32);
    if a.iters == 0 {
        return Err(CliError::invalid("--iters must be at least 1"));
    }
    if h != w {
        return Err(CliError::invalid(format!(
            "bench compares against one full-grid window and needs H = W, got {h}×{w}"
        )));
    }
    let geom = FeatureGeometry::new(h, w, d)?;
    let window = GroupWindow::new(a.s)?;
    window.validate(h, w)?;
    let spec = make_shuffle_spec(geom, a.n_groups, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let params = TdsmParams::random(spec.widths(), false, &mut rng);
    let full_params = GroupParams::random(d, false, &mut rng);
    let x = Tensor::randn(&geom.shape(), 1.0, &mut rng);
    let full_window = GroupWindow { s: h };

    let mut rows = Vec::with_capacity(a.iters);
    for iter in 0..a.iters {
        let t0 = Instant::now();
        tdsm_forward(&x, &spec, window, &params)?;
        let t1 = Instant::now();
        grouped_attention(&x, full_window, &full_params)?;
        let t2 = Instant::now();
        rows.push(TimingRow {
            iter,
            mixer_ms: (t1 - t0).as_secs_f64() * 1e3,
            full_attention_ms: (t2 - t1).as_secs_f64() * 1e3,
        });
    }
    let n = (h * w) as u64;
    let grouped = grouped_attention_flops(n, d, a.n_groups, a.s)?;
    let full = full_attention_flops(n, d as u64);
    let mean = |f: fn(&TimingRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "bench",
        "config": { "D": d, "H": h, "W": w, "n_groups": a.n_groups, "s": a.s, "iters": a.iters, "seed": a.seed },
        "analytical": {
            "mixer_flops": grouped,
            "full_attention_flops": full,
            "flop_ratio": grouped as f64 / full as f64,
        },
        "timing": {
            "rows": rows,
            "mixer_mean_ms": mean(|r| r.mixer_ms),
            "full_attention_mean_ms": mean(|r| r.full_attention_ms),
        },
    });
    emit(&report, a.out.as_ref(), out)?;
    if a.out.is_some() {
        let _ = writeln!(
            out,
            "analytical FLOP ratio {:.4}; mean ms mixer {:.3} / full {:.3}",
            grouped as f64 / full as f64,
            mean(|r| r.mixer_ms),
            mean(|r| r.full_attention_ms)
        );
    }
    Ok(EXIT_OK)
}
