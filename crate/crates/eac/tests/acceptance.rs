//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.
//!
//! Run alone with `cargo test -p eac --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use eac::runner::WallClock;
use eac_core::analysis::{dispersion_decomposition, neutralize_cross_term, svd_cumulative};
use eac_core::backbone::Backbone;
use eac_core::data::{synth_stream, SynthSpec, SynthStream, WindowSpec};
use eac_core::engine::{
    aggregate, compare_epoch_cost, prepare_periods, run_seed, stream_avg_mae, ExperimentConfig, Model, Observer,
    PeriodData, PeriodReport, Scheme, SeedResult,
};
use eac_core::graph::NodeId;
use eac_core::linalg::Matrix;
use eac_core::pool::{PoolMode, PromptPool};
use eac_core::rng;
use eac_core::verify::{gradcheck_suite, DEFAULT_SEEDS, GRADCHECK_TOL};

const DECOMPOSITION_TOL: f64 = 1e-9;
const DECOMPOSITION_SECONDS: f64 = 5.0;
const GRADCHECK_SECONDS: f64 = 60.0;
const ECKART_YOUNG_TOL: f64 = 1e-8;
const ECKART_YOUNG_SECONDS: f64 = 5.0;
const ORDERING_SECONDS: f64 = 600.0;
const MIN_SPEEDUP: f64 = 1.1;
const TIMING_ROUNDS: usize = 7;
const LIGHTWEIGHT_RATIO: f64 = (500.0 * 6.0 + 6.0 * 64.0) / (500.0 * 64.0);
const HETEROGENEITY_MIN_SEEDS: usize = 4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, number: usize, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("criterion {number} PASS {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("criterion {number} FAIL {name}: {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix {
    let mut r = rng::stream(seed, name);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, "acceptance/decomposition");
    let (mut worst, mut min_rhs) = (0.0f64, f64::INFINITY);
    for trial in 0..200u64 {
        let n = 1 + (rng::uniform(&mut r, 0.0, 50.0) as usize).min(49);
        let d = 1 + (rng::uniform(&mut r, 0.0, 32.0) as usize).min(31);
        let x = gaussian(n, d, trial, "x").scale(2.0);
        let p = gaussian(n, d, trial, "p");
        let rep = dispersion_decomposition(&x, &p).map_err(|e| e.to_string())?;
        worst = worst.max(rep.residual.abs() / (1.0 + rep.delta.abs()));
        let q = neutralize_cross_term(&x, &p).map_err(|e| e.to_string())?;
        let rep = dispersion_decomposition(&x, &q).map_err(|e| e.to_string())?;
        worst = worst.max(rep.residual.abs() / (1.0 + rep.delta.abs()));
        if (rep.delta - rep.paper_rhs).abs() > DECOMPOSITION_TOL * (1.0 + rep.delta.abs()) || rep.paper_rhs < 0.0 {
            return Err(format!("trial {trial}: neutralized delta {} vs rhs {}", rep.delta, rep.paper_rhs));
        }
        min_rhs = min_rhs.min(rep.paper_rhs);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= DECOMPOSITION_TOL && secs < DECOMPOSITION_SECONDS,
        format!("200 pairs, max scaled residual {worst:.2e} (tol {DECOMPOSITION_TOL:e}), min neutralized rhs {min_rhs:.3e}, {secs:.2}s (limit {DECOMPOSITION_SECONDS}s)"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = gradcheck_suite(DEFAULT_SEEDS, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    check(
        failed.is_empty() && secs < GRADCHECK_SECONDS,
        format!(
            "{} checks x {DEFAULT_SEEDS} seeds, worst {} at {:.2e} (tol {GRADCHECK_TOL:e}), failed {failed:?}, {secs:.1}s (limit {GRADCHECK_SECONDS}s)",
            rows.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn eckart_young() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, "acceptance/eckart-young");
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let rows = 2 + rng::uniform(&mut r, 0.0, 30.0) as usize;
        let cols = 1 + rng::uniform(&mut r, 0.0, 20.0) as usize;
        let k = 1 + (rng::uniform(&mut r, 0.0, cols as f64) as usize).min(cols - 1);
        let p = gaussian(rows, cols, trial, "svd");
        let rep = svd_cumulative(&p, k);
        // the reconstruction is measured directly, the floor comes from the spectrum
        worst = worst.max((rep.rank_k_error - rep.tail_energy).abs());
        let energy: f64 = rep.singular_values.iter().map(|s| s * s).sum();
        let frob = p.frobenius_norm().powi(2);
        if (energy - frob).abs() > 1e-9 * frob {
            return Err(format!("trial {trial}: singular values carry {energy}, matrix {frob}"));
        }
        let ratio = rep.cumulative_ratio.ok_or(format!("trial {trial}: no ratios"))?;
        if !ratio.windows(2).all(|w| w[0] <= w[1]) || *ratio.last().unwrap() != 1.0 {
            return Err(format!("trial {trial}: cumulative ratio not monotone to 1: {ratio:?}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= ECKART_YOUNG_TOL && secs < ECKART_YOUNG_SECONDS,
        format!("50 matrices, max |error - floor| {worst:.2e} (tol {ECKART_YOUNG_TOL:e}), ratios monotone ending at 1, {secs:.2}s"),
    )
}

/// Backbone checkpoints after every period.
#[derive(Default)]
struct Checkpoints(Vec<String>);

impl Observer for Checkpoints {
    fn period_end(&mut self, _seed: u64, _period: usize, model: &Model) -> eac_core::Result<()> {
        self.0.push(model.backbone.to_checkpoint());
        Ok(())
    }
}

fn ordering_config(scheme: Scheme) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(scheme);
    cfg.d = 16;
    cfg.epochs_max = 10;
    cfg.patience = 3;
    cfg.batch_size = 32;
    cfg.seeds = SEEDS.to_vec();
    cfg.window = WindowSpec { stride: 4, ..WindowSpec::default() };
    cfg
}

struct SchemeRun {
    results: Vec<SeedResult>,
    report: Vec<PeriodReport>,
    checkpoints: Vec<Vec<String>>,
}

fn run_scheme(stream: &SynthStream, scheme: Scheme) -> Result<SchemeRun, String> {
    let cfg = ordering_config(scheme);
    let periods = prepare_periods(&cfg, &stream.graph, &stream.series).map_err(|e| e.to_string())?;
    let (mut results, mut checkpoints) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let mut obs = Checkpoints::default();
        results.push(run_seed(&cfg, &periods, seed, &WallClock::new(), &mut obs).map_err(|e| e.to_string())?);
        checkpoints.push(obs.0);
    }
    let report = aggregate(&results).map_err(|e| e.to_string())?;
    Ok(SchemeRun { results, report, checkpoints })
}

fn freezing(eac: &SchemeRun) -> Outcome {
    let mut lines = Vec::new();
    for (seed, cps) in SEEDS.iter().zip(&eac.checkpoints) {
        if cps.len() != 3 || cps.iter().any(|c| c != &cps[0]) {
            return Err(format!("seed {seed}: backbone checkpoints differ across periods"));
        }
        let digests: Vec<&str> = eac.results.iter().find(|r| r.seed == *seed).unwrap().periods.iter().map(|p| p.backbone_digest.as_str()).collect();
        lines.push(format!("seed {seed} {}", &digests[0][..12]));
    }
    let nodes: Vec<usize> = eac.report.iter().map(|p| p.num_nodes).collect();
    check(nodes == [40, 50, 60], format!("nodes {nodes:?}, checkpoints identical after periods 1-3 for all seeds ({})", lines.join(", ")))
}

fn avg_mae_by_period(report: &[PeriodReport]) -> Vec<f64> {
    report.iter().map(|p| p.horizons.iter().find(|h| h.horizon == "avg").unwrap().mae.mean).collect()
}

fn ordering(eac: &SchemeRun, nn: &SchemeRun, pretrain: &SchemeRun, secs: f64) -> Outcome {
    let m = |r: &SchemeRun| stream_avg_mae(&r.report).unwrap();
    let (e, n, p) = (m(eac), m(nn), m(pretrain));
    let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    check(
        e <= n && e <= p && secs < ORDERING_SECONDS,
        format!(
            "avg MAE over periods EAC {e:.4}, ContinualNN {n:.4} (margin {:.4}), PretrainST {p:.4} (margin {:.4}); per period EAC {} NN {} Pretrain {}; {secs:.0}s (limit {ORDERING_SECONDS}s)",
            n - e,
            p - e,
            fmt(avg_mae_by_period(&eac.report)),
            fmt(avg_mae_by_period(&nn.report)),
            fmt(avg_mae_by_period(&pretrain.report)),
        ),
    )
}

fn efficiency(stream: &SynthStream) -> Outcome {
    let mut cfg = ExperimentConfig::new(Scheme::Eac);
    cfg.epochs_max = 4;
    cfg.patience = 2;
    cfg.window = WindowSpec { stride: 8, ..WindowSpec::default() };
    let periods: Vec<PeriodData> = prepare_periods(&cfg, &stream.graph, &stream.series).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for target in 1..periods.len() {
        let cost = compare_epoch_cost(&cfg, &periods, target, 1, TIMING_ROUNDS, &WallClock::new()).map_err(|e| e.to_string())?;
        ok &= cost.speedup >= MIN_SPEEDUP;
        parts.push(format!(
            "period {} EAC {:.3}s vs ContinualAN {:.3}s per epoch, speedup {:.2}",
            cost.period_index, cost.eac_median, cost.full_median, cost.speedup
        ));
    }
    check(ok, format!("d={}, median of {TIMING_ROUNDS} interleaved epochs: {} (min {MIN_SPEEDUP})", cfg.d, parts.join("; ")))
}

fn lightweight() -> Outcome {
    let ids: Vec<NodeId> = (0..500).map(|i| NodeId::new(format!("n{i}"))).collect();
    let pool = PromptPool::init(&ids, 64, 6, PoolMode::LowRank, 0).map_err(|e| e.to_string())?;
    let tunable = pool.param_count().tunable;
    let ratio = tunable as f64 / (500.0 * 64.0);
    let cfg = ExperimentConfig::new(Scheme::Eac);
    let backbone = Backbone::build(cfg.backbone(0.0), 0).map_err(|e| e.to_string())?.param_count();
    check(
        tunable == 500 * 6 + 6 * 64 && (ratio - LIGHTWEIGHT_RATIO).abs() < 1e-15,
        format!(
            "pool {tunable} params vs full 32000, ratio {ratio:.5} (expected {LIGHTWEIGHT_RATIO:.5}); pool share of the whole model {:.1}% (backbone {backbone})",
            100.0 * tunable as f64 / (tunable + backbone) as f64
        ),
    )
}

fn heterogeneity(eac: &SchemeRun) -> Outcome {
    let mut rising = 0;
    let mut series = Vec::new();
    for r in &eac.results {
        let first = &r.periods[0];
        rising += usize::from(first.heterogeneity_end > first.heterogeneity_start);
        let per: Vec<String> = r.periods.iter().map(|p| format!("{:.3}->{:.3}", p.heterogeneity_start, p.heterogeneity_end)).collect();
        series.push(format!("seed {} [{}]", r.seed, per.join(" ")));
    }
    check(
        rising >= HETEROGENEITY_MIN_SEEDS,
        format!("D rises over initial training in {rising}/5 seeds (need {HETEROGENEITY_MIN_SEEDS}); {}", series.join("; ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"scheme": "EAC", "d": 8, "epochs_max": 3, "patience": 1, "window": {"t_in": 12, "t_out": 12, "stride": 8}}"#)
        .map_err(|e| e.to_string())?;
    let run = |out: &Path, workers: &str| {
        Command::new(env!("CARGO_BIN_EXE_eac"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--synth", "n0=40,growth=10,periods=3,T=2000", "--seeds", "1,2"])
            .arg("--out")
            .arg(out)
            .env("EAC_WORKERS", workers)
            .output()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, workers) in [(&a, "1"), (&b, "2")] {
        let o = run(out, workers).map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("run failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let mut files = vec!["report.json".to_string(), "table.csv".into(), "heterogeneity.csv".into()];
    for seed in [1, 2] {
        files.push(format!("seeds/seed-{seed}/report.json"));
        for p in 1..=3 {
            files.push(format!("seeds/seed-{seed}/checkpoint-period-{p}.txt"));
            files.push(format!("seeds/seed-{seed}/pool-period-{p}.txt"));
        }
    }
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?, std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?);
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} report files byte-identical across two runs (1 and 2 workers)", files.len()))
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.report(1, "decomposition identity", decomposition());
    suite.report(2, "gradient verification", gradients());
    suite.report(3, "Eckart-Young oracle", eckart_young());

    let stream = synth_stream(&SynthSpec::default()).expect("default synthetic stream");
    let start = Instant::now();
    let runs = run_scheme(&stream, Scheme::Eac).and_then(|eac| {
        let nn = run_scheme(&stream, Scheme::ContinualNn)?;
        let pretrain = run_scheme(&stream, Scheme::PretrainSt)?;
        Ok((eac, nn, pretrain))
    });
    let secs = start.elapsed().as_secs_f64();
    match &runs {
        Ok((eac, nn, pretrain)) => {
            suite.report(4, "freezing contract", freezing(eac));
            suite.report(5, "forgetting ordering", ordering(eac, nn, pretrain, secs));
        }
        Err(e) => {
            suite.report(4, "freezing contract", Err(e.clone()));
            suite.report(5, "forgetting ordering", Err(e.clone()));
        }
    }
    suite.report(6, "efficiency", efficiency(&stream));
    suite.report(7, "lightweight pool", lightweight());
    match &runs {
        Ok((eac, _, _)) => suite.report(8, "heterogeneity trend", heterogeneity(eac)),
        Err(e) => suite.report(8, "heterogeneity trend", Err(e.clone())),
    }
    suite.report(9, "determinism", determinism());

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
