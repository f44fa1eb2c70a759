//! Experiment runs: config and data loading, seed fan-out and every file a
//! run leaves behind.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use eac_core::data::{synth_stream, FewShotPolicy, SynthSpec};
use eac_core::engine::{
    aggregate, aggregate_timings, prepare_periods, run_seed, Clock, ExperimentConfig, Model, Observer, PeriodData,
    PeriodReport, PeriodTimingReport, SeedResult,
};
use eac_core::VERSION;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{self, LoadedStream};

/// Environment variable holding the number of concurrent seed workers.
pub const WORKERS_ENV: &str = "EAC_WORKERS";

pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug)]
pub struct RunRequest {
    pub config: PathBuf,
    pub data: DataSource,
    pub out: PathBuf,
    /// Replaces the seeds of the config file.
    pub seeds: Option<Vec<u64>>,
    pub few_shot_random: bool,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Where the data came from, as recorded in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataEcho {
    Synth(SynthSpec),
    Stream { manifest_sha256: String },
}

/// Record of one run. Written even when the run fails.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: Option<ExperimentConfig>,
    pub data: Option<DataEcho>,
    pub inputs: Vec<InputFile>,
    pub workers: usize,
    pub seed_reports: Vec<PathBuf>,
    pub report: Option<PathBuf>,
    pub timings: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

/// Aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub data: DataEcho,
    pub periods: Vec<PeriodReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub version: String,
    #[serde(flatten)]
    pub result: SeedResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub version: String,
    pub periods: Vec<PeriodTimingReport>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TABLE_FILE: &str = "table.csv";
pub const HETEROGENEITY_FILE: &str = "heterogeneity.csv";

/// Worker count from the environment, 1 when unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|w| *w > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV}: `{v}` is not a positive integer"))),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = io::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Backbone checkpoint and encoded pool after each period.
#[derive(Default)]
struct Artifacts {
    periods: Vec<(usize, String, Option<String>)>,
}

impl Observer for Artifacts {
    fn period_end(&mut self, _seed: u64, period_index: usize, model: &Model) -> eac_core::Result<()> {
        let pool = model.pool.as_ref().map(|p| p.encode()).transpose()?;
        self.periods.push((period_index, model.backbone.to_checkpoint(), pool));
        Ok(())
    }
}

type SeedOutcome = (usize, Result<(SeedResult, Artifacts)>);

/// Runs every seed and writes reports under `req.out`. The manifest is
/// written whatever happens.
pub fn run(req: &RunRequest) -> Result<(RunManifest, Vec<PeriodReport>)> {
    let clock = WallClock::new();
    let mut manifest = RunManifest { version: VERSION.into(), workers: req.workers, ..RunManifest::default() };
    let outcome = run_inner(req, &mut manifest);
    manifest.wall_seconds = clock.seconds();
    if let Err(e) = &outcome {
        manifest.error = Some(e.to_string());
    }
    io::write_json(&req.out.join(MANIFEST_FILE), &manifest)?;
    outcome.map(|report| (manifest, report))
}

fn run_inner(req: &RunRequest, manifest: &mut RunManifest) -> Result<Vec<PeriodReport>> {
    std::fs::create_dir_all(&req.out).map_err(|e| CliError::io(&req.out, e))?;

    let mut inputs = vec![req.config.clone()];
    if let DataSource::Manifest(path) = &req.data {
        inputs.extend(io::manifest_inputs(path)?);
    }
    for path in inputs {
        let sha256 = io::file_digest(&path)?;
        manifest.inputs.push(InputFile { path, sha256 });
    }

    let mut cfg = load_config(&req.config)?;
    if let Some(seeds) = &req.seeds {
        cfg.seeds = seeds.clone();
    }
    if req.few_shot_random {
        cfg.few_shot_policy = FewShotPolicy::Random;
    }
    manifest.config = Some(cfg.clone());
    cfg.validate()?;

    let (stream, echo) = match &req.data {
        DataSource::Synth(spec) => {
            let s = synth_stream(spec)?;
            (LoadedStream { graph: s.graph, series: s.series }, DataEcho::Synth(spec.clone()))
        }
        DataSource::Manifest(path) => {
            let sha = manifest.inputs.iter().find(|f| &f.path == path).map(|f| f.sha256.clone()).unwrap_or_default();
            (io::load_stream(path)?, DataEcho::Stream { manifest_sha256: sha })
        }
    };
    manifest.data = Some(echo.clone());
    let periods = prepare_periods(&cfg, &stream.graph, &stream.series)?;

    let results = fan_out(&cfg, &periods, req.workers, |result, artifacts| {
        let dir = PathBuf::from("seeds").join(format!("seed-{}", result.seed));
        for (period, checkpoint, pool) in &artifacts.periods {
            io::write_text(&req.out.join(&dir).join(format!("checkpoint-period-{period}.txt")), checkpoint)?;
            if let Some(pool) = pool {
                io::write_text(&req.out.join(&dir).join(format!("pool-period-{period}.txt")), pool)?;
            }
        }
        let path = dir.join(REPORT_FILE);
        io::write_json(&req.out.join(&path), &SeedReport { version: VERSION.into(), result: result.clone() })?;
        manifest.seed_reports.push(path);
        Ok(())
    })?;

    let report = aggregate(&results)?;
    io::write_json(
        &req.out.join(REPORT_FILE),
        &RunReport { version: VERSION.into(), config: cfg.clone(), data: echo, periods: report.clone() },
    )?;
    manifest.report = Some(REPORT_FILE.into());
    io::write_json(&req.out.join(TIMINGS_FILE), &TimingReport { version: VERSION.into(), periods: aggregate_timings(&results) })?;
    manifest.timings = Some(TIMINGS_FILE.into());
    io::write_text(&req.out.join(TABLE_FILE), &table_csv(&report))?;
    manifest.table = Some(TABLE_FILE.into());
    io::write_text(&req.out.join(HETEROGENEITY_FILE), &heterogeneity_csv(&results))?;
    Ok(report)
}

/// Runs the seeds on `workers` threads. Every finished seed is handed to
/// `write` on the calling thread, so files are written by one writer.
/// Results come back in config seed order.
fn fan_out<W>(cfg: &ExperimentConfig, periods: &[PeriodData], workers: usize, mut write: W) -> Result<Vec<SeedResult>>
where
    W: FnMut(&SeedResult, &Artifacts) -> Result<()>,
{
    let seeds = &cfg.seeds;
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SeedResult>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<SeedOutcome>();
        for _ in 0..workers.clamp(1, seeds.len()) {
            let (tx, next) = (tx.clone(), &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let mut artifacts = Artifacts::default();
                let outcome = run_seed(cfg, periods, seed, &WallClock::new(), &mut artifacts)
                    .map(|r| (r, artifacts))
                    .map_err(CliError::from);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            slots[i] = Some(match outcome {
                Ok((result, artifacts)) => write(&result, &artifacts).map(|_| result),
                Err(e) => Err(e),
            });
        }
        Ok(())
    })?;
    slots.into_iter().map(|s| s.expect("every seed reports back")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Horizons 3/6/12/avg by MAE/RMSE/MAPE, mean and std over seeds.
pub fn table_csv(report: &[PeriodReport]) -> String {
    let mut out = String::from("period,horizon,mae_mean,mae_std,rmse_mean,rmse_std,mape_mean,mape_std\n");
    for p in report {
        for h in &p.horizons {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.period_index,
                h.horizon,
                h.mae.mean,
                h.mae.std,
                h.rmse.mean,
                h.rmse.std,
                fmt_opt(h.mape.map(|m| m.mean)),
                fmt_opt(h.mape.map(|m| m.std)),
            ));
        }
    }
    out
}

fn heterogeneity_csv(results: &[SeedResult]) -> String {
    let mut out = String::from("seed,period,start,end\n");
    for r in results {
        for p in &r.periods {
            out.push_str(&format!("{},{},{},{}\n", r.seed, p.period_index, p.heterogeneity_start, p.heterogeneity_end));
        }
    }
    out
}

/// Plain-text rendering of the aggregate table.
pub fn render_table(report: &[PeriodReport]) -> String {
    let cell = |m: f64, s: f64| format!("{m:.3}±{s:.3}");
    let mut out = format!("{:<7}{:<8}{:>18}{:>18}{:>18}\n", "period", "horizon", "MAE", "RMSE", "MAPE%");
    for p in report {
        for h in &p.horizons {
            let mape = h.mape.map_or_else(|| "n/a".to_string(), |m| cell(m.mean, m.std));
            out.push_str(&format!(
                "{:<7}{:<8}{:>18}{:>18}{:>18}\n",
                p.period_index,
                h.horizon,
                cell(h.mae.mean, h.mae.std),
                cell(h.rmse.mean, h.rmse.std),
                mape
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use eac_core::engine::Scheme;

    fn tiny(dir: &Path, seeds: &[u64]) -> RunRequest {
        let mut cfg = ExperimentConfig::new(Scheme::Eac);
        cfg.d = 4;
        cfg.k = 2;
        cfg.epochs_max = 2;
        cfg.patience = 1;
        cfg.batch_size = 16;
        cfg.window.stride = 8;
        let path = dir.join("config.json");
        io::write_json(&path, &cfg).unwrap();
        let spec = SynthSpec { n0: 5, growth: 1, periods: 2, t_per_period: 200, ..SynthSpec::default() };
        RunRequest {
            config: path,
            data: DataSource::Synth(spec),
            out: dir.join("out"),
            seeds: Some(seeds.to_vec()),
            few_shot_random: false,
            workers: 1,
        }
    }

    #[test]
    fn workers_do_not_change_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = tiny(dir.path(), &[1, 2, 3]);
        let (manifest, one) = run(&req).unwrap();
        assert_eq!(manifest.seed_reports.len(), 3);
        assert!(manifest.error.is_none());
        let first = std::fs::read(req.out.join(REPORT_FILE)).unwrap();
        req.workers = 3;
        req.out = dir.path().join("out3");
        let (_, three) = run(&req).unwrap();
        assert_eq!(one, three);
        assert_eq!(first, std::fs::read(req.out.join(REPORT_FILE)).unwrap());
        assert!(req.out.join("seeds/seed-2/pool-period-2.txt").exists());
    }

    #[test]
    fn failed_runs_still_leave_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut req = tiny(dir.path(), &[1]);
        io::write_text(&req.config, "{\"d\": 4}").unwrap();
        let err = run(&req).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("scheme"), "{err}");
        let m: RunManifest = serde_json::from_str(&io::read_text(&req.out.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(m.error.unwrap().contains("scheme"));
        assert_eq!(m.inputs.len(), 1);

        req.data = DataSource::Manifest(dir.path().join("absent.json"));
        assert_eq!(run(&req).unwrap_err().exit_code(), 2);
    }
}
