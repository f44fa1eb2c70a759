//! `analyze`: heterogeneity, spectrum, the dispersion decomposition and the
//! random-projection probe on saved pools or plain matrices. Each writes a JSON
//! report and a CSV series.

use std::path::{Path, PathBuf};

use eac_core::analysis::{
    dispersion_decomposition, heterogeneity_d, neutralize_cross_term, random_projection_probe, svd_cumulative,
    DispersionReport, ProbeConfig, ProbeReport, SpectralReport,
};
use eac_core::linalg::Matrix;
use eac_core::rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum What {
    Hetero,
    Svd,
    Prop1,
    Prop2,
}

impl What {
    fn stem(self) -> &'static str {
        match self {
            What::Hetero => "hetero",
            What::Svd => "svd",
            What::Prop1 => "prop1",
            What::Prop2 => "prop2",
        }
    }
}

/// Rows and columns of the random matrix `prop2` probes without an input.
pub const PROBE_SHAPE: (usize, usize) = (100, 64);

#[derive(Clone, Debug)]
pub struct AnalyzeRequest {
    pub what: What,
    pub pool: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    /// Prompt matrix added to `matrix` by `prop1` and `hetero`.
    pub prompt: Option<PathBuf>,
    pub k: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    pub oracle: bool,
    pub neutralize: bool,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct HeteroReport {
    input: String,
    rows: usize,
    cols: usize,
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "D_with_prompt", skip_serializing_if = "Option::is_none")]
    d_with_prompt: Option<f64>,
}

#[derive(Serialize)]
struct SvdReport {
    input: String,
    #[serde(flatten)]
    spectrum: SpectralReport,
    ratio_at_k: Option<f64>,
}

#[derive(Serialize)]
struct Prop1Report {
    input: String,
    prompt: String,
    #[serde(flatten)]
    report: DispersionReport,
    neutralized: Option<DispersionReport>,
}

#[derive(Serialize)]
struct Prop2Report {
    input: String,
    #[serde(flatten)]
    probe: ProbeReport,
}

/// Paths of the files written.
#[derive(Clone, Debug)]
pub struct AnalyzeOutput {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub summary: String,
}

fn numerical(e: eac_core::Error) -> CliError {
    CliError::from(e)
}

/// The matrix to analyze and a label for it: a materialized pool or a
/// dense matrix file.
fn primary(req: &AnalyzeRequest) -> Result<Option<(Matrix, String)>> {
    match (&req.pool, &req.matrix) {
        (Some(_), Some(_)) => Err(CliError::Config("give either --pool or --matrix, not both".into())),
        (Some(p), None) => Ok(Some((io::read_pool(p)?.materialize(), p.display().to_string()))),
        (None, Some(m)) => Ok(Some((io::read_matrix(m)?, m.display().to_string()))),
        (None, None) => Ok(None),
    }
}

fn required(req: &AnalyzeRequest) -> Result<(Matrix, String)> {
    primary(req)?.ok_or_else(|| CliError::Config(format!("`{}` needs --pool or --matrix", req.what.stem())))
}

fn same_shape(path: &Path, a: &Matrix, b: &Matrix) -> Result<()> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(CliError::data(path, format!("{}x{} does not match {}x{}", b.rows(), b.cols(), a.rows(), a.cols())));
    }
    Ok(())
}

pub fn analyze(req: &AnalyzeRequest) -> Result<AnalyzeOutput> {
    let json = req.out.join(format!("{}.json", req.what.stem()));
    let csv = req.out.join(format!("{}.csv", req.what.stem()));
    let summary = match req.what {
        What::Hetero => {
            let (x, input) = required(req)?;
            let d_with_prompt = match &req.prompt {
                Some(path) => {
                    let p = io::read_matrix(path)?;
                    same_shape(path, &x, &p)?;
                    Some(heterogeneity_d(&x.sub(&p.scale(-1.0)).map_err(numerical)?))
                }
                None => None,
            };
            let r = HeteroReport { input, rows: x.rows(), cols: x.cols(), d: heterogeneity_d(&x), d_with_prompt };
            io::write_json(&json, &r)?;
            io::write_text(&csv, &format!("rows,cols,D,D_with_prompt\n{},{},{},{}\n", r.rows, r.cols, r.d, opt(r.d_with_prompt)))?;
            format!("D = {}", r.d)
        }
        What::Svd => {
            let (p, input) = required(req)?;
            let spectrum = svd_cumulative(&p, req.k);
            let ratio_at_k = spectrum.cumulative_ratio.as_ref().and_then(|r| r.get(req.k.saturating_sub(1)).copied());
            let mut series = String::from("index,singular_value,cumulative_ratio\n");
            for (i, s) in spectrum.singular_values.iter().enumerate() {
                let ratio = spectrum.cumulative_ratio.as_ref().map(|r| r[i]);
                series.push_str(&format!("{},{},{}\n", i + 1, s, opt(ratio)));
            }
            let summary = format!("rank-{} error {} (cumulative ratio {})", req.k, spectrum.rank_k_error, opt(ratio_at_k));
            io::write_json(&json, &SvdReport { input, spectrum, ratio_at_k })?;
            io::write_text(&csv, &series)?;
            summary
        }
        What::Prop1 => {
            let (x, input) = match (&req.matrix, &req.pool) {
                (Some(m), _) => (io::read_matrix(m)?, m.display().to_string()),
                _ => return Err(CliError::Config("`prop1` needs --matrix (features) and --prompt or --pool".into())),
            };
            let (p, prompt, source) = match (&req.prompt, &req.pool) {
                (Some(path), _) => (io::read_matrix(path)?, path.display().to_string(), path.clone()),
                (None, Some(path)) => (io::read_pool(path)?.materialize(), path.display().to_string(), path.clone()),
                (None, None) => return Err(CliError::Config("`prop1` needs --prompt or --pool".into())),
            };
            same_shape(&source, &x, &p)?;
            let report = dispersion_decomposition(&x, &p).map_err(numerical)?;
            let neutralized = if req.neutralize {
                let q = neutralize_cross_term(&x, &p).map_err(numerical)?;
                Some(dispersion_decomposition(&x, &q).map_err(numerical)?)
            } else {
                None
            };
            let mut series = String::from("variant,D_before,D_after,delta,paper_rhs,cross_term,residual,inequality_held\n");
            for (name, r) in std::iter::once(("raw", &report)).chain(neutralized.iter().map(|r| ("neutralized", r))) {
                series.push_str(&format!(
                    "{name},{},{},{},{},{},{},{}\n",
                    r.d_before, r.d_after, r.delta, r.paper_rhs, r.cross_term, r.residual, r.inequality_held
                ));
            }
            let summary = format!("delta {} = rhs {} + cross {} (residual {:e})", report.delta, report.paper_rhs, report.cross_term, report.residual);
            io::write_json(&json, &Prop1Report { input, prompt, report, neutralized })?;
            io::write_text(&csv, &series)?;
            summary
        }
        What::Prop2 => {
            let (p, input) = match primary(req)? {
                Some(found) => found,
                None => {
                    let (n, d) = PROBE_SHAPE;
                    let mut r = rng::stream(req.seed, "analyze/gaussian");
                    let data = (0..n * d).map(|_| rng::normal(&mut r)).collect();
                    (Matrix::from_vec(n, d, data).map_err(numerical)?, format!("gaussian {n}x{d} seed {}", req.seed))
                }
            };
            let cfg = ProbeConfig { k: req.k, epsilon: req.epsilon, trials: req.trials, seed: req.seed, oracle: req.oracle };
            let probe = random_projection_probe(&p, cfg).map_err(|e| match e {
                eac_core::Error::InvalidArgument { .. } => CliError::Config(e.to_string()),
                other => numerical(other),
            })?;
            let mut series = String::from("trial,relative_error,success\n");
            for (t, e) in probe.errors.iter().enumerate() {
                series.push_str(&format!("{t},{e},{}\n", *e <= req.epsilon));
            }
            let summary = format!(
                "success rate {} at epsilon {}, median error {}, svd floor {}",
                probe.empirical_success_rate, req.epsilon, probe.error_quantiles[2], probe.svd_floor
            );
            io::write_json(&json, &Prop2Report { input, probe })?;
            io::write_text(&csv, &series)?;
            summary
        }
    };
    Ok(AnalyzeOutput { json, csv, summary })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
