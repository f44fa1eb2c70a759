//! File formats: node lists, distance matrices or edge lists, observation
//! tables, stream manifests and prompt pools.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use eac_core::data::{ObservationSeries, SynthStream};
use eac_core::graph::{NodeId, PeriodGraph, StreamGraph};
use eac_core::linalg::Matrix;
use eac_core::pool::PromptPool;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Adjacency threshold used when a manifest does not set one.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Distance given to pairs an edge list leaves out. Large enough that the
/// kernel weight underflows to zero, small enough that its square is finite.
const UNLISTED: f64 = 1e150;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFormat {
    /// One row per line, comma separated.
    #[default]
    Dense,
    /// `from_id,to_id,distance` triples.
    Edges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodEntry {
    pub nodes: PathBuf,
    pub distances: PathBuf,
    #[serde(default)]
    pub distance_format: DistanceFormat,
    pub observations: PathBuf,
}

/// JSON description of a stream. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub periods: Vec<PeriodEntry>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// A loaded stream and the files it came from.
#[derive(Clone, Debug)]
pub struct LoadedStream {
    pub graph: StreamGraph,
    pub series: Vec<ObservationSeries>,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn reader(text: &str, headers: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(headers).trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes())
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn number(path: &Path, line: u64, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::data(path, format!("line {line}: `{cell}` is not a finite number")))
}

/// Dense matrix, one row per line.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = read_text(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader(&text, false).records() {
        let record = record.map_err(|e| CliError::data(path, e))?;
        let line = line_of(&record);
        rows.push(record.iter().map(|c| number(path, line, c)).collect::<Result<_>>()?);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(CliError::data(path, "empty matrix"));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(|e| CliError::in_file(path, e))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut text = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Node ids, one per line.
pub fn read_nodes(path: &Path) -> Result<Vec<NodeId>> {
    let ids: Vec<NodeId> = read_text(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(NodeId::new).collect();
    if ids.is_empty() {
        return Err(CliError::data(path, "no node ids"));
    }
    Ok(ids)
}

/// Reads an edge list into a dense matrix in `nodes` order. Missing reverse
/// edges are mirrored and unlisted pairs get no edge. Returns the kernel
/// width of the listed distances alongside.
pub fn read_edge_list(path: &Path, nodes: &[NodeId]) -> Result<(Matrix, f64)> {
    let text = read_text(path)?;
    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let n = nodes.len();
    let mut listed: Vec<Option<f64>> = vec![None; n * n];
    for record in reader(&text, false).records() {
        let record = record.map_err(|e| CliError::data(path, e))?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(CliError::data(path, format!("line {line}: expected from_id,to_id,distance")));
        }
        let at = |cell: &str| index.get(cell).copied().ok_or_else(|| CliError::data(path, format!("line {line}: unknown node id `{cell}`")));
        let (i, j) = (at(&record[0])?, at(&record[1])?);
        let d = number(path, line, &record[2])?;
        if i == j {
            continue;
        }
        listed[i * n + j] = Some(d);
        listed[j * n + i].get_or_insert(d);
    }
    let present: Vec<f64> = listed.iter().flatten().copied().collect();
    let sigma = population_std(&present);
    let data = listed.iter().enumerate().map(|(c, d)| if c / n == c % n { 0.0 } else { d.unwrap_or(UNLISTED) }).collect();
    Ok((Matrix::from_vec(n, n, data).map_err(|e| CliError::in_file(path, e))?, sigma))
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// Observation table `time,<id>...`; empty cells are missing.
pub fn read_observations(path: &Path, graph: &PeriodGraph) -> Result<ObservationSeries> {
    let text = read_text(path)?;
    let mut rdr = reader(&text, true);
    let header = rdr.headers().map_err(|e| CliError::data(path, e))?.clone();
    if header.get(0) != Some("time") {
        return Err(CliError::data(path, "header must start with `time`"));
    }
    let ids: Vec<NodeId> = header.iter().skip(1).map(NodeId::new).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::data(path, e))?;
        let line = line_of(&record);
        let row = record
            .iter()
            .skip(1)
            .map(|c| if c.is_empty() { Ok(None) } else { number(path, line, c).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    ObservationSeries::from_columns(&ids, &rows, graph).map_err(|e| CliError::in_file(path, e))
}

pub fn write_observations(path: &Path, series: &ObservationSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["time".to_string()];
    header.extend(series.node_ids.iter().map(|id| id.as_str().to_string()));
    let map = |e: csv::Error| CliError::data(path, e);
    w.write_record(&header).map_err(map)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend(series.values.row(t).iter().map(f64::to_string));
        w.write_record(&row).map_err(map)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(path, e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_manifest(path: &Path) -> Result<StreamManifest> {
    let m: StreamManifest = serde_json::from_str(&read_text(path)?).map_err(|e| CliError::data(path, e))?;
    if m.periods.is_empty() {
        return Err(CliError::data(path, "stream lists no periods"));
    }
    Ok(m)
}

/// Every file a manifest refers to, manifest first.
pub fn manifest_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = vec![path.to_path_buf()];
    for p in &m.periods {
        out.extend([base.join(&p.nodes), base.join(&p.distances), base.join(&p.observations)]);
    }
    Ok(out)
}

pub fn load_stream(path: &Path) -> Result<LoadedStream> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut graph = StreamGraph::default();
    let mut series = Vec::new();
    for (i, p) in m.periods.iter().enumerate() {
        let nodes_path = base.join(&p.nodes);
        let nodes = read_nodes(&nodes_path)?;
        let dist_path = base.join(&p.distances);
        let (distances, sigma) = match p.distance_format {
            DistanceFormat::Dense => (read_matrix(&dist_path)?, m.sigma),
            DistanceFormat::Edges => {
                let (d, s) = read_edge_list(&dist_path, &nodes)?;
                (d, Some(m.sigma.unwrap_or(s)))
            }
        };
        let g = PeriodGraph::new(i + 1, nodes, distances, m.threshold, sigma).map_err(|e| CliError::in_file(&dist_path, e))?;
        series.push(read_observations(&base.join(&p.observations), &g)?);
        graph.push(g).map_err(|e| CliError::in_file(&nodes_path, e))?;
    }
    Ok(LoadedStream { graph, series })
}

/// Writes a stream as a manifest plus per-period files under `dir`.
pub fn write_stream(dir: &Path, stream: &SynthStream, threshold: f64) -> Result<PathBuf> {
    let mut periods = Vec::new();
    for (g, s) in stream.graph.periods().iter().zip(&stream.series) {
        let sub = PathBuf::from(format!("period-{}", g.period_index));
        let entry = PeriodEntry {
            nodes: sub.join("nodes.txt"),
            distances: sub.join("distances.csv"),
            distance_format: DistanceFormat::Dense,
            observations: sub.join("observations.csv"),
        };
        let ids: Vec<&str> = g.nodes.iter().map(NodeId::as_str).collect();
        write_text(&dir.join(&entry.nodes), &(ids.join("\n") + "\n"))?;
        write_matrix(&dir.join(&entry.distances), &g.distances)?;
        write_observations(&dir.join(&entry.observations), s)?;
        periods.push(entry);
    }
    let path = dir.join("stream.json");
    write_json(&path, &StreamManifest { threshold, sigma: None, periods })?;
    Ok(path)
}

pub fn read_pool(path: &Path) -> Result<PromptPool> {
    PromptPool::decode(&read_text(path)?).map_err(|e| CliError::data(path, e))
}
