//! Observation series, supervised windows, chronological splits,
//! normalization, few-shot subsets and the synthetic stream generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, PeriodGraph, StreamGraph};
use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

pub const T_IN: usize = 12;
pub const T_OUT: usize = 12;
pub const MIN_STD: f64 = 1e-8;

/// Readings of one period, `T x n`, columns in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub period_index: usize,
    pub node_ids: Vec<NodeId>,
    pub values: Matrix,
}

impl ObservationSeries {
    /// Builds a series from raw columns, reordering them to `graph` order and
    /// imputing gaps: forward fill, then the column mean for leading gaps.
    pub fn from_columns(header: &[NodeId], rows: &[Vec<Option<f64>>], graph: &PeriodGraph) -> Result<Self> {
        let mut column_of: BTreeMap<&NodeId, usize> = BTreeMap::new();
        for (c, id) in header.iter().enumerate() {
            if graph.index_of(id).is_none() {
                return Err(Error::UnknownNode(id.to_string()));
            }
            if column_of.insert(id, c).is_some() {
                return Err(Error::DuplicateNode(id.to_string()));
            }
        }
        let order = graph
            .nodes
            .iter()
            .map(|id| column_of.get(id).copied().ok_or_else(|| Error::MissingNode(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let t = rows.len();
        let n = order.len();
        let mut values = Matrix::zeros(t, n);
        for (j, &c) in order.iter().enumerate() {
            let col: Vec<Option<f64>> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| match r.get(c) {
                    Some(Some(v)) if !v.is_finite() => Err(Error::Parse { line: i + 2, reason: format!("non-finite value {v}") }),
                    Some(v) => Ok(*v),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?;
            let observed: Vec<f64> = col.iter().flatten().copied().collect();
            if observed.is_empty() {
                return Err(Error::invalid("observations", format!("node `{}` has no observed values", graph.nodes[j])));
            }
            let mean = observed.iter().sum::<f64>() / observed.len() as f64;
            let mut last = None;
            for (i, v) in col.iter().enumerate() {
                let filled = match v {
                    Some(v) => {
                        last = Some(*v);
                        *v
                    }
                    None => last.unwrap_or(mean),
                };
                values.set(i, j, filled);
            }
        }
        Ok(ObservationSeries { period_index: graph.period_index, node_ids: graph.nodes.clone(), values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Columns for `ids`, in the order of `ids`.
    pub fn select_nodes(&self, ids: &[NodeId]) -> Result<ObservationSeries> {
        let cols = ids
            .iter()
            .map(|id| self.node_ids.iter().position(|n| n == id).ok_or_else(|| Error::UnknownNode(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Matrix::zeros(self.len(), cols.len());
        for i in 0..self.len() {
            for (j, &c) in cols.iter().enumerate() {
                values.set(i, j, self.values.get(i, c));
            }
        }
        Ok(ObservationSeries { period_index: self.period_index, node_ids: ids.to_vec(), values })
    }
}

/// One supervised sample: `input` is `t_in x n`, `target` the following `t_out x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub input: Matrix,
    pub target: Matrix,
    pub start_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { t_in: T_IN, t_out: T_OUT, stride: 1 }
    }
}

impl WindowSpec {
    pub fn span(&self) -> usize {
        self.t_in + self.t_out
    }
}

/// Raw time segments of a chronological split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
    /// Start index of each segment in the period timeline.
    pub offsets: [usize; 3],
}

fn rows_range(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    Matrix::from_vec(hi - lo, m.cols(), m.as_slice()[lo * m.cols()..hi * m.cols()].to_vec()).expect("row range")
}

/// Splits the timeline at `floor(r0 T)` and `floor((r0 + r1) T)`.
pub fn chrono_split(series: &Matrix, ratios: (f64, f64, f64), window: &WindowSpec) -> Result<Split> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 || ((r0 + r1 + r2) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios", format!("({r0}, {r1}, {r2}) must be positive and sum to 1")));
    }
    let t = series.rows();
    // the epsilon absorbs representation error in products such as 0.6 * 100
    let b1 = (r0 * t as f64 + 1e-9).floor() as usize;
    let b2 = ((r0 + r1) * t as f64 + 1e-9).floor() as usize;
    let span = window.span();
    for (name, len) in [("train", b1), ("val", b2 - b1), ("test", t - b2)] {
        if len < span {
            return Err(Error::TooShort(format!(
                "{name} segment has {len} steps, one window needs {span} (series length {t})"
            )));
        }
    }
    Ok(Split {
        train: rows_range(series, 0, b1),
        val: rows_range(series, b1, b2),
        test: rows_range(series, b2, t),
        offsets: [0, b1, b2],
    })
}

/// Number of windows `make_windows` produces for a segment of `len` steps.
pub fn window_count(len: usize, window: &WindowSpec) -> usize {
    if len < window.span() || window.stride == 0 {
        0
    } else {
        (len - window.span()) / window.stride + 1
    }
}

/// Slides a `t_in + t_out` window over `segment`; `offset` is added to each start index.
pub fn make_windows(segment: &Matrix, offset: usize, window: &WindowSpec) -> Result<Vec<WindowSample>> {
    if window.stride == 0 || window.t_in == 0 || window.t_out == 0 {
        return Err(Error::invalid("window", "t_in, t_out and stride must be positive"));
    }
    if segment.rows() < window.span() {
        return Err(Error::TooShort(format!(
            "segment of {} steps cannot hold a {}-step window",
            segment.rows(),
            window.span()
        )));
    }
    let count = window_count(segment.rows(), window);
    Ok((0..count)
        .map(|i| {
            let s = i * window.stride;
            WindowSample {
                input: rows_range(segment, s, s + window.t_in),
                target: rows_range(segment, s + window.t_in, s + window.span()),
                start_index: offset + s,
            }
        })
        .collect())
}

/// Scalar z-score normalizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Population mean and standard deviation over all entries; std is clamped to `1e-8`.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Normalizer { mean, std: var.sqrt().max(MIN_STD) }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_slice(&self, xs: &mut [f64]) {
        xs.iter_mut().for_each(|x| *x = self.apply(*x));
    }

    pub fn invert_slice(&self, zs: &mut [f64]) {
        zs.iter_mut().for_each(|z| *z = self.invert(*z));
    }
}

/// Windows of one period, split without leakage, with a train-fitted normalizer.
#[derive(Clone, Debug)]
pub struct PeriodDataset {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub normalizer: Normalizer,
    pub graph: PeriodGraph,
}

impl PeriodDataset {
    pub fn build(series: &ObservationSeries, graph: &PeriodGraph, ratios: (f64, f64, f64), window: &WindowSpec) -> Result<Self> {
        if series.node_ids != graph.nodes {
            return Err(Error::shape("period_dataset", "series columns differ from graph node order"));
        }
        let split = chrono_split(&series.values, ratios, window)?;
        Ok(PeriodDataset {
            train: make_windows(&split.train, split.offsets[0], window)?,
            val: make_windows(&split.val, split.offsets[1], window)?,
            test: make_windows(&split.test, split.offsets[2], window)?,
            normalizer: Normalizer::fit(split.train.as_slice()),
            graph: graph.clone(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotPolicy {
    /// Chronologically first windows.
    Prefix,
    /// Seeded uniform sample without replacement, kept in time order.
    Random,
}

pub fn few_shot_subsample(train: &[WindowSample], fraction: f64, policy: FewShotPolicy, seed: u64) -> Result<Vec<WindowSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} is outside (0, 1]")));
    }
    let keep = (fraction * train.len() as f64 + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::invalid(
            "fraction",
            format!("{fraction} of {} windows leaves an empty training set", train.len()),
        ));
    }
    match policy {
        FewShotPolicy::Prefix => Ok(train[..keep].to_vec()),
        FewShotPolicy::Random => {
            let mut r = rng::stream(seed, "few-shot");
            let mut idx = rand::seq::index::sample(&mut r, train.len(), keep).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| train[i].clone()).collect())
        }
    }
}

/// Parameters of the synthetic stream generator.
///
/// Node `i` reads `base + amplitude sin(2 pi t / day + phase_i) + level_i + e_i(t)`
/// where `level_i ~ N(0, offset_std^2)` and `phase_i ~ N(0, phase_std^2)` are
/// drawn once per node, and the deviation `e` diffuses over the graph:
/// `e(t) = diffusion * W e(t-1) + noise_std * xi(t)` with `W` the
/// row-normalized `A + I` of the current period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n0: usize,
    pub growth: usize,
    pub periods: usize,
    pub t_per_period: usize,
    pub seed: u64,
    pub base: f64,
    pub amplitude: f64,
    pub day: usize,
    pub offset_std: f64,
    pub phase_std: f64,
    pub noise_std: f64,
    pub diffusion: f64,
    pub threshold: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n0: 40,
            growth: 10,
            periods: 3,
            t_per_period: 2000,
            seed: 0,
            base: 20.0,
            amplitude: 5.0,
            day: 48,
            offset_std: 3.0,
            phase_std: 1.0,
            noise_std: 1.0,
            diffusion: 0.8,
            threshold: 0.5,
        }
    }
}

/// Synthetic stream plus the observation series of each period.
#[derive(Clone, Debug)]
pub struct SynthStream {
    pub graph: StreamGraph,
    pub series: Vec<ObservationSeries>,
    pub positions: Vec<(f64, f64)>,
}

pub fn synth_stream(spec: &SynthSpec) -> Result<SynthStream> {
    if spec.n0 == 0 || spec.periods == 0 || spec.t_per_period == 0 || spec.day == 0 {
        return Err(Error::invalid("synth", "n0, periods, T and day must be positive"));
    }
    let total = spec.n0 + spec.growth * (spec.periods - 1);
    let mut pos_rng = rng::stream(spec.seed, "synth/positions");
    let positions: Vec<(f64, f64)> = (0..total).map(|_| (rng::uniform(&mut pos_rng, 0.0, 1.0), rng::uniform(&mut pos_rng, 0.0, 1.0))).collect();
    let mut off_rng = rng::stream(spec.seed, "synth/offsets");
    let levels: Vec<f64> = (0..total).map(|_| spec.offset_std * rng::normal(&mut off_rng)).collect();
    let phases: Vec<f64> = (0..total).map(|_| spec.phase_std * rng::normal(&mut off_rng)).collect();
    let ids: Vec<NodeId> = (0..total).map(|i| NodeId::new(format!("n{i:04}"))).collect();

    let mut stream = StreamGraph::default();
    let mut series = Vec::with_capacity(spec.periods);
    let mut deviation: Vec<f64> = Vec::new();
    for p in 0..spec.periods {
        let n = spec.n0 + spec.growth * p;
        let mut dist = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (positions[i].0 - positions[j].0, positions[i].1 - positions[j].1);
                dist.set(i, j, (dx * dx + dy * dy).sqrt());
            }
        }
        let graph = PeriodGraph::new(p + 1, ids[..n].to_vec(), dist, spec.threshold, None)?;
        let mixing = row_normalized_with_self_loops(&graph.adjacency);
        deviation.resize(n, 0.0);
        let mut noise_rng = rng::stream(spec.seed, &format!("synth/noise/{}", p + 1));
        let mut values = Matrix::zeros(spec.t_per_period, n);
        let mut next = vec![0.0; n];
        for t in 0..spec.t_per_period {
            let global_t = (p * spec.t_per_period + t) as f64;
            for (i, out) in next.iter_mut().enumerate() {
                let spread: f64 = mixing.row(i).iter().zip(&deviation).map(|(w, e)| w * e).sum();
                *out = spec.diffusion * spread + spec.noise_std * rng::normal(&mut noise_rng);
            }
            core::mem::swap(&mut deviation, &mut next);
            let angle = 2.0 * PI * global_t / spec.day as f64;
            for i in 0..n {
                let v = spec.base + spec.amplitude * (angle + phases[i]).sin() + levels[i] + deviation[i];
                values.set(t, i, v);
            }
        }
        series.push(ObservationSeries { period_index: p + 1, node_ids: graph.nodes.clone(), values });
        stream.push(graph)?;
    }
    Ok(SynthStream { graph: stream, series, positions })
}

fn row_normalized_with_self_loops(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        m.set(i, i, m.get(i, i) + 1.0);
        let s: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}
