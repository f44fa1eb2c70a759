use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Scheme};
use super::train::{evaluate_period, train_period, Clock, HorizonMetrics, Model, TrainOutcome, TrainSettings};
use crate::analysis::{heterogeneity_d, Metrics};
use crate::backbone::{Backbone, GraphOperator};
use crate::data::{few_shot_subsample, ObservationSeries, PeriodDataset};
use crate::graph::{diff_nodes, NodeId, StreamGraph};
use crate::pool::{ParamCount, PromptPool};
use crate::rng;
use crate::{Error, Result};

/// Everything a scheme needs about one period, shared by all seeds.
#[derive(Clone, Debug)]
pub struct PeriodData {
    pub period_index: usize,
    pub dataset: PeriodDataset,
    pub op: GraphOperator,
    pub new_ids: Vec<NodeId>,
    /// Induced subgraph of the new nodes, built for `ContinualNN` only.
    pub new_subgraph: Option<(PeriodDataset, GraphOperator)>,
}

/// Windows, splits and graph operators of every period.
pub fn prepare_periods(cfg: &ExperimentConfig, stream: &StreamGraph, series: &[ObservationSeries]) -> Result<Vec<PeriodData>> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::invalid("stream", "no periods"));
    }
    if series.len() != stream.len() {
        return Err(Error::invalid("series", format!("{} series for {} periods", series.len(), stream.len())));
    }
    let mut out = Vec::with_capacity(stream.len());
    let mut prev: Option<&crate::graph::PeriodGraph> = None;
    for (graph, s) in stream.periods().iter().zip(series) {
        let dataset = PeriodDataset::build(s, graph, cfg.split_ratios(), &cfg.window)?;
        let op = GraphOperator::from_adjacency(cfg.variant, &graph.adjacency)?;
        let new_ids = match prev {
            Some(p) => diff_nodes(p, graph)?.new_ids,
            None => graph.nodes.clone(),
        };
        let new_subgraph = if cfg.scheme == Scheme::ContinualNn && prev.is_some() && !new_ids.is_empty() {
            let sub_graph = graph.induced_subgraph(&new_ids)?;
            let sub_series = s.select_nodes(&new_ids)?;
            let sub = PeriodDataset::build(&sub_series, &sub_graph, cfg.split_ratios(), &cfg.window)?;
            let sub_op = GraphOperator::from_adjacency(cfg.variant, &sub_graph.adjacency)?;
            Some((sub, sub_op))
        } else {
            None
        };
        out.push(PeriodData { period_index: graph.period_index, dataset, op, new_ids, new_subgraph });
        prev = Some(graph);
    }
    Ok(out)
}

/// Hook for saving artifacts at the end of every period.
pub trait Observer {
    fn period_end(&mut self, _seed: u64, _period_index: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPeriod {
    pub period_index: usize,
    pub num_nodes: usize,
    pub new_nodes: usize,
    pub metrics: HorizonMetrics,
    pub train: TrainOutcome,
    pub tunable_param_count: usize,
    pub pool_param_count: Option<ParamCount>,
    /// SHA-256 of the backbone checkpoint text.
    pub backbone_digest: String,
    /// Average node deviation of the fused features before and after training.
    pub heterogeneity_start: f64,
    pub heterogeneity_end: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodTiming {
    pub period_index: usize,
    pub seconds_per_epoch: f64,
    pub train_seconds_per_epoch: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub scheme: Scheme,
    pub periods: Vec<SeedPeriod>,
    /// Wall clock measurements, kept out of serialized reports.
    #[serde(skip)]
    pub timings: Vec<PeriodTiming>,
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub(super) fn fresh_model(cfg: &ExperimentConfig, data: &PeriodData, seed: u64) -> Result<Model> {
    let backbone = Backbone::build(cfg.backbone(cfg.dropout_initial), rng::sub_seed(seed, "backbone"))?;
    let pool = cfg
        .scheme
        .pool_mode()
        .map(|mode| PromptPool::init(&data.dataset.graph.nodes, cfg.d, cfg.k, mode, rng::sub_seed(seed, "pool")))
        .transpose()?;
    Ok(Model { backbone, pool })
}

/// Runs every period of one seed under the configured scheme.
///
/// Random streams depend on the seed only, never on the period, so a
/// scheme that restarts each period sees identical randomness every time.
pub fn run_seed(cfg: &ExperimentConfig, periods: &[PeriodData], seed: u64, clock: &dyn Clock, observer: &mut dyn Observer) -> Result<SeedResult> {
    cfg.validate()?;
    let initial = |seed| TrainSettings {
        lr: cfg.lr_initial,
        epochs_max: cfg.epochs_max,
        patience: cfg.patience,
        batch_size: cfg.batch_size,
        dropout: cfg.dropout_initial,
        seed,
    };
    let continual = |seed| TrainSettings { lr: cfg.lr_continual, dropout: cfg.dropout_continual, ..initial(seed) };
    let train_seed = rng::sub_seed(seed, "train");
    let few_shot_seed = rng::sub_seed(seed, "few-shot");
    let few_shot = |ds: &PeriodDataset| -> Result<Vec<crate::data::WindowSample>> {
        match cfg.few_shot_fraction {
            Some(f) => few_shot_subsample(&ds.train, f, cfg.few_shot_policy, few_shot_seed),
            None => Ok(ds.train.clone()),
        }
    };

    let mut model: Option<Model> = None;
    let mut result = SeedResult { seed, scheme: cfg.scheme, periods: Vec::new(), timings: Vec::new() };
    for (i, data) in periods.iter().enumerate() {
        let start = clock.seconds();
        let ds = &data.dataset;
        let mut warnings = Vec::new();
        let first = i == 0;
        let mut m = match (model.take(), cfg.scheme) {
            (None, _) | (Some(_), Scheme::RetrainSt) => fresh_model(cfg, data, seed)?,
            (Some(m), _) => m,
        };
        let retrain = first || cfg.scheme == Scheme::RetrainSt;
        if !first {
            if let Some(pool) = m.pool.as_mut() {
                pool.expand(data.period_index, &data.new_ids)?;
                if pool.node_ids() != ds.graph.nodes {
                    return Err(Error::Config(format!("pool rows do not follow the node order of period {}", data.period_index)));
                }
            }
        }
        if retrain {
            m.backbone.set_trainable(true);
            if let Some(pool) = m.pool.as_mut() {
                pool.set_trainable(true, true);
            }
        } else {
            match cfg.scheme {
                Scheme::Eac | Scheme::EacFull => {
                    m.backbone.set_trainable(false);
                    let pool = m.pool.as_mut().expect("EAC schemes carry a pool");
                    pool.set_trainable(!cfg.freeze_old_segments, !cfg.freeze_adjust);
                }
                Scheme::PretrainSt => m.backbone.set_trainable(false),
                _ => m.backbone.set_trainable(true),
            }
        }
        let heterogeneity_start = heterogeneity_d(&m.fused_features(&ds.test, &ds.normalizer)?);
        let tunable_param_count = if cfg.scheme == Scheme::PretrainSt && !first { 0 } else { m.trainable_count() };

        let outcome = if retrain {
            let train = few_shot(ds)?;
            train_period(&mut m, &data.op, &train, &ds.val, &ds.normalizer, &initial(train_seed), clock)?
        } else {
            match cfg.scheme {
                Scheme::PretrainSt => TrainOutcome::default(),
                Scheme::ContinualNn => match &data.new_subgraph {
                    Some((sub, sub_op)) => {
                        let train = few_shot(sub)?;
                        train_period(&mut m, sub_op, &train, &sub.val, &sub.normalizer, &continual(train_seed), clock)?
                    }
                    None => {
                        warnings.push(format!("period {} adds no nodes; ContinualNN skips training", data.period_index));
                        TrainOutcome::default()
                    }
                },
                _ => {
                    let train = few_shot(ds)?;
                    train_period(&mut m, &data.op, &train, &ds.val, &ds.normalizer, &continual(train_seed), clock)?
                }
            }
        };

        let metrics = evaluate_period(&m, &data.op, &ds.test, &ds.normalizer, cfg.horizon_mode, cfg.batch_size)?;
        for (label, mm) in &metrics {
            if !(mm.mae <= mm.rmse * (1.0 + 1e-12) + 1e-15) {
                return Err(Error::invalid("metrics", format!("MAE {} above RMSE {} at horizon {label}", mm.mae, mm.rmse)));
            }
        }
        let heterogeneity_end = heterogeneity_d(&m.fused_features(&ds.test, &ds.normalizer)?);
        observer.period_end(seed, data.period_index, &m)?;
        result.timings.push(PeriodTiming {
            period_index: data.period_index,
            seconds_per_epoch: outcome.seconds_per_epoch,
            train_seconds_per_epoch: outcome.train_seconds_per_epoch,
            total_seconds: clock.seconds() - start,
        });
        result.periods.push(SeedPeriod {
            period_index: data.period_index,
            num_nodes: ds.num_nodes(),
            new_nodes: data.new_ids.len(),
            metrics,
            train: outcome,
            tunable_param_count,
            pool_param_count: m.pool.as_ref().map(PromptPool::param_count),
            backbone_digest: sha256_hex(&m.backbone.to_checkpoint()),
            heterogeneity_start,
            heterogeneity_end,
            warnings,
        });
        model = Some(m);
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizon: String,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    /// Absent when MAPE was undefined for some seed.
    pub mape: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub period_index: usize,
    pub num_nodes: usize,
    pub new_nodes: usize,
    pub horizons: Vec<HorizonReport>,
    pub tunable_param_count: usize,
    pub pool_param_count: Option<ParamCount>,
    pub epochs_run: Vec<usize>,
    pub heterogeneity_start: MeanStd,
    pub heterogeneity_end: MeanStd,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodTimingReport {
    pub period_index: usize,
    pub wall_seconds_per_epoch: MeanStd,
    pub train_seconds_per_epoch: MeanStd,
}

/// Mean and spread over seeds, period by period.
pub fn aggregate(seeds: &[SeedResult]) -> Result<Vec<PeriodReport>> {
    let first = seeds.first().ok_or(Error::invalid("aggregate", "no seed results"))?;
    if seeds.iter().any(|s| s.periods.len() != first.periods.len()) {
        return Err(Error::invalid("aggregate", "seed results cover different periods"));
    }
    let mut out = Vec::new();
    for (p, head) in first.periods.iter().enumerate() {
        let rows: Vec<&SeedPeriod> = seeds.iter().map(|s| &s.periods[p]).collect();
        let horizons = head
            .metrics
            .iter()
            .enumerate()
            .map(|(h, (label, _))| {
                let col = |f: &dyn Fn(&Metrics) -> f64| MeanStd::of(&rows.iter().map(|r| f(&r.metrics[h].1)).collect::<Vec<_>>());
                let mapes: Option<Vec<f64>> = rows.iter().map(|r| r.metrics[h].1.mape).collect();
                HorizonReport {
                    horizon: label.clone(),
                    mae: col(&|m| m.mae),
                    rmse: col(&|m| m.rmse),
                    mape: mapes.map(|v| MeanStd::of(&v)),
                }
            })
            .collect();
        let mut warnings: Vec<String> = rows.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
        warnings.sort();
        warnings.dedup();
        out.push(PeriodReport {
            period_index: head.period_index,
            num_nodes: head.num_nodes,
            new_nodes: head.new_nodes,
            horizons,
            tunable_param_count: head.tunable_param_count,
            pool_param_count: head.pool_param_count,
            epochs_run: rows.iter().map(|r| r.train.epochs_run).collect(),
            heterogeneity_start: MeanStd::of(&rows.iter().map(|r| r.heterogeneity_start).collect::<Vec<_>>()),
            heterogeneity_end: MeanStd::of(&rows.iter().map(|r| r.heterogeneity_end).collect::<Vec<_>>()),
            warnings,
        });
    }
    Ok(out)
}

pub fn aggregate_timings(seeds: &[SeedResult]) -> Vec<PeriodTimingReport> {
    let Some(first) = seeds.first() else { return Vec::new() };
    (0..first.timings.len())
        .map(|p| {
            let col = |f: fn(&PeriodTiming) -> f64| {
                MeanStd::of(&seeds.iter().filter_map(|s| s.timings.get(p)).map(f).collect::<Vec<_>>())
            };
            PeriodTimingReport {
                period_index: first.timings[p].period_index,
                wall_seconds_per_epoch: col(|t| t.seconds_per_epoch),
                train_seconds_per_epoch: col(|t| t.train_seconds_per_epoch),
            }
        })
        .collect()
}

/// Prepares the periods, runs every configured seed in order and aggregates.
pub fn run_stream(cfg: &ExperimentConfig, stream: &StreamGraph, series: &[ObservationSeries], clock: &dyn Clock) -> Result<(Vec<PeriodReport>, Vec<SeedResult>)> {
    let periods = prepare_periods(cfg, stream, series)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, &periods, s, clock, &mut NoObserver))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&seeds)?, seeds))
}

/// `avg` MAE of the final period.
pub fn final_avg_mae(report: &[PeriodReport]) -> Option<f64> {
    report.last()?.horizons.iter().find(|h| h.horizon == "avg").map(|h| h.mae.mean)
}

/// `avg` MAE averaged over all periods.
pub fn stream_avg_mae(report: &[PeriodReport]) -> Option<f64> {
    let vals: Vec<f64> = report
        .iter()
        .filter_map(|p| p.horizons.iter().find(|h| h.horizon == "avg").map(|h| h.mae.mean))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl SeedResult {
    pub fn label(&self) -> String {
        format!("{}-seed{}", self.scheme, self.seed)
    }
}
