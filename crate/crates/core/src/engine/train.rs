use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::HorizonMode;
use crate::analysis::{MetricAccumulator, Metrics};
use crate::backbone::{Backbone, Dropout, GraphOperator};
use crate::data::{Normalizer, WindowSample};
use crate::linalg::Matrix;
use crate::nn::{Adam, AdamConfig, Parameter, Tape, Tensor, Var};
use crate::pool::PromptPool;
use crate::rng;
use crate::{Error, Result};

/// Improvements smaller than this do not reset the patience counter.
pub const MIN_DELTA: f64 = 1e-6;

/// Wall clock seconds. The core has no clock of its own.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances.
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Backbone plus optional prompt pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub pool: Option<PromptPool>,
}

impl Model {
    pub fn forward(&self, tape: &mut Tape, op: &GraphOperator, input: Tensor, dropout: Option<Dropout<'_>>) -> Result<Var> {
        let vars = self.backbone.register(tape);
        let prompt = self.pool.as_ref().map(|p| p.register(tape)).transpose()?;
        let x = tape.constant(input);
        self.backbone.forward(tape, &vars, op, x, prompt, dropout)
    }

    pub fn predict(&self, op: &GraphOperator, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.backbone.parameters().iter().map(|p| tape.constant(p.value.clone())).collect();
        let prompt = self.pool.as_ref().map(|p| {
            let m = p.materialize();
            tape.constant(Tensor::new(alloc::vec![m.rows(), m.cols()], m.into_vec()).expect("prompt shape"))
        });
        let x = tape.constant(input);
        let y = self.backbone.forward(&mut tape, &vars, op, x, prompt, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.backbone.parameters_mut().iter_mut().chain(self.pool.iter_mut().flat_map(PromptPool::parameters_mut))
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.backbone.parameters().iter().chain(self.pool.iter().flat_map(PromptPool::parameters))
    }

    /// Scalars that receive updates.
    pub fn trainable_count(&self) -> usize {
        self.parameters().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    /// Per-node fused features `x W + b + p`, averaged over samples and time.
    pub fn fused_features(&self, samples: &[WindowSample], norm: &Normalizer) -> Result<Matrix> {
        let n = samples.first().map(|s| s.input.cols()).ok_or(Error::invalid("samples", "no windows"))?;
        let mut mean = alloc::vec![0.0; n];
        let mut count = 0usize;
        for s in samples {
            for t in 0..s.input.rows() {
                for (m, v) in mean.iter_mut().zip(s.input.row(t)) {
                    *m += norm.apply(*v);
                }
            }
            count += s.input.rows();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let params = self.backbone.parameters();
        let (w, b) = (params[0].value.data(), params[1].value.data());
        let d = b.len();
        let prompt = self.pool.as_ref().map(PromptPool::materialize);
        let mut out = Matrix::zeros(n, d);
        for (i, m) in mean.iter().enumerate() {
            for j in 0..d {
                let p = prompt.as_ref().map_or(0.0, |p| p.get(i, j));
                out.set(i, j, m * w[j] + b[j] + p);
            }
        }
        Ok(out)
    }
}

/// Stacks windows into normalized `[B, t_in, n, 1]` inputs and `[B, t_out, n]` targets.
pub fn batch_tensors<'a>(samples: impl IntoIterator<Item = &'a WindowSample>, norm: &Normalizer) -> Result<(Tensor, Tensor)> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut batch = 0;
    for s in samples {
        let here = (s.input.rows(), s.target.rows(), s.input.cols());
        if *dims.get_or_insert(here) != here || s.target.cols() != here.2 {
            return Err(Error::shape("batch", "windows differ in shape"));
        }
        x.extend(s.input.as_slice().iter().map(|v| norm.apply(*v)));
        y.extend(s.target.as_slice().iter().map(|v| norm.apply(*v)));
        batch += 1;
    }
    let (t_in, t_out, n) = dims.ok_or(Error::invalid("batch", "no windows"))?;
    Ok((Tensor::new(alloc::vec![batch, t_in, n, 1], x)?, Tensor::new(alloc::vec![batch, t_out, n], y)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation MAE before the first update.
    pub initial_val_mae: f64,
    pub best_val_mae: f64,
    pub val_history: Vec<f64>,
    /// Mean wall time of the update pass alone.
    #[serde(skip)]
    pub train_seconds_per_epoch: f64,
    /// Mean wall time of update plus validation.
    #[serde(skip)]
    pub seconds_per_epoch: f64,
}

/// Per-step accumulators over a sample set, in original units.
pub fn step_accumulators(model: &Model, op: &GraphOperator, samples: &[WindowSample], norm: &Normalizer, batch_size: usize) -> Result<Vec<MetricAccumulator>> {
    let mut acc: Vec<MetricAccumulator> = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors(chunk, norm)?;
        let pred = model.predict(op, x)?;
        let (t_out, n) = (pred.shape()[1], pred.shape()[2]);
        acc.resize(t_out, MetricAccumulator::default());
        for (b, s) in chunk.iter().enumerate() {
            for (t, a) in acc.iter_mut().enumerate() {
                for i in 0..n {
                    let p = norm.invert(pred.data()[(b * t_out + t) * n + i]);
                    a.push(p, s.target.get(t, i));
                }
            }
        }
    }
    Ok(acc)
}

fn pooled(acc: &[MetricAccumulator]) -> MetricAccumulator {
    let mut all = MetricAccumulator::default();
    acc.iter().for_each(|a| all.merge(a));
    all
}

pub fn validation_mae(model: &Model, op: &GraphOperator, val: &[WindowSample], norm: &Normalizer, batch_size: usize) -> Result<f64> {
    Ok(pooled(&step_accumulators(model, op, val, norm, batch_size)?).finish()?.mae)
}

/// Mini-batch Adam on normalized MSE with early stopping on validation MAE.
/// The best-validation parameters are restored before returning.
pub fn train_period(
    model: &mut Model,
    op: &GraphOperator,
    train: &[WindowSample],
    val: &[WindowSample],
    norm: &Normalizer,
    settings: &TrainSettings,
    clock: &dyn Clock,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train_period", "training and validation windows must be nonempty"));
    }
    let lr = settings.lr;
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(settings.seed, "train/shuffle");
    let mut drop_rng = rng::stream(settings.seed, "train/dropout");
    let initial_val_mae = validation_mae(model, op, val, norm, settings.batch_size)?;

    let mut outcome = TrainOutcome { initial_val_mae, best_val_mae: f64::INFINITY, ..TrainOutcome::default() };
    let mut best = model.clone();
    let mut wait = 0;
    let (mut train_time, mut total_time) = (0.0, 0.0);
    for epoch in 1..=settings.epochs_max {
        let start = clock.seconds();
        order.shuffle(&mut shuffle);
        for (batch, chunk) in order.chunks(settings.batch_size.max(1)).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch, lr },
                other => other,
            };
            let (x, y) = batch_tensors(chunk.iter().map(|&i| &train[i]), norm)?;
            let mut tape = Tape::new();
            let dropout = (settings.dropout > 0.0).then(|| Dropout { p: settings.dropout, rng: &mut drop_rng });
            let pred = model.forward(&mut tape, op, x, dropout).map_err(diverged)?;
            let loss = tape.mse_loss(pred, &y).map_err(diverged)?;
            let grads = tape.backward(loss)?;
            adam.step(model.parameters_mut(), &grads)?;
        }
        let trained = clock.seconds();
        let val_mae = validation_mae(model, op, val, norm, settings.batch_size).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, batch: 0, lr },
            other => other,
        })?;
        let done = clock.seconds();
        train_time += trained - start;
        total_time += done - start;
        outcome.epochs_run = epoch;
        outcome.val_history.push(val_mae);
        if val_mae < outcome.best_val_mae - MIN_DELTA {
            outcome.best_val_mae = val_mae;
            outcome.best_epoch = epoch;
            best = model.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= settings.patience {
                break;
            }
        }
    }
    if outcome.epochs_run > 0 {
        outcome.train_seconds_per_epoch = train_time / outcome.epochs_run as f64;
        outcome.seconds_per_epoch = total_time / outcome.epochs_run as f64;
    } else {
        outcome.best_val_mae = initial_val_mae;
    }
    *model = best;
    Ok(outcome)
}

/// Horizon label and its metrics, ending with the pooled `avg` entry.
pub type HorizonMetrics = Vec<(String, Metrics)>;

pub const HORIZONS: [usize; 3] = [3, 6, 12];

/// Test metrics in original units at horizons 3, 6, 12 (those within the
/// forecast length) and pooled over all steps.
pub fn evaluate_period(
    model: &Model,
    op: &GraphOperator,
    test: &[WindowSample],
    norm: &Normalizer,
    mode: HorizonMode,
    batch_size: usize,
) -> Result<HorizonMetrics> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate_period", "no test windows"));
    }
    let acc = step_accumulators(model, op, test, norm, batch_size)?;
    let mut out = Vec::new();
    for h in HORIZONS.into_iter().filter(|h| *h <= acc.len()) {
        let m = match mode {
            HorizonMode::AtStep => acc[h - 1].finish()?,
            HorizonMode::Prefix => pooled(&acc[..h]).finish()?,
        };
        out.push((format!("{h}"), m));
    }
    out.push(("avg".into(), pooled(&acc).finish()?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Variant};
    use crate::data::{make_windows, WindowSpec};

    fn tiny_model(seed: u64) -> Model {
        let cfg = BackboneConfig { hidden: 4, t_out: 4, ..BackboneConfig::default() };
        Model { backbone: Backbone::build(cfg, seed).unwrap(), pool: None }
    }

    fn op(n: usize) -> GraphOperator {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n - 1 {
            a.set(i, i + 1, 1.0);
            a.set(i + 1, i, 1.0);
        }
        GraphOperator::from_adjacency(Variant::Spatial, &a).unwrap()
    }

    fn windows(len: usize, n: usize) -> Vec<WindowSample> {
        let series = Matrix::from_vec(len, n, (0..len * n).map(|v| ((v as f64) * 0.37).sin() * 3.0 + 10.0).collect()).unwrap();
        make_windows(&series, 0, &WindowSpec { t_in: 6, t_out: 4, stride: 1 }).unwrap()
    }

    fn settings(lr: f64, epochs: usize, patience: usize) -> TrainSettings {
        TrainSettings { lr, epochs_max: epochs, patience, batch_size: 8, dropout: 0.0, seed: 3 }
    }

    #[test]
    fn zero_lr_keeps_parameters_and_hits_patience() {
        let mut m = tiny_model(1);
        let before = m.clone();
        let w = windows(40, 3);
        let norm = Normalizer { mean: 10.0, std: 3.0 };
        let out = train_period(&mut m, &op(3), &w, &w, &norm, &settings(0.0, 20, 3), &NoClock).unwrap();
        assert_eq!(m, before);
        assert_eq!(out.epochs_run, 4);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn training_reduces_validation_error() {
        let mut m = tiny_model(2);
        let w = windows(80, 3);
        let norm = Normalizer { mean: 10.0, std: 3.0 };
        let out = train_period(&mut m, &op(3), &w, &w, &norm, &settings(0.01, 30, 5), &NoClock).unwrap();
        assert!(out.best_val_mae < 0.8 * out.initial_val_mae, "{out:?}");
        let restored = validation_mae(&m, &op(3), &w, &norm, 8).unwrap();
        assert_eq!(restored, out.best_val_mae);
    }

    #[test]
    fn frozen_model_is_untouched() {
        let mut m = tiny_model(4);
        m.backbone.set_trainable(false);
        let before = m.clone();
        let w = windows(30, 3);
        let norm = Normalizer { mean: 10.0, std: 3.0 };
        train_period(&mut m, &op(3), &w, &w, &norm, &settings(0.1, 3, 2), &NoClock).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny_model(5);
        let w = windows(30, 3);
        let norm = Normalizer { mean: 10.0, std: 1e-300 };
        let err = train_period(&mut m, &op(3), &w, &w, &norm, &settings(0.1, 3, 2), &NoClock).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn horizon_counts_and_bias() {
        let mut m = tiny_model(6);
        // zero head weight, bias one: every normalized prediction is 1
        for p in m.backbone.parameters_mut() {
            if p.name == "head.weight" {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if p.name == "head.bias" {
                p.value.data_mut().iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let n = 3;
        let mut w = windows(30, n);
        for s in &mut w {
            s.target.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let norm = Normalizer { mean: 0.0, std: 1.0 };
        let r = evaluate_period(&m, &op(n), &w, &norm, HorizonMode::AtStep, 8).unwrap();
        let labels: Vec<&str> = r.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["3", "avg"]);
        for (_, metrics) in &r {
            assert!((metrics.mae - 1.0).abs() < 1e-12);
        }
        assert_eq!(r[0].1.count, w.len() * n);
        assert_eq!(r[1].1.count, w.len() * n * 4);
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        let m = tiny_model(7);
        let n = 3;
        let w = windows(20, n);
        let norm = Normalizer { mean: 0.0, std: 1.0 };
        let preds = step_accumulators(&m, &op(n), &w, &norm, 8).unwrap();
        assert_eq!(preds.len(), 4);
        let mut exact = w.clone();
        let (x, _) = batch_tensors(&exact, &norm).unwrap();
        let p = m.predict(&op(n), x).unwrap();
        for (b, s) in exact.iter_mut().enumerate() {
            for t in 0..4 {
                for i in 0..n {
                    s.target.set(t, i, p.data()[(b * 4 + t) * n + i]);
                }
            }
        }
        let r = evaluate_period(&m, &op(n), &exact, &norm, HorizonMode::Prefix, 64).unwrap();
        assert!(r.iter().all(|(_, m)| m.mae == 0.0 && m.rmse == 0.0));
    }
}
