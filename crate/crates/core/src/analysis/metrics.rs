#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Truth values with smaller magnitude are left out of MAPE.
pub const MAPE_MIN_TRUTH: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent. `None` when every truth value was masked.
    pub mape: Option<f64>,
    pub count: usize,
    pub mape_masked: usize,
}

/// Running sums for metrics over many batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if truth.abs() >= MAPE_MIN_TRUTH {
            self.ape += (e / truth).abs();
            self.ape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.ape += other.ape;
        self.count += other.count;
        self.ape_count += other.ape_count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::invalid("metrics", "no samples"));
        }
        let n = self.count as f64;
        let mape = (self.ape_count > 0).then(|| 100.0 * self.ape / self.ape_count as f64);
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape,
            count: self.count,
            mape_masked: self.count - self.ape_count,
        })
    }
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("metrics", alloc::format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "metrics" });
    }
    let mut acc = MetricAccumulator::default();
    for (p, t) in pred.iter().zip(truth) {
        acc.push(*p, *t);
    }
    acc.finish()
}
