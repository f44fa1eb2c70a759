use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scheme};
use super::run::{fresh_model, PeriodData};
use super::train::{train_period, Clock, Model, TrainSettings};
use crate::rng;
use crate::{Error, Result};

/// Per-epoch wall time of EAC against whole-model fine-tuning on one period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCost {
    pub period_index: usize,
    pub eac_seconds: Vec<f64>,
    pub full_seconds: Vec<f64>,
    pub eac_median: f64,
    pub full_median: f64,
    /// `full_median / eac_median`.
    pub speedup: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Trains period `0`, then times `rounds` single epochs on period `target`
/// for a frozen-backbone EAC model and a fully trainable copy of the same
/// backbone, alternating which one runs first so machine drift hits both.
pub fn compare_epoch_cost(cfg: &ExperimentConfig, periods: &[PeriodData], target: usize, seed: u64, rounds: usize, clock: &dyn Clock) -> Result<EpochCost> {
    if target == 0 || target >= periods.len() {
        return Err(Error::invalid("target", "must name a period after the first"));
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds", "must be at least 1"));
    }
    let cfg = ExperimentConfig { scheme: Scheme::Eac, ..cfg.clone() };
    cfg.validate()?;
    let settings = |lr, dropout, epochs_max| TrainSettings {
        lr,
        epochs_max,
        patience: cfg.patience.min(epochs_max.saturating_sub(1)).max(1),
        batch_size: cfg.batch_size,
        dropout,
        seed: rng::sub_seed(seed, "train"),
    };

    let first = &periods[0];
    let mut eac = fresh_model(&cfg, first, seed)?;
    let ds = &first.dataset;
    train_period(&mut eac, &first.op, &ds.train, &ds.val, &ds.normalizer, &settings(cfg.lr_initial, cfg.dropout_initial, cfg.epochs_max), clock)?;
    let mut full = Model { backbone: eac.backbone.clone(), pool: None };
    full.backbone.set_trainable(true);

    let pool = eac.pool.as_mut().expect("EAC carries a pool");
    for data in &periods[1..=target] {
        pool.expand(data.period_index, &data.new_ids)?;
    }
    pool.set_trainable(true, true);
    eac.backbone.set_trainable(false);

    let data = &periods[target];
    let ds = &data.dataset;
    let one = settings(cfg.lr_continual, cfg.dropout_continual, 1);
    let (mut eac_seconds, mut full_seconds) = (Vec::with_capacity(rounds), Vec::with_capacity(rounds));
    for round in 0..rounds {
        for which in [round % 2, 1 - round % 2] {
            let (model, out) = if which == 0 { (&mut eac, &mut eac_seconds) } else { (&mut full, &mut full_seconds) };
            let outcome = train_period(model, &data.op, &ds.train, &ds.val, &ds.normalizer, &one, clock)?;
            out.push(outcome.seconds_per_epoch);
        }
    }
    let (eac_median, full_median) = (median(&eac_seconds), median(&full_seconds));
    Ok(EpochCost { period_index: data.period_index, speedup: full_median / eac_median, eac_seconds, full_seconds, eac_median, full_median })
}
