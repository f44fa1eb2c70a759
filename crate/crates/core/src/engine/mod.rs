//! Continual training across periods: the EAC workflow and its baselines.

mod config;
mod run;
mod timing;
mod train;

pub use config::{ExperimentConfig, HorizonMode, Scheme};
pub use run::{
    aggregate, aggregate_timings, final_avg_mae, prepare_periods, run_seed, run_stream, sha256_hex, stream_avg_mae, HorizonReport,
    MeanStd, NoObserver, Observer, PeriodData, PeriodReport, PeriodTiming, PeriodTimingReport, SeedPeriod, SeedResult,
};
pub use timing::{compare_epoch_cost, EpochCost};
pub use train::{
    batch_tensors, evaluate_period, step_accumulators, train_period, validation_mae, Clock, HorizonMetrics, Model, NoClock,
    TrainOutcome, TrainSettings, HORIZONS, MIN_DELTA,
};
