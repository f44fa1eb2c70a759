use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Variant};
use crate::data::{FewShotPolicy, WindowSpec};
use crate::pool::{PoolMode, DEFAULT_RANK};
use crate::{Error, Result};

/// Continual learning scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// Frozen backbone with an expanding low-rank prompt pool.
    #[serde(rename = "EAC")]
    Eac,
    /// Frozen backbone with full-width per-node prompts.
    #[serde(rename = "EAC_full")]
    EacFull,
    /// Train on the first period, evaluate only afterwards.
    #[serde(rename = "PretrainST")]
    PretrainSt,
    /// Fresh backbone trained on every period.
    #[serde(rename = "RetrainST")]
    RetrainSt,
    /// Fine-tune the whole model on every period.
    #[serde(rename = "ContinualAN")]
    ContinualAn,
    /// Fine-tune on the subgraph of newly added nodes.
    #[serde(rename = "ContinualNN")]
    ContinualNn,
}

impl Scheme {
    pub const ALL: [Scheme; 6] =
        [Scheme::Eac, Scheme::EacFull, Scheme::PretrainSt, Scheme::RetrainSt, Scheme::ContinualAn, Scheme::ContinualNn];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Eac => "EAC",
            Scheme::EacFull => "EAC_full",
            Scheme::PretrainSt => "PretrainST",
            Scheme::RetrainSt => "RetrainST",
            Scheme::ContinualAn => "ContinualAN",
            Scheme::ContinualNn => "ContinualNN",
        }
    }

    pub fn pool_mode(self) -> Option<PoolMode> {
        match self {
            Scheme::Eac => Some(PoolMode::LowRank),
            Scheme::EacFull => Some(PoolMode::Full),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// How the 3/6/12 horizon columns are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// Error of prediction step `h` alone.
    #[default]
    AtStep,
    /// Error pooled over steps `1..=h`.
    Prefix,
}

fn default_seeds() -> Vec<u64> {
    alloc::vec![1, 2, 3, 4, 5]
}

/// One experiment. Every field except `scheme` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    #[serde(default = "ExperimentConfig::default_k")]
    pub k: usize,
    #[serde(default = "ExperimentConfig::default_d")]
    pub d: usize,
    #[serde(default = "ExperimentConfig::default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "ExperimentConfig::default_lr_continual")]
    pub lr_continual: f64,
    #[serde(default = "ExperimentConfig::default_epochs_max")]
    pub epochs_max: usize,
    #[serde(default = "ExperimentConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "ExperimentConfig::default_patience")]
    pub patience: usize,
    #[serde(default = "ExperimentConfig::default_dropout_initial")]
    pub dropout_initial: f64,
    #[serde(default)]
    pub dropout_continual: f64,
    #[serde(default)]
    pub few_shot_fraction: Option<f64>,
    #[serde(default = "ExperimentConfig::default_few_shot_policy")]
    pub few_shot_policy: FewShotPolicy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "ExperimentConfig::default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub freeze_old_segments: bool,
    /// Keep the shared adjustment matrix fixed after the first period.
    #[serde(default)]
    pub freeze_adjust: bool,
    #[serde(default = "ExperimentConfig::default_kernel")]
    pub kernel: usize,
    #[serde(default = "ExperimentConfig::default_cheb_order")]
    pub cheb_order: usize,
    #[serde(default)]
    pub horizon_mode: HorizonMode,
    #[serde(default = "ExperimentConfig::default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub window: WindowSpec,
}

impl ExperimentConfig {
    fn default_k() -> usize {
        DEFAULT_RANK
    }
    fn default_d() -> usize {
        64
    }
    fn default_lr_initial() -> f64 {
        0.03
    }
    fn default_lr_continual() -> f64 {
        0.01
    }
    fn default_epochs_max() -> usize {
        100
    }
    fn default_batch_size() -> usize {
        128
    }
    fn default_patience() -> usize {
        10
    }
    fn default_dropout_initial() -> f64 {
        0.1
    }
    fn default_few_shot_policy() -> FewShotPolicy {
        FewShotPolicy::Prefix
    }
    fn default_variant() -> Variant {
        Variant::Spatial
    }
    fn default_kernel() -> usize {
        3
    }
    fn default_cheb_order() -> usize {
        2
    }
    fn default_split() -> [f64; 3] {
        [0.6, 0.2, 0.2]
    }

    /// Defaults for `scheme`.
    pub fn new(scheme: Scheme) -> Self {
        ExperimentConfig {
            scheme,
            k: Self::default_k(),
            d: Self::default_d(),
            lr_initial: Self::default_lr_initial(),
            lr_continual: Self::default_lr_continual(),
            epochs_max: Self::default_epochs_max(),
            batch_size: Self::default_batch_size(),
            patience: Self::default_patience(),
            dropout_initial: Self::default_dropout_initial(),
            dropout_continual: 0.0,
            few_shot_fraction: None,
            few_shot_policy: Self::default_few_shot_policy(),
            seeds: default_seeds(),
            variant: Self::default_variant(),
            freeze_old_segments: false,
            freeze_adjust: false,
            kernel: Self::default_kernel(),
            cheb_order: Self::default_cheb_order(),
            horizon_mode: HorizonMode::AtStep,
            split: Self::default_split(),
            window: WindowSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("`{field}`: {why}")));
        for (field, lr) in [("lr_initial", self.lr_initial), ("lr_continual", self.lr_continual)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(field, format!("learning rate {lr} must be positive"));
            }
        }
        for (field, p) in [("dropout_initial", self.dropout_initial), ("dropout_continual", self.dropout_continual)] {
            if !(0.0..1.0).contains(&p) {
                return fail(field, format!("{p} outside [0, 1)"));
            }
        }
        if self.patience >= self.epochs_max {
            return fail("patience", format!("{} must be below epochs_max {}", self.patience, self.epochs_max));
        }
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.d == 0 {
            return fail("d", "must be positive".into());
        }
        if self.scheme == Scheme::Eac && (self.k == 0 || self.k > self.d) {
            return fail("k", format!("rank {} must be in [1, d={}]", self.k, self.d));
        }
        if let Some(f) = self.few_shot_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return fail("few_shot_fraction", format!("{f} outside (0, 1]"));
            }
        }
        if self.scheme.pool_mode().is_none() && (self.freeze_old_segments || self.freeze_adjust) {
            return fail("scheme", format!("{} has no prompt pool; pool freezing flags do not apply", self.scheme));
        }
        if self.scheme == Scheme::EacFull && self.freeze_adjust {
            return fail("freeze_adjust", "EAC_full has no adjustment matrix".into());
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| !(*r > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return fail("split", format!("{:?} must be positive and sum to 1", self.split));
        }
        if self.window.t_in == 0 || self.window.t_out == 0 || self.window.stride == 0 {
            return fail("window", "t_in, t_out and stride must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail("kernel", format!("{} must be odd", self.kernel));
        }
        Ok(())
    }

    pub fn backbone(&self, dropout: f64) -> BackboneConfig {
        BackboneConfig {
            variant: self.variant,
            channels: 1,
            hidden: self.d,
            kernel: self.kernel,
            cheb_order: self.cheb_order,
            t_out: self.window.t_out,
            dropout,
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::new(Scheme::Eac);
        assert_eq!((c.k, c.d, c.epochs_max, c.batch_size, c.patience), (6, 64, 100, 128, 10));
        assert_eq!((c.lr_initial, c.lr_continual, c.dropout_initial, c.dropout_continual), (0.03, 0.01, 0.1, 0.0));
        assert_eq!(c.seeds.len(), 5);
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::new(Scheme::PretrainSt);
        c.freeze_old_segments = true;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("scheme")));
        let mut c = ExperimentConfig::new(Scheme::Eac);
        c.patience = 100;
        assert!(c.validate().is_err());
        c.patience = 5;
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(Scheme::Eac);
        c.lr_continual = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("EACX".parse::<Scheme>().is_err());
    }
}
