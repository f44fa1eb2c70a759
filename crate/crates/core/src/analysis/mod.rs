//! Forecast metrics and the measurement oracles: node heterogeneity, the
//! dispersion decomposition, singular value spectra and the random
//! projection probe.

mod dispersion;
mod metrics;
mod spectral;

pub use dispersion::{dispersion_decomposition, heterogeneity_d, heterogeneity_d_pairwise, neutralize_cross_term, DispersionReport};
pub use metrics::{metrics, MetricAccumulator, Metrics, MAPE_MIN_TRUTH};
pub use spectral::{random_projection_probe, svd_cumulative, ProbeConfig, ProbeReport, SpectralReport};
