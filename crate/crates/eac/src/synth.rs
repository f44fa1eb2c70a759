//! Inline synthetic stream specs such as `n0=40,growth=10,periods=3,T=2000`.

use eac_core::data::SynthSpec;

use crate::error::{CliError, Result};

/// Parses `key=value` pairs over the generator defaults. `T` is accepted
/// for `t_per_period`.
pub fn parse_synth(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("synth: `{item}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| CliError::Config(format!("synth: `{key}` expects {what}, got `{value}`"));
        let count = || value.parse::<usize>().map_err(|_| bad("a nonnegative integer"));
        let real = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("a number"));
        match key {
            "n0" => spec.n0 = count()?,
            "growth" => spec.growth = count()?,
            "periods" => spec.periods = count()?,
            "T" | "t_per_period" => spec.t_per_period = count()?,
            "day" => spec.day = count()?,
            "seed" => spec.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "base" => spec.base = real()?,
            "amplitude" => spec.amplitude = real()?,
            "offset_std" => spec.offset_std = real()?,
            "phase_std" => spec.phase_std = real()?,
            "noise_std" => spec.noise_std = real()?,
            "diffusion" => spec.diffusion = real()?,
            "threshold" => spec.threshold = real()?,
            other => return Err(CliError::Config(format!("synth: unknown key `{other}`"))),
        }
    }
    if spec.n0 == 0 || spec.periods == 0 || spec.t_per_period == 0 || spec.day == 0 {
        return Err(CliError::Config("synth: n0, periods, T and day must be positive".into()));
    }
    Ok(spec)
}
