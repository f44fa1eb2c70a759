use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::{svd, Matrix};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub singular_values: Vec<f64>,
    /// `None` for the zero matrix.
    pub cumulative_ratio: Option<Vec<f64>>,
    pub k: usize,
    /// `|P - P_k|_F` measured on the reconstruction.
    pub rank_k_error: f64,
    /// `sqrt(sum_{i>k} s_i^2)`.
    pub tail_energy: f64,
}

pub fn svd_cumulative(p: &Matrix, k: usize) -> SpectralReport {
    let s = svd(p);
    let total: f64 = s.singular_values.iter().sum();
    let cumulative_ratio = (total > 0.0).then(|| {
        let mut acc = 0.0;
        let mut out: Vec<f64> = s
            .singular_values
            .iter()
            .map(|v| {
                acc += v;
                acc / total
            })
            .collect();
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    });
    let rank_k_error = p.sub(&s.truncate(k)).map(|d| d.frobenius_norm()).unwrap_or(f64::NAN);
    let tail_energy = s.singular_values.iter().skip(k).map(|v| v * v).sum::<f64>().sqrt();
    SpectralReport { singular_values: s.singular_values, cumulative_ratio, k, rank_k_error, tail_energy }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub k: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    /// Use the truncated SVD factors instead of random projections.
    pub oracle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub empirical_success_rate: f64,
    /// Minimum, quartiles and maximum of the relative errors.
    pub error_quantiles: [f64; 5],
    pub mean_error: f64,
    /// Best achievable relative error of any rank-`k` factorization.
    pub svd_floor: f64,
    /// Smallest `|I - Phi^T Phi|_2` seen across trials.
    pub min_projection_gap: Option<f64>,
    pub note: Option<String>,
    pub errors: Vec<f64>,
}

/// Largest eigenvalue magnitude of `I - Phi^T Phi` via power iteration on its square.
fn projection_gap(phi: &[f64], k: usize, n: usize) -> f64 {
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut t = alloc::vec![0.0; k];
        for (r, tr) in t.iter_mut().enumerate() {
            *tr = phi[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
        }
        let mut out = v.to_vec();
        for (r, tr) in t.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&phi[r * n..(r + 1) * n]) {
                *o -= a * tr;
            }
        }
        out
    };
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618).sin()).collect();
    let mut lambda = 0.0;
    for _ in 0..300 {
        let w = apply(&apply(&v));
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>();
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vn;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Measures how well `A = Phi^T`, `B = Phi P` with Gaussian `Phi` (`k x n`,
/// variance `1/k`) reconstructs `P`.
pub fn random_projection_probe(p: &Matrix, cfg: ProbeConfig) -> Result<ProbeReport> {
    if cfg.k == 0 || cfg.trials == 0 {
        return Err(Error::invalid("probe", "k and trials must be at least 1"));
    }
    let n = p.rows();
    let norm = p.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::invalid("P", "relative error is undefined for the zero matrix"));
    }
    let spectrum = svd_cumulative(p, cfg.k);
    let svd_floor = spectrum.tail_energy / norm;
    let mut errors = Vec::with_capacity(cfg.trials);
    let mut min_gap = f64::INFINITY;
    for trial in 0..cfg.trials {
        if cfg.oracle {
            errors.push(spectrum.rank_k_error / norm);
            continue;
        }
        let mut r = rng::stream(cfg.seed, &format!("probe/{trial}"));
        let scale = 1.0 / (cfg.k as f64).sqrt();
        let phi: Vec<f64> = (0..cfg.k * n).map(|_| scale * rng::normal(&mut r)).collect();
        let phi_m = Matrix::from_vec(cfg.k, n, phi.clone())?;
        let b = phi_m.matmul(p)?;
        let approx = phi_m.transpose().matmul(&b)?;
        errors.push(p.sub(&approx)?.frobenius_norm() / norm);
        min_gap = min_gap.min(projection_gap(&phi, cfg.k, n));
    }
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let successes = errors.iter().filter(|e| **e <= cfg.epsilon).count();
    let note = (!cfg.oracle && cfg.k < n).then(|| {
        format!(
            "Phi^T Phi has rank {} < n = {n}, so |I - Phi^T Phi|_2 >= 1 (smallest observed {min_gap:.6}); \
             the spectral-norm bound cannot certify epsilon < 1",
            cfg.k
        )
    });
    Ok(ProbeReport {
        config: cfg,
        empirical_success_rate: successes as f64 / cfg.trials as f64,
        error_quantiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&sorted, q)),
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        svd_floor,
        min_projection_gap: (!cfg.oracle).then_some(min_gap),
        note,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, "gaussian");
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn diagonal_example() {
        let r = svd_cumulative(&Matrix::diag(&[3.0, 1.0]), 1);
        assert_eq!(r.singular_values, vec![3.0, 1.0]);
        assert_eq!(r.cumulative_ratio, Some(vec![0.75, 1.0]));
        assert!((r.rank_k_error - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_and_zero() {
        let u = Matrix::from_vec(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let v = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = svd_cumulative(&u.matmul(&v).unwrap(), 1);
        assert!(r.rank_k_error < 1e-12);
        let z = svd_cumulative(&Matrix::zeros(3, 2), 1);
        assert_eq!(z.cumulative_ratio, None);
        assert!(z.singular_values.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn oracle_mode_is_exact_for_rank_k() {
        let p = gaussian(8, 2, 1).matmul(&gaussian(2, 5, 2)).unwrap();
        let cfg = ProbeConfig { k: 2, epsilon: 1e-6, trials: 3, seed: 0, oracle: true };
        let r = random_projection_probe(&p, cfg).unwrap();
        assert!(r.error_quantiles[4] < 1e-10);
        assert_eq!(r.empirical_success_rate, 1.0);
    }

    #[test]
    fn rank_deficient_projection_gap() {
        let p = gaussian(20, 6, 3);
        let cfg = ProbeConfig { k: 6, epsilon: 0.9, trials: 10, seed: 4, oracle: false };
        let r = random_projection_probe(&p, cfg).unwrap();
        let gap = r.min_projection_gap.unwrap();
        assert!(gap >= 1.0 - 1e-9, "{gap}");
        assert!(r.note.is_some());
        assert!(r.error_quantiles.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.svd_floor <= r.error_quantiles[0] + 1e-12);
    }

    #[test]
    fn full_projection_error_shrinks_with_n() {
        let median = |n: usize| {
            let p = gaussian(n, 4, 5);
            let cfg = ProbeConfig { k: n, epsilon: 0.5, trials: 40, seed: 6, oracle: false };
            random_projection_probe(&p, cfg).unwrap().error_quantiles[2]
        };
        // relative error of Phi^T Phi P against P decays like 1/sqrt(k) with k = n
        assert!(median(64) < median(8));
    }

    #[test]
    fn probe_rejects_bad_input() {
        let cfg = ProbeConfig { k: 0, epsilon: 0.5, trials: 1, seed: 0, oracle: false };
        assert!(random_projection_probe(&gaussian(3, 3, 0), cfg).is_err());
        let cfg = ProbeConfig { k: 1, ..cfg };
        assert!(random_projection_probe(&Matrix::zeros(3, 3), cfg).is_err());
    }
}
