use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut mu = alloc::vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let n = x.rows().max(1) as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Mean of `(x_i - mu_x) . (y_i - mu_y)` over rows.
fn centered_inner(x: &Matrix, y: &Matrix) -> f64 {
    let (mx, my) = (column_means(x), column_means(y));
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            total += (x.get(i, j) - mx[j]) * (y.get(i, j) - my[j]);
        }
    }
    total / x.rows().max(1) as f64
}

/// Average node deviation `(1/n^2) sum_ij |x_i - x_j|^2`, evaluated as
/// `2 (mean |x_i|^2 - |mu|^2)` in its centered form so it is never negative.
pub fn heterogeneity_d(x: &Matrix) -> f64 {
    2.0 * centered_inner(x, x)
}

/// The `O(n^2 d)` double sum.
pub fn heterogeneity_d_pairwise(x: &Matrix) -> f64 {
    let n = x.rows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    total / (n * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    #[serde(rename = "D_before")]
    pub d_before: f64,
    #[serde(rename = "D_after")]
    pub d_after: f64,
    pub delta: f64,
    /// `2 (mean |p_i|^2 - |mu_p|^2)`, the growth the additive prompt is claimed to add.
    pub paper_rhs: f64,
    /// `4 (mean x_i.p_i - mu_x.mu_p)`, which the claimed inequality ignores.
    pub cross_term: f64,
    pub residual: f64,
    /// Whether `D_after >= D_before` held.
    pub inequality_held: bool,
}

/// Splits the change in heterogeneity caused by adding `p` to `x`.
pub fn dispersion_decomposition(x: &Matrix, p: &Matrix) -> Result<DispersionReport> {
    if x.rows() != p.rows() || x.cols() != p.cols() {
        return Err(Error::shape(
            "dispersion_decomposition",
            alloc::format!("X is {}x{}, P is {}x{}", x.rows(), x.cols(), p.rows(), p.cols()),
        ));
    }
    let mut fused = x.clone();
    for (f, v) in fused.as_mut_slice().iter_mut().zip(p.as_slice()) {
        *f += v;
    }
    let d_before = heterogeneity_d(x);
    let d_after = heterogeneity_d(&fused);
    let delta = d_after - d_before;
    let paper_rhs = heterogeneity_d(p);
    let cross_term = 4.0 * centered_inner(x, p);
    Ok(DispersionReport {
        d_before,
        d_after,
        delta,
        paper_rhs,
        cross_term,
        residual: delta - paper_rhs - cross_term,
        inequality_held: d_after >= d_before,
    })
}

/// Centers `p` and removes its component along the centered `x` in the
/// sample inner product, so the cross term of the decomposition vanishes.
pub fn neutralize_cross_term(x: &Matrix, p: &Matrix) -> Result<Matrix> {
    if x.rows() != p.rows() || x.cols() != p.cols() {
        return Err(Error::shape("neutralize_cross_term", "X and P differ in shape"));
    }
    let (mx, mp) = (column_means(x), column_means(p));
    let mut xc = x.clone();
    let mut pc = p.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            xc.set(i, j, x.get(i, j) - mx[j]);
            pc.set(i, j, p.get(i, j) - mp[j]);
        }
    }
    let xx: f64 = xc.as_slice().iter().map(|v| v * v).sum();
    if xx > 0.0 {
        let coef = xc.as_slice().iter().zip(pc.as_slice()).map(|(a, b)| a * b).sum::<f64>() / xx;
        for (v, a) in pc.as_mut_slice().iter_mut().zip(xc.as_slice()) {
            *v -= coef * a;
        }
    }
    Ok(pc)
}
