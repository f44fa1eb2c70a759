use eac_core::analysis::{
    dispersion_decomposition, heterogeneity_d, heterogeneity_d_pairwise, neutralize_cross_term, svd_cumulative,
};
use eac_core::graph::{build_adjacency, scaled_laplacian};
use eac_core::linalg::{svd, Matrix};
use eac_core::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix {
    let mut r = rng::stream(seed, name);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_distances(n: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "points");
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng::uniform(&mut r, 0.0, 1.0), rng::uniform(&mut r, 0.0, 1.0))).collect();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d.set(i, j, ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt());
        }
    }
    d
}

fn spectral_radius(m: &Matrix) -> f64 {
    to_na(m).symmetric_eigen().eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[test]
fn scaled_laplacian_of_sensor_graphs_stays_in_unit_interval() {
    for seed in 0..100u64 {
        let n = 5 + (seed as usize % 46);
        let l = scaled_laplacian(&build_adjacency(&random_distances(n, seed), 0.1, None).unwrap()).unwrap();
        assert!(l.is_symmetric(1e-12));
        let radius = spectral_radius(&l);
        assert!(radius <= 1.0 + 1e-6, "seed {seed}: {radius}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjacency_is_symmetric_and_laplacian_spectrum_is_bounded(n in 2usize..24, seed in any::<u64>(), r in 0.0f64..0.9) {
        let a = build_adjacency(&random_distances(n, seed), r, None).unwrap();
        prop_assert!(a.is_symmetric(0.0));
        for i in 0..n {
            prop_assert_eq!(a.get(i, i), 0.0);
            for j in 0..n {
                prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
            }
        }
        let l = scaled_laplacian(&a).unwrap();
        let radius = spectral_radius(&l);
        prop_assert!(radius <= 1.0 + 1e-6, "spectral radius {}", radius);
        // lambda_max itself is accurate, so the top of the scaled spectrum sits at 1
        let has_edges = a.as_slice().iter().any(|w| *w > 0.0);
        let top = to_na(&l).symmetric_eigen().eigenvalues.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        if has_edges {
            prop_assert!((top - 1.0).abs() <= 1e-6, "largest scaled eigenvalue {}", top);
        }
    }

    #[test]
    fn closed_form_d_matches_pairwise(n in 1usize..30, d in 1usize..12, seed in any::<u64>()) {
        let x = gaussian(n, d, seed, "x");
        let (fast, slow) = (heterogeneity_d(&x), heterogeneity_d_pairwise(&x));
        prop_assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{} vs {}", fast, slow);
        prop_assert!(fast >= 0.0);
    }
}

#[test]
fn singular_values_match_nalgebra_and_truncation_meets_the_floor() {
    let mut r = rng::stream(7, "shapes");
    for trial in 0..50u64 {
        let rows = 2 + (rng::uniform(&mut r, 0.0, 30.0) as usize);
        let cols = 1 + (rng::uniform(&mut r, 0.0, 16.0) as usize);
        let k = 1 + (rng::uniform(&mut r, 0.0, cols as f64) as usize).min(cols - 1);
        let p = gaussian(rows, cols, trial, "svd");
        let ours = svd(&p).singular_values;
        let mut theirs: Vec<f64> = to_na(&p).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b), "trial {trial}: {a} vs {b}");
        }
        let report = svd_cumulative(&p, k);
        let floor = theirs.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt();
        assert!((report.rank_k_error - floor).abs() <= 1e-8, "trial {trial}: {} vs {floor}", report.rank_k_error);
        let ratio = report.cumulative_ratio.unwrap();
        assert!(ratio.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*ratio.last().unwrap(), 1.0);
    }
}

#[test]
fn decomposition_closes_and_neutralized_prompts_never_shrink_d() {
    let mut r = rng::stream(11, "dims");
    for trial in 0..200u64 {
        let n = 2 + (rng::uniform(&mut r, 0.0, 49.0) as usize);
        let d = 1 + (rng::uniform(&mut r, 0.0, 32.0) as usize);
        let x = gaussian(n, d, trial, "x").scale(3.0);
        let p = gaussian(n, d, trial, "p");
        let rep = dispersion_decomposition(&x, &p).unwrap();
        assert!(rep.residual.abs() <= 1e-9 * (1.0 + rep.delta.abs()), "trial {trial}: {rep:?}");

        let q = neutralize_cross_term(&x, &p).unwrap();
        let rep = dispersion_decomposition(&x, &q).unwrap();
        assert!(rep.cross_term.abs() <= 1e-9 * (1.0 + rep.delta.abs()), "trial {trial}: {rep:?}");
        assert!((rep.delta - rep.paper_rhs).abs() <= 1e-9 * (1.0 + rep.delta.abs()), "trial {trial}: {rep:?}");
        assert!(rep.paper_rhs >= 0.0);
    }
}
