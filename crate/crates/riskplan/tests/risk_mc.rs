//! Monte-Carlo validation of the distributionally robust tightening: the
//! Cantelli factor must bound the violation frequency for any distribution
//! with the assumed moments, and the extremal two-point law must attain it.

mod common;

use common::{binomial_3sigma, normal_quantile};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use riskplan::env_model::NoiseFamily;
use riskplan::risk::{dr_tightening_factor, gaussian_tightening_factor};
use riskplan::simulation::sample_noise;

#[test]
fn gaussian_factor_matches_quantile_oracle() {
    for i in 1..100 {
        let alpha = i as f64 / 200.0; // sweep (0, 0.5)
        let ours = gaussian_tightening_factor(alpha).unwrap();
        let oracle = normal_quantile(1.0 - alpha);
        assert!(
            (ours - oracle).abs() <= 1e-4,
            "alpha={alpha}: {ours} vs oracle {oracle}"
        );
        assert!(
            dr_tightening_factor(alpha).unwrap() > ours,
            "dr must dominate gaussian at alpha={alpha}"
        );
    }
}

/// A half-space tightened by the Cantelli factor is violated with frequency
/// at most α by every sampled family with the assumed mean/covariance; the
/// two-point law putting mass α on the violating support point attains α.
#[test]
fn cantelli_bound_holds_and_is_attained() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_samples = 100_000usize;

    let sigma = DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.8]);
    let a = DVector::from_vec(vec![0.6, -0.8]);
    let quad: f64 = (a.transpose() * &sigma * &a)[(0, 0)];
    let sigma_a = quad.sqrt();

    for &alpha in &[0.01, 0.05, 0.1] {
        let factor = dr_tightening_factor(alpha).unwrap();
        let boundary = factor * sigma_a; // mean is the origin
        let band = binomial_3sigma(alpha, n_samples);

        for family in [NoiseFamily::Gaussian, NoiseFamily::Laplacian] {
            let mut violations = 0usize;
            for _ in 0..n_samples {
                let x = sample_noise(family, &sigma, &mut rng).unwrap();
                if a.dot(&x) >= boundary {
                    violations += 1;
                }
            }
            let freq = violations as f64 / n_samples as f64;
            assert!(
                freq <= alpha + band,
                "{family:?} at alpha={alpha}: frequency {freq}"
            );
        }

        // two-point extremal law along d = Σa/σ_a: the projection aᵀx has the
        // assumed mean and variance, with mass α exactly on the boundary
        let d = &sigma * &a / sigma_a;
        let t_hi = ((1.0 - alpha) / alpha).sqrt();
        let t_lo = -(alpha / (1.0 - alpha)).sqrt();
        let mut violations = 0usize;
        for _ in 0..n_samples {
            let t = if rng.gen::<f64>() < alpha { t_hi } else { t_lo };
            let x = &d * t;
            if a.dot(&x) >= boundary {
                violations += 1;
            }
        }
        let freq = violations as f64 / n_samples as f64;
        assert!(
            (freq - alpha).abs() <= band,
            "two-point at alpha={alpha}: frequency {freq}"
        );
    }
    assert!(start.elapsed().as_secs_f64() < 30.0, "runtime budget exceeded");
}
