//! Independent oracles shared by the integration tests: a hand-rolled linear
//! Kalman filter, an erf-series standard-normal quantile, and small helpers.
//! Nothing here calls into the crate's own numerics being verified.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Plain linear Kalman filter step for x' = A x + B u + w, y = C x + v.
pub struct LinearKf {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearKf {
    pub fn step(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let pred_mean = &self.a * mean + &self.b * u;
        let pred_cov = &self.a * cov * self.a.transpose() + &self.q;
        let s = &self.c * &pred_cov * self.c.transpose() + &self.r;
        let k = &pred_cov * self.c.transpose() * s.try_inverse().expect("innovation inverse");
        let new_mean = &pred_mean + &k * (y - &self.c * &pred_mean);
        let eye = DMatrix::identity(pred_cov.nrows(), pred_cov.ncols());
        let new_cov = (&eye - &k * &self.c) * &pred_cov;
        (new_mean, 0.5 * (&new_cov + new_cov.transpose()))
    }
}

/// erf via its Maclaurin series; accurate to ~1e-14 for |x| ≤ 4, which covers
/// every quantile the tests need.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x * x / nf;
        let contrib = term / (2.0 * nf + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Standard-normal quantile by bisection on the series CDF.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    let (mut lo, mut hi) = (-8.0, 8.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// 3σ binomial half-width for a frequency estimate of `p` over `n` samples.
pub fn binomial_3sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

pub fn unicycle_scenario_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/unicycle-10x10.cfg")
}

pub fn bicycle_scenario_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/bicycle-rangebearing.cfg")
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

pub fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
