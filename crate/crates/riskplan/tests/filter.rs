//! Filter verification against an independent linear Kalman filter, and
//! decorrelation checks against sampled statistics.

mod common;

use common::{max_abs_diff_mat, max_abs_diff_vec, LinearKf};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, StandardNormal};
use riskplan::env_model::{NoiseFamily, NoiseModel};
use riskplan::estimation::{decorrelate, unscented_step, BeliefState, UtParams};

fn random_stable_system(rng: &mut ChaCha8Rng, n: usize, p: usize) -> LinearKf {
    let mut a = DMatrix::from_fn(n, n, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        0.3 * x
    });
    // scale the spectral radius comfortably below one
    let norm = a.norm();
    if norm > 0.9 {
        a *= 0.9 / norm;
    }
    let b = DMatrix::from_fn(n, 2, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        0.5 * x
    });
    let c = DMatrix::from_fn(p, n, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x
    });
    let q_half = DMatrix::from_fn(n, n, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        0.1 * x
    });
    let q = &q_half * q_half.transpose() + DMatrix::identity(n, n) * 0.01;
    let r_half = DMatrix::from_fn(p, p, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        0.1 * x
    });
    let r = &r_half * r_half.transpose() + DMatrix::identity(p, p) * 0.01;
    LinearKf { a, b, c, q, r }
}

/// On a linear system the unscented transform is exact, so the UKF must agree
/// with a conventional Kalman filter to numerical precision.
#[test]
fn ukf_matches_kalman_filter_on_linear_system() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, p) = (4, 3);
    let sys = random_stable_system(&mut rng, n, p);
    let params = UtParams::defaults(n);

    let mut ukf_belief = BeliefState::new(DVector::zeros(n), DMatrix::identity(n, n));
    let mut kf_mean = DVector::zeros(n);
    let mut kf_cov = DMatrix::identity(n, n);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let u = DVector::from_vec(vec![(t as f64 * 0.1).sin(), (t as f64 * 0.07).cos()]);
        let y = DVector::from_fn(p, |i, _| ((t + i) as f64 * 0.3).sin());
        ukf_belief = unscented_step(
            &ukf_belief,
            |x| Ok(&sys.a * x + &sys.b * &u),
            |x| Ok(&sys.c * x),
            &sys.q,
            &sys.r,
            Some(&y),
            &params,
        )
        .unwrap();
        let (m, c) = sys.step(&kf_mean, &kf_cov, &u, &y);
        kf_mean = m;
        kf_cov = c;
        worst = worst
            .max(max_abs_diff_vec(&ukf_belief.mean, &kf_mean))
            .max(max_abs_diff_mat(&ukf_belief.cov, &kf_cov));
    }
    assert!(worst <= 1e-8, "max |UKF - KF| = {worst}");
    assert!(start.elapsed().as_secs_f64() < 1.0, "runtime budget exceeded");
}

/// 50 random rank-one cross-correlated noise models: the pseudo gain must
/// reproduce M exactly, and the pseudo process noise w* = w − Hv must be
/// empirically uncorrelated with v.
#[test]
fn decorrelation_produces_uncorrelated_pseudo_noise() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, p) = (3, 2);
    let mut accepted = 0;
    while accepted < 50 {
        let sw_half = DMatrix::from_fn(n, n, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            0.3 * x
        });
        // a dominant channel keeps the relative tolerance well above the
        // 1e5-sample estimator noise of the cross-covariance entries
        let mut sw = &sw_half * sw_half.transpose() + DMatrix::identity(n, n);
        sw[(0, 0)] += 8.0 + rng.gen_range(0.0..4.0);
        let sv_half = DMatrix::from_fn(p, p, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            0.3 * x
        });
        let sv = &sv_half * sv_half.transpose() + DMatrix::identity(p, p);
        let uu = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
        let vv = DVector::from_fn(p, |_, _| rng.gen_range(-0.3..0.3));
        let m = &uu * vv.transpose();

        let noise = match NoiseModel::new(sw.clone(), sv.clone(), m.clone(), NoiseFamily::Gaussian)
        {
            Ok(nm) => nm,
            Err(_) => continue, // joint covariance not PD: resample
        };
        accepted += 1;
        let decorr = decorrelate(&noise).unwrap();
        let residual = (&m - &decorr.pseudo_gain * &sv).amax();
        assert!(residual <= 1e-12, "M - H Sigma_v residual {residual}");

        // empirical cross-covariance of (w - Hv, v) over 1e5 joint samples
        let dim = n + p;
        let mut joint = DMatrix::zeros(dim, dim);
        joint.view_mut((0, 0), (n, n)).copy_from(&sw);
        joint.view_mut((0, n), (n, p)).copy_from(&m);
        joint.view_mut((n, 0), (p, n)).copy_from(&m.transpose());
        joint.view_mut((n, n), (p, p)).copy_from(&sv);
        let l = joint.clone().cholesky().expect("joint PD").l();

        let samples = 100_000usize;
        let mut cross = DMatrix::zeros(n, p);
        for _ in 0..samples {
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let s = &l * z;
            let w = s.rows(0, n).into_owned();
            let v = s.rows(n, p).into_owned();
            let w_star = &w - &decorr.pseudo_gain * &v;
            cross += &w_star * v.transpose();
        }
        cross /= samples as f64;
        let tolerance = 5e-3 * joint.amax();
        assert!(
            cross.amax() <= tolerance,
            "empirical cross-covariance {} exceeds {tolerance}",
            cross.amax()
        );
    }
    assert!(start.elapsed().as_secs_f64() < 10.0, "runtime budget exceeded");
}
