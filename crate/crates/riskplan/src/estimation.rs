//! Noise decorrelation and a Van der Merwe Unscented Kalman Filter over the
//! environmental state.
//!
//! The cross-correlation M between process and sensor noise is absorbed into
//! pseudo process dynamics `f*(Z,u) = f̃(Z,u) − H·S(Z) + H·ŷ` with pseudo
//! gain `H = M Σ_v⁻¹`; the resulting pseudo process noise `w* = w − Hv` is
//! uncorrelated with v, so the standard UKF recursion applies.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::env_model::{EnvironmentModel, NoiseModel, SensorModel};
use crate::linalg::{self, cholesky_jittered, symmetrize};
use crate::{Error, Result};

/// Pseudo gain and pseudo process covariance produced by decorrelation.
#[derive(Clone, Debug)]
pub struct DecorrelatedModel {
    /// H = M Σ_v⁻¹ (n_z × p).
    pub pseudo_gain: DMatrix<f64>,
    /// Σ*_w = Σ_w − M Σ_v⁻¹ Mᵀ, positive definite.
    pub pseudo_process_cov: DMatrix<f64>,
    pub sensor_cov: DMatrix<f64>,
}

impl DecorrelatedModel {
    pub fn is_trivial(&self) -> bool {
        self.pseudo_gain.norm() == 0.0
    }
}

/// Compute the pseudo gain and pseudo process covariance. Fails when Σ_v is
/// singular or the Schur complement Σ_w − M Σ_v⁻¹ Mᵀ is not positive
/// definite (i.e. the joint covariance was not PD).
pub fn decorrelate(noise: &NoiseModel) -> Result<DecorrelatedModel> {
    if noise.cross_corr.norm() == 0.0 {
        // uncorrelated case reduces to the identity; Σ_w may be merely PSD
        return Ok(DecorrelatedModel {
            pseudo_gain: DMatrix::zeros(noise.process_cov.nrows(), noise.sensor_cov.nrows()),
            pseudo_process_cov: noise.process_cov.clone(),
            sensor_cov: noise.sensor_cov.clone(),
        });
    }
    let sv_chol = Cholesky::<f64, Dyn>::new(symmetrize(&noise.sensor_cov))
        .ok_or(Error::NotPositiveDefinite("sensor covariance"))?;
    // H = M Σ_v⁻¹  computed as  (Σ_v⁻¹ Mᵀ)ᵀ
    let pseudo_gain = sv_chol.solve(&noise.cross_corr.transpose()).transpose();
    let pseudo_process_cov = symmetrize(
        &(&noise.process_cov - &pseudo_gain * noise.cross_corr.transpose()),
    );
    if !linalg::is_positive_definite(&pseudo_process_cov) {
        return Err(Error::NotPositiveDefinite("pseudo process covariance"));
    }
    Ok(DecorrelatedModel {
        pseudo_gain,
        pseudo_process_cov,
        sensor_cov: noise.sensor_cov.clone(),
    })
}

/// Unscented transform tuning parameters.
#[derive(Clone, Copy, Debug)]
pub struct UtParams {
    pub alpha_u: f64,
    pub beta_u: f64,
    pub kappa: f64,
}

impl UtParams {
    /// α_u = 1, β_u = 2, κ = 3 − n_z.
    pub fn defaults(n_z: usize) -> Self {
        Self {
            alpha_u: 1.0,
            beta_u: 2.0,
            kappa: 3.0 - n_z as f64,
        }
    }

    /// Scaling parameter λ = α_u²(n_z + κ) − n_z.
    pub fn lambda(&self, n_z: usize) -> f64 {
        self.alpha_u * self.alpha_u * (n_z as f64 + self.kappa) - n_z as f64
    }
}

/// Mean/covariance pair maintained by the filter.
#[derive(Clone, Debug)]
pub struct BeliefState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl BeliefState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let cov = symmetrize(&cov);
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Deterministic sigma-point ensemble with its mean/covariance weights.
#[derive(Clone, Debug)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

/// Van der Merwe sigma points: χ_0 at the mean, χ_i at mean ± columns of the
/// square root of (n_z+λ)Σ. The i ≥ 1 weights are 1/(2(n_z+λ)), which is the
/// normalizing choice.
pub fn sigma_points(belief: &BeliefState, params: &UtParams) -> Result<SigmaPointSet> {
    let n_z = belief.dim();
    let lambda = params.lambda(n_z);
    let scale = n_z as f64 + lambda;
    if scale <= 0.0 {
        return Err(Error::invalid(format!(
            "n_z + lambda must be positive, got {scale}"
        )));
    }
    let sqrt = cholesky_jittered(&(&belief.cov * scale), "sigma-point covariance")?;
    let mut points = Vec::with_capacity(2 * n_z + 1);
    points.push(belief.mean.clone());
    for i in 0..n_z {
        points.push(&belief.mean + sqrt.column(i));
    }
    for i in 0..n_z {
        points.push(&belief.mean - sqrt.column(i));
    }
    let w_side = 1.0 / (2.0 * scale);
    let w0_m = lambda / scale;
    let w0_c = w0_m + 1.0 - params.alpha_u * params.alpha_u + params.beta_u;
    let mut mean_weights = vec![w_side; 2 * n_z + 1];
    let mut cov_weights = vec![w_side; 2 * n_z + 1];
    mean_weights[0] = w0_m;
    cov_weights[0] = w0_c;
    Ok(SigmaPointSet {
        points,
        mean_weights,
        cov_weights,
    })
}

fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut mean = DVector::zeros(points[0].len());
    for (p, &w) in points.iter().zip(weights) {
        mean += p * w;
    }
    mean
}

fn weighted_cov(
    points_a: &[DVector<f64>],
    mean_a: &DVector<f64>,
    points_b: &[DVector<f64>],
    mean_b: &DVector<f64>,
    weights: &[f64],
) -> DMatrix<f64> {
    let mut cov = DMatrix::zeros(mean_a.len(), mean_b.len());
    for ((a, b), &w) in points_a.iter().zip(points_b).zip(weights) {
        let da = a - mean_a;
        let db = b - mean_b;
        cov += da * db.transpose() * w;
    }
    cov
}

/// One generic unscented filter step over arbitrary propagation and output
/// maps. With `measurement = None` the innovation is zero (the measurement is
/// taken at its predicted mean), which propagates the covariance through the
/// full recursion while the mean follows the nominal trajectory.
pub fn unscented_step<F, S>(
    belief: &BeliefState,
    propagate: F,
    observe: S,
    process_cov: &DMatrix<f64>,
    sensor_cov: &DMatrix<f64>,
    measurement: Option<&DVector<f64>>,
    params: &UtParams,
) -> Result<BeliefState>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    S: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let sigma = sigma_points(belief, params)?;

    let propagated: Vec<DVector<f64>> = sigma
        .points
        .iter()
        .map(|chi| propagate(chi))
        .collect::<Result<_>>()?;
    let prior_mean = weighted_mean(&propagated, &sigma.mean_weights);
    let prior_cov = symmetrize(
        &(weighted_cov(
            &propagated,
            &prior_mean,
            &propagated,
            &prior_mean,
            &sigma.cov_weights,
        ) + process_cov),
    );

    // Redraw sigma points from the predicted belief so the measurement
    // statistics see the process-noise contribution; reusing the propagated
    // points would base the gain on the pre-noise covariance.
    let prior = BeliefState {
        mean: prior_mean.clone(),
        cov: prior_cov.clone(),
    };
    let resampled = sigma_points(&prior, params)?;
    let observed: Vec<DVector<f64>> = resampled
        .points
        .iter()
        .map(|xi| observe(xi))
        .collect::<Result<_>>()?;
    let obs_mean = weighted_mean(&observed, &resampled.mean_weights);
    let obs_cov = symmetrize(
        &(weighted_cov(
            &observed,
            &obs_mean,
            &observed,
            &obs_mean,
            &resampled.cov_weights,
        ) + sensor_cov),
    );
    let cross_cov = weighted_cov(
        &resampled.points,
        &prior_mean,
        &observed,
        &obs_mean,
        &resampled.cov_weights,
    );

    let obs_chol = cholesky_jittered(&obs_cov, "innovation covariance")?;
    // gain L = C Σ_Θ⁻¹ via two triangular solves on Cᵀ
    let chol = Cholesky::<f64, Dyn>::pack_dirty(obs_chol);
    let gain = chol.solve(&cross_cov.transpose()).transpose();

    let innovation = match measurement {
        Some(y) => {
            if y.len() != obs_mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: obs_mean.len(),
                    got: y.len(),
                    context: "measurement",
                });
            }
            y - &obs_mean
        }
        None => DVector::zeros(obs_mean.len()),
    };
    let mean = &prior_mean + &gain * innovation;
    let cov = symmetrize(&(&prior_cov - &gain * &obs_cov * gain.transpose()));
    Ok(BeliefState { mean, cov })
}

/// UKF bound to an environment, sensor, and decorrelated noise model.
#[derive(Clone, Debug)]
pub struct Ukf<'a> {
    pub env: &'a EnvironmentModel,
    pub sensor: &'a SensorModel,
    pub decorr: &'a DecorrelatedModel,
    pub params: UtParams,
}

impl<'a> Ukf<'a> {
    pub fn new(
        env: &'a EnvironmentModel,
        sensor: &'a SensorModel,
        decorr: &'a DecorrelatedModel,
        params: UtParams,
    ) -> Self {
        Self {
            env,
            sensor,
            decorr,
            params,
        }
    }

    fn step_inner(
        &self,
        belief: &BeliefState,
        u: &DVector<f64>,
        measurement: Option<&DVector<f64>>,
    ) -> Result<BeliefState> {
        let n_z = self.env.n_z();
        let zero_noise = DVector::zeros(n_z);
        let h = &self.decorr.pseudo_gain;
        // The H·y_t term of the pseudo dynamics is a known input approximated
        // by H·ŷ with ŷ the predicted output at the current estimate.
        let offset = if self.decorr.is_trivial() {
            None
        } else {
            Some(h * self.sensor.output(self.env, &belief.mean)?)
        };
        let propagate = |chi: &DVector<f64>| -> Result<DVector<f64>> {
            let mut next = self.env.step(chi, u, &zero_noise)?;
            if let Some(off) = &offset {
                next -= h * self.sensor.output(self.env, chi)?;
                next += off;
            }
            Ok(next)
        };
        let observe = |xi: &DVector<f64>| self.sensor.output(self.env, xi);
        unscented_step(
            belief,
            propagate,
            observe,
            &self.decorr.pseudo_process_cov,
            &self.decorr.sensor_cov,
            measurement,
            &self.params,
        )
    }

    /// Full measurement-update step with an actual measurement y.
    pub fn step(
        &self,
        belief: &BeliefState,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<BeliefState> {
        self.step_inner(belief, u, Some(y))
    }

    /// Planning-time step: the measurement is taken at its predicted mean so
    /// the innovation is zero and only the covariance contracts.
    pub fn predict_planning(&self, belief: &BeliefState, u: &DVector<f64>) -> Result<BeliefState> {
        self.step_inner(belief, u, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::NoiseFamily;
    use approx::assert_abs_diff_eq;

    #[test]
    fn decorrelate_zero_cross_corr_is_identity() {
        let noise = NoiseModel::uncorrelated(
            DMatrix::identity(3, 3) * 2.0,
            DMatrix::identity(2, 2),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        let d = decorrelate(&noise).unwrap();
        assert_eq!(d.pseudo_gain.norm(), 0.0);
        assert_eq!(d.pseudo_process_cov, noise.process_cov);
    }

    #[test]
    fn decorrelate_scalar_schur() {
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        let d = decorrelate(&noise).unwrap();
        assert_abs_diff_eq!(d.pseudo_gain[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.pseudo_process_cov[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn decorrelation_identity_holds() {
        // M − H Σ_v = 0 to machine precision for a random-ish rank-one M
        let n_z = 4;
        let p = 3;
        let u = DVector::from_fn(n_z, |i, _| 0.1 * (i as f64 + 1.0));
        let v = DVector::from_fn(p, |i, _| 0.05 * (i as f64 + 2.0));
        let m = &u * v.transpose();
        let sw = DMatrix::identity(n_z, n_z) * 2.0;
        let sv = DMatrix::identity(p, p) * 1.5;
        let noise = NoiseModel::new(sw, sv.clone(), m.clone(), NoiseFamily::Gaussian).unwrap();
        let d = decorrelate(&noise).unwrap();
        let residual = &m - &d.pseudo_gain * &sv;
        assert!(residual.norm() < 1e-12, "residual {}", residual.norm());
    }

    #[test]
    fn sigma_points_scalar_hand_values() {
        // n_z=1, mean 0, cov 1, lambda=2 -> points {0, sqrt(3), -sqrt(3)},
        // mean weights {2/3, 1/6, 1/6}
        let belief = BeliefState::new(DVector::zeros(1), DMatrix::identity(1, 1));
        let params = UtParams {
            alpha_u: 1.0,
            beta_u: 2.0,
            kappa: 2.0,
        };
        assert_abs_diff_eq!(params.lambda(1), 2.0);
        let set = sigma_points(&belief, &params).unwrap();
        assert_abs_diff_eq!(set.points[0][0], 0.0);
        assert_abs_diff_eq!(set.points[1][0], 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(set.points[2][0], -(3f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(set.mean_weights[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(set.mean_weights[1], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(set.mean_weights[2], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma_point_weights_normalize() {
        for n_z in [1usize, 3, 5, 8] {
            let belief = BeliefState::new(DVector::zeros(n_z), DMatrix::identity(n_z, n_z));
            let params = UtParams::defaults(n_z);
            let set = sigma_points(&belief, &params).unwrap();
            let sum: f64 = set.mean_weights.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_covariance_collapses_points() {
        let belief = BeliefState::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::zeros(2, 2),
        );
        let set = sigma_points(&belief, &UtParams::defaults(2)).unwrap();
        for p in &set.points {
            assert!((p - &belief.mean).norm() < 1e-2);
        }
    }
}
