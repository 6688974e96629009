//! Small dense linear-algebra helpers shared by the filter and risk modules.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::{Error, Result};

/// Jitter ladder applied before declaring a covariance indefinite.
const JITTERS: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower Cholesky factor of a symmetric matrix, escalating diagonal jitter
/// from 1e-12 to 1e-6 before failing.
pub fn cholesky_jittered(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    for &eps in &JITTERS {
        let mut attempt = sym.clone();
        if eps > 0.0 {
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += eps;
            }
        }
        if let Some(chol) = Cholesky::<f64, Dyn>::new(attempt) {
            return Ok(chol.l());
        }
    }
    Err(Error::NotPositiveDefinite(context))
}

/// Strict positive-definiteness test (no jitter).
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    Cholesky::<f64, Dyn>::new(symmetrize(m)).is_some()
}

/// Quadratic form aᵀ M a.
pub fn quad_form(m: &DMatrix<f64>, a: &nalgebra::DVector<f64>) -> f64 {
    (a.transpose() * m * a)[(0, 0)]
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}
