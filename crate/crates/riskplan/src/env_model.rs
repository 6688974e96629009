//! Robot dynamics, obstacle/environment geometry, sensor models, noise
//! models, and the concatenated environmental state.
//!
//! The environmental state stacks the robot state with every obstacle's
//! centroid state, `Z = [x; X_1; ...; X_F]`, so the filter estimates robot
//! and obstacles jointly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, wrap_angle};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotKind {
    Unicycle,
    Bicycle,
}

/// Discrete-time robot model with Euler discretization. Process noise enters
/// scaled by dt, matching the dynamics used throughout.
#[derive(Clone, Debug)]
pub struct RobotModel {
    pub kind: RobotKind,
    pub dt: f64,
    /// Wheelbase in meters; only meaningful for the bicycle.
    pub wheelbase: f64,
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
}

impl RobotModel {
    pub fn new(
        kind: RobotKind,
        dt: f64,
        wheelbase: f64,
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
    ) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if input_lower.len() != 2 || input_upper.len() != 2 {
            return Err(Error::invalid("input bounds must have dimension 2"));
        }
        if input_lower.iter().zip(input_upper.iter()).any(|(l, u)| l >= u) {
            return Err(Error::invalid("input_lower must be < input_upper elementwise"));
        }
        if kind == RobotKind::Bicycle && wheelbase <= 0.0 {
            return Err(Error::invalid("bicycle wheelbase must be positive"));
        }
        Ok(Self {
            kind,
            dt,
            wheelbase,
            input_lower,
            input_upper,
        })
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            RobotKind::Unicycle => 3,
            RobotKind::Bicycle => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    pub fn clamp_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| {
            u[i].clamp(self.input_lower[i], self.input_upper[i])
        })
    }

    /// Continuous-time drift term of the kinematics.
    pub fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            RobotKind::Unicycle => {
                let (theta, nu, omega) = (x[2], u[0], u[1]);
                DVector::from_vec(vec![nu * theta.cos(), nu * theta.sin(), omega])
            }
            RobotKind::Bicycle => {
                let (psi, nu) = (x[2], x[3]);
                let (accel, delta) = (u[0], u[1]);
                DVector::from_vec(vec![
                    nu * psi.cos(),
                    nu * psi.sin(),
                    nu / self.wheelbase * delta.tan(),
                    accel,
                ])
            }
        }
    }

    /// One Euler step `x + dt·drift(x,u) + dt·w`, with the heading wrapped to
    /// (−π, π]. Inputs outside the box bounds are clamped first.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.state_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
                context: "robot state",
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
                context: "robot input",
            });
        }
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
                context: "robot process noise",
            });
        }
        let u = self.clamp_input(u);
        let mut next = x + self.drift(x, &u) * self.dt + w * self.dt;
        next[2] = wrap_angle(next[2]);
        Ok(next)
    }

    /// Jacobian of the noiseless step map with respect to the state.
    pub fn step_jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut jac = DMatrix::identity(n, n);
        match self.kind {
            RobotKind::Unicycle => {
                let (theta, nu) = (x[2], u[0]);
                jac[(0, 2)] = -self.dt * nu * theta.sin();
                jac[(1, 2)] = self.dt * nu * theta.cos();
            }
            RobotKind::Bicycle => {
                let (psi, nu, delta) = (x[2], x[3], u[1]);
                jac[(0, 2)] = -self.dt * nu * psi.sin();
                jac[(0, 3)] = self.dt * psi.cos();
                jac[(1, 2)] = self.dt * nu * psi.cos();
                jac[(1, 3)] = self.dt * psi.sin();
                jac[(2, 3)] = self.dt * delta.tan() / self.wheelbase;
            }
        }
        jac
    }

    /// Jacobian of the noiseless step map with respect to the input.
    pub fn step_jacobian_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, self.input_dim());
        match self.kind {
            RobotKind::Unicycle => {
                let theta = x[2];
                jac[(0, 0)] = self.dt * theta.cos();
                jac[(1, 0)] = self.dt * theta.sin();
                jac[(2, 1)] = self.dt;
            }
            RobotKind::Bicycle => {
                let (nu, delta) = (x[3], u[1]);
                let sec2 = 1.0 / (delta.cos() * delta.cos());
                jac[(2, 1)] = self.dt * nu * sec2 / self.wheelbase;
                jac[(3, 0)] = self.dt;
            }
        }
        jac
    }
}

/// Convex polytope `{x : Ax ≤ b}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
                context: "polytope facets",
            });
        }
        for i in 0..a.nrows() {
            if a.row(i).norm() == 0.0 {
                return Err(Error::invalid(format!("polytope row {i} is zero")));
            }
        }
        Ok(Self { a, b })
    }

    /// Axis-aligned box `[xmin, xmax] × [ymin, ymax]`.
    pub fn rect(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![xmax, -xmin, ymax, -ymin]);
        Self { a, b }
    }

    pub fn n_facets(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        (&self.a * p - &self.b).iter().all(|&r| r <= 0.0)
    }

    /// Translated copy: `{x : A(x − t) ≤ b}`.
    pub fn translated(&self, t: &DVector<f64>) -> Polytope {
        Polytope {
            a: self.a.clone(),
            b: &self.b + &self.a * t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleDynamics {
    Static,
    ConstantVelocity,
}

/// Obstacle with a centered polytope shape attached to an uncertain centroid
/// state. Motion translates the facet offsets `b`; the facet normals never
/// rotate.
#[derive(Clone, Debug)]
pub struct Obstacle {
    /// Shape about the centroid: `{x : A x ≤ b}` in centroid-relative coords.
    pub shape: Polytope,
    /// Centroid state, position first; dim 2 (static) or 4 (constant velocity).
    pub centroid_state: DVector<f64>,
    pub dynamics: ObstacleDynamics,
    /// Known nominal translation applied every step.
    pub nominal_translation: DVector<f64>,
    /// Process covariance of the centroid state (l×l).
    pub process_cov: DMatrix<f64>,
    /// Per-facet covariance of the nominal facet point (2×2 each).
    pub facet_point_cov: Vec<DMatrix<f64>>,
}

impl Obstacle {
    pub fn new(
        shape: Polytope,
        centroid_state: DVector<f64>,
        dynamics: ObstacleDynamics,
        nominal_translation: DVector<f64>,
        process_cov: DMatrix<f64>,
        facet_point_cov: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let l = match dynamics {
            ObstacleDynamics::Static => 2,
            ObstacleDynamics::ConstantVelocity => 4,
        };
        if centroid_state.len() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                got: centroid_state.len(),
                context: "obstacle centroid state",
            });
        }
        if process_cov.nrows() != l || process_cov.ncols() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                got: process_cov.nrows(),
                context: "obstacle process covariance",
            });
        }
        if dynamics == ObstacleDynamics::Static
            && (process_cov.norm() != 0.0 || nominal_translation.norm() != 0.0)
        {
            return Err(Error::invalid(
                "static obstacle must have zero process covariance and zero nominal translation",
            ));
        }
        if facet_point_cov.len() != shape.n_facets() {
            return Err(Error::DimensionMismatch {
                expected: shape.n_facets(),
                got: facet_point_cov.len(),
                context: "facet point covariances",
            });
        }
        Ok(Self {
            shape,
            centroid_state,
            dynamics,
            nominal_translation,
            process_cov,
            facet_point_cov,
        })
    }

    /// Axis-aligned box obstacle with deterministic static motion.
    pub fn static_rect(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        let shape = Polytope::rect(-half_w, half_w, -half_h, half_h);
        let n_facets = shape.n_facets();
        Self {
            shape,
            centroid_state: DVector::from_vec(vec![cx, cy]),
            dynamics: ObstacleDynamics::Static,
            nominal_translation: DVector::zeros(2),
            process_cov: DMatrix::zeros(2, 2),
            facet_point_cov: vec![DMatrix::zeros(2, 2); n_facets],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.centroid_state.len()
    }

    /// One step of the centroid-state dynamics `g(X) + w`.
    pub fn step_state(&self, state: &DVector<f64>, w: &DVector<f64>, dt: f64) -> DVector<f64> {
        let mut next = match self.dynamics {
            ObstacleDynamics::Static => state.clone(),
            ObstacleDynamics::ConstantVelocity => {
                let mut s = state.clone();
                s[0] += dt * state[2];
                s[1] += dt * state[3];
                s
            }
        };
        for i in 0..self.nominal_translation.len().min(next.len()) {
            next[i] += self.nominal_translation[i];
        }
        next + w
    }

    /// Occupied region for a given centroid position.
    pub fn region_at(&self, centroid_pos: &DVector<f64>) -> Polytope {
        self.shape.translated(centroid_pos)
    }

    /// Nominal point on facet `j` for a given centroid position: the
    /// orthogonal projection of the centroid onto the facet hyperplane.
    pub fn facet_point(&self, j: usize, centroid_pos: &DVector<f64>) -> DVector<f64> {
        let a = self.shape.a.row(j).transpose();
        let scale = self.shape.b[j] / a.norm_squared();
        centroid_pos + a * scale
    }
}

/// Layout of the concatenated environmental state `Z = [x; X_1; ...; X_F]`.
#[derive(Clone, Debug)]
pub struct EnvironmentModel {
    pub robot: RobotModel,
    pub obstacles: Vec<Obstacle>,
}

impl EnvironmentModel {
    pub fn new(robot: RobotModel, obstacles: Vec<Obstacle>) -> Self {
        Self { robot, obstacles }
    }

    pub fn n_z(&self) -> usize {
        self.robot.state_dim() + self.obstacles.iter().map(|o| o.state_dim()).sum::<usize>()
    }

    /// First n entries of Z (the robot block).
    pub fn extract_robot_state(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.robot.state_dim()).into_owned()
    }

    pub fn obstacle_block(&self, z: &DVector<f64>, i: usize) -> DVector<f64> {
        let mut offset = self.robot.state_dim();
        for o in &self.obstacles[..i] {
            offset += o.state_dim();
        }
        z.rows(offset, self.obstacles[i].state_dim()).into_owned()
    }

    /// One step of the joint environmental dynamics.
    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let n_z = self.n_z();
        if z.len() != n_z {
            return Err(Error::DimensionMismatch {
                expected: n_z,
                got: z.len(),
                context: "environmental state",
            });
        }
        if w.len() != n_z {
            return Err(Error::DimensionMismatch {
                expected: n_z,
                got: w.len(),
                context: "environmental process noise",
            });
        }
        let n = self.robot.state_dim();
        let robot_next = self.robot.step(
            &z.rows(0, n).into_owned(),
            u,
            &w.rows(0, n).into_owned(),
        )?;
        let mut next = DVector::zeros(n_z);
        next.rows_mut(0, n).copy_from(&robot_next);
        let mut offset = n;
        for obstacle in &self.obstacles {
            let l = obstacle.state_dim();
            let block = obstacle.step_state(
                &z.rows(offset, l).into_owned(),
                &w.rows(offset, l).into_owned(),
                self.robot.dt,
            );
            next.rows_mut(offset, l).copy_from(&block);
            offset += l;
        }
        Ok(next)
    }

    /// Occupied obstacle regions for the obstacle positions stored in Z.
    pub fn obstacle_regions(&self, z: &DVector<f64>) -> Vec<Polytope> {
        (0..self.obstacles.len())
            .map(|i| {
                let block = self.obstacle_block(z, i);
                self.obstacles[i].region_at(&block.rows(0, 2).into_owned())
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum SensorKind {
    /// Identity observation of the full environmental state.
    FullState,
    /// Range and bearing to a landmark plus distorted obstacle position.
    RangeBearing {
        landmark: (f64, f64),
        distortion_theta_star: f64,
    },
}

#[derive(Clone, Debug)]
pub struct SensorModel {
    pub kind: SensorKind,
}

impl SensorModel {
    pub fn full_state() -> Self {
        Self {
            kind: SensorKind::FullState,
        }
    }

    pub fn range_bearing(landmark: (f64, f64), distortion_theta_star: f64) -> Self {
        Self {
            kind: SensorKind::RangeBearing {
                landmark,
                distortion_theta_star,
            },
        }
    }

    pub fn output_dim(&self, env: &EnvironmentModel) -> usize {
        match self.kind {
            SensorKind::FullState => env.n_z(),
            SensorKind::RangeBearing { .. } => 4,
        }
    }

    /// Noiseless output map `S(Z)`.
    pub fn output(&self, env: &EnvironmentModel, z: &DVector<f64>) -> Result<DVector<f64>> {
        match self.kind {
            SensorKind::FullState => Ok(z.clone()),
            SensorKind::RangeBearing {
                landmark,
                distortion_theta_star,
            } => {
                let (x, y, psi) = (z[0], z[1], z[2]);
                let dx = x - landmark.0;
                let dy = y - landmark.1;
                if dx == 0.0 && dy == 0.0 {
                    return Err(Error::MeasurementUndefined(
                        "bearing undefined with robot exactly at the landmark",
                    ));
                }
                let obs = env.obstacle_block(z, 0);
                Ok(DVector::from_vec(vec![
                    (dx * dx + dy * dy).sqrt(),
                    dy.atan2(dx) - psi,
                    distortion_theta_star.cos() * obs[0],
                    distortion_theta_star.sin() * obs[1],
                ]))
            }
        }
    }

    /// Noisy measurement `y = S(Z) + v`.
    pub fn measure(
        &self,
        env: &EnvironmentModel,
        z: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let y = self.output(env, z)?;
        if v.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: v.len(),
                context: "sensor noise",
            });
        }
        Ok(y + v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Laplacian,
}

/// Joint process/sensor noise description with a rank-≤1 cross-correlation.
/// Construction rejects any triple whose joint covariance fails a Cholesky
/// factorization.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub process_cov: DMatrix<f64>,
    pub sensor_cov: DMatrix<f64>,
    pub cross_corr: DMatrix<f64>,
    pub family: NoiseFamily,
}

impl NoiseModel {
    pub fn new(
        process_cov: DMatrix<f64>,
        sensor_cov: DMatrix<f64>,
        cross_corr: DMatrix<f64>,
        family: NoiseFamily,
    ) -> Result<Self> {
        let n_z = process_cov.nrows();
        let p = sensor_cov.nrows();
        if process_cov.ncols() != n_z || sensor_cov.ncols() != p {
            return Err(Error::invalid("noise covariances must be square"));
        }
        if cross_corr.nrows() != n_z || cross_corr.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: n_z,
                got: cross_corr.nrows(),
                context: "cross-correlation matrix",
            });
        }
        if matrix_rank(&cross_corr) > 1 {
            return Err(Error::invalid("cross-correlation matrix must have rank <= 1"));
        }
        if cross_corr.norm() == 0.0 {
            // uncorrelated case: Σ_w may be singular (e.g. exactly static
            // obstacle blocks), so only require PSD blocks with Σ_v PD
            linalg::cholesky_jittered(&process_cov, "process covariance")?;
            if !linalg::is_positive_definite(&sensor_cov) {
                return Err(Error::NotPositiveDefinite("sensor covariance"));
            }
        } else {
            let joint = Self::joint_cov_of(&process_cov, &sensor_cov, &cross_corr);
            if !linalg::is_positive_definite(&joint) {
                return Err(Error::NotPositiveDefinite("joint noise covariance"));
            }
        }
        Ok(Self {
            process_cov,
            sensor_cov,
            cross_corr,
            family,
        })
    }

    /// Uncorrelated model (M = 0).
    pub fn uncorrelated(
        process_cov: DMatrix<f64>,
        sensor_cov: DMatrix<f64>,
        family: NoiseFamily,
    ) -> Result<Self> {
        let m = DMatrix::zeros(process_cov.nrows(), sensor_cov.nrows());
        Self::new(process_cov, sensor_cov, m, family)
    }

    fn joint_cov_of(sw: &DMatrix<f64>, sv: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n_z = sw.nrows();
        let p = sv.nrows();
        let mut joint = DMatrix::zeros(n_z + p, n_z + p);
        joint.view_mut((0, 0), (n_z, n_z)).copy_from(sw);
        joint.view_mut((0, n_z), (n_z, p)).copy_from(m);
        joint.view_mut((n_z, 0), (p, n_z)).copy_from(&m.transpose());
        joint.view_mut((n_z, n_z), (p, p)).copy_from(sv);
        joint
    }

    pub fn joint_cov(&self) -> DMatrix<f64> {
        Self::joint_cov_of(&self.process_cov, &self.sensor_cov, &self.cross_corr)
    }
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.norm() == 0.0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-9 * max_sv.max(1.0))
        .count()
}

/// Moment-based ambiguity set: all distributions sharing the given mean and
/// covariance.
#[derive(Clone, Debug)]
pub struct AmbiguitySet {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl AmbiguitySet {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: covariance.nrows(),
                context: "ambiguity set covariance",
            });
        }
        // PSD check with jitter tolerance for exactly singular covariances.
        linalg::cholesky_jittered(&covariance, "ambiguity set covariance")?;
        Ok(Self { mean, covariance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unicycle() -> RobotModel {
        RobotModel::new(
            RobotKind::Unicycle,
            0.2,
            0.0,
            DVector::from_vec(vec![-0.5, -PI]),
            DVector::from_vec(vec![0.5, PI]),
        )
        .unwrap()
    }

    fn bicycle() -> RobotModel {
        RobotModel::new(
            RobotKind::Bicycle,
            0.2,
            2.9,
            DVector::from_vec(vec![-3.0, -70f64.to_radians()]),
            DVector::from_vec(vec![3.0, 70f64.to_radians()]),
        )
        .unwrap()
    }

    #[test]
    fn unicycle_straight_line() {
        let model = unicycle();
        // the nu=1 input is clamped to the 0.5 bound, so use in-bound nu
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![0.5, 0.0]);
        let w = DVector::zeros(3);
        let next = model.step(&x, &u, &w).unwrap();
        assert_abs_diff_eq!(next[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_straight_line_unclamped_bounds() {
        // wide bounds so nu=1 passes through unchanged: (0,0,0) -> (0.2,0,0)
        let model = RobotModel::new(
            RobotKind::Unicycle,
            0.2,
            0.0,
            DVector::from_vec(vec![-2.0, -PI]),
            DVector::from_vec(vec![2.0, PI]),
        )
        .unwrap();
        let next = model
            .step(
                &DVector::from_vec(vec![0.0, 0.0, 0.0]),
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::zeros(3),
            )
            .unwrap();
        assert_abs_diff_eq!(next[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.0, epsilon = 1e-15);

        // 90 degree rotation symmetry
        let rotated = model
            .step(
                &DVector::from_vec(vec![0.0, 0.0, FRAC_PI_2]),
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::zeros(3),
            )
            .unwrap();
        assert_abs_diff_eq!(rotated[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rotated[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(rotated[2], FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn bicycle_zero_steering() {
        let model = bicycle();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        let u = DVector::from_vec(vec![0.0, 0.0]);
        let next = model.step(&x, &u, &DVector::zeros(4)).unwrap();
        assert_abs_diff_eq!(next[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next[2], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next[3], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn heading_stays_wrapped() {
        let model = unicycle();
        let mut x = DVector::from_vec(vec![0.0, 0.0, 3.0]);
        let u = DVector::from_vec(vec![0.3, 3.0]);
        for _ in 0..100 {
            x = model.step(&x, &u, &DVector::zeros(3)).unwrap();
            assert!(x[2] > -PI && x[2] <= PI);
        }
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        for model in [unicycle(), bicycle()] {
            let n = model.state_dim();
            let x = DVector::from_fn(n, |i, _| 0.3 + 0.1 * i as f64);
            let u = DVector::from_vec(vec![0.2, 0.1]);
            let jx = model.step_jacobian_x(&x, &u);
            let ju = model.step_jacobian_u(&x, &u);
            let h = 1e-7;
            let base = &x + model.drift(&x, &u) * model.dt;
            for j in 0..n {
                let mut xp = x.clone();
                xp[j] += h;
                let fd = (&xp + model.drift(&xp, &u) * model.dt - &base) / h;
                for i in 0..n {
                    assert_abs_diff_eq!(jx[(i, j)], fd[i], epsilon = 1e-5);
                }
            }
            for j in 0..2 {
                let mut up = u.clone();
                up[j] += h;
                let fd = (&x + model.drift(&x, &up) * model.dt - &base) / h;
                for i in 0..n {
                    assert_abs_diff_eq!(ju[(i, j)], fd[i], epsilon = 1e-5);
                }
            }
        }
    }

    fn world_one_obstacle() -> EnvironmentModel {
        EnvironmentModel::new(unicycle(), vec![Obstacle::static_rect(5.0, 5.0, 1.0, 1.0)])
    }

    #[test]
    fn static_obstacle_block_unchanged() {
        let env = world_one_obstacle();
        assert_eq!(env.n_z(), 5);
        let z = DVector::from_vec(vec![0.0, 0.0, 0.0, 5.0, 5.0]);
        let u = DVector::from_vec(vec![0.3, 0.1]);
        let next = env.step(&z, &u, &DVector::zeros(5)).unwrap();
        assert_eq!(next[3], 5.0);
        assert_eq!(next[4], 5.0);
    }

    #[test]
    fn no_obstacles_reduces_to_robot_step() {
        let env = EnvironmentModel::new(unicycle(), vec![]);
        let z = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let u = DVector::from_vec(vec![0.4, -0.2]);
        let env_next = env.step(&z, &u, &DVector::zeros(3)).unwrap();
        let robot_next = env.robot.step(&z, &u, &DVector::zeros(3)).unwrap();
        assert_eq!(env_next, robot_next);
        assert_eq!(env.extract_robot_state(&z), z);
    }

    #[test]
    fn extract_commutes_with_step() {
        let env = world_one_obstacle();
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0, 5.0, 5.0]);
        assert_eq!(
            env.extract_robot_state(&z),
            DVector::from_vec(vec![1.0, 2.0, 3.0])
        );
        let u = DVector::from_vec(vec![0.3, 0.1]);
        let next = env.step(&z, &u, &DVector::zeros(5)).unwrap();
        let direct = env
            .robot
            .step(&env.extract_robot_state(&z), &u, &DVector::zeros(3))
            .unwrap();
        assert_eq!(env.extract_robot_state(&next), direct);
    }

    #[test]
    fn full_state_sensor_is_identity() {
        let env = world_one_obstacle();
        let sensor = SensorModel::full_state();
        let z = DVector::from_vec(vec![1.0, 2.0, 0.1, 5.0, 5.0]);
        let y = sensor.measure(&env, &z, &DVector::zeros(5)).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn range_bearing_345_triangle() {
        let env = world_one_obstacle();
        let sensor = SensorModel::range_bearing((0.0, 0.0), 0.01);
        let z = DVector::from_vec(vec![3.0, 4.0, 0.0, 5.0, 5.0]);
        let y = sensor.measure(&env, &z, &DVector::zeros(4)).unwrap();
        assert_abs_diff_eq!(y[0], 5.0, epsilon = 1e-15);
    }

    #[test]
    fn range_bearing_bearing_term() {
        let env = world_one_obstacle();
        let sensor = SensorModel::range_bearing((0.0, 0.0), 0.01);
        let z = DVector::from_vec(vec![3.0, 4.0, 0.1, 5.0, 5.0]);
        let y = sensor.measure(&env, &z, &DVector::zeros(4)).unwrap();
        assert_abs_diff_eq!(y[1], 4f64.atan2(3.0) - 0.1, epsilon = 1e-15);
    }

    #[test]
    fn range_bearing_at_landmark_errors() {
        let env = world_one_obstacle();
        let sensor = SensorModel::range_bearing((3.0, 4.0), 0.01);
        let z = DVector::from_vec(vec![3.0, 4.0, 0.0, 5.0, 5.0]);
        assert!(sensor.measure(&env, &z, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn noise_model_rejects_indefinite_joint() {
        // scalar: Sigma_w=1, Sigma_v=1, M=2 -> Schur complement -3 < 0
        let result = NoiseModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            NoiseFamily::Gaussian,
        );
        assert!(result.is_err());
    }

    #[test]
    fn noise_model_accepts_valid_rank_one() {
        let model = NoiseModel::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        assert_eq!(model.joint_cov().nrows(), 2);
    }

    #[test]
    fn noise_model_rejects_rank_two_cross_corr() {
        let sw = DMatrix::identity(2, 2) * 10.0;
        let sv = DMatrix::identity(2, 2) * 10.0;
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.1]);
        assert!(NoiseModel::new(sw, sv, m, NoiseFamily::Gaussian).is_err());
    }

    #[test]
    fn polytope_rejects_zero_row() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(Polytope::new(a, b).is_err());
    }
}
