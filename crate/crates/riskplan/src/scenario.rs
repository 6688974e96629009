//! Scenario configuration: parsing, validation, and assembly of the runtime
//! models shared by the planner, tracker, and CLI.
//!
//! The on-disk format is TOML with units spelled out in field names; parse →
//! serialize → parse round-trips to an identical validated configuration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{NmpcConfig, SolverConfig, SteerConfig};
use crate::env_model::{
    EnvironmentModel, NoiseFamily, NoiseModel, Obstacle, Polytope, RobotKind, RobotModel,
    SensorModel,
};
use crate::estimation::{decorrelate, BeliefState, DecorrelatedModel, UtParams};
use crate::planner::{MetricKind, MetricParams, PlannerContext};
use crate::risk::{allocate_risk, RiskAllocation, RiskMode};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub robot: RobotSection,
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub obstacle: Vec<ObstacleSection>,
    pub start: StartSection,
    pub goal: GoalSection,
    pub sensor: SensorSection,
    pub noise: NoiseSection,
    pub nmpc: NmpcSection,
    pub tracking: TrackingSection,
    pub steer: SteerSection,
    pub risk: RiskSection,
    pub planner: PlannerSection,
    #[serde(default)]
    pub ut: UtSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    pub kind: RobotKind,
    pub dt_seconds: f64,
    #[serde(default)]
    pub wheelbase_m: f64,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    /// [xmin, xmax, ymin, ymax]
    pub bounds_xy: [f64; 4],
    #[serde(default)]
    pub probabilistic_bounds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub center_xy: [f64; 2],
    pub half_extents_xy: [f64; 2],
    /// Standard deviation of the nominal facet points (isotropic).
    #[serde(default)]
    pub facet_point_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StartSection {
    /// Robot block of the initial mean; obstacle centroids are appended.
    pub robot_mean: Vec<f64>,
    pub robot_cov_diag: Vec<f64>,
    /// Per-coordinate initial variance of every obstacle block.
    #[serde(default)]
    pub obstacle_cov: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GoalSection {
    /// [xmin, xmax, ymin, ymax]
    pub rect_xy: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SensorSection {
    pub kind: SensorKindTag,
    #[serde(default)]
    pub landmark_xy: [f64; 2],
    #[serde(default)]
    pub distortion_theta_star_rad: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SensorKindTag {
    FullState,
    RangeBearing,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub family: NoiseFamily,
    pub process_cov_diag: Vec<f64>,
    pub sensor_cov_diag: Vec<f64>,
    /// Optional rank-one cross correlation M = u vᵀ.
    #[serde(default)]
    pub cross_corr_process: Vec<f64>,
    #[serde(default)]
    pub cross_corr_sensor: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NmpcSection {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub qt_scale: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_opt_tol")]
    pub opt_tolerance: f64,
    #[serde(default = "default_defect_tol")]
    pub defect_tolerance: f64,
}

fn default_max_iters() -> usize {
    100
}
fn default_opt_tol() -> f64 {
    1e-6
}
fn default_defect_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub qt_scale: f64,
    #[serde(default = "default_nll")]
    pub horizon: usize,
}

fn default_nll() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SteerSection {
    /// Maximum closed-loop steering steps per edge.
    pub horizon: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RiskSection {
    pub beta: f64,
    pub t_max: usize,
    pub mode: RiskModeTag,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RiskModeTag {
    Dr,
    Gaussian,
}

impl From<RiskModeTag> for RiskMode {
    fn from(tag: RiskModeTag) -> Self {
        match tag {
            RiskModeTag::Dr => RiskMode::Dr,
            RiskModeTag::Gaussian => RiskMode::Gaussian,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub metric: MetricKind,
    #[serde(default = "default_k_phi")]
    pub k_phi: f64,
    #[serde(default = "default_k_delta")]
    pub k_delta: f64,
    pub gamma: f64,
    pub mu_max: f64,
    #[serde(default)]
    pub sample_velocity_max: f64,
}

fn default_k_phi() -> f64 {
    1.2
}
fn default_k_delta() -> f64 {
    3.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct UtSection {
    pub alpha: f64,
    pub beta: f64,
    /// Defaults to 3 − n_z when absent.
    pub kappa: Option<f64>,
}

impl Default for UtSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: None,
        }
    }
}

/// Fully validated runtime scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub env: EnvironmentModel,
    pub sensor: SensorModel,
    pub noise: NoiseModel,
    pub decorr: DecorrelatedModel,
    pub ut: UtParams,
    /// Planning-side steering configuration (planner NMPC inside).
    pub steer_cfg: SteerConfig,
    pub tracking_nmpc: NmpcConfig,
    pub tracking_eps: f64,
    pub environment: Polytope,
    pub sample_bounds: (f64, f64, f64, f64),
    pub goal: Polytope,
    pub beta: f64,
    pub t_max: usize,
    pub mode: RiskMode,
    pub probabilistic_env: bool,
    pub metric: MetricKind,
    pub metric_params: MetricParams,
    pub sample_velocity_max: f64,
    pub start_mean: DVector<f64>,
    pub start_cov: DMatrix<f64>,
    pub noise_family: NoiseFamily,
}

impl Scenario {
    pub fn n_z(&self) -> usize {
        self.env.n_z()
    }

    pub fn allocation(&self) -> Result<RiskAllocation> {
        let facet_counts: Vec<usize> =
            self.env.obstacles.iter().map(|o| o.shape.n_facets()).collect();
        let n_env = if self.probabilistic_env {
            self.environment.n_facets()
        } else {
            0
        };
        allocate_risk(self.beta, self.t_max, n_env, &facet_counts)
    }

    pub fn root_belief(&self) -> BeliefState {
        BeliefState::new(self.start_mean.clone(), self.start_cov.clone())
    }

    pub fn planner_context<'a>(&'a self, allocation: &'a RiskAllocation) -> PlannerContext<'a> {
        PlannerContext {
            env: &self.env,
            sensor: &self.sensor,
            decorr: &self.decorr,
            ut: self.ut,
            steer_cfg: &self.steer_cfg,
            allocation,
            mode: self.mode,
            probabilistic_env: self.probabilistic_env,
            environment: &self.environment,
            sample_bounds: self.sample_bounds,
            goal: &self.goal,
            metric: self.metric,
            metric_params: self.metric_params,
            sample_velocity_max: self.sample_velocity_max,
        }
    }

    /// Override both noise covariances with scale·I (risk sweep support).
    pub fn with_noise_scale(mut self, scale: f64) -> Result<Self> {
        let n_z = self.noise.process_cov.nrows();
        let p = self.noise.sensor_cov.nrows();
        self.noise = NoiseModel::new(
            DMatrix::identity(n_z, n_z) * scale,
            DMatrix::identity(p, p) * scale,
            self.noise.cross_corr.clone(),
            self.noise.family,
        )?;
        self.decorr = decorrelate(&self.noise)?;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: RiskMode) -> Self {
        self.mode = mode;
        self
    }
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(values))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialization")
    }

    pub fn validate(&self) -> Result<Scenario> {
        let robot = RobotModel::new(
            self.robot.kind,
            self.robot.dt_seconds,
            self.robot.wheelbase_m,
            DVector::from_row_slice(&self.robot.input_lower),
            DVector::from_row_slice(&self.robot.input_upper),
        )?;
        let n = robot.state_dim();

        let obstacles: Vec<Obstacle> = self
            .obstacle
            .iter()
            .map(|o| {
                let mut ob = Obstacle::static_rect(
                    o.center_xy[0],
                    o.center_xy[1],
                    o.half_extents_xy[0],
                    o.half_extents_xy[1],
                );
                if o.facet_point_std > 0.0 {
                    let cov = DMatrix::identity(2, 2) * o.facet_point_std * o.facet_point_std;
                    ob.facet_point_cov = vec![cov; ob.shape.n_facets()];
                }
                ob
            })
            .collect();
        let env = EnvironmentModel::new(robot, obstacles);
        let n_z = env.n_z();

        let [xmin, xmax, ymin, ymax] = self.environment.bounds_xy;
        if xmin >= xmax || ymin >= ymax {
            return Err(Error::config("environment.bounds_xy", "degenerate bounds"));
        }
        let environment = Polytope::rect(xmin, xmax, ymin, ymax);

        let [gxmin, gxmax, gymin, gymax] = self.goal.rect_xy;
        if gxmin >= gxmax || gymin >= gymax {
            return Err(Error::config("goal.rect_xy", "degenerate goal region"));
        }
        if gxmin < xmin || gxmax > xmax || gymin < ymin || gymax > ymax {
            return Err(Error::config(
                "goal.rect_xy",
                "goal region must lie inside the environment bounds",
            ));
        }
        let goal = Polytope::rect(gxmin, gxmax, gymin, gymax);

        if self.start.robot_mean.len() != n {
            return Err(Error::config(
                "start.robot_mean",
                format!("expected {n} entries, got {}", self.start.robot_mean.len()),
            ));
        }
        if self.start.robot_cov_diag.len() != n {
            return Err(Error::config(
                "start.robot_cov_diag",
                format!("expected {n} entries, got {}", self.start.robot_cov_diag.len()),
            ));
        }
        let mut start_mean = DVector::zeros(n_z);
        start_mean
            .rows_mut(0, n)
            .copy_from(&DVector::from_row_slice(&self.start.robot_mean));
        let mut cov_diag = self.start.robot_cov_diag.clone();
        let mut offset = n;
        for obstacle in &env.obstacles {
            let l = obstacle.state_dim();
            start_mean
                .rows_mut(offset, l)
                .copy_from(&obstacle.centroid_state);
            cov_diag.extend(std::iter::repeat(self.start.obstacle_cov).take(l));
            offset += l;
        }
        let start_cov = diag(&cov_diag);

        let sensor = match self.sensor.kind {
            SensorKindTag::FullState => SensorModel::full_state(),
            SensorKindTag::RangeBearing => {
                if env.obstacles.is_empty() {
                    return Err(Error::config(
                        "sensor.kind",
                        "range_bearing sensor requires at least one obstacle",
                    ));
                }
                SensorModel::range_bearing(
                    (self.sensor.landmark_xy[0], self.sensor.landmark_xy[1]),
                    self.sensor.distortion_theta_star_rad,
                )
            }
        };
        let p = sensor.output_dim(&env);

        if self.noise.process_cov_diag.len() != n_z {
            return Err(Error::config(
                "noise.process_cov_diag",
                format!("expected {n_z} entries, got {}", self.noise.process_cov_diag.len()),
            ));
        }
        if self.noise.sensor_cov_diag.len() != p {
            return Err(Error::config(
                "noise.sensor_cov_diag",
                format!("expected {p} entries, got {}", self.noise.sensor_cov_diag.len()),
            ));
        }
        let cross_corr = if self.noise.cross_corr_process.is_empty() {
            DMatrix::zeros(n_z, p)
        } else {
            if self.noise.cross_corr_process.len() != n_z
                || self.noise.cross_corr_sensor.len() != p
            {
                return Err(Error::config(
                    "noise.cross_corr_process",
                    "cross-correlation factor dimensions must match n_z and p",
                ));
            }
            DVector::from_row_slice(&self.noise.cross_corr_process)
                * DVector::from_row_slice(&self.noise.cross_corr_sensor).transpose()
        };
        let noise = NoiseModel::new(
            diag(&self.noise.process_cov_diag),
            diag(&self.noise.sensor_cov_diag),
            cross_corr,
            self.noise.family,
        )?;
        let decorr = decorrelate(&noise)?;

        let ut = UtParams {
            alpha_u: self.ut.alpha,
            beta_u: self.ut.beta,
            kappa: self.ut.kappa.unwrap_or(3.0 - n_z as f64),
        };
        if (n_z as f64 + ut.lambda(n_z)) <= 0.0 {
            return Err(Error::config("ut", "n_z + lambda must be positive"));
        }

        if self.nmpc.q_diag.len() != n || self.nmpc.r_diag.len() != 2 {
            return Err(Error::config(
                "nmpc.q_diag",
                format!("q_diag must have {n} entries and r_diag 2"),
            ));
        }
        let solver = SolverConfig {
            max_iters: self.nmpc.max_iters,
            opt_tolerance: self.nmpc.opt_tolerance,
            defect_tolerance: self.nmpc.defect_tolerance,
        };
        let planner_nmpc = NmpcConfig::new(
            self.nmpc.horizon,
            diag(&self.nmpc.q_diag),
            diag(&self.nmpc.r_diag),
            diag(&self.nmpc.q_diag) * self.nmpc.qt_scale,
            solver.clone(),
        )?;
        if self.tracking.q_diag.len() != n || self.tracking.r_diag.len() != 2 {
            return Err(Error::config(
                "tracking.q_diag",
                format!("q_diag must have {n} entries and r_diag 2"),
            ));
        }
        let tracking_nmpc = NmpcConfig::new(
            self.tracking.horizon,
            diag(&self.tracking.q_diag),
            diag(&self.tracking.r_diag),
            diag(&self.tracking.q_diag) * self.tracking.qt_scale,
            solver,
        )?;

        if self.steer.horizon == 0 || self.steer.eps <= 0.0 {
            return Err(Error::config("steer", "horizon must be >= 1 and eps > 0"));
        }
        let steer_cfg = SteerConfig {
            max_steps: self.steer.horizon,
            eps: self.steer.eps,
            nmpc: planner_nmpc,
        };

        if self.risk.beta <= 0.0 || self.risk.beta > 0.5 {
            return Err(Error::config("risk.beta", "beta must be in (0, 0.5]"));
        }
        if self.planner.gamma <= 0.0 || self.planner.mu_max <= 0.0 {
            return Err(Error::config("planner", "gamma and mu_max must be positive"));
        }
        if env.robot.kind == RobotKind::Bicycle && self.planner.sample_velocity_max <= 0.0 {
            return Err(Error::config(
                "planner.sample_velocity_max",
                "bicycle scenarios must set a positive sampled-velocity bound",
            ));
        }

        let family = noise.family;
        Ok(Scenario {
            env,
            sensor,
            noise,
            decorr,
            ut,
            steer_cfg,
            tracking_nmpc,
            tracking_eps: self.steer.eps,
            environment,
            sample_bounds: (xmin, xmax, ymin, ymax),
            goal,
            beta: self.risk.beta,
            t_max: self.risk.t_max,
            mode: self.risk.mode.into(),
            probabilistic_env: self.environment.probabilistic_bounds,
            metric: self.planner.metric,
            metric_params: MetricParams {
                k_phi: self.planner.k_phi,
                k_delta: self.planner.k_delta,
                gamma: self.planner.gamma,
                mu_max: self.planner.mu_max,
                dimension: 2,
            },
            sample_velocity_max: self.planner.sample_velocity_max,
            start_mean,
            start_cov,
            noise_family: family,
        })
    }
}

pub fn load_scenario(path: &std::path::Path) -> Result<(ScenarioFile, Scenario)> {
    let text = std::fs::read_to_string(path)?;
    let file = ScenarioFile::parse(&text)?;
    let scenario = file.validate()?;
    Ok((file, scenario))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const UNICYCLE_TOML: &str = include_str!("../scenarios/unicycle-10x10.cfg");
    pub(crate) const BICYCLE_TOML: &str = include_str!("../scenarios/bicycle-rangebearing.cfg");

    #[test]
    fn bundled_unicycle_parses_and_validates() {
        let file = ScenarioFile::parse(UNICYCLE_TOML).unwrap();
        let scenario = file.validate().unwrap();
        assert_eq!(scenario.env.robot.kind, RobotKind::Unicycle);
        assert!(scenario.n_z() > 3);
        assert!(scenario.allocation().is_ok());
    }

    #[test]
    fn bundled_bicycle_parses_and_validates() {
        let file = ScenarioFile::parse(BICYCLE_TOML).unwrap();
        let scenario = file.validate().unwrap();
        assert_eq!(scenario.env.robot.kind, RobotKind::Bicycle);
        assert_eq!(scenario.sensor.output_dim(&scenario.env), 4);
    }

    #[test]
    fn config_round_trip_is_identical() {
        let file = ScenarioFile::parse(UNICYCLE_TOML).unwrap();
        let reparsed = ScenarioFile::parse(&file.to_toml()).unwrap();
        assert_eq!(file, reparsed);
    }

    #[test]
    fn missing_field_reports_path() {
        let broken = UNICYCLE_TOML.replace("q_diag", "q_diag_typo");
        let err = ScenarioFile::parse(&broken).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("q_diag"), "diagnostic missing field path: {msg}");
    }
}
