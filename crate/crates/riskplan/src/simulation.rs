//! Noise sampling, closed-loop reference tracking, and Monte-Carlo campaigns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::nmpc_solve;
use crate::env_model::NoiseFamily;
use crate::estimation::Ukf;
use crate::linalg::cholesky_jittered;
use crate::risk::segment_intersects;
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Zero-mean draw with covariance `sigma`.
///
/// The Laplacian family is the exponential scale mixture `w = √E·L·z` with
/// `E ~ Exp(1)`, `z` standard normal, and `L` the Cholesky factor of `sigma`;
/// since `E[E] = 1` the covariance of `w` is exactly `sigma`.
pub fn sample_noise(
    family: NoiseFamily,
    sigma: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let n = sigma.nrows();
    if sigma.iter().all(|&s| s == 0.0) {
        return Ok(DVector::zeros(n));
    }
    let l = cholesky_jittered(sigma, "noise covariance")?;
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    let colored = l * z;
    match family {
        NoiseFamily::Gaussian => Ok(colored),
        NoiseFamily::Laplacian => {
            let e: f64 = Exp1.sample(rng);
            Ok(colored * e.sqrt())
        }
    }
}

/// Reference trajectory emitted by the planner: one robot state per step and
/// the input applied to leave it (the last input row is zero-padded).
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Reference {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialResult {
    pub collided: bool,
    pub reached_goal: bool,
    pub left_environment: bool,
    pub steps: usize,
    /// Wall-clock time; excluded from artifacts so identical runs serialize
    /// identically.
    #[serde(skip)]
    pub runtime_seconds: f64,
    /// True robot states, one per simulated step (including the initial one).
    pub path: Vec<Vec<f64>>,
    /// UKF robot-state estimates aligned with `path`.
    pub estimates: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Present when the solver or filter failed mid-trial.
    pub diagnostic: Option<String>,
}

/// Closed-loop tracking of a planned reference under fresh noise draws.
///
/// The true environmental state starts from a draw of the initial belief, the
/// tracking NMPC chases the closest not-yet-captured waypoint (capture radius
/// = the steering tolerance), and the UKF consumes noisy measurements. The
/// trial ends at the first collision, on goal entry, or after `t_max` steps.
pub fn track(reference: &Reference, scenario: &Scenario, rng: &mut ChaCha8Rng) -> TrialResult {
    track_impl(reference, scenario, rng, false)
}

/// Deterministic replay: every noise draw is zero and the true initial state
/// equals the prior mean.
pub fn track_deterministic(reference: &Reference, scenario: &Scenario) -> TrialResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    track_impl(reference, scenario, &mut rng, true)
}

fn track_impl(
    reference: &Reference,
    scenario: &Scenario,
    rng: &mut ChaCha8Rng,
    zero_noise: bool,
) -> TrialResult {
    let start = std::time::Instant::now();
    let mut result = TrialResult {
        collided: false,
        reached_goal: false,
        left_environment: false,
        steps: 0,
        runtime_seconds: 0.0,
        path: Vec::new(),
        estimates: Vec::new(),
        inputs: Vec::new(),
        diagnostic: None,
    };
    if reference.is_empty() {
        result.diagnostic = Some("empty reference".into());
        return result;
    }

    let env = &scenario.env;
    let n = env.robot.state_dim();
    let n_z = env.n_z();
    let family = scenario.noise_family;
    let ukf = Ukf::new(env, &scenario.sensor, &scenario.decorr, scenario.ut);

    let mut belief = scenario.root_belief();
    let mut truth = if zero_noise {
        belief.mean.clone()
    } else {
        match sample_noise(family, &belief.cov, rng) {
            Ok(w0) => &belief.mean + w0,
            Err(e) => {
                result.diagnostic = Some(format!("initial draw: {e}"));
                return result;
            }
        }
    };

    result.path.push(truth.rows(0, n).iter().copied().collect());
    result
        .estimates
        .push(belief.mean.rows(0, n).iter().copied().collect());

    let mut wp = 0usize;
    let mut warm = None;
    let last = reference.len() - 1;
    for _ in 0..scenario.t_max {
        // Advance past every waypoint already captured by the estimate.
        let est_pos = belief.mean.rows(0, 2).into_owned();
        while wp < last && (&est_pos - reference.states[wp].rows(0, 2)).norm() <= scenario.tracking_eps
        {
            wp += 1;
        }
        let target = &reference.states[wp];

        let seq = match nmpc_solve(
            &env.extract_robot_state(&belief.mean),
            target,
            &scenario.tracking_nmpc,
            &env.robot,
            warm.as_ref(),
        ) {
            Ok(s) => s,
            Err(e) => {
                result.diagnostic = Some(format!("tracking solver: {e}"));
                break;
            }
        };
        let u = seq.inputs[0].clone();
        warm = Some(seq);

        let w = if zero_noise {
            DVector::zeros(n_z)
        } else {
            match sample_noise(family, &scenario.noise.process_cov, rng) {
                Ok(w) => w,
                Err(e) => {
                    result.diagnostic = Some(format!("process draw: {e}"));
                    break;
                }
            }
        };
        let prev_pos = truth.rows(0, 2).into_owned();
        truth = match env.step(&truth, &u, &w) {
            Ok(z) => z,
            Err(e) => {
                result.diagnostic = Some(format!("dynamics: {e}"));
                break;
            }
        };
        let p = scenario.sensor.output_dim(env);
        let v = if zero_noise {
            DVector::zeros(p)
        } else {
            match sample_noise(family, &scenario.noise.sensor_cov, rng) {
                Ok(v) => v,
                Err(e) => {
                    result.diagnostic = Some(format!("sensor draw: {e}"));
                    break;
                }
            }
        };
        let step_result = scenario
            .sensor
            .measure(env, &truth, &v)
            .and_then(|y| ukf.step(&belief, &u, &y));
        belief = match step_result {
            Ok(b) => b,
            Err(e) => {
                result.diagnostic = Some(format!("filter: {e}"));
                break;
            }
        };

        result.steps += 1;
        result.path.push(truth.rows(0, n).iter().copied().collect());
        result
            .estimates
            .push(belief.mean.rows(0, n).iter().copied().collect());
        result.inputs.push(u.iter().copied().collect());

        // obstacle regions follow the *current* true centroid states: the
        // process noise makes uncertain obstacles drift over the trial
        let pos = truth.rows(0, 2).into_owned();
        if env
            .obstacle_regions(&truth)
            .iter()
            .any(|r| r.contains(&pos) || segment_intersects(&prev_pos, &pos, r))
        {
            result.collided = true;
            break;
        }
        if !scenario.environment.contains(&pos) {
            result.left_environment = true;
        }
        if scenario.goal.contains(&pos) {
            result.reached_goal = true;
            break;
        }
    }

    result.runtime_seconds = start.elapsed().as_secs_f64();
    result
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McSummary {
    pub n_trials: usize,
    pub base_seed: u64,
    pub collisions: usize,
    pub goal_reached: usize,
    pub environment_violations: usize,
    pub mean_runtime_seconds: f64,
    pub trials: Vec<TrialResult>,
}

/// Independent tracking trials with per-trial seed `base_seed + index`.
/// Results are deterministic given the seed and independent of scheduling.
pub fn monte_carlo(
    scenario: &Scenario,
    reference: &Reference,
    n_trials: usize,
    base_seed: u64,
) -> Result<McSummary> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let trials: Vec<TrialResult> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            track(reference, scenario, &mut rng)
        })
        .collect();
    let collisions = trials.iter().filter(|t| t.collided).count();
    let goal_reached = trials.iter().filter(|t| t.reached_goal).count();
    let environment_violations = trials.iter().filter(|t| t.left_environment).count();
    let mean_runtime_seconds =
        trials.iter().map(|t| t.runtime_seconds).sum::<f64>() / n_trials as f64;
    Ok(McSummary {
        n_trials,
        base_seed,
        collisions,
        goal_reached,
        environment_violations,
        mean_runtime_seconds,
        trials,
    })
}
