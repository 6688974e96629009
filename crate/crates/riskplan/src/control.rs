//! Multiple-shooting nonlinear MPC used as the steering law, plus the
//! closed-loop Steer rollout coupling the controller with the filter.
//!
//! The transcription keeps states and inputs as decision variables linked by
//! dynamics defect penalties. Defects are driven below tolerance by quadratic
//! penalty escalation; each penalty subproblem is solved with box-projected
//! spectral quasi-Newton (Barzilai-Borwein) steps and Armijo backtracking.
//! Only the input variables are box constrained, so the projection is exact.

use nalgebra::{DMatrix, DVector};

use crate::env_model::{EnvironmentModel, RobotModel, SensorModel};
use crate::estimation::{BeliefState, Ukf};
use crate::linalg::wrap_angle;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub opt_tolerance: f64,
    pub defect_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            opt_tolerance: 1e-5,
            defect_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NmpcConfig {
    /// Prediction horizon N (steps).
    pub horizon: usize,
    pub state_penalty: DMatrix<f64>,
    pub input_penalty: DMatrix<f64>,
    pub terminal_penalty: DMatrix<f64>,
    pub solver: SolverConfig,
}

impl NmpcConfig {
    pub fn new(
        horizon: usize,
        state_penalty: DMatrix<f64>,
        input_penalty: DMatrix<f64>,
        terminal_penalty: DMatrix<f64>,
        solver: SolverConfig,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("NMPC horizon must be >= 1"));
        }
        Ok(Self {
            horizon,
            state_penalty,
            input_penalty,
            terminal_penalty,
            solver,
        })
    }
}

/// Locally optimal input sequence with its shooting states.
#[derive(Clone, Debug)]
pub struct ControlSequence {
    pub inputs: Vec<DVector<f64>>,
    pub predicted_states: Vec<DVector<f64>>,
    pub objective: f64,
    pub converged: bool,
}

/// Tracking error with the heading component wrapped to (−π, π].
pub fn tracking_error(x: &DVector<f64>, target: &DVector<f64>) -> DVector<f64> {
    let mut e = x - target;
    e[2] = wrap_angle(e[2]);
    e
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// Noiseless Euler step without heading wrap; the solver needs a smooth map.
fn step_smooth(model: &RobotModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    x + model.drift(x, u) * model.dt
}

struct Transcription<'a> {
    model: &'a RobotModel,
    cfg: &'a NmpcConfig,
    x0: DVector<f64>,
    target: DVector<f64>,
    n: usize,
    m: usize,
}

impl<'a> Transcription<'a> {
    fn dim(&self) -> usize {
        self.cfg.horizon * (self.n + self.m)
    }

    fn input(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(k * self.m, self.m).into_owned()
    }

    /// State x_{k} for k in 1..=N (x_0 is fixed).
    fn state(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        let base = self.cfg.horizon * self.m;
        z.rows(base + (k - 1) * self.n, self.n).into_owned()
    }

    fn objective(&self, z: &DVector<f64>, mu: f64) -> f64 {
        let nsteps = self.cfg.horizon;
        let mut cost = 0.0;
        let mut prev = self.x0.clone();
        for k in 0..nsteps {
            let u = self.input(z, k);
            let e = tracking_error(&prev, &self.target);
            cost += quad(&self.cfg.state_penalty, &e) + quad(&self.cfg.input_penalty, &u);
            let xk1 = self.state(z, k + 1);
            let defect = &xk1 - step_smooth(self.model, &prev, &u);
            cost += mu * defect.norm_squared();
            prev = xk1;
        }
        let e_n = tracking_error(&prev, &self.target);
        cost + quad(&self.cfg.terminal_penalty, &e_n)
    }

    fn gradient(&self, z: &DVector<f64>, mu: f64) -> DVector<f64> {
        let nsteps = self.cfg.horizon;
        let mut grad = DVector::zeros(self.dim());
        let base = nsteps * self.m;
        // defect_k = x_{k+1} - f(x_k, u_k), x_0 fixed
        let mut states = Vec::with_capacity(nsteps + 1);
        states.push(self.x0.clone());
        for k in 1..=nsteps {
            states.push(self.state(z, k));
        }
        for k in 0..nsteps {
            let u = self.input(z, k);
            let defect = &states[k + 1] - step_smooth(self.model, &states[k], &u);
            let ju = self.model.step_jacobian_u(&states[k], &u);
            let gu = &self.cfg.input_penalty * &u * 2.0 - ju.transpose() * &defect * (2.0 * mu);
            grad.rows_mut(k * self.m, self.m).copy_from(&gu);

            // contribution to x_{k+1}
            let mut gx = &defect * (2.0 * mu);
            if k + 1 < nsteps {
                let e = tracking_error(&states[k + 1], &self.target);
                gx += &self.cfg.state_penalty * e * 2.0;
                let u_next = self.input(z, k + 1);
                let defect_next =
                    &states[k + 2] - step_smooth(self.model, &states[k + 1], &u_next);
                let jx = self.model.step_jacobian_x(&states[k + 1], &u_next);
                gx -= jx.transpose() * defect_next * (2.0 * mu);
            } else {
                let e = tracking_error(&states[k + 1], &self.target);
                gx += &self.cfg.terminal_penalty * e * 2.0;
            }
            grad.rows_mut(base + k * self.n, self.n).copy_from(&gx);
        }
        grad
    }

    fn max_defect(&self, z: &DVector<f64>) -> f64 {
        let mut prev = self.x0.clone();
        let mut worst: f64 = 0.0;
        for k in 0..self.cfg.horizon {
            let u = self.input(z, k);
            let xk1 = self.state(z, k + 1);
            let defect = &xk1 - step_smooth(self.model, &prev, &u);
            worst = worst.max(defect.amax());
            prev = xk1;
        }
        worst
    }

    /// Project the input block onto the box bounds; states are free.
    fn project(&self, z: &mut DVector<f64>) {
        for k in 0..self.cfg.horizon {
            for j in 0..self.m {
                let idx = k * self.m + j;
                z[idx] = z[idx].clamp(self.model.input_lower[j], self.model.input_upper[j]);
            }
        }
    }
}

/// Exact cost and adjoint gradient of an input sequence under single-shooting
/// (states are the exact rollout, so there is no defect bias).
fn shooting_cost_grad(tr: &Transcription<'_>, u_flat: &DVector<f64>) -> (f64, DVector<f64>) {
    let nsteps = tr.cfg.horizon;
    let mut states = Vec::with_capacity(nsteps + 1);
    states.push(tr.x0.clone());
    let mut cost = 0.0;
    for k in 0..nsteps {
        let u = u_flat.rows(k * tr.m, tr.m).into_owned();
        let e = tracking_error(&states[k], &tr.target);
        cost += quad(&tr.cfg.state_penalty, &e) + quad(&tr.cfg.input_penalty, &u);
        states.push(step_smooth(tr.model, &states[k], &u));
    }
    let e_n = tracking_error(&states[nsteps], &tr.target);
    cost += quad(&tr.cfg.terminal_penalty, &e_n);

    let mut grad = DVector::zeros(nsteps * tr.m);
    let mut lambda = &tr.cfg.terminal_penalty * e_n * 2.0;
    for k in (0..nsteps).rev() {
        let u = u_flat.rows(k * tr.m, tr.m).into_owned();
        let bu = tr.model.step_jacobian_u(&states[k], &u);
        grad.rows_mut(k * tr.m, tr.m)
            .copy_from(&(&tr.cfg.input_penalty * &u * 2.0 + bu.transpose() * &lambda));
        let ax = tr.model.step_jacobian_x(&states[k], &u);
        let e = tracking_error(&states[k], &tr.target);
        lambda = &tr.cfg.state_penalty * e * 2.0 + ax.transpose() * lambda;
    }
    (cost, grad)
}

/// Projected Barzilai-Borwein descent on the inputs alone. Returns true when
/// the projected-gradient stationarity measure falls below `tol`.
fn polish_shooting(
    tr: &Transcription<'_>,
    u_flat: &mut DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> bool {
    let project = |u: &mut DVector<f64>| {
        for k in 0..tr.cfg.horizon {
            for j in 0..tr.m {
                let idx = k * tr.m + j;
                u[idx] = u[idx].clamp(tr.model.input_lower[j], tr.model.input_upper[j]);
            }
        }
    };
    project(u_flat);
    let (mut f, mut g) = shooting_cost_grad(tr, u_flat);
    let mut step = 1.0 / g.norm().max(1.0);
    for _ in 0..max_iters {
        let mut trial = u_flat.clone() - &g;
        project(&mut trial);
        if (&trial - &*u_flat).amax() <= tol {
            return true;
        }
        let mut alpha = step.clamp(1e-12, 1e4);
        let mut accepted = false;
        for _ in 0..50 {
            let mut cand = u_flat.clone() - &g * alpha;
            project(&mut cand);
            let diff = &cand - &*u_flat;
            let (f_cand, g_cand) = shooting_cost_grad(tr, &cand);
            if f_cand <= f + 1e-4 * g.dot(&diff) {
                let y = &g_cand - &g;
                let sy = diff.dot(&y);
                step = if sy > 1e-16 { diff.norm_squared() / sy } else { alpha * 2.0 };
                let improvement = f - f_cand;
                *u_flat = cand;
                f = f_cand;
                g = g_cand;
                accepted = improvement > 1e-10 * (1.0 + f.abs());
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // stalled line search or negligible improvement: stationary
            return true;
        }
    }
    false
}

/// Spectral projected gradient on one penalty subproblem. Monotone Armijo
/// line search keeps accepted objectives nonincreasing.
fn solve_subproblem(
    tr: &Transcription<'_>,
    z: &mut DVector<f64>,
    mu: f64,
    max_iters: usize,
    tol: f64,
) -> bool {
    tr.project(z);
    let mut f = tr.objective(z, mu);
    let mut g = tr.gradient(z, mu);
    let mut step = 1.0 / g.norm().max(1.0);
    for _ in 0..max_iters {
        // projected-gradient stationarity measure
        let mut trial = z.clone() - &g;
        tr.project(&mut trial);
        let stationarity = (&trial - &*z).amax();
        if stationarity <= tol {
            return true;
        }
        let mut alpha = step.clamp(1e-10, 1e4);
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = z.clone() - &g * alpha;
            tr.project(&mut cand);
            let diff = &cand - &*z;
            let f_cand = tr.objective(&cand, mu);
            if f_cand <= f + 1e-4 * g.dot(&diff) {
                let g_cand = tr.gradient(&cand, mu);
                // Barzilai-Borwein step for the next iteration
                let y = &g_cand - &g;
                let sy = diff.dot(&y);
                step = if sy > 1e-16 { diff.norm_squared() / sy } else { alpha * 2.0 };
                let improvement = f - f_cand;
                *z = cand;
                f = f_cand;
                g = g_cand;
                accepted = improvement > 1e-10 * (1.0 + f.abs());
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return true; // line search stalled: locally stationary
        }
    }
    false
}

/// Solve the steering NMPC from the current estimate toward a target state.
///
/// Returns the best iterate flagged non-converged if the iteration budget is
/// exhausted before the tolerances are met; no error is raised for targets
/// unreachable within the horizon.
pub fn nmpc_solve(
    x_hat: &DVector<f64>,
    target: &DVector<f64>,
    cfg: &NmpcConfig,
    model: &RobotModel,
    warm_start: Option<&ControlSequence>,
) -> Result<ControlSequence> {
    let n = model.state_dim();
    let m = model.input_dim();
    if x_hat.len() != n || target.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x_hat.len().max(target.len()),
            context: "nmpc state",
        });
    }
    let tr = Transcription {
        model,
        cfg,
        x0: x_hat.clone(),
        target: target.clone(),
        n,
        m,
    };
    let nsteps = cfg.horizon;
    let mut z = DVector::zeros(tr.dim());

    // initial guess: shifted warm start, or a zero-input rollout
    match warm_start {
        Some(prev) if prev.inputs.len() == nsteps => {
            for k in 0..nsteps {
                let src = if k + 1 < nsteps { k + 1 } else { nsteps - 1 };
                z.rows_mut(k * m, m).copy_from(&prev.inputs[src]);
            }
        }
        _ => {}
    }
    let mut prev_state = x_hat.clone();
    for k in 0..nsteps {
        let u = tr.input(&z, k);
        prev_state = step_smooth(model, &prev_state, &u);
        z.rows_mut(nsteps * m + k * n, n).copy_from(&prev_state);
    }

    // Coarse multiple-shooting phase: drive the defects down with a modest
    // iteration budget; the single-shooting polish below does the fine work.
    let mut mu = 10.0;
    let mut converged = false;
    // A shifted warm start is already near-feasible; the single-shooting
    // polish alone finishes it. Cold starts get the full coarse phase.
    if warm_start.is_none() {
        let coarse_iters = (cfg.solver.max_iters / 5).max(20);
        for _ in 0..8 {
            let stationary =
                solve_subproblem(&tr, &mut z, mu, coarse_iters, cfg.solver.opt_tolerance);
            if tr.max_defect(&z) <= cfg.solver.defect_tolerance {
                converged = stationary;
                break;
            }
            mu *= 10.0;
        }
    }
    // Single-shooting polish: descend on the inputs with exact rollouts.
    // This removes the quadratic-penalty bias and zeroes the defects; monotone
    // descent from the penalty solution cannot worsen its true cost.
    let mut u_flat = DVector::zeros(nsteps * m);
    for k in 0..nsteps {
        u_flat.rows_mut(k * m, m).copy_from(&tr.input(&z, k));
    }
    let stationary = polish_shooting(&tr, &mut u_flat, cfg.solver.max_iters, cfg.solver.opt_tolerance);
    converged = converged || stationary;

    let inputs: Vec<DVector<f64>> = (0..nsteps)
        .map(|k| u_flat.rows(k * m, m).into_owned())
        .collect();
    let mut predicted_states = Vec::with_capacity(nsteps + 1);
    predicted_states.push(x_hat.clone());
    for k in 0..nsteps {
        predicted_states.push(step_smooth(model, &predicted_states[k], &inputs[k]));
    }
    let mut objective = 0.0;
    for k in 0..nsteps {
        let e = tracking_error(&predicted_states[k], target);
        objective += quad(&cfg.state_penalty, &e) + quad(&cfg.input_penalty, &inputs[k]);
    }
    objective += quad(
        &cfg.terminal_penalty,
        &tracking_error(&predicted_states[nsteps], target),
    );
    Ok(ControlSequence {
        inputs,
        predicted_states,
        objective,
        converged,
    })
}

/// Paired mean/covariance sequences with the applied inputs and segment cost.
#[derive(Clone, Debug)]
pub struct TrajectorySegment {
    /// Belief means, one per step including the start (len = inputs + 1).
    pub means: Vec<DVector<f64>>,
    /// Belief covariances, aligned with `means`.
    pub covs: Vec<DMatrix<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Accumulated stage cost Σ(‖e‖²_Q + ‖u‖²_R).
    pub cost: f64,
    /// Terminal position error within the steering capture radius.
    pub reached: bool,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SteerConfig {
    /// Maximum closed-loop steering steps N_max_steer.
    pub max_steps: usize,
    /// Position capture radius ε_steer.
    pub eps: f64,
    pub nmpc: NmpcConfig,
}

/// Noise realizations for tracking-mode steering, one pair per step.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub process: Vec<DVector<f64>>,
    pub sensor: Vec<DVector<f64>>,
}

pub enum SteerMode<'a> {
    /// Covariance propagation with zero-innovation filter steps.
    Planning,
    /// True-state simulation with explicit noise realizations; the tuple
    /// carries the true initial environmental state.
    Tracking {
        true_state: DVector<f64>,
        draws: &'a NoiseDraws,
    },
}

/// Closed-loop steering from a belief toward a target robot state.
///
/// Repeatedly solves the NMPC from the current robot-mean estimate, applies
/// the first input, and advances the belief (planning: zero-innovation filter
/// step; tracking: true dynamics + measurement + filter update). Stops when
/// the position error drops below `cfg.eps` or after `cfg.max_steps` steps.
pub fn steer(
    belief: &BeliefState,
    target: &DVector<f64>,
    cfg: &SteerConfig,
    env: &EnvironmentModel,
    sensor: &SensorModel,
    ukf: &Ukf<'_>,
    mode: SteerMode<'_>,
) -> Result<TrajectorySegment> {
    let n = env.robot.state_dim();
    let mut belief = belief.clone();
    let mut means = vec![belief.mean.clone()];
    let mut covs = vec![belief.cov.clone()];
    let mut inputs = Vec::new();
    let mut cost = 0.0;
    let mut warm: Option<ControlSequence> = None;
    let mut tracking_state = match &mode {
        SteerMode::Tracking { true_state, .. } => Some(true_state.clone()),
        SteerMode::Planning => None,
    };

    let pos_err = |mean: &DVector<f64>| -> f64 {
        ((mean[0] - target[0]).powi(2) + (mean[1] - target[1]).powi(2)).sqrt()
    };

    let mut reached = pos_err(&belief.mean) <= cfg.eps;
    for step_idx in 0..cfg.max_steps {
        if reached {
            break;
        }
        let x_hat = belief.mean.rows(0, n).into_owned();
        let solution = nmpc_solve(&x_hat, target, &cfg.nmpc, &env.robot, warm.as_ref())?;
        let u = env.robot.clamp_input(&solution.inputs[0]);
        let e = tracking_error(&x_hat, target);
        cost += quad(&cfg.nmpc.state_penalty, &e) + quad(&cfg.nmpc.input_penalty, &u);

        belief = match (&mode, &mut tracking_state) {
            (SteerMode::Planning, _) => ukf.predict_planning(&belief, &u)?,
            (SteerMode::Tracking { draws, .. }, Some(true_z)) => {
                let w = draws.process.get(step_idx).cloned().ok_or_else(|| {
                    Error::invalid("tracking steer ran out of process noise draws")
                })?;
                let v = draws.sensor.get(step_idx).cloned().ok_or_else(|| {
                    Error::invalid("tracking steer ran out of sensor noise draws")
                })?;
                *true_z = env.step(true_z, &u, &w)?;
                let y = sensor.measure(env, true_z, &v)?;
                ukf.step(&belief, &u, &y)?
            }
            _ => unreachable!(),
        };
        inputs.push(u);
        means.push(belief.mean.clone());
        covs.push(belief.cov.clone());
        warm = Some(solution);
        reached = pos_err(&belief.mean) <= cfg.eps;
    }

    Ok(TrajectorySegment {
        means,
        covs,
        inputs,
        cost,
        reached,
    })
}
