//! Risk allocation, distributionally robust and Gaussian chance-constraint
//! tightening, and the trajectory feasibility check.
//!
//! A plan-level risk budget β is split uniformly over stages by the union
//! bound and proportionally to facet counts over obstacles. Each tightened
//! half-space test holds under the worst-case distribution in the
//! moment-based ambiguity set (factor √((1−α)/α)) or under a Gaussian
//! assumption (normal quantile), the latter being strictly weaker.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::control::TrajectorySegment;
use crate::env_model::{Obstacle, Polytope};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskMode {
    Dr,
    Gaussian,
}

/// Plan risk β decomposed into stage and per-constraint shares.
#[derive(Clone, Debug)]
pub struct RiskAllocation {
    pub plan_risk: f64,
    pub horizon: usize,
    /// α_t = β / (T_max + 1), uniform over stages.
    pub stage_risk: f64,
    /// α_t / n_total.
    pub per_constraint_risk: f64,
    /// α_i = α_t · n_ob_i / n_total, one entry per obstacle.
    pub per_obstacle_risk: Vec<f64>,
    /// α_t · n_env / n_total.
    pub environment_risk: f64,
    pub n_env: usize,
    pub n_total: usize,
}

pub fn allocate_risk(
    beta: f64,
    horizon: usize,
    n_env: usize,
    obstacle_facet_counts: &[usize],
) -> Result<RiskAllocation> {
    if !(0.0..=0.5).contains(&beta) || beta == 0.0 {
        return Err(Error::invalid(format!("beta must be in (0, 0.5], got {beta}")));
    }
    let n_total = n_env + obstacle_facet_counts.iter().sum::<usize>();
    if n_total == 0 {
        return Err(Error::invalid("no constraints to allocate risk over"));
    }
    let stage_risk = beta / (horizon as f64 + 1.0);
    let per_constraint_risk = stage_risk / n_total as f64;
    let per_obstacle_risk = obstacle_facet_counts
        .iter()
        .map(|&n_ob| stage_risk * n_ob as f64 / n_total as f64)
        .collect();
    Ok(RiskAllocation {
        plan_risk: beta,
        horizon,
        stage_risk,
        per_constraint_risk,
        per_obstacle_risk,
        environment_risk: stage_risk * n_env as f64 / n_total as f64,
        n_env,
        n_total,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha <= 0.0 || alpha > 0.5 {
        return Err(Error::invalid(format!("risk must be in (0, 0.5], got {alpha}")));
    }
    Ok(())
}

/// Worst-case tightening factor √((1−α)/α) over the moment ambiguity set.
pub fn dr_tightening_factor(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(((1.0 - alpha) / alpha).sqrt())
}

/// Standard normal quantile at 1−α.
pub fn gaussian_tightening_factor(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.inverse_cdf(1.0 - alpha))
}

pub fn tightening_factor(alpha: f64, mode: RiskMode) -> Result<f64> {
    match mode {
        RiskMode::Dr => dr_tightening_factor(alpha),
        RiskMode::Gaussian => gaussian_tightening_factor(alpha),
    }
}

/// One obstacle facet as a half-space the mean must stay beyond.
#[derive(Clone, Debug)]
pub struct FacetConstraint {
    pub normal: DVector<f64>,
    pub nominal_point: DVector<f64>,
    pub point_cov: DMatrix<f64>,
}

/// Tightened half-space test
/// `aᵀx̂ ≥ aᵀĉ + factor(α)·‖(D + Σ^c)^{1/2} a‖₂`.
pub fn facet_satisfied(
    position: &DVector<f64>,
    position_cov: &DMatrix<f64>,
    facet: &FacetConstraint,
    alpha: f64,
    mode: RiskMode,
) -> Result<bool> {
    let factor = tightening_factor(alpha, mode)?;
    let a = &facet.normal;
    let total_cov = position_cov + &facet.point_cov;
    let spread = (a.transpose() * total_cov * a)[(0, 0)].max(0.0).sqrt();
    Ok(a.dot(position) >= a.dot(&facet.nominal_point) + factor * spread)
}

/// Disjunctive obstacle check: at least one tightened facet must hold with
/// the full per-obstacle risk. Sufficient (conservative) for the disjunctive
/// chance constraint.
pub fn obstacle_feasible(
    position: &DVector<f64>,
    position_cov: &DMatrix<f64>,
    obstacle: &Obstacle,
    centroid_pos: &DVector<f64>,
    alpha_i: f64,
    mode: RiskMode,
) -> Result<bool> {
    for j in 0..obstacle.shape.n_facets() {
        let facet = FacetConstraint {
            normal: obstacle.shape.a.row(j).transpose(),
            nominal_point: obstacle.facet_point(j, centroid_pos),
            point_cov: obstacle.facet_point_cov[j].clone(),
        };
        if facet_satisfied(position, position_cov, &facet, alpha_i, mode)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Environment containment with inward tightening; every row must hold.
/// With `probabilistic = false` this is a plain point-in-polytope test.
pub fn environment_feasible(
    position: &DVector<f64>,
    position_cov: &DMatrix<f64>,
    env: &Polytope,
    alpha_env: f64,
    mode: RiskMode,
    probabilistic: bool,
) -> Result<bool> {
    let rows = env.n_facets();
    let factor = if probabilistic {
        tightening_factor(alpha_env / rows as f64, mode)?
    } else {
        0.0
    };
    for i in 0..rows {
        let a = env.a.row(i).transpose();
        let spread = (a.transpose() * position_cov * &a)[(0, 0)].max(0.0).sqrt();
        if a.dot(position) > env.b[i] - factor * spread {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Closed-segment vs closed-polytope intersection by parametric half-space
/// clipping. Touching counts as intersecting.
pub fn segment_intersects(p0: &DVector<f64>, p1: &DVector<f64>, poly: &Polytope) -> bool {
    let dir = p1 - p0;
    let mut t_enter = 0.0f64;
    let mut t_exit = 1.0f64;
    for i in 0..poly.n_facets() {
        let a = poly.a.row(i).transpose();
        let denom = a.dot(&dir);
        let dist = poly.b[i] - a.dot(p0);
        if denom.abs() < 1e-300 {
            if dist < 0.0 {
                return false; // parallel and outside this half-space
            }
            continue;
        }
        let t = dist / denom;
        if denom > 0.0 {
            t_exit = t_exit.min(t);
        } else {
            t_enter = t_enter.max(t);
        }
        if t_enter > t_exit {
            return false;
        }
    }
    true
}

/// Restrict a full belief covariance to the 2-D position block of the robot.
pub fn position_cov(cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov.view((0, 0), (2, 2)).into_owned()
}

pub fn position_of(mean: &DVector<f64>) -> DVector<f64> {
    mean.rows(0, 2).into_owned()
}

/// Settings for the trajectory feasibility check.
#[derive(Clone, Debug)]
pub struct FeasibilityContext<'a> {
    pub obstacles: &'a [Obstacle],
    /// Current centroid positions of the obstacles, one per obstacle.
    pub centroids: Vec<DVector<f64>>,
    pub environment: &'a Polytope,
    pub allocation: &'a RiskAllocation,
    pub mode: RiskMode,
    pub probabilistic_env: bool,
}

/// Full trajectory check: per-step tightened facet conditions for every
/// obstacle, raw-polytope intersection of the connecting line between
/// consecutive means, and environment containment. Returns false on the
/// first violation.
pub fn dr_feasible(segment: &TrajectorySegment, ctx: &FeasibilityContext<'_>) -> Result<bool> {
    if segment.is_empty() {
        return Err(Error::invalid("empty trajectory segment"));
    }
    for t in 0..segment.len() {
        let pos = position_of(&segment.means[t]);
        let pcov = position_cov(&segment.covs[t]);
        for (i, obstacle) in ctx.obstacles.iter().enumerate() {
            if !obstacle_feasible(
                &pos,
                &pcov,
                obstacle,
                &ctx.centroids[i],
                ctx.allocation.per_obstacle_risk[i],
                ctx.mode,
            )? {
                return Ok(false);
            }
            if t > 0 {
                let prev = position_of(&segment.means[t - 1]);
                let region = obstacle.region_at(&ctx.centroids[i]);
                if segment_intersects(&prev, &pos, &region) {
                    return Ok(false);
                }
            }
        }
        if !environment_feasible(
            &pos,
            &pcov,
            ctx.environment,
            ctx.allocation.environment_risk,
            ctx.mode,
            ctx.probabilistic_env,
        )? {
            return Ok(false);
        }
    }
    Ok(true)
}
