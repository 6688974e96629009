//! Sampling-based tree planner over state distributions.
//!
//! Grows a tree whose edges are closed-loop steering segments (mean and
//! covariance sequences), admits a node only when its whole segment passes
//! the distributionally robust feasibility check, connects new samples
//! through the minimum-cost feasible near node, and rewires nearby nodes
//! through the new node when that lowers their path cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{steer, SteerConfig, SteerMode, TrajectorySegment};
use crate::env_model::{EnvironmentModel, Polytope, RobotKind, SensorModel};
use crate::estimation::{BeliefState, DecorrelatedModel, Ukf, UtParams};
use crate::linalg::wrap_angle;
use crate::risk::{dr_feasible, FeasibilityContext, RiskAllocation, RiskMode};
use crate::{Error, Result};

/// Planar pose (x, y, heading) with heading in (−π, π].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn from_state(state: &DVector<f64>) -> Self {
        Self::new(state[0], state[1], state[2])
    }
}

/// Egocentric polar coordinates of a target pose seen from an initial pose:
/// radial distance r along the line of sight, target orientation φ and robot
/// orientation δ, both measured from the line-of-sight vector.
pub fn egocentric_coords(p0: &Pose, pt: &Pose) -> (f64, f64, f64) {
    let dx = pt.x - p0.x;
    let dy = pt.y - p0.y;
    let r = (dx * dx + dy * dy).sqrt();
    if r == 0.0 {
        // heading-only limit
        return (0.0, wrap_angle(pt.heading - p0.heading), 0.0);
    }
    let sight = dy.atan2(dx);
    let delta = wrap_angle(p0.heading - sight);
    let phi = wrap_angle(pt.heading - sight);
    (r, phi, delta)
}

#[derive(Clone, Copy, Debug)]
pub struct MetricParams {
    pub k_phi: f64,
    pub k_delta: f64,
    pub gamma: f64,
    pub mu_max: f64,
    pub dimension: usize,
}

/// Directed non-holonomic distance √(r² + k_φ²φ²) + k_δ|δ|.
pub fn nonholonomic_distance(p0: &Pose, pt: &Pose, params: &MetricParams) -> f64 {
    let (r, phi, delta) = egocentric_coords(p0, pt);
    (r * r + params.k_phi * params.k_phi * phi * phi).sqrt() + params.k_delta * delta.abs()
}

/// Near-node search radius min{γ·(log N / N)^{1/(d+1)}, μ_max}.
pub fn near_radius(tree_size: usize, params: &MetricParams) -> f64 {
    if tree_size <= 1 {
        return params.mu_max;
    }
    let n = tree_size as f64;
    let shrink = params.gamma * (n.ln() / n).powf(1.0 / (params.dimension as f64 + 1.0));
    shrink.min(params.mu_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Euclidean,
    NonHolonomic,
}

fn pose_distance(kind: MetricKind, params: &MetricParams, p0: &Pose, pt: &Pose) -> f64 {
    match kind {
        MetricKind::Euclidean => ((pt.x - p0.x).powi(2) + (pt.y - p0.y).powi(2)).sqrt(),
        MetricKind::NonHolonomic => nonholonomic_distance(p0, pt, params),
    }
}

/// Tree node: a steering segment, its terminal belief, and cumulative cost.
#[derive(Clone, Debug)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub segment: TrajectorySegment,
    /// Robot state the segment was steered toward (replay anchor).
    pub target: DVector<f64>,
    pub terminal_mean: DVector<f64>,
    pub terminal_cov: DMatrix<f64>,
    pub cost: f64,
}

impl TreeNode {
    pub fn terminal_pose(&self) -> Pose {
        Pose::from_state(&self.terminal_mean)
    }
}

#[derive(Clone, Debug)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

impl Tree {
    pub fn with_root(belief: BeliefState) -> Self {
        let root = TreeNode {
            id: 0,
            parent: None,
            segment: TrajectorySegment {
                means: vec![belief.mean.clone()],
                covs: vec![belief.cov.clone()],
                inputs: vec![],
                cost: 0.0,
                reached: true,
            },
            target: belief.mean.clone(),
            terminal_mean: belief.mean,
            terminal_cov: belief.cov,
            cost: 0.0,
        };
        Self {
            nodes: vec![root],
            root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ancestors(&self, mut id: usize) -> Vec<usize> {
        let mut out = vec![id];
        while let Some(parent) = self.nodes[id].parent {
            out.push(parent);
            id = parent;
        }
        out
    }

    pub fn children_of(&self, id: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.parent == Some(id))
            .map(|n| n.id)
            .collect()
    }

    /// Recompute costs of the subtree under `id` breadth-first.
    fn refresh_subtree_costs(&mut self, id: usize) {
        let mut queue = self.children_of(id);
        while let Some(child) = queue.pop() {
            let parent_cost = self.nodes[self.nodes[child].parent.unwrap()].cost;
            self.nodes[child].cost = parent_cost + self.nodes[child].segment.cost;
            queue.extend(self.children_of(child));
        }
    }

    /// Root-to-node concatenation of means, covariances, and inputs.
    pub fn path_to(&self, id: usize) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let mut chain = self.ancestors(id);
        chain.reverse();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let mut inputs = Vec::new();
        for (i, node_id) in chain.iter().enumerate() {
            let seg = &self.nodes[*node_id].segment;
            let skip = if i == 0 { 0 } else { 1 }; // junction state deduplication
            means.extend(seg.means.iter().skip(skip).cloned());
            covs.extend(seg.covs.iter().skip(skip).cloned());
            inputs.extend(seg.inputs.iter().cloned());
        }
        (means, covs, inputs)
    }
}

/// Everything the expansion step needs besides the tree itself.
pub struct PlannerContext<'a> {
    pub env: &'a EnvironmentModel,
    pub sensor: &'a SensorModel,
    pub decorr: &'a DecorrelatedModel,
    pub ut: UtParams,
    pub steer_cfg: &'a SteerConfig,
    pub allocation: &'a RiskAllocation,
    pub mode: RiskMode,
    pub probabilistic_env: bool,
    /// Spatial environment polytope (also the sampling region).
    pub environment: &'a Polytope,
    pub sample_bounds: (f64, f64, f64, f64),
    pub goal: &'a Polytope,
    pub metric: MetricKind,
    pub metric_params: MetricParams,
    /// Upper bound for sampled forward velocity (bicycle state only).
    pub sample_velocity_max: f64,
}

impl<'a> PlannerContext<'a> {
    fn ukf(&self) -> Ukf<'a> {
        Ukf::new(self.env, self.sensor, self.decorr, self.ut)
    }

    fn feasibility(&self) -> FeasibilityContext<'a> {
        let centroids = self
            .env
            .obstacles
            .iter()
            .map(|o| o.centroid_state.rows(0, 2).into_owned())
            .collect();
        FeasibilityContext {
            obstacles: &self.env.obstacles,
            centroids,
            environment: self.environment,
            allocation: self.allocation,
            mode: self.mode,
            probabilistic_env: self.probabilistic_env,
        }
    }

    fn sample_free_pose(&self, rng: &mut ChaCha8Rng) -> Result<Pose> {
        let (xmin, xmax, ymin, ymax) = self.sample_bounds;
        for _ in 0..10_000 {
            let x = rng.gen_range(xmin..xmax);
            let y = rng.gen_range(ymin..ymax);
            let p = DVector::from_vec(vec![x, y]);
            let in_obstacle = self.env.obstacles.iter().any(|o| {
                o.region_at(&o.centroid_state.rows(0, 2).into_owned()).contains(&p)
            });
            if !in_obstacle && self.environment.contains(&p) {
                let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                return Ok(Pose::new(x, y, heading));
            }
        }
        Err(Error::invalid("free-space rejection sampling failed"))
    }

    fn target_state(&self, pose: &Pose, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self.env.robot.kind {
            RobotKind::Unicycle => DVector::from_vec(vec![pose.x, pose.y, pose.heading]),
            RobotKind::Bicycle => {
                let v = rng.gen_range(0.0..self.sample_velocity_max.max(1e-9));
                DVector::from_vec(vec![pose.x, pose.y, pose.heading, v])
            }
        }
    }

    pub fn in_goal(&self, terminal_mean: &DVector<f64>) -> bool {
        self.goal
            .contains(&terminal_mean.rows(0, 2).into_owned())
    }
}

/// Upper bound on the near-node set examined for parent selection/rewiring.
const MAX_NEAR_NODES: usize = 8;

fn belief_of(node: &TreeNode) -> BeliefState {
    BeliefState::new(node.terminal_mean.clone(), node.terminal_cov.clone())
}

/// One tree-expansion iteration. Returns the new node id, or `None` when the
/// sample was discarded (steering or feasibility failure); the tree is then
/// unchanged except for the RNG state.
pub fn expand(
    tree: &mut Tree,
    ctx: &PlannerContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<usize>> {
    let sample = ctx.sample_free_pose(rng)?;
    let target = ctx.target_state(&sample, rng);
    let ukf = ctx.ukf();
    let feas = ctx.feasibility();

    let nearest = tree
        .nodes
        .iter()
        .min_by(|a, b| {
            let da = pose_distance(ctx.metric, &ctx.metric_params, &a.terminal_pose(), &sample);
            let db = pose_distance(ctx.metric, &ctx.metric_params, &b.terminal_pose(), &sample);
            da.partial_cmp(&db).unwrap()
        })
        .map(|n| n.id)
        .unwrap();

    let segment = steer(
        &belief_of(&tree.nodes[nearest]),
        &target,
        ctx.steer_cfg,
        ctx.env,
        ctx.sensor,
        &ukf,
        SteerMode::Planning,
    )?;
    if segment.len() < 2 || !dr_feasible(&segment, &feas)? {
        return Ok(None);
    }

    let mut best_parent = nearest;
    let mut best_segment = segment;
    let mut best_cost = tree.nodes[nearest].cost + best_segment.cost;

    // minimum-cost parent selection over near nodes (only segments that
    // actually reach the sample are comparable)
    if best_segment.reached {
        let radius = near_radius(tree.len(), &ctx.metric_params);
        // Candidates inside the shrinking radius, capped to the closest few:
        // every near node costs two steering solves (parent trial + rewiring),
        // so an uncapped set makes iterations quadratic in wall time.
        let mut near_with_dist: Vec<(usize, f64)> = tree
            .nodes
            .iter()
            .filter_map(|n| {
                if n.id == nearest {
                    return None;
                }
                let d =
                    pose_distance(ctx.metric, &ctx.metric_params, &n.terminal_pose(), &sample);
                (d <= radius).then_some((n.id, d))
            })
            .collect();
        near_with_dist.sort_by(|a, b| a.1.total_cmp(&b.1));
        near_with_dist.truncate(MAX_NEAR_NODES);
        let near_ids: Vec<usize> = near_with_dist.into_iter().map(|(id, _)| id).collect();
        for near in &near_ids {
            // stage costs are nonnegative, so this parent cannot beat the best
            if tree.nodes[*near].cost >= best_cost {
                continue;
            }
            let candidate = steer(
                &belief_of(&tree.nodes[*near]),
                &target,
                ctx.steer_cfg,
                ctx.env,
                ctx.sensor,
                &ukf,
                SteerMode::Planning,
            )?;
            let cost = tree.nodes[*near].cost + candidate.cost;
            if candidate.reached && cost < best_cost && dr_feasible(&candidate, &feas)? {
                best_parent = *near;
                best_segment = candidate;
                best_cost = cost;
            }
        }

        let new_id = tree.nodes.len();
        let terminal_mean = best_segment.means.last().unwrap().clone();
        let terminal_cov = best_segment.covs.last().unwrap().clone();
        tree.nodes.push(TreeNode {
            id: new_id,
            parent: Some(best_parent),
            segment: best_segment,
            target: target.clone(),
            terminal_mean,
            terminal_cov,
            cost: best_cost,
        });

        // rewiring: route near nodes through the new node when cheaper
        let ancestors = tree.ancestors(new_id);
        for near in near_ids {
            if ancestors.contains(&near) {
                continue;
            }
            // rewired cost = new node cost + positive segment cost
            if tree.nodes[new_id].cost >= tree.nodes[near].cost {
                continue;
            }
            let n = ctx.env.robot.state_dim();
            let near_target = tree.nodes[near].terminal_mean.rows(0, n).into_owned();
            let rewired = steer(
                &belief_of(&tree.nodes[new_id]),
                &near_target,
                ctx.steer_cfg,
                ctx.env,
                ctx.sensor,
                &ukf,
                SteerMode::Planning,
            )?;
            let cost = tree.nodes[new_id].cost + rewired.cost;
            if rewired.reached && cost < tree.nodes[near].cost && dr_feasible(&rewired, &feas)? {
                let node = &mut tree.nodes[near];
                node.parent = Some(new_id);
                node.target = near_target;
                node.terminal_mean = rewired.means.last().unwrap().clone();
                node.terminal_cov = rewired.covs.last().unwrap().clone();
                node.segment = rewired;
                node.cost = cost;
                tree.refresh_subtree_costs(near);
            }
        }
        Ok(Some(new_id))
    } else {
        // partial extension toward an unreached sample: plain tree growth
        let new_id = tree.nodes.len();
        let terminal_mean = best_segment.means.last().unwrap().clone();
        let terminal_cov = best_segment.covs.last().unwrap().clone();
        tree.nodes.push(TreeNode {
            id: new_id,
            parent: Some(best_parent),
            segment: best_segment,
            target,
            terminal_mean,
            terminal_cov,
            cost: best_cost,
        });
        Ok(Some(new_id))
    }
}

/// Planner output: the tree plus the extracted reference trajectory.
#[derive(Clone, Debug)]
pub struct PlanResult {
    pub tree: Tree,
    /// Concatenated root-to-goal means (full environmental state).
    pub reference_means: Vec<DVector<f64>>,
    pub reference_covs: Vec<DMatrix<f64>>,
    pub reference_inputs: Vec<DVector<f64>>,
    pub goal_node: Option<usize>,
    pub iterations_used: usize,
}

impl PlanResult {
    pub fn found(&self) -> bool {
        self.goal_node.is_some()
    }
}

/// Run tree expansion until `stop_after_goal_nodes` goal-region nodes exist
/// or `max_iters` iterations elapse, then extract the minimum-cost goal path.
/// Deterministic given the seed.
pub fn plan(
    ctx: &PlannerContext<'_>,
    root_belief: BeliefState,
    seed: u64,
    max_iters: usize,
    stop_after_goal_nodes: usize,
) -> Result<PlanResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = Tree::with_root(root_belief);
    let mut goal_nodes = 0usize;
    let mut iterations_used = 0usize;

    if ctx.in_goal(&tree.nodes[0].terminal_mean) {
        goal_nodes = 1;
    }
    for iter in 0..max_iters {
        iterations_used = iter + 1;
        if goal_nodes >= stop_after_goal_nodes.max(1) {
            iterations_used = iter;
            break;
        }
        if let Some(id) = expand(&mut tree, ctx, &mut rng)? {
            if ctx.in_goal(&tree.nodes[id].terminal_mean) && tree.nodes[id].segment.reached {
                goal_nodes += 1;
            }
        }
    }

    let goal_node = tree
        .nodes
        .iter()
        .filter(|n| ctx.in_goal(&n.terminal_mean))
        .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap())
        .map(|n| n.id);

    let (reference_means, reference_covs, reference_inputs) = match goal_node {
        Some(id) => tree.path_to(id),
        None => (vec![], vec![], vec![]),
    };
    Ok(PlanResult {
        tree,
        reference_means,
        reference_covs,
        reference_inputs,
        goal_node,
        iterations_used,
    })
}

/// Serializable tree snapshot for the CLI dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeDump {
    pub nodes: Vec<NodeDump>,
    pub root: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: usize,
    pub parent: Option<usize>,
    pub cost: f64,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Vec<Vec<f64>>,
    pub segment_means: Vec<Vec<f64>>,
    pub segment_cost: f64,
    pub reached: bool,
}

impl Tree {
    pub fn dump(&self) -> TreeDump {
        TreeDump {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDump {
                    id: n.id,
                    parent: n.parent,
                    cost: n.cost,
                    terminal_mean: n.terminal_mean.iter().copied().collect(),
                    terminal_cov: (0..n.terminal_cov.nrows())
                        .map(|i| n.terminal_cov.row(i).iter().copied().collect())
                        .collect(),
                    segment_means: n
                        .segment
                        .means
                        .iter()
                        .map(|m| m.iter().copied().collect())
                        .collect(),
                    segment_cost: n.segment.cost,
                    reached: n.segment.reached,
                })
                .collect(),
            root: self.root,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn params() -> MetricParams {
        MetricParams {
            k_phi: 1.2,
            k_delta: 3.0,
            gamma: 30.0,
            mu_max: 5.0,
            dimension: 2,
        }
    }

    #[test]
    fn egocentric_aligned_case() {
        let p0 = Pose::new(0.0, 0.0, 0.3);
        let pt = Pose::new(2.0 * 0.3f64.cos(), 2.0 * 0.3f64.sin(), 0.3);
        let (r, phi, delta) = egocentric_coords(&p0, &pt);
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(phi, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(delta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn egocentric_hand_values() {
        let p0 = Pose::new(0.0, 0.0, 0.0);
        let pt = Pose::new(0.0, 1.0, 0.0);
        let (r, phi, delta) = egocentric_coords(&p0, &pt);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(delta, -FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(phi, -FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn egocentric_asymmetry() {
        let p0 = Pose::new(0.0, 0.0, 0.4);
        let pt = Pose::new(1.0, 2.0, -0.7);
        let fwd = egocentric_coords(&p0, &pt);
        let bwd = egocentric_coords(&pt, &p0);
        assert!((fwd.1 - bwd.1).abs() > 1e-6 || (fwd.2 - bwd.2).abs() > 1e-6);
    }

    #[test]
    fn nonholonomic_distance_values() {
        let p = Pose::new(1.0, -2.0, 0.5);
        assert_eq!(nonholonomic_distance(&p, &p, &params()), 0.0);

        // pure translation: r=3, phi=0, delta=0
        let p0 = Pose::new(0.0, 0.0, 0.0);
        let pt = Pose::new(3.0, 0.0, 0.0);
        assert_abs_diff_eq!(nonholonomic_distance(&p0, &pt, &params()), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn nonholonomic_distance_closed_form() {
        // r=4, phi=pi/2, delta=pi/4, k_phi=1.2, k_delta=3
        // => sqrt(16 + 1.44*(pi/2)^2) + 3*pi/4 = 6.77815...
        let r: f64 = 4.0;
        let phi = FRAC_PI_2;
        let delta = PI / 4.0;
        let expected = (r * r + 1.44 * phi * phi).sqrt() + 3.0 * delta;
        assert_abs_diff_eq!(expected, 6.77815, epsilon = 1e-4);
        // realize the geometry: target 4 units along +x line of sight
        let p0 = Pose::new(0.0, 0.0, delta); // delta = psi0 - 0
        let pt = Pose::new(4.0, 0.0, phi);
        assert_abs_diff_eq!(
            nonholonomic_distance(&p0, &pt, &params()),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn nonholonomic_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p0 = Pose::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
            );
            let pt = Pose::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
            );
            assert!(nonholonomic_distance(&p0, &pt, &params()) >= 0.0);
        }
    }

    #[test]
    fn near_radius_formula() {
        let p = params();
        // gamma=30, d=2, N=100: 30*(ln 100/100)^(1/3) = 10.7527... capped at 5
        let unclamped = 30.0 * (100f64.ln() / 100.0).powf(1.0 / 3.0);
        assert_abs_diff_eq!(unclamped, 10.753, epsilon = 1e-3);
        assert_abs_diff_eq!(near_radius(100, &p), 5.0, epsilon = 1e-12);
        assert_eq!(near_radius(1, &p), 5.0);
        // shrinks below any epsilon eventually
        assert!(near_radius(100_000_000, &p) < 0.2);
    }
}
