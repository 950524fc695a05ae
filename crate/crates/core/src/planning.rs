//! Joint-space motion planning: RRT-Connect, shortcut pruning, time-optimal
//! parameterization along the path, and the goal-invalidating planner for a
//! full dispense cycle.

use std::fmt::Write as _;

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::collision::{collide, Scene};
use crate::kinematics::{ArmModel, GoalCandidate, GoalSearch, JointConfig, DOF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanningError {
    #[error("start configuration is in collision")]
    StartInCollision,
    #[error("goal configuration is in collision")]
    GoalInCollision,
    #[error("no path found within {0} tree extensions")]
    BudgetExhausted(usize),
    #[error("a path needs at least two waypoints")]
    TooFewWaypoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Largest per-joint change between collision checks along an edge, radians.
    pub edge_step: f64,
    /// Largest per-joint change of one tree extension, radians.
    pub extend_step: f64,
    pub max_extensions: usize,
    pub shortcut_attempts: usize,
    /// Clearance every planned configuration must keep from obstacles, metres.
    pub clearance_margin: f64,
    /// Grid intervals per straight path segment for time parameterization.
    pub topp_samples: usize,
    pub max_goal_retries: usize,
    pub seed: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            edge_step: 0.05,
            extend_step: 0.3,
            max_extensions: 10_000,
            shortcut_attempts: 200,
            clearance_margin: 0.003,
            topp_samples: 100,
            max_goal_retries: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    waypoints: Vec<JointConfig>,
}

impl Path {
    pub fn new(waypoints: Vec<JointConfig>) -> Result<Self, PlanningError> {
        if waypoints.len() < 2 {
            return Err(PlanningError::TooFewWaypoints);
        }
        Ok(Self { waypoints })
    }

    pub fn waypoints(&self) -> &[JointConfig] {
        &self.waypoints
    }

    pub fn start(&self) -> &JointConfig {
        &self.waypoints[0]
    }

    pub fn goal(&self) -> &JointConfig {
        self.waypoints.last().unwrap()
    }

    /// Euclidean joint-space arc length.
    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| w[0].distance(&w[1]))
            .sum()
    }

    /// Configuration at arc length `s` and the index of the segment holding it.
    fn locate(&self, s: f64) -> (usize, JointConfig) {
        let mut acc = 0.0;
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let l = w[0].distance(&w[1]);
            if s <= acc + l || i + 2 == self.waypoints.len() {
                let t = if l > 0.0 { ((s - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
                return (i, w[0].lerp(&w[1], t));
            }
            acc += l;
        }
        (0, self.waypoints[0])
    }
}

fn config_free(scene: &Scene, arm: &ArmModel, q: &JointConfig, margin: f64) -> bool {
    scene.clearance(arm, q) > margin
}

/// Collision-free check of the straight joint-space edge from `a` to `b`,
/// sampled so that no joint moves more than `params.edge_step` between checks.
pub fn edge_free(
    scene: &Scene,
    arm: &ArmModel,
    a: &JointConfig,
    b: &JointConfig,
    params: &PlannerParams,
) -> bool {
    let n = (a.max_abs_diff(b) / params.edge_step).ceil().max(1.0) as usize;
    (1..=n).all(|k| {
        config_free(scene, arm, &a.lerp(b, k as f64 / n as f64), params.clearance_margin)
    })
}

struct Tree {
    nodes: Vec<JointConfig>,
    parent: Vec<usize>,
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

impl Tree {
    fn new(root: JointConfig) -> Self {
        Self {
            nodes: vec![root],
            parent: vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &JointConfig) -> usize {
        let v = q.as_vector();
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n.as_vector() - v).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn extend(
        &mut self,
        target: &JointConfig,
        scene: &Scene,
        arm: &ArmModel,
        params: &PlannerParams,
    ) -> Extend {
        let near = self.nearest(target);
        let from = self.nodes[near];
        let gap = from.max_abs_diff(target);
        let (new, reached) = if gap <= params.extend_step {
            (*target, true)
        } else {
            (from.lerp(target, params.extend_step / gap), false)
        };
        if !edge_free(scene, arm, &from, &new, params) {
            return Extend::Trapped;
        }
        self.nodes.push(new);
        self.parent.push(near);
        let id = self.nodes.len() - 1;
        if reached {
            Extend::Reached(id)
        } else {
            Extend::Advanced(id)
        }
    }

    /// Root-to-node configurations.
    fn branch(&self, mut id: usize) -> Vec<JointConfig> {
        let mut out = Vec::new();
        while id != usize::MAX {
            out.push(self.nodes[id]);
            id = self.parent[id];
        }
        out.reverse();
        out
    }
}

/// Bidirectional RRT in joint space. Deterministic for a given `seed`.
pub fn rrt_connect(
    scene: &Scene,
    arm: &ArmModel,
    start: &JointConfig,
    goal: &JointConfig,
    params: &PlannerParams,
    seed: u64,
) -> Result<Path, PlanningError> {
    if !config_free(scene, arm, start, params.clearance_margin) {
        return Err(PlanningError::StartInCollision);
    }
    if !config_free(scene, arm, goal, params.clearance_margin) {
        return Err(PlanningError::GoalInCollision);
    }
    if edge_free(scene, arm, start, goal, params) {
        return Path::new(vec![*start, *goal]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Tree::new(*start), Tree::new(*goal));
    let mut a_is_start = true;
    let mut used = 0;
    while used < params.max_extensions {
        let sample = arm.random_config(&mut rng);
        used += 1;
        let new_id = match a.extend(&sample, scene, arm, params) {
            Extend::Trapped => None,
            Extend::Advanced(id) | Extend::Reached(id) => Some(id),
        };
        if let Some(id) = new_id {
            let target = a.nodes[id];
            loop {
                used += 1;
                match b.extend(&target, scene, arm, params) {
                    Extend::Advanced(_) if used < params.max_extensions => continue,
                    Extend::Reached(bid) => {
                        let mut from_a = a.branch(id);
                        let mut from_b = b.branch(bid);
                        from_b.pop();
                        from_b.reverse();
                        from_a.extend(from_b);
                        if !a_is_start {
                            from_a.reverse();
                        }
                        return Path::new(from_a);
                    }
                    _ => break,
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(PlanningError::BudgetExhausted(params.max_extensions))
}

/// Drop repeated waypoints and interior waypoints on a straight line.
pub fn simplify(path: &Path) -> Path {
    let mut out: Vec<JointConfig> = Vec::with_capacity(path.waypoints.len());
    for q in &path.waypoints {
        if out.last().is_some_and(|l| l.distance(q) < 1e-12) {
            continue;
        }
        if out.len() >= 2 {
            let (p0, p1) = (out[out.len() - 2].as_vector(), out[out.len() - 1].as_vector());
            let (d0, d1) = (p1 - p0, q.as_vector() - p1);
            if d0.normalize().dot(&d1.normalize()) > 1.0 - 1e-12 {
                out.pop();
            }
        }
        out.push(*q);
    }
    if out.len() == 1 {
        out.push(out[0]);
    }
    Path { waypoints: out }
}

/// Random shortcutting: join two random points along the path by a straight
/// edge whenever that edge is collision-free. Never lengthens the path.
pub fn prune(scene: &Scene, arm: &ArmModel, path: &Path, params: &PlannerParams, seed: u64) -> Path {
    let mut cur = simplify(path);
    if cur.waypoints.len() > 2 && edge_free(scene, arm, cur.start(), cur.goal(), params) {
        return Path {
            waypoints: vec![*cur.start(), *cur.goal()],
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.shortcut_attempts {
        if cur.waypoints.len() <= 2 {
            break;
        }
        let len = cur.length();
        let (mut s1, mut s2) = (rng.random_range(0.0..=len), rng.random_range(0.0..=len));
        if s1 > s2 {
            std::mem::swap(&mut s1, &mut s2);
        }
        let (i1, q1) = cur.locate(s1);
        let (i2, q2) = cur.locate(s2);
        if i1 == i2 || !edge_free(scene, arm, &q1, &q2, params) {
            continue;
        }
        let mut w = cur.waypoints[..=i1].to_vec();
        w.push(q1);
        w.push(q2);
        w.extend_from_slice(&cur.waypoints[i2 + 1..]);
        let candidate = simplify(&Path { waypoints: w });
        if candidate.length() <= cur.length() {
            cur = candidate;
        }
    }
    cur
}

/// Constant-acceleration stretch along one straight joint-space segment.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    t0: f64,
    dt: f64,
    origin: Vector6<f64>,
    dir: Vector6<f64>,
    s0: f64,
    v0: f64,
    acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: JointConfig,
    pub v: Vector6<f64>,
    pub a: Vector6<f64>,
}

/// Time law along a polyline path, piecewise constant acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    start: JointConfig,
    end: JointConfig,
    pieces: Vec<Piece>,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.t0 + p.dt)
    }

    pub fn start(&self) -> &JointConfig {
        &self.start
    }

    pub fn end(&self) -> &JointConfig {
        &self.end
    }

    /// State at time `t`, clamped to [0, duration].
    pub fn evaluate(&self, t: f64) -> TrajectorySample {
        let t = t.clamp(0.0, self.duration());
        if self.pieces.is_empty() {
            return TrajectorySample {
                t,
                q: self.start,
                v: Vector6::zeros(),
                a: Vector6::zeros(),
            };
        }
        let k = self
            .pieces
            .partition_point(|p| p.t0 + p.dt < t)
            .min(self.pieces.len() - 1);
        let p = &self.pieces[k];
        let tau = (t - p.t0).clamp(0.0, p.dt);
        let s = p.s0 + p.v0 * tau + 0.5 * p.acc * tau * tau;
        TrajectorySample {
            t,
            q: JointConfig::from_vector(&(p.origin + p.dir * s)),
            v: p.dir * (p.v0 + p.acc * tau),
            a: p.dir * p.acc,
        }
    }

    /// States at the parameterization grid points.
    pub fn grid(&self) -> Vec<TrajectorySample> {
        let mut out: Vec<TrajectorySample> = self
            .pieces
            .iter()
            .map(|p| TrajectorySample {
                t: p.t0,
                q: JointConfig::from_vector(&(p.origin + p.dir * p.s0)),
                v: p.dir * p.v0,
                a: p.dir * p.acc,
            })
            .collect();
        let mut last = self.evaluate(self.duration());
        last.a = Vector6::zeros();
        out.push(last);
        out
    }

    /// States every `dt` seconds plus the final instant.
    pub fn sample(&self, dt: f64) -> Vec<TrajectorySample> {
        let total = self.duration();
        let n = (total / dt).floor() as usize;
        let mut out: Vec<_> = (0..=n).map(|k| self.evaluate(k as f64 * dt)).collect();
        if total - n as f64 * dt > 1e-12 {
            out.push(self.evaluate(total));
        }
        out
    }

    /// Grid states as CSV: `t,q1..q6,v1..v6,a1..a6`, SI units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for prefix in ["q", "v", "a"] {
            for i in 1..=DOF {
                write!(s, ",{prefix}{i}").unwrap();
            }
        }
        s.push('\n');
        for g in self.grid() {
            write!(s, "{:.6}", g.t).unwrap();
            for v in g.q.0.iter().chain(g.v.iter()).chain(g.a.iter()) {
                write!(s, ",{v:.9}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Fastest time law along `path` under the arm's joint velocity and
/// acceleration limits. The path stops at every corner; straight runs are
/// integrated forward and backward on a grid of `samples` intervals.
pub fn parameterize(path: &Path, arm: &ArmModel, samples: usize) -> Trajectory {
    let path = simplify(path);
    let w = path.waypoints();
    let (vmax, amax) = (arm.max_velocity(), arm.max_acceleration());
    let n = samples.max(20).next_multiple_of(2);
    let mut pieces = Vec::new();
    let mut t = 0.0;
    for seg in w.windows(2) {
        let (a, b) = (seg[0].as_vector(), seg[1].as_vector());
        let len = (b - a).norm();
        if len < 1e-12 {
            continue;
        }
        let dir = (b - a) / len;
        let mut vlim = f64::INFINITY;
        let mut alim = f64::INFINITY;
        for i in 0..DOF {
            if dir[i].abs() > 1e-15 {
                vlim = vlim.min(vmax[i] / dir[i].abs());
                alim = alim.min(amax[i] / dir[i].abs());
            }
        }
        let ds = len / n as f64;
        let mut v = vec![vlim; n + 1];
        v[0] = 0.0;
        for k in 0..n {
            v[k + 1] = v[k + 1].min((v[k] * v[k] + 2.0 * alim * ds).sqrt());
        }
        v[n] = 0.0;
        for k in (0..n).rev() {
            v[k] = v[k].min((v[k + 1] * v[k + 1] + 2.0 * alim * ds).sqrt());
        }
        for k in 0..n {
            let dt = 2.0 * ds / (v[k] + v[k + 1]);
            pieces.push(Piece {
                t0: t,
                dt,
                origin: a,
                dir,
                s0: k as f64 * ds,
                v0: v[k],
                acc: (v[k + 1] - v[k]) / dt,
            });
            t += dt;
        }
    }
    Trajectory {
        start: *path.start(),
        end: *path.goal(),
        pieces,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryViolation {
    #[error("joint {joint} velocity {value} exceeds its limit at t = {t}")]
    Velocity { t: f64, joint: usize, value: f64 },
    #[error("joint {joint} acceleration {value} exceeds its limit at t = {t}")]
    Acceleration { t: f64, joint: usize, value: f64 },
    #[error("position jumps between samples at t = {t}")]
    Discontinuity { t: f64 },
    #[error("collision at t = {t}")]
    Collision { t: f64 },
    #[error("grid times are not strictly increasing at t = {t}")]
    TimeOrder { t: f64 },
    #[error("trajectory does not start and end at the path endpoints")]
    Endpoints,
}

/// Check limits, continuity and collisions every `dt` seconds.
pub fn validate_trajectory(
    traj: &Trajectory,
    arm: &ArmModel,
    scene: &Scene,
    dt: f64,
) -> Result<(), TrajectoryViolation> {
    let (vmax, amax) = (arm.max_velocity(), arm.max_acceleration());
    let tol = 1e-9;
    let grid = traj.grid();
    for w in grid.windows(2) {
        if w[1].t <= w[0].t {
            return Err(TrajectoryViolation::TimeOrder { t: w[1].t });
        }
    }
    let first = traj.evaluate(0.0);
    let last = traj.evaluate(traj.duration());
    if first.q.max_abs_diff(traj.start()) > 1e-9 || last.q.max_abs_diff(traj.end()) > 1e-9 {
        return Err(TrajectoryViolation::Endpoints);
    }
    let samples = traj.sample(dt);
    let mut prev: Option<&TrajectorySample> = None;
    for s in &samples {
        for j in 0..DOF {
            if s.v[j].abs() > vmax[j] * (1.0 + tol) {
                return Err(TrajectoryViolation::Velocity { t: s.t, joint: j + 1, value: s.v[j] });
            }
            if s.a[j].abs() > amax[j] * (1.0 + tol) {
                return Err(TrajectoryViolation::Acceleration { t: s.t, joint: j + 1, value: s.a[j] });
            }
        }
        if let Some(p) = prev {
            let step = (s.t - p.t) * (1.0 + tol) + 1e-12;
            if (0..DOF).any(|j| (s.q.0[j] - p.q.0[j]).abs() > vmax[j] * step) {
                return Err(TrajectoryViolation::Discontinuity { t: s.t });
            }
        }
        if collide(scene, arm, &s.q) {
            return Err(TrajectoryViolation::Collision { t: s.t });
        }
        prev = Some(s);
    }
    Ok(())
}

/// Something that produces goal configurations in preference order; each call
/// returns the next candidate after the previous one was invalidated.
pub trait GoalSource {
    fn next_goal(&mut self) -> Option<GoalCandidate>;

    /// Candidate poses examined and rejected so far.
    fn rejected(&self) -> usize {
        0
    }
}

impl GoalSource for GoalSearch<'_> {
    fn next_goal(&mut self) -> Option<GoalCandidate> {
        self.next()
    }

    fn rejected(&self) -> usize {
        GoalSearch::rejected(self)
    }
}

/// A single known configuration, such as the arm's starting pose.
pub struct FixedGoal {
    goal: Option<GoalCandidate>,
}

impl FixedGoal {
    pub fn new(arm: &ArmModel, q: JointConfig) -> Self {
        Self {
            goal: Some(GoalCandidate {
                pose: arm.fk(&q).tip,
                q,
                yaw_offset: 0.0,
                tilt: 0.0,
            }),
        }
    }
}

impl GoalSource for FixedGoal {
    fn next_goal(&mut self) -> Option<GoalCandidate> {
        self.goal.take()
    }
}

/// Plans one segment between two goal configurations.
pub trait SegmentPlanner {
    fn plan(
        &self,
        segment: usize,
        attempt: usize,
        start: &JointConfig,
        goal: &JointConfig,
    ) -> Result<(Path, Trajectory), PlanningError>;
}

/// RRT-Connect, then shortcut pruning, then time parameterization.
pub struct RrtPlanner<'a> {
    pub scene: &'a Scene,
    pub arm: &'a ArmModel,
    pub params: PlannerParams,
}

impl SegmentPlanner for RrtPlanner<'_> {
    fn plan(
        &self,
        segment: usize,
        attempt: usize,
        start: &JointConfig,
        goal: &JointConfig,
    ) -> Result<(Path, Trajectory), PlanningError> {
        let seed = self
            .params
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((segment * 64 + attempt) as u64);
        let raw = rrt_connect(self.scene, self.arm, start, goal, &self.params, seed)?;
        let path = prune(self.scene, self.arm, &raw, &self.params, seed ^ 0xa5a5);
        let traj = parameterize(&path, self.arm, self.params.topp_samples);
        Ok((path, traj))
    }
}

pub const GOAL_NAMES: [&str; 5] = ["i", "ii", "iii", "iv", "v"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CycleFailure {
    #[error("no more reachable goals for segment {}", segment_name(*.segment))]
    GoalSearch { segment: usize },
    #[error("planning failed on segment {} after {retries} goal retries: {last}", segment_name(*.segment))]
    Planning {
        segment: usize,
        retries: usize,
        last: PlanningError,
    },
}

impl CycleFailure {
    pub fn segment(&self) -> usize {
        match self {
            CycleFailure::GoalSearch { segment } | CycleFailure::Planning { segment, .. } => *segment,
        }
    }
}

/// "ii→iii" style label for segment `k` (0-based).
pub fn segment_name(k: usize) -> String {
    format!(
        "{}→{}",
        GOAL_NAMES.get(k).unwrap_or(&"?"),
        GOAL_NAMES.get(k + 1).unwrap_or(&"?")
    )
}

#[derive(Debug, Clone)]
pub struct CyclePlan {
    pub goals: Vec<GoalCandidate>,
    pub paths: Vec<Path>,
    pub trajectories: Vec<Trajectory>,
    /// Goal invalidations per segment.
    pub retries: Vec<usize>,
    /// Candidate poses rejected by each goal search.
    pub rejected_poses: Vec<usize>,
}

impl CyclePlan {
    pub fn total_retries(&self) -> usize {
        self.retries.iter().sum()
    }

    pub fn duration(&self) -> f64 {
        self.trajectories.iter().map(|t| t.duration()).sum()
    }
}

/// Plan through the goal sequence, one trajectory per adjacent pair. When a
/// segment fails, its end goal is invalidated and the next candidate from the
/// same source is tried, at most `max_goal_retries` times per segment.
pub fn plan_dispense_cycle(
    sources: &mut [&mut dyn GoalSource],
    planner: &dyn SegmentPlanner,
    max_goal_retries: usize,
) -> Result<CyclePlan, CycleFailure> {
    let mut goals = Vec::with_capacity(sources.len());
    let first = sources
        .first_mut()
        .and_then(|s| s.next_goal())
        .ok_or(CycleFailure::GoalSearch { segment: 0 })?;
    goals.push(first);
    let mut plan = CyclePlan {
        goals: Vec::new(),
        paths: Vec::new(),
        trajectories: Vec::new(),
        retries: Vec::new(),
        rejected_poses: Vec::new(),
    };
    for seg in 0..sources.len().saturating_sub(1) {
        let mut retries = 0;
        let mut end = sources[seg + 1]
            .next_goal()
            .ok_or(CycleFailure::GoalSearch { segment: seg })?;
        let start = goals[seg].q;
        loop {
            match planner.plan(seg, retries, &start, &end.q) {
                Ok((path, traj)) => {
                    plan.paths.push(path);
                    plan.trajectories.push(traj);
                    break;
                }
                Err(e) => {
                    if retries >= max_goal_retries {
                        return Err(CycleFailure::Planning {
                            segment: seg,
                            retries,
                            last: e,
                        });
                    }
                    retries += 1;
                    end = sources[seg + 1]
                        .next_goal()
                        .ok_or(CycleFailure::GoalSearch { segment: seg })?;
                }
            }
        }
        goals.push(end);
        plan.retries.push(retries);
    }
    plan.rejected_poses = sources.iter().map(|s| s.rejected()).collect();
    plan.goals = goals;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{OrientedBox, RobotGeometry};
    use crate::geometry::Pose;
    use nalgebra::Vector3;
    use std::cell::Cell;

    fn single_joint_arm(v: f64, a: f64) -> ArmModel {
        let mut p = crate::kinematics::ArmParams::default();
        for j in &mut p.joints {
            j.max_velocity = v;
            j.max_acceleration = a;
        }
        ArmModel::new(p).unwrap()
    }

    fn move_j1(dq: f64) -> Path {
        let mut b = JointConfig::zeros();
        b.0[0] = dq;
        Path::new(vec![JointConfig::zeros(), b]).unwrap()
    }

    /// Minimum-time straight move by fine forward/backward integration.
    fn fine_grid_time(len: f64, v: f64, a: f64) -> f64 {
        let n = 200_000;
        let ds = len / n as f64;
        let mut vel = vec![v; n + 1];
        vel[0] = 0.0;
        for k in 0..n {
            vel[k + 1] = vel[k + 1].min((vel[k] * vel[k] + 2.0 * a * ds).sqrt());
        }
        vel[n] = 0.0;
        for k in (0..n).rev() {
            vel[k] = vel[k].min((vel[k + 1] * vel[k + 1] + 2.0 * a * ds).sqrt());
        }
        (0..n).map(|k| 2.0 * ds / (vel[k] + vel[k + 1])).sum()
    }

    #[test]
    fn trapezoid_duration() {
        let (v, a) = (1.0, 2.0);
        let arm = single_joint_arm(v, a);
        let dq = 2.0;
        let t = parameterize(&move_j1(dq), &arm, 100).duration();
        let exact = dq / v + v / a;
        assert!((t - exact).abs() / exact < 0.01, "{t} vs {exact}");
        assert!(t >= exact - 1e-12);
    }

    #[test]
    fn triangle_duration() {
        let (v, a) = (1.0, 2.0);
        let arm = single_joint_arm(v, a);
        let dq = 0.3;
        let t = parameterize(&move_j1(dq), &arm, 100).duration();
        let exact = 2.0 * (dq / a).sqrt();
        assert!((t - exact).abs() < 1e-12, "{t} vs {exact}");
    }

    #[test]
    fn zero_length_path_has_zero_duration() {
        let arm = ArmModel::default();
        let p = Path::new(vec![JointConfig::zeros(); 2]).unwrap();
        let t = parameterize(&p, &arm, 100);
        assert_eq!(t.duration(), 0.0);
        assert_eq!(t.evaluate(1.0).q, JointConfig::zeros());
    }

    #[test]
    fn multi_joint_move_matches_fine_grid() {
        let arm = ArmModel::default();
        let a = JointConfig([0.1, -0.4, 0.9, 0.3, -0.2, 1.0]);
        let b = JointConfig([-0.8, 0.6, 0.2, -0.5, 0.7, -1.2]);
        let p = Path::new(vec![a, b]).unwrap();
        let t = parameterize(&p, &arm, 100);
        let dir = (b.as_vector() - a.as_vector()).normalize();
        let vlim = (0..DOF).map(|i| arm.max_velocity()[i] / dir[i].abs()).fold(f64::INFINITY, f64::min);
        let alim = (0..DOF).map(|i| arm.max_acceleration()[i] / dir[i].abs()).fold(f64::INFINITY, f64::min);
        let oracle = fine_grid_time(a.distance(&b), vlim, alim);
        assert!((t.duration() - oracle).abs() / oracle < 0.05);
        validate_trajectory(&t, &arm, &Scene::empty(), 1e-3).unwrap();
    }

    #[test]
    fn corners_stop_and_samples_stay_on_path() {
        let arm = ArmModel::default();
        let w = vec![
            JointConfig::zeros(),
            JointConfig([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]),
            JointConfig([0.5, 0.5, 0.0, 0.0, 0.0, 0.0]),
            JointConfig([1.0, 0.5, 0.0, 0.0, 0.0, 0.0]),
        ];
        let p = Path::new(w.clone()).unwrap();
        let t = parameterize(&p, &arm, 100);
        for s in t.sample(1e-3) {
            // cross-track distance to the polyline
            let d = w
                .windows(2)
                .map(|seg| {
                    let (a, b) = (seg[0].as_vector(), seg[1].as_vector());
                    let u = b - a;
                    let k = ((s.q.as_vector() - a).dot(&u) / u.norm_squared()).clamp(0.0, 1.0);
                    (s.q.as_vector() - (a + u * k)).norm()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6);
        }
        for g in t.grid() {
            if w.iter().any(|c| c.distance(&g.q) < 1e-12) {
                assert!(g.v.norm() < 1e-12);
            }
        }
        validate_trajectory(&t, &arm, &Scene::empty(), 1e-3).unwrap();
    }

    #[test]
    fn collinear_waypoints_merge() {
        let w = vec![
            JointConfig::zeros(),
            JointConfig([0.25; 6]),
            JointConfig([0.5; 6]),
            JointConfig([0.5; 6]),
        ];
        let s = simplify(&Path::new(w).unwrap());
        assert_eq!(s.waypoints().len(), 2);
    }

    #[test]
    fn csv_header_and_rows() {
        let arm = ArmModel::default();
        let t = parameterize(&move_j1(0.5), &arm, 20);
        let csv = t.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,q1,q2"));
        assert_eq!(header.split(',').count(), 19);
        assert_eq!(lines.count(), 21);
    }

    #[test]
    fn trivial_plan_when_start_equals_goal() {
        let arm = ArmModel::default();
        let q = JointConfig([0.1; 6]);
        let p = rrt_connect(&Scene::empty(), &arm, &q, &q, &PlannerParams::default(), 1).unwrap();
        assert_eq!(p.waypoints().len(), 2);
    }

    fn wall_scene() -> Scene {
        let mut scene = Scene::with_robot(RobotGeometry::default_arm());
        scene.boxes.push(OrientedBox::new("table", Pose::from_xyz_yaw(0.0, 0.0, -0.02, 0.0), Vector3::new(0.6, 0.6, 0.02)));
        scene.boxes.push(OrientedBox::new("wall", Pose::from_xyz_yaw(0.2, 0.0, 0.15, 0.0), Vector3::new(0.01, 0.15, 0.15)));
        scene
    }

    fn wall_endpoints() -> (JointConfig, JointConfig) {
        (
            JointConfig([-1.0, 0.9, 1.3, 0.0, 0.9, 0.0]),
            JointConfig([1.0, 0.9, 1.3, 0.0, 0.9, 0.0]),
        )
    }

    #[test]
    fn plans_around_a_wall_deterministically() {
        let arm = ArmModel::default();
        let scene = wall_scene();
        let (a, b) = wall_endpoints();
        let params = PlannerParams::default();
        assert!(!edge_free(&scene, &arm, &a, &b, &params));
        let p1 = rrt_connect(&scene, &arm, &a, &b, &params, 3).unwrap();
        let p2 = rrt_connect(&scene, &arm, &a, &b, &params, 3).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.start(), &a);
        assert_eq!(p1.goal(), &b);
        for w in p1.waypoints().windows(2) {
            assert!(edge_free(&scene, &arm, &w[0], &w[1], &params));
        }
        let pruned = prune(&scene, &arm, &p1, &params, 4);
        assert!(pruned.length() <= p1.length() + 1e-12);
        for w in pruned.waypoints().windows(2) {
            assert!(edge_free(&scene, &arm, &w[0], &w[1], &params));
        }
        let t = parameterize(&pruned, &arm, params.topp_samples);
        validate_trajectory(&t, &arm, &scene, 1e-3).unwrap();
    }

    #[test]
    fn zigzag_prunes_to_straight_line() {
        let arm = ArmModel::default();
        let scene = Scene::empty();
        let w: Vec<_> = (0..9)
            .map(|k| {
                let s = k as f64 / 8.0;
                let z = if k % 2 == 0 { 0.0 } else { 0.2 };
                JointConfig([s, z, 0.0, 0.0, 0.0, s])
            })
            .collect();
        let p = Path::new(w).unwrap();
        let straight = p.start().distance(p.goal());
        let pruned = prune(&scene, &arm, &p, &PlannerParams::default(), 9);
        assert!(pruned.length() <= straight * 1.01);
    }

    #[test]
    fn collision_at_endpoints_is_reported() {
        let arm = ArmModel::default();
        let mut scene = wall_scene();
        scene.boxes.push(OrientedBox::new("big", Pose::identity(), Vector3::new(1.0, 1.0, 1.0)));
        let (a, b) = wall_endpoints();
        assert_eq!(
            rrt_connect(&scene, &arm, &a, &b, &PlannerParams::default(), 0),
            Err(PlanningError::StartInCollision)
        );
    }

    #[test]
    fn budget_exhaustion_fails() {
        let arm = ArmModel::default();
        let scene = wall_scene();
        let (a, b) = wall_endpoints();
        let params = PlannerParams { max_extensions: 1, ..PlannerParams::default() };
        assert_eq!(
            rrt_connect(&scene, &arm, &a, &b, &params, 0),
            Err(PlanningError::BudgetExhausted(1))
        );
    }

    /// Candidates with increasing yaw offset; never rejects anything itself.
    struct Candidates {
        next: usize,
        total: usize,
    }

    impl GoalSource for Candidates {
        fn next_goal(&mut self) -> Option<GoalCandidate> {
            if self.next >= self.total {
                return None;
            }
            self.next += 1;
            let mut q = JointConfig::zeros();
            q.0[0] = self.next as f64 * 0.1;
            Some(GoalCandidate { pose: Pose::identity(), q, yaw_offset: self.next as f64, tilt: 0.0 })
        }
    }

    /// Fails a chosen segment a fixed number of times, straight lines otherwise.
    struct FailingPlanner {
        arm: ArmModel,
        segment: usize,
        failures: Cell<usize>,
    }

    impl SegmentPlanner for FailingPlanner {
        fn plan(&self, segment: usize, _: usize, s: &JointConfig, g: &JointConfig) -> Result<(Path, Trajectory), PlanningError> {
            if segment == self.segment && self.failures.get() > 0 {
                self.failures.set(self.failures.get() - 1);
                return Err(PlanningError::BudgetExhausted(0));
            }
            let p = Path::new(vec![*s, *g]).unwrap();
            let t = parameterize(&p, &self.arm, 20);
            Ok((p, t))
        }
    }

    #[test]
    fn failed_segment_retries_next_goal() {
        let arm = ArmModel::default();
        let mut srcs: Vec<Candidates> = (0..5).map(|_| Candidates { next: 0, total: 10 }).collect();
        let mut refs: Vec<&mut dyn GoalSource> = srcs.iter_mut().map(|s| s as &mut dyn GoalSource).collect();
        let planner = FailingPlanner { arm, segment: 0, failures: Cell::new(2) };
        let plan = plan_dispense_cycle(&mut refs, &planner, 5).unwrap();
        assert_eq!(plan.trajectories.len(), 4);
        assert_eq!(plan.retries, vec![2, 0, 0, 0]);
        assert_eq!(plan.goals[1].yaw_offset, 3.0);
    }

    #[test]
    fn exhausted_final_goal_names_last_segment() {
        let arm = ArmModel::default();
        let mut srcs: Vec<Candidates> = (0..5).map(|k| Candidates { next: 0, total: if k == 4 { 0 } else { 3 } }).collect();
        let mut refs: Vec<&mut dyn GoalSource> = srcs.iter_mut().map(|s| s as &mut dyn GoalSource).collect();
        let planner = FailingPlanner { arm, segment: 9, failures: Cell::new(0) };
        let err = plan_dispense_cycle(&mut refs, &planner, 5).unwrap_err();
        assert_eq!(err, CycleFailure::GoalSearch { segment: 3 });
        assert!(err.to_string().contains("iv→v"));
    }

    #[test]
    fn retry_cap_gives_planning_failure() {
        let arm = ArmModel::default();
        let mut srcs: Vec<Candidates> = (0..5).map(|_| Candidates { next: 0, total: 50 }).collect();
        let mut refs: Vec<&mut dyn GoalSource> = srcs.iter_mut().map(|s| s as &mut dyn GoalSource).collect();
        let planner = FailingPlanner { arm, segment: 2, failures: Cell::new(100) };
        let err = plan_dispense_cycle(&mut refs, &planner, 5).unwrap_err();
        assert!(matches!(err, CycleFailure::Planning { segment: 2, retries: 5, .. }));
    }
}
