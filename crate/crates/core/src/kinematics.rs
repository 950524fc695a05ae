//! Serial 6R arm: forward and inverse kinematics, shaft-yaw goal search and
//! disposal-pose search inside a direction cone.

use std::f64::consts::PI;

use nalgebra::{Matrix6, Unit, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::Scene;
use crate::geometry::{rotation_z_to, sample_icosphere_sector, ConeSpec, GeometryError, Pose};

pub const DOF: usize = 6;
pub const DEFAULT_YAW_STEP: f64 = 10.0 * PI / 180.0;
pub const DEFAULT_DROP_HEIGHT: f64 = 0.02;
pub const DEFAULT_DISPOSAL_HALF_ANGLE: f64 = 30.0 * PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("arm must have exactly {DOF} joints, got {0}")]
    WrongJointCount(usize),
    #[error("joint {joint}: {reason}")]
    BadJoint { joint: usize, reason: &'static str },
    #[error("inverse kinematics did not converge")]
    NotConverged,
    #[error("inverse kinematics converged outside the joint limits")]
    OutsideLimits,
    #[error("yaw step must be positive and finite")]
    InvalidStep,
    #[error("no more reachable goals")]
    NoReachableGoal,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointParams {
    /// Joint frame origin relative to the previous frame, metres.
    pub origin_xyz: [f64; 3],
    /// Fixed roll, pitch, yaw of the joint frame relative to the previous frame.
    #[serde(default)]
    pub origin_rpy: [f64; 3],
    /// Rotation axis in the joint frame.
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
    pub max_acceleration: f64,
}

/// Parameter table for a 6R arm, in metres and radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmParams {
    pub base_xyz: [f64; 3],
    pub base_yaw: f64,
    pub joints: Vec<JointParams>,
    /// Flange to shaft tip.
    pub tool_xyz: [f64; 3],
    pub tool_rpy: [f64; 3],
}

impl Default for ArmParams {
    /// Desktop cobot with about 340 mm reach. All-zero angles hold the arm
    /// straight up with the shaft pointing to the ceiling.
    fn default() -> Self {
        let deg = |d: f64| d.to_radians();
        let j = |z: f64, axis: [f64; 3], lim: f64, v: f64, a: f64| JointParams {
            origin_xyz: [0.0, 0.0, z],
            origin_rpy: [0.0; 3],
            axis,
            lower: -deg(lim),
            upper: deg(lim),
            max_velocity: v,
            max_acceleration: a,
        };
        let (zax, yax) = ([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]);
        Self {
            base_xyz: [0.0; 3],
            base_yaw: 0.0,
            joints: vec![
                j(0.10, zax, 170.0, 1.5, 3.0),
                j(0.08, yax, 135.0, 1.5, 3.0),
                j(0.165, yax, 150.0, 2.0, 4.0),
                j(0.05, zax, 170.0, 2.5, 5.0),
                j(0.10, yax, 135.0, 2.5, 5.0),
                j(0.06, zax, 170.0, 3.0, 6.0),
            ],
            tool_xyz: [0.04, 0.0, 0.11],
            tool_rpy: [0.0; 3],
        }
    }
}

fn rpy(r: &[f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(r[0], r[1], r[2])
}

#[derive(Debug, Clone, PartialEq)]
struct Joint {
    origin: Pose,
    axis: Unit<Vector3<f64>>,
    lower: f64,
    upper: f64,
    max_velocity: f64,
    max_acceleration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    params: ArmParams,
    base: Pose,
    joints: Vec<Joint>,
    tool: Pose,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::new(ArmParams::default()).expect("default arm parameters are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointConfig(pub [f64; DOF]);

impl JointConfig {
    pub fn zeros() -> Self {
        Self([0.0; DOF])
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::from_column_slice(&self.0)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        let mut a = [0.0; DOF];
        a.copy_from_slice(v.as_slice());
        Self(a)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean joint-space distance.
    pub fn distance(&self, other: &JointConfig) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }

    /// Largest single-joint difference.
    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        (self.as_vector() - other.as_vector()).amax()
    }

    pub fn lerp(&self, other: &JointConfig, t: f64) -> JointConfig {
        JointConfig::from_vector(&(self.as_vector() * (1.0 - t) + other.as_vector() * t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkResult {
    pub flange: Pose,
    pub tip: Pose,
}

impl ArmModel {
    pub fn new(params: ArmParams) -> Result<Self, KinematicsError> {
        if params.joints.len() != DOF {
            return Err(KinematicsError::WrongJointCount(params.joints.len()));
        }
        let mut joints = Vec::with_capacity(DOF);
        for (i, p) in params.joints.iter().enumerate() {
            let bad = |reason| KinematicsError::BadJoint { joint: i + 1, reason };
            if !(p.lower < p.upper) {
                return Err(bad("lower limit must be below upper limit"));
            }
            if !(p.max_velocity > 0.0 && p.max_acceleration > 0.0) {
                return Err(bad("velocity and acceleration limits must be positive"));
            }
            let axis = Vector3::from(p.axis);
            if !(axis.norm() > 1e-9) {
                return Err(bad("axis must be non-zero"));
            }
            joints.push(Joint {
                origin: Pose::new(Vector3::from(p.origin_xyz), rpy(&p.origin_rpy)),
                axis: Unit::new_normalize(axis),
                lower: p.lower,
                upper: p.upper,
                max_velocity: p.max_velocity,
                max_acceleration: p.max_acceleration,
            });
        }
        Ok(Self {
            base: Pose::new(
                Vector3::from(params.base_xyz),
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), params.base_yaw),
            ),
            tool: Pose::new(Vector3::from(params.tool_xyz), rpy(&params.tool_rpy)),
            joints,
            params,
        })
    }

    pub fn params(&self) -> &ArmParams {
        &self.params
    }

    pub fn dof(&self) -> usize {
        DOF
    }

    pub fn base(&self) -> &Pose {
        &self.base
    }

    pub fn tool_transform(&self) -> &Pose {
        &self.tool
    }

    pub fn limits(&self, joint: usize) -> (f64, f64) {
        (self.joints[joint].lower, self.joints[joint].upper)
    }

    pub fn max_velocity(&self) -> Vector6<f64> {
        Vector6::from_fn(|i, _| self.joints[i].max_velocity)
    }

    pub fn max_acceleration(&self) -> Vector6<f64> {
        Vector6::from_fn(|i, _| self.joints[i].max_acceleration)
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.0.iter()
            .zip(&self.joints)
            .all(|(v, j)| *v >= j.lower && *v <= j.upper)
    }

    pub fn clamp(&self, q: &JointConfig) -> JointConfig {
        let mut out = *q;
        for (v, j) in out.0.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.lower, j.upper);
        }
        out
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> JointConfig {
        let mut q = [0.0; DOF];
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = rng.random_range(j.lower..=j.upper);
        }
        JointConfig(q)
    }

    /// Base frame followed by the frame after each joint; the last is the flange.
    pub fn link_frames(&self, q: &JointConfig) -> [Pose; DOF + 1] {
        let mut frames = [self.base; DOF + 1];
        for (i, j) in self.joints.iter().enumerate() {
            let turn = Pose::from_rotation(UnitQuaternion::from_axis_angle(&j.axis, q.0[i]));
            frames[i + 1] = frames[i] * j.origin * turn;
        }
        frames
    }

    pub fn fk(&self, q: &JointConfig) -> FkResult {
        let flange = self.link_frames(q)[DOF];
        FkResult {
            flange,
            tip: flange * self.tool,
        }
    }

    /// Geometric Jacobian of the tip: rows are linear then angular velocity.
    pub fn jacobian(&self, q: &JointConfig) -> Matrix6<f64> {
        let frames = self.link_frames(q);
        let tip = (frames[DOF] * self.tool).position;
        let mut jac = Matrix6::zeros();
        for (i, j) in self.joints.iter().enumerate() {
            let f = &frames[i + 1];
            let a = f.rotation * j.axis.into_inner();
            let lin = a.cross(&(tip - f.position));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&a);
        }
        jac
    }
}

/// Position and orientation error of `current` towards `target`, in the world frame.
pub fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dp = target.position - current.position;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkParams {
    /// Added to the diagonal of J Jᵀ before inversion, scaled by the squared
    /// pose error (capped at 1) so steps approach Gauss-Newton near the solution.
    pub damping: f64,
    pub max_iterations: usize,
    /// Extra attempts from random configurations after the given seeds fail.
    pub max_restarts: usize,
    /// Largest joint change per iteration, radians.
    pub max_step: f64,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    pub restart_seed: u64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iterations: 200,
            max_restarts: 10,
            max_step: 0.3,
            position_tolerance: 1e-7,
            orientation_tolerance: 1e-6,
            restart_seed: 0x5eed,
        }
    }
}

fn ik_single(
    arm: &ArmModel,
    target: &Pose,
    seed: &JointConfig,
    params: &IkParams,
) -> Result<JointConfig, KinematicsError> {
    let mut q = arm.clamp(seed);
    for _ in 0..params.max_iterations {
        let err = pose_error(target, &arm.fk(&q).tip);
        if err.fixed_rows::<3>(0).norm() < params.position_tolerance
            && err.fixed_rows::<3>(3).norm() < params.orientation_tolerance
        {
            return if arm.within_limits(&q) {
                Ok(q)
            } else {
                Err(KinematicsError::OutsideLimits)
            };
        }
        let jac = arm.jacobian(&q);
        let lambda = params.damping * err.norm_squared().min(1.0) + 1e-12;
        let jjt = jac * jac.transpose() + Matrix6::identity() * lambda;
        let Some(chol) = jjt.cholesky() else {
            return Err(KinematicsError::NotConverged);
        };
        let mut dq = jac.transpose() * chol.solve(&err);
        let m = dq.amax();
        if m > params.max_step {
            dq *= params.max_step / m;
        }
        q = arm.clamp(&JointConfig::from_vector(&(q.as_vector() + dq)));
    }
    Err(KinematicsError::NotConverged)
}

/// Damped least-squares IK from `seed`, with random restarts on failure.
pub fn ik(
    arm: &ArmModel,
    target: &Pose,
    seed: &JointConfig,
    params: &IkParams,
) -> Result<JointConfig, KinematicsError> {
    ik_from_seeds(arm, target, std::slice::from_ref(seed), params)
}

/// Tries each seed in turn, then `params.max_restarts` random configurations.
pub fn ik_from_seeds(
    arm: &ArmModel,
    target: &Pose,
    seeds: &[JointConfig],
    params: &IkParams,
) -> Result<JointConfig, KinematicsError> {
    let mut last = KinematicsError::NotConverged;
    for s in seeds {
        match ik_single(arm, target, s, params) {
            Ok(q) => return Ok(q),
            Err(e) => last = e,
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.restart_seed);
    for _ in 0..params.max_restarts {
        let s = arm.random_config(&mut rng);
        match ik_single(arm, target, &s, params) {
            Ok(q) => return Ok(q),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Precomputed configurations used to pick IK seeds close to a target.
#[derive(Debug, Clone)]
pub struct SeedLibrary {
    entries: Vec<(JointConfig, Pose)>,
}

impl SeedLibrary {
    pub fn generate(arm: &ArmModel, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..size)
            .map(|_| {
                let q = arm.random_config(&mut rng);
                (q, arm.fk(&q).tip)
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` stored configurations whose tip is closest to `target`, with
    /// 0.1 m counted per radian of orientation difference.
    pub fn nearest(&self, target: &Pose, k: usize) -> Vec<JointConfig> {
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, p))| {
                let (dp, da) = p.distance_to(target);
                (dp + 0.1 * da, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| self.entries[i].0)
            .collect()
    }
}

/// IK seeded from the library entries nearest to the target, then from `seed`.
pub fn ik_nearest_seed(
    arm: &ArmModel,
    target: &Pose,
    seed: &JointConfig,
    library: &SeedLibrary,
    params: &IkParams,
) -> Result<JointConfig, KinematicsError> {
    let mut seeds = vec![*seed];
    seeds.extend(library.nearest(target, 4));
    ik_from_seeds(arm, target, &seeds, params)
}

/// Shaft pose pointing straight down with the tool x axis along `heading`.
pub fn downward_pose(position: Vector3<f64>, heading: f64) -> Pose {
    Pose::new(
        position,
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), heading)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),
    )
}

/// Heading from `position` back towards the arm base. A downward shaft with
/// this heading is reached with the wrist roll joints near zero.
pub fn inward_heading(arm: &ArmModel, position: &Vector3<f64>) -> f64 {
    let d = arm.base().position - position;
    d.y.atan2(d.x)
}

/// Yaw offsets in search order: 0, +s, -s, +2s, -2s, ... up to a half turn.
pub fn interleaved_offsets(step: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut k = 1.0;
    while k * step <= PI + 1e-12 {
        out.push(k * step);
        if k * step < PI - 1e-12 {
            out.push(-k * step);
        }
        k += 1.0;
    }
    out
}

/// First offset in interleaved order accepted by `feasible`.
pub fn search_yaw(step: f64, mut feasible: impl FnMut(f64) -> bool) -> Option<f64> {
    interleaved_offsets(step).into_iter().find(|&o| feasible(o))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalCandidate {
    pub pose: Pose,
    pub q: JointConfig,
    /// Rotation about the shaft relative to the nominal pose.
    pub yaw_offset: f64,
    /// Angle between the shaft and straight down.
    pub tilt: f64,
}

#[derive(Debug, Clone, Copy)]
struct CandidatePose {
    pose: Pose,
    yaw_offset: f64,
    tilt: f64,
}

/// Lazily tests candidate shaft poses in a fixed order and yields the ones with
/// an IK solution that is collision-free. Rejected poses are counted.
#[derive(Debug, Clone)]
pub struct GoalSearch<'a> {
    arm: &'a ArmModel,
    scene: &'a Scene,
    ik: IkParams,
    seeds: Vec<JointConfig>,
    candidates: Vec<CandidatePose>,
    next: usize,
    rejected: usize,
    min_clearance: f64,
}

impl<'a> GoalSearch<'a> {
    /// Rotations of `nominal` about its own shaft axis in interleaved order.
    pub fn yaw(
        arm: &'a ArmModel,
        scene: &'a Scene,
        nominal: &Pose,
        step: f64,
        seeds: Vec<JointConfig>,
        ik: IkParams,
    ) -> Result<Self, KinematicsError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(KinematicsError::InvalidStep);
        }
        let candidates = interleaved_offsets(step)
            .into_iter()
            .map(|o| CandidatePose {
                pose: nominal.rotated_about_local_z(o),
                yaw_offset: o,
                tilt: nominal.z_axis().angle(&-Vector3::z()),
            })
            .collect();
        Ok(Self::from_candidates(arm, scene, candidates, seeds, ik))
    }

    /// A vertical pose `params.drop_height` above `waste_box` first, then every
    /// icosphere direction inside `cone` (closest to its axis first) combined
    /// with interleaved rotations about the shaft. The cone's apex is ignored.
    pub fn disposal(
        arm: &'a ArmModel,
        scene: &'a Scene,
        waste_box: &Pose,
        cone: &ConeSpec,
        params: &DisposalParams,
        seeds: Vec<JointConfig>,
        ik: IkParams,
    ) -> Result<Self, KinematicsError> {
        if !(params.yaw_step > 0.0 && params.yaw_step.is_finite()) {
            return Err(KinematicsError::InvalidStep);
        }
        let drop = waste_box.position + Vector3::new(0.0, 0.0, params.drop_height);
        let vertical = downward_pose(drop, inward_heading(arm, &drop));
        let mut candidates = vec![CandidatePose {
            pose: vertical,
            yaw_offset: 0.0,
            tilt: 0.0,
        }];
        let offsets = interleaved_offsets(params.yaw_step);
        for dir in sample_icosphere_sector(cone, params.subdivisions)? {
            let tilted = Pose::new(
                drop,
                rotation_z_to(&dir) * rotation_z_to(&-Vector3::z()).inverse() * vertical.rotation,
            );
            let tilt = dir.angle(&-Vector3::z());
            for &o in &offsets {
                candidates.push(CandidatePose {
                    pose: tilted.rotated_about_local_z(o),
                    yaw_offset: o,
                    tilt,
                });
            }
        }
        Ok(Self::from_candidates(arm, scene, candidates, seeds, ik))
    }

    fn from_candidates(
        arm: &'a ArmModel,
        scene: &'a Scene,
        candidates: Vec<CandidatePose>,
        seeds: Vec<JointConfig>,
        ik: IkParams,
    ) -> Self {
        Self {
            arm,
            scene,
            ik,
            seeds,
            candidates,
            next: 0,
            rejected: 0,
            min_clearance: 0.0,
        }
    }

    /// Require at least `margin` metres between the arm and every obstacle.
    pub fn with_min_clearance(mut self, margin: f64) -> Self {
        self.min_clearance = margin;
        self
    }

    /// Candidate poses tested and found infeasible so far.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn remaining(&self) -> usize {
        self.candidates.len() - self.next
    }
}

impl Iterator for GoalSearch<'_> {
    type Item = GoalCandidate;

    fn next(&mut self) -> Option<GoalCandidate> {
        while self.next < self.candidates.len() {
            let c = self.candidates[self.next];
            self.next += 1;
            if let Ok(q) = ik_from_seeds(self.arm, &c.pose, &self.seeds, &self.ik) {
                if self.scene.clearance(self.arm, &q) > self.min_clearance {
                    return Some(GoalCandidate {
                        pose: c.pose,
                        q,
                        yaw_offset: c.yaw_offset,
                        tilt: c.tilt,
                    });
                }
            }
            self.rejected += 1;
        }
        None
    }
}

/// First collision-free, solvable rotation of `nominal` about its shaft.
pub fn search_reachable_yaw(
    arm: &ArmModel,
    nominal: &Pose,
    step: f64,
    scene: &Scene,
    seed: &JointConfig,
    ik: &IkParams,
) -> Result<GoalCandidate, KinematicsError> {
    GoalSearch::yaw(arm, scene, nominal, step, vec![*seed], *ik)?
        .next()
        .ok_or(KinematicsError::NoReachableGoal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisposalParams {
    /// Height of the release point above the box rim, metres.
    pub drop_height: f64,
    pub subdivisions: u32,
    pub yaw_step: f64,
}

impl Default for DisposalParams {
    fn default() -> Self {
        Self {
            drop_height: DEFAULT_DROP_HEIGHT,
            subdivisions: 2,
            yaw_step: DEFAULT_YAW_STEP,
        }
    }
}

/// First feasible release pose over the waste box, vertical if possible,
/// otherwise tilted within `cone`.
pub fn search_disposal_pose(
    arm: &ArmModel,
    waste_box: &Pose,
    cone: &ConeSpec,
    scene: &Scene,
    params: &DisposalParams,
    seed: &JointConfig,
    ik: &IkParams,
) -> Result<GoalCandidate, KinematicsError> {
    GoalSearch::disposal(arm, scene, waste_box, cone, params, vec![*seed], *ik)?
        .next()
        .ok_or(KinematicsError::NoReachableGoal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{collide, OrientedBox, RobotGeometry};
    use nalgebra::{Matrix3, Matrix4};
    use proptest::prelude::*;

    /// Homogeneous-matrix chain built from Rodrigues' formula, independent of
    /// the quaternion code.
    fn matrix_chain(params: &ArmParams, q: &JointConfig) -> Matrix4<f64> {
        fn rot(axis: Vector3<f64>, ang: f64) -> Matrix3<f64> {
            let k = axis.normalize();
            let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
            Matrix3::identity() + kx * ang.sin() + kx * kx * (1.0 - ang.cos())
        }
        fn rpy_m(r: &[f64; 3]) -> Matrix3<f64> {
            rot(Vector3::z(), r[2]) * rot(Vector3::y(), r[1]) * rot(Vector3::x(), r[0])
        }
        fn hom(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        }
        let mut m = hom(rot(Vector3::z(), params.base_yaw), Vector3::from(params.base_xyz));
        for (j, angle) in params.joints.iter().zip(q.0) {
            m *= hom(rpy_m(&j.origin_rpy), Vector3::from(j.origin_xyz));
            m *= hom(rot(Vector3::from(j.axis), angle), Vector3::zeros());
        }
        m * hom(rpy_m(&params.tool_rpy), Vector3::from(params.tool_xyz))
    }

    #[test]
    fn home_pose_is_straight_up() {
        let arm = ArmModel::default();
        let fk = arm.fk(&JointConfig::zeros());
        assert!((fk.flange.position - Vector3::new(0.0, 0.0, 0.555)).norm() < 1e-12);
        assert!((fk.tip.position - Vector3::new(0.04, 0.0, 0.665)).norm() < 1e-12);
        assert!((fk.tip.z_axis() - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn tip_is_flange_times_tool() {
        let arm = ArmModel::default();
        let q = JointConfig([0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let fk = arm.fk(&q);
        let (dp, da) = fk.tip.distance_to(&(fk.flange * *arm.tool_transform()));
        assert!(dp < 1e-15 && da < 1e-12);
    }

    proptest! {
        #[test]
        fn fk_matches_matrix_chain(q in prop::array::uniform6(-3.0f64..3.0), yaw in -3.0f64..3.0, tilt in -1.0f64..1.0) {
            let mut params = ArmParams::default();
            params.base_yaw = yaw;
            params.base_xyz = [0.1, -0.2, 0.05];
            params.tool_rpy = [tilt, 0.2, -0.1];
            params.joints[2].origin_rpy = [0.0, tilt, 0.3];
            let arm = ArmModel::new(params.clone()).unwrap();
            let q = JointConfig(q);
            let oracle = matrix_chain(&params, &q);
            prop_assert!((arm.fk(&q).tip.to_homogeneous() - oracle).amax() < 1e-10);
        }

        #[test]
        fn last_joint_moves_tip_on_a_circle(q in prop::array::uniform6(-2.5f64..2.5), d in -3.0f64..3.0) {
            let arm = ArmModel::default();
            let q0 = JointConfig(q);
            let mut q1 = q0;
            q1.0[5] += d;
            let frames = arm.link_frames(&q0);
            let axis = frames[DOF].z_axis();
            let center = frames[DOF].position;
            let (p0, p1) = (arm.fk(&q0).tip.position, arm.fk(&q1).tip.position);
            // same height along the wrist axis and same radius about it
            prop_assert!(((p0 - center).dot(&axis) - (p1 - center).dot(&axis)).abs() < 1e-12);
            let radial = |p: Vector3<f64>| { let r = p - center; (r - axis * r.dot(&axis)).norm() };
            prop_assert!((radial(p0) - radial(p1)).abs() < 1e-12);
            prop_assert!((radial(p0) - 0.04).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arm = ArmModel::default();
        let q = JointConfig([0.3, 0.7, 0.9, -0.4, 0.5, 1.1]);
        let jac = arm.jacobian(&q);
        let h = 1e-6;
        for i in 0..DOF {
            let (mut qp, mut qm) = (q, q);
            qp.0[i] += h;
            qm.0[i] -= h;
            let (tp, tm) = (arm.fk(&qp).tip, arm.fk(&qm).tip);
            let col = pose_error(&tp, &tm) / (2.0 * h);
            assert!((col - jac.column(i)).amax() < 1e-6, "column {i}");
        }
    }

    #[test]
    fn ik_round_trip_from_own_seed() {
        let arm = ArmModel::default();
        let q = JointConfig([0.4, 0.8, 1.0, 0.2, 0.9, -0.5]);
        let target = arm.fk(&q).tip;
        let sol = ik(&arm, &target, &q, &IkParams::default()).unwrap();
        let (dp, da) = arm.fk(&sol).tip.distance_to(&target);
        assert!(dp < 1e-6 && da < 1e-5);
    }

    #[test]
    fn ik_from_nearby_seed() {
        let arm = ArmModel::default();
        let q = JointConfig([0.4, 0.8, 1.0, 0.2, 0.9, -0.5]);
        let target = arm.fk(&q).tip;
        let seed = JointConfig(q.0.map(|v| v + 0.2));
        let sol = ik(&arm, &target, &seed, &IkParams::default()).unwrap();
        assert!(arm.fk(&sol).tip.distance_to(&target).0 < 1e-6);
        assert!(arm.within_limits(&sol));
    }

    #[test]
    fn ik_unreachable_fails() {
        let arm = ArmModel::default();
        let target = downward_pose(Vector3::new(2.0, 0.0, 0.1), 0.0);
        assert!(ik(&arm, &target, &JointConfig::zeros(), &IkParams::default()).is_err());
    }

    #[test]
    fn nearest_seed_library_orders_by_distance() {
        let arm = ArmModel::default();
        let lib = SeedLibrary::generate(&arm, 50, 3);
        let q = lib.entries[17].0;
        let near = lib.nearest(&arm.fk(&q).tip, 3);
        assert_eq!(near[0], q);
        assert_eq!(near.len(), 3);
    }

    #[test]
    fn offsets_interleave() {
        let o = interleaved_offsets(PI / 2.0);
        assert_eq!(o.len(), 4);
        assert_eq!(o[0], 0.0);
        assert!((o[1] - PI / 2.0).abs() < 1e-15 && (o[2] + PI / 2.0).abs() < 1e-15);
        assert!((o[3] - PI).abs() < 1e-15);
        // 10 degrees: 0, +-10 .. +-170, 180
        assert_eq!(interleaved_offsets(DEFAULT_YAW_STEP).len(), 36);
    }

    #[test]
    fn yaw_search_prefers_positive_side() {
        let step = DEFAULT_YAW_STEP;
        // (-pi, 0] blocked
        let found = search_yaw(step, |o| o > 1e-9).unwrap();
        assert!((found - step).abs() < 1e-12);
        assert_eq!(search_yaw(step, |_| false), None);
        assert_eq!(search_yaw(step, |_| true), Some(0.0));
    }

    fn table_scene() -> Scene {
        let mut scene = Scene::with_robot(RobotGeometry::default_arm());
        scene.boxes.push(OrientedBox::new(
            "table",
            Pose::from_xyz_yaw(0.0, 0.0, -0.02, 0.0),
            Vector3::new(0.6, 0.6, 0.02),
        ));
        scene
    }

    fn reach_seed() -> JointConfig {
        JointConfig([0.0, 0.9, 1.3, 0.0, 0.9, 0.0])
    }

    #[test]
    fn feasible_nominal_needs_no_rotation() {
        let arm = ArmModel::default();
        let scene = table_scene();
        let p = Vector3::new(0.22, 0.05, 0.08);
        let nominal = downward_pose(p, inward_heading(&arm, &p));
        let g = search_reachable_yaw(&arm, &nominal, DEFAULT_YAW_STEP, &scene, &reach_seed(), &IkParams::default()).unwrap();
        assert_eq!(g.yaw_offset, 0.0);
        assert!(arm.fk(&g.q).tip.distance_to(&nominal).0 < 1e-6);
        assert!(!collide(&scene, &arm, &g.q));
    }

    #[test]
    fn blocked_target_has_no_goal() {
        let arm = ArmModel::default();
        let mut scene = table_scene();
        let p = Vector3::new(0.22, 0.05, 0.08);
        scene.boxes.push(OrientedBox::new("block", Pose::from_translation(p), Vector3::new(0.05, 0.05, 0.05)));
        let nominal = downward_pose(p, 0.0);
        let r = search_reachable_yaw(&arm, &nominal, DEFAULT_YAW_STEP, &scene, &reach_seed(), &IkParams::default());
        assert_eq!(r, Err(KinematicsError::NoReachableGoal));
        assert_eq!(
            search_reachable_yaw(&arm, &nominal, 0.0, &scene, &reach_seed(), &IkParams::default()),
            Err(KinematicsError::InvalidStep)
        );
    }

    fn waste_box() -> Pose {
        Pose::from_xyz_yaw(0.05, -0.22, 0.06, 0.0)
    }

    #[test]
    fn unobstructed_disposal_is_vertical() {
        let arm = ArmModel::default();
        let scene = table_scene();
        let cone = ConeSpec::new(Vector3::zeros(), -Vector3::z(), DEFAULT_DISPOSAL_HALF_ANGLE).unwrap();
        let g = search_disposal_pose(&arm, &waste_box(), &cone, &scene, &DisposalParams::default(), &reach_seed(), &IkParams::default()).unwrap();
        assert_eq!(g.tilt, 0.0);
        assert!((g.pose.z_axis() + Vector3::z()).norm() < 1e-12);
        assert!((g.pose.position.z - 0.08).abs() < 1e-12);
    }

    fn overhang_scene() -> Scene {
        // a slab just above the wrist of the vertical release pose
        let mut scene = table_scene();
        let drop = waste_box().position + Vector3::new(0.0, 0.0, DEFAULT_DROP_HEIGHT);
        scene.boxes.push(OrientedBox::new(
            "overhang",
            Pose::from_translation(drop + Vector3::new(0.0, 0.0, 0.2)),
            Vector3::new(0.03, 0.03, 0.01),
        ));
        scene
    }

    #[test]
    fn overhang_forces_tilt_within_cone() {
        let arm = ArmModel::default();
        let scene = overhang_scene();
        let params = DisposalParams::default();
        let seed = reach_seed();
        let ikp = IkParams::default();
        let vertical_only = ConeSpec { apex: Vector3::zeros(), axis: -Vector3::z_axis(), half_angle: 0.0 };
        // confirm the vertical seed really is blocked
        let mut s = GoalSearch::disposal(&arm, &scene, &waste_box(), &vertical_only, &params, vec![seed], ikp).unwrap();
        assert_eq!(s.next(), None);
        let cone = ConeSpec::new(Vector3::zeros(), -Vector3::z(), DEFAULT_DISPOSAL_HALF_ANGLE).unwrap();
        let g = search_disposal_pose(&arm, &waste_box(), &cone, &scene, &params, &seed, &ikp).unwrap();
        assert!(g.tilt > 0.0 && g.tilt <= cone.half_angle + 1e-12);
        assert!(g.pose.z_axis().angle(&-Vector3::z()) <= cone.half_angle + 1e-9);
    }
}
