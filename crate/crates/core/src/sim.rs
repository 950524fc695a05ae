//! Dispensing-task executor: per-tip goal search, optional motion planning,
//! alignment correction and rack-estimate updates, plus the tip-drop bounce
//! model and batch sweeps.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Rotation2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{OrientedBox, RobotGeometry, Scene, SceneError, VerticalCylinder};
use crate::correction::{
    correction_loop, closed_loop_update, Actuator, ActuatorError, CorrectionParams, CorrectionResult,
    NoisyOracle, NoisyOracleModel, Observation,
};
use crate::geometry::{ConeSpec, GeometryError, Pose};
use crate::kinematics::{
    downward_pose, ik_from_seeds, interleaved_offsets, inward_heading, ArmModel, ArmParams, DisposalParams,
    GoalCandidate, GoalSearch, IkParams, JointConfig, KinematicsError, DEFAULT_DISPOSAL_HALF_ANGLE,
    DEFAULT_YAW_STEP,
};
use crate::labware::{
    fit_rack_pose, LabwareError, NeighborMask, RackModel, Slot, TeachSample, DEFAULT_COLS, DEFAULT_PITCH,
    DEFAULT_ROWS, DEFAULT_SLOT_HEIGHT,
};
use crate::planning::{plan_dispense_cycle, CycleFailure, CyclePlan, FixedGoal, GoalSource, PlannerParams, RrtPlanner};
use crate::spiral::{LatticeError, SpiralLattice};

pub const GRAVITY: f64 = 9.81;
/// Below this speed a dropped tip is considered at rest.
pub const REST_SPEED: f64 = 1e-3;
const MAX_IMPACTS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("arm: {0}")]
    Kinematics(#[from] KinematicsError),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("rack: {0}")]
    Labware(#[from] LabwareError),
    #[error("lattice: {0}")]
    Lattice(#[from] LatticeError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("classifier: {0}")]
    Classifier(#[from] crate::correction::ModelError),
    #[error("actuator: {0}")]
    Actuator(#[from] ActuatorError),
    #[error("cycle: {0}")]
    Cycle(#[from] CycleFailure),
    #[error("invalid setting: {0}")]
    Invalid(String),
}

/// Position plus heading about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub xyz: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl Placement {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { xyz: [x, y, z], yaw }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_xyz_yaw(self.xyz[0], self.xyz[1], self.xyz[2], self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub name: String,
    pub center: Placement,
    /// Full side lengths.
    pub size: [f64; 3],
}

impl BoxSpec {
    pub fn to_box(&self) -> OrientedBox {
        OrientedBox::new(
            &self.name,
            self.center.pose(),
            Vector3::new(self.size[0], self.size[1], self.size[2]) / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderSpec {
    pub name: String,
    pub base: [f64; 3],
    pub radius: f64,
    pub height: f64,
}

/// Open-top bin; the tip is released `drop_height` above its rim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WasteBoxSpec {
    /// Center of the rim.
    pub rim_center: [f64; 3],
    pub size: [f64; 2],
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub waste_box: WasteBoxSpec,
    pub boxes: Vec<BoxSpec>,
    pub cylinders: Vec<CylinderSpec>,
    /// Arm configuration between tasks.
    pub ready: [f64; 6],
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            waste_box: WasteBoxSpec {
                rim_center: [-0.15, -0.10, 0.06],
                size: [0.08, 0.08],
                depth: 0.06,
            },
            boxes: Vec::new(),
            cylinders: Vec::new(),
            ready: [0.0, 0.07, 1.33, 0.0, 1.74, 0.0],
        }
    }
}

/// Teaching error model: isotropic recording noise, a constant offset, and a
/// tangential slip proportional to how far the base turned from the first
/// taught slot to reach each later one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeachingModel {
    pub slots: Vec<Slot>,
    pub noise_std: f64,
    pub bias: [f64; 2],
    /// Metres of tangential error per radian of base rotation away from the first slot.
    pub rotation_error_gain: f64,
}

impl Default for TeachingModel {
    fn default() -> Self {
        Self {
            slots: vec![Slot::new(0, 0), Slot::new(0, DEFAULT_COLS - 1)],
            noise_std: 0.3e-3,
            bias: [0.0; 2],
            rotation_error_gain: 0.0,
        }
    }
}

impl TeachingModel {
    pub fn exact() -> Self {
        Self {
            noise_std: 0.0,
            ..Self::default()
        }
    }

    /// Recorded positions for the true rack `truth`.
    pub fn record<R: Rng + ?Sized>(&self, truth: &RackModel, rng: &mut R) -> Result<Vec<TeachSample>, SimError> {
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| SimError::Invalid(e.to_string()))?;
        let bearing = |p: &Vector3<f64>| p.y.atan2(p.x);
        let start = match self.slots.first() {
            Some(&s) => bearing(&truth.slot_position(s)?),
            None => 0.0,
        };
        self.slots
            .iter()
            .map(|&slot| {
                let p = truth.slot_position(slot)?;
                let turned = wrap(bearing(&p) - start);
                let tangent = Vector3::new(-bearing(&p).sin(), bearing(&p).cos(), 0.0);
                let slip = tangent * (self.rotation_error_gain * turned);
                let n = Vector3::new(noise.sample(rng), noise.sample(rng), 0.0);
                Ok(TeachSample {
                    recorded_position: p + n + slip + Vector3::new(self.bias[0], self.bias[1], 0.0),
                    slot,
                    noise_std: self.noise_std,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RackSection {
    /// True pose of the slot-(0, 0) corner frame.
    pub placement: Placement,
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    pub slot_height: f64,
    /// Row-major '1'/'0' string; absent means full.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<String>,
    /// Shaft tip height above the tip top at the pickup goal.
    pub approach_height: f64,
    pub teaching: TeachingModel,
    /// Tip seating offset in its hole, per axis.
    pub seat_std: f64,
    /// Arm positioning error at the pickup goal, per axis.
    pub execution_std: f64,
    /// Each run turns the true rack by a uniform angle in ±`yaw_jitter`.
    pub yaw_jitter: f64,
    /// Each run shifts the true rack by a uniform offset in ±`xy_jitter` per axis.
    pub xy_jitter: f64,
}

impl Default for RackSection {
    fn default() -> Self {
        Self {
            placement: Placement::new(0.15, -0.03, 0.0, 0.0),
            rows: DEFAULT_ROWS,
            cols: DEFAULT_COLS,
            pitch: DEFAULT_PITCH,
            slot_height: DEFAULT_SLOT_HEIGHT,
            occupancy: None,
            approach_height: 0.02,
            teaching: TeachingModel::default(),
            seat_std: 0.1e-3,
            execution_std: 0.05e-3,
            yaw_jitter: 0.0,
            xy_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatesSection {
    /// Frames at well A1, top surface.
    pub source: Placement,
    pub destination: Placement,
    pub approach_height: f64,
    pub height: f64,
}

impl Default for PlatesSection {
    fn default() -> Self {
        Self {
            source: Placement::new(0.0, 0.17, 0.0144, 0.0),
            destination: Placement::new(0.0, -0.233, 0.0144, 0.0),
            approach_height: 0.06,
            height: 0.0144,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionSection {
    pub acceptable_residual: f64,
    /// Compliance as a fraction of `acceptable_residual`.
    pub compliance_fraction: f64,
    pub max_steps: usize,
    pub gain: f64,
    pub mode: LoopMode,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        Self {
            acceptable_residual: 0.5e-3,
            compliance_fraction: 0.3,
            max_steps: crate::correction::DEFAULT_MAX_STEPS,
            gain: crate::correction::DEFAULT_UPDATE_GAIN,
            mode: LoopMode::Open,
        }
    }
}

/// How much of the arm is simulated per tip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// Goal search plus a planned, parameterized cycle.
    Full,
    /// Goal search and kinematic correction moves, no path planning.
    Goals,
    /// Correction only; headings are the nominal inward ones.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub motion: MotionMode,
    pub yaw_step: f64,
    pub disposal_half_angle: f64,
    pub disposal: DisposalParams,
    pub rrt: PlannerParams,
    pub ik: IkParams,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            motion: MotionMode::Goals,
            yaw_step: DEFAULT_YAW_STEP,
            disposal_half_angle: DEFAULT_DISPOSAL_HALF_ANGLE,
            disposal: DisposalParams::default(),
            rrt: PlannerParams::default(),
            ik: IkParams::default(),
        }
    }
}

/// Drop physics for a released tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BounceParams {
    pub mass: f64,
    pub v0: f64,
    pub dt: f64,
    pub delta_f: f64,
    pub restitution: f64,
    pub tilt: f64,
}

impl Default for BounceParams {
    fn default() -> Self {
        Self {
            mass: 1e-3,
            v0: 1.0,
            dt: 5e-3,
            delta_f: 0.05,
            restitution: 0.5,
            tilt: 0.0,
        }
    }
}

impl BounceParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = [self.mass, self.v0, self.dt, self.delta_f, self.restitution, self.tilt]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.mass <= 0.0 || self.dt <= 0.0 || self.delta_f < 0.0 || self.v0 < 0.0 {
            return Err(SimError::Invalid("bounce parameters".into()));
        }
        if !(0.0..1.0).contains(&self.restitution) {
            return Err(SimError::Invalid("restitution must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Impacts whose force `m·v/Δt − ΔF` is positive. Each rebound keeps
/// `r·cos(tilt)` of the speed: a tilted tip lands side first and loses the
/// rest sideways.
pub fn bounce_count(p: &BounceParams) -> u32 {
    let keep = p.restitution * p.tilt.cos().abs();
    let mut v = p.v0;
    let mut n = 0;
    while n < MAX_IMPACTS && v >= REST_SPEED {
        if p.mass * v / p.dt - p.delta_f <= 0.0 {
            break;
        }
        n += 1;
        v *= keep;
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub arm: ArmParams,
    pub scene: SceneSection,
    pub rack: RackSection,
    pub plates: PlatesSection,
    pub classifier: NoisyOracleModel,
    pub correction: CorrectionSection,
    pub planner: PlannerSection,
    pub bounce: BounceParams,
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            arm: ArmParams::default(),
            scene: SceneSection::default(),
            rack: RackSection::default(),
            plates: PlatesSection::default(),
            classifier: NoisyOracleModel::default(),
            correction: CorrectionSection::default(),
            planner: PlannerSection::default(),
            bounce: BounceParams::default(),
            seed: default_seed(),
        }
    }
}

impl Scenario {
    /// Exact teaching, seating, execution and classification.
    pub fn ideal() -> Self {
        let mut s = Self::default();
        s.rack.teaching = TeachingModel::exact();
        s.rack.seat_std = 0.0;
        s.rack.execution_std = 0.0;
        s.classifier = NoisyOracleModel::perfect();
        s
    }

    /// Rack far out to the side where hand-guiding the arm slips with base
    /// rotation; the estimate drifts by several millimetres at the far tips.
    pub fn boundary_bias() -> Self {
        let mut s = Self::default();
        s.rack.placement = Placement::new(0.10, -0.26, 0.0, -1.4);
        let dir = 4.0 * PI / 3.0;
        s.rack.teaching = TeachingModel {
            bias: [0.8e-3 * dir.cos(), 0.8e-3 * dir.sin()],
            rotation_error_gain: 0.07,
            ..TeachingModel::default()
        };
        s.planner.motion = MotionMode::None;
        s
    }

    /// Rack yaw jittered per trial so the relative tip rotation spreads over
    /// the trained ranges; used for rotation-interval sweeps.
    pub fn rotation_sweep() -> Self {
        let mut s = Self::default();
        s.rack.yaw_jitter = 30f64.to_radians();
        s.classifier.rotation_sensitivity = 1.0;
        s.planner.motion = MotionMode::None;
        s
    }

    pub fn lattice(&self) -> Result<SpiralLattice, SimError> {
        Ok(SpiralLattice::build(self.correction.acceptable_residual, self.rack.pitch)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.classifier.validate()?;
        self.bounce.validate()?;
        let c = &self.correction;
        if !(c.gain >= 0.0 && c.gain <= 1.0) {
            return Err(SimError::Invalid("correction gain must lie in [0, 1]".into()));
        }
        if !(c.compliance_fraction >= 0.0) || c.max_steps == 0 {
            return Err(SimError::Invalid("correction settings".into()));
        }
        let r = &self.rack;
        for v in [r.seat_std, r.execution_std, r.teaching.noise_std, r.approach_height, r.yaw_jitter, r.xy_jitter] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Invalid("rack noise and heights must be non-negative".into()));
            }
        }
        if r.teaching.slots.len() < 2 {
            return Err(SimError::Invalid("teaching needs at least two slots".into()));
        }
        Workcell::build(self)?;
        self.lattice()?;
        Ok(())
    }
}

/// Resolved geometry of one scenario.
#[derive(Debug, Clone)]
pub struct Workcell {
    pub arm: ArmModel,
    pub scene: Scene,
    pub rack: RackModel,
    pub source: Pose,
    pub destination: Pose,
    pub waste: WasteBoxSpec,
    pub ready: JointConfig,
}

impl Workcell {
    pub fn build(s: &Scenario) -> Result<Self, SimError> {
        let arm = ArmModel::new(s.arm.clone())?;
        let r = &s.rack;
        let mut rack = RackModel::new(r.placement.pose(), r.rows, r.cols, r.pitch, r.slot_height)?;
        if let Some(bits) = &r.occupancy {
            rack.set_occupancy_bitstring(bits)?;
        }
        let mut scene = Scene::with_robot(RobotGeometry::default_arm());
        scene.boxes.push(OrientedBox::new(
            "table",
            Pose::from_xyz_yaw(0.0, 0.0, -0.02, 0.0),
            Vector3::new(0.6, 0.6, 0.02),
        ));
        let span = |n: usize, pitch: f64| (n - 1) as f64 * pitch;
        let (rx, ry) = (span(r.cols, r.pitch), span(r.rows, r.pitch));
        let body_h = (r.slot_height - 0.01).max(0.005);
        scene.boxes.push(OrientedBox::new(
            "rack",
            r.placement.pose() * Pose::from_xyz_yaw(rx / 2.0, ry / 2.0, body_h / 2.0, 0.0),
            Vector3::new(rx / 2.0 + r.pitch, ry / 2.0 + r.pitch, body_h / 2.0),
        ));
        for (name, p) in [("source_plate", &s.plates.source), ("destination_plate", &s.plates.destination)] {
            let h = s.plates.height;
            scene.boxes.push(OrientedBox::new(
                name,
                p.pose() * Pose::from_xyz_yaw(0.0495, 0.0315, -h / 2.0, 0.0),
                Vector3::new(0.0639, 0.04275, h / 2.0),
            ));
        }
        let w = &s.scene.waste_box;
        scene.boxes.push(OrientedBox::new(
            "waste_box",
            Pose::from_xyz_yaw(w.rim_center[0], w.rim_center[1], w.rim_center[2] - w.depth / 2.0, 0.0),
            Vector3::new(w.size[0] / 2.0, w.size[1] / 2.0, w.depth / 2.0),
        ));
        scene.boxes.extend(s.scene.boxes.iter().map(BoxSpec::to_box));
        scene.cylinders.extend(s.scene.cylinders.iter().map(|c| VerticalCylinder {
            name: c.name.clone(),
            base_center: Vector3::new(c.base[0], c.base[1], c.base[2]),
            radius: c.radius,
            height: c.height,
        }));
        scene.validate(&arm)?;
        Ok(Self {
            arm,
            scene,
            rack,
            source: s.plates.source.pose(),
            destination: s.plates.destination.pose(),
            waste: *w,
            ready: JointConfig(s.scene.ready),
        })
    }

    pub fn waste_pose(&self) -> Pose {
        let c = self.waste.rim_center;
        Pose::from_xyz_yaw(c[0], c[1], c[2], 0.0)
    }

    pub fn well_position(&self, plate: &Pose, slot: Slot, approach: f64) -> Vector3<f64> {
        plate.transform_point(&Vector3::new(
            slot.col as f64 * DEFAULT_PITCH,
            slot.row as f64 * DEFAULT_PITCH,
            approach,
        ))
    }

    /// Pickup, aspirate and dispense poses for `slot` given a rack estimate.
    pub fn nominal_poses(&self, s: &Scenario, estimate: &RackModel, slot: Slot) -> Result<[Pose; 3], SimError> {
        let tip = estimate.slot_position(slot)? + Vector3::new(0.0, 0.0, s.rack.approach_height);
        let src = self.well_position(&self.source, slot, s.plates.approach_height);
        let dst = self.well_position(&self.destination, slot, s.plates.approach_height);
        Ok([tip, src, dst].map(|p| downward_pose(p, inward_heading(&self.arm, &p))))
    }
}

/// Heading of a pose's x axis in the horizontal plane.
pub fn heading_of(pose: &Pose) -> f64 {
    let x = pose.transform_vector(&Vector3::x());
    x.y.atan2(x.x)
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Arm hovering over a tip; correction moves and rotations about the shaft
/// are checked with IK and collision.
struct KinematicActuator<'a> {
    cell: &'a Workcell,
    ik: IkParams,
    yaw_step: f64,
    pose: Pose,
    q: JointConfig,
    /// Shaft minus tip, world frame.
    deviation: Vector2<f64>,
    rack_yaw: f64,
    mask: NeighborMask,
}

impl KinematicActuator<'_> {
    fn solve(&self, pose: &Pose) -> Option<JointConfig> {
        let q = ik_from_seeds(&self.cell.arm, pose, &[self.q], &self.ik).ok()?;
        (self.cell.scene.clearance(&self.cell.arm, &q) > 0.0).then_some(q)
    }
}

impl Actuator for KinematicActuator<'_> {
    fn observe(&self) -> Observation {
        let h = heading_of(&self.pose);
        Observation {
            deviation: Rotation2::new(-h) * self.deviation,
            relative_yaw: wrap(self.rack_yaw - h),
            mask: self.mask,
        }
    }

    fn try_move(&mut self, delta: &Vector2<f64>) -> Result<bool, ActuatorError> {
        let world = Rotation2::new(heading_of(&self.pose)) * delta;
        let mut target = self.pose;
        target.position += Vector3::new(world.x, world.y, 0.0);
        match self.solve(&target) {
            Some(q) => {
                self.pose = target;
                self.q = q;
                self.deviation += world;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn search_new_rotation(&mut self) -> Result<bool, ActuatorError> {
        for o in interleaved_offsets(self.yaw_step).into_iter().skip(1) {
            let cand = self.pose.rotated_about_local_z(o);
            if let Some(q) = self.solve(&cand) {
                self.pose = cand;
                self.q = q;
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Correction in the end-effector plane without an arm model.
struct PlanarWorldActuator {
    heading: f64,
    deviation: Vector2<f64>,
    rack_yaw: f64,
    mask: NeighborMask,
}

impl Actuator for PlanarWorldActuator {
    fn observe(&self) -> Observation {
        Observation {
            deviation: Rotation2::new(-self.heading) * self.deviation,
            relative_yaw: wrap(self.rack_yaw - self.heading),
            mask: self.mask,
        }
    }

    fn try_move(&mut self, delta: &Vector2<f64>) -> Result<bool, ActuatorError> {
        self.deviation += Rotation2::new(self.heading) * delta;
        Ok(true)
    }

    fn search_new_rotation(&mut self) -> Result<bool, ActuatorError> {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TipOutcome {
    Attached,
    /// Judged aligned but did not seat.
    InsertionFailed,
    GaveUp,
    /// No reachable goal pose for some task step.
    GoalSearchFailed,
    /// Goals found but a segment could not be planned.
    PlanningFailed,
    SkippedEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipRecord {
    /// Position in picking order over the full rack.
    pub id: usize,
    pub slot: Slot,
    pub outcome: TipOutcome,
    pub steps: usize,
    /// Candidate goal poses rejected before feasible ones were found.
    pub infeasible_goal_poses: usize,
    pub rotations_searched: usize,
    pub planning_retries: usize,
    pub initial_deviation_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounces: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_duration: Option<f64>,
}

impl TipRecord {
    fn corrected(&self) -> bool {
        matches!(
            self.outcome,
            TipOutcome::Attached | TipOutcome::InsertionFailed | TipOutcome::GaveUp
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub attached: usize,
    pub insertion_failed: usize,
    pub gave_up: usize,
    pub unreachable: usize,
    pub skipped: usize,
    /// Attached over attempted (non-skipped) tips.
    pub success_rate: f64,
    /// Mean correction moves over tips that reached the correction stage.
    pub average_steps: f64,
    pub max_infeasible: usize,
}

impl Summary {
    pub fn from_tips(tips: &[TipRecord]) -> Self {
        let count = |o: TipOutcome| tips.iter().filter(|t| t.outcome == o).count();
        let skipped = count(TipOutcome::SkippedEmpty);
        let attached = count(TipOutcome::Attached);
        let corrected: Vec<&TipRecord> = tips.iter().filter(|t| t.corrected()).collect();
        let attempted = tips.len() - skipped;
        Self {
            total: tips.len(),
            attached,
            insertion_failed: count(TipOutcome::InsertionFailed),
            gave_up: count(TipOutcome::GaveUp),
            unreachable: count(TipOutcome::GoalSearchFailed) + count(TipOutcome::PlanningFailed),
            skipped,
            success_rate: if attempted == 0 { 1.0 } else { attached as f64 / attempted as f64 },
            average_steps: if corrected.is_empty() {
                0.0
            } else {
                corrected.iter().map(|t| t.steps).sum::<usize>() as f64 / corrected.len() as f64
            },
            max_infeasible: tips.iter().map(|t| t.infeasible_goal_poses).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub summary: Summary,
    pub tips: Vec<TipRecord>,
}

impl RunMetrics {
    fn new(seed: u64, rows: usize, cols: usize, tips: Vec<TipRecord>) -> Self {
        Self {
            seed,
            rows,
            cols,
            summary: Summary::from_tips(&tips),
            tips,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One value per slot, rows top to bottom.
    pub fn grid(&self, value: impl Fn(&TipRecord) -> f64) -> Vec<Vec<f64>> {
        let mut g = vec![vec![f64::NAN; self.cols]; self.rows];
        for t in &self.tips {
            g[t.slot.row][t.slot.col] = value(t);
        }
        g
    }

    pub fn steps_grid(&self) -> Vec<Vec<f64>> {
        self.grid(|t| if t.corrected() { t.steps as f64 } else { f64::NAN })
    }

    pub fn success_grid(&self) -> Vec<Vec<f64>> {
        self.grid(|t| f64::from(u8::from(t.outcome == TipOutcome::Attached)))
    }

    pub fn infeasible_grid(&self) -> Vec<Vec<f64>> {
        self.grid(|t| t.infeasible_goal_poses as f64)
    }
}

/// Comma-separated rows; NaN cells are left empty.
pub fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { format!("{v}") })
            .collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Mean of several grids cell by cell, ignoring NaN.
pub fn mean_grid(grids: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let Some(first) = grids.first() else {
        return Vec::new();
    };
    let mut out = first.clone();
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let vals: Vec<f64> = grids.iter().map(|g| g[r][c]).filter(|v| !v.is_nan()).collect();
            *cell = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        }
    }
    out
}

struct Streams {
    teaching: ChaCha8Rng,
    noise: ChaCha8Rng,
    classifier: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            teaching: stream(1),
            noise: stream(2),
            classifier: stream(3),
        }
    }
}

/// Goal sources for one tip: ready, pickup, aspirate, dispense, disposal.
fn goal_sources<'a>(
    s: &Scenario,
    cell: &'a Workcell,
    poses: &[Pose; 3],
    seeds: &[JointConfig],
) -> Result<(FixedGoal, [GoalSearch<'a>; 4]), SimError> {
    let p = &s.planner;
    let margin = p.rrt.clearance_margin;
    let yaw = |pose: &Pose| -> Result<GoalSearch<'a>, SimError> {
        Ok(GoalSearch::yaw(&cell.arm, &cell.scene, pose, p.yaw_step, seeds.to_vec(), p.ik)?.with_min_clearance(margin))
    };
    let cone = ConeSpec::new(cell.waste_pose().position, -Vector3::z(), p.disposal_half_angle)?;
    let disposal = GoalSearch::disposal(
        &cell.arm,
        &cell.scene,
        &cell.waste_pose(),
        &cone,
        &p.disposal,
        seeds.to_vec(),
        p.ik,
    )?
    .with_min_clearance(margin);
    Ok((
        FixedGoal::new(&cell.arm, cell.ready),
        [yaw(&poses[0])?, yaw(&poses[1])?, yaw(&poses[2])?, disposal],
    ))
}

/// Plan the full five-goal cycle for one slot using the true rack pose.
pub fn plan_cycle(s: &Scenario, cell: &Workcell, slot: Slot, seed: u64) -> Result<CyclePlan, SimError> {
    let poses = cell.nominal_poses(s, &cell.rack, slot)?;
    let (mut ready, mut searches) = goal_sources(s, cell, &poses, &[cell.ready])?;
    let [a, b, c, d] = &mut searches;
    let mut sources: [&mut dyn GoalSource; 5] = [&mut ready, a, b, c, d];
    let params = PlannerParams { seed, ..s.planner.rrt };
    let planner = RrtPlanner {
        scene: &cell.scene,
        arm: &cell.arm,
        params,
    };
    Ok(plan_dispense_cycle(&mut sources, &planner, params.max_goal_retries)?)
}

/// Result of the goal stage for one tip.
enum GoalStage {
    Found {
        pickup: GoalCandidate,
        disposal_tilt: f64,
        rejected: usize,
        retries: usize,
        duration: Option<f64>,
    },
    Failed(TipOutcome, usize),
}

fn goal_stage(s: &Scenario, cell: &Workcell, poses: &[Pose; 3], tip: usize) -> Result<GoalStage, SimError> {
    let (mut ready, mut searches) = goal_sources(s, cell, poses, &[cell.ready])?;
    if s.planner.motion == MotionMode::Full {
        let [a, b, c, d] = &mut searches;
        let mut sources: [&mut dyn GoalSource; 5] = [&mut ready, a, b, c, d];
        let params = PlannerParams {
            seed: s.planner.rrt.seed.wrapping_add(s.seed.wrapping_mul(1000)).wrapping_add(tip as u64),
            ..s.planner.rrt
        };
        let planner = RrtPlanner {
            scene: &cell.scene,
            arm: &cell.arm,
            params,
        };
        let result = plan_dispense_cycle(&mut sources, &planner, params.max_goal_retries);
        let rejected = sources.iter().map(|s| s.rejected()).sum();
        return Ok(match result {
            Ok(plan) => GoalStage::Found {
                pickup: plan.goals[1],
                disposal_tilt: plan.goals[4].tilt,
                rejected,
                retries: plan.total_retries(),
                duration: Some(plan.duration()),
            },
            Err(CycleFailure::GoalSearch { .. }) => GoalStage::Failed(TipOutcome::GoalSearchFailed, rejected),
            Err(CycleFailure::Planning { .. }) => GoalStage::Failed(TipOutcome::PlanningFailed, rejected),
        });
    }
    let mut found = Vec::with_capacity(4);
    for g in searches.iter_mut() {
        match g.next() {
            Some(c) => found.push(c),
            None => {
                let rejected = searches.iter().map(|g| g.rejected()).sum();
                return Ok(GoalStage::Failed(TipOutcome::GoalSearchFailed, rejected));
            }
        }
    }
    Ok(GoalStage::Found {
        pickup: found[0],
        disposal_tilt: found[3].tilt,
        rejected: searches.iter().map(|g| g.rejected()).sum(),
        retries: 0,
        duration: None,
    })
}

/// Run every tip of the rack once.
pub fn run_scenario(s: &Scenario) -> Result<RunMetrics, SimError> {
    s.validate()?;
    let cell = Workcell::build(s)?;
    let lattice = s.lattice()?;
    let mut streams = Streams::new(s.seed);
    let mut truth = cell.rack.clone();
    let (dyaw, dx, dy) = (
        s.rack.yaw_jitter * streams.teaching.random_range(-1.0..=1.0),
        s.rack.xy_jitter * streams.teaching.random_range(-1.0..=1.0),
        s.rack.xy_jitter * streams.teaching.random_range(-1.0..=1.0),
    );
    truth.pose = Pose::from_xyz_yaw(dx, dy, 0.0, 0.0) * truth.pose * Pose::from_xyz_yaw(0.0, 0.0, 0.0, dyaw);
    let samples = s.rack.teaching.record(&truth, &mut streams.teaching)?;
    let fit = fit_rack_pose(&samples, truth.pitch, truth.slot_height)?;
    let mut estimate = truth.clone();
    estimate.pose = fit.pose;

    let classifier = NoisyOracle { model: s.classifier };
    let params = CorrectionParams::with_relative_compliance(&lattice, s.correction.compliance_fraction);
    let params = CorrectionParams {
        max_steps: s.correction.max_steps,
        ..params
    };
    let seat = Normal::new(0.0, s.rack.seat_std).map_err(|e| SimError::Invalid(e.to_string()))?;
    let exec = Normal::new(0.0, s.rack.execution_std).map_err(|e| SimError::Invalid(e.to_string()))?;
    let rack_yaw = truth.pose.yaw();

    let order = crate::labware::routine_order(truth.rows(), truth.cols());
    let mut tips = Vec::with_capacity(order.len());
    for (id, &slot) in order.iter().enumerate() {
        // always draw, so that every slot sees the same noise whatever happens before it
        let seat_off = Vector2::new(seat.sample(&mut streams.noise), seat.sample(&mut streams.noise));
        let exec_off = Vector2::new(exec.sample(&mut streams.noise), exec.sample(&mut streams.noise));
        let mut rec = TipRecord {
            id,
            slot,
            outcome: TipOutcome::SkippedEmpty,
            steps: 0,
            infeasible_goal_poses: 0,
            rotations_searched: 0,
            planning_retries: 0,
            initial_deviation_mm: 0.0,
            bounces: None,
            cycle_duration: None,
        };
        if !truth.is_occupied(slot)? {
            tips.push(rec);
            continue;
        }
        let poses = cell.nominal_poses(s, &estimate, slot)?;
        let goal = match s.planner.motion {
            MotionMode::None => None,
            _ => match goal_stage(s, &cell, &poses, id)? {
                GoalStage::Found {
                    pickup,
                    disposal_tilt,
                    rejected,
                    retries,
                    duration,
                } => {
                    rec.infeasible_goal_poses = rejected;
                    rec.planning_retries = retries;
                    rec.cycle_duration = duration;
                    let drop = s.planner.disposal.drop_height + cell.waste.depth;
                    rec.bounces = Some(bounce_count(&BounceParams {
                        v0: (2.0 * GRAVITY * drop).sqrt(),
                        tilt: disposal_tilt,
                        ..s.bounce
                    }));
                    Some(pickup)
                }
                GoalStage::Failed(outcome, rejected) => {
                    rec.outcome = outcome;
                    rec.infeasible_goal_poses = rejected;
                    tips.push(rec);
                    continue;
                }
            },
        };

        let est_xy = estimate.slot_position(slot)?.xy();
        let true_xy = truth.slot_position(slot)?.xy();
        let deviation = est_xy - true_xy + exec_off - seat_off;
        rec.initial_deviation_mm = deviation.norm() * 1e3;

        let outcome = match goal {
            Some(g) => {
                let mut act = KinematicActuator {
                    cell: &cell,
                    ik: s.planner.ik,
                    yaw_step: s.planner.yaw_step,
                    pose: g.pose,
                    q: g.q,
                    deviation,
                    rack_yaw,
                    mask: truth.neighbor_mask(slot),
                };
                let out = correction_loop(&lattice, &classifier, &mut act, &params, &mut streams.classifier)?;
                (out, heading_of(&act.pose))
            }
            None => {
                let heading = heading_of(&poses[0]);
                let mut act = PlanarWorldActuator {
                    heading,
                    deviation,
                    rack_yaw,
                    mask: truth.neighbor_mask(slot),
                };
                let out = correction_loop(&lattice, &classifier, &mut act, &params, &mut streams.classifier)?;
                (out, heading)
            }
        };
        let (out, heading) = outcome;
        rec.steps = out.steps();
        rec.rotations_searched = out.rotations_searched;
        rec.outcome = match out.result {
            CorrectionResult::Attached => TipOutcome::Attached,
            CorrectionResult::InsertionFailed => TipOutcome::InsertionFailed,
            CorrectionResult::GaveUp => TipOutcome::GaveUp,
        };
        if out.result == CorrectionResult::Attached {
            truth.remove_tip(slot)?;
            estimate.set_occupied(slot, false)?;
        }
        if s.correction.mode == LoopMode::Closed && out.state.last_class.is_aligned() {
            // what had to be corrected is what the goal was off by
            let seen = -out.state.estimated_total_correction;
            let world = Rotation2::new(heading) * seen;
            let local = Rotation2::new(-estimate.pose.yaw()) * world;
            estimate = closed_loop_update(&estimate, &local, s.correction.gain);
        }
        tips.push(rec);
    }
    Ok(RunMetrics::new(s.seed, truth.rows(), truth.cols(), tips))
}

/// Seed of trial `k` in a batch started from `seed`.
pub fn trial_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64)
}

/// Independent trials in parallel; results are in trial order.
pub fn run_trials(s: &Scenario, trials: usize) -> Result<Vec<RunMetrics>, SimError> {
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut t = s.clone();
            t.seed = trial_seed(s.seed, k);
            run_scenario(&t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub trials: usize,
    pub tips: usize,
    pub attached: usize,
    pub success_rate: f64,
    pub average_steps: f64,
    pub max_infeasible: usize,
}

impl BatchSummary {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let all: Vec<TipRecord> = runs.iter().flat_map(|r| r.tips.iter().cloned()).collect();
        let s = Summary::from_tips(&all);
        Self {
            trials: runs.len(),
            tips: s.total - s.skipped,
            attached: s.attached,
            success_rate: s.success_rate,
            average_steps: s.average_steps,
            max_infeasible: s.max_infeasible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub interval_deg: f64,
    pub success_rate: f64,
    pub average_steps: f64,
}

/// Rerun `base` with the classifier trained at each rotation interval. The
/// same trial seeds are used for every interval.
pub fn sweep_rotation_intervals(base: &Scenario, intervals: &[f64], trials: usize) -> Result<Vec<SweepRow>, SimError> {
    intervals
        .iter()
        .map(|&iv| {
            let mut s = base.clone();
            s.classifier = s.classifier.with_interval(iv);
            let runs = run_trials(&s, trials)?;
            let b = BatchSummary::from_runs(&runs);
            Ok(SweepRow {
                interval_deg: iv,
                success_rate: b.success_rate,
                average_steps: b.average_steps,
            })
        })
        .collect()
}

/// `interval_deg,success_rate,average_steps`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("interval_deg,success_rate,average_steps\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.interval_deg, r.success_rate, r.average_steps).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bounce_trivial_cases() {
        let p = BounceParams::default();
        let absorb = BounceParams {
            delta_f: p.mass * p.v0 / p.dt,
            ..p
        };
        assert_eq!(bounce_count(&absorb), 0);
        assert!(bounce_count(&BounceParams { restitution: 0.0, ..p }) <= 1);
        assert_eq!(bounce_count(&BounceParams { restitution: 0.0, ..p }), 1);
    }

    #[test]
    fn bounce_matches_hand_count() {
        // F_i = 0.2·0.5^i − 0.05 stays positive for i = 0, 1
        let p = BounceParams::default();
        assert_eq!(bounce_count(&p), 2);
    }

    #[test]
    fn tilt_never_adds_bounces() {
        for i in 0..50 {
            let v0 = 0.05 + 0.1 * i as f64;
            let p = BounceParams { v0, ..Default::default() };
            let tilted = BounceParams {
                tilt: 30f64.to_radians(),
                ..p
            };
            assert!(bounce_count(&tilted) <= bounce_count(&p));
        }
    }

    proptest! {
        #[test]
        fn bounce_monotone(v0 in 0.0f64..5.0, dv in 0.0f64..2.0, df in 0.0f64..0.5, ddf in 0.0f64..0.5,
                           r in 0.0f64..0.95, tilt in 0.0f64..1.2) {
            let p = BounceParams { v0, delta_f: df, restitution: r, tilt, ..Default::default() };
            let stickier = BounceParams { delta_f: df + ddf, ..p };
            let faster = BounceParams { v0: v0 + dv, ..p };
            prop_assert!(bounce_count(&stickier) <= bounce_count(&p));
            prop_assert!(bounce_count(&faster) >= bounce_count(&p));
        }
    }

    #[test]
    fn default_workcell_is_clear_at_ready() {
        let s = Scenario::default();
        let cell = Workcell::build(&s).unwrap();
        assert!(cell.scene.clearance(&cell.arm, &cell.ready) > s.planner.rrt.clearance_margin);
    }

    #[test]
    fn ideal_world_needs_no_correction() {
        let mut s = Scenario::ideal();
        s.planner.motion = MotionMode::None;
        let m = run_scenario(&s).unwrap();
        assert_eq!(m.summary.attached, 96);
        assert_eq!(m.summary.average_steps, 0.0);
    }

    #[test]
    fn ideal_world_with_goal_search() {
        let s = Scenario::ideal();
        let m = run_scenario(&s).unwrap();
        assert_eq!(m.summary.attached, 96, "{:?}", m.summary);
        assert_eq!(m.summary.average_steps, 0.0);
        assert!(m.tips.iter().all(|t| t.bounces.is_some()));
    }

    #[test]
    fn tips_are_conserved() {
        let mut s = Scenario::default();
        s.planner.motion = MotionMode::None;
        s.rack.occupancy = Some(format!("{}{}", "0".repeat(10), "1".repeat(86)));
        let m = run_scenario(&s).unwrap();
        let sm = m.summary;
        assert_eq!(sm.skipped, 10);
        assert_eq!(sm.attached + sm.insertion_failed + sm.gave_up + sm.unreachable + sm.skipped, 96);
    }

    #[test]
    fn summary_recomputes_from_tips() {
        let mut s = Scenario::default();
        s.planner.motion = MotionMode::None;
        let m = run_scenario(&s).unwrap();
        assert_eq!(Summary::from_tips(&m.tips), m.summary);
        let back: RunMetrics = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn same_seed_same_metrics() {
        let mut s = Scenario::default();
        s.planner.motion = MotionMode::None;
        assert_eq!(run_scenario(&s).unwrap(), run_scenario(&s).unwrap());
        let a = run_trials(&s, 4).unwrap();
        let b = run_trials(&s, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn closed_loop_beats_constant_bias() {
        for b in [0.5e-3, 1.0e-3, 2.0e-3, 3.0e-3] {
            for dir in [0.0, 1.0, 2.5] {
                let mut s = Scenario::ideal();
                s.planner.motion = MotionMode::None;
                s.rack.teaching.bias = [b * f64::cos(dir), b * f64::sin(dir)];
                let open = run_scenario(&s).unwrap().summary;
                s.correction.mode = LoopMode::Closed;
                let closed = run_scenario(&s).unwrap().summary;
                assert!(
                    closed.average_steps < open.average_steps,
                    "bias {b} dir {dir}: {} vs {}",
                    closed.average_steps,
                    open.average_steps
                );
            }
        }
    }

    #[test]
    fn grids_have_rack_shape() {
        let mut s = Scenario::default();
        s.planner.motion = MotionMode::None;
        let m = run_scenario(&s).unwrap();
        let csv = grid_csv(&m.steps_grid());
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().all(|l| l.split(',').count() == 12));
    }

    #[test]
    fn single_interval_sweep() {
        let mut s = Scenario::default();
        s.planner.motion = MotionMode::None;
        let rows = sweep_rotation_intervals(&s, &[5.0], 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(sweep_csv(&rows).lines().count(), 2);
    }
}
