//! Deviation classification and the classify, correct, reclassify loop.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Rotation2, Vector2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::labware::{routine_patterns, Direction, NeighborMask, NeighborState, RackModel, DEFAULT_COLS, DEFAULT_ROWS};
use crate::spiral::{ClassId, SpiralLattice};

pub const DEFAULT_MAX_STEPS: usize = 10;
pub const DEFAULT_UPDATE_GAIN: f64 = 0.5;
pub const DEFAULT_ROTATION_INTERVAL_DEG: f64 = 5.0;

/// Rack rotations, in degrees, the classifier was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSet {
    pub interval_deg: f64,
}

impl RotationSet {
    pub const RANGES_DEG: [(f64, f64); 2] = [(-30.0, 30.0), (150.0, 210.0)];

    pub fn new(interval_deg: f64) -> Self {
        Self { interval_deg }
    }

    /// Angles spreading out from the middle of each range in `interval_deg`
    /// steps, so coarse intervals stay centred instead of favouring one end.
    pub fn angles_deg(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (lo, hi) in Self::RANGES_DEG {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let n = (half / self.interval_deg + 1e-9).floor() as i64;
            out.extend((-n..=n).map(|k| mid + k as f64 * self.interval_deg));
        }
        out
    }

    /// Angular distance in degrees from `yaw` (radians) to the closest trained rotation.
    pub fn distance_deg(&self, yaw: f64) -> f64 {
        let y = yaw.to_degrees();
        self.angles_deg()
            .into_iter()
            .map(|a| {
                let d = (y - a).rem_euclid(360.0);
                d.min(360.0 - d)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// One training image: a lattice class seen at one rack rotation with one
/// neighbor availability pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub class: ClassId,
    pub rotation_deg: f64,
    pub mask: NeighborMask,
}

/// Every (class, rotation, routine pattern) combination for a data collection run.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub classes: usize,
    pub rotations: Vec<f64>,
    pub patterns: Vec<NeighborMask>,
}

impl TrainingPlan {
    pub fn new(lattice: &SpiralLattice, rotations: &RotationSet) -> Self {
        Self {
            classes: lattice.len(),
            rotations: rotations.angles_deg(),
            patterns: routine_patterns(DEFAULT_ROWS, DEFAULT_COLS),
        }
    }

    pub fn samples_per_class(&self) -> usize {
        self.rotations.len() * self.patterns.len()
    }

    pub fn total(&self) -> usize {
        self.classes * self.samples_per_class()
    }

    pub fn iter(&self) -> impl Iterator<Item = TrainingSample> + '_ {
        (0..self.classes).flat_map(move |c| {
            self.rotations.iter().flat_map(move |&r| {
                self.patterns.iter().map(move |&m| TrainingSample {
                    class: ClassId(c),
                    rotation_deg: r,
                    mask: m,
                })
            })
        })
    }
}

/// What the cameras see around the shaft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Shaft position minus target tip position, end-effector frame, metres.
    pub deviation: Vector2<f64>,
    /// Rack heading minus end-effector heading, radians.
    pub relative_yaw: f64,
    pub mask: NeighborMask,
}

impl Observation {
    pub fn centered(deviation: Vector2<f64>) -> Self {
        Self {
            deviation,
            relative_yaw: PI,
            mask: NeighborMask::full(),
        }
    }

    /// Offset of the shaft from the closest visible tip. Beyond half a pitch
    /// the cameras center on a neighboring tip instead of the target.
    pub fn apparent_deviation(&self, pitch: f64) -> Vector2<f64> {
        let rot = Rotation2::new(self.relative_yaw);
        let mut best = self.deviation;
        for dir in Direction::ALL {
            if self.mask.get(dir) != NeighborState::Occupied {
                continue;
            }
            let (dr, dc) = dir.offset();
            let n = rot * Vector2::new(dc as f64 * pitch, dr as f64 * pitch);
            let rel = self.deviation - n;
            if rel.norm() < best.norm() {
                best = rel;
            }
        }
        best
    }
}

pub trait Classifier {
    /// A class id in `0..lattice.len()`.
    fn classify(&self, lattice: &SpiralLattice, obs: &Observation, rng: &mut dyn RngCore) -> ClassId;
}

/// Reports the nearest lattice node of the apparent deviation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectClassifier;

impl Classifier for PerfectClassifier {
    fn classify(&self, lattice: &SpiralLattice, obs: &Observation, _: &mut dyn RngCore) -> ClassId {
        lattice
            .nearest_class(&obs.apparent_deviation(lattice.tip_pitch()))
            .class
    }
}

/// Replays a fixed class sequence, repeating the last entry.
#[derive(Debug)]
pub struct ScriptedClassifier {
    script: Vec<ClassId>,
    next: Cell<usize>,
}

impl ScriptedClassifier {
    pub fn new(script: Vec<ClassId>) -> Self {
        assert!(!script.is_empty(), "script needs at least one class");
        Self {
            script,
            next: Cell::new(0),
        }
    }
}

impl Classifier for ScriptedClassifier {
    fn classify(&self, _: &SpiralLattice, _: &Observation, _: &mut dyn RngCore) -> ClassId {
        let i = self.next.get();
        self.next.set(i + 1);
        self.script[i.min(self.script.len() - 1)]
    }
}

/// Symbolic stand-in for an image classifier: noisy measurement, then an
/// occasional swap to a nearby class, more often at rack rotations far from
/// the trained ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisyOracleModel {
    pub misclassify_prob: f64,
    /// Swaps land on a class 1..=radius lattice hops away.
    pub neighbor_confusion_radius: u32,
    /// Per-axis standard deviation of the deviation measurement, metres.
    pub deviation_measurement_std: f64,
    /// Relative increase of `misclassify_prob` per degree between the rack
    /// rotation and the closest trained rotation.
    pub rotation_sensitivity: f64,
    pub rotation_interval_deg: f64,
    /// Constant measurement offset, metres.
    pub bias: [f64; 2],
    /// Scale the swap probability by ring / rings, so the aligned class is
    /// never swapped and the outer ring is swapped at the full rate.
    pub ring_weighted_swaps: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("misclassify_prob must lie in [0, 1]")]
    Probability,
    #[error("noise and sensitivity values must be finite and non-negative")]
    Negative,
    #[error("rotation interval must be positive")]
    Interval,
}

impl NoisyOracleModel {
    pub fn perfect() -> Self {
        Self {
            misclassify_prob: 0.0,
            neighbor_confusion_radius: 1,
            deviation_measurement_std: 0.0,
            rotation_sensitivity: 0.0,
            rotation_interval_deg: DEFAULT_ROTATION_INTERVAL_DEG,
            bias: [0.0; 2],
            ring_weighted_swaps: false,
        }
    }

    /// Two-camera transformer-like accuracy: about 96% of predictions within
    /// 1 mm of the true deviation on the default lattice.
    pub fn vit_like() -> Self {
        Self {
            misclassify_prob: 0.06,
            neighbor_confusion_radius: 1,
            deviation_measurement_std: 0.05e-3,
            rotation_sensitivity: 0.4,
            rotation_interval_deg: DEFAULT_ROTATION_INTERVAL_DEG,
            bias: [0.0; 2],
            ring_weighted_swaps: true,
        }
    }

    /// Same as [`NoisyOracleModel::vit_like`]; both cameras contribute.
    pub fn dual_signal() -> Self {
        Self::vit_like()
    }

    /// One camera only: a lateral offset the model cannot see plus more swaps.
    pub fn single_signal_biased() -> Self {
        Self {
            misclassify_prob: 0.3,
            neighbor_confusion_radius: 1,
            deviation_measurement_std: 0.3e-3,
            rotation_sensitivity: 0.4,
            rotation_interval_deg: DEFAULT_ROTATION_INTERVAL_DEG,
            bias: [0.2e-3, 0.0],
            ring_weighted_swaps: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.misclassify_prob) {
            return Err(ModelError::Probability);
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.deviation_measurement_std)
            || !ok(self.rotation_sensitivity)
            || !self.bias.iter().all(|b| b.is_finite())
        {
            return Err(ModelError::Negative);
        }
        if !(self.rotation_interval_deg > 0.0) {
            return Err(ModelError::Interval);
        }
        Ok(())
    }

    pub fn with_interval(mut self, interval_deg: f64) -> Self {
        self.rotation_interval_deg = interval_deg;
        self
    }

    /// Swap probability at a given relative rack yaw.
    pub fn effective_misclassify_prob(&self, relative_yaw: f64) -> f64 {
        let d = RotationSet::new(self.rotation_interval_deg).distance_deg(relative_yaw);
        (self.misclassify_prob * (1.0 + self.rotation_sensitivity * d)).min(1.0)
    }
}

impl Default for NoisyOracleModel {
    fn default() -> Self {
        Self::vit_like()
    }
}

/// Noisy classification. Always consumes the same number of random draws so
/// that runs with different settings stay aligned on one stream.
///
/// A swap never turns an off-center reading into the aligned class; swaps
/// from the aligned class go to a ring-1..radius class.
pub fn oracle_classify(
    lattice: &SpiralLattice,
    obs: &Observation,
    model: &NoisyOracleModel,
    rng: &mut dyn RngCore,
) -> ClassId {
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    let swap_draw: f64 = rng.random();
    let pick_draw: f64 = rng.random();

    let measured = obs.apparent_deviation(lattice.tip_pitch())
        + Vector2::new(model.bias[0], model.bias[1])
        + Vector2::new(nx, ny) * model.deviation_measurement_std;
    let class = lattice.nearest_class(&measured).class;
    let mut p = model.effective_misclassify_prob(obs.relative_yaw);
    if model.ring_weighted_swaps && lattice.rings() > 0 {
        p *= f64::from(lattice.ring_of(class).unwrap_or(0)) / f64::from(lattice.rings());
    }
    if swap_draw >= p {
        return class;
    }
    let pool: Vec<ClassId> = lattice
        .neighbors_within(class, model.neighbor_confusion_radius)
        .into_iter()
        .filter(|c| *c != class && !c.is_aligned())
        .collect();
    if pool.is_empty() {
        return class;
    }
    pool[((pick_draw * pool.len() as f64) as usize).min(pool.len() - 1)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyOracle {
    pub model: NoisyOracleModel,
}

impl Classifier for NoisyOracle {
    fn classify(&self, lattice: &SpiralLattice, obs: &Observation, rng: &mut dyn RngCore) -> ClassId {
        oracle_classify(lattice, obs, &self.model, rng)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("actuator fault: {0}")]
    Fault(String),
}

/// Moves the end effector in its own plane and reports what it sees.
pub trait Actuator {
    fn observe(&self) -> Observation;

    /// Shift the shaft by `delta`. `Ok(false)` means no feasible motion exists
    /// at the current rotation about the shaft.
    fn try_move(&mut self, delta: &Vector2<f64>) -> Result<bool, ActuatorError>;

    /// Look for another rotation about the shaft that can continue.
    fn search_new_rotation(&mut self) -> Result<bool, ActuatorError>;
}

/// Planar end effector hovering over a tip, for simulation and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarActuator {
    pub deviation: Vector2<f64>,
    pub relative_yaw: f64,
    pub mask: NeighborMask,
    /// Number of upcoming moves to refuse as infeasible.
    pub refuse_moves: usize,
    pub rotation_step: f64,
    pub rotations_searched: usize,
}

impl PlanarActuator {
    pub fn new(deviation: Vector2<f64>, relative_yaw: f64, mask: NeighborMask) -> Self {
        Self {
            deviation,
            relative_yaw,
            mask,
            refuse_moves: 0,
            rotation_step: crate::kinematics::DEFAULT_YAW_STEP,
            rotations_searched: 0,
        }
    }
}

impl Actuator for PlanarActuator {
    fn observe(&self) -> Observation {
        Observation {
            deviation: self.deviation,
            relative_yaw: self.relative_yaw,
            mask: self.mask,
        }
    }

    fn try_move(&mut self, delta: &Vector2<f64>) -> Result<bool, ActuatorError> {
        if self.refuse_moves > 0 {
            self.refuse_moves -= 1;
            return Ok(false);
        }
        self.deviation += delta;
        Ok(true)
    }

    fn search_new_rotation(&mut self) -> Result<bool, ActuatorError> {
        // turning the end effector by +step turns world-fixed vectors by -step
        self.rotations_searched += 1;
        self.deviation = Rotation2::new(-self.rotation_step) * self.deviation;
        self.relative_yaw -= self.rotation_step;
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionParams {
    pub max_steps: usize,
    /// Extra deviation the tip tolerates when pushed on, metres.
    pub compliance: f64,
}

impl CorrectionParams {
    pub fn with_relative_compliance(lattice: &SpiralLattice, fraction: f64) -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            compliance: fraction * lattice.acceptable_residual(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionState {
    /// Correction moves made so far.
    pub counter: usize,
    pub scale: f64,
    pub last_class: ClassId,
    pub estimated_total_correction: Vector2<f64>,
}

impl Default for CorrectionState {
    fn default() -> Self {
        Self {
            counter: 0,
            scale: 1.0,
            last_class: ClassId::ALIGNED,
            estimated_total_correction: Vector2::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionResult {
    Attached,
    /// Judged aligned, but the tip did not seat.
    InsertionFailed,
    GaveUp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub class: ClassId,
    pub requested: Vector2<f64>,
    pub scale: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub result: CorrectionResult,
    pub state: CorrectionState,
    pub trace: Vec<TraceRecord>,
    pub rotations_searched: usize,
}

impl CorrectionOutcome {
    pub fn steps(&self) -> usize {
        self.state.counter
    }

    /// `step,class,move_x_mm,move_y_mm,scale,feasible`
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,class,move_x_mm,move_y_mm,scale,feasible\n");
        for r in &self.trace {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{},{}",
                r.step,
                r.class,
                r.requested.x * 1e3,
                r.requested.y * 1e3,
                r.scale,
                r.feasible
            )
            .unwrap();
        }
        s
    }
}

/// True when the tip seats: `|deviation| <= e + compliance`.
pub fn attach_check(deviation: &Vector2<f64>, e: f64, compliance: f64) -> bool {
    deviation.norm() <= e + compliance
}

/// Classify, move by the class's correction vector, reclassify. Each
/// non-aligned reclassification halves the next move. An infeasible move
/// triggers one search for another shaft rotation before giving up.
pub fn correction_loop(
    lattice: &SpiralLattice,
    classifier: &dyn Classifier,
    actuator: &mut dyn Actuator,
    params: &CorrectionParams,
    rng: &mut dyn RngCore,
) -> Result<CorrectionOutcome, ActuatorError> {
    let mut state = CorrectionState::default();
    let mut trace = Vec::new();
    let mut rotations = 0;
    loop {
        let obs = actuator.observe();
        let class = classifier.classify(lattice, &obs, rng);
        if class.is_aligned() {
            state.last_class = class;
            let seated = attach_check(&obs.deviation, lattice.acceptable_residual(), params.compliance);
            return Ok(CorrectionOutcome {
                result: if seated {
                    CorrectionResult::Attached
                } else {
                    CorrectionResult::InsertionFailed
                },
                state,
                trace,
                rotations_searched: rotations,
            });
        }
        if state.counter > 0 {
            state.scale /= 2.0;
        }
        state.last_class = class;
        if state.counter >= params.max_steps {
            return Ok(CorrectionOutcome {
                result: CorrectionResult::GaveUp,
                state,
                trace,
                rotations_searched: rotations,
            });
        }
        let request = lattice
            .correction_vector(class)
            .expect("classifier returned a lattice class")
            * state.scale;
        let mut feasible = actuator.try_move(&request)?;
        if !feasible {
            rotations += 1;
            if actuator.search_new_rotation()? {
                feasible = actuator.try_move(&request)?;
            }
        }
        state.counter += 1;
        trace.push(TraceRecord {
            step: state.counter,
            class,
            requested: request,
            scale: state.scale,
            feasible,
        });
        if !feasible {
            return Ok(CorrectionOutcome {
                result: CorrectionResult::GaveUp,
                state,
                trace,
                rotations_searched: rotations,
            });
        }
        state.estimated_total_correction += request;
    }
}

/// Shift the rack estimate against the deviation seen at the last tip so
/// later tips start closer. `deviation` is in the rack frame.
pub fn closed_loop_update(rack: &RackModel, deviation: &Vector2<f64>, gain: f64) -> RackModel {
    let mut out = rack.clone();
    let world = rack.pose.transform_vector(&nalgebra::Vector3::new(deviation.x, deviation.y, 0.0));
    out.pose = Pose::new(rack.pose.position - world * gain, rack.pose.rotation);
    out
}
