//! Tip racks: slot geometry, occupancy, pose fitting from taught points, and
//! neighbor-availability patterns.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

pub const DEFAULT_ROWS: usize = 8;
pub const DEFAULT_COLS: usize = 12;
pub const DEFAULT_PITCH: f64 = 9e-3;
/// Height of a seated tip's top above the rack frame origin. Generic 96-tip rack.
pub const DEFAULT_SLOT_HEIGHT: f64 = 0.055;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabwareError {
    #[error("slot ({row}, {col}) is outside the {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("slot ({row}, {col}) holds no tip")]
    EmptySlot { row: usize, col: usize },
    #[error("pose fit needs at least 2 teach samples, got {0}")]
    TooFewSamples(usize),
    #[error("teach samples must cover at least two distinct slots")]
    DegenerateSamples,
    #[error("occupancy string must have {expected} characters of '0'/'1', got {got:?}")]
    BadOccupancy { expected: usize, got: String },
    #[error("rack pitch must be positive")]
    InvalidPitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub row: usize,
    pub col: usize,
}

impl Slot {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RackModel {
    pub pose: Pose,
    rows: usize,
    cols: usize,
    pub pitch: f64,
    pub slot_height: f64,
    occupancy: Vec<bool>,
}

impl RackModel {
    /// Full 8x12 rack at `pose` with default pitch and slot height.
    pub fn full(pose: Pose) -> Self {
        Self::new(pose, DEFAULT_ROWS, DEFAULT_COLS, DEFAULT_PITCH, DEFAULT_SLOT_HEIGHT)
            .expect("default rack dimensions are valid")
    }

    pub fn new(
        pose: Pose,
        rows: usize,
        cols: usize,
        pitch: f64,
        slot_height: f64,
    ) -> Result<Self, LabwareError> {
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(LabwareError::InvalidPitch);
        }
        Ok(Self {
            pose,
            rows,
            cols,
            pitch,
            slot_height,
            occupancy: vec![true; rows * cols],
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn slot_count(&self) -> usize {
        self.rows * self.cols
    }

    fn index(&self, slot: Slot) -> Result<usize, LabwareError> {
        if slot.row < self.rows && slot.col < self.cols {
            Ok(slot.row * self.cols + slot.col)
        } else {
            Err(LabwareError::OutOfGrid {
                row: slot.row,
                col: slot.col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn contains(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    pub fn is_occupied(&self, slot: Slot) -> Result<bool, LabwareError> {
        self.index(slot).map(|i| self.occupancy[i])
    }

    pub fn set_occupied(&mut self, slot: Slot, occupied: bool) -> Result<(), LabwareError> {
        let i = self.index(slot)?;
        self.occupancy[i] = occupied;
        Ok(())
    }

    pub fn remove_tip(&mut self, slot: Slot) -> Result<(), LabwareError> {
        let i = self.index(slot)?;
        if !self.occupancy[i] {
            return Err(LabwareError::EmptySlot {
                row: slot.row,
                col: slot.col,
            });
        }
        self.occupancy[i] = false;
        Ok(())
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Row-major occupancy as '1'/'0' characters.
    pub fn occupancy_bitstring(&self) -> String {
        self.occupancy.iter().map(|&o| if o { '1' } else { '0' }).collect()
    }

    pub fn set_occupancy_bitstring(&mut self, bits: &str) -> Result<(), LabwareError> {
        let parsed: Option<Vec<bool>> = bits
            .chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect();
        match parsed {
            Some(v) if v.len() == self.slot_count() => {
                self.occupancy = v;
                Ok(())
            }
            _ => Err(LabwareError::BadOccupancy {
                expected: self.slot_count(),
                got: bits.to_string(),
            }),
        }
    }

    /// Slot coordinates in the rack frame, ignoring occupancy.
    pub fn slot_local(&self, slot: Slot) -> Vector3<f64> {
        Vector3::new(
            slot.col as f64 * self.pitch,
            slot.row as f64 * self.pitch,
            self.slot_height,
        )
    }

    /// World position of a slot's tip top, ignoring occupancy.
    pub fn slot_position(&self, slot: Slot) -> Result<Vector3<f64>, LabwareError> {
        self.index(slot)?;
        Ok(self.pose.transform_point(&self.slot_local(slot)))
    }

    /// World position of the tip seated at `slot`.
    pub fn tip_position(&self, slot: Slot) -> Result<Vector3<f64>, LabwareError> {
        if !self.is_occupied(slot)? {
            return Err(LabwareError::EmptySlot {
                row: slot.row,
                col: slot.col,
            });
        }
        self.slot_position(slot)
    }

    /// Order of consumption: start at slot (0, 0) and run along the long edge,
    /// stepping to the next line at each boundary. Empty slots are skipped.
    pub fn picking_sequence(&self) -> Vec<Slot> {
        routine_order(self.rows, self.cols)
            .into_iter()
            .filter(|&s| self.occupancy[s.row * self.cols + s.col])
            .collect()
    }

    pub fn neighbor_mask(&self, slot: Slot) -> NeighborMask {
        let mut cells = [NeighborState::OffGrid; 8];
        for (k, dir) in Direction::ALL.iter().enumerate() {
            let (dr, dc) = dir.offset();
            let (r, c) = (slot.row as isize + dr, slot.col as isize + dc);
            if self.contains(r, c) {
                cells[k] = if self.occupancy[r as usize * self.cols + c as usize] {
                    NeighborState::Occupied
                } else {
                    NeighborState::Empty
                };
            }
        }
        NeighborMask { cells }
    }
}

/// All slots of a rows x cols rack in picking order.
pub fn routine_order(rows: usize, cols: usize) -> Vec<Slot> {
    if cols >= rows {
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Slot::new(r, c)))
            .collect()
    } else {
        (0..cols)
            .flat_map(|c| (0..rows).map(move |r| Slot::new(r, c)))
            .collect()
    }
}

/// Neighbor directions; north is the previous row, east the next column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    /// (row delta, col delta)
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::N => (-1, 0),
            Direction::NE => (-1, 1),
            Direction::E => (0, 1),
            Direction::SE => (1, 1),
            Direction::S => (1, 0),
            Direction::SW => (1, -1),
            Direction::W => (0, -1),
            Direction::NW => (-1, -1),
        }
    }

    fn from_offset(dr: isize, dc: isize) -> Direction {
        *Direction::ALL
            .iter()
            .find(|d| d.offset() == (dr, dc))
            .expect("offset is a unit neighbor step")
    }

    fn index(self) -> usize {
        Direction::ALL.iter().position(|&d| d == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NeighborState {
    Occupied,
    Empty,
    /// The neighbor position falls outside the rack.
    OffGrid,
}

/// Occupancy of the eight slots around a target, ordered N, NE, E, SE, S, SW, W, NW.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeighborMask {
    pub cells: [NeighborState; 8],
}

impl NeighborMask {
    pub fn get(&self, dir: Direction) -> NeighborState {
        self.cells[dir.index()]
    }

    pub fn full() -> Self {
        Self {
            cells: [NeighborState::Occupied; 8],
        }
    }

    /// '1' occupied, '0' empty, 'x' off-grid; N first, clockwise.
    pub fn to_bitstring(&self) -> String {
        self.cells
            .iter()
            .map(|c| match c {
                NeighborState::Occupied => '1',
                NeighborState::Empty => '0',
                NeighborState::OffGrid => 'x',
            })
            .collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|&&c| c == NeighborState::Occupied)
            .count()
    }

    /// Visible availability: an off-grid position shows no tip, same as an empty one.
    pub fn visible(&self) -> NeighborMask {
        let mut cells = self.cells;
        for c in &mut cells {
            if *c == NeighborState::OffGrid {
                *c = NeighborState::Empty;
            }
        }
        NeighborMask { cells }
    }

    fn permuted(&self, sym: &Symmetry) -> NeighborMask {
        let mut cells = [NeighborState::OffGrid; 8];
        for dir in Direction::ALL {
            let (dr, dc) = dir.offset();
            let (nr, nc) = sym.apply(dr, dc);
            cells[Direction::from_offset(nr, nc).index()] = self.get(dir);
        }
        NeighborMask { cells }
    }
}

/// Where a target slot sits in the rack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Interior,
    Edge,
    Corner,
}

impl TargetKind {
    /// Neighbor positions that exist for the canonical placement
    /// (interior, top edge, top-left corner).
    pub fn present_directions(self) -> Vec<Direction> {
        Direction::ALL
            .iter()
            .copied()
            .filter(|d| {
                let (dr, dc) = d.offset();
                match self {
                    TargetKind::Interior => true,
                    TargetKind::Edge => dr >= 0,
                    TargetKind::Corner => dr >= 0 && dc >= 0,
                }
            })
            .collect()
    }

    /// Symmetries of the local neighborhood used when folding equivalent patterns.
    ///
    /// Interior targets use the rack's rectangle symmetries (identity, half turn,
    /// both axis mirrors); edge targets the mirror perpendicular to the edge; corner
    /// targets the diagonal swap of their two edge neighbors. This is the group
    /// that folds 296 raw patterns into 110 classes; the square group on interior
    /// targets would give 77.
    pub fn symmetry_group(self) -> Vec<Symmetry> {
        match self {
            TargetKind::Interior => vec![
                Symmetry::Identity,
                Symmetry::HalfTurn,
                Symmetry::MirrorRows,
                Symmetry::MirrorCols,
            ],
            TargetKind::Edge => vec![Symmetry::Identity, Symmetry::MirrorCols],
            TargetKind::Corner => vec![Symmetry::Identity, Symmetry::Transpose],
        }
    }

    /// Every occupancy combination of the existing neighbors: 2^8, 2^5 or 2^3 masks.
    pub fn patterns(self) -> Vec<NeighborMask> {
        let present = self.present_directions();
        (0u32..(1 << present.len()))
            .map(|bits| {
                let mut cells = [NeighborState::OffGrid; 8];
                for (i, d) in present.iter().enumerate() {
                    cells[d.index()] = if bits & (1 << i) != 0 {
                        NeighborState::Occupied
                    } else {
                        NeighborState::Empty
                    };
                }
                NeighborMask { cells }
            })
            .collect()
    }

    /// Number of pattern classes under [`TargetKind::symmetry_group`].
    pub fn reduced_count(self) -> usize {
        reduced_count(&self.patterns(), &self.symmetry_group())
    }
}

/// Point symmetries of the 3x3 neighborhood, acting on (row, col) offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    Identity,
    QuarterTurn,
    HalfTurn,
    ThreeQuarterTurn,
    MirrorRows,
    MirrorCols,
    Transpose,
    AntiTranspose,
}

impl Symmetry {
    pub const SQUARE: [Symmetry; 8] = [
        Symmetry::Identity,
        Symmetry::QuarterTurn,
        Symmetry::HalfTurn,
        Symmetry::ThreeQuarterTurn,
        Symmetry::MirrorRows,
        Symmetry::MirrorCols,
        Symmetry::Transpose,
        Symmetry::AntiTranspose,
    ];

    pub fn apply(self, dr: isize, dc: isize) -> (isize, isize) {
        match self {
            Symmetry::Identity => (dr, dc),
            Symmetry::QuarterTurn => (dc, -dr),
            Symmetry::HalfTurn => (-dr, -dc),
            Symmetry::ThreeQuarterTurn => (-dc, dr),
            Symmetry::MirrorRows => (-dr, dc),
            Symmetry::MirrorCols => (dr, -dc),
            Symmetry::Transpose => (dc, dr),
            Symmetry::AntiTranspose => (-dc, -dr),
        }
    }
}

/// Count orbits of `patterns` under `group` by canonical representatives.
pub fn reduced_count(patterns: &[NeighborMask], group: &[Symmetry]) -> usize {
    patterns
        .iter()
        .map(|m| group.iter().map(|g| m.permuted(g)).min().unwrap())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Neighbor directions the picking routine has not reached yet when it arrives at
/// an interior target. Every other neighbor has already been consumed.
pub fn routine_forward_directions(rows: usize, cols: usize) -> Vec<Direction> {
    let order = routine_order(rows.max(3), cols.max(3));
    let rank = |s: Slot| order.iter().position(|&o| o == s).unwrap();
    let center = Slot::new(1, 1);
    Direction::ALL
        .iter()
        .copied()
        .filter(|d| {
            let (dr, dc) = d.offset();
            let n = Slot::new((1 + dr) as usize, (1 + dc) as usize);
            rank(n) > rank(center)
        })
        .collect()
}

/// Visible availability patterns that can occur under the picking routine: the
/// consumed neighbors are vacant and each forward neighbor may or may not hold a
/// tip (rack boundary or missing tip).
pub fn routine_patterns(rows: usize, cols: usize) -> Vec<NeighborMask> {
    let forward = routine_forward_directions(rows, cols);
    (0u32..(1 << forward.len()))
        .map(|bits| {
            let mut cells = [NeighborState::Empty; 8];
            for (i, d) in forward.iter().enumerate() {
                if bits & (1 << i) != 0 {
                    cells[d.index()] = NeighborState::Occupied;
                }
            }
            NeighborMask { cells }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityCounts {
    pub total: usize,
    pub symmetry_reduced: usize,
    pub picking_routine: usize,
}

/// Raw, symmetry-reduced and routine-restricted neighbor-pattern counts for a
/// standard 8x12 rack.
pub fn count_availability_patterns() -> AvailabilityCounts {
    let kinds = [TargetKind::Interior, TargetKind::Edge, TargetKind::Corner];
    AvailabilityCounts {
        total: kinds.iter().map(|k| k.patterns().len()).sum(),
        symmetry_reduced: kinds.iter().map(|k| k.reduced_count()).sum(),
        picking_routine: routine_patterns(DEFAULT_ROWS, DEFAULT_COLS).len(),
    }
}

/// A position recorded while hand-guiding the arm to a slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeachSample {
    pub recorded_position: Vector3<f64>,
    pub slot: Slot,
    /// Expected noise of the recording, for bookkeeping only.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RackFit {
    pub pose: Pose,
    /// RMS distance between recorded positions and the fitted slot positions.
    pub rms: f64,
}

/// Least-squares rack pose from taught slot positions.
///
/// The rack is taken to rest flat, so only the heading about the vertical axis
/// and the translation are estimated. Slot `(row, col)` sits at
/// `(col * pitch, row * pitch, slot_height)` in the rack frame.
pub fn fit_rack_pose(
    samples: &[TeachSample],
    pitch: f64,
    slot_height: f64,
) -> Result<RackFit, LabwareError> {
    if samples.len() < 2 {
        return Err(LabwareError::TooFewSamples(samples.len()));
    }
    let local: Vec<Vector2<f64>> = samples
        .iter()
        .map(|s| Vector2::new(s.slot.col as f64 * pitch, s.slot.row as f64 * pitch))
        .collect();
    let world: Vec<Vector2<f64>> = samples
        .iter()
        .map(|s| s.recorded_position.xy())
        .collect();
    let n = samples.len() as f64;
    let local_mean = local.iter().sum::<Vector2<f64>>() / n;
    let world_mean = world.iter().sum::<Vector2<f64>>() / n;

    let (mut sin_acc, mut cos_acc, mut spread) = (0.0, 0.0, 0.0);
    for (u, x) in local.iter().zip(&world) {
        let (u, x) = (u - local_mean, x - world_mean);
        sin_acc += u.x * x.y - u.y * x.x;
        cos_acc += u.dot(&x);
        spread += u.norm_squared();
    }
    if spread < 1e-18 {
        return Err(LabwareError::DegenerateSamples);
    }
    let yaw = sin_acc.atan2(cos_acc);
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let rotated_mean = rot * Vector3::new(local_mean.x, local_mean.y, 0.0);
    let z = samples.iter().map(|s| s.recorded_position.z).sum::<f64>() / n - slot_height;
    let pose = Pose::new(
        Vector3::new(
            world_mean.x - rotated_mean.x,
            world_mean.y - rotated_mean.y,
            z,
        ),
        rot,
    );

    let sq: f64 = samples
        .iter()
        .map(|s| {
            let predicted = pose.transform_point(&Vector3::new(
                s.slot.col as f64 * pitch,
                s.slot.row as f64 * pitch,
                slot_height,
            ));
            (predicted - s.recorded_position).norm_squared()
        })
        .sum();
    Ok(RackFit {
        pose,
        rms: (sq / n).sqrt(),
    })
}
