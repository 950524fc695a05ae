//! Spiral lattice of deviation classes.
//!
//! Nodes sit on concentric regular hexagons whose sides are sampled at the edge
//! length, so the plane around the origin is tiled by equilateral triangles. Node 0
//! is the aligned position; ring 1 holds classes 1..=6 counter-clockwise from +x;
//! every ring starts on the +x axis and runs counter-clockwise.

use std::fmt;

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial unit steps for the six hexagon corners, counter-clockwise from +x.
const CORNER_DIRS: [(i32, i32); 6] = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("acceptable residual must be positive and finite, got {0}")]
    InvalidResidual(f64),
    #[error("tip pitch must be positive and finite, got {0}")]
    InvalidPitch(f64),
    #[error("edge length {edge} exceeds the admissible maximum sqrt(3)*e = {max}")]
    EdgeTooLong { edge: f64, max: f64 },
    #[error("pitch {pitch} is too small for a single ring at edge length {edge}")]
    NoRings { pitch: f64, edge: f64 },
    #[error("unknown class id {0}")]
    UnknownClass(usize),
}

/// Identifier of a deviation class; the index of its node in spiral order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl ClassId {
    pub const ALIGNED: ClassId = ClassId(0);

    pub fn is_aligned(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Result of quantizing a planar offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestClass {
    pub class: ClassId,
    /// Distance from the offset to the chosen node.
    pub distance: f64,
    /// False when the offset lies outside the lattice hull; the class is then the
    /// nearest boundary node and the residual bound does not apply.
    pub in_coverage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralLattice {
    edge_length: f64,
    rings: u32,
    acceptable_residual: f64,
    tip_pitch: f64,
    nodes: Vec<Vector2<f64>>,
    axial: Vec<(i32, i32)>,
}

impl SpiralLattice {
    /// Lattice at the largest admissible edge length `sqrt(3) * e`.
    pub fn build(acceptable_residual: f64, tip_pitch: f64) -> Result<Self, LatticeError> {
        Self::with_edge_length(acceptable_residual, tip_pitch, SQRT3 * acceptable_residual)
    }

    /// Lattice with an explicit (denser) edge length.
    ///
    /// The ring count is `floor(d / (2 L))`, which reduces to `floor(d / (2 sqrt(3) e))`
    /// at the default edge length.
    pub fn with_edge_length(
        acceptable_residual: f64,
        tip_pitch: f64,
        edge_length: f64,
    ) -> Result<Self, LatticeError> {
        if !(acceptable_residual > 0.0 && acceptable_residual.is_finite()) {
            return Err(LatticeError::InvalidResidual(acceptable_residual));
        }
        if !(tip_pitch > 0.0 && tip_pitch.is_finite()) {
            return Err(LatticeError::InvalidPitch(tip_pitch));
        }
        let max_edge = SQRT3 * acceptable_residual;
        if !(edge_length > 0.0) || edge_length > max_edge * (1.0 + 1e-12) {
            return Err(LatticeError::EdgeTooLong {
                edge: edge_length,
                max: max_edge,
            });
        }
        // A hair of slack so exact multiples do not lose a ring to rounding.
        let rings = (tip_pitch / (2.0 * edge_length) + 1e-9).floor();
        if rings < 1.0 {
            return Err(LatticeError::NoRings {
                pitch: tip_pitch,
                edge: edge_length,
            });
        }
        Ok(Self::from_parts(
            acceptable_residual,
            tip_pitch,
            edge_length,
            rings as u32,
        ))
    }

    /// Lattice holding only the aligned node; used when the pitch cannot fit a ring.
    pub fn single_node(acceptable_residual: f64, tip_pitch: f64) -> Self {
        Self::from_parts(
            acceptable_residual,
            tip_pitch,
            SQRT3 * acceptable_residual,
            0,
        )
    }

    fn from_parts(acceptable_residual: f64, tip_pitch: f64, edge_length: f64, rings: u32) -> Self {
        let mut axial = Vec::with_capacity(node_count_for(rings));
        axial.push((0, 0));
        for k in 1..=rings as i32 {
            for j in 0..6 {
                let (cq, cr) = CORNER_DIRS[j];
                let (nq, nr) = CORNER_DIRS[(j + 1) % 6];
                for s in 0..k {
                    axial.push((k * cq + s * (nq - cq), k * cr + s * (nr - cr)));
                }
            }
        }
        let nodes = axial
            .iter()
            .map(|&(q, r)| axial_to_plane(q, r, edge_length))
            .collect();
        Self {
            edge_length,
            rings,
            acceptable_residual,
            tip_pitch,
            nodes,
            axial,
        }
    }

    pub fn edge_length(&self) -> f64 {
        self.edge_length
    }

    pub fn rings(&self) -> u32 {
        self.rings
    }

    pub fn acceptable_residual(&self) -> f64 {
        self.acceptable_residual
    }

    pub fn tip_pitch(&self) -> f64 {
        self.tip_pitch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vector2<f64>] {
        &self.nodes
    }

    pub fn node(&self, class: ClassId) -> Result<Vector2<f64>, LatticeError> {
        self.nodes
            .get(class.0)
            .copied()
            .ok_or(LatticeError::UnknownClass(class.0))
    }

    /// Worst-case distance from an in-coverage offset to its node: `L * sqrt(3) / 3`.
    pub fn max_residual(&self) -> f64 {
        self.edge_length * SQRT3 / 3.0
    }

    /// True when `offset` lies inside the hexagonal hull of the lattice nodes.
    pub fn in_coverage(&self, offset: &Vector2<f64>) -> bool {
        let apothem = self.rings as f64 * self.edge_length * SQRT3 / 2.0;
        (0..6).all(|j| {
            let a = (30.0 + 60.0 * j as f64).to_radians();
            offset.x * a.cos() + offset.y * a.sin() <= apothem + 1e-12
        })
    }

    /// Nearest node by Euclidean distance; ties go to the lowest class id.
    pub fn nearest_class(&self, offset: &Vector2<f64>) -> NearestClass {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d2 = (offset - n).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        NearestClass {
            class: ClassId(best),
            distance: best_d2.sqrt(),
            in_coverage: self.in_coverage(offset),
        }
    }

    /// Move that brings a point of class `class` back toward the aligned node.
    pub fn correction_vector(&self, class: ClassId) -> Result<Vector2<f64>, LatticeError> {
        self.node(class).map(|n| -n)
    }

    /// Ring index of a class (0 for the origin).
    pub fn ring_of(&self, class: ClassId) -> Result<u32, LatticeError> {
        self.axial
            .get(class.0)
            .map(|&(q, r)| hex_norm(q, r) as u32)
            .ok_or(LatticeError::UnknownClass(class.0))
    }

    /// Number of lattice edges on the shortest path between two nodes.
    pub fn hop_distance(&self, a: ClassId, b: ClassId) -> Result<u32, LatticeError> {
        let (qa, ra) = *self.axial.get(a.0).ok_or(LatticeError::UnknownClass(a.0))?;
        let (qb, rb) = *self.axial.get(b.0).ok_or(LatticeError::UnknownClass(b.0))?;
        Ok(hex_norm(qa - qb, ra - rb) as u32)
    }

    /// Classes at 1..=radius hops from `class`, in class order.
    pub fn neighbors_within(&self, class: ClassId, radius: u32) -> Vec<ClassId> {
        let Some(&(q0, r0)) = self.axial.get(class.0) else {
            return Vec::new();
        };
        self.axial
            .iter()
            .enumerate()
            .filter(|&(i, &(q, r))| {
                let h = hex_norm(q - q0, r - r0) as u32;
                i != class.0 && h <= radius
            })
            .map(|(i, _)| ClassId(i))
            .collect()
    }

    /// Uniform sample inside the lattice hull.
    pub fn random_offset_in_coverage<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        let extent = self.rings as f64 * self.edge_length;
        if extent == 0.0 {
            return Vector2::zeros();
        }
        loop {
            let p = Vector2::new(
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            );
            if self.in_coverage(&p) {
                return p;
            }
        }
    }

    /// `class_id,x_mm,y_mm` listing, one node per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,x_mm,y_mm\n");
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("{},{:.6},{:.6}\n", i, n.x * 1e3, n.y * 1e3));
        }
        out
    }
}

/// `3 R (R + 1) + 1`.
pub fn node_count_for(rings: u32) -> usize {
    let r = rings as usize;
    3 * r * (r + 1) + 1
}

fn axial_to_plane(q: i32, r: i32, edge: f64) -> Vector2<f64> {
    Vector2::new(
        edge * (q as f64 + r as f64 / 2.0),
        edge * r as f64 * SQRT3 / 2.0,
    )
}

fn hex_norm(q: i32, r: i32) -> i32 {
    (q.abs() + r.abs() + (q + r).abs()) / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = 0.5e-3;
    const D: f64 = 9e-3;

    fn default_lattice() -> SpiralLattice {
        SpiralLattice::build(E, D).unwrap()
    }

    #[test]
    fn default_configuration_counts() {
        let l = default_lattice();
        assert_eq!(l.rings(), 5);
        assert_eq!(l.len(), 91);
        assert_eq!(l.nodes()[0], Vector2::zeros());
    }

    #[test]
    fn coarser_residual_gives_two_rings() {
        // floor(9 / (2 * sqrt 3)) = floor(2.598) = 2; 3*2*3+1 = 19.
        let l = SpiralLattice::build(1.0e-3, D).unwrap();
        assert_eq!(l.rings(), 2);
        assert_eq!(l.len(), 19);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(SpiralLattice::build(0.0, D), Err(LatticeError::InvalidResidual(_))));
        assert!(matches!(SpiralLattice::build(E, -1.0), Err(LatticeError::InvalidPitch(_))));
        assert!(matches!(SpiralLattice::build(E, 1e-3), Err(LatticeError::NoRings { .. })));
        assert!(matches!(
            SpiralLattice::with_edge_length(E, D, 1e-3),
            Err(LatticeError::EdgeTooLong { .. })
        ));
        let single = SpiralLattice::single_node(E, 1e-3);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn count_identity_and_radius_for_many_rings() {
        for rings in 1..=8u32 {
            // Choose d so that floor(d / 2L) = rings exactly.
            let l = SpiralLattice::build(E, 2.0 * SQRT3 * E * (rings as f64 + 0.5)).unwrap();
            assert_eq!(l.rings(), rings);
            assert_eq!(l.len(), node_count_for(rings));
            let limit = rings as f64 * l.edge_length() + 1e-12;
            assert!(l.nodes().iter().all(|n| n.norm() <= limit));
        }
    }

    #[test]
    fn adjacent_nodes_are_one_edge_apart() {
        let l = default_lattice();
        let edge = l.edge_length();
        let n = l.nodes();
        for i in 0..n.len() {
            for j in (i + 1)..n.len() {
                let d = (n[i] - n[j]).norm();
                assert!(d > edge - 1e-12, "nodes {i},{j} closer than L");
                if d < 1.5 * edge {
                    assert!((d - edge).abs() <= 1e-12);
                    assert_eq!(l.hop_distance(ClassId(i), ClassId(j)).unwrap(), 1);
                }
            }
        }
    }

    #[test]
    fn ring_one_order_and_antipodes() {
        let l = default_lattice();
        for k in 1..=6usize {
            let a = l.nodes()[k].y.atan2(l.nodes()[k].x).to_degrees().rem_euclid(360.0);
            assert!((a - 60.0 * (k - 1) as f64).abs() < 1e-9);
        }
        for (a, b) in [(1, 4), (2, 5), (3, 6)] {
            let s = l.correction_vector(ClassId(a)).unwrap() + l.correction_vector(ClassId(b)).unwrap();
            assert!(s.norm() < 1e-15);
        }
    }

    #[test]
    fn nearest_class_basics() {
        let l = default_lattice();
        let c = l.nearest_class(&Vector2::zeros());
        assert_eq!(c.class, ClassId(0));
        assert!(c.in_coverage);
        // equidistant from nodes 0 and 1: lowest id wins
        let mid = l.nodes()[1] * 0.5;
        assert_eq!(l.nearest_class(&mid).class, ClassId(0));
        let far = Vector2::new(0.02, 0.0);
        let c = l.nearest_class(&far);
        assert!(!c.in_coverage);
        assert_eq!(l.ring_of(c.class).unwrap(), 5);
    }

    #[test]
    fn nearest_class_matches_brute_force_scan() {
        let l = default_lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = l.max_residual();
        for _ in 0..2000 {
            let k = rng.random_range(0..l.len());
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rad: f64 = rng.random_range(0.0..0.999 * r);
            let p = l.nodes()[k] + Vector2::new(ang.cos(), ang.sin()) * rad;
            // independent scan: the unique node within L*sqrt(3)/3 of p
            let close: Vec<usize> = (0..l.len())
                .filter(|&i| (p - l.nodes()[i]).norm() < r)
                .collect();
            if close.len() == 1 {
                assert_eq!(l.nearest_class(&p).class, ClassId(close[0]));
            }
        }
    }

    #[test]
    fn centroid_is_worst_case() {
        let l = default_lattice();
        let n = l.nodes();
        let centroid = (n[0] + n[1] + n[2]) / 3.0;
        let c = l.nearest_class(&centroid);
        assert!((c.distance - l.max_residual()).abs() < 1e-15);
        assert!((l.max_residual() - E).abs() < 1e-15);
    }

    #[test]
    fn residual_scales_with_edge() {
        let full = default_lattice();
        let half = SpiralLattice::with_edge_length(E, D, full.edge_length() / 2.0).unwrap();
        assert!((half.max_residual() - full.max_residual() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn correction_vectors() {
        let l = default_lattice();
        assert_eq!(l.correction_vector(ClassId(0)).unwrap(), Vector2::zeros());
        assert!(matches!(
            l.correction_vector(ClassId(91)),
            Err(LatticeError::UnknownClass(91))
        ));
    }

    #[test]
    fn neighbor_queries() {
        let l = default_lattice();
        assert_eq!(l.neighbors_within(ClassId(0), 1).len(), 6);
        assert_eq!(l.neighbors_within(ClassId(0), 2).len(), 18);
        // a ring-5 corner has only 3 neighbors inside the lattice
        let corner = ClassId(node_count_for(4));
        assert_eq!(l.neighbors_within(corner, 1).len(), 3);
    }

    #[test]
    fn csv_dump_lists_every_node() {
        let csv = default_lattice().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class_id,x_mm,y_mm");
        assert_eq!(lines.len(), 92);
        assert_eq!(lines[1], "0,0.000000,0.000000");
        assert_eq!(lines[2], "1,0.866025,0.000000");
    }

    proptest! {
        #[test]
        fn quantization_bound_in_coverage(x in -5e-3..5e-3f64, y in -5e-3..5e-3f64) {
            let l = default_lattice();
            let p = Vector2::new(x, y);
            prop_assume!(l.in_coverage(&p));
            let c = l.nearest_class(&p);
            prop_assert!(c.distance <= l.max_residual() + 1e-12);
        }

        #[test]
        fn correct_then_reclassify_is_aligned(x in -5e-3..5e-3f64, y in -5e-3..5e-3f64) {
            let l = default_lattice();
            let p = Vector2::new(x, y);
            prop_assume!(l.in_coverage(&p));
            let c = l.nearest_class(&p);
            let moved = p + l.correction_vector(c.class).unwrap();
            prop_assert!((moved.norm() - (p - l.node(c.class).unwrap()).norm()).abs() < 1e-15);
            prop_assert!(moved.norm() <= l.max_residual() + 1e-12);
            let again = l.nearest_class(&moved);
            // class 0 unless the point sits on a cell boundary up to rounding
            prop_assert!(again.class == ClassId(0) || moved.norm() - again.distance < 1e-12);
        }
    }
}
