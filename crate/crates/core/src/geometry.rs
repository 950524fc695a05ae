//! Rigid transforms and direction sampling shared by the other modules.
//!
//! Everything here works in SI units: meters and radians.

use std::collections::HashMap;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest icosphere subdivision level accepted by [`sample_icosphere_sector`].
pub const MAX_ICOSPHERE_SUBDIVISIONS: u32 = 4;

/// Default subdivision level for disposal-direction sampling (162 vertices on the full sphere).
pub const DEFAULT_ICOSPHERE_SUBDIVISIONS: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cone half angle {0} rad is outside (0, pi/2)")]
    InvalidHalfAngle(f64),
    #[error("cone axis must be a non-zero finite vector")]
    InvalidAxis,
    #[error("icosphere subdivision level {0} exceeds the supported maximum of {MAX_ICOSPHERE_SUBDIVISIONS}")]
    TooManySubdivisions(u32),
}

/// A rigid transform: rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { position, rotation }
    }

    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self {
            position,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self {
            position: Vector3::zeros(),
            rotation,
        }
    }

    /// Pose with a rotation about the world vertical axis only.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        }
    }

    /// `self ∘ other`: applying the result to a point equals applying `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.rotation * other.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            position: -(inv * self.position),
            rotation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Local z axis expressed in the parent frame.
    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    /// Heading of the local x axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotation * Vector3::x();
        x.y.atan2(x.x)
    }

    /// Rotate about the pose's own z axis, keeping the origin fixed.
    pub fn rotated_about_local_z(&self, angle: f64) -> Pose {
        self.compose(&Pose::from_rotation(UnitQuaternion::from_axis_angle(
            &Vector3::z_axis(),
            angle,
        )))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }

    /// Position distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Rotation whose local +z axis points along `direction`.
///
/// The result is deterministic: the shortest-arc rotation from +z, with a fixed
/// choice about +x when `direction` is antiparallel to +z.
pub fn rotation_z_to(direction: &Vector3<f64>) -> UnitQuaternion<f64> {
    let dir = direction.normalize();
    match UnitQuaternion::rotation_between(&Vector3::z(), &dir) {
        Some(q) => q,
        None => UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
    }
}

/// A right circular cone of admissible directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub apex: Vector3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub half_angle: f64,
}

impl ConeSpec {
    pub fn new(apex: Vector3<f64>, axis: Vector3<f64>, half_angle: f64) -> Result<Self, GeometryError> {
        if !(half_angle > 0.0 && half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(GeometryError::InvalidHalfAngle(half_angle));
        }
        if !axis.iter().all(|v| v.is_finite()) || axis.norm() < 1e-12 {
            return Err(GeometryError::InvalidAxis);
        }
        Ok(Self {
            apex,
            axis: Unit::new_normalize(axis),
            half_angle,
        })
    }

    pub fn contains_direction(&self, dir: &Vector3<f64>) -> bool {
        dir.normalize().dot(&self.axis) >= self.half_angle.cos() - 1e-12
    }
}

/// Vertices of an icosahedron subdivided `subdivisions` times, projected to the unit sphere.
///
/// Vertex count is `10 * 4^k + 2`. Order is deterministic: the 12 base vertices first,
/// then midpoints in the order they are created.
pub fn icosphere_vertices(subdivisions: u32) -> Vec<Vector3<f64>> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();

    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    verts
}

/// Icosphere vertices lying inside the cone, sorted by angle from the cone axis.
///
/// Returns an empty list when the cone is too narrow to contain any vertex at this
/// subdivision level; callers widen the cone or subdivide further.
pub fn sample_icosphere_sector(
    cone: &ConeSpec,
    subdivisions: u32,
) -> Result<Vec<Vector3<f64>>, GeometryError> {
    if subdivisions > MAX_ICOSPHERE_SUBDIVISIONS {
        return Err(GeometryError::TooManySubdivisions(subdivisions));
    }
    let cos_limit = cone.half_angle.cos();
    let mut picked: Vec<(f64, usize, Vector3<f64>)> = icosphere_vertices(subdivisions)
        .into_iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let c = v.dot(&cone.axis);
            (c >= cos_limit).then_some((c, i, v))
        })
        .collect();
    // Closest to the axis first; index breaks ties so the order is reproducible.
    picked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(picked.into_iter().map(|(_, _, v)| v).collect())
}
