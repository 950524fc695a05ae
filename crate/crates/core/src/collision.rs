//! Primitive collision geometry: oriented boxes, vertical cylinders and
//! capsules attached to arm link frames.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::kinematics::{ArmModel, JointConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("primitive {0:?} has a non-positive or non-finite dimension")]
    BadDimension(String),
    #[error("link shape {name:?} refers to frame {frame}, but the arm has frames 0..={max}")]
    BadFrame { name: String, frame: usize, max: usize },
}

/// Box centred at `pose` with half side lengths `half_extents` along its local axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    #[serde(default)]
    pub name: String,
    pub pose: Pose,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox {
    pub fn new(name: &str, pose: Pose, half_extents: Vector3<f64>) -> Self {
        Self {
            name: name.to_string(),
            pose,
            half_extents,
        }
    }

    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let local = self.pose.inverse().transform_point(p);
        let outside = local.abs() - self.half_extents;
        outside.map(|v| v.max(0.0)).norm()
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        let local = self.pose.inverse().transform_point(p);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i])
    }

    fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }
}

/// Cylinder with a vertical axis standing on `base_center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerticalCylinder {
    #[serde(default)]
    pub name: String,
    pub base_center: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
}

impl VerticalCylinder {
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.base_center;
        let radial = (d.xy().norm() - self.radius).max(0.0);
        let vertical = (-d.z).max(d.z - self.height).max(0.0);
        radial.hypot(vertical)
    }
}

/// Segment swept by a sphere of `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.a + (self.b - self.a) * t
    }
}

/// Closest distance between segments [p0, p1] and [q0, q1].
pub fn segment_distance(
    p0: &Vector3<f64>,
    p1: &Vector3<f64>,
    q0: &Vector3<f64>,
    q1: &Vector3<f64>,
) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-18;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

/// Minimum of a convex function on [0, 1] by golden-section search.
fn convex_min_on_unit(f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

pub fn capsule_box_distance(c: &Capsule, b: &OrientedBox) -> f64 {
    let inv = b.pose.inverse();
    let (a, e) = (inv.transform_point(&c.a), inv.transform_point(&c.b));
    let h = b.half_extents;
    let surface = convex_min_on_unit(|t| {
        let p = a + (e - a) * t;
        (p.abs() - h).map(|v| v.max(0.0)).norm()
    });
    surface - c.radius
}

pub fn capsule_cylinder_distance(c: &Capsule, cyl: &VerticalCylinder) -> f64 {
    convex_min_on_unit(|t| cyl.distance_to_point(&c.point_at(t))) - c.radius
}

pub fn capsule_capsule_distance(p: &Capsule, q: &Capsule) -> f64 {
    segment_distance(&p.a, &p.b, &q.a, &q.b) - p.radius - q.radius
}

/// Separating-axis overlap test for two oriented boxes; touching counts as overlap.
pub fn boxes_overlap(p: &OrientedBox, q: &OrientedBox) -> bool {
    let ra = p.pose.rotation_matrix();
    let rb = q.pose.rotation_matrix();
    let t = q.pose.position - p.pose.position;
    let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(15);
    for i in 0..3 {
        axes.push(ra.column(i).into_owned());
        axes.push(rb.column(i).into_owned());
    }
    for i in 0..3 {
        for j in 0..3 {
            let c = ra.column(i).cross(&rb.column(j));
            if c.norm_squared() > 1e-12 {
                axes.push(c.normalize());
            }
        }
    }
    axes.iter().all(|axis| {
        let proj = |r: &nalgebra::Matrix3<f64>, h: &Vector3<f64>| {
            (0..3).map(|i| h[i] * r.column(i).dot(axis).abs()).sum::<f64>()
        };
        t.dot(axis).abs() <= proj(&ra, &p.half_extents) + proj(&rb, &q.half_extents)
    })
}

/// Capsule rigidly attached to an arm frame. Frame 0 is the base, frame k the
/// frame after joint k; the tool is attached to frame 6 (the flange).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCapsule {
    pub name: String,
    pub frame: usize,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotGeometry {
    pub links: Vec<LinkCapsule>,
    /// Link name pairs excluded from self-collision checks.
    #[serde(default)]
    pub ignore_pairs: Vec<(String, String)>,
}

impl RobotGeometry {
    /// Capsules matching [`ArmModel::default`].
    pub fn default_arm() -> Self {
        let cap = |name: &str, frame, a: [f64; 3], b: [f64; 3], radius| LinkCapsule {
            name: name.to_string(),
            frame,
            a: Vector3::from(a),
            b: Vector3::from(b),
            radius,
        };
        Self {
            links: vec![
                cap("base", 0, [0.0, 0.0, 0.045], [0.0, 0.0, 0.10], 0.04),
                cap("shoulder", 1, [0.0, 0.0, 0.0], [0.0, 0.0, 0.08], 0.035),
                cap("upper_arm", 2, [0.0, 0.0, 0.0], [0.0, 0.0, 0.165], 0.03),
                cap("forearm", 4, [0.0, 0.0, -0.05], [0.0, 0.0, 0.10], 0.025),
                cap("wrist", 5, [0.0, 0.0, 0.0], [0.0, 0.0, 0.05], 0.025),
                cap("pipette_body", 6, [0.0, 0.0, 0.015], [0.04, 0.0, 0.045], 0.02),
                cap("pipette_shaft", 6, [0.04, 0.0, 0.045], [0.04, 0.0, 0.105], 0.005),
            ],
            // joined at the elbow through a link too short to carry its own shape
            ignore_pairs: vec![("upper_arm".into(), "forearm".into())],
        }
    }

    fn ignored(&self, a: &str, b: &str) -> bool {
        self.ignore_pairs
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    /// World-frame capsules for configuration `q`.
    pub fn capsules(&self, arm: &ArmModel, q: &JointConfig) -> Vec<Capsule> {
        let frames = arm.link_frames(q);
        self.links
            .iter()
            .map(|l| {
                let f = &frames[l.frame];
                Capsule {
                    a: f.transform_point(&l.a),
                    b: f.transform_point(&l.b),
                    radius: l.radius,
                }
            })
            .collect()
    }
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self::default_arm()
    }
}

/// Static obstacles plus the arm's collision shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub boxes: Vec<OrientedBox>,
    #[serde(default)]
    pub cylinders: Vec<VerticalCylinder>,
    #[serde(default)]
    pub robot: RobotGeometry,
}

impl Default for Scene {
    fn default() -> Self {
        Self::empty()
    }
}

impl Scene {
    /// No obstacles and no self-collision shapes.
    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            cylinders: Vec::new(),
            robot: RobotGeometry {
                links: Vec::new(),
                ignore_pairs: Vec::new(),
            },
        }
    }

    pub fn with_robot(robot: RobotGeometry) -> Self {
        Self {
            robot,
            ..Self::empty()
        }
    }

    pub fn validate(&self, arm: &ArmModel) -> Result<(), SceneError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        for b in &self.boxes {
            if !(0..3).all(|i| pos(b.half_extents[i])) || !b.pose.is_finite() {
                return Err(SceneError::BadDimension(b.name.clone()));
            }
        }
        for c in &self.cylinders {
            if !pos(c.radius) || !pos(c.height) {
                return Err(SceneError::BadDimension(c.name.clone()));
            }
        }
        let max = arm.dof();
        for l in &self.robot.links {
            if !pos(l.radius) {
                return Err(SceneError::BadDimension(l.name.clone()));
            }
            if l.frame > max {
                return Err(SceneError::BadFrame {
                    name: l.name.clone(),
                    frame: l.frame,
                    max,
                });
            }
        }
        Ok(())
    }

    /// Smallest signed clearance between any arm capsule and any obstacle, or
    /// between non-adjacent arm capsules. Negative means penetration.
    pub fn clearance(&self, arm: &ArmModel, q: &JointConfig) -> f64 {
        let caps = self.robot.capsules(arm, q);
        let mut best = f64::INFINITY;
        for c in &caps {
            let (center, reach) = ((c.a + c.b) / 2.0, (c.b - c.a).norm() / 2.0 + c.radius);
            for b in &self.boxes {
                // cheap sphere rejection before the exact test
                if (b.pose.position - center).norm() - b.bounding_radius() - reach > best {
                    continue;
                }
                best = best.min(capsule_box_distance(c, b));
            }
            for cyl in &self.cylinders {
                best = best.min(capsule_cylinder_distance(c, cyl));
            }
        }
        let links = &self.robot.links;
        for i in 0..caps.len() {
            for j in i + 1..caps.len() {
                if links[i].frame.abs_diff(links[j].frame) <= 1
                    || self.robot.ignored(&links[i].name, &links[j].name)
                {
                    continue;
                }
                best = best.min(capsule_capsule_distance(&caps[i], &caps[j]));
            }
        }
        best
    }
}

/// True when any arm shape touches an obstacle or a non-adjacent arm shape.
pub fn collide(scene: &Scene, arm: &ArmModel, q: &JointConfig) -> bool {
    scene.clearance(arm, q) <= 0.0
}
