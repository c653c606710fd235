//! Linear blend skinning over a small capsule skeleton.
//!
//! Points move between the canonical (rest) space and a frame's observation
//! space as `x_o = sum_i w_i B_i x_c`, and back through the inverse of the
//! blended transform. Skinning weights come from a softmax over distances to
//! the bone capsules.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Default softmax temperature for skinning weights, in world units.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Blends whose linear part is worse conditioned than this are rejected.
pub const MAX_BLEND_CONDITION: f64 = 1e8;

/// Rigid transform stored row-major for (de)serialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rigid(pub [f64; 16]);

impl Rigid {
    pub fn identity() -> Self {
        Self::from_matrix(&Matrix4::identity())
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        Self(out)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.0)
    }

    /// Rotation about `axis` by `angle` radians, pivoting on `pivot`.
    pub fn rotation_about(axis: Vec3, angle: f64, pivot: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        let t = pivot - rot * pivot;
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::from_matrix(&m)
    }

    pub fn translation(t: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::from_matrix(&m)
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Rigid) -> Self {
        Self::from_matrix(&(self.matrix() * other.matrix()))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let v = self.matrix() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(v.x, v.y, v.z)
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let m = self.matrix();
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let bottom_ok =
            (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs()) <= tol;
        (r * r.transpose() - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && bottom_ok
    }
}

/// A capsule: the set of points within `radius` of segment `a`-`b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let a = Vec3::from(self.a);
        let b = Vec3::from(self.b);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let h = if len2 > 0.0 {
            ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (a + ab * h)).norm() - self.radius
    }

    pub fn transformed(&self, t: &Rigid) -> Self {
        let a = t.apply(&Vec3::from(self.a));
        let b = t.apply(&Vec3::from(self.b));
        Self {
            a: a.into(),
            b: b.into(),
            radius: self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    /// Maps bone-local coordinates to canonical space.
    pub rest: Rigid,
    /// Capsule in bone-local coordinates.
    pub capsule: Capsule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

/// Per-frame bone transforms from canonical to observation space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose(pub Vec<Rigid>);

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Self(vec![Rigid::identity(); bones])
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.0.len() != skeleton.bones.len() {
            return Err(Error::Contract(format!(
                "pose has {} transforms for {} bones",
                self.0.len(),
                skeleton.bones.len()
            )));
        }
        if let Some(i) = self.0.iter().position(|b| !b.is_rigid(1e-9)) {
            return Err(Error::Contract(format!("bone transform {i} is not rigid")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkinWeights(pub Vec<f64>);

#[derive(Clone, Copy, Debug)]
pub enum PoseSpace<'a> {
    Canonical,
    Observation(&'a Pose),
}

impl Skeleton {
    /// The four-bone rig: torso, head and two arms, standing at the origin.
    pub fn default_rig() -> Self {
        let bone = |name: &str, a: [f64; 3], b: [f64; 3], radius: f64| Bone {
            name: name.into(),
            rest: Rigid::identity(),
            capsule: Capsule { a, b, radius },
        };
        Self {
            bones: vec![
                bone("torso", [0.0, -0.42, 0.0], [0.0, 0.18, 0.0], 0.16),
                bone("head", [0.0, 0.40, 0.0], [0.0, 0.48, 0.0], 0.11),
                bone("arm_left", [0.22, 0.2, 0.0], [0.60, 0.2, 0.0], 0.065),
                bone("arm_right", [-0.22, 0.2, 0.0], [-0.60, 0.2, 0.0], 0.065),
            ],
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() {
            return Err(Error::Contract("skeleton has no bones".into()));
        }
        for b in &self.bones {
            if !(b.capsule.radius > 0.0) {
                return Err(Error::Contract(format!(
                    "bone {} has non-positive radius",
                    b.name
                )));
            }
            if !b.rest.is_rigid(1e-9) {
                return Err(Error::Contract(format!(
                    "bone {} rest transform is not rigid",
                    b.name
                )));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract(
                "skinning temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Capsules in canonical space.
    pub fn rest_capsules(&self) -> Vec<Capsule> {
        self.bones
            .iter()
            .map(|b| b.capsule.transformed(&b.rest))
            .collect()
    }

    /// Capsules in a frame's observation space.
    pub fn posed_capsules(&self, pose: &Pose) -> Vec<Capsule> {
        self.rest_capsules()
            .iter()
            .zip(&pose.0)
            .map(|(c, t)| c.transformed(t))
            .collect()
    }

    /// Signed distance to the union of capsules.
    pub fn union_sdf(capsules: &[Capsule], p: &Vec3) -> f64 {
        capsules
            .iter()
            .map(|c| c.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Radius of the smallest origin-centered sphere containing the posed body.
    pub fn bounding_radius(&self, pose: Option<&Pose>) -> f64 {
        let caps = match pose {
            Some(p) => self.posed_capsules(p),
            None => self.rest_capsules(),
        };
        caps.iter()
            .map(|c| Vec3::from(c.a).norm().max(Vec3::from(c.b).norm()) + c.radius)
            .fold(0.0, f64::max)
    }
}

/// Softmax of `-distance / temperature` over the bone capsules.
pub fn compute_weights(x: &Vec3, skeleton: &Skeleton, space: PoseSpace<'_>) -> SkinWeights {
    let caps = match space {
        PoseSpace::Canonical => skeleton.rest_capsules(),
        PoseSpace::Observation(pose) => skeleton.posed_capsules(pose),
    };
    weights_from_capsules(x, &caps, skeleton.temperature)
}

pub fn weights_from_capsules(x: &Vec3, capsules: &[Capsule], temperature: f64) -> SkinWeights {
    let logits: Vec<f64> = capsules.iter().map(|c| -c.sdf(x) / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    SkinWeights(exps.into_iter().map(|e| e / total).collect())
}

fn blend(pose: &Pose, weights: &SkinWeights) -> Matrix4<f64> {
    pose.0
        .iter()
        .zip(&weights.0)
        .fold(Matrix4::zeros(), |acc, (b, &w)| acc + b.matrix() * w)
}

/// `x_o = (sum_i w_i B_i) x_c`
pub fn forward_skin(x_c: &Vec3, pose: &Pose, weights: &SkinWeights) -> Vec3 {
    let v = blend(pose, weights) * Vector4::new(x_c.x, x_c.y, x_c.z, 1.0);
    Vec3::new(v.x, v.y, v.z)
}

/// `x_c = (sum_i w_i B_i)^-1 x_o`
pub fn backward_skin(x_o: &Vec3, pose: &Pose, weights: &SkinWeights) -> Result<Vec3> {
    let m = blend(pose, weights);
    let linear: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let sv = linear.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if cond > MAX_BLEND_CONDITION {
        return Err(Error::SingularBlend(cond));
    }
    let inv = linear.try_inverse().ok_or(Error::SingularBlend(cond))?;
    let t = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    Ok(inv * (x_o - t))
}

/// Backward skinning with weights evaluated in the observation space.
pub fn to_canonical(
    x_o: &Vec3,
    skeleton: &Skeleton,
    pose: &Pose,
    posed: &[Capsule],
) -> Result<Vec3> {
    let w = weights_from_capsules(x_o, posed, skeleton.temperature);
    backward_skin(x_o, pose, &w)
}
