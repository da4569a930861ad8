//! Shared domain records: rigid poses and labeled point clouds.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Sensor-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        let drift = pose.orthonormality_error();
        if !drift.is_finite() || drift > Self::ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (error {drift:e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(pose)
    }

    /// Yaw-only pose about the world vertical axis.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    /// Max of |R^T R - I| entries and |det R - 1|.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        let max_entry = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        max_entry.max((r.determinant() - 1.0).abs())
    }

    /// Projects the rotation back onto SO(3) via SVD.
    pub fn reorthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Heading about the world vertical axis, in (-pi, pi].
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// World point into this sensor's frame.
    pub fn to_sensor(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(world - self.translation))
    }

    /// Sensor-frame point into the world frame.
    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * local + self.translation
    }
}

/// 3D points with per-point semantic class ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Either empty or one reflectance per point.
    pub intensities: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, intensities: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let cloud = Self {
            points,
            intensities,
            labels,
        };
        cloud.check_shape()?;
        Ok(cloud)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check_shape(&self) -> Result<()> {
        if self.labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels",
                self.points.len(),
                self.labels.len()
            )));
        }
        if !self.intensities.is_empty() && self.intensities.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} points but {} intensities",
                self.points.len(),
                self.intensities.len()
            )));
        }
        Ok(())
    }

    /// Checks lengths, label range and coordinate finiteness.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        self.check_shape()?;
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::InvalidInput(format!(
                "point {i} has label {l} >= n_classes {n_classes}"
            )));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(())
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.to_world(p)).collect(),
            intensities: self.intensities.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Keeps points with `keep(index)` true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::default();
        let with_intensity = !self.intensities.is_empty();
        for i in 0..self.len() {
            if keep(i) {
                out.points.push(self.points[i]);
                out.labels.push(self.labels[i]);
                if with_intensity {
                    out.intensities.push(self.intensities[i]);
                }
            }
        }
        out
    }
}
