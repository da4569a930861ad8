//! Uniform-heading virtual viewpoints around a map anchor.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};

use crate::config::Config;
use crate::projection::{estimate_normals, project_spherical, RangeImage, SemanticImage};
use crate::types::{LabeledPointCloud, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointSet {
    pub anchor: Pose,
    pub poses: Vec<Pose>,
    /// Radians between consecutive headings.
    pub yaw_step: f64,
}

/// `n_viewpoints` poses sharing the anchor's position, rotated about the world
/// vertical axis by `k * 2pi / n_viewpoints`. Pose 0 is the anchor itself.
pub fn make_viewpoints(anchor: &Pose, cfg: &Config) -> ViewpointSet {
    let n = cfg.n_viewpoints;
    let yaw_step = 2.0 * PI / n as f64;
    let poses = (0..n)
        .map(|k| {
            if k == 0 {
                return *anchor;
            }
            let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), k as f64 * yaw_step);
            Pose {
                rotation: yaw.matrix() * anchor.rotation,
                translation: anchor.translation,
            }
        })
        .collect();
    ViewpointSet {
        anchor: *anchor,
        poses,
        yaw_step,
    }
}

/// Crops the map to `max_range_m` around the pose, then projects and
/// estimates normals.
pub fn render_viewpoint(
    map_cloud: &LabeledPointCloud,
    pose: &Pose,
    cfg: &Config,
) -> (RangeImage, SemanticImage) {
    let r2 = cfg.max_range_m * cfg.max_range_m;
    let cropped = map_cloud.filter(|i| (map_cloud.points[i] - pose.translation).norm_squared() <= r2);
    let (depth, sem) = project_spherical(&cropped, pose, cfg);
    (estimate_normals(&depth, cfg), sem)
}
