//! Spherical projection of labeled clouds into range and semantic images.
//!
//! Column 0 starts at azimuth -pi and columns grow with azimuth, so the
//! sensor's forward axis (+x, azimuth 0) lands on column `cols / 2`. Row 0 is
//! the top of the vertical field of view.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::config::Config;
use crate::types::{LabeledPointCloud, Pose};

/// Ranges closer than this are considered equal when resolving a cell.
pub const DEPTH_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub rows: usize,
    pub cols: usize,
    /// Row-major meters, 0 marks an empty cell.
    pub depth: Vec<f64>,
    /// Row-major unit normals, zero where the cell is empty.
    pub normals: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticImage {
    pub rows: usize,
    pub cols: usize,
    /// Row-major class ids, 0 where empty.
    pub labels: Vec<u8>,
}

impl RangeImage {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            depth: vec![0.0; rows * cols],
            normals: vec![[0.0; 3]; rows * cols],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn valid_cells(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Columns `[start, start + width)`, wrapping around the panorama.
    pub fn crop_columns(&self, start: usize, width: usize) -> Self {
        let mut out = Self::empty(self.rows, width);
        for r in 0..self.rows {
            for j in 0..width {
                let src = self.idx(r, (start + j) % self.cols);
                let dst = out.idx(r, j);
                out.depth[dst] = self.depth[src];
                out.normals[dst] = self.normals[src];
            }
        }
        out
    }
}

impl SemanticImage {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            labels: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.cols + col]
    }

    pub fn crop_columns(&self, start: usize, width: usize) -> Self {
        let mut out = Self::empty(self.rows, width);
        for r in 0..self.rows {
            for j in 0..width {
                out.labels[r * width + j] = self.get(r, (start + j) % self.cols);
            }
        }
        out
    }
}

/// Cell containing a sensor-frame direction, or `None` outside the vertical FOV.
pub fn cell_of(p: &Vector3<f64>, cfg: &Config) -> Option<(usize, usize)> {
    let (h, w) = (cfg.range_rows, cfg.range_cols);
    let azimuth = p.y.atan2(p.x);
    let elevation = p.z.atan2(p.x.hypot(p.y));
    let up = cfg.vfov_up.to_radians();
    let down = cfg.vfov_down.to_radians();
    if elevation > up || elevation < down {
        return None;
    }
    let col = (((azimuth + PI) / (2.0 * PI)) * w as f64).floor() as usize % w;
    let row = (((up - elevation) / (up - down)) * h as f64).floor() as usize;
    Some((row.min(h - 1), col))
}

/// Unit direction through the center of a cell, in the sensor frame.
pub fn cell_direction(row: usize, col: usize, cfg: &Config) -> Vector3<f64> {
    let up = cfg.vfov_up.to_radians();
    let down = cfg.vfov_down.to_radians();
    let azimuth = (col as f64 + 0.5) / cfg.range_cols as f64 * 2.0 * PI - PI;
    let elevation = up - (row as f64 + 0.5) / cfg.range_rows as f64 * (up - down);
    Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    )
}

/// Projects `cloud` (world frame) as seen from `sensor_pose`. Each cell keeps
/// the nearest point; equal ranges resolve to the lower point index. Normals
/// are left zero (see [`estimate_normals`]).
pub fn project_spherical(
    cloud: &LabeledPointCloud,
    sensor_pose: &Pose,
    cfg: &Config,
) -> (RangeImage, SemanticImage) {
    let (h, w) = (cfg.range_rows, cfg.range_cols);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (i, p) in cloud.points.iter().enumerate() {
        let local = sensor_pose.to_sensor(p);
        // Measured before rotating so ranges do not depend on the heading.
        let range = (p - sensor_pose.translation).norm();
        if range <= 0.0 || !range.is_finite() {
            continue;
        }
        let Some((row, col)) = cell_of(&local, cfg) else {
            continue;
        };
        let slot = &mut best[row * w + col];
        let wins = match *slot {
            None => true,
            Some((r, j)) => range < r - DEPTH_TIE_EPS || ((range - r).abs() <= DEPTH_TIE_EPS && i < j),
        };
        if wins {
            *slot = Some((range, i));
        }
    }
    let mut depth = RangeImage::empty(h, w);
    let mut sem = SemanticImage::empty(h, w);
    for (cell, b) in best.iter().enumerate() {
        if let Some((range, i)) = *b {
            depth.depth[cell] = range;
            sem.labels[cell] = cloud.labels[i];
        }
    }
    (depth, sem)
}

/// Fills the normals channel from one-sided (right, down) differences of the
/// reprojected cells. Cells whose neighbors are missing fall back to the
/// direction pointing back at the sensor. Normals face the sensor.
pub fn estimate_normals(img: &RangeImage, cfg: &Config) -> RangeImage {
    let mut out = img.clone();
    let point = |r: usize, c: usize| cell_direction(r, c, cfg) * img.depth[img.idx(r, c)];
    for r in 0..img.rows {
        for c in 0..img.cols {
            let cell = img.idx(r, c);
            if img.depth[cell] <= 0.0 {
                out.normals[cell] = [0.0; 3];
                continue;
            }
            let p = point(r, c);
            let fallback = -p / p.norm();
            let right_ok = c + 1 < img.cols && img.depth[img.idx(r, c + 1)] > 0.0;
            let down_ok = r + 1 < img.rows && img.depth[img.idx(r + 1, c)] > 0.0;
            let mut n = fallback;
            if right_ok && down_ok {
                let cross = (point(r, c + 1) - p).cross(&(point(r + 1, c) - p));
                let len = cross.norm();
                if len > 1e-12 {
                    n = cross / len;
                    if n.dot(&p) > 0.0 {
                        n = -n;
                    }
                }
            }
            out.normals[cell] = [n.x, n.y, n.z];
        }
    }
    out
}

/// Class frequencies over labeled cells (label 0 excluded). An image with no
/// labeled cell yields the uniform distribution over classes `1..n_classes`.
pub fn semantic_histogram(sem: &SemanticImage, cfg: &Config) -> Vec<f64> {
    let n = cfg.n_classes;
    let mut counts = vec![0usize; n];
    for &l in &sem.labels {
        if l != 0 && (l as usize) < n {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        let mut h = vec![0.0; n];
        if n > 1 {
            let u = 1.0 / (n - 1) as f64;
            h[1..].iter_mut().for_each(|v| *v = u);
        } else {
            h[0] = 1.0;
        }
        return h;
    }
    counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect()
}
