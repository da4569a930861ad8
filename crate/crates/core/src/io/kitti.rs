//! Velodyne `.bin` clouds, per-point `.label` files and `poses.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::types::{LabeledPointCloud, Pose};

/// Raw dataset label id (low 16 bits) to class id.
pub type ClassMap = BTreeMap<u32, u8>;

const RECORD: usize = 16;

/// Reads `(x, y, z, intensity)` f32 quadruples; labels start at 0.
pub fn load_cloud_bin(path: &Path) -> Result<LabeledPointCloud> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if bytes.len() % RECORD != 0 {
        return Err(r.err_at(
            bytes.len() - bytes.len() % RECORD,
            format!("truncated record: {} bytes is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut cloud = LabeledPointCloud {
        points: Vec::with_capacity(n),
        intensities: Vec::with_capacity(n),
        labels: vec![0; n],
    };
    for _ in 0..n {
        let x = r.f32()?;
        let y = r.f32()?;
        let z = r.f32()?;
        let i = r.f32()?;
        cloud.points.push(Vector3::new(x as f64, y as f64, z as f64));
        cloud.intensities.push(i);
    }
    Ok(cloud)
}

/// Writes coordinates as f32; points must be finite.
pub fn write_cloud_bin(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensities.get(i).copied().unwrap_or(0.0);
        for v in [p.x as f32, p.y as f32, p.z as f32, intensity] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("point {i}")));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

/// Class of a raw label word: the low 16 bits through `map`, unmapped ids to 0.
pub fn remap_label(raw: u32, map: &ClassMap) -> u8 {
    map.get(&(raw & 0xffff)).copied().unwrap_or(0)
}

/// Attaches labels from a `.label` file to `cloud`.
pub fn load_labels(path: &Path, cloud: LabeledPointCloud, map: &ClassMap) -> Result<LabeledPointCloud> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if bytes.len() != 4 * cloud.len() {
        return Err(r.err_at(
            bytes.len().min(4 * cloud.len()),
            format!("{} bytes of labels for {} points", bytes.len(), cloud.len()),
        ));
    }
    let mut labels = Vec::with_capacity(cloud.len());
    for _ in 0..cloud.len() {
        labels.push(remap_label(r.u32()?, map));
    }
    Ok(LabeledPointCloud { labels, ..cloud })
}

/// Writes each class as the smallest raw id mapping to it (0 if none).
pub fn write_labels(path: &Path, cloud: &LabeledPointCloud, map: &ClassMap) -> Result<()> {
    let mut inverse: BTreeMap<u8, u32> = BTreeMap::new();
    for (&raw, &class) in map.iter().rev() {
        inverse.insert(class, raw);
    }
    let mut out = Vec::with_capacity(4 * cloud.len());
    for l in &cloud.labels {
        out.extend_from_slice(&inverse.get(l).copied().unwrap_or(0).to_le_bytes());
    }
    write_file(path, &out)
}

/// Parses one row-major 3x4 pose per line. Rotations drifting more than 1e-6
/// from orthonormal are repaired; their 1-based line numbers are returned.
pub fn read_poses(path: &Path) -> Result<(Vec<Pose>, Vec<usize>)> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: "not UTF-8".into(),
    })?;
    let mut poses = Vec::new();
    let mut repaired = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 12 {
            return Err(parse_err(format!("expected 12 numbers, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let pose = Pose { rotation, translation };
        if pose.orthonormality_error() > 1e-6 {
            let fixed = pose.reorthonormalized();
            if fixed.rotation.determinant() <= 0.0 {
                return Err(parse_err("rotation is not proper".into()));
            }
            repaired.push(line_no);
            poses.push(fixed);
        } else {
            poses.push(pose);
        }
    }
    Ok((poses, repaired))
}

pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    read_poses(path).map(|(p, _)| p)
}

/// Shortest round-trip decimal form, so write then read is exact.
pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let vals = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    write_file(path, out.as_bytes())
}
