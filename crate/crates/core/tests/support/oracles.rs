//! Brute-force reference implementations used by the integration tests and
//! the acceptance suite. Written independently of the library code paths.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng as _;
use xpr_core::aggregation::{GlobalDescriptor, NetVladParams};
use xpr_core::encoder::LocalFeatureMap;
use xpr_core::matching::{IndexEntry, MapIndex, PlaceRecord};
use xpr_core::projection::SemanticImage;
use xpr_core::{Config, LabeledPointCloud, Pose, Rng};

/// NetVLAD as a double loop: for every cluster, visit every cell, compute the
/// cell's softmax weight from scratch, accumulate the residual.
pub fn netvlad_brute_force(feat: &LocalFeatureMap, p: &NetVladParams) -> Option<Vec<f64>> {
    let (k, c) = (p.k, p.c);
    let cells: Vec<&[f64]> = (0..feat.rows * feat.cols)
        .filter(|&i| feat.mask[i])
        .map(|i| &feat.values[i * c..(i + 1) * c])
        .collect();
    if cells.is_empty() {
        return None;
    }
    let mut stacked = vec![0.0; k * c];
    for cluster in 0..k {
        let mut v = vec![0.0; c];
        for x in &cells {
            let logit = |m: usize| -> f64 {
                p.assign_b[m] + (0..c).map(|ch| p.assign_w[m * c + ch] * x[ch]).sum::<f64>()
            };
            let exps: Vec<f64> = (0..k).map(|m| logit(m).exp()).collect();
            let weight = exps[cluster] / exps.iter().sum::<f64>();
            for ch in 0..c {
                v[ch] += weight * (x[ch] - p.centroids[cluster * c + ch]);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for ch in 0..c {
                stacked[cluster * c + ch] = v[ch] / norm;
            }
        }
    }
    let mut out = vec![0.0; p.out_dim];
    for (row, o) in out.iter_mut().enumerate() {
        for col in 0..k * c {
            *o += p.projection[row * k * c + col] * stacked[col];
        }
    }
    let norm = out.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    Some(out.into_iter().map(|a| a / norm).collect())
}

/// Random NetVLAD problem with at most 4 clusters, 8 channels and 16 cells.
pub fn random_netvlad_problem(rng: &mut Rng) -> (LocalFeatureMap, NetVladParams) {
    let k = rng.random_range(1..=4);
    let c = rng.random_range(1..=8);
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(1..=4);
    let out_dim = rng.random_range(2..=16);
    let mut feat = LocalFeatureMap::zeros(rows, cols, c);
    for i in 0..rows * cols {
        feat.mask[i] = rng.random_bool(0.8);
        for ch in 0..c {
            feat.values[i * c + ch] = rng.random_range(-1.0..1.0);
        }
    }
    if !feat.mask.iter().any(|&m| m) {
        feat.mask[0] = true;
    }
    let mut draw = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
    let params = NetVladParams {
        k,
        c,
        out_dim,
        centroids: draw(k * c, 1.0),
        assign_w: draw(k * c, 2.0),
        assign_b: draw(k, 0.5),
        projection: draw(out_dim * k * c, 1.0),
    };
    (feat, params)
}

/// Mean IoU over classes present in either image, restricted to the window of
/// `cfg.frustum_cols()` columns starting at `cols/2 - width/2` (azimuth 0 is
/// the left edge of column `cols/2`). Narrower images are used whole.
pub fn frontal_iou(a: &SemanticImage, b: &SemanticImage, cfg: &Config) -> f64 {
    let w = cfg.frustum_cols();
    let crop = |img: &SemanticImage| -> Vec<Vec<u8>> {
        let width = w.min(img.cols);
        let start = img.cols / 2 - width / 2;
        (0..img.rows)
            .map(|r| (0..width).map(|j| img.labels[r * img.cols + start + j]).collect())
            .collect()
    };
    let (ca, cb) = (crop(a), crop(b));
    let mut ious = Vec::new();
    for class in 1..cfg.n_classes as u8 {
        let (mut inter, mut union) = (0, 0);
        for (ra, rb) in ca.iter().zip(&cb) {
            for (&x, &y) in ra.iter().zip(rb) {
                if x == class || y == class {
                    union += 1;
                    if x == class && y == class {
                        inter += 1;
                    }
                }
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Exhaustive ranking: score every entry, keep each place's best (earliest
/// viewpoint on ties), then order by score with smaller ids first on ties.
/// Returns `(place, viewpoint, score)` per place.
pub fn ranking_oracle(
    q_desc: &[f64],
    q_sem: &SemanticImage,
    index: &MapIndex,
    cfg: &Config,
) -> Vec<(u32, u32, f64)> {
    let mut per_place: Vec<(u32, u32, f64)> = Vec::new();
    for place in &index.places {
        let mut best: Option<(u32, f64)> = None;
        for e in index.entries.iter().filter(|e| e.place_id == place.place_id) {
            let phi: f64 = q_desc.iter().zip(&e.descriptor.values).map(|(a, b)| a * b).sum();
            let psi = frontal_iou(q_sem, &e.semantic, cfg);
            let s = cfg.alpha * phi + cfg.beta * psi;
            best = match best {
                Some((v, bs)) if bs > s || (bs == s && v < e.viewpoint) => Some((v, bs)),
                _ => Some((e.viewpoint, s)),
            };
        }
        let (v, s) = best.expect("every place has viewpoints");
        per_place.push((place.place_id, v, s));
    }
    // Insertion sort with an explicit comparison, no library sort.
    let mut ranked: Vec<(u32, u32, f64)> = Vec::new();
    for item in per_place {
        let pos = ranked
            .iter()
            .position(|r| item.2 > r.2 || (item.2 == r.2 && item.0 < r.0))
            .unwrap_or(ranked.len());
        ranked.insert(pos, item);
    }
    ranked
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn random_sem(rng: &mut Rng, rows: usize, cols: usize, classes: u8) -> SemanticImage {
    let mut s = SemanticImage::empty(rows, cols);
    for l in s.labels.iter_mut() {
        *l = rng.random_range(0..classes);
    }
    s
}

/// Seeded retrieval problem: `places x viewpoints` random entries with
/// deliberate exact ties (copied descriptors and semantics) so tie-breaks are
/// exercised. Returns the index, query descriptor and query semantics.
pub fn random_retrieval_problem(
    rng: &mut Rng,
    places: usize,
    viewpoints: usize,
    cfg: &Config,
) -> (MapIndex, GlobalDescriptor, SemanticImage) {
    let (rows, cols, fw) = (cfg.range_rows, cfg.range_cols, cfg.frustum_cols());
    let d = cfg.descriptor_dim;
    let records: Vec<PlaceRecord> = (0..places)
        .map(|p| PlaceRecord {
            place_id: (p as u32) * 3 + 1,
            position: [p as f64 * 20.0, 0.0, 0.0],
        })
        .collect();
    let mut entries: Vec<IndexEntry> = Vec::new();
    for rec in &records {
        for v in 0..viewpoints {
            entries.push(IndexEntry {
                place_id: rec.place_id,
                viewpoint: v as u32,
                pose: Pose::from_yaw(v as f64 * 2.0 * PI / viewpoints as f64, Vector3::from(rec.position)),
                descriptor: GlobalDescriptor {
                    values: unit_vector(rng, d),
                    zero: false,
                },
                semantic: random_sem(rng, rows, cols, 4),
                histogram: vec![1.0 / cfg.n_classes as f64; cfg.n_classes],
            });
        }
    }
    let query = GlobalDescriptor {
        values: unit_vector(rng, d),
        zero: false,
    };
    let q_sem = random_sem(rng, rows, fw, 4);
    // Exact duplicates: across places and within a place.
    let n = entries.len();
    for _ in 0..rng.random_range(1..=(n / 4).max(1)) {
        let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
        entries[dst].descriptor = entries[src].descriptor.clone();
        entries[dst].semantic = entries[src].semantic.clone();
    }
    // Force the strongest score to be shared by several places.
    if rng.random_bool(0.5) {
        for _ in 0..3 {
            let dst = rng.random_range(0..n);
            entries[dst].descriptor = query.clone();
            entries[dst].semantic = entries[0].semantic.clone();
        }
        entries[0].descriptor = query.clone();
    }
    let index = MapIndex::new(cfg.clone(), records, entries).expect("valid index");
    (index, query, q_sem)
}

/// Points on cell-center rays around `origin`, so whole-column yaw turns
/// keep every point on a cell-center ray.
pub fn cell_center_scene(rng: &mut Rng, origin: Vector3<f64>, n: usize, cfg: &Config) -> LabeledPointCloud {
    let up = cfg.vfov_up.to_radians();
    let down = cfg.vfov_down.to_radians();
    let mut cloud = LabeledPointCloud::empty();
    for _ in 0..n {
        let row = rng.random_range(0..cfg.range_rows);
        let col = rng.random_range(0..cfg.range_cols);
        let az = -PI + (col as f64 + 0.5) * 2.0 * PI / cfg.range_cols as f64;
        let el = up - (row as f64 + 0.5) * (up - down) / cfg.range_rows as f64;
        let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        cloud.points.push(origin + dir * rng.random_range(1.0..70.0));
        cloud.intensities.push(0.0);
        cloud.labels.push(rng.random_range(1..cfg.n_classes) as u8);
    }
    cloud
}

/// Largest angle (degrees) between estimated normals and the analytic inward
/// normals of a sphere around the sensor at `center` (sensor frame), radius
/// `radius`. Each cell-center ray is intersected with the sphere exactly.
/// Returns `(worst interior error, worst error over every cell)`.
pub fn sphere_normal_error(center: Vector3<f64>, radius: f64, cfg: &Config) -> (f64, f64) {
    use xpr_core::projection::{cell_direction, estimate_normals, project_spherical};
    let mut cloud = LabeledPointCloud::empty();
    for row in 0..cfg.range_rows {
        for col in 0..cfg.range_cols {
            let dir = cell_direction(row, col, cfg);
            // |t dir - center|^2 = radius^2 with the sensor inside.
            let b = dir.dot(&center);
            let t = b + (b * b - center.norm_squared() + radius * radius).sqrt();
            cloud.points.push(dir * t);
            cloud.intensities.push(0.0);
            cloud.labels.push(1);
        }
    }
    let (img, _) = project_spherical(&cloud, &Pose::identity(), cfg);
    let img = estimate_normals(&img, cfg);
    let (mut interior, mut all): (f64, f64) = (0.0, 0.0);
    for row in 0..cfg.range_rows {
        for col in 0..cfg.range_cols {
            let i = row * cfg.range_cols + col;
            let p = cell_direction(row, col, cfg) * img.depth[i];
            let truth = (center - p).normalize();
            let n = Vector3::from(img.normals[i]);
            let angle = n.dot(&truth).clamp(-1.0, 1.0).acos().to_degrees();
            all = all.max(angle);
            if row + 1 < cfg.range_rows && col + 1 < cfg.range_cols {
                interior = interior.max(angle);
            }
        }
    }
    (interior, all)
}
