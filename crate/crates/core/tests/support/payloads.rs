//! Seeded random payloads for every on-disk format and a write-then-read
//! check for each.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng as _, SeedableRng};
use xpr_core::aggregation::GlobalDescriptor;
use xpr_core::encoder::QueryObservation;
use xpr_core::io::{
    index_file_size, load_checkpoint, load_cloud_bin, load_labels, load_poses, load_query, read_index,
    save_checkpoint, save_query, synthetic_class_map, write_cloud_bin, write_index, write_labels, write_poses,
    QueryRecord,
};
use xpr_core::matching::{IndexEntry, MapIndex, PlaceRecord};
use xpr_core::projection::SemanticImage;
use xpr_core::{Config, LabeledPointCloud, ModelParams, Pose, Rng};

fn f32_exact(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi) as f32 as f64
}

fn small_config(rng: &mut Rng) -> Config {
    Config {
        n_classes: rng.random_range(3..=8),
        descriptor_dim: rng.random_range(4..=32),
        n_viewpoints: rng.random_range(1..=4),
        range_rows: rng.random_range(2..=8),
        range_cols: rng.random_range(8..=40),
        clusters: rng.random_range(1..=4),
        seed: rng.random(),
        ..Config::default()
    }
    .validate()
    .expect("valid config")
}

fn random_pose(rng: &mut Rng) -> Pose {
    let rot = Rotation3::from_euler_angles(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-3.1..3.1),
    );
    Pose::new(
        *rot.matrix(),
        Vector3::new(
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
            rng.random_range(-5.0..5.0),
        ),
    )
    .expect("orthonormal rotation")
}

pub fn random_cloud(rng: &mut Rng, max_points: usize) -> LabeledPointCloud {
    let classes: Vec<u8> = synthetic_class_map().values().copied().collect();
    let n = rng.random_range(0..=max_points);
    let mut cloud = LabeledPointCloud::empty();
    for _ in 0..n {
        cloud.points.push(Vector3::new(
            f32_exact(rng, -80.0, 80.0),
            f32_exact(rng, -80.0, 80.0),
            f32_exact(rng, -5.0, 10.0),
        ));
        cloud.intensities.push(rng.random_range(0.0..1.0));
        cloud.labels.push(if rng.random_bool(0.1) { 0 } else { classes[rng.random_range(0..classes.len())] });
    }
    cloud
}

pub fn random_index(rng: &mut Rng) -> MapIndex {
    let cfg = small_config(rng);
    let n_places = rng.random_range(1..=5);
    let places: Vec<PlaceRecord> = (0..n_places)
        .map(|p| PlaceRecord {
            place_id: p as u32 * 2 + rng.random_range(0..2),
            position: [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), rng.random_range(-5.0..5.0)],
        })
        .collect();
    let mut entries = Vec::new();
    for p in &places {
        for v in 0..cfg.n_viewpoints {
            let zero = rng.random_bool(0.1);
            let values: Vec<f64> = if zero {
                vec![0.0; cfg.descriptor_dim]
            } else {
                (0..cfg.descriptor_dim).map(|_| f32_exact(rng, -1.0, 1.0)).collect()
            };
            let mut semantic = SemanticImage::empty(cfg.range_rows, cfg.range_cols);
            semantic.labels.iter_mut().for_each(|l| *l = rng.random_range(0..cfg.n_classes as u8));
            let raw: Vec<f64> = (0..cfg.n_classes).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            entries.push(IndexEntry {
                place_id: p.place_id,
                viewpoint: v as u32,
                pose: random_pose(rng),
                descriptor: GlobalDescriptor { values, zero },
                semantic,
                histogram: raw.iter().map(|x| x / total).collect(),
            });
        }
    }
    MapIndex::new(cfg, places, entries).expect("valid index")
}

pub fn random_checkpoint(rng: &mut Rng) -> (ModelParams, Config) {
    let cfg = small_config(rng);
    let mut params = ModelParams::init(&cfg);
    for t in params.trainable_mut() {
        t.iter_mut().for_each(|v| *v = f32_exact(rng, -3.0, 3.0));
    }
    (params, cfg)
}

pub fn random_query(rng: &mut Rng) -> QueryRecord {
    let (rows, cols, channels) = (rng.random_range(1..=6), rng.random_range(1..=12), rng.random_range(1..=7));
    let cells = rows * cols;
    let mut gt = SemanticImage::empty(rows, cols);
    gt.labels.iter_mut().for_each(|l| *l = rng.random_range(0..8));
    QueryRecord {
        query_id: rng.random(),
        place_id: rng.random(),
        heading: rng.random_range(0.0..std::f64::consts::TAU),
        position: [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), 0.0],
        obs: QueryObservation {
            rows,
            cols,
            channels,
            raw: (0..cells * channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
            mask: (0..cells).map(|_| rng.random_bool(0.7)).collect(),
            gt_labels: gt,
        },
    }
}

/// Writes and re-reads one payload of every format, derived from `seed`.
/// Returns a description of the first mismatch.
pub fn round_trip_all(seed: u64, dir: &Path) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let fail = |what: &str| format!("seed {seed}: {what}");

    let cloud = random_cloud(&mut rng, 400);
    let bin = dir.join(format!("{seed}.bin"));
    write_cloud_bin(&bin, &cloud).map_err(|e| fail(&e.to_string()))?;
    let back = load_cloud_bin(&bin).map_err(|e| fail(&e.to_string()))?;
    if back.points != cloud.points || back.intensities != cloud.intensities {
        return Err(fail("cloud"));
    }

    let map = synthetic_class_map();
    let label_path = dir.join(format!("{seed}.label"));
    write_labels(&label_path, &cloud, &map).map_err(|e| fail(&e.to_string()))?;
    let labeled = load_labels(&label_path, back, &map).map_err(|e| fail(&e.to_string()))?;
    if labeled.labels != cloud.labels {
        return Err(fail("labels"));
    }

    let poses: Vec<Pose> = (0..rng.random_range(0..20)).map(|_| random_pose(&mut rng)).collect();
    let pose_path = dir.join(format!("{seed}.txt"));
    write_poses(&pose_path, &poses).map_err(|e| fail(&e.to_string()))?;
    let read = load_poses(&pose_path).map_err(|e| fail(&e.to_string()))?;
    let close = read.len() == poses.len()
        && read.iter().zip(&poses).all(|(a, b)| {
            (a.rotation - b.rotation).abs().max() <= 1e-9 && (a.translation - b.translation).abs().max() <= 1e-9
        });
    if !close {
        return Err(fail("poses"));
    }

    let index = random_index(&mut rng);
    let bytes = write_index(&index).map_err(|e| fail(&e.to_string()))?;
    if bytes.len() != index_file_size(&index.config, index.places.len(), index.entries.len()) {
        return Err(fail("index size"));
    }
    if read_index(Path::new("mem"), &bytes).map_err(|e| fail(&e.to_string()))? != index {
        return Err(fail("index"));
    }

    let (params, cfg) = random_checkpoint(&mut rng);
    let ckpt = dir.join(format!("{seed}.ckpt"));
    save_checkpoint(&ckpt, &params, &cfg).map_err(|e| fail(&e.to_string()))?;
    if load_checkpoint(&ckpt).map_err(|e| fail(&e.to_string()))? != (params, cfg) {
        return Err(fail("checkpoint"));
    }

    let q = random_query(&mut rng);
    let qpath = dir.join(format!("{seed}.qobs"));
    save_query(&qpath, &q).map_err(|e| fail(&e.to_string()))?;
    if load_query(&qpath).map_err(|e| fail(&e.to_string()))? != q {
        return Err(fail("query"));
    }
    Ok(())
}
