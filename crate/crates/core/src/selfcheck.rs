//! Built-in correctness checks: finite-difference gradient checks of every
//! loss term, a brute-force NetVLAD reference, the projection yaw-shift
//! property and a set-based IoU reference.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng as _;

use crate::aggregation::{netvlad, NetVladParams, NORM_EPS};
use crate::config::{stream_rng, Config, LossKind, Rng, QUERY_CHANNELS};
use crate::encoder::{LocalFeatureMap, QueryObservation};
use crate::error::Result;
use crate::losses::{
    contrastive_loss, segmentation_loss, semantic_consistency_loss, total_loss, MapView, SemanticFeatureSet,
    TrainBatch, TrainSample,
};
use crate::matching::semantic_overlap;
use crate::model::ModelParams;
use crate::projection::{project_spherical, SemanticImage};
use crate::types::{LabeledPointCloud, Pose};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const NETVLAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Default)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Scales the end-to-end analytic gradient by 1.01 (negative control).
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error < tolerance,
        }
    }
}

/// Relative difference with an absolute floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Max relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn fd_check(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Small config for toy gradient instances.
pub fn toy_config(seed: u64) -> Config {
    Config {
        n_classes: 4,
        descriptor_dim: 8,
        range_rows: 3,
        range_cols: 16,
        clusters: 3,
        lambda_sem: 0.5,
        seed,
        ..Config::default()
    }
}

fn check_contrastive(kind: LossKind, seed: u64) -> Result<f64> {
    let cfg = Config {
        loss_kind: kind,
        margin: 0.5,
        temperature: 0.5,
        ..toy_config(seed)
    };
    let mut rng = stream_rng(seed, 0xc0 + kind as u64);
    let (dim, n_pos, n_neg) = (6, 2, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        // Resample until every triplet hinge is clear of its kink.
        let x = loop {
            let x = uniform(&mut rng, dim * (1 + n_pos + n_neg));
            let a = &x[..dim];
            let dot = |v: &[f64]| a.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
            let clear = (0..n_pos).all(|p| {
                (0..n_neg).all(|n| {
                    let pv = &x[dim * (1 + p)..dim * (2 + p)];
                    let nv = &x[dim * (1 + n_pos + n)..dim * (2 + n_pos + n)];
                    (cfg.margin - dot(pv) + dot(nv)).abs() > 0.05
                })
            });
            if kind == LossKind::Infonce || clear {
                break x;
            }
        };
        let eval = |x: &[f64]| {
            let pos: Vec<&[f64]> = (0..n_pos).map(|p| &x[dim * (1 + p)..dim * (2 + p)]).collect();
            let neg: Vec<&[f64]> = (0..n_neg).map(|n| &x[dim * (1 + n_pos + n)..dim * (2 + n_pos + n)]).collect();
            contrastive_loss(&x[..dim], &pos, &neg, &cfg)
        };
        let out = eval(&x)?;
        let mut analytic = out.g_anchor.clone();
        out.g_positives.iter().chain(&out.g_negatives).for_each(|g| analytic.extend(g));
        worst = worst.max(fd_check(&x, &analytic, |x| eval(x).map(|o| o.loss).unwrap_or(f64::NAN)));
    }
    Ok(worst)
}

fn random_feature_map(rng: &mut Rng, rows: usize, cols: usize, c: usize) -> LocalFeatureMap {
    let mut f = LocalFeatureMap::zeros(rows, cols, c);
    for i in 0..rows * cols {
        if rng.random_bool(0.85) {
            f.mask[i] = true;
            f.cell_mut(i).copy_from_slice(&uniform(rng, c));
        }
    }
    f
}

fn random_labels(rng: &mut Rng, rows: usize, cols: usize, n: usize) -> SemanticImage {
    SemanticImage {
        rows,
        cols,
        labels: (0..rows * cols).map(|_| rng.random_range(0..n) as u8).collect(),
    }
}

fn check_semantic(seed: u64) -> Result<f64> {
    let cfg = toy_config(seed);
    let mut rng = stream_rng(seed, 0x5e);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (rows, cols, c) = (3, 4, 5);
        let rgb = random_feature_map(&mut rng, rows, cols, c);
        let rgb_labels = random_labels(&mut rng, rows, cols, cfg.n_classes);
        let lidar = random_feature_map(&mut rng, rows, 8, c);
        let lidar_labels = random_labels(&mut rng, rows, 8, cfg.n_classes);
        let lidar_set = SemanticFeatureSet::from_features(&lidar, &lidar_labels, cfg.n_classes);
        let rgb_set = SemanticFeatureSet::from_features(&rgb, &rgb_labels, cfg.n_classes);
        let out = semantic_consistency_loss(&rgb_set, &lidar_set, &cfg);
        let analytic = rgb_set.backprop(&out.g_rgb, &rgb, &rgb_labels);
        worst = worst.max(fd_check(&rgb.values, &analytic, |v| {
            let mut probe = rgb.clone();
            probe.values.copy_from_slice(v);
            let set = SemanticFeatureSet::from_features(&probe, &rgb_labels, cfg.n_classes);
            semantic_consistency_loss(&set, &lidar_set, &cfg).loss
        }));
    }
    Ok(worst)
}

fn check_segmentation(seed: u64) -> Result<f64> {
    let n = 4;
    let mut rng = stream_rng(seed, 0x5e9);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let gt = random_labels(&mut rng, 3, 4, n);
        let logits: Vec<f64> = uniform(&mut rng, 12 * n).iter().map(|v| 3.0 * v).collect();
        let (_, analytic) = segmentation_loss(&logits, n, &gt)?;
        worst = worst.max(fd_check(&logits, &analytic, |z| {
            segmentation_loss(z, n, &gt).map(|(l, _)| l).unwrap_or(f64::NAN)
        }));
    }
    Ok(worst)
}

/// Seeded toy training batch: two anchors, four places with two views each.
pub struct ToyProblem {
    pub cfg: Config,
    pub params: ModelParams,
    pub samples: Vec<TrainSample>,
    pub views: Vec<MapView>,
    pub context: Vec<f64>,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = toy_config(seed);
        let mut rng = stream_rng(seed, 0x70e);
        let mut params = ModelParams::init(&cfg);
        for t in params.trainable_mut() {
            t.iter_mut().for_each(|v| *v += 0.2 * rng.random_range(-1.0..1.0));
        }
        let (rows, fc) = (cfg.range_rows, cfg.frustum_cols());
        let samples = (0..2)
            .map(|s| {
                let cells = rows * fc;
                let mut raw = uniform(&mut rng, cells * QUERY_CHANNELS);
                let mask: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.9)).collect();
                for (i, m) in mask.iter().enumerate() {
                    if !m {
                        raw[i * QUERY_CHANNELS..(i + 1) * QUERY_CHANNELS].fill(0.0);
                    }
                }
                TrainSample {
                    obs: QueryObservation {
                        rows,
                        cols: fc,
                        channels: QUERY_CHANNELS,
                        raw,
                        mask,
                        gt_labels: random_labels(&mut rng, rows, fc, cfg.n_classes),
                    },
                    place_id: s,
                    position: [100.0 * s as f64, 0.0, 0.0],
                    heading: 0.0,
                }
            })
            .collect();
        let views = (0..8u32)
            .map(|v| {
                let features = random_feature_map(&mut rng, rows, cfg.range_cols, cfg.feature_channels());
                let semantic = random_labels(&mut rng, rows, cfg.range_cols, cfg.n_classes);
                let class_means = SemanticFeatureSet::from_features(&features, &semantic, cfg.n_classes);
                MapView {
                    place_id: v / 2,
                    viewpoint: v % 2,
                    position: [100.0 * (v / 2) as f64, 0.0, 0.0],
                    features,
                    semantic,
                    class_means,
                }
            })
            .collect();
        let context = vec![0.1, 0.4, 0.3, 0.2];
        Self {
            cfg,
            params,
            samples,
            views,
            context,
        }
    }

    pub fn batch(&self) -> TrainBatch<'_> {
        TrainBatch {
            anchors: self.samples.iter().collect(),
            views: &self.views,
            positives: vec![0, 3],
            negatives: vec![vec![2, 5, 7], vec![1, 4, 6]],
            context: &self.context,
        }
    }
}

fn check_total(seed: u64, corrupt: bool) -> Result<f64> {
    let toy = ToyProblem::new(seed);
    let batch = toy.batch();
    let report = total_loss(&batch, &toy.params, &toy.cfg)?;
    let mut analytic = report.grads.flatten();
    if corrupt {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }
    let x = toy.params.flatten();
    let mut probe = toy.params.clone();
    Ok(fd_check(&x, &analytic, |v| {
        for (i, &val) in v.iter().enumerate() {
            probe.set(i, val);
        }
        total_loss(&batch, &probe, &toy.cfg).map(|r| r.l_total).unwrap_or(f64::NAN)
    }))
}

/// Direct transcription of soft-assignment residual pooling, one cluster and
/// one cell at a time.
pub fn netvlad_reference(feat: &LocalFeatureMap, p: &NetVladParams) -> Option<Vec<f64>> {
    let (k, c) = (p.k, p.c);
    let mut flat = Vec::with_capacity(k * c);
    let mut any = false;
    for j in 0..k {
        let mut v = vec![0.0; c];
        for i in 0..feat.cells() {
            if !feat.mask[i] {
                continue;
            }
            any = true;
            let x = feat.cell(i);
            let score = |m: usize| {
                let mut s = p.assign_b[m];
                for ch in 0..c {
                    s += p.assign_w[m * c + ch] * x[ch];
                }
                s
            };
            let mut denom = 0.0;
            for m in 0..k {
                denom += (score(m) - score(j)).exp();
            }
            let a = 1.0 / denom;
            for ch in 0..c {
                v[ch] += a * (x[ch] - p.centroids[j * c + ch]);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for ch in 0..c {
            flat.push(if n > NORM_EPS { v[ch] / n } else { 0.0 });
        }
    }
    let mut out = vec![0.0; p.out_dim];
    for (o, val) in out.iter_mut().enumerate() {
        for i in 0..k * c {
            *val += p.projection[o * k * c + i] * flat[i];
        }
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !any || n <= NORM_EPS {
        return None;
    }
    Some(out.iter().map(|x| x / n).collect())
}

/// Random NetVLAD instance with `k <= 4`, `c <= 8` and at most 16 cells.
pub fn random_netvlad_instance(rng: &mut Rng) -> (LocalFeatureMap, NetVladParams) {
    let k = rng.random_range(1..=4);
    let c = rng.random_range(1..=8);
    let d = rng.random_range(1..=8);
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(1..=16 / rows);
    let feat = random_feature_map(rng, rows, cols, c);
    let mut p = NetVladParams::zeros_grad(k, c, d);
    p.centroids = uniform(rng, k * c);
    p.assign_w = uniform(rng, k * c).iter().map(|v| 2.0 * v).collect();
    p.assign_b = uniform(rng, k);
    p.projection = uniform(rng, d * k * c);
    (feat, p)
}

/// Returns `(max deviation from the reference, max unit-norm deviation)`.
fn check_netvlad(seed: u64) -> Result<(f64, f64)> {
    let mut rng = stream_rng(seed, 0x71ad);
    let (mut worst, mut norm_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (feat, p) = random_netvlad_instance(&mut rng);
        let got = netvlad(&feat, &p)?;
        match netvlad_reference(&feat, &p) {
            Some(want) => {
                if got.zero {
                    worst = f64::INFINITY;
                    continue;
                }
                for (a, b) in got.values.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
                norm_err = norm_err.max((got.norm() - 1.0).abs());
            }
            None if !got.zero => worst = f64::INFINITY,
            None => {}
        }
    }
    Ok((worst, norm_err))
}

/// Cloud whose points sit on cell-center rays of `cfg`'s grid around
/// `origin`, so whole-column yaw shifts never move a point across a cell
/// boundary.
pub fn shift_safe_scene(rng: &mut Rng, origin: Vector3<f64>, n_points: usize, cfg: &Config) -> LabeledPointCloud {
    let mut cloud = LabeledPointCloud::empty();
    for _ in 0..n_points {
        let row = rng.random_range(0..cfg.range_rows);
        let col = rng.random_range(0..cfg.range_cols);
        let dir = crate::projection::cell_direction(row, col, cfg);
        cloud.points.push(origin + dir * rng.random_range(1.0..60.0));
        cloud.intensities.push(0.0);
        cloud.labels.push(rng.random_range(0..cfg.n_classes) as u8);
    }
    cloud
}

/// Number of cells violating `shifted[r][c - s] == base[r][c]` over 20 scenes.
fn check_projection_shift(seed: u64) -> usize {
    let cfg = Config::default();
    let mut rng = stream_rng(seed, 0x9e0);
    let mut mismatches = 0;
    for _ in 0..20 {
        let origin = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0);
        let cloud = shift_safe_scene(&mut rng, origin, 500, &cfg);
        let (base, base_sem) = project_spherical(&cloud, &Pose::from_yaw(0.0, origin), &cfg);
        let s = rng.random_range(1..cfg.range_cols);
        let yaw = s as f64 * 2.0 * PI / cfg.range_cols as f64;
        let (rot, rot_sem) = project_spherical(&cloud, &Pose::from_yaw(yaw, origin), &cfg);
        let w = cfg.range_cols;
        for r in 0..cfg.range_rows {
            for c in 0..w {
                let moved = (c + w - s) % w;
                if rot.depth[rot.idx(r, moved)] != base.depth[base.idx(r, c)]
                    || rot_sem.get(r, moved) != base_sem.get(r, c)
                {
                    mismatches += 1;
                }
            }
        }
    }
    mismatches
}

/// Mean IoU over classes present in either window, from explicit cell sets.
pub fn iou_reference(q: &SemanticImage, cand: &SemanticImage, cfg: &Config) -> f64 {
    use std::collections::BTreeSet;
    let w = cfg.frustum_cols();
    let cells = |img: &SemanticImage, class: u8| -> BTreeSet<(usize, usize)> {
        // Frontal window: columns cols/2 - w/2 .. cols/2 + w/2, as the query
        // frustum is cut.
        let width = w.min(img.cols);
        let start = if img.cols <= w { 0 } else { img.cols / 2 - w / 2 };
        let mut set = BTreeSet::new();
        for r in 0..img.rows {
            for j in 0..width {
                if img.get(r, start + j) == class {
                    set.insert((r, j));
                }
            }
        }
        set
    };
    let mut ious = Vec::new();
    for class in 1..cfg.n_classes as u8 {
        let (a, b) = (cells(q, class), cells(cand, class));
        let union = a.union(&b).count();
        if union > 0 {
            ious.push(a.intersection(&b).count() as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn check_iou(seed: u64) -> f64 {
    let cfg = Config::default();
    let mut rng = stream_rng(seed, 0x10);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = random_labels(&mut rng, cfg.range_rows, cfg.frustum_cols(), cfg.n_classes.min(4));
        let c = random_labels(&mut rng, cfg.range_rows, cfg.range_cols, cfg.n_classes.min(4));
        worst = worst.max((semantic_overlap(&q, &c, &cfg) - iou_reference(&q, &c, &cfg)).abs());
    }
    worst
}

/// Runs every check; each name appears exactly once in the result.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let seed = opts.seed;
    let (vlad_err, vlad_norm) = check_netvlad(seed)?;
    Ok(vec![
        CheckResult::new("grad_contrastive_triplet", check_contrastive(LossKind::Triplet, seed)?, GRAD_TOL),
        CheckResult::new("grad_contrastive_infonce", check_contrastive(LossKind::Infonce, seed)?, GRAD_TOL),
        CheckResult::new("grad_semantic_consistency", check_semantic(seed)?, GRAD_TOL),
        CheckResult::new("grad_segmentation", check_segmentation(seed)?, GRAD_TOL),
        CheckResult::new("grad_total_end_to_end", check_total(seed, opts.corrupt_gradient)?, GRAD_TOL),
        CheckResult::new("netvlad_reference", vlad_err, NETVLAD_TOL),
        CheckResult::new("netvlad_unit_norm", vlad_norm, 1e-6),
        CheckResult::new("projection_yaw_shift", check_projection_shift(seed) as f64, 0.5),
        CheckResult::new("semantic_iou_reference", check_iou(seed), 1e-12),
    ])
}
