//! Local feature maps for both modalities.
//!
//! The query branch is a per-cell affine+tanh layer followed by two heads:
//! a descriptor projection (features fed to aggregation) and a segmentation
//! head (class logits). The map branch is fixed: normalized depth, surface
//! normal and a one-hot class block per cell.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::config::{Config, Rng, QUERY_CHANNELS};
use crate::error::{Error, Result};
use crate::projection::{RangeImage, SemanticImage};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `rows * cols * channels`, cell-major.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LocalFeatureMap {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            values: vec![0.0; rows * cols * channels],
            mask: vec![false; rows * cols],
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Camera-side observation: raw channels per cell plus ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryObservation {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub raw: Vec<f64>,
    pub mask: Vec<bool>,
    pub gt_labels: SemanticImage,
}

impl QueryObservation {
    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.raw[i * self.channels..(i + 1) * self.channels]
    }

    pub fn check(&self, n_classes: usize) -> Result<()> {
        let cells = self.rows * self.cols;
        if self.raw.len() != cells * self.channels || self.mask.len() != cells {
            return Err(Error::Shape("query observation buffers".into()));
        }
        if self.gt_labels.rows != self.rows || self.gt_labels.cols != self.cols {
            return Err(Error::Shape("query ground-truth labels".into()));
        }
        if self.gt_labels.labels.iter().any(|&l| l as usize >= n_classes) {
            return Err(Error::InvalidInput("query label out of range".into()));
        }
        Ok(())
    }
}

/// Learnable query encoder. Matrices are stored output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub c_in: usize,
    pub c: usize,
    pub n_classes: usize,
    /// `c x c_in`
    pub rgb_proj: Vec<f64>,
    pub rgb_bias: Vec<f64>,
    /// `n_classes x c`
    pub seg_head: Vec<f64>,
    pub seg_bias: Vec<f64>,
    /// `c x c`, identity at initialization.
    pub desc_proj: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(c_in: usize, c: usize, n_classes: usize) -> Self {
        Self {
            c_in,
            c,
            n_classes,
            rgb_proj: vec![0.0; c * c_in],
            rgb_bias: vec![0.0; c],
            seg_head: vec![0.0; n_classes * c],
            seg_bias: vec![0.0; n_classes],
            desc_proj: vec![0.0; c * c],
        }
    }

    pub fn init(cfg: &Config, rng: &mut Rng) -> Self {
        let c = cfg.feature_channels();
        let mut p = Self::zeros(QUERY_CHANNELS, c, cfg.n_classes);
        let s_in = 1.0 / (QUERY_CHANNELS as f64).sqrt();
        for v in &mut p.rgb_proj {
            *v = gaussian(rng, s_in);
        }
        let s_seg = 1.0 / (c as f64).sqrt();
        for v in &mut p.seg_head {
            *v = gaussian(rng, s_seg);
        }
        for i in 0..c {
            p.desc_proj[i * c + i] = 1.0;
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        [&self.rgb_proj, &self.rgb_bias, &self.seg_head, &self.seg_bias, &self.desc_proj]
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Standard normal draw rounded to f32 so parameters survive checkpointing.
/// Scaled standard normal draw, rounded to f32 so that checkpoints store
/// initial values exactly.
pub(crate) fn gaussian(rng: &mut Rng, scale: f64) -> f64 {
    let v: f64 = rng.sample(StandardNormal);
    (v * scale) as f32 as f64
}

#[derive(Debug, Clone)]
pub struct QueryEncoding {
    /// Descriptor-branch features.
    pub features: LocalFeatureMap,
    /// Predicted labels, argmax of `logits` (lowest id on ties), 0 on masked cells.
    pub labels: SemanticImage,
    /// `cells * n_classes`, zero on masked cells.
    pub logits: Vec<f64>,
    /// tanh activations, `cells * c`.
    pub hidden: Vec<f64>,
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn encode_query(obs: &QueryObservation, params: &EncoderParams) -> Result<QueryEncoding> {
    if obs.channels != params.c_in {
        return Err(Error::Shape(format!(
            "observation has {} channels, encoder expects {}",
            obs.channels, params.c_in
        )));
    }
    obs.check(params.n_classes)?;
    if !obs.raw.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query observation".into()));
    }
    let (c, c_in, n_s) = (params.c, params.c_in, params.n_classes);
    let cells = obs.rows * obs.cols;
    let mut features = LocalFeatureMap::zeros(obs.rows, obs.cols, c);
    features.mask.clone_from(&obs.mask);
    let mut hidden = vec![0.0; cells * c];
    let mut logits = vec![0.0; cells * n_s];
    let mut labels = SemanticImage::empty(obs.rows, obs.cols);
    for i in (0..cells).filter(|&i| obs.mask[i]) {
        let x = obs.cell(i);
        let h = &mut hidden[i * c..(i + 1) * c];
        for (o, hv) in h.iter_mut().enumerate() {
            let row = &params.rgb_proj[o * c_in..(o + 1) * c_in];
            let pre = params.rgb_bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *hv = pre.tanh();
        }
        let f = features.cell_mut(i);
        for (o, fv) in f.iter_mut().enumerate() {
            let row = &params.desc_proj[o * c..(o + 1) * c];
            *fv = row.iter().zip(h.iter()).map(|(w, v)| w * v).sum();
        }
        let z = &mut logits[i * n_s..(i + 1) * n_s];
        for (k, zv) in z.iter_mut().enumerate() {
            let row = &params.seg_head[k * c..(k + 1) * c];
            *zv = params.seg_bias[k] + row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
        labels.labels[i] = argmax_lowest(z) as u8;
    }
    Ok(QueryEncoding {
        features,
        labels,
        logits,
        hidden,
    })
}

/// Reverse pass of [`encode_query`]: accumulates parameter gradients given
/// gradients of the loss w.r.t. descriptor features and logits.
pub fn encode_query_backward(
    obs: &QueryObservation,
    params: &EncoderParams,
    enc: &QueryEncoding,
    g_features: &[f64],
    g_logits: &[f64],
    grads: &mut EncoderParams,
) {
    let (c, c_in, n_s) = (params.c, params.c_in, params.n_classes);
    let mut g_h = vec![0.0; c];
    for i in (0..obs.rows * obs.cols).filter(|&i| obs.mask[i]) {
        let x = obs.cell(i);
        let h = &enc.hidden[i * c..(i + 1) * c];
        let gf = &g_features[i * c..(i + 1) * c];
        let gz = &g_logits[i * n_s..(i + 1) * n_s];
        g_h.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..c {
            if gf[o] == 0.0 {
                continue;
            }
            for j in 0..c {
                g_h[j] += params.desc_proj[o * c + j] * gf[o];
                grads.desc_proj[o * c + j] += gf[o] * h[j];
            }
        }
        for k in 0..n_s {
            if gz[k] == 0.0 {
                continue;
            }
            grads.seg_bias[k] += gz[k];
            for j in 0..c {
                g_h[j] += params.seg_head[k * c + j] * gz[k];
                grads.seg_head[k * c + j] += gz[k] * h[j];
            }
        }
        for o in 0..c {
            let g_pre = g_h[o] * (1.0 - h[o] * h[o]);
            grads.rgb_bias[o] += g_pre;
            for j in 0..c_in {
                grads.rgb_proj[o * c_in + j] += g_pre * x[j];
            }
        }
    }
}

/// Map-side hybrid features: `[depth / max_range, normal, one-hot(label)]`.
pub fn encode_lidar_local(
    range: &RangeImage,
    sem: &SemanticImage,
    cfg: &Config,
) -> Result<LocalFeatureMap> {
    if range.rows != sem.rows || range.cols != sem.cols {
        return Err(Error::Shape(format!(
            "range image {}x{} vs semantic image {}x{}",
            range.rows, range.cols, sem.rows, sem.cols
        )));
    }
    let n_s = cfg.n_classes;
    let mut out = LocalFeatureMap::zeros(range.rows, range.cols, cfg.feature_channels());
    for i in 0..range.rows * range.cols {
        let d = range.depth[i];
        if d <= 0.0 {
            continue;
        }
        let label = sem.labels[i] as usize;
        if label >= n_s {
            return Err(Error::InvalidInput(format!("label {label} >= n_classes {n_s}")));
        }
        out.mask[i] = true;
        let f = out.cell_mut(i);
        f[0] = (d / cfg.max_range_m).clamp(0.0, 1.0);
        f[1..4].copy_from_slice(&range.normals[i]);
        f[4 + label] = 1.0;
    }
    Ok(out)
}
