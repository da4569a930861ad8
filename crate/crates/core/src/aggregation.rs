//! NetVLAD aggregation and the cross-modal semantic attention gate.

use crate::config::{Config, Rng};
use crate::encoder::{
    encode_lidar_local, encode_query, gaussian, EncoderParams, LocalFeatureMap, QueryObservation,
};
use crate::error::{Error, Result};
use crate::projection::{RangeImage, SemanticImage};

/// Tolerance on the sum of a semantic context distribution.
pub const CONTEXT_SUM_TOL: f64 = 1e-6;

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Unit-norm global embedding. `zero` marks the all-zero sentinel produced
/// by an empty (or fully degenerate) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
    pub zero: bool,
}

impl GlobalDescriptor {
    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            zero: true,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Values rounded to f32, the precision stored in a map index.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            zero: self.zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub c: usize,
    pub n_classes: usize,
    /// `c x n_classes`
    pub bilinear: Vec<f64>,
    pub gain: f64,
}

impl AttentionParams {
    pub fn zeros(c: usize, n_classes: usize) -> Self {
        Self {
            c,
            n_classes,
            bilinear: vec![0.0; c * n_classes],
            gain: 0.0,
        }
    }

    pub fn init(cfg: &Config, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cfg.feature_channels(), cfg.n_classes);
        for v in &mut p.bilinear {
            *v = gaussian(rng, 0.1);
        }
        p.gain = 1.0;
        p
    }

    /// `bilinear · context`, one value per feature channel.
    pub fn context_vector(&self, context: &[f64]) -> Vec<f64> {
        (0..self.c)
            .map(|o| {
                let row = &self.bilinear[o * self.n_classes..(o + 1) * self.n_classes];
                row.iter().zip(context).map(|(w, p)| w * p).sum()
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_context(context: &[f64], n_classes: usize) -> Result<()> {
    if context.len() != n_classes {
        return Err(Error::Shape(format!(
            "context has {} entries, expected {n_classes}",
            context.len()
        )));
    }
    let sum: f64 = context.iter().sum();
    if !((sum - 1.0).abs() <= CONTEXT_SUM_TOL) {
        return Err(Error::InvalidInput(format!("context sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Per-cell gate weights kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTape {
    pub weights: Vec<f64>,
    context_vec: Vec<f64>,
}

/// Scales every valid cell by `sigmoid(gain * (f · (bilinear · context)))`.
pub fn semantic_attention(
    feat: &LocalFeatureMap,
    context: &[f64],
    params: &AttentionParams,
) -> Result<LocalFeatureMap> {
    semantic_attention_forward(feat, context, params).map(|(f, _)| f)
}

pub fn semantic_attention_forward(
    feat: &LocalFeatureMap,
    context: &[f64],
    params: &AttentionParams,
) -> Result<(LocalFeatureMap, AttentionTape)> {
    check_context(context, params.n_classes)?;
    if feat.channels != params.c {
        return Err(Error::Shape("attention channels".into()));
    }
    let u = params.context_vector(context);
    let mut out = feat.clone();
    let mut weights = vec![0.0; feat.cells()];
    for i in (0..feat.cells()).filter(|&i| feat.mask[i]) {
        let f = feat.cell(i);
        let s = params.gain * f.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        let a = sigmoid(s);
        weights[i] = a;
        out.cell_mut(i).iter_mut().for_each(|v| *v *= a);
    }
    Ok((
        out,
        AttentionTape {
            weights,
            context_vec: u,
        },
    ))
}

/// Returns the gradient w.r.t. the input features and accumulates parameter
/// gradients.
pub fn semantic_attention_backward(
    feat: &LocalFeatureMap,
    context: &[f64],
    params: &AttentionParams,
    tape: &AttentionTape,
    g_out: &[f64],
    grads: &mut AttentionParams,
) -> Vec<f64> {
    let c = feat.channels;
    let u = &tape.context_vec;
    let mut g_in = vec![0.0; g_out.len()];
    let mut g_u = vec![0.0; c];
    for i in (0..feat.cells()).filter(|&i| feat.mask[i]) {
        let f = feat.cell(i);
        let go = &g_out[i * c..(i + 1) * c];
        let a = tape.weights[i];
        let g_a: f64 = go.iter().zip(f).map(|(g, v)| g * v).sum();
        let g_s = g_a * a * (1.0 - a);
        let fu: f64 = f.iter().zip(u).map(|(x, y)| x * y).sum();
        grads.gain += g_s * fu;
        let gi = &mut g_in[i * c..(i + 1) * c];
        for o in 0..c {
            gi[o] = a * go[o] + g_s * params.gain * u[o];
            g_u[o] += g_s * params.gain * f[o];
        }
    }
    for o in 0..c {
        for (k, p) in context.iter().enumerate() {
            grads.bilinear[o * params.n_classes + k] += g_u[o] * p;
        }
    }
    g_in
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams {
    pub k: usize,
    pub c: usize,
    pub out_dim: usize,
    /// `k x c`
    pub centroids: Vec<f64>,
    /// `k x c`
    pub assign_w: Vec<f64>,
    pub assign_b: Vec<f64>,
    /// Fixed `out_dim x (k * c)` random projection; never trained.
    pub projection: Vec<f64>,
}

impl NetVladParams {
    /// Gradient buffer: trainable tensors zeroed, projection left empty.
    pub fn zeros_grad(k: usize, c: usize, out_dim: usize) -> Self {
        Self {
            k,
            c,
            out_dim,
            centroids: vec![0.0; k * c],
            assign_w: vec![0.0; k * c],
            assign_b: vec![0.0; k],
            projection: Vec::new(),
        }
    }

    pub fn init(cfg: &Config, rng: &mut Rng) -> Self {
        let (k, c, d) = (cfg.clusters, cfg.feature_channels(), cfg.descriptor_dim);
        let mut p = Self::zeros_grad(k, c, d);
        for v in &mut p.centroids {
            *v = gaussian(rng, 0.5);
        }
        let s = 1.0 / (c as f64).sqrt();
        for v in &mut p.assign_w {
            *v = gaussian(rng, s);
        }
        let s = 1.0 / (d as f64).sqrt();
        p.projection = (0..d * k * c).map(|_| gaussian(rng, s)).collect();
        p
    }
}

/// Intermediate values of one NetVLAD evaluation.
#[derive(Debug, Clone)]
pub struct NetVladTape {
    valid: Vec<usize>,
    /// `valid.len() x k` soft assignments.
    assign: Vec<f64>,
    residual_norms: Vec<f64>,
    /// Intra-normalized, flattened residuals.
    flat: Vec<f64>,
    projected_norm: f64,
    descriptor: GlobalDescriptor,
}

pub fn netvlad(feat: &LocalFeatureMap, params: &NetVladParams) -> Result<GlobalDescriptor> {
    netvlad_forward(feat, params).map(|(d, _)| d)
}

pub fn netvlad_forward(
    feat: &LocalFeatureMap,
    params: &NetVladParams,
) -> Result<(GlobalDescriptor, NetVladTape)> {
    let (k, c, d) = (params.k, params.c, params.out_dim);
    if feat.channels != c {
        return Err(Error::Shape(format!(
            "feature map has {} channels, NetVLAD expects {c}",
            feat.channels
        )));
    }
    let valid: Vec<usize> = (0..feat.cells()).filter(|&i| feat.mask[i]).collect();
    let mut assign = vec![0.0; valid.len() * k];
    let mut weighted = vec![0.0; k * c];
    let mut mass = vec![0.0; k];
    let mut logits = vec![0.0; k];
    for (n, &i) in valid.iter().enumerate() {
        let x = feat.cell(i);
        for j in 0..k {
            let w = &params.assign_w[j * c..(j + 1) * c];
            logits[j] = params.assign_b[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let a = &mut assign[n * k..(n + 1) * k];
        let mut z = 0.0;
        for j in 0..k {
            a[j] = (logits[j] - max).exp();
            z += a[j];
        }
        for j in 0..k {
            a[j] /= z;
            mass[j] += a[j];
            for ch in 0..c {
                weighted[j * c + ch] += a[j] * x[ch];
            }
        }
    }
    let mut residuals = weighted;
    for j in 0..k {
        for ch in 0..c {
            residuals[j * c + ch] -= mass[j] * params.centroids[j * c + ch];
        }
    }
    let mut residual_norms = vec![0.0; k];
    let mut flat = vec![0.0; k * c];
    for j in 0..k {
        let v = &residuals[j * c..(j + 1) * c];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        residual_norms[j] = n;
        if n > NORM_EPS {
            for ch in 0..c {
                flat[j * c + ch] = v[ch] / n;
            }
        }
    }
    let mut projected = vec![0.0; d];
    for (o, p) in projected.iter_mut().enumerate() {
        let row = &params.projection[o * k * c..(o + 1) * k * c];
        *p = row.iter().zip(&flat).map(|(a, b)| a * b).sum();
    }
    let projected_norm = projected.iter().map(|x| x * x).sum::<f64>().sqrt();
    let descriptor = if valid.is_empty() || projected_norm <= NORM_EPS {
        GlobalDescriptor::zero(d)
    } else {
        GlobalDescriptor {
            values: projected.iter().map(|v| v / projected_norm).collect(),
            zero: false,
        }
    };
    let tape = NetVladTape {
        valid,
        assign,
        residual_norms,
        flat,
        projected_norm,
        descriptor: descriptor.clone(),
    };
    Ok((descriptor, tape))
}

/// Reverse pass: returns the gradient w.r.t. every feature value (zero on
/// masked cells) and, when `grads` is given, accumulates parameter gradients.
pub fn netvlad_backward(
    feat: &LocalFeatureMap,
    params: &NetVladParams,
    tape: &NetVladTape,
    g_desc: &[f64],
    mut grads: Option<&mut NetVladParams>,
) -> Vec<f64> {
    let (k, c, d) = (params.k, params.c, params.out_dim);
    let mut g_feat = vec![0.0; feat.values.len()];
    if tape.descriptor.zero {
        return g_feat;
    }
    // L2 normalization of the projected vector.
    let y = &tape.descriptor.values;
    let dot: f64 = y.iter().zip(g_desc).map(|(a, b)| a * b).sum();
    let g_proj: Vec<f64> = (0..d)
        .map(|o| (g_desc[o] - y[o] * dot) / tape.projected_norm)
        .collect();
    // Random projection (fixed).
    let mut g_flat = vec![0.0; k * c];
    for o in 0..d {
        let row = &params.projection[o * k * c..(o + 1) * k * c];
        for (g, w) in g_flat.iter_mut().zip(row) {
            *g += g_proj[o] * w;
        }
    }
    // Intra-normalization.
    let mut g_res = vec![0.0; k * c];
    for j in 0..k {
        let n = tape.residual_norms[j];
        if n <= NORM_EPS {
            continue;
        }
        let u = &tape.flat[j * c..(j + 1) * c];
        let gu = &g_flat[j * c..(j + 1) * c];
        let proj: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
        for ch in 0..c {
            g_res[j * c + ch] = (gu[ch] - u[ch] * proj) / n;
        }
    }
    let mut g_a = vec![0.0; k];
    let mut g_z = vec![0.0; k];
    for (n, &i) in tape.valid.iter().enumerate() {
        let x = feat.cell(i);
        let a = &tape.assign[n * k..(n + 1) * k];
        let gx = &mut g_feat[i * c..(i + 1) * c];
        for j in 0..k {
            let cent = &params.centroids[j * c..(j + 1) * c];
            let gr = &g_res[j * c..(j + 1) * c];
            let mut s = 0.0;
            for ch in 0..c {
                s += gr[ch] * (x[ch] - cent[ch]);
                gx[ch] += a[j] * gr[ch];
            }
            g_a[j] = s;
        }
        let mean: f64 = a.iter().zip(&g_a).map(|(p, g)| p * g).sum();
        for j in 0..k {
            g_z[j] = a[j] * (g_a[j] - mean);
            let w = &params.assign_w[j * c..(j + 1) * c];
            for ch in 0..c {
                gx[ch] += g_z[j] * w[ch];
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for j in 0..k {
                g.assign_b[j] += g_z[j];
                for ch in 0..c {
                    g.assign_w[j * c + ch] += g_z[j] * x[ch];
                    g.centroids[j * c + ch] -= a[j] * g_res[j * c + ch];
                }
            }
        }
    }
    g_feat
}

/// Query pipeline: encode, gate with the map-derived semantic context, pool.
/// Also returns the predicted semantic image.
pub fn describe_query(
    obs: &QueryObservation,
    enc: &EncoderParams,
    att: &AttentionParams,
    vlad: &NetVladParams,
    context: &[f64],
) -> Result<(GlobalDescriptor, SemanticImage)> {
    let encoded = encode_query(obs, enc)?;
    let attended = semantic_attention(&encoded.features, context, att)?;
    let desc = netvlad(&attended, vlad)?;
    Ok((desc, encoded.labels))
}

/// Map pipeline: hybrid local features of the viewpoint's frontal window
/// (the columns a query camera at that heading would see), pooled with
/// NetVLAD. No attention on the map side.
pub fn describe_viewpoint(
    range: &RangeImage,
    sem: &SemanticImage,
    vlad: &NetVladParams,
    cfg: &Config,
) -> Result<GlobalDescriptor> {
    netvlad(&viewpoint_features(range, sem, cfg)?, vlad)
}

/// Hybrid local features of a viewpoint's frontal window.
pub fn viewpoint_features(range: &RangeImage, sem: &SemanticImage, cfg: &Config) -> Result<LocalFeatureMap> {
    let (range, sem) = frontal_window(range, sem, cfg);
    encode_lidar_local(&range, &sem, cfg)
}

/// Columns `frustum_start .. frustum_start + frustum_cols` of a full render.
pub fn frontal_window(range: &RangeImage, sem: &SemanticImage, cfg: &Config) -> (RangeImage, SemanticImage) {
    if range.cols != cfg.range_cols {
        return (range.clone(), sem.clone());
    }
    let (start, w) = (cfg.frustum_start(), cfg.frustum_cols());
    (range.crop_columns(start, w), sem.crop_columns(start, w))
}
