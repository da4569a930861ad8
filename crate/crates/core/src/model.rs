//! All learnable parameters of the pipeline, bundled.

use crate::aggregation::{AttentionParams, NetVladParams};
use crate::config::Config;
use crate::encoder::EncoderParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub netvlad: NetVladParams,
}

impl ModelParams {
    /// Seeded initialization; identical seeds give identical parameters.
    pub fn init(cfg: &Config) -> Self {
        let mut rng = cfg.rng_stream(0x1417);
        let encoder = EncoderParams::init(cfg, &mut rng);
        let attention = AttentionParams::init(cfg, &mut rng);
        let netvlad = NetVladParams::init(cfg, &mut rng);
        Self {
            encoder,
            attention,
            netvlad,
        }
    }

    /// Zeroed gradient buffer shaped like `self` (no projection storage).
    pub fn zeros_grad(&self) -> Self {
        let e = &self.encoder;
        let a = &self.attention;
        let v = &self.netvlad;
        Self {
            encoder: EncoderParams::zeros(e.c_in, e.c, e.n_classes),
            attention: AttentionParams::zeros(a.c, a.n_classes),
            netvlad: NetVladParams::zeros_grad(v.k, v.c, v.out_dim),
        }
    }

    /// Trainable tensors in a fixed order, with names and shapes.
    pub fn trainable(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let e = &self.encoder;
        let a = &self.attention;
        let v = &self.netvlad;
        vec![
            ("encoder.rgb_proj", vec![e.c, e.c_in], &e.rgb_proj[..]),
            ("encoder.rgb_bias", vec![e.c], &e.rgb_bias[..]),
            ("encoder.seg_head", vec![e.n_classes, e.c], &e.seg_head[..]),
            ("encoder.seg_bias", vec![e.n_classes], &e.seg_bias[..]),
            ("encoder.desc_proj", vec![e.c, e.c], &e.desc_proj[..]),
            ("attention.bilinear", vec![a.c, a.n_classes], &a.bilinear[..]),
            ("attention.gain", vec![1], std::slice::from_ref(&a.gain)),
            ("netvlad.centroids", vec![v.k, v.c], &v.centroids[..]),
            ("netvlad.assign_w", vec![v.k, v.c], &v.assign_w[..]),
            ("netvlad.assign_b", vec![v.k], &v.assign_b[..]),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let e = &mut self.encoder;
        let a = &mut self.attention;
        let v = &mut self.netvlad;
        vec![
            &mut e.rgb_proj[..],
            &mut e.rgb_bias[..],
            &mut e.seg_head[..],
            &mut e.seg_bias[..],
            &mut e.desc_proj[..],
            &mut a.bilinear[..],
            std::slice::from_mut(&mut a.gain),
            &mut v.centroids[..],
            &mut v.assign_w[..],
            &mut v.assign_b[..],
        ]
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.trainable()
            .into_iter()
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }

    pub fn get(&self, flat_index: usize) -> f64 {
        let mut i = flat_index;
        for (_, _, t) in self.trainable() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {flat_index} out of range")
    }

    pub fn set(&mut self, flat_index: usize, value: f64) {
        let mut i = flat_index;
        for t in self.trainable_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {flat_index} out of range")
    }

    /// `self += scale * other` over trainable tensors.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src: Vec<Vec<f64>> = other.trainable().into_iter().map(|(_, _, t)| t.to_vec()).collect();
        for (dst, s) in self.trainable_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.trainable_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.trainable()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Consistency of tensor shapes with a config.
    pub fn matches_config(&self, cfg: &Config) -> bool {
        let c = cfg.feature_channels();
        self.encoder.c == c
            && self.encoder.n_classes == cfg.n_classes
            && self.attention.c == c
            && self.attention.n_classes == cfg.n_classes
            && self.netvlad.c == c
            && self.netvlad.k == cfg.clusters
            && self.netvlad.out_dim == cfg.descriptor_dim
            && self.netvlad.projection.len() == cfg.descriptor_dim * cfg.clusters * c
    }
}
