//! Training objective and a deterministic gradient-descent trainer.
//!
//! `total = contrastive + lambda_sem * semantic_consistency + segmentation`,
//! each term averaged over the anchors of a batch. Gradients are accumulated
//! in reverse through NetVLAD, the attention gate and the query encoder.
//! Per-sample passes run in parallel; reductions always run in sample order so
//! results are bit-reproducible.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;

use crate::aggregation::{
    netvlad_backward, netvlad_forward, semantic_attention_backward, semantic_attention_forward,
    GlobalDescriptor, NetVladTape,
};
use crate::config::{Config, LossKind};
use crate::encoder::{encode_query, encode_query_backward, LocalFeatureMap, QueryObservation};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::projection::SemanticImage;

/// Loss value with gradients w.r.t. the anchor, positive and negative descriptors.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub g_anchor: Vec<f64>,
    pub g_positives: Vec<Vec<f64>>,
    pub g_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

/// Similarity is the plain dot product; descriptors are unit-norm upstream.
pub fn contrastive_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    cfg: &Config,
) -> Result<ContrastiveLoss> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput(
            "contrastive loss needs at least one positive and one negative".into(),
        ));
    }
    let dim = anchor.len();
    let mut out = ContrastiveLoss {
        loss: 0.0,
        g_anchor: vec![0.0; dim],
        g_positives: vec![vec![0.0; dim]; positives.len()],
        g_negatives: vec![vec![0.0; dim]; negatives.len()],
    };
    let phi_n: Vec<f64> = negatives.iter().map(|n| dot(anchor, n)).collect();
    match cfg.loss_kind {
        LossKind::Triplet => {
            let scale = 1.0 / (positives.len() * negatives.len()) as f64;
            for (pi, p) in positives.iter().enumerate() {
                let phi_p = dot(anchor, p);
                for (ni, n) in negatives.iter().enumerate() {
                    let hinge = cfg.margin - phi_p + phi_n[ni];
                    if hinge > 0.0 {
                        out.loss += scale * hinge;
                        axpy(&mut out.g_anchor, -scale, p);
                        axpy(&mut out.g_anchor, scale, n);
                        axpy(&mut out.g_positives[pi], -scale, anchor);
                        axpy(&mut out.g_negatives[ni], scale, anchor);
                    }
                }
            }
        }
        LossKind::Infonce => {
            let tau = cfg.temperature;
            let scale = 1.0 / positives.len() as f64;
            for (pi, p) in positives.iter().enumerate() {
                let s_p = dot(anchor, p) / tau;
                let s_n: Vec<f64> = phi_n.iter().map(|v| v / tau).collect();
                let m = s_n.iter().cloned().fold(s_p, f64::max);
                let z: f64 = (s_p - m).exp() + s_n.iter().map(|v| (v - m).exp()).sum::<f64>();
                out.loss += scale * (m + z.ln() - s_p);
                let w_p = (s_p - m).exp() / z;
                let coef_p = scale * (w_p - 1.0) / tau;
                axpy(&mut out.g_anchor, coef_p, p);
                axpy(&mut out.g_positives[pi], coef_p, anchor);
                for (ni, n) in negatives.iter().enumerate() {
                    let coef = scale * ((s_n[ni] - m).exp() / z) / tau;
                    axpy(&mut out.g_anchor, coef, n);
                    axpy(&mut out.g_negatives[ni], coef, anchor);
                }
            }
        }
    }
    Ok(out)
}

/// Per-class mean features of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatureSet {
    pub channels: usize,
    /// `None` for classes with no valid cell.
    pub means: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl SemanticFeatureSet {
    /// Averages valid cells per label.
    pub fn from_features(features: &LocalFeatureMap, labels: &SemanticImage, n_classes: usize) -> Self {
        let c = features.channels;
        let mut sums = vec![vec![0.0; c]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for i in (0..features.cells()).filter(|&i| features.mask[i]) {
            let l = labels.labels[i] as usize;
            if l < n_classes {
                counts[l] += 1;
                axpy(&mut sums[l], 1.0, features.cell(i));
            }
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Self {
            channels: c,
            means,
            counts,
        }
    }

    /// Chains class-mean gradients down to the cells that formed each mean.
    pub fn backprop(
        &self,
        g_means: &[Option<Vec<f64>>],
        features: &LocalFeatureMap,
        labels: &SemanticImage,
    ) -> Vec<f64> {
        let c = features.channels;
        let mut g = vec![0.0; features.values.len()];
        for i in (0..features.cells()).filter(|&i| features.mask[i]) {
            let l = labels.labels[i] as usize;
            if let Some(Some(gm)) = g_means.get(l) {
                let inv = 1.0 / self.counts[l] as f64;
                axpy(&mut g[i * c..(i + 1) * c], inv, gm);
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct SemanticLoss {
    pub loss: f64,
    pub g_rgb: Vec<Option<Vec<f64>>>,
    pub g_lidar: Vec<Option<Vec<f64>>>,
    pub shared_classes: usize,
}

/// Squared distance between class means shared by both modalities (void
/// excluded), averaged over the shared classes.
pub fn semantic_consistency_loss(
    rgb: &SemanticFeatureSet,
    lidar: &SemanticFeatureSet,
    cfg: &Config,
) -> SemanticLoss {
    let n = cfg.n_classes.min(rgb.means.len()).min(lidar.means.len());
    let shared: Vec<usize> = (1..n)
        .filter(|&k| rgb.means[k].is_some() && lidar.means[k].is_some())
        .collect();
    let mut out = SemanticLoss {
        loss: 0.0,
        g_rgb: vec![None; rgb.means.len()],
        g_lidar: vec![None; lidar.means.len()],
        shared_classes: shared.len(),
    };
    if shared.is_empty() {
        return out;
    }
    let norm = 1.0 / shared.len() as f64;
    for k in shared {
        let (a, b) = (rgb.means[k].as_ref().unwrap(), lidar.means[k].as_ref().unwrap());
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        out.loss += norm * dot(&diff, &diff);
        out.g_rgb[k] = Some(diff.iter().map(|d| 2.0 * norm * d).collect());
        out.g_lidar[k] = Some(diff.iter().map(|d| -2.0 * norm * d).collect());
    }
    out
}

/// Mean softmax cross-entropy over cells with a non-void ground-truth label.
/// Returns the loss and its gradient w.r.t. `logits` (`cells x n_classes`).
pub fn segmentation_loss(logits: &[f64], n_classes: usize, gt: &SemanticImage) -> Result<(f64, Vec<f64>)> {
    let cells = gt.rows * gt.cols;
    if logits.len() != cells * n_classes {
        return Err(Error::Shape(format!(
            "{} logits for {cells} cells x {n_classes} classes",
            logits.len()
        )));
    }
    let valid: Vec<usize> = (0..cells).filter(|&i| gt.labels[i] != 0).collect();
    let mut grad = vec![0.0; logits.len()];
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid.len() as f64;
    let mut loss = 0.0;
    for i in valid {
        let z = &logits[i * n_classes..(i + 1) * n_classes];
        let t = gt.labels[i] as usize;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let others: f64 = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, v)| (v - m).exp())
            .sum();
        let own = (z[t] - m).exp();
        // -log softmax_t; the log1p form keeps precision when t dominates.
        let ce = if z[t] == m {
            others.ln_1p()
        } else {
            (m - z[t]) + (own + others).ln()
        };
        loss += inv * ce;
        let zsum = own + others;
        let g = &mut grad[i * n_classes..(i + 1) * n_classes];
        for j in 0..n_classes {
            let p = (z[j] - m).exp() / zsum;
            g[j] = inv * (p - if j == t { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

/// A rendered map view with its fixed hybrid features.
#[derive(Debug, Clone)]
pub struct MapView {
    pub place_id: u32,
    pub viewpoint: u32,
    pub position: [f64; 3],
    pub features: LocalFeatureMap,
    pub semantic: SemanticImage,
    pub class_means: SemanticFeatureSet,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub obs: QueryObservation,
    pub place_id: u32,
    pub position: [f64; 3],
    /// Heading relative to the place anchor, radians in [0, 2pi).
    pub heading: f64,
}

/// Anchors with their positive and negative views, referenced by index into
/// a shared view pool.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub anchors: Vec<&'a TrainSample>,
    pub views: &'a [MapView],
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub context: &'a [f64],
}

impl TrainBatch<'_> {
    pub fn validate(&self, cfg: &Config) -> Result<()> {
        if self.positives.len() != self.anchors.len() || self.negatives.len() != self.anchors.len() {
            return Err(Error::Shape("batch bookkeeping".into()));
        }
        for (a, (&p, negs)) in self.anchors.iter().zip(self.positives.iter().zip(&self.negatives)) {
            if self.views[p].place_id != a.place_id {
                return Err(Error::InvalidInput("positive from a different place".into()));
            }
            for &n in negs {
                let q = self.views[n].position;
                if (q[0] - a.position[0]).hypot(q[1] - a.position[1]) <= cfg.match_threshold_m {
                    return Err(Error::InvalidInput("negative within the match threshold".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_contrastive: f64,
    pub l_sem: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub grads: ModelParams,
}

struct AnchorPass {
    l_contrastive: f64,
    l_sem: f64,
    l_seg: f64,
    grads: ModelParams,
    /// (view index, gradient w.r.t. its descriptor)
    view_grads: Vec<(usize, Vec<f64>)>,
}

fn anchor_pass(
    sample: &TrainSample,
    positive: usize,
    negatives: &[usize],
    view_desc: &BTreeMap<usize, GlobalDescriptor>,
    batch: &TrainBatch<'_>,
    params: &ModelParams,
    cfg: &Config,
) -> Result<AnchorPass> {
    let mut grads = params.zeros_grad();
    let enc = encode_query(&sample.obs, &params.encoder)?;
    let (attended, att_tape) = semantic_attention_forward(&enc.features, batch.context, &params.attention)?;
    let (desc, vlad_tape) = netvlad_forward(&attended, &params.netvlad)?;

    let pos = &view_desc[&positive].values;
    let negs: Vec<&[f64]> = negatives.iter().map(|n| view_desc[n].values.as_slice()).collect();
    let con = contrastive_loss(&desc.values, &[pos.as_slice()], &negs, cfg)?;

    let rgb_set = SemanticFeatureSet::from_features(&enc.features, &sample.obs.gt_labels, cfg.n_classes);
    let sem = semantic_consistency_loss(&rgb_set, &batch.views[positive].class_means, cfg);
    let (l_seg, g_logits) = segmentation_loss(&enc.logits, cfg.n_classes, &sample.obs.gt_labels)?;

    // descriptor -> attended features -> encoder features
    let g_attended = netvlad_backward(&attended, &params.netvlad, &vlad_tape, &con.g_anchor, Some(&mut grads.netvlad));
    let mut g_features = semantic_attention_backward(
        &enc.features,
        batch.context,
        &params.attention,
        &att_tape,
        &g_attended,
        &mut grads.attention,
    );
    if cfg.lambda_sem != 0.0 && sem.shared_classes > 0 {
        let g_sem = rgb_set.backprop(&sem.g_rgb, &enc.features, &sample.obs.gt_labels);
        axpy(&mut g_features, cfg.lambda_sem, &g_sem);
    }
    encode_query_backward(&sample.obs, &params.encoder, &enc, &g_features, &g_logits, &mut grads.encoder);

    let mut view_grads = vec![(positive, con.g_positives[0].clone())];
    view_grads.extend(negatives.iter().copied().zip(con.g_negatives));
    Ok(AnchorPass {
        l_contrastive: con.loss,
        l_sem: sem.loss,
        l_seg,
        grads,
        view_grads,
    })
}

/// Full forward/backward over a batch. Loss terms and gradients are means
/// over anchors.
pub fn total_loss(batch: &TrainBatch<'_>, params: &ModelParams, cfg: &Config) -> Result<LossReport> {
    if batch.anchors.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let used: Vec<usize> = {
        let mut v: Vec<usize> = batch
            .positives
            .iter()
            .chain(batch.negatives.iter().flatten())
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let forward: Vec<(GlobalDescriptor, NetVladTape)> = used
        .par_iter()
        .map(|&v| netvlad_forward(&batch.views[v].features, &params.netvlad))
        .collect::<Result<_>>()?;
    let view_desc: BTreeMap<usize, GlobalDescriptor> = used
        .iter()
        .zip(&forward)
        .map(|(&v, (d, _))| (v, d.clone()))
        .collect();

    let passes: Vec<AnchorPass> = (0..batch.anchors.len())
        .into_par_iter()
        .map(|a| {
            anchor_pass(
                batch.anchors[a],
                batch.positives[a],
                &batch.negatives[a],
                &view_desc,
                batch,
                params,
                cfg,
            )
        })
        .collect::<Result<_>>()?;

    let inv = 1.0 / batch.anchors.len() as f64;
    let mut grads = params.zeros_grad();
    let mut g_views: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let (mut lc, mut ls, mut lg) = (0.0, 0.0, 0.0);
    for p in &passes {
        lc += p.l_contrastive;
        ls += p.l_sem;
        lg += p.l_seg;
        grads.add_scaled(&p.grads, 1.0);
        for (v, g) in &p.view_grads {
            let acc = g_views.entry(*v).or_insert_with(|| vec![0.0; g.len()]);
            axpy(acc, 1.0, g);
        }
    }
    let view_param_grads: Vec<ModelParams> = used
        .par_iter()
        .zip(forward.par_iter())
        .map(|(&v, (_, tape))| {
            let mut g = params.zeros_grad();
            netvlad_backward(&batch.views[v].features, &params.netvlad, tape, &g_views[&v], Some(&mut g.netvlad));
            g
        })
        .collect();
    for g in &view_param_grads {
        grads.add_scaled(g, 1.0);
    }
    grads.scale(inv);
    let (lc, ls, lg) = (lc * inv, ls * inv, lg * inv);
    Ok(LossReport {
        l_contrastive: lc,
        l_sem: ls,
        l_seg: lg,
        l_total: lc + cfg.lambda_sem * ls + lg,
        grads,
    })
}

/// Training samples plus the map views they are contrasted against.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<TrainSample>,
    pub views: Vec<MapView>,
    /// Semantic context fed to the attention gate (database average).
    pub context: Vec<f64>,
}

impl TrainingSet {
    fn views_by_place(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, v) in self.views.iter().enumerate() {
            m.entry(v.place_id).or_default().push(i);
        }
        for ids in m.values_mut() {
            ids.sort_by_key(|&i| self.views[i].viewpoint);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_contrastive: f64,
    pub l_sem: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Seeded mini-batch gradient descent with a fixed learning rate. Each
/// anchor is paired with the view of its own place closest to its heading and
/// `negatives_per_anchor` views of other places.
pub fn train(
    set: &TrainingSet,
    init: ModelParams,
    cfg: &Config,
    epochs: usize,
    lr: f64,
) -> Result<TrainOutcome> {
    let by_place = set.views_by_place();
    if by_place.len() < 2 {
        return Err(Error::InvalidInput("training needs at least two places".into()));
    }
    if set.samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let mut rng = cfg.rng_stream(0x7a11);
    let mut params = init;
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut lc, mut ls, mut lg, mut lt) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut positives = Vec::with_capacity(chunk.len());
            let mut negatives = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let sample = &set.samples[s];
                let own = &by_place[&sample.place_id];
                let step = 2.0 * std::f64::consts::PI / own.len() as f64;
                let k = (sample.heading / step).round() as usize % own.len();
                positives.push(own[k]);
                let candidates: Vec<u32> = by_place
                    .keys()
                    .copied()
                    .filter(|&p| {
                        let q = set.views[by_place[&p][0]].position;
                        (q[0] - sample.position[0]).hypot(q[1] - sample.position[1]) > cfg.match_threshold_m
                    })
                    .collect();
                let take = cfg.negatives_per_anchor.min(candidates.len()).max(1);
                let chosen: Vec<u32> = candidates.choose_multiple(&mut rng, take).copied().collect();
                negatives.push(
                    chosen
                        .iter()
                        .map(|p| {
                            let views = &by_place[p];
                            views[rng.random_range(0..views.len())]
                        })
                        .collect(),
                );
            }
            let batch = TrainBatch {
                anchors: chunk.iter().map(|&s| &set.samples[s]).collect(),
                views: &set.views,
                positives,
                negatives,
                context: &set.context,
            };
            let report = total_loss(&batch, &params, cfg)?;
            if !report.l_total.is_finite() || !report.grads.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let w = chunk.len() as f64 / set.samples.len() as f64;
            lc += w * report.l_contrastive;
            ls += w * report.l_sem;
            lg += w * report.l_seg;
            lt += w * report.l_total;
            if lr != 0.0 {
                params.add_scaled(&report.grads, -lr);
            }
        }
        if !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(EpochRecord {
            epoch,
            l_contrastive: lc,
            l_sem: ls,
            l_seg: lg,
            l_total: lt,
        });
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: LossKind) -> Config {
        Config {
            loss_kind: kind,
            ..Config::default()
        }
    }

    #[test]
    fn satisfied_triplet_is_zero() {
        let a = [1.0, 0.0];
        let p = [1.0, 0.0];
        let n = [-1.0, 0.0];
        let l = contrastive_loss(&a, &[&p], &[&n], &cfg(LossKind::Triplet)).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.g_anchor.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infonce_closed_form() {
        let c = Config {
            temperature: 1.0,
            ..cfg(LossKind::Infonce)
        };
        let a = [1.0, 0.0];
        let n = [0.0, 1.0];
        let l = contrastive_loss(&a, &[&a], &[&n], &c).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.loss - expect).abs() < 1e-12);
        assert!((l.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_needs_both_sides() {
        let a = [1.0];
        assert!(contrastive_loss(&a, &[], &[&a], &cfg(LossKind::Infonce)).is_err());
        assert!(contrastive_loss(&a, &[&a], &[], &cfg(LossKind::Triplet)).is_err());
    }

    fn set(means: Vec<Option<Vec<f64>>>) -> SemanticFeatureSet {
        let counts = means.iter().map(|m| usize::from(m.is_some())).collect();
        SemanticFeatureSet {
            channels: 2,
            means,
            counts,
        }
    }

    #[test]
    fn semantic_loss_cases() {
        let c = Config::default();
        let mut m = vec![None; 8];
        m[2] = Some(vec![1.0, 2.0]);
        let same = semantic_consistency_loss(&set(m.clone()), &set(m.clone()), &c);
        assert_eq!(same.loss, 0.0);
        let mut m2 = m.clone();
        m2[2] = Some(vec![4.0, -2.0]);
        let l = semantic_consistency_loss(&set(m.clone()), &set(m2.clone()), &c);
        assert_eq!(l.loss, 25.0);
        // void and one-sided classes never pair
        let mut m3 = m2.clone();
        m3[0] = Some(vec![9.0, 9.0]);
        m3[5] = Some(vec![9.0, 9.0]);
        let mut m4 = m.clone();
        m4[0] = Some(vec![0.0, 0.0]);
        assert_eq!(semantic_consistency_loss(&set(m4), &set(m3), &c).loss, 25.0);
        let none = semantic_consistency_loss(&set(vec![None; 8]), &set(m2), &c);
        assert_eq!(none.loss, 0.0);
        assert_eq!(none.shared_classes, 0);
    }

    #[test]
    fn segmentation_loss_cases() {
        let mut gt = SemanticImage::empty(2, 2);
        gt.labels = vec![1, 2, 0, 7];
        let mut z = vec![0.0; 4 * 8];
        let (l, _) = segmentation_loss(&z, 8, &gt).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        for (i, &t) in gt.labels.iter().enumerate() {
            z[i * 8 + t as usize] = 50.0;
        }
        let (l, g) = segmentation_loss(&z, 8, &gt).unwrap();
        assert!(l < 1e-20);
        assert!(g[2 * 8..3 * 8].iter().all(|&v| v == 0.0));
        let (l, g) = segmentation_loss(&z, 8, &SemanticImage::empty(2, 2)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
