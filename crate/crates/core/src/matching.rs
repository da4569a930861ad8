//! Hybrid geometric + semantic similarity, multi-view matching and Recall@K.

use std::collections::{BTreeMap, HashMap};

use crate::aggregation::GlobalDescriptor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::projection::SemanticImage;
use crate::types::Pose;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceRecord {
    pub place_id: u32,
    /// World position, meters.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub place_id: u32,
    pub viewpoint: u32,
    pub pose: Pose,
    pub descriptor: GlobalDescriptor,
    /// Full-panorama labels rendered from `pose`.
    pub semantic: SemanticImage,
    pub histogram: Vec<f64>,
}

/// Searchable database of rendered map viewpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MapIndex {
    pub config: Config,
    pub places: Vec<PlaceRecord>,
    pub entries: Vec<IndexEntry>,
}

impl MapIndex {
    pub fn new(config: Config, places: Vec<PlaceRecord>, entries: Vec<IndexEntry>) -> Result<Self> {
        let index = Self {
            config,
            places,
            entries,
        };
        index.validate()?;
        Ok(index)
    }

    /// Every entry refers to a known place and each place has exactly
    /// `n_viewpoints` entries.
    pub fn validate(&self) -> Result<()> {
        let mut counts: BTreeMap<u32, usize> = self.places.iter().map(|p| (p.place_id, 0)).collect();
        if counts.len() != self.places.len() {
            return Err(Error::InvalidInput("duplicate place id in index".into()));
        }
        for e in &self.entries {
            match counts.get_mut(&e.place_id) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::InvalidInput(format!(
                        "entry refers to unknown place {}",
                        e.place_id
                    )))
                }
            }
            if e.descriptor.values.len() != self.config.descriptor_dim {
                return Err(Error::Shape("index descriptor dimension".into()));
            }
            if e.histogram.len() != self.config.n_classes {
                return Err(Error::Shape("index histogram length".into()));
            }
        }
        if let Some((id, n)) = counts.iter().find(|(_, &n)| n != self.config.n_viewpoints) {
            return Err(Error::InvalidInput(format!(
                "place {id} has {n} viewpoints, expected {}",
                self.config.n_viewpoints
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position_of(&self, place_id: u32) -> Option<[f64; 3]> {
        self.places
            .iter()
            .find(|p| p.place_id == place_id)
            .map(|p| p.position)
    }

    /// Database-average class histogram, the semantic context used for
    /// queries before any candidate is known.
    pub fn context(&self) -> Vec<f64> {
        average_histogram(self.entries.iter().map(|e| e.histogram.as_slice()), self.config.n_classes)
    }
}

/// Mean of class histograms, renormalized to sum to one.
pub fn average_histogram<'a>(hists: impl Iterator<Item = &'a [f64]>, n_classes: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n_classes];
    for h in hists {
        acc.iter_mut().zip(h).for_each(|(a, v)| *a += v);
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        let mut u = vec![0.0; n_classes];
        if n_classes > 1 {
            u[1..].iter_mut().for_each(|v| *v = 1.0 / (n_classes - 1) as f64);
        } else {
            u[0] = 1.0;
        }
        return u;
    }
    acc.iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub query_id: u32,
    pub best_place_id: u32,
    pub best_viewpoint: u32,
    pub score: f64,
    pub phi: f64,
    pub psi: f64,
    /// `(place_id, best score)`, descending; ties go to the smaller id.
    pub ranked: Vec<(u32, f64)>,
}

impl MatchResult {
    /// 1-based rank of `place_id`, if present.
    pub fn rank_of(&self, place_id: u32) -> Option<usize> {
        self.ranked.iter().position(|(p, _)| *p == place_id).map(|r| r + 1)
    }
}

/// Cosine similarity of two unit descriptors.
pub fn geometric_similarity(a: &GlobalDescriptor, b: &GlobalDescriptor) -> Result<f64> {
    if a.zero || b.zero {
        return Err(Error::ZeroDescriptor);
    }
    if a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "descriptor dims {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Centered column window of at most `width` columns.
fn window(img: &SemanticImage, width: usize) -> SemanticImage {
    if img.cols <= width {
        return img.clone();
    }
    img.crop_columns(img.cols / 2 - width / 2, width)
}

/// Mean per-class IoU over the query camera's frontal window. Classes
/// `1..n_classes` present in either image contribute; void never does.
pub fn semantic_overlap(query_sem: &SemanticImage, cand_sem: &SemanticImage, cfg: &Config) -> f64 {
    let w = cfg.frustum_cols();
    let q = window(query_sem, w);
    let c = window(cand_sem, w);
    let rows = q.rows.min(c.rows);
    let cols = q.cols.min(c.cols);
    let (q0, c0) = ((q.cols - cols) / 2, (c.cols - cols) / 2);
    let n = cfg.n_classes;
    let mut inter = vec![0usize; n];
    let mut in_q = vec![0usize; n];
    let mut in_c = vec![0usize; n];
    for r in 0..rows {
        for j in 0..cols {
            let a = q.get(r, q0 + j) as usize;
            let b = c.get(r, c0 + j) as usize;
            if a != 0 && a < n {
                in_q[a] += 1;
            }
            if b != 0 && b < n {
                in_c[b] += 1;
            }
            if a == b && a != 0 && a < n {
                inter[a] += 1;
            }
        }
    }
    let (mut sum, mut present) = (0.0, 0usize);
    for k in 1..n {
        let union = in_q[k] + in_c[k] - inter[k];
        if union > 0 {
            sum += inter[k] as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// `(alpha * phi + beta * psi, phi, psi)` against one index entry.
pub fn hybrid_similarity(
    q_desc: &GlobalDescriptor,
    q_sem: &SemanticImage,
    entry: &IndexEntry,
    cfg: &Config,
) -> Result<(f64, f64, f64)> {
    let phi = geometric_similarity(q_desc, &entry.descriptor)?;
    let psi = semantic_overlap(q_sem, &entry.semantic, cfg);
    Ok((cfg.alpha * phi + cfg.beta * psi, phi, psi))
}

/// Scores every place by its best viewpoint and ranks places by score.
pub fn match_query(
    query_id: u32,
    q_desc: &GlobalDescriptor,
    q_sem: &SemanticImage,
    index: &MapIndex,
    cfg: &Config,
) -> Result<MatchResult> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    // place -> (score, viewpoint, phi, psi)
    let mut best: BTreeMap<u32, (f64, u32, f64, f64)> = BTreeMap::new();
    for e in &index.entries {
        let (s, phi, psi) = hybrid_similarity(q_desc, q_sem, e, cfg)?;
        best.entry(e.place_id)
            .and_modify(|b| {
                if s > b.0 || (s == b.0 && e.viewpoint < b.1) {
                    *b = (s, e.viewpoint, phi, psi);
                }
            })
            .or_insert((s, e.viewpoint, phi, psi));
    }
    let mut ranked: Vec<(u32, f64)> = best.iter().map(|(&p, b)| (p, b.0)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = ranked[0].0;
    let (score, k, phi, psi) = best[&top];
    Ok(MatchResult {
        query_id,
        best_place_id: top,
        best_viewpoint: k,
        score,
        phi,
        psi,
        ranked,
    })
}

fn horizontal_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Percentage of queries whose top-`k` places include one within
/// `match_threshold_m` (horizontal distance) of the ground truth.
pub fn recall_at_k(
    results: &[MatchResult],
    index: &MapIndex,
    gt_positions: &[(u32, [f64; 3])],
    k: usize,
    cfg: &Config,
) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let gt: HashMap<u32, [f64; 3]> = gt_positions.iter().copied().collect();
    let places: HashMap<u32, [f64; 3]> = index.places.iter().map(|p| (p.place_id, p.position)).collect();
    let mut correct = 0usize;
    for r in results {
        let truth = gt.get(&r.query_id).ok_or_else(|| {
            Error::InvalidInput(format!("no ground truth for query {}", r.query_id))
        })?;
        let hit = r.ranked.iter().take(k).any(|(p, _)| {
            places
                .get(p)
                .is_some_and(|pos| horizontal_distance(pos, truth) <= cfg.match_threshold_m)
        });
        if hit {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / results.len() as f64)
}
