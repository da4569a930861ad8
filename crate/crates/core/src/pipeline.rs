//! End-to-end wiring: synthesize datasets, render and index the map, describe
//! and match queries, assemble training sets and score recall.

use rand::Rng as _;
use rayon::prelude::*;

use crate::aggregation::{describe_query, describe_viewpoint, frontal_window, GlobalDescriptor};
use crate::config::{stream_rng, Config};
use crate::encoder::encode_lidar_local;
use crate::error::{Error, Result};
use crate::io::{synthetic_class_map, DatasetMeta, MetaPlace, QueryRecord};
use crate::losses::{MapView, SemanticFeatureSet, TrainSample, TrainingSet};
use crate::matching::{average_histogram, match_query, recall_at_k, IndexEntry, MapIndex, MatchResult, PlaceRecord};
use crate::model::ModelParams;
use crate::projection::{semantic_histogram, RangeImage, SemanticImage};
use crate::synth::{
    generate_aliased_world, generate_world, make_query, sample_primitives, SyntheticWorld,
};
use crate::types::{LabeledPointCloud, Pose};
use crate::viewpoints::{make_viewpoints, render_viewpoint};

const WORLD_STREAM: u64 = 0x3091d;
const CLOUD_STREAM: u64 = 0xc10d_0000;
const QUERY_SCAN_STREAM: u64 = 0x5ca7_0000;
const HEADING_STREAM: u64 = 0x4ead;
const NOISE_STREAM: u64 = 0x0153_0000_0000;
/// Largest query heading offset from a map viewpoint, in viewpoint spacings.
pub const QUERY_HEADING_JITTER: f64 = 0.125;

/// One rendered map viewpoint.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub place_id: u32,
    pub viewpoint: u32,
    pub position: [f64; 3],
    pub pose: Pose,
    pub range: RangeImage,
    pub semantic: SemanticImage,
}

/// Renders every viewpoint of every place, in place-then-viewpoint order.
/// `clouds` are in the world frame, one per place.
pub fn render_views(
    places: &[PlaceRecord],
    anchors: &[Pose],
    clouds: &[LabeledPointCloud],
    cfg: &Config,
) -> Result<Vec<RenderedView>> {
    if places.len() != anchors.len() || places.len() != clouds.len() {
        return Err(Error::Shape("places, anchors and clouds differ in length".into()));
    }
    let jobs: Vec<(usize, usize, Pose)> = anchors
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            make_viewpoints(a, cfg)
                .poses
                .into_iter()
                .enumerate()
                .map(move |(k, p)| (i, k, p))
        })
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(i, k, pose)| {
            let (range, semantic) = render_viewpoint(&clouds[i], &pose, cfg);
            RenderedView {
                place_id: places[i].place_id,
                viewpoint: k as u32,
                position: places[i].position,
                pose,
                range,
                semantic,
            }
        })
        .collect())
}

/// Describes every view with `params` and assembles the searchable index.
/// Descriptors are rounded to f32, the precision stored on disk.
pub fn build_index(
    places: Vec<PlaceRecord>,
    views: &[RenderedView],
    params: &ModelParams,
    cfg: &Config,
) -> Result<MapIndex> {
    let entries = views
        .par_iter()
        .map(|v| {
            let descriptor = describe_viewpoint(&v.range, &v.semantic, &params.netvlad, cfg)?.quantized();
            Ok(IndexEntry {
                place_id: v.place_id,
                viewpoint: v.viewpoint,
                pose: v.pose,
                descriptor,
                semantic: v.semantic.clone(),
                histogram: semantic_histogram(&v.semantic, cfg),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MapIndex::new(cfg.clone(), places, entries)
}

/// Fixed hybrid features of each view's frontal window, for training.
pub fn map_views(views: &[RenderedView], cfg: &Config) -> Result<Vec<MapView>> {
    views
        .par_iter()
        .map(|v| {
            let (range, semantic) = frontal_window(&v.range, &v.semantic, cfg);
            let features = encode_lidar_local(&range, &semantic, cfg)?;
            let class_means = SemanticFeatureSet::from_features(&features, &semantic, cfg.n_classes);
            Ok(MapView {
                place_id: v.place_id,
                viewpoint: v.viewpoint,
                position: v.position,
                features,
                semantic,
                class_means,
            })
        })
        .collect()
}

/// Database-average semantic histogram, the context of the attention gate.
pub fn view_context(views: &[RenderedView], cfg: &Config) -> Vec<f64> {
    let hists: Vec<Vec<f64>> = views.iter().map(|v| semantic_histogram(&v.semantic, cfg)).collect();
    average_histogram(hists.iter().map(|h| &h[..]), cfg.n_classes)
}

pub fn training_set(queries: &[QueryRecord], views: &[RenderedView], cfg: &Config) -> Result<TrainingSet> {
    Ok(TrainingSet {
        samples: queries
            .iter()
            .map(|q| TrainSample {
                obs: q.obs.clone(),
                place_id: q.place_id,
                position: q.position,
                heading: q.heading,
            })
            .collect(),
        views: map_views(views, cfg)?,
        context: view_context(views, cfg),
    })
}

/// Query descriptors and predicted semantic images, in query order.
pub fn describe_queries(
    queries: &[QueryRecord],
    params: &ModelParams,
    context: &[f64],
) -> Result<Vec<(GlobalDescriptor, SemanticImage)>> {
    queries
        .par_iter()
        .map(|q| describe_query(&q.obs, &params.encoder, &params.attention, &params.netvlad, context))
        .collect()
}

pub fn match_queries(
    queries: &[QueryRecord],
    index: &MapIndex,
    params: &ModelParams,
    cfg: &Config,
) -> Result<Vec<MatchResult>> {
    let context = index.context();
    let described = describe_queries(queries, params, &context)?;
    queries
        .par_iter()
        .zip(described.par_iter())
        .map(|(q, (desc, sem))| match_query(q.query_id, desc, sem, index, cfg))
        .collect()
}

/// Recall@k (percent) for each k.
pub fn recall_table(
    results: &[MatchResult],
    index: &MapIndex,
    queries: &[QueryRecord],
    ks: &[usize],
    cfg: &Config,
) -> Result<Vec<(usize, f64)>> {
    let gt: Vec<(u32, [f64; 3])> = queries.iter().map(|q| (q.query_id, q.position)).collect();
    ks.iter()
        .map(|&k| Ok((k, recall_at_k(results, index, &gt, k, cfg)?)))
        .collect()
}

/// Knobs of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_places: usize,
    /// Surface samples per square meter.
    pub density: f64,
    pub train_per_place: usize,
    pub test_per_place: usize,
    pub noise_level: f64,
    /// Geometry-aliased, semantics-distinct place pairs.
    pub aliased: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_places: 16,
            density: crate::synth::DEFAULT_DENSITY,
            train_per_place: 8,
            test_per_place: 8,
            noise_level: 0.3,
            aliased: false,
        }
    }
}

/// A synthesized dataset held in memory.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub world: SyntheticWorld,
    pub meta: DatasetMeta,
    pub anchors: Vec<Pose>,
    /// Map clouds in each anchor's sensor frame, f32-exact as on disk.
    pub local_clouds: Vec<LabeledPointCloud>,
    /// The same clouds in the world frame.
    pub clouds: Vec<LabeledPointCloud>,
    /// Independently sampled scans the queries are rendered from.
    pub query_clouds: Vec<LabeledPointCloud>,
    pub train: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

impl SynthData {
    pub fn places(&self) -> Vec<PlaceRecord> {
        self.meta.place_records()
    }

    /// Test queries re-rendered at another noise level, same headings.
    pub fn test_queries_at(&self, noise_level: f64, cfg: &Config) -> Result<Vec<QueryRecord>> {
        let per_place = self.test.len() / self.world.places.len().max(1);
        make_queries(&self.world, &self.query_clouds, per_place, noise_level, 1, cfg)
    }
}

fn quantize_cloud(mut cloud: LabeledPointCloud) -> LabeledPointCloud {
    for p in cloud.points.iter_mut() {
        p.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    cloud.intensities = vec![0.0; cloud.points.len()];
    cloud
}

fn sample_scans(world: &SyntheticWorld, density: f64, stream: u64, cfg: &Config) -> Result<Vec<LabeledPointCloud>> {
    world
        .places
        .par_iter()
        .map(|p| {
            let mut rng = stream_rng(cfg.seed, stream + p.place_id as u64);
            let local = sample_primitives(&p.primitives, nalgebra::Vector3::zeros(), density, &mut rng)?;
            Ok(quantize_cloud(local))
        })
        .collect()
}

/// `per_place` queries for every place; split 0 is training, 1 is test.
/// Each heading is a random map viewpoint heading plus a residual offset of at
/// most an eighth of the viewpoint spacing. Headings depend only on the seed
/// and split, so re-rendering at another noise level changes only the noise.
pub fn make_queries(
    world: &SyntheticWorld,
    query_clouds: &[LabeledPointCloud],
    per_place: usize,
    noise_level: f64,
    split: u64,
    cfg: &Config,
) -> Result<Vec<QueryRecord>> {
    let mut heading_rng = stream_rng(cfg.seed, HEADING_STREAM + split);
    let step = 2.0 * std::f64::consts::PI / cfg.n_viewpoints as f64;
    let mut jobs = Vec::new();
    for (i, place) in world.places.iter().enumerate() {
        for _ in 0..per_place {
            let k = heading_rng.random_range(0..cfg.n_viewpoints);
            let jitter = heading_rng.random_range(-QUERY_HEADING_JITTER..=QUERY_HEADING_JITTER);
            let heading = (k as f64 + jitter) * step;
            jobs.push((jobs.len() as u32, i, place.place_id, heading));
        }
    }
    jobs.into_par_iter()
        .map(|(query_id, i, place_id, heading)| {
            let mut rng = stream_rng(cfg.seed, NOISE_STREAM + (split << 32) + query_id as u64);
            let (obs, position) = make_query(world, place_id, &query_clouds[i], heading, noise_level, &mut rng, cfg)?;
            Ok(QueryRecord {
                query_id,
                place_id,
                heading: crate::synth::normalize_heading(heading),
                position,
                obs,
            })
        })
        .collect()
}

/// Generates a world, samples map and query scans, and renders queries.
pub fn synthesize(opts: &SynthOptions, cfg: &Config) -> Result<SynthData> {
    let mut rng = cfg.rng_stream(WORLD_STREAM);
    let world = if opts.aliased {
        generate_aliased_world(opts.n_places, &mut rng, cfg)?
    } else {
        generate_world(opts.n_places, &mut rng, cfg)?
    };
    let anchors: Vec<Pose> = world.places.iter().map(|p| p.anchor()).collect();
    let local_clouds = sample_scans(&world, opts.density, CLOUD_STREAM, cfg)?;
    let clouds: Vec<LabeledPointCloud> = local_clouds
        .iter()
        .zip(&anchors)
        .map(|(c, a)| c.transformed(a))
        .collect();
    let query_clouds: Vec<LabeledPointCloud> = sample_scans(&world, opts.density, QUERY_SCAN_STREAM, cfg)?
        .iter()
        .zip(&anchors)
        .map(|(c, a)| c.transformed(a))
        .collect();
    let train = make_queries(&world, &query_clouds, opts.train_per_place, opts.noise_level, 0, cfg)?;
    let test = make_queries(&world, &query_clouds, opts.test_per_place, opts.noise_level, 1, cfg)?;
    let meta = DatasetMeta {
        provenance: format!(
            "synthetic world: {} places, seed {}, density {}, noise {}{}",
            opts.n_places,
            cfg.seed,
            opts.density,
            opts.noise_level,
            if opts.aliased { ", aliased pairs" } else { "" }
        ),
        config: cfg.clone(),
        class_map: synthetic_class_map(),
        places: world
            .places
            .iter()
            .map(|p| MetaPlace {
                place_id: p.place_id,
                position: p.position,
            })
            .collect(),
    };
    Ok(SynthData {
        world,
        meta,
        anchors,
        local_clouds,
        clouds,
        query_clouds,
        train,
        test,
    })
}
