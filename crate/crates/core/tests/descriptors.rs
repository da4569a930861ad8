mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use support::oracles::{netvlad_brute_force, random_netvlad_problem};
use xpr_core::aggregation::{describe_query, netvlad, semantic_attention};
use xpr_core::config::{stream_rng, QUERY_CHANNELS};
use xpr_core::encoder::{encode_lidar_local, encode_query, LocalFeatureMap, QueryObservation};
use xpr_core::matching::geometric_similarity;
use xpr_core::projection::SemanticImage;
use xpr_core::synth::{generate_world, make_query, sample_cloud};
use xpr_core::viewpoints::render_viewpoint;
use xpr_core::{Config, ModelParams, Rng};

fn permuted(feat: &LocalFeatureMap, order: &[usize]) -> LocalFeatureMap {
    let mut out = LocalFeatureMap::zeros(feat.rows, feat.cols, feat.channels);
    for (dst, &src) in order.iter().enumerate() {
        out.mask[dst] = feat.mask[src];
        out.cell_mut(dst).copy_from_slice(feat.cell(src));
    }
    out
}

/// Every cell twice, stacked as extra rows.
fn doubled(feat: &LocalFeatureMap) -> LocalFeatureMap {
    let mut out = LocalFeatureMap::zeros(feat.rows * 2, feat.cols, feat.channels);
    let n = feat.cells();
    for i in 0..2 * n {
        out.mask[i] = feat.mask[i % n];
        out.cell_mut(i).copy_from_slice(feat.cell(i % n));
    }
    out
}

#[test]
fn netvlad_matches_brute_force_on_100_instances() {
    let mut rng = Rng::seed_from_u64(0x7e57);
    for case in 0..100 {
        let (feat, params) = random_netvlad_problem(&mut rng);
        let got = netvlad(&feat, &params).unwrap();
        match netvlad_brute_force(&feat, &params) {
            Some(want) => {
                assert!(!got.zero, "case {case}");
                let err = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-10, "case {case}: {err}");
                assert!((got.norm() - 1.0).abs() <= 1e-6);
            }
            None => assert!(got.zero, "case {case}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn netvlad_ignores_cell_order(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let (feat, params) = random_netvlad_problem(&mut rng);
        let mut order: Vec<usize> = (0..feat.cells()).collect();
        order.shuffle(&mut rng);
        let a = netvlad(&feat, &params).unwrap();
        let b = netvlad(&permuted(&feat, &order), &params).unwrap();
        prop_assert_eq!(a.zero, b.zero);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn netvlad_ignores_uniform_duplication(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let (feat, params) = random_netvlad_problem(&mut rng);
        let a = netvlad(&feat, &params).unwrap();
        let b = netvlad(&doubled(&feat), &params).unwrap();
        prop_assert_eq!(a.zero, b.zero);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn netvlad_output_is_unit_or_flagged(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let (feat, params) = random_netvlad_problem(&mut rng);
        let d = netvlad(&feat, &params).unwrap();
        if d.zero {
            prop_assert!(d.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!((d.norm() - 1.0).abs() < 1e-6);
        }
    }
}

fn sample_query(seed: u64, cfg: &Config) -> QueryObservation {
    let mut rng = stream_rng(seed, 4);
    let world = generate_world(2, &mut rng, cfg).unwrap();
    let cloud = sample_cloud(&world, 1, 2.0, &mut rng).unwrap();
    make_query(&world, 1, &cloud, 0.4, 0.3, &mut rng, cfg).unwrap().0
}

fn uniform_context(cfg: &Config) -> Vec<f64> {
    let mut ctx = vec![1.0 / (cfg.n_classes - 1) as f64; cfg.n_classes];
    ctx[0] = 0.0;
    ctx
}

#[test]
fn describe_query_is_the_composition_of_its_stages() {
    let cfg = Config::default();
    let params = ModelParams::init(&cfg);
    let obs = sample_query(1, &cfg);
    let ctx = uniform_context(&cfg);
    let encoded = encode_query(&obs, &params.encoder).unwrap();
    let gated = semantic_attention(&encoded.features, &ctx, &params.attention).unwrap();
    let manual = netvlad(&gated, &params.netvlad).unwrap();
    let (desc, labels) = describe_query(&obs, &params.encoder, &params.attention, &params.netvlad, &ctx).unwrap();
    assert_eq!(desc, manual);
    assert_eq!(labels, encoded.labels);
    let again = describe_query(&obs, &params.encoder, &params.attention, &params.netvlad, &ctx).unwrap();
    assert_eq!(desc, again.0);
}

#[test]
fn context_changes_the_query_descriptor() {
    let cfg = Config::default();
    let mut params = ModelParams::init(&cfg);
    // Large enough gate weights that the context visibly reshapes the gate.
    params.attention.bilinear.iter_mut().for_each(|v| *v *= 20.0);
    let obs = sample_query(2, &cfg);
    let mut one_hot = vec![0.0; cfg.n_classes];
    one_hot[3] = 1.0;
    let p = &params;
    let (a, _) = describe_query(&obs, &p.encoder, &p.attention, &p.netvlad, &uniform_context(&cfg)).unwrap();
    let (b, _) = describe_query(&obs, &p.encoder, &p.attention, &p.netvlad, &one_hot).unwrap();
    assert!(geometric_similarity(&a, &b).unwrap() < 1.0 - 1e-6);
}

#[test]
fn empty_observation_gives_flagged_zero_descriptor() {
    let cfg = Config::default();
    let params = ModelParams::init(&cfg);
    let (rows, cols) = (cfg.range_rows, cfg.frustum_cols());
    let obs = QueryObservation {
        rows,
        cols,
        channels: QUERY_CHANNELS,
        raw: vec![0.0; rows * cols * QUERY_CHANNELS],
        mask: vec![false; rows * cols],
        gt_labels: SemanticImage::empty(rows, cols),
    };
    let p = &params;
    let (d, _) = describe_query(&obs, &p.encoder, &p.attention, &p.netvlad, &uniform_context(&cfg)).unwrap();
    assert!(d.zero);
    assert!(geometric_similarity(&d, &d).is_err());
}

#[test]
fn lidar_features_match_field_by_field_construction() {
    let cfg = Config::default();
    let mut rng = stream_rng(9, 5);
    let world = generate_world(1, &mut rng, &cfg).unwrap();
    let cloud = sample_cloud(&world, 0, 4.0, &mut rng).unwrap();
    let (img, sem) = render_viewpoint(&cloud, &world.places[0].anchor(), &cfg);
    let feat = encode_lidar_local(&img, &sem, &cfg).unwrap();
    assert!(feat.valid_count() > 100);
    for i in 0..img.rows * img.cols {
        let mut want = vec![0.0; cfg.feature_channels()];
        let valid = img.depth[i] > 0.0;
        if valid {
            want[0] = (img.depth[i] / cfg.max_range_m).min(1.0);
            want[1] = img.normals[i][0];
            want[2] = img.normals[i][1];
            want[3] = img.normals[i][2];
            want[4 + sem.labels[i] as usize] = 1.0;
        }
        assert_eq!(feat.mask[i], valid);
        assert_eq!(feat.cell(i), &want[..], "cell {i}");
    }
}
