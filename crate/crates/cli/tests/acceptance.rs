//! Acceptance suite: runs every criterion at its stated tolerance and runtime
//! budget, prints one PASS/FAIL line each, and exits non-zero on any failure.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;
#[path = "../../core/tests/support/payloads.rs"]
mod payloads;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng as _, SeedableRng};
use xpr_core::aggregation::netvlad;
use xpr_core::io::QueryRecord;
use xpr_core::losses::train;
use xpr_core::matching::{match_query, PlaceRecord};
use xpr_core::pipeline::{
    build_index, match_queries, recall_table, render_views, synthesize, training_set, RenderedView, SynthData,
    SynthOptions,
};
use xpr_core::projection::project_spherical;
use xpr_core::{Config, ModelParams, Pose, Rng};

/// Outcome of one criterion: whether it held, plus the measured numbers.
struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn report(line: &str) {
    // Straight to the process stream so the lines survive output capture.
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn xpr(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xpr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn xpr_ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = xpr(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn gradient_checks() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = xpr(dir.path(), &["selfcheck", "--seed", "0"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let wanted = [
        "grad_contrastive_triplet",
        "grad_contrastive_infonce",
        "grad_semantic_consistency",
        "grad_segmentation",
        "grad_total_end_to_end",
    ];
    let mut worst: f64 = 0.0;
    let mut seen = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or("");
        if wanted.contains(&name) {
            seen += 1;
            let err: f64 = parts.nth(1).and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
    }
    let passed = out.status.success() && seen == wanted.len() && worst < 1e-3;
    verdict(passed, format!("{seen}/5 gradient checks, max rel. error {worst:.2e} (< 1e-3)"))
}

fn netvlad_equivalence() -> Verdict {
    let mut rng = Rng::seed_from_u64(2);
    let (mut worst, mut worst_norm): (f64, f64) = (0.0, 0.0);
    let mut agree = true;
    for _ in 0..100 {
        let (feat, params) = oracles::random_netvlad_problem(&mut rng);
        let got = netvlad(&feat, &params).unwrap();
        match oracles::netvlad_brute_force(&feat, &params) {
            Some(want) => {
                agree &= !got.zero;
                for (a, b) in got.values.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
                worst_norm = worst_norm.max((got.norm() - 1.0).abs());
            }
            None => agree &= got.zero,
        }
    }
    verdict(
        agree && worst <= 1e-10 && worst_norm <= 1e-6,
        format!("100 instances, max abs. diff {worst:.1e} (<= 1e-10), norm error {worst_norm:.1e}"),
    )
}

fn projection_geometry() -> Verdict {
    let cfg = Config::default();
    let mut mismatched = 0;
    for seed in 0..20 {
        let mut rng = Rng::seed_from_u64(1000 + seed);
        let origin = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0);
        let cloud = oracles::cell_center_scene(&mut rng, origin, 1000, &cfg);
        let w = cfg.range_cols;
        let shift = rng.random_range(1..w);
        let (base, base_sem) = project_spherical(&cloud, &Pose::from_yaw(0.0, origin), &cfg);
        let yaw = shift as f64 * std::f64::consts::TAU / w as f64;
        let (turned, turned_sem) = project_spherical(&cloud, &Pose::from_yaw(yaw, origin), &cfg);
        for r in 0..cfg.range_rows {
            for c in 0..w {
                let moved = r * w + (c + w - shift) % w;
                if turned.depth[moved] != base.depth[r * w + c] || turned_sem.labels[moved] != base_sem.labels[r * w + c]
                {
                    mismatched += 1;
                }
            }
        }
    }
    let sphere_cfg = Config {
        range_rows: 64,
        range_cols: 360,
        ..Config::default()
    };
    let (_, centered) = oracles::sphere_normal_error(Vector3::zeros(), 10.0, &sphere_cfg);
    let (off_center, _) = oracles::sphere_normal_error(Vector3::new(2.0, -1.0, 0.5), 10.0, &sphere_cfg);
    verdict(
        mismatched == 0 && centered < 2.0 && off_center < 2.0,
        format!(
            "20 scenes, {mismatched} shifted cells differ; sphere normals max {centered:.3} deg centered, \
             {off_center:.3} deg off-center (< 2)"
        ),
    )
}

fn retrieval_oracle() -> Verdict {
    let cfg = Config {
        n_viewpoints: 4,
        ..Config::default()
    };
    let mut mismatches = 0;
    for seed in 0..50 {
        let mut rng = Rng::seed_from_u64(seed);
        let (index, q, q_sem) = oracles::random_retrieval_problem(&mut rng, 20, 4, &cfg);
        let got = match_query(0, &q, &q_sem, &index, &cfg).unwrap();
        let want = oracles::ranking_oracle(&q.values, &q_sem, &index, &cfg);
        let same = got.ranked.len() == want.len()
            && got.ranked.iter().zip(&want).all(|((p, s), (wp, _, ws))| p == wp && (s - ws).abs() < 1e-12)
            && (got.best_place_id, got.best_viewpoint) == (want[0].0, want[0].1);
        if !same {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("50 instances (20 places x 4 viewpoints), {mismatches} rankings differ"))
}

/// A synthesized world with its rendered map views.
struct Fixture {
    cfg: Config,
    data: SynthData,
    places: Vec<PlaceRecord>,
    views: Vec<RenderedView>,
}

impl Fixture {
    fn new(opts: &SynthOptions, cfg: Config) -> Self {
        let data = synthesize(opts, &cfg).unwrap();
        let places = data.places();
        let views = render_views(&places, &data.anchors, &data.clouds, &cfg).unwrap();
        Self {
            cfg,
            data,
            places,
            views,
        }
    }

    fn train(&self, lambda_sem: f64, epochs: usize) -> ModelParams {
        let cfg = Config {
            lambda_sem,
            ..self.cfg.clone()
        };
        let set = training_set(&self.data.train, &self.views, &cfg).unwrap();
        train(&set, ModelParams::init(&cfg), &cfg, epochs, cfg.learning_rate).unwrap().params
    }

    /// `(hits, total)` at Recall@1; `beta` zero drops the semantic term.
    fn hits_at_1(&self, params: &ModelParams, queries: &[QueryRecord], semantic: bool) -> (usize, usize) {
        let cfg = if semantic {
            self.cfg.clone()
        } else {
            Config {
                alpha: 1.0,
                beta: 0.0,
                ..self.cfg.clone()
            }
        };
        let index = build_index(self.places.clone(), &self.views, params, &cfg).unwrap();
        let results = match_queries(queries, &index, params, &cfg).unwrap();
        let r1 = recall_table(&results, &index, queries, &[1], &cfg).unwrap()[0].1;
        ((r1 * queries.len() as f64 / 100.0).round() as usize, queries.len())
    }
}

fn percent((hits, total): (usize, usize)) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Default 16-place world, noise 0.3, trained with and without the semantic
/// consistency term. Shared by the learning and noise criteria.
struct PlainRun {
    fixture: Fixture,
    full: ModelParams,
}

fn learning_smoke(run: &PlainRun) -> Verdict {
    let f = &run.fixture;
    let before = percent(f.hits_at_1(&ModelParams::init(&f.cfg), &f.data.test, true));
    let after = percent(f.hits_at_1(&run.full, &f.data.test, true));
    verdict(
        after >= 80.0 && after - before >= 20.0,
        format!(
            "R@1 {before:.2} untrained -> {after:.2} after 100 epochs ({} queries; need >= 80.00 and +20)",
            f.data.test.len()
        ),
    )
}

fn ablation_trend() -> Verdict {
    let opts = SynthOptions {
        aliased: true,
        train_per_place: 4,
        ..SynthOptions::default()
    };
    let (mut full, mut no_sem, mut no_lsem, mut total) = (0, 0, 0, 0);
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let f = Fixture::new(
            &opts,
            Config {
                seed,
                ..Config::default()
            },
        );
        let with = f.train(f.cfg.lambda_sem, 100);
        let without = f.train(0.0, 100);
        let a = f.hits_at_1(&with, &f.data.test, true);
        let b = f.hits_at_1(&with, &f.data.test, false);
        let c = f.hits_at_1(&without, &f.data.test, true);
        per_seed.push(format!("{:.1}/{:.1}/{:.1}", percent(a), percent(b), percent(c)));
        full += a.0;
        no_sem += b.0;
        no_lsem += c.0;
        total += a.1;
    }
    let (full, no_sem, no_lsem) = (
        percent((full, total)),
        percent((no_sem, total)),
        percent((no_lsem, total)),
    );
    verdict(
        full - no_sem >= 2.0 && full - no_lsem >= 2.0,
        format!(
            "aliased pairs, seeds 0-2 pooled ({total} queries): full {full:.2}, beta=0 {no_sem:.2}, lambda=0 \
             {no_lsem:.2}; per seed full/beta0/lambda0 {}",
            per_seed.join(", ")
        ),
    )
}

fn noise_trend(run: &PlainRun) -> Verdict {
    let f = &run.fixture;
    let ablated = f.train(0.0, 100);
    let mut full = Vec::new();
    let mut stripped = 0.0;
    for noise in [0.0, 0.3, 0.6] {
        let queries = f.data.test_queries_at(noise, &f.cfg).unwrap();
        full.push(percent(f.hits_at_1(&run.full, &queries, true)));
        if noise == 0.6 {
            stripped = percent(f.hits_at_1(&ablated, &queries, false));
        }
    }
    let monotone = full[0] >= full[1] && full[1] >= full[2];
    verdict(
        monotone && full[2] - stripped >= 2.0,
        format!(
            "full R@1 {:.2} / {:.2} / {:.2} at noise 0 / 0.3 / 0.6; beta=0, lambda=0 at 0.6: {stripped:.2}",
            full[0], full[1], full[2]
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".manifest.json") {
                // Manifests carry wall-clock timings.
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_run(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let steps: [&[&str]; 4] = [
        &["synth", "--places", "8", "--seed", "11", "--out", "data", "--train-per-place", "4", "--test-per-place", "4"],
        &["train", "--data", "data", "--epochs", "10", "--lr", "0.03", "--out", "model.ckpt"],
        &["build-map", "--data", "data", "--ckpt", "model.ckpt", "--out", "map.idx"],
        &["match", "--index", "map.idx", "--queries", "data/queries/test", "--ckpt", "model.ckpt", "--out", "results.csv"],
    ];
    for args in steps {
        xpr_ok(dir, args)?;
    }
    Ok(tree(dir))
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline_run(a.path()), pipeline_run(b.path())) {
        (Ok(ta), Ok(tb)) => {
            let differing: Vec<String> = ta
                .keys()
                .chain(tb.keys())
                .filter(|k| ta.get(*k) != tb.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            verdict(
                differing.is_empty() && ta.len() > 30,
                format!("synth/train/build-map/match twice: {} artifacts, {} differ", ta.len(), differing.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

fn format_round_trips() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let failures: Vec<String> = (0..200).filter_map(|seed| payloads::round_trip_all(seed, dir.path()).err()).collect();
    verdict(
        failures.is_empty(),
        format!(
            "200 payloads x cloud/label/pose/index/checkpoint/query, {} failed{}",
            failures.len(),
            failures.first().map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    )
}

fn bench_sanity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let run = || -> Result<String, String> {
        xpr_ok(p, &["synth", "--places", "100", "--density", "1", "--out", "data", "--train-per-place", "0", "--test-per-place", "1"])?;
        xpr_ok(p, &["build-map", "--data", "data", "--out", "map.idx"])?;
        xpr_ok(p, &["bench", "--index", "map.idx", "--queries", "data/queries/test", "--out", "bench.csv"])?;
        fs::read_to_string(p.join("bench.csv")).map_err(|e| e.to_string())
    };
    match run() {
        Ok(csv) => {
            let mut lines = csv.lines();
            let header_ok = lines.next() == Some("stage,mean_ms,median_ms,p95_ms");
            let rows: BTreeMap<String, f64> = lines
                .filter_map(|l| {
                    let mut f = l.split(',');
                    Some((f.next()?.to_string(), f.next()?.parse().ok()?))
                })
                .collect();
            let stages = ["query_encode", "viewpoint_describe", "match"];
            let sum: f64 = stages.iter().filter_map(|s| rows.get(*s)).sum();
            let total = rows.get("total").copied().unwrap_or(f64::NAN);
            let complete = header_ok && stages.iter().all(|s| rows.contains_key(*s));
            verdict(
                complete && sum <= total * 1.2,
                format!(
                    "100-place index, 1000 repeats: encode {:.3} ms, describe {:.3} ms, match {:.3} ms, total {total:.3} ms",
                    rows.get("query_encode").unwrap_or(&f64::NAN),
                    rows.get("viewpoint_describe").unwrap_or(&f64::NAN),
                    rows.get("match").unwrap_or(&f64::NAN),
                ),
            )
        }
        Err(e) => verdict(false, e),
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut check = |id: usize, name: &str, budget_s: u64, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        let in_budget = took <= Duration::from_secs(budget_s);
        let passed = v.passed && in_budget;
        if !passed {
            failed += 1;
        }
        report(&format!(
            "criterion {id:>2} {:<26} {}  [{:.1}s / {budget_s}s] {}",
            name,
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            v.detail
        ));
    };

    check(1, "gradient correctness", 60, &mut gradient_checks);
    check(2, "netvlad oracle", 10, &mut netvlad_equivalence);
    check(3, "projection geometry", 30, &mut projection_geometry);
    check(4, "retrieval oracle", 10, &mut retrieval_oracle);

    // The trained default model is shared by criteria 5 and 7; its training
    // time is charged to criterion 5.
    let mut plain: Option<PlainRun> = None;
    check(5, "learning smoke test", 600, &mut || {
        let fixture = Fixture::new(&SynthOptions::default(), Config::default());
        let full = fixture.train(fixture.cfg.lambda_sem, 100);
        let run = PlainRun { fixture, full };
        let v = learning_smoke(&run);
        plain = Some(run);
        v
    });
    check(6, "ablation trend", 900, &mut ablation_trend);
    check(7, "noise robustness trend", 900, &mut || noise_trend(plain.as_ref().expect("criterion 5 ran")));
    check(8, "determinism", 300, &mut determinism);
    check(9, "format round trips", 30, &mut format_round_trips);
    check(10, "bench sanity", 600, &mut bench_sanity);

    report(&format!("acceptance: {} of 10 criteria passed", 10 - failed));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
