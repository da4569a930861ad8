//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use xpr_core::aggregation::{describe_query, describe_viewpoint};
use xpr_core::config::QUERY_CHANNELS;
use xpr_core::io::{self, QueryRecord};
use xpr_core::matching::{match_query, MapIndex, MatchResult};
use xpr_core::pipeline::{self, SynthOptions};
use xpr_core::projection::RangeImage;
use xpr_core::selfcheck::{run_selfcheck, SelfCheckOptions};
use xpr_core::{Config, ModelParams};

use crate::manifest::{manifest_path, DirLock, RunManifest};
use crate::{BenchArgs, BuildMapArgs, Cli, Command, EvalArgs, Failure, MatchArgs, SelfcheckArgs, SynthArgs, TrainArgs};

pub const RESULTS_HEADER: [&str; 7] = ["query_id", "best_place", "best_k", "Sim", "phi", "psi", "rank_of_truth"];
pub const HISTORY_HEADER: [&str; 5] = ["epoch", "l_contrastive", "l_sem", "l_seg", "l_total"];
pub const BENCH_HEADER: [&str; 4] = ["stage", "mean_ms", "median_ms", "p95_ms"];

pub fn run(cli: Cli) -> Result<(), Failure> {
    let (mut manifest, default_manifest) = match &cli.command {
        Command::Synth(a) => (RunManifest::new("synth"), manifest_path(&a.out)),
        Command::BuildMap(a) => (RunManifest::new("build-map"), manifest_path(&a.out)),
        Command::Match(a) => (RunManifest::new("match"), manifest_path(&a.out)),
        Command::Train(a) => (RunManifest::new("train"), manifest_path(&a.out)),
        Command::Eval(a) => (RunManifest::new("eval"), manifest_path(&eval_out(a))),
        Command::Selfcheck(_) => (RunManifest::new("selfcheck"), PathBuf::from("selfcheck.manifest.json")),
        Command::Bench(a) => (RunManifest::new("bench"), manifest_path(&bench_out(a))),
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &mut manifest),
        Command::BuildMap(a) => build_map(a, &mut manifest),
        Command::Match(a) => cmd_match(a, &mut manifest),
        Command::Train(a) => train(a, &mut manifest),
        Command::Eval(a) => eval(a, &mut manifest),
        Command::Selfcheck(a) => selfcheck(a, &mut manifest),
        Command::Bench(a) => bench(a, &mut manifest),
    };
    let path = cli.manifest.unwrap_or(default_manifest);
    if result.is_ok() || matches!(result, Err(Failure::Check(_))) {
        manifest.write(&path)?;
    }
    result
}

fn load_params(ckpt: Option<&Path>, cfg: &Config, manifest: &mut RunManifest) -> Result<ModelParams, Failure> {
    match ckpt {
        None => Ok(ModelParams::init(cfg)),
        Some(path) => {
            manifest.inputs.push(path.to_path_buf());
            let (params, ckpt_cfg) = io::load_checkpoint(path)?;
            if ckpt_cfg != *cfg {
                return Err(Failure::Data(anyhow!(
                    "config mismatch between {} and the data/index config",
                    path.display()
                )));
            }
            Ok(params)
        }
    }
}

fn is_non_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<(), Failure> {
    if a.places == 0 {
        return Err(Failure::Usage("--places must be at least 1".into()));
    }
    if !(a.density >= 0.0 && a.density.is_finite()) || !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(Failure::Usage("--density and --noise must be finite and non-negative".into()));
    }
    let base = match &a.config {
        Some(p) => {
            m.inputs.push(p.clone());
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::from_json(&text)?
        }
        None => Config::default(),
    };
    let cfg = Config { seed: a.seed, ..base }.validate()?;
    m.with_config(&cfg);
    if is_non_empty_dir(&a.out) {
        if !a.force {
            return Err(Failure::Data(anyhow!(
                "{} exists and is not empty (use --force to overwrite)",
                a.out.display()
            )));
        }
        std::fs::remove_dir_all(&a.out).with_context(|| format!("clearing {}", a.out.display()))?;
    }
    let _lock = DirLock::acquire(&a.out)?;
    let opts = SynthOptions {
        n_places: a.places,
        density: a.density,
        train_per_place: a.train_per_place,
        test_per_place: a.test_per_place,
        noise_level: a.noise,
        aliased: a.aliased,
    };
    let data = m.time("synthesize", || pipeline::synthesize(&opts, &cfg))?;
    m.time("write", || -> Result<(), Failure> {
        io::write_dataset(&a.out, &data.meta, &data.anchors, &data.local_clouds)?;
        for (split, queries) in [("train", &data.train), ("test", &data.test)] {
            let dir = a.out.join("queries").join(split);
            std::fs::create_dir_all(&dir)?;
            for q in queries.iter() {
                io::save_query(&dir.join(format!("{:06}.qobs", q.query_id)), q)?;
            }
        }
        Ok(())
    })?;
    m.outputs.push(a.out.clone());
    println!(
        "wrote {} places, {} train and {} test queries to {}",
        data.meta.places.len(),
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn build_map(a: &BuildMapArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.inputs.push(a.data.clone());
    let data = m.time("load", || io::load_dataset(&a.data))?;
    let cfg = data.meta.config.clone();
    m.with_config(&cfg);
    let params = load_params(a.ckpt.as_deref(), &cfg, m)?;
    let _lock = DirLock::for_file(&a.out)?;
    let places = data.meta.place_records();
    let views = m.time("render", || pipeline::render_views(&places, &data.poses, &data.clouds, &cfg))?;
    let index = m.time("describe", || pipeline::build_index(places, &views, &params, &cfg))?;
    m.time("write", || io::save_index(&a.out, &index))?;
    m.outputs.push(a.out.clone());
    println!("wrote {} entries for {} places to {}", index.entries.len(), index.places.len(), a.out.display());
    Ok(())
}

fn check_queries(queries: &[QueryRecord], cfg: &Config) -> Result<(), Failure> {
    for q in queries {
        let o = &q.obs;
        if o.rows != cfg.range_rows || o.cols != cfg.frustum_cols() || o.channels != QUERY_CHANNELS {
            return Err(Failure::Data(anyhow!(
                "query {} is {}x{}x{}, the index config expects {}x{}x{}",
                q.query_id,
                o.rows,
                o.cols,
                o.channels,
                cfg.range_rows,
                cfg.frustum_cols(),
                QUERY_CHANNELS
            )));
        }
    }
    Ok(())
}

/// 1-based rank of the best-ranked place within the match threshold of the
/// query's ground-truth position.
pub fn rank_of_truth(result: &MatchResult, index: &MapIndex, truth: &[f64; 3]) -> Option<usize> {
    let thr = index.config.match_threshold_m;
    result.ranked.iter().position(|(p, _)| {
        index
            .position_of(*p)
            .is_some_and(|pos| (pos[0] - truth[0]).hypot(pos[1] - truth[1]) <= thr)
    })
    .map(|r| r + 1)
}

fn cmd_match(a: &MatchArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.inputs.extend([a.index.clone(), a.queries.clone()]);
    let index = m.time("load_index", || io::load_index(&a.index))?;
    let cfg = index.config.clone();
    m.with_config(&cfg);
    let params = load_params(a.ckpt.as_deref(), &cfg, m)?;
    let queries = m.time("load_queries", || io::load_queries(&a.queries))?;
    check_queries(&queries, &cfg)?;
    let _lock = DirLock::for_file(&a.out)?;
    let results = m.time("match", || pipeline::match_queries(&queries, &index, &params, &cfg))?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(RESULTS_HEADER)?;
    for (q, r) in queries.iter().zip(&results) {
        let rank = rank_of_truth(r, &index, &q.position).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.query_id.to_string(),
            r.best_place_id.to_string(),
            r.best_viewpoint.to_string(),
            r.score.to_string(),
            r.phi.to_string(),
            r.psi.to_string(),
            rank,
        ])?;
    }
    w.flush()?;
    m.outputs.push(a.out.clone());
    println!("matched {} queries into {}", results.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, m: &mut RunManifest) -> Result<(), Failure> {
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(Failure::Usage("--lr must be finite and non-negative".into()));
    }
    m.inputs.push(a.data.clone());
    let data = m.time("load", || io::load_dataset(&a.data))?;
    let cfg = data.meta.config.clone();
    m.with_config(&cfg);
    let queries = io::load_queries(&a.data.join("queries").join(&a.split))?;
    check_queries(&queries, &cfg)?;
    let _lock = DirLock::for_file(&a.out)?;
    let places = data.meta.place_records();
    let views = m.time("render", || pipeline::render_views(&places, &data.poses, &data.clouds, &cfg))?;
    let set = pipeline::training_set(&queries, &views, &cfg)?;
    let init = ModelParams::init(&cfg);
    let outcome = m.time("train", || xpr_core::losses::train(&set, init, &cfg, a.epochs, a.lr))?;
    io::save_checkpoint(&a.out, &outcome.params, &cfg)?;
    let history = a.history.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.csv");
        a.out.with_file_name(name)
    });
    let mut w = csv::Writer::from_path(&history).with_context(|| format!("writing {}", history.display()))?;
    w.write_record(HISTORY_HEADER)?;
    for e in &outcome.history {
        w.write_record([
            e.epoch.to_string(),
            e.l_contrastive.to_string(),
            e.l_sem.to_string(),
            e.l_seg.to_string(),
            e.l_total.to_string(),
        ])?;
    }
    w.flush()?;
    m.outputs.extend([a.out.clone(), history]);
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!("l_total {:.6} -> {:.6} over {} epochs", first.l_total, last.l_total, outcome.history.len());
    }
    Ok(())
}

fn eval_out(a: &EvalArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| {
        let mut name = a.results.file_name().unwrap_or_default().to_os_string();
        name.push(".recall.csv");
        a.results.with_file_name(name)
    })
}

/// Formats a percentage the way result tables report it.
pub fn format_percent(v: f64) -> String {
    format!("{v:.2}")
}

fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<(), Failure> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Failure::Usage("--k needs positive integers".into()));
    }
    m.inputs.extend([a.results.clone(), a.data.clone()]);
    let meta = io::load_meta(&a.data)?;
    m.with_config(&meta.config);
    let queries = io::load_queries(&a.data.join("queries").join(&a.split))?;
    let known: std::collections::BTreeSet<u32> = queries.iter().map(|q| q.query_id).collect();
    let mut reader = csv::Reader::from_path(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    if reader.headers()?.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Failure::Data(anyhow!("{}: unexpected header", a.results.display())));
    }
    let mut ranks: Vec<Option<usize>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let qid: u32 = rec[0].parse().with_context(|| format!("line {}: bad query_id", line + 2))?;
        if !known.contains(&qid) {
            return Err(Failure::Data(anyhow!("no ground truth for query {qid} (line {})", line + 2)));
        }
        let rank = match &rec[6] {
            "" => None,
            s => Some(s.parse().with_context(|| format!("line {}: bad rank_of_truth", line + 2))?),
        };
        ranks.push(rank);
    }
    let out = eval_out(a);
    let _lock = DirLock::for_file(&out)?;
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["metric", "recall_percent"])?;
    for &k in &a.k {
        let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
        let recall = if ranks.is_empty() { 0.0 } else { 100.0 * hits as f64 / ranks.len() as f64 };
        println!("R@{k}, {}", format_percent(recall));
        w.write_record([format!("R@{k}"), format_percent(recall)])?;
    }
    w.flush()?;
    m.outputs.push(out);
    Ok(())
}

fn selfcheck(a: &SelfcheckArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.seed = Some(a.seed);
    let opts = SelfCheckOptions {
        seed: a.seed,
        corrupt_gradient: a.corrupt_gradient,
    };
    let checks = m.time("selfcheck", || run_selfcheck(&opts))?;
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:<28} max_error {:.3e}  tolerance {:.0e}  {}",
            c.name,
            c.max_error,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn bench_out(a: &BenchArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| {
        let mut name = a.index.file_name().unwrap_or_default().to_os_string();
        name.push(".bench.csv");
        a.index.with_file_name(name)
    })
}

/// `(mean, median, p95)` of `samples` in milliseconds.
pub fn summarize(samples: &mut [f64]) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p95 = samples[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (mean, median, p95)
}

fn bench(a: &BenchArgs, m: &mut RunManifest) -> Result<(), Failure> {
    if a.repeat == 0 {
        return Err(Failure::Usage("--repeat must be at least 1".into()));
    }
    m.inputs.extend([a.index.clone(), a.queries.clone()]);
    let index = io::load_index(&a.index)?;
    let cfg = index.config.clone();
    m.with_config(&cfg);
    let params = load_params(a.ckpt.as_deref(), &cfg, m)?;
    let queries = io::load_queries(&a.queries)?;
    if queries.is_empty() {
        return Err(Failure::Data(anyhow!("{} holds no queries", a.queries.display())));
    }
    check_queries(&queries, &cfg)?;
    if index.is_empty() {
        return Err(Failure::Data(anyhow!("index is empty")));
    }
    let context = index.context();
    // Viewpoint inputs rebuilt from the stored semantic images: labeled
    // cells at mid range with upward normals.
    let views: Vec<RangeImage> = index
        .entries
        .iter()
        .map(|e| {
            let mut r = RangeImage::empty(e.semantic.rows, e.semantic.cols);
            for (i, &l) in e.semantic.labels.iter().enumerate() {
                if l != 0 {
                    r.depth[i] = 0.5 * cfg.max_range_m;
                    r.normals[i] = [0.0, 0.0, 1.0];
                }
            }
            r
        })
        .collect();
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    let mut stages: [Vec<f64>; 4] = Default::default();
    let wall = Instant::now();
    for i in 0..a.repeat {
        let q = &queries[i % queries.len()];
        let e = i % index.entries.len();
        let t_total = Instant::now();
        let t = Instant::now();
        let (desc, sem) = describe_query(&q.obs, &params.encoder, &params.attention, &params.netvlad, &context)?;
        stages[0].push(ms(t));
        let t = Instant::now();
        describe_viewpoint(&views[e], &index.entries[e].semantic, &params.netvlad, &cfg)?;
        stages[1].push(ms(t));
        let t = Instant::now();
        match_query(q.query_id, &desc, &sem, &index, &cfg)?;
        stages[2].push(ms(t));
        stages[3].push(ms(t_total));
    }
    m.timings_ms.push(crate::manifest::StageTiming {
        stage: "bench".into(),
        ms: ms(wall),
    });
    let out = bench_out(a);
    let _lock = DirLock::for_file(&out)?;
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(BENCH_HEADER)?;
    println!("{}", BENCH_HEADER.join(","));
    for (name, samples) in ["query_encode", "viewpoint_describe", "match", "total"].iter().zip(stages.iter_mut()) {
        let (mean, median, p95) = summarize(samples);
        let row = [name.to_string(), format!("{mean:.4}"), format!("{median:.4}"), format!("{p95:.4}")];
        println!("{}", row.join(","));
        w.write_record(&row)?;
    }
    w.flush()?;
    m.outputs.push(out);
    Ok(())
}
