//! Benchmark generation, staged runs with artifact caching, evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use sha2::{Digest, Sha256};

use ncdss_core::data::format::{read_dataset, write_dataset};
use ncdss_core::eval::{evaluate, EvalReport};
use ncdss_core::pseudolabel::{build_pseudo_labels, read_pseudo_labels, write_pseudo_labels, PseudoLabels};
use ncdss_core::segmenter::{read_checkpoint, train_base, write_checkpoint, LinearSegmenter};
use ncdss_core::selftrain::{metrics_csv, train_eums, EpochMetrics, Monitor};
use ncdss_core::synth::{make_fold_benchmark, Benchmark};
use ncdss_core::{Dataset, Error, Item, Result, SplitTag};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SPLITS: [&str; 3] = ["base", "novel", "val"];

/// Keys that shape the benchmark; a run must agree with its benchmark on all of them.
fn is_benchmark_key(key: &str) -> bool {
    ["scene.", "fold.", "saliency."].iter().any(|p| key.starts_with(p))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Generates the fold benchmark in memory, with features rounded through
/// the on-disk precision so it matches a written and re-read benchmark.
pub fn generate_benchmark(cfg: &RunConfig) -> Result<Benchmark<f64>> {
    let bench = make_fold_benchmark(&cfg.scene_spec()?, &cfg.fold, &cfg.saliency)?;
    let round = |d: &Dataset<f64>| d.cast::<f32>().cast::<f64>();
    Ok(Benchmark {
        base: round(&bench.base),
        novel: round(&bench.novel),
        val: round(&bench.val),
    })
}

/// Writes `base/`, `novel/`, `val/` and a config snapshot under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Benchmark<f64>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let bench = generate_benchmark(cfg)?;
    for (name, ds) in SPLITS.iter().zip([&bench.base, &bench.novel, &bench.val]) {
        write_dataset(ds, &out.join(name))?;
    }
    info!(
        "wrote benchmark to {} ({} base, {} novel, {} val images)",
        out.display(),
        bench.base.len(),
        bench.novel.len(),
        bench.val.len()
    );
    Ok(bench)
}

/// Reads a benchmark directory and checks it was generated with the same
/// scene, fold and saliency settings as `cfg`.
pub fn load_benchmark(cfg: &RunConfig, dir: &Path) -> Result<Benchmark<f64>> {
    let snapshot = dir.join(CONFIG_FILE);
    if !snapshot.is_file() {
        return Err(Error::InvalidValue(format!("no benchmark at {}", dir.display())));
    }
    let bench_cfg = RunConfig::load(&snapshot)?;
    if let Some(key) = cfg.differing_keys(&bench_cfg).into_iter().find(|k| is_benchmark_key(k)) {
        return Err(Error::config(
            key,
            format!("differs from the benchmark snapshot in {}", dir.display()),
        ));
    }
    Ok(Benchmark {
        base: read_dataset(&dir.join("base"))?,
        novel: read_dataset(&dir.join("novel"))?,
        val: read_dataset(&dir.join("val"))?,
    })
}

/// Stage-1 training split: base images, plus novel images with their novel
/// pixels relabeled as background when `include_novel` is set.
pub fn stage1_split(bench: &Benchmark<f64>, include_novel: bool) -> Result<Dataset<f64>> {
    let cs = bench.base.class_space();
    let mut items = bench.base.items().to_vec();
    if include_novel {
        let n_base = cs.n_base() as u8;
        for it in bench.novel.items() {
            let labels = it
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidValue(format!("novel image `{}` has no labels", it.id)))?;
            let labels = labels.map(|c| if c >= n_base { 0 } else { c });
            items.push(Item::new(it.id.clone(), it.features.clone()).with_labels(labels));
        }
    }
    Dataset::new(SplitTag::Base, cs, items)
}

/// Content-addressed store for stage-1 checkpoints and stage-2 pseudo-labels.
#[derive(Clone, Debug)]
pub struct StageCache {
    pub dir: PathBuf,
}

impl StageCache {
    fn entry(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}"))
    }

    /// Writes into a scratch directory and renames it into place.
    fn publish(&self, stage: &str, key: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let target = self.entry(stage, key);
        static SCRATCH: AtomicUsize = AtomicUsize::new(0);
        let n = SCRATCH.fetch_add(1, Ordering::Relaxed);
        let scratch = self.dir.join(format!(".{stage}-{key}.{}.{n}", std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        }
        fs::create_dir_all(&scratch).map_err(io_err(&scratch))?;
        fill(&scratch)?;
        if target.exists() {
            // another process finished first; its content is identical
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        } else {
            fs::rename(&scratch, &target).map_err(io_err(&target))?;
        }
        Ok(())
    }
}

fn hash_dataset(hasher: &mut Sha256, ds: &Dataset<f64>) {
    for it in ds.items() {
        hasher.update(it.id.as_bytes());
        for v in it.features.values() {
            hasher.update((*v as f32).to_le_bytes());
        }
        if let Some(y) = &it.labels {
            hasher.update(y.values());
        }
        if let Some(m) = &it.saliency {
            hasher.update(m.values().iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
    }
}

/// Hash of the inputs stages 1 and 2 read: base and novel splits.
pub fn benchmark_hash(bench: &Benchmark<f64>) -> String {
    let mut h = Sha256::new();
    hash_dataset(&mut h, &bench.base);
    hash_dataset(&mut h, &bench.novel);
    hex(&h.finalize())
}

fn key_of(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())[..16].to_string()
}

fn stage1_key(cfg: &RunConfig, bench_hash: &str, seed: u64) -> String {
    let mut parts = vec![format!("stage1 {bench_hash} seed={seed}")];
    parts.extend(
        crate::config::KEYS
            .iter()
            .filter(|k| k.starts_with("train."))
            .map(|k| format!("{k}={}", cfg.get(k).unwrap_or_default())),
    );
    key_of(&parts)
}

fn stage2_key(cfg: &RunConfig, stage1: &str, seed: u64) -> String {
    let mut parts = vec![format!("stage2 {stage1} seed={seed}")];
    parts.extend(
        ["eums.tau", "eums.over_factor", "eums.min_novel_pixels", "ablation.over_clustering"]
            .iter()
            .map(|k| format!("{k}={}", cfg.get(k).unwrap_or_default())),
    );
    key_of(&parts)
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub base_model: LinearSegmenter<f64>,
    pub pseudo: PseudoLabels,
    pub cluster_report: String,
    pub model: LinearSegmenter<f64>,
    pub teacher: Option<LinearSegmenter<f64>>,
    pub split_report: Option<String>,
    pub metrics: Vec<EpochMetrics>,
    pub eval: EvalReport,
    pub stage1_cached: bool,
    pub stage2_cached: bool,
}

fn stage1(
    cfg: &RunConfig,
    bench: &Benchmark<f64>,
    seed: u64,
    cache: Option<(&StageCache, &str)>,
) -> Result<(LinearSegmenter<f64>, bool)> {
    const FILE: &str = "base.ckpt";
    let cs = bench.base.class_space();
    if let Some((store, key)) = cache {
        let path = store.entry("stage1", key).join(FILE);
        if path.is_file() {
            info!("seed {seed}: stage 1 loaded from {}", path.display());
            return Ok((read_checkpoint(&path, cs)?, true));
        }
    }
    let train = stage1_split(bench, cfg.base_includes_novel_images)?;
    info!("seed {seed}: stage 1 training on {} images", train.len());
    // Rounded to checkpoint precision so cached and fresh runs agree.
    let model = train_base(&train, &cfg.stage1_config(seed))?.quantized();
    if let Some((store, key)) = cache {
        store.publish("stage1", key, |dir| write_checkpoint(&model, &dir.join(FILE)))?;
    }
    Ok((model, false))
}

fn stage2(
    cfg: &RunConfig,
    bench: &Benchmark<f64>,
    base_model: &LinearSegmenter<f64>,
    seed: u64,
    cache: Option<(&StageCache, &str)>,
) -> Result<(PseudoLabels, String, bool)> {
    const REPORT: &str = "cluster_report.tsv";
    if let Some((store, key)) = cache {
        let dir = store.entry("stage2", key);
        if dir.is_dir() {
            info!("seed {seed}: stage 2 loaded from {}", dir.display());
            let report = fs::read_to_string(dir.join(REPORT)).map_err(io_err(&dir))?;
            return Ok((read_pseudo_labels(&dir)?, report, true));
        }
    }
    let (pseudo, _, report) = build_pseudo_labels(base_model, &bench.novel, &cfg.pseudo_label_config(seed))?;
    info!(
        "seed {seed}: stage 2 clustered {} of {} novel images",
        pseudo.clustered().count(),
        pseudo.records.len()
    );
    if let Some((store, key)) = cache {
        store.publish("stage2", key, |dir| {
            write_pseudo_labels(&pseudo, &bench.novel, dir)?;
            write_text(&dir.join(REPORT), &report)
        })?;
    }
    Ok((pseudo, report, false))
}

/// Runs stages 1 to 3 and evaluation for one seed.
pub fn run_seed(
    cfg: &RunConfig,
    bench: &Benchmark<f64>,
    seed: u64,
    cache: Option<&StageCache>,
) -> Result<SeedResult> {
    cfg.validate()?;
    let bench_hash = cache.map(|_| benchmark_hash(bench));
    let k1 = bench_hash.as_deref().map(|h| stage1_key(cfg, h, seed));
    let (base_model, stage1_cached) =
        stage1(cfg, bench, seed, cache.zip(k1.as_deref())).map_err(|e| e.in_stage("stage1"))?;
    let k2 = k1.as_deref().map(|k| stage2_key(cfg, k, seed));
    let (pseudo, cluster_report, stage2_cached) =
        stage2(cfg, bench, &base_model, seed, cache.zip(k2.as_deref())).map_err(|e| e.in_stage("stage2"))?;

    let mapping = cfg.cluster_mode().mapping();
    let monitor = Monitor {
        val: &bench.val,
        mode: mapping,
    };
    let out = train_eums(
        &base_model,
        &bench.base,
        &bench.novel,
        &pseudo,
        &cfg.eums,
        &cfg.train,
        &cfg.ablation,
        seed,
        Some(&monitor),
    )
    .map_err(|e| e.in_stage("stage3"))?;
    let eval = evaluate(&out.model, &bench.val, mapping).map_err(|e| e.in_stage("eval"))?;
    info!(
        "seed {seed}: {} novel mIoU {:.4}",
        cfg.ablation.label(),
        eval.novel_miou
    );
    Ok(SeedResult {
        seed,
        base_model,
        pseudo,
        cluster_report,
        teacher: out.teacher.map(|t| t.model),
        split_report: out.split.map(|s| s.report()),
        model: out.model,
        metrics: out.metrics,
        eval,
        stage1_cached,
        stage2_cached,
    })
}

pub fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed-{seed}"))
}

fn write_seed(dir: &Path, r: &SeedResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_checkpoint(&r.base_model, &dir.join("base.ckpt"))?;
    write_checkpoint(&r.model, &dir.join("model.ckpt"))?;
    if let Some(t) = &r.teacher {
        write_checkpoint(t, &dir.join("teacher.ckpt"))?;
    }
    write_text(&dir.join("clusters.tsv"), &r.cluster_report)?;
    write_text(&dir.join("pseudo_labels.tsv"), &r.pseudo.sidecar())?;
    if let Some(split) = &r.split_report {
        write_text(&dir.join("split.txt"), split)?;
    }
    write_text(&dir.join("metrics.csv"), &metrics_csv(&r.metrics))?;
    write_text(&dir.join("eval.txt"), &r.eval.to_text())?;
    write_text(
        &dir.join("eval.csv"),
        &format!("{}\n{}\n", EvalReport::CSV_HEADER, r.eval.csv_row()),
    )
}

/// Per-seed rows plus a `mean` row.
pub fn summary_csv(results: &[SeedResult]) -> String {
    let mut out = format!("seed,{}\n", EvalReport::CSV_HEADER);
    for r in results {
        let _ = writeln!(out, "{},{}", r.seed, r.eval.csv_row());
    }
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&EvalReport) -> f64| results.iter().map(|r| f(&r.eval)).sum::<f64>() / n;
    let mode = results.first().map_or(String::new(), |r| r.eval.mapping.mode.to_string());
    let pixels: u64 = results.iter().map(|r| r.eval.n_pixels).sum();
    let _ = writeln!(
        out,
        "mean,{},{},{},{mode},{pixels}",
        mean(|e| e.base_miou),
        mean(|e| e.novel_miou),
        mean(|e| e.all_miou)
    );
    out
}

/// Runs every configured seed against the benchmark in `bench_dir`.
///
/// The config snapshot is written before anything else. Stage-1 and
/// stage-2 artifacts are reused from `cache` when given.
pub fn cmd_run(
    cfg: &RunConfig,
    bench_dir: &Path,
    out: &Path,
    cache: Option<&StageCache>,
) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let bench = load_benchmark(cfg, bench_dir)?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let r = run_seed(cfg, &bench, seed, cache)?;
        write_seed(&seed_dir(out, seed), &r)?;
        results.push(r);
    }
    write_text(&out.join(SUMMARY_FILE), &summary_csv(&results))?;
    Ok(results)
}

/// Scores a checkpoint on one labeled split of a benchmark.
pub fn cmd_eval(cfg: &RunConfig, bench_dir: &Path, model: &Path, split: &str) -> Result<EvalReport> {
    if split != "val" && split != "novel" {
        return Err(Error::config("split", "must be `val` or `novel`"));
    }
    let ds: Dataset<f64> = read_dataset(&bench_dir.join(split))?;
    let mode = cfg.cluster_mode();
    let cs = ds.class_space();
    let cs = cs.with_head_size(mode.cluster_count(cs.n_novel(), cfg.eums.over_factor))?;
    let model = read_checkpoint(model, cs)?;
    evaluate(&model, &ds, mode.mapping())
}
