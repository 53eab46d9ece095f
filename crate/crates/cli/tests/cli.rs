use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ncdss_cli::pipeline::{self, StageCache};
use ncdss_cli::report::cmd_report;
use ncdss_cli::RunConfig;
use ncdss_core::selftrain::Ablation;

const TINY: &str = "
scene.height = 12
scene.width = 12
scene.dim = 6
scene.sigma = 0.3
scene.radius_min = 2
scene.radius_max = 4
fold.n_base_fg = 3
fold.n_novel = 3
fold.n_base_images = 24
fold.n_novel_images = 30
fold.n_val_images = 10
train.epochs = 3
train.lr_decay_epoch = 2
eums.epochs = 4
eums.reassign_epoch = 2
eums.ramp_length = 2
eums.min_novel_pixels = 4
";

fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

fn ncdss(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ncdss")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_three_splits_and_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let o = ncdss(&["synth", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for split in pipeline::SPLITS {
        assert!(out.join(split).join("manifest.json").is_file());
    }
    let snapshot = RunConfig::load(&out.join(pipeline::CONFIG_FILE)).unwrap();
    assert_eq!(snapshot, RunConfig::default());
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline::cmd_synth(&cfg, &a).unwrap();
    pipeline::cmd_synth(&cfg, &b).unwrap();
    for split in pipeline::SPLITS {
        let read = |d: &Path| fs::read(d.join(split).join("manifest.json")).unwrap();
        assert_eq!(read(&a), read(&b));
        let rec = |d: &Path| fs::read(d.join(split).join("000003.rec")).unwrap();
        assert_eq!(rec(&a), rec(&b));
    }
}

#[test]
fn invalid_fold_is_a_runtime_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.conf");
    fs::write(&cfg, "fold.n_novel = 0\n").unwrap();
    let o = ncdss(&["synth", "--config", path(&cfg), "--out", path(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fold.n_novel"));
}

#[test]
fn exit_codes() {
    assert_eq!(ncdss(&["--help"]).status.code(), Some(0));
    assert_eq!(ncdss(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ncdss(&["run", "--bench", "x"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let o = ncdss(&[
        "run",
        "--bench",
        path(&tmp.path().join("missing")),
        "--out",
        path(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no benchmark"));
}

fn bench(tmp: &Path, cfg: &RunConfig) -> PathBuf {
    let dir = tmp.join("bench");
    if !dir.exists() {
        pipeline::cmd_synth(cfg, &dir).unwrap();
    }
    dir
}

#[test]
fn run_writes_snapshot_checkpoints_metrics_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.seeds = vec![3, 4];
    let b = bench(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let results = pipeline::cmd_run(&cfg, &b, &out, None).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(RunConfig::load(&out.join("config.txt")).unwrap(), cfg);
    for seed in [3, 4] {
        let d = pipeline::seed_dir(&out, seed);
        for f in ["base.ckpt", "model.ckpt", "teacher.ckpt", "metrics.csv", "eval.txt", "eval.csv", "split.txt", "clusters.tsv"] {
            assert!(d.join(f).is_file(), "{f}");
        }
        let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
        // header + basic loop + clean/unclean loop
        assert_eq!(metrics.lines().count(), 1 + 2 * cfg.eums.epochs);
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
    let novel: Vec<f64> = results.iter().map(|r| r.eval.novel_miou).collect();
    let mean: f64 = lines[3].split(',').nth(2).unwrap().parse().unwrap();
    assert!((mean - (novel[0] + novel[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn switches_off_runs_the_basic_framework() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.ablation = Ablation::basic();
    let b = bench(tmp.path(), &cfg);
    let out = tmp.path().join("basic");
    let r = pipeline::cmd_run(&cfg, &b, &out, None).unwrap();
    assert!(r[0].teacher.is_none() && r[0].split_report.is_none());
    assert!(!pipeline::seed_dir(&out, 0).join("split.txt").exists());
    assert!(r[0].metrics.iter().all(|m| m.phase.to_string() == "basic"));
    assert_eq!(r[0].eval.mapping.mode.to_string(), "one-to-one");
    assert_eq!(r[0].pseudo.cluster_classes.len(), cfg.fold.n_novel);
}

#[test]
fn cached_stages_give_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let b = bench(tmp.path(), &cfg);
    let cache = StageCache {
        dir: tmp.path().join("cache"),
    };
    let first = pipeline::cmd_run(&cfg, &b, &tmp.path().join("r1"), Some(&cache)).unwrap();
    let second = pipeline::cmd_run(&cfg, &b, &tmp.path().join("r2"), Some(&cache)).unwrap();
    assert!(!first[0].stage1_cached && !first[0].stage2_cached);
    assert!(second[0].stage1_cached && second[0].stage2_cached);
    assert_eq!(first[0].model, second[0].model);
    assert_eq!(first[0].metrics, second[0].metrics);

    // a changed stage-3 setting reuses both cached stages
    let mut other = cfg.clone();
    other.eums.lambda = 0.5;
    let third = pipeline::run_seed(&other, &pipeline::load_benchmark(&other, &b).unwrap(), 0, Some(&cache)).unwrap();
    assert!(third.stage1_cached && third.stage2_cached);
    // a changed clustering mode reuses stage 1 only
    other.ablation.over_clustering = false;
    let fourth = pipeline::run_seed(&other, &pipeline::load_benchmark(&other, &b).unwrap(), 0, Some(&cache)).unwrap();
    assert!(fourth.stage1_cached && !fourth.stage2_cached);
}

#[test]
fn run_rejects_a_mismatched_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let b = bench(tmp.path(), &cfg);
    let mut other = cfg.clone();
    other.scene.sigma = 0.9;
    let err = pipeline::cmd_run(&other, &b, &tmp.path().join("r"), None).unwrap_err();
    assert!(err.to_string().contains("scene.sigma"), "{err}");
    // the snapshot is written before anything is computed
    assert!(tmp.path().join("r").join("config.txt").is_file());
}

#[test]
fn eval_scores_a_saved_checkpoint_like_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let b = bench(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let r = pipeline::cmd_run(&cfg, &b, &out, None).unwrap();
    let model = pipeline::seed_dir(&out, 0).join("model.ckpt");
    let report = pipeline::cmd_eval(&cfg, &b, &model, "val").unwrap();
    // checkpoints are f32, so scores may move slightly
    assert!((report.novel_miou - r[0].eval.novel_miou).abs() < 0.05);
    assert!(pipeline::cmd_eval(&cfg, &b, &model, "train").is_err());
}

fn fake_run(root: &Path, name: &str, cfg: &RunConfig, scores: &[(u64, f64)]) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("config.txt"), cfg.to_text()).unwrap();
    let mut csv = String::from("seed,base_miou,novel_miou,all_miou,mapping_mode,pixels\n");
    for (s, v) in scores {
        csv.push_str(&format!("{s},0.9,{v},0.8,one-to-one,100\n"));
    }
    csv.push_str("mean,0.9,0,0.8,one-to-one,100\n");
    fs::write(dir.join("summary.csv"), csv).unwrap();
    dir
}

#[test]
fn report_table_has_one_row_per_run_and_an_average() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = [
        Ablation::basic(),
        Ablation { over_clustering: true, ..Ablation::basic() },
        Ablation { over_clustering: true, entropy_ranking: true, ..Ablation::basic() },
        Ablation { over_clustering: true, entropy_ranking: true, dynamic_reassignment: true, self_training: false },
        Ablation { over_clustering: true, entropy_ranking: true, dynamic_reassignment: false, self_training: true },
        Ablation::full(),
    ];
    let dirs: Vec<PathBuf> = rows
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let cfg = RunConfig {
                ablation: *a,
                ..RunConfig::default()
            };
            fake_run(tmp.path(), &format!("r{i}"), &cfg, &[(0, 0.4 + 0.01 * i as f64), (1, 0.5)])
        })
        .collect();
    let out = tmp.path().join("report");
    let report = cmd_report(&dirs, Some(&out)).unwrap();
    let lines: Vec<&str> = report.table.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].contains("AVG") && lines[0].contains("seed 0") && lines[0].contains("seed 1"));
    assert!(lines[1].trim_end().ends_with("45.00"));
    assert!(lines[6].starts_with("✓   ✓   ✓   ✓"));
    assert!(report.warnings.is_empty());
    assert!(out.join("table.txt").is_file() && out.join("lambda_sweep.csv").is_file());

    let single = cmd_report(&dirs[..1], None).unwrap();
    assert_eq!(single.table.lines().count(), 2);
}

#[test]
fn report_flags_incompatible_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fake_run(tmp.path(), "a", &RunConfig::default(), &[(0, 0.5)]);
    let mut cfg = RunConfig::default();
    cfg.scene.dim = 9;
    let b = fake_run(tmp.path(), "b", &cfg, &[(0, 0.5)]);
    let c = fake_run(tmp.path(), "c", &RunConfig::default(), &[(1, 0.5)]);
    let report = cmd_report(&[a, b, c], None).unwrap();
    assert_eq!(report.warnings.len(), 2);
    assert!(report.warnings[0].contains("scene.dim"));
    assert!(report.warnings[1].contains("different seeds"));
    assert!(report.to_text().contains("incompatible"));
}

#[test]
fn lambda_runs_form_a_sweep_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let lambdas = [0.33, 0.5, 0.67, 0.83, 1.0];
    let dirs: Vec<PathBuf> = lambdas
        .iter()
        .rev()
        .map(|&l| {
            let mut cfg = RunConfig::default();
            cfg.eums.lambda = l;
            fake_run(tmp.path(), &format!("l{l}"), &cfg, &[(0, l / 2.0)])
        })
        .collect();
    let report = cmd_report(&dirs, None).unwrap();
    let lines: Vec<&str> = report.lambda_sweep.lines().collect();
    assert_eq!(lines[0], "group,lambda,novel_miou");
    assert_eq!(lines.len(), 6);
    for (line, l) in lines[1..].iter().zip(lambdas) {
        assert_eq!(*line, format!("0,{l},{}", l / 2.0));
    }
    assert!(report.warnings.is_empty());
    assert_eq!(report.eta_sweep.lines().count(), 1);
}

#[test]
fn report_binary_prints_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fake_run(tmp.path(), "a", &RunConfig::default(), &[(0, 0.5)]);
    let o = ncdss(&["report", "--run", path(&a)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("50.00"));
}
