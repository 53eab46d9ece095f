//! Ablation tables and parameter sweeps over completed run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ncdss_core::{Error, Result};

use crate::config::{RunConfig, KEYS};
use crate::pipeline::{CONFIG_FILE, SUMMARY_FILE};

/// One completed run: its config snapshot and per-seed novel mIoU.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub novel_miou: BTreeMap<u64, f64>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let bad = |reason: &str| Error::Manifest(format!("{}: {reason}", path.display()));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty summary"))?.split(',').collect();
        let col = header
            .iter()
            .position(|h| *h == "novel_miou")
            .ok_or_else(|| bad("no novel_miou column"))?;
        let mut novel_miou = BTreeMap::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[0] == "mean" {
                continue;
            }
            let seed = fields[0].parse().map_err(|_| bad("bad seed"))?;
            let v = fields
                .get(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad novel_miou"))?;
            novel_miou.insert(seed, v);
        }
        if novel_miou.is_empty() {
            return Err(bad("no seed rows"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            novel_miou,
        })
    }

    pub fn mean(&self) -> f64 {
        self.novel_miou.values().sum::<f64>() / self.novel_miou.len() as f64
    }
}

/// Keys that may legitimately vary between rows of one table.
fn is_varied_key(key: &str) -> bool {
    key.starts_with("ablation.") || key.starts_with("run.") || key == "eums.lambda" || key == "eums.eta"
}

/// Messages for runs that cannot share a table with the first run.
pub fn incompatibilities(runs: &[RunSummary]) -> Vec<String> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for r in &runs[1..] {
        let keys: Vec<&str> = first
            .config
            .differing_keys(&r.config)
            .into_iter()
            .filter(|k| !is_varied_key(k))
            .collect();
        if !keys.is_empty() {
            out.push(format!(
                "incompatible: {} differs from {} in {}",
                r.dir.display(),
                first.dir.display(),
                keys.join(", ")
            ));
        }
        if r.novel_miou.keys().ne(first.novel_miou.keys()) {
            out.push(format!(
                "incompatible: {} was run with different seeds than {}",
                r.dir.display(),
                first.dir.display()
            ));
        }
    }
    out
}

/// Rows of component switches, one column per seed, and the seed average.
pub fn ablation_table(runs: &[RunSummary]) -> String {
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = runs.iter().flat_map(|r| r.novel_miou.keys().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut out = String::from("OC  ER  DR  ST ");
    for s in &seeds {
        let _ = write!(out, " | {:>7}", format!("seed {s}"));
    }
    out.push_str(" |     AVG\n");
    let mark = |on: bool| if on { "✓" } else { " " };
    for r in runs {
        let a = &r.config.ablation;
        let _ = write!(
            out,
            "{}   {}   {}   {} ",
            mark(a.over_clustering),
            mark(a.entropy_ranking),
            mark(a.dynamic_reassignment),
            mark(a.self_training)
        );
        for s in &seeds {
            match r.novel_miou.get(s) {
                Some(v) => {
                    let _ = write!(out, " | {:>7.2}", 100.0 * v);
                }
                None => out.push_str(" |       -"),
            }
        }
        let _ = writeln!(out, " | {:>7.2}", 100.0 * r.mean());
    }
    out
}

/// `group,<key>,novel_miou` points for runs that differ only in `key`.
///
/// Runs are grouped by every other setting that affects results; groups
/// with fewer than two values of `key` are left out.
pub fn sweep_csv(runs: &[RunSummary], key: &str) -> String {
    let field = key.rsplit('.').next().unwrap_or(key);
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        let signature: String = KEYS
            .iter()
            .filter(|k| **k != key && !k.starts_with("run."))
            .map(|k| format!("{k}={};", r.config.get(k).unwrap_or_default()))
            .collect();
        let value = r.config.get(key).unwrap_or_default();
        groups.entry(signature).or_default().entry(value).or_default().push(r.mean());
    }
    let mut out = format!("group,{field},novel_miou\n");
    for (g, points) in groups.values().filter(|p| p.len() >= 2).enumerate() {
        let mut points: Vec<(f64, f64)> = points
            .iter()
            .map(|(v, m)| (v.parse().unwrap_or(f64::NAN), m.iter().sum::<f64>() / m.len() as f64))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (v, m) in points {
            let _ = writeln!(out, "{g},{v},{m}");
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Report {
    pub table: String,
    pub warnings: Vec<String>,
    pub lambda_sweep: String,
    pub eta_sweep: String,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = self.table.clone();
        for w in &self.warnings {
            let _ = writeln!(out, "{w}");
        }
        out
    }
}

/// Builds the report and, when `out` is given, writes `table.txt`,
/// `lambda_sweep.csv` and `eta_sweep.csv` there.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("no run directories given".into()));
    }
    let runs = run_dirs.iter().map(|d| RunSummary::load(d)).collect::<Result<Vec<_>>>()?;
    let report = Report {
        table: ablation_table(&runs),
        warnings: incompatibilities(&runs),
        lambda_sweep: sweep_csv(&runs, "eums.lambda"),
        eta_sweep: sweep_csv(&runs, "eums.eta"),
    };
    if let Some(dir) = out {
        let io = |path: PathBuf| move |source| Error::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        for (name, text) in [
            ("table.txt", report.to_text()),
            ("lambda_sweep.csv", report.lambda_sweep.clone()),
            ("eta_sweep.csv", report.eta_sweep.clone()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io(path.clone()))?;
        }
    }
    Ok(report)
}
