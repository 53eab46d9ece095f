//! Confusion matrices, mIoU and cluster-to-class matching.

use std::fmt::Write as _;

use crate::data::{ClassId, ClassSpace, Dataset, LabelMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segmenter::{forward, LinearSegmenter};

/// Pixel counts indexed by (predicted id, ground-truth id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_pred: usize,
    n_gt: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_pred: usize, n_gt: usize) -> Self {
        Self {
            n_pred,
            n_gt,
            counts: vec![0; n_pred * n_gt],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n_gt = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_gt) {
            return Err(Error::Shape("ragged confusion rows".into()));
        }
        Ok(Self {
            n_pred: rows.len(),
            n_gt,
            counts: rows.concat(),
        })
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.n_gt + gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Adds every pixel whose ground truth is not the ignore id.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if g == IGNORE_ID || p == IGNORE_ID {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.n_pred || g >= self.n_gt {
                return Err(Error::InvalidValue(format!(
                    "pair ({p}, {g}) outside a {}x{} confusion matrix",
                    self.n_pred, self.n_gt
                )));
            }
            self.counts[p * self.n_gt + g] += 1;
        }
        Ok(())
    }

    /// Rows `preds` x columns `gts` as a new matrix.
    pub fn block(&self, preds: std::ops::Range<usize>, gts: std::ops::Range<usize>) -> Self {
        let rows: Vec<Vec<u64>> = preds
            .map(|p| gts.clone().map(|g| self.get(p, g)).collect())
            .collect();
        let n_gt = gts.len();
        Self {
            n_pred: rows.len(),
            n_gt,
            counts: rows.concat(),
        }
    }
}

/// Confusion matrix of one prediction against its ground truth.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, n_pred: usize, n_gt: usize) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::zeros(n_pred, n_gt);
    conf.accumulate(pred, gt)?;
    Ok(conf)
}

/// IoU of one class; `None` if it appears in neither prediction nor ground truth.
pub fn class_iou(conf: &ConfusionMatrix, class: usize) -> Option<f64> {
    let tp = if class < conf.n_pred && class < conf.n_gt {
        conf.get(class, class)
    } else {
        0
    };
    let predicted: u64 = if class < conf.n_pred {
        (0..conf.n_gt).map(|g| conf.get(class, g)).sum()
    } else {
        0
    };
    let actual: u64 = if class < conf.n_gt {
        (0..conf.n_pred).map(|p| conf.get(p, class)).sum()
    } else {
        0
    };
    let union = predicted + actual - tp;
    (union > 0).then(|| tp as f64 / union as f64)
}

/// Mean IoU over `classes`, skipping classes absent from both sides.
pub fn miou(conf: &ConfusionMatrix, classes: impl IntoIterator<Item = usize>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut any = false;
    for c in classes {
        any = true;
        if let Some(iou) = class_iou(conf, c) {
            total += iou;
            n += 1;
        }
    }
    if !any {
        return Err(Error::Empty("no classes to average".into()));
    }
    if n == 0 {
        return Err(Error::Empty("every requested class is absent".into()));
    }
    Ok(total / n as f64)
}

/// Maximum-weight perfect matching on a square matrix.
///
/// Returns `assignment[row] = column`. Shortest augmenting paths with
/// row/column potentials, O(n^3).
pub fn hungarian_max(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::Empty("assignment matrix has no rows".into()));
    }
    if weights.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("assignment matrix must be square".into()));
    }
    let max = weights.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    // minimize max - w; 1-based arrays with a virtual column 0
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingMode {
    OneToOne,
    ManyToOne,
}

impl std::fmt::Display for MappingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MappingMode::OneToOne => "one-to-one",
            MappingMode::ManyToOne => "many-to-one",
        })
    }
}

/// Predicted novel channel index -> ground-truth novel class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMapping {
    pub mode: MappingMode,
    pub targets: Vec<usize>,
}

impl ClusterMapping {
    /// Sum of matched counts under this mapping.
    pub fn matched_total(&self, conf: &ConfusionMatrix) -> u64 {
        self.targets
            .iter()
            .enumerate()
            .map(|(p, &g)| conf.get(p, g))
            .sum()
    }
}

/// Resolves predicted novel channels to ground-truth novel classes.
///
/// `conf` is the novel block: rows are predicted novel channels, columns
/// ground-truth novel classes.
pub fn match_clusters(conf: &ConfusionMatrix, mode: MappingMode) -> Result<ClusterMapping> {
    if conf.n_pred == 0 || conf.n_gt == 0 {
        return Err(Error::Empty("novel confusion block is empty".into()));
    }
    let targets = match mode {
        MappingMode::OneToOne => {
            if conf.n_pred != conf.n_gt {
                return Err(Error::Shape(format!(
                    "one-to-one matching needs a square block, got {}x{}",
                    conf.n_pred, conf.n_gt
                )));
            }
            let weights: Vec<Vec<f64>> = (0..conf.n_pred)
                .map(|p| (0..conf.n_gt).map(|g| conf.get(p, g) as f64).collect())
                .collect();
            hungarian_max(&weights)?
        }
        MappingMode::ManyToOne => (0..conf.n_pred)
            .map(|p| {
                let mut best = 0;
                for g in 1..conf.n_gt {
                    if conf.get(p, g) > conf.get(p, best) {
                        best = g;
                    }
                }
                best
            })
            .collect(),
    };
    Ok(ClusterMapping { mode, targets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub base_miou: f64,
    pub novel_miou: f64,
    pub all_miou: f64,
    pub mapping: ClusterMapping,
    pub n_pixels: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "base_miou,novel_miou,all_miou,mapping_mode,pixels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.base_miou, self.novel_miou, self.all_miou, self.mapping.mode, self.n_pixels
        )
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "base_miou = {}", self.base_miou);
        let _ = writeln!(out, "novel_miou = {}", self.novel_miou);
        let _ = writeln!(out, "all_miou = {}", self.all_miou);
        let _ = writeln!(out, "mapping_mode = {}", self.mapping.mode);
        let targets: Vec<String> = self.mapping.targets.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "mapping = {}", targets.join(" "));
        let _ = writeln!(out, "pixels = {}", self.n_pixels);
        out
    }
}

/// Scores argmax predictions against a labeled split.
///
/// Novel output channels are resolved to ground-truth novel classes with
/// [`match_clusters`] on the split itself before mIoU is computed. Base
/// mIoU covers background and base classes.
pub fn evaluate<S: Scalar>(
    model: &LinearSegmenter<S>,
    val: &Dataset<S>,
    mode: MappingMode,
) -> Result<EvalReport> {
    let preds = val
        .items()
        .iter()
        .map(|it| forward(model, &it.features).map(|p| p.argmax_map()))
        .collect::<Result<Vec<_>>>()?;
    let gts = val
        .items()
        .iter()
        .map(|it| {
            it.labels
                .as_ref()
                .ok_or_else(|| Error::InvalidValue(format!("val image `{}` is unlabeled", it.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(model.class_space(), model.outputs(), &preds, &gts, mode)
}

/// [`evaluate`] over precomputed argmax maps with `outputs` channels.
pub fn evaluate_predictions(
    cs: ClassSpace,
    outputs: usize,
    preds: &[LabelMap],
    gts: &[&LabelMap],
    mode: MappingMode,
) -> Result<EvalReport> {
    let n_base = cs.n_base();
    let mut raw = ConfusionMatrix::zeros(outputs, cs.n_total());
    for (p, g) in preds.iter().zip(gts) {
        raw.accumulate(p, g)?;
    }
    let head = outputs.saturating_sub(n_base);
    let mapping = if head == 0 {
        ClusterMapping {
            mode,
            targets: Vec::new(),
        }
    } else {
        match_clusters(&raw.block(n_base..outputs, n_base..cs.n_total()), mode)?
    };
    let remap = |p: ClassId| -> ClassId {
        let p = p as usize;
        if p < n_base || p == IGNORE_ID as usize {
            p as ClassId
        } else {
            (n_base + mapping.targets[p - n_base]) as ClassId
        }
    };
    let mut conf = ConfusionMatrix::zeros(cs.n_total(), cs.n_total());
    for (p, g) in preds.iter().zip(gts) {
        conf.accumulate(&p.map(remap), g)?;
    }
    // novel classes never predicted or present score as absent, which
    // `miou` rejects when nothing is left; treat that as 0 for novel
    let novel_miou = miou(&conf, cs.novel_classes()).unwrap_or(0.0);
    Ok(EvalReport {
        base_miou: miou(&conf, 0..n_base).unwrap_or(0.0),
        novel_miou,
        all_miou: miou(&conf, 0..cs.n_total()).unwrap_or(0.0),
        mapping,
        n_pixels: conf.total(),
    })
}
