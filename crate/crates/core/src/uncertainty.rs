//! Prediction entropy and the entropy-ranked clean/unclean split.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{FeatureMap, NovelMask, ProbMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segmenter::{forward, LinearSegmenter};

/// Per-pixel entropy normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} entropy values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("entropy {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }
}

/// `-(1 / ln C) * sum_c p_c ln p_c` per pixel, with `0 ln 0 = 0` and
/// `C` the channel count of `prob`.
pub fn entropy_map<S: Scalar>(prob: &ProbMap<S>) -> Result<EntropyMap> {
    let c = prob.channels();
    if c < 2 {
        return Err(Error::InvalidValue(format!(
            "entropy needs at least 2 classes, got {c}"
        )));
    }
    let norm = (c as f64).ln();
    let values = prob
        .pixels()
        .map(|row| {
            let h: f64 = row
                .iter()
                .map(|p| p.widen())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            (h / norm).clamp(0.0, 1.0)
        })
        .collect();
    Ok(EntropyMap {
        height: prob.height(),
        width: prob.width(),
        values,
    })
}

/// Mean entropy over the pixels of `mask`.
pub fn foreground_entropy(e: &EntropyMap, mask: &NovelMask) -> Result<f64> {
    if !mask.same_extent(e.height, e.width) {
        return Err(Error::Shape("entropy map and mask differ in extent".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (&v, &m) in e.values.iter().zip(mask.values()) {
        if m {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("foreground entropy of an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Foreground entropy of each `(id, features, mask)` under `model`.
pub fn score_images<'a, S: Scalar + 'a>(
    model: &LinearSegmenter<S>,
    images: impl IntoIterator<Item = (&'a str, &'a FeatureMap<S>, &'a NovelMask)>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (id, x, mask) in images {
        let e = entropy_map(&forward(model, x)?)?;
        out.insert(id.to_string(), foreground_entropy(&e, mask)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitState {
    pub clean: Vec<String>,
    pub unclean: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub lambda: f64,
    pub reassigned: bool,
    /// Ids whose clustering labels may no longer be used.
    pub discarded: BTreeSet<String>,
}

impl SplitState {
    pub fn len(&self) -> usize {
        self.clean.len() + self.unclean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_clean(&self, id: &str) -> bool {
        self.clean.iter().any(|c| c == id)
    }

    /// Text table: id, score, split, moved-by-reassignment flag.
    pub fn report(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:<8} {}\n", "image_id", "score", "split", "reassigned");
        let rows = self
            .clean
            .iter()
            .map(|id| (id, "clean"))
            .chain(self.unclean.iter().map(|id| (id, "unclean")));
        for (id, split) in rows {
            let score = self.scores.get(id).copied().unwrap_or(f64::INFINITY);
            let moved = self.reassigned && self.discarded.contains(id) && score.is_finite();
            let _ = writeln!(out, "{id:<16} {score:>10.6} {split:<8} {}", if moved { "yes" } else { "no" });
        }
        out
    }
}

fn sorted_ids(scores: &BTreeMap<String, f64>, ids: impl Iterator<Item = String>) -> Vec<String> {
    let mut ids: Vec<String> = ids.collect();
    ids.sort_by(|a, b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.cmp(b))
    });
    ids
}

fn check_scores(scores: &BTreeMap<String, f64>) -> Result<()> {
    if let Some((id, s)) = scores.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::InvalidValue(format!("score of `{id}` is NaN: {s}")));
    }
    Ok(())
}

/// Lowest-score `floor(lambda N)` ids (at least one) become clean; ties
/// broken by id.
pub fn rank_split(scores: &BTreeMap<String, f64>, lambda: f64) -> Result<SplitState> {
    rank_split_with_skipped(scores, &[], lambda)
}

/// [`rank_split`] with extra ids appended to unclean at score `+inf`.
pub fn rank_split_with_skipped(
    scores: &BTreeMap<String, f64>,
    skipped: &[String],
    lambda: f64,
) -> Result<SplitState> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config("eums.lambda", "must lie in (0, 1]"));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no scored images to split".into()));
    }
    check_scores(scores)?;
    if let Some(id) = skipped.iter().find(|id| scores.contains_key(*id)) {
        return Err(Error::InvalidValue(format!("`{id}` is both scored and skipped")));
    }
    let order = sorted_ids(scores, scores.keys().cloned());
    let n_clean = ((lambda * order.len() as f64).floor() as usize).clamp(1, order.len());
    let mut all_scores = scores.clone();
    let mut unclean = order[n_clean..].to_vec();
    let mut skipped_sorted = skipped.to_vec();
    skipped_sorted.sort();
    skipped_sorted.dedup();
    for id in &skipped_sorted {
        all_scores.insert(id.clone(), f64::INFINITY);
        unclean.push(id.clone());
    }
    Ok(SplitState {
        clean: order[..n_clean].to_vec(),
        unclean,
        scores: all_scores,
        lambda,
        reassigned: false,
        discarded: skipped_sorted.into_iter().collect(),
    })
}

/// Re-ranks the clean split by `fresh` scores and keeps the lower half
/// (at least one); the rest move to unclean and lose their clustering labels.
pub fn dynamic_reassign(state: &SplitState, fresh: &BTreeMap<String, f64>) -> Result<SplitState> {
    if state.reassigned {
        return Err(Error::State("split was already reassigned".into()));
    }
    if let Some(id) = state.clean.iter().find(|id| !fresh.contains_key(*id)) {
        return Err(Error::InvalidValue(format!("no fresh score for clean image `{id}`")));
    }
    check_scores(fresh)?;
    let order = sorted_ids(fresh, state.clean.iter().cloned());
    let keep = (order.len() / 2).max(1).min(order.len());
    let mut next = state.clone();
    for id in &order {
        next.scores.insert(id.clone(), fresh[id]);
    }
    next.clean = order[..keep].to_vec();
    for id in &order[keep..] {
        next.unclean.push(id.clone());
        next.discarded.insert(id.clone());
    }
    next.reassigned = true;
    Ok(next)
}
