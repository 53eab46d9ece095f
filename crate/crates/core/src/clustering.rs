//! Image-level novel class discovery by k-means over pooled features.

use std::fmt::Write as _;

use rand::Rng;

use crate::data::{BinaryMask, ClassId, ClassSpace, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::MappingMode;
use crate::scalar::Scalar;
use crate::seed;

/// Smallest salient novel region that still yields a usable mean feature.
pub const MIN_NOVEL_PIXELS: usize = 16;

pub const MAX_ITER: usize = 300;

/// Mean feature vector over the pixels where `mask` is set.
pub fn masked_mean_feature<S: Scalar>(
    x: &FeatureMap<S>,
    mask: &BinaryMask,
    min_pixels: usize,
) -> Result<Vec<S>> {
    if !mask.same_extent(x.height(), x.width()) {
        return Err(Error::Shape("mask and feature map extents differ".into()));
    }
    let n = mask.count();
    if n == 0 || n < min_pixels {
        return Err(Error::Empty(format!(
            "mask has {n} pixels, need at least {}",
            min_pixels.max(1)
        )));
    }
    let mut sum = vec![0.0f64; x.dim()];
    for (pixel, &on) in x.pixels().zip(mask.values()) {
        if on {
            for (s, v) in sum.iter_mut().zip(pixel) {
                *s += v.widen();
            }
        }
    }
    Ok(sum.into_iter().map(|s| S::cast(s / n as f64)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel<S> {
    pub k: usize,
    pub centroids: Vec<Vec<S>>,
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances at termination.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl<S: Scalar> ClusterModel<S> {
    /// Euclidean distance from `point` to its assigned centroid.
    pub fn distance_to_centroid(&self, index: usize, point: &[S]) -> f64 {
        sq_dist(point, &self.centroids[self.assignments[index]]).sqrt()
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum()
}

fn nearest<S: Scalar>(point: &[S], centroids: &[Vec<S>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
fn seed_plus_plus<S: Scalar, R: Rng>(points: &[Vec<S>], k: usize, rng: &mut R) -> Vec<Vec<S>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final sum
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every point coincides with a center; take the first unused one
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

/// k-means with k-means++ seeding and Lloyd iterations.
///
/// Stops at an assignment fixed point or after [`MAX_ITER`] iterations.
/// A cluster left empty takes over the point farthest from its own
/// centroid. Deterministic for a given `seed`.
pub fn kmeans<S: Scalar>(points: &[Vec<S>], k: usize, seed: u64) -> Result<ClusterModel<S>> {
    if k == 0 {
        return Err(Error::InvalidValue("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidValue(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have differing dimensions".into()));
    }
    let mut rng = seed::rng(seed, &[0x6b_6d]);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v.widen();
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| S::cast(s / counts[j] as f64)).collect();
            }
        }
        repair_empty(points, &mut centroids, &mut assignments, &mut counts);
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev + 1e-9 * prev.abs().max(1.0),
                "inertia rose from {prev} to {inertia}"
            );
        }
        history.push(inertia);

        // assignment step
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments || iterations >= MAX_ITER {
            break;
        }
        assignments = next;
    }

    Ok(ClusterModel {
        k,
        inertia: *history.last().unwrap(),
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    })
}

/// Moves each empty cluster onto the point farthest from its centroid.
fn repair_empty<S: Scalar>(
    points: &[Vec<S>],
    centroids: &mut [Vec<S>],
    assignments: &mut [usize],
    counts: &mut [usize],
) {
    for j in 0..centroids.len() {
        if counts[j] > 0 {
            continue;
        }
        let far = points
            .iter()
            .enumerate()
            .filter(|&(i, _)| counts[assignments[i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            centroids[j] = points[i].clone();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClusterMode {
    /// One cluster per novel class.
    Exact,
    /// `novel_head_size` provisional clusters, resolved at evaluation.
    Over,
}

impl ClusterMode {
    /// Cluster count for `n_novel` classes with the given over-clustering factor.
    pub fn cluster_count(self, n_novel: usize, over_factor: usize) -> usize {
        match self {
            ClusterMode::Exact => n_novel,
            ClusterMode::Over => n_novel * over_factor,
        }
    }

    /// Cluster-to-class mapping used when evaluating this mode.
    pub fn mapping(self) -> MappingMode {
        match self {
            ClusterMode::Exact => MappingMode::OneToOne,
            ClusterMode::Over => MappingMode::ManyToOne,
        }
    }
}

/// Class id for each cluster index: cluster `j` becomes `n_base + j`.
pub fn assign_cluster_classes<S: Scalar>(
    model: &ClusterModel<S>,
    cs: &ClassSpace,
    mode: ClusterMode,
) -> Result<Vec<ClassId>> {
    let expected = match mode {
        ClusterMode::Exact => cs.n_novel(),
        ClusterMode::Over => cs.novel_head_size(),
    };
    if model.k != expected || model.k != cs.novel_head_size() {
        return Err(Error::InvalidValue(format!(
            "{mode:?} clustering needs k = {expected} matching the novel head ({}), got {}",
            cs.novel_head_size(),
            model.k
        )));
    }
    Ok((0..model.k).map(|j| (cs.n_base() + j) as ClassId).collect())
}

/// Text table: image id, cluster index, class id, distance to centroid.
pub fn cluster_report<S: Scalar>(
    ids: &[String],
    points: &[Vec<S>],
    model: &ClusterModel<S>,
    classes: &[ClassId],
) -> String {
    let mut out = String::from("image_id\tcluster\tclass\tdistance\n");
    for (i, id) in ids.iter().enumerate() {
        let j = model.assignments[i];
        let _ = writeln!(
            out,
            "{id}\t{j}\t{}\t{:.6}",
            classes[j],
            model.distance_to_centroid(i, &points[i])
        );
    }
    out
}
