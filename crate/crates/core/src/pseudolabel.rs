//! Clustering pseudo-labels for unlabeled novel images.
//!
//! Confident base predictions are kept, salient pixels that are not
//! confidently base become the novel region, and each image's novel
//! region receives the class of the cluster its mean feature falls in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::clustering::{
    assign_cluster_classes, cluster_report, kmeans, masked_mean_feature, ClusterMode, ClusterModel,
    MIN_NOVEL_PIXELS,
};
use crate::data::format::{read_dataset, write_dataset};
use crate::data::{
    argmax, BinaryMask, ClassId, ClassSpace, Dataset, Item, LabelMap, NovelMask, ProbMap,
    SaliencyMask, SplitTag, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segmenter::{forward, LinearSegmenter};

/// Argmax class where the top probability exceeds `tau`, background elsewhere.
pub fn confident_base_labels<S: Scalar>(prob: &ProbMap<S>, tau: f64) -> LabelMap {
    let values = prob
        .pixels()
        .map(|row| {
            let (c, p) = argmax(row);
            if p.widen() > tau {
                c
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelMap::new(prob.height(), prob.width(), values).expect("extent taken from prob map")
}

/// Saliency restricted to pixels without a confident base label.
pub fn novel_salient_mask(saliency: &SaliencyMask, base_labels: &LabelMap) -> Result<NovelMask> {
    if !base_labels.same_extent(saliency.height(), saliency.width()) {
        return Err(Error::Shape("saliency and base labels differ in extent".into()));
    }
    let values = saliency
        .values()
        .iter()
        .zip(base_labels.values())
        .map(|(&s, &b)| s && b == BACKGROUND)
        .collect();
    BinaryMask::new(saliency.height(), saliency.width(), values)
}

/// Base labels where nonzero, `cluster_class` on the novel mask, background elsewhere.
pub fn fuse_labels(base_labels: &LabelMap, mask: &NovelMask, cluster_class: ClassId) -> Result<LabelMap> {
    if !base_labels.same_extent(mask.height(), mask.width()) {
        return Err(Error::Shape("base labels and novel mask differ in extent".into()));
    }
    let mut values = Vec::with_capacity(base_labels.n_pixels());
    for (&b, &m) in base_labels.values().iter().zip(mask.values()) {
        if m && b != BACKGROUND {
            return Err(Error::InvalidValue(format!(
                "novel mask overlaps confident base label {b}"
            )));
        }
        values.push(if m { cluster_class } else { b });
    }
    LabelMap::new(base_labels.height(), base_labels.width(), values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub base_labels: LabelMap,
    pub novel_mask: NovelMask,
    pub fused: LabelMap,
    /// Cluster index, `None` when the novel mask was too small to cluster.
    pub cluster: Option<usize>,
}

impl PseudoLabelRecord {
    pub fn novel_pixels(&self) -> usize {
        self.novel_mask.count()
    }
}

/// Stage-2 output: one record per novel image, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    /// Class space whose novel head matches the cluster count.
    pub class_space: ClassSpace,
    pub mode: ClusterMode,
    pub records: Vec<PseudoLabelRecord>,
    /// Class id of every cluster index.
    pub cluster_classes: Vec<ClassId>,
}

impl PseudoLabels {
    pub fn clustered(&self) -> impl Iterator<Item = &PseudoLabelRecord> {
        self.records.iter().filter(|r| r.cluster.is_some())
    }

    /// Text sidecar: image id, cluster index (`-` if skipped), novel pixel count.
    pub fn sidecar(&self) -> String {
        let mut out = String::from("image_id\tcluster\tnovel_pixels\n");
        for r in &self.records {
            let cluster = r.cluster.map_or("-".to_string(), |c| c.to_string());
            let _ = writeln!(out, "{}\t{}\t{}", r.image_id, cluster, r.novel_pixels());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabelConfig {
    pub tau: f64,
    pub mode: ClusterMode,
    pub over_factor: usize,
    pub min_novel_pixels: usize,
    pub seed: u64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            mode: ClusterMode::Exact,
            over_factor: 2,
            min_novel_pixels: MIN_NOVEL_PIXELS,
            seed: 0,
        }
    }
}

/// Builds clustering pseudo-labels for every image of the novel split.
///
/// Returns the labels together with the fitted cluster model and a
/// cluster report table.
pub fn build_pseudo_labels<S: Scalar>(
    base_model: &LinearSegmenter<S>,
    novel: &Dataset<S>,
    cfg: &PseudoLabelConfig,
) -> Result<(PseudoLabels, ClusterModel<S>, String)> {
    if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
        return Err(Error::config("eums.tau", "must lie in (0, 1)"));
    }
    let cs0 = novel.class_space();
    let k = cfg.mode.cluster_count(cs0.n_novel(), cfg.over_factor);
    let cs = cs0.with_head_size(k)?;

    let mut partial = Vec::with_capacity(novel.len());
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for item in novel.items() {
        let saliency = item
            .saliency
            .as_ref()
            .ok_or_else(|| Error::InvalidValue(format!("novel image `{}` has no saliency", item.id)))?;
        let prob = forward(base_model, &item.features)?;
        let base_labels = confident_base_labels(&prob, cfg.tau);
        let mask = novel_salient_mask(saliency, &base_labels)?;
        let usable = mask.count() >= cfg.min_novel_pixels.max(1);
        if usable {
            ids.push(item.id.clone());
            points.push(masked_mean_feature(&item.features, &mask, cfg.min_novel_pixels)?);
        }
        partial.push((item.id.clone(), base_labels, mask, usable));
    }
    if points.len() < k {
        return Err(Error::Empty(format!(
            "{} images have a usable novel region, {k} clusters requested",
            points.len()
        )));
    }
    let model = kmeans(&points, k, cfg.seed)?;
    let classes = assign_cluster_classes(&model, &cs, cfg.mode)?;
    let report = cluster_report(&ids, &points, &model, &classes);

    let mut next = 0;
    let records = partial
        .into_iter()
        .map(|(image_id, base_labels, novel_mask, usable)| {
            let (fused, cluster) = if usable {
                let j = model.assignments[next];
                next += 1;
                (fuse_labels(&base_labels, &novel_mask, classes[j])?, Some(j))
            } else {
                (base_labels.clone(), None)
            };
            Ok(PseudoLabelRecord {
                image_id,
                base_labels,
                novel_mask,
                fused,
                cluster,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        PseudoLabels {
            class_space: cs,
            mode: cfg.mode,
            records,
            cluster_classes: classes,
        },
        model,
        report,
    ))
}

pub const SIDECAR_FILE: &str = "clusters.tsv";

/// Persists pseudo-labels as a dataset directory (fused labels in the
/// label slot, novel mask in the saliency slot) plus the sidecar table.
pub fn write_pseudo_labels<S: Scalar>(
    labels: &PseudoLabels,
    novel: &Dataset<S>,
    dir: &Path,
) -> Result<()> {
    let items = labels
        .records
        .iter()
        .map(|r| {
            let src = novel
                .get(&r.image_id)
                .ok_or_else(|| Error::InvalidValue(format!("unknown image `{}`", r.image_id)))?;
            Ok(Item::new(r.image_id.clone(), src.features.clone())
                .with_labels(r.fused.clone())
                .with_saliency(r.novel_mask.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&Dataset::new(SplitTag::Novel, labels.class_space, items)?, dir)?;
    let mut sidecar = labels.sidecar();
    let _ = writeln!(sidecar, "# mode\t{}", match labels.mode {
        ClusterMode::Exact => "exact",
        ClusterMode::Over => "over",
    });
    let path = dir.join(SIDECAR_FILE);
    fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))
}

/// Inverse of [`write_pseudo_labels`].
pub fn read_pseudo_labels(dir: &Path) -> Result<PseudoLabels> {
    let ds: Dataset<f32> = read_dataset(dir)?;
    let cs = ds.class_space();
    let path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut clusters = BTreeMap::new();
    let mut mode = None;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.first() == Some(&"# mode") {
            mode = match fields.get(1) {
                Some(&"exact") => Some(ClusterMode::Exact),
                Some(&"over") => Some(ClusterMode::Over),
                _ => None,
            };
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Manifest(format!("bad sidecar line `{line}`")));
        }
        let cluster = match fields[1] {
            "-" => None,
            c => Some(c.parse::<usize>().map_err(|e| Error::Manifest(e.to_string()))?),
        };
        clusters.insert(fields[0].to_string(), cluster);
    }
    let mode = mode.ok_or_else(|| Error::Manifest("sidecar lacks a mode line".into()))?;
    let records = ds
        .items()
        .iter()
        .map(|item| {
            let fused = item.labels.clone().expect("written with labels");
            let novel_mask = item.saliency.clone().expect("written with masks");
            let base_labels = fused.map(|c| if cs.is_base(c) { c } else { BACKGROUND });
            let cluster = *clusters
                .get(&item.id)
                .ok_or_else(|| Error::Manifest(format!("sidecar lacks `{}`", item.id)))?;
            Ok(PseudoLabelRecord {
                image_id: item.id.clone(),
                base_labels,
                novel_mask,
                fused,
                cluster,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabels {
        class_space: cs,
        mode,
        records,
        cluster_classes: (0..cs.novel_head_size()).map(|j| (cs.n_base() + j) as ClassId).collect(),
    })
}
