//! Novel fine-tuning: the basic loop on clustering pseudo-labels, then
//! entropy-ranked clean/unclean training with mean-teacher self-training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{argmax, Dataset, FeatureMap, LabelMap, NovelMask, ProbMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MappingMode};
use crate::pseudolabel::PseudoLabels;
use crate::scalar::Scalar;
use crate::seed;
use crate::segmenter::{
    forward, sgd_step, CeAccumulator, LinearSegmenter, Params, SgdParams, TeacherState, TrainConfig,
};
use crate::uncertainty::{dynamic_reassign, rank_split_with_skipped, score_images, SplitState};

/// `exp(-5 (1 - min(t, T) / T)^2)`.
pub fn ramp_weight(t: f64, length: f64) -> f64 {
    if length <= 0.0 {
        return 1.0;
    }
    let r = 1.0 - t.clamp(0.0, length) / length;
    (-5.0 * r * r).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampUp {
    pub length: usize,
    pub epoch: usize,
}

impl RampUp {
    pub fn weight(&self) -> f64 {
        ramp_weight(self.epoch as f64, self.length as f64)
    }
}

/// Argmax class where the top probability exceeds `eta`, ignore elsewhere.
pub fn online_pseudo_label<S: Scalar>(teacher_prob: &ProbMap<S>, eta: f64) -> LabelMap {
    let values = teacher_prob
        .pixels()
        .map(|row| {
            let (c, p) = argmax(row);
            if p.widen() > eta {
                c
            } else {
                IGNORE_ID
            }
        })
        .collect();
    LabelMap::new(teacher_prob.height(), teacher_prob.width(), values)
        .expect("extent taken from prob map")
}

/// Weak view: random horizontal flip. Strong view: the same flip, then
/// per-channel scale jitter and additive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub flip_prob: f64,
    pub strong_noise: f64,
    /// Channel scales are drawn from `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            strong_noise: 0.1,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            strong_noise: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if !(self.strong_noise >= 0.0) || !self.strong_noise.is_finite() {
            return Err(Error::config("augment.strong_noise", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::config("augment.scale_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<S> {
    pub weak: FeatureMap<S>,
    pub strong: FeatureMap<S>,
    pub flipped: bool,
}

impl<S: Scalar> ViewPair<S> {
    /// Brings a map from view geometry back to the original image.
    pub fn unflip_labels(&self, y: &LabelMap) -> LabelMap {
        if self.flipped {
            y.flip_horizontal()
        } else {
            y.clone()
        }
    }
}

pub fn augment_pair<S: Scalar>(
    x: &FeatureMap<S>,
    spec: &AugmentationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ViewPair<S>> {
    let flipped = spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob);
    let weak = if flipped { x.flip_horizontal() } else { x.clone() };
    let scales: Vec<f64> = (0..x.dim())
        .map(|_| {
            if spec.scale_jitter > 0.0 {
                rng.random_range(1.0 - spec.scale_jitter..=1.0 + spec.scale_jitter)
            } else {
                1.0
            }
        })
        .collect();
    let strong = if spec.strong_noise > 0.0 {
        let noise = Normal::new(0.0, spec.strong_noise)
            .map_err(|e| Error::config("augment.strong_noise", e.to_string()))?;
        weak.map_channels(|c, v| S::cast(v.widen() * scales[c] + noise.sample(rng)))?
    } else {
        weak.map_channels(|c, v| S::cast(v.widen() * scales[c]))?
    };
    Ok(ViewPair {
        weak,
        strong,
        flipped,
    })
}

/// Student cross-entropy on the strong view against online labels.
///
/// An all-ignored label map gives zero loss and a zero gradient.
pub fn self_training_loss<S: Scalar>(
    model: &LinearSegmenter<S>,
    x_strong: &FeatureMap<S>,
    y_online: &LabelMap,
) -> Result<(f64, Params<S>)> {
    let mut acc = CeAccumulator::for_model(model);
    acc.add(model, x_strong, y_online)?;
    Ok(acc
        .mean()
        .unwrap_or_else(|| (0.0, Params::zeros(model.outputs(), model.dim()))))
}

/// Which parts of the fine-tuning method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub over_clustering: bool,
    pub entropy_ranking: bool,
    pub dynamic_reassignment: bool,
    pub self_training: bool,
}

impl Ablation {
    pub fn basic() -> Self {
        Self {
            over_clustering: false,
            entropy_ranking: false,
            dynamic_reassignment: false,
            self_training: false,
        }
    }

    pub fn full() -> Self {
        Self {
            over_clustering: true,
            entropy_ranking: true,
            dynamic_reassignment: true,
            self_training: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_reassignment && !self.entropy_ranking {
            return Err(Error::config(
                "ablation.dynamic_reassignment",
                "requires ablation.entropy_ranking",
            ));
        }
        if self.self_training && !self.entropy_ranking {
            return Err(Error::config("ablation.self_training", "requires ablation.entropy_ranking"));
        }
        Ok(())
    }

    /// Short tag such as `OC+ER+DR+ST`, or `basic` with nothing enabled.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.over_clustering, "OC"),
            (self.entropy_ranking, "ER"),
            (self.dynamic_reassignment, "DR"),
            (self.self_training, "ST"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        if parts.is_empty() {
            "basic".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EumsConfig {
    pub tau: f64,
    pub lambda: f64,
    pub eta: f64,
    pub ramp_length: usize,
    pub reassign_epoch: usize,
    pub ema_momentum: f64,
    /// Epochs of each fine-tuning loop (basic and EUMS).
    pub epochs: usize,
    pub over_factor: usize,
    pub augment: AugmentationSpec,
}

impl Default for EumsConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            lambda: 0.67,
            eta: 0.0,
            ramp_length: 5,
            reassign_epoch: 5,
            ema_momentum: 0.99,
            epochs: 30,
            over_factor: 2,
            augment: AugmentationSpec::default(),
        }
    }
}

impl EumsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("eums.tau", "must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config("eums.lambda", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("eums.eta", "must lie in [0, 1]"));
        }
        if self.ramp_length == 0 {
            return Err(Error::config("eums.ramp_length", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("eums.ema_momentum", "must lie in [0, 1)"));
        }
        if self.epochs < self.reassign_epoch {
            return Err(Error::config("eums.epochs", "must be at least eums.reassign_epoch"));
        }
        if self.over_factor < 2 {
            return Err(Error::config("eums.over_factor", "must be at least 2"));
        }
        self.augment.validate()
    }

    /// Optimizer schedule of one fine-tuning loop: the stage-1 settings
    /// with the learning rate decayed at half of `epochs`.
    pub fn loop_schedule(&self, optim: &TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_decay_epoch: Some(self.epochs / 2),
            ..*optim
        }
    }
}

/// Novel images with their stage-2 labels, aligned with the novel dataset.
#[derive(Clone, Debug)]
pub struct NovelPool<'a, S> {
    pub ids: Vec<&'a str>,
    pub features: Vec<&'a FeatureMap<S>>,
    pub labels: Vec<&'a LabelMap>,
    pub masks: Vec<&'a NovelMask>,
    pub clustered: Vec<bool>,
}

impl<'a, S: Scalar> NovelPool<'a, S> {
    pub fn new(novel: &'a Dataset<S>, pseudo: &'a PseudoLabels) -> Result<Self> {
        if novel.len() != pseudo.records.len() {
            return Err(Error::Shape(format!(
                "{} novel images but {} pseudo-label records",
                novel.len(),
                pseudo.records.len()
            )));
        }
        let mut pool = Self {
            ids: Vec::new(),
            features: Vec::new(),
            labels: Vec::new(),
            masks: Vec::new(),
            clustered: Vec::new(),
        };
        for (item, rec) in novel.items().iter().zip(&pseudo.records) {
            if item.id != rec.image_id {
                return Err(Error::InvalidValue(format!(
                    "pseudo-label `{}` does not match novel image `{}`",
                    rec.image_id, item.id
                )));
            }
            pool.ids.push(&item.id);
            pool.features.push(&item.features);
            pool.labels.push(&rec.fused);
            pool.masks.push(&rec.novel_mask);
            pool.clustered.push(rec.cluster.is_some());
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn clustered_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.clustered[i]).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| *x == id)
    }

    fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::InvalidValue(format!("unknown novel image `{id}`")))
            })
            .collect()
    }
}

/// Endless reshuffled mini-batches over a member set.
///
/// Members are kept sorted so only membership, never ranking order,
/// affects the batches drawn.
#[derive(Clone, Debug)]
struct Sampler {
    members: Vec<usize>,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(rng: ChaCha8Rng) -> Self {
        Self {
            members: Vec::new(),
            queue: Vec::new(),
            rng,
        }
    }

    fn set_members(&mut self, mut members: Vec<usize>) {
        members.sort_unstable();
        members.dedup();
        if members != self.members {
            self.members = members;
            self.queue.clear();
        }
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = size.min(self.members.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.queue.is_empty() {
                self.queue = self.members.clone();
                self.queue.shuffle(&mut self.rng);
            }
            out.push(self.queue.pop().expect("refilled above"));
        }
        out
    }
}

const STREAM_BASE: u64 = 1;
const STREAM_LABELED_NOVEL: u64 = 2;
const STREAM_UNCLEAN: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const LOOP_BASIC: u64 = 0x0062_6173_6963;
const LOOP_EUMS: u64 = 0x6575_6d73;

/// Loop seeds derived from one run seed.
pub fn loop_seeds(seed: u64) -> (u64, u64) {
    (seed::derive(seed, &[LOOP_BASIC]), seed::derive(seed, &[LOOP_EUMS]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub base: f64,
    pub clean: f64,
    pub unclean: f64,
    /// Pixels that received an online label.
    pub unclean_pixels: usize,
}

type Batch<'b, S> = [(&'b FeatureMap<S>, &'b LabelMap)];

fn supervised<S: Scalar>(
    model: &LinearSegmenter<S>,
    batch: &Batch<'_, S>,
    what: &str,
) -> Result<(f64, Params<S>)> {
    if batch.is_empty() {
        return Err(Error::Empty(format!("{what} batch is empty")));
    }
    let mut acc = CeAccumulator::for_model(model);
    for (x, y) in batch {
        acc.add(model, x, y)?;
    }
    acc.mean()
        .ok_or_else(|| Error::Empty(format!("{what} batch has no labeled pixels")))
}

/// One step of the basic loop: SGD on base loss plus pseudo-label loss.
pub fn basic_step<S: Scalar>(
    model: &mut LinearSegmenter<S>,
    velocity: &mut Params<S>,
    base: &Batch<'_, S>,
    novel: &Batch<'_, S>,
    sgd: &SgdParams,
) -> Result<StepLosses> {
    let (l_base, mut grad) = supervised(model, base, "base")?;
    let (l_novel, g_novel) = supervised(model, novel, "novel")?;
    grad.add_scaled(&g_novel, S::one());
    sgd_step(model, &grad, velocity, sgd)?;
    Ok(StepLosses {
        base: l_base,
        clean: l_novel,
        ..StepLosses::default()
    })
}

/// One step of the full objective: base + clean + `omega` x self-training,
/// then an EMA teacher update. Unclean images are `(weak, strong)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn overall_step<S: Scalar>(
    model: &mut LinearSegmenter<S>,
    teacher: &mut TeacherState<S>,
    velocity: &mut Params<S>,
    base: &Batch<'_, S>,
    clean: &Batch<'_, S>,
    unclean: &[(&FeatureMap<S>, &FeatureMap<S>)],
    omega: f64,
    eta: f64,
    sgd: &SgdParams,
) -> Result<StepLosses> {
    let (l_base, mut grad) = supervised(model, base, "base")?;
    let (l_clean, g_clean) = supervised(model, clean, "clean")?;
    grad.add_scaled(&g_clean, S::one());
    let mut acc = CeAccumulator::for_model(model);
    for (weak, strong) in unclean {
        let y = online_pseudo_label(&forward(&teacher.model, weak)?, eta);
        acc.add(model, strong, &y)?;
    }
    let mut l_d = 0.0;
    if let Some((loss, g_d)) = acc.mean::<S>() {
        l_d = loss;
        grad.add_scaled(&g_d, S::cast(omega));
    }
    sgd_step(model, &grad, velocity, sgd)?;
    teacher.update(model)?;
    Ok(StepLosses {
        base: l_base,
        clean: l_clean,
        unclean: l_d,
        unclean_pixels: acc.count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Basic,
    Eums,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Basic => "basic",
            Phase::Eums => "eums",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_base: f64,
    pub loss_clean: f64,
    pub loss_unclean: f64,
    pub omega: f64,
    pub clean_size: usize,
    pub unclean_size: usize,
    pub val_miou: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,phase,l_base,l_clean,l_d,omega,clean_size,unclean_size,val_novel_miou";

    pub fn csv_row(&self) -> String {
        let miou = self.val_miou.map_or(String::new(), |m| format!("{m:.6}"));
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.epoch,
            self.phase,
            self.loss_base,
            self.loss_clean,
            self.loss_unclean,
            self.omega,
            self.clean_size,
            self.unclean_size,
            miou
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Validation set and mapping for per-epoch novel mIoU.
#[derive(Clone, Copy, Debug)]
pub struct Monitor<'a, S> {
    pub val: &'a Dataset<S>,
    pub mode: MappingMode,
}

impl<S: Scalar> Monitor<'_, S> {
    fn novel_miou(&self, model: &LinearSegmenter<S>) -> Result<f64> {
        Ok(evaluate(model, self.val, self.mode)?.novel_miou)
    }
}

fn epoch_steps(sizes: &[usize], batch: usize) -> usize {
    sizes.iter().copied().max().unwrap_or(0).div_ceil(batch)
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn base_pairs<S: Scalar>(base: &Dataset<S>) -> Result<Vec<(&FeatureMap<S>, &LabelMap)>> {
    base.items()
        .iter()
        .map(|it| {
            it.labels
                .as_ref()
                .map(|y| (&it.features, y))
                .ok_or_else(|| Error::InvalidValue(format!("base image `{}` is unlabeled", it.id)))
        })
        .collect()
}

/// Fine-tunes on base ground truth plus clustering labels of every
/// clustered novel image.
pub fn basic_loop<S: Scalar>(
    model: &mut LinearSegmenter<S>,
    base: &Dataset<S>,
    pool: &NovelPool<'_, S>,
    schedule: &TrainConfig,
    loop_seed: u64,
    monitor: Option<&Monitor<'_, S>>,
) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    let base_pairs = base_pairs(base)?;
    let mut base_s = Sampler::new(seed::rng(loop_seed, &[STREAM_BASE]));
    base_s.set_members((0..base_pairs.len()).collect());
    let mut novel_s = Sampler::new(seed::rng(loop_seed, &[STREAM_LABELED_NOVEL]));
    novel_s.set_members(pool.clustered_indices());
    if novel_s.len() == 0 {
        return Err(Error::Empty("no clustered novel images".into()));
    }
    let mut velocity = Params::zeros(model.outputs(), model.dim());
    let steps = epoch_steps(&[base_s.len(), novel_s.len()], schedule.batch_size);
    let mut rows = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let sgd = schedule.sgd_at(epoch);
        let (mut sb, mut sn) = (0.0, 0.0);
        for _ in 0..steps {
            let b: Vec<_> = base_s.next_batch(schedule.batch_size).into_iter().map(|i| base_pairs[i]).collect();
            let n: Vec<_> = novel_s
                .next_batch(schedule.batch_size)
                .into_iter()
                .map(|i| (pool.features[i], pool.labels[i]))
                .collect();
            let l = basic_step(model, &mut velocity, &b, &n, &sgd)?;
            sb += l.base;
            sn += l.clean;
        }
        rows.push(EpochMetrics {
            epoch,
            phase: Phase::Basic,
            loss_base: mean(sb, steps),
            loss_clean: mean(sn, steps),
            loss_unclean: 0.0,
            omega: 0.0,
            clean_size: novel_s.len(),
            unclean_size: 0,
            val_miou: monitor.map(|m| m.novel_miou(model)).transpose()?,
        });
        log::debug!("basic loop epoch {epoch}: {}", rows[epoch].csv_row());
    }
    Ok(rows)
}

/// Entropy-ranked split of the novel pool under `model`; images without a
/// cluster go to unclean at score `+inf`.
pub fn initial_split<S: Scalar>(
    model: &LinearSegmenter<S>,
    pool: &NovelPool<'_, S>,
    lambda: f64,
) -> Result<SplitState> {
    let clustered = pool.clustered_indices();
    let scores = score_images(
        model,
        clustered.iter().map(|&i| (pool.ids[i], pool.features[i], pool.masks[i])),
    )?;
    let skipped: Vec<String> = (0..pool.len())
        .filter(|&i| !pool.clustered[i])
        .map(|i| pool.ids[i].to_string())
        .collect();
    rank_split_with_skipped(&scores, &skipped, lambda)
}

/// Settings of the clean/unclean loop that are not optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EumsLoopOptions {
    pub eta: f64,
    pub ramp_length: usize,
    pub ema_momentum: f64,
    /// Epoch of the one-time reassignment, if enabled.
    pub reassign_epoch: Option<usize>,
    pub self_training: bool,
    pub augment: AugmentationSpec,
}

pub struct EumsLoopResult<S> {
    pub teacher: TeacherState<S>,
    pub split: SplitState,
    pub metrics: Vec<EpochMetrics>,
}

/// Clean/unclean fine-tuning with an EMA teacher initialized from `model`.
#[allow(clippy::too_many_arguments)]
pub fn eums_loop<S: Scalar>(
    model: &mut LinearSegmenter<S>,
    base: &Dataset<S>,
    pool: &NovelPool<'_, S>,
    split: SplitState,
    schedule: &TrainConfig,
    opts: &EumsLoopOptions,
    loop_seed: u64,
    monitor: Option<&Monitor<'_, S>>,
) -> Result<EumsLoopResult<S>> {
    schedule.validate()?;
    opts.augment.validate()?;
    let mut split = split;
    let base_pairs = base_pairs(base)?;
    let mut base_s = Sampler::new(seed::rng(loop_seed, &[STREAM_BASE]));
    base_s.set_members((0..base_pairs.len()).collect());
    let mut clean_s = Sampler::new(seed::rng(loop_seed, &[STREAM_LABELED_NOVEL]));
    let mut unclean_s = Sampler::new(seed::rng(loop_seed, &[STREAM_UNCLEAN]));
    let mut aug_rng = seed::rng(loop_seed, &[STREAM_AUGMENT]);
    let mut teacher = TeacherState::from_student(model, opts.ema_momentum)?;
    let mut velocity = Params::zeros(model.outputs(), model.dim());
    let mut rows = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        if opts.reassign_epoch == Some(epoch) {
            let idx = pool.indices(&split.clean)?;
            let fresh = score_images(
                model,
                idx.iter().map(|&i| (pool.ids[i], pool.features[i], pool.masks[i])),
            )?;
            split = dynamic_reassign(&split, &fresh)?;
        }
        clean_s.set_members(pool.indices(&split.clean)?);
        unclean_s.set_members(if opts.self_training {
            pool.indices(&split.unclean)?
        } else {
            Vec::new()
        });
        let omega = ramp_weight(epoch as f64, opts.ramp_length as f64);
        let sgd = schedule.sgd_at(epoch);
        let steps = epoch_steps(&[base_s.len(), clean_s.len(), unclean_s.len()], schedule.batch_size);
        let (mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let b: Vec<_> = base_s.next_batch(schedule.batch_size).into_iter().map(|i| base_pairs[i]).collect();
            let c: Vec<_> = clean_s
                .next_batch(schedule.batch_size)
                .into_iter()
                .map(|i| (pool.features[i], pool.labels[i]))
                .collect();
            let views = unclean_s
                .next_batch(schedule.batch_size)
                .into_iter()
                .map(|i| augment_pair(pool.features[i], &opts.augment, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let u: Vec<_> = views.iter().map(|v| (&v.weak, &v.strong)).collect();
            let l = overall_step(model, &mut teacher, &mut velocity, &b, &c, &u, omega, opts.eta, &sgd)?;
            sb += l.base;
            sc += l.clean;
            sd += l.unclean;
        }
        rows.push(EpochMetrics {
            epoch,
            phase: Phase::Eums,
            loss_base: mean(sb, steps),
            loss_clean: mean(sc, steps),
            loss_unclean: mean(sd, steps),
            omega,
            clean_size: split.clean.len(),
            unclean_size: split.unclean.len(),
            val_miou: monitor.map(|m| m.novel_miou(model)).transpose()?,
        });
        log::debug!("clean/unclean loop epoch {epoch}: {}", rows[epoch].csv_row());
    }
    Ok(EumsLoopResult {
        teacher,
        split,
        metrics: rows,
    })
}

pub struct Stage3Output<S> {
    pub model: LinearSegmenter<S>,
    pub teacher: Option<TeacherState<S>>,
    pub split: Option<SplitState>,
    pub metrics: Vec<EpochMetrics>,
}

/// Full novel fine-tuning from a trained base model.
///
/// Runs the basic loop; with entropy ranking enabled, splits the pool by
/// foreground entropy under the resulting model and runs the clean/unclean
/// loop. Epoch numbers in the metrics run across both loops.
#[allow(clippy::too_many_arguments)]
pub fn train_eums<S: Scalar>(
    base_model: &LinearSegmenter<S>,
    base: &Dataset<S>,
    novel: &Dataset<S>,
    pseudo: &PseudoLabels,
    cfg: &EumsConfig,
    optim: &TrainConfig,
    ablation: &Ablation,
    seed: u64,
    monitor: Option<&Monitor<'_, S>>,
) -> Result<Stage3Output<S>> {
    cfg.validate()?;
    ablation.validate()?;
    let pool = NovelPool::new(novel, pseudo)?;
    let schedule = cfg.loop_schedule(optim);
    let (basic_seed, eums_seed) = loop_seeds(seed);
    let mut model = LinearSegmenter::expand_from_base(base_model, pseudo.class_space)?;
    let mut metrics = basic_loop(&mut model, base, &pool, &schedule, basic_seed, monitor)?;
    if !ablation.entropy_ranking {
        return Ok(Stage3Output {
            model,
            teacher: None,
            split: None,
            metrics,
        });
    }
    let split = initial_split(&model, &pool, cfg.lambda)?;
    let opts = EumsLoopOptions {
        eta: cfg.eta,
        ramp_length: cfg.ramp_length,
        ema_momentum: cfg.ema_momentum,
        reassign_epoch: ablation.dynamic_reassignment.then_some(cfg.reassign_epoch),
        self_training: ablation.self_training,
        augment: cfg.augment,
    };
    let out = eums_loop(&mut model, base, &pool, split, &schedule, &opts, eums_seed, monitor)?;
    let offset = metrics.len();
    metrics.extend(out.metrics.into_iter().map(|mut r| {
        r.epoch += offset;
        r
    }));
    Ok(Stage3Output {
        model,
        teacher: Some(out.teacher),
        split: Some(out.split),
        metrics,
    })
}
