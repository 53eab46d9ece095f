//! Synthetic fold benchmarks.
//!
//! Scenes are axis-aligned rectangles and ellipses painted over a
//! background; every pixel's feature is its class prototype plus an
//! optional per-object offset plus isotropic gaussian noise. Saliency
//! masks are the foreground indicator corrupted by object misses,
//! boundary erosion/dilation and pixel flips.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    BinaryMask, ClassId, ClassSpace, Dataset, FeatureMap, Item, LabelMap, SplitTag, BACKGROUND,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec<S> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Feature prototype per class id, background first.
    pub prototypes: Vec<Vec<S>>,
    /// Per-pixel noise standard deviation.
    pub sigma: S,
    /// Per-object offset standard deviation; 0 gives pure prototype + pixel noise.
    pub instance_sigma: S,
    /// Optional appearance modes per class id: each object adds one
    /// offset drawn uniformly from its class's list. Empty means unimodal.
    pub modes: Vec<Vec<Vec<S>>>,
    /// Inclusive range of objects drawn per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object half-extents in pixels.
    pub object_radius: (usize, usize),
    /// Classes [`generate_scene`] draws objects from.
    pub object_classes: Vec<ClassId>,
}

impl<S: Scalar> SceneSpec<S> {
    /// 32x32 scenes over `n_classes` gaussian prototypes with per-dim spread `spread`.
    pub fn with_random_prototypes(n_classes: usize, dim: usize, spread: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
        let mut rng = seed::rng(seed, &[0x70_72_6f_74]);
        let prototypes = (0..n_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| S::cast(round_f32(normal.sample(&mut rng))))
                    .collect()
            })
            .collect();
        Self {
            height: 32,
            width: 32,
            dim,
            prototypes,
            sigma: S::zero(),
            instance_sigma: S::zero(),
            modes: Vec::new(),
            objects_per_image: (1, 3),
            object_radius: (3, 8),
            object_classes: (1..n_classes.min(256) as ClassId).collect(),
        }
    }

    /// Gives every foreground class `count` modes with gaussian offsets of
    /// per-dim spread `spread` around its prototype.
    pub fn with_modes(mut self, count: usize, spread: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
        let mut rng = seed::rng(seed, &[0x6d_6f_64_65]);
        self.modes = (0..self.prototypes.len())
            .map(|c| {
                if c == BACKGROUND as usize || count == 0 {
                    return Vec::new();
                }
                (0..count)
                    .map(|_| {
                        (0..self.dim)
                            .map(|_| S::cast(round_f32(normal.sample(&mut rng))))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        self
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::config("scene", "height, width and dim must be positive"));
        }
        if self.prototypes.len() < 2 {
            return Err(Error::config("scene.prototypes", "need background plus one class"));
        }
        if self.prototypes.iter().any(|p| p.len() != self.dim) {
            return Err(Error::config("scene.prototypes", "prototype length differs from dim"));
        }
        for i in 0..self.prototypes.len() {
            for j in 0..i {
                if self.prototypes[i] == self.prototypes[j] {
                    return Err(Error::config(
                        "scene.prototypes",
                        format!("classes {j} and {i} share a prototype"),
                    ));
                }
            }
        }
        if !self.modes.is_empty() {
            if self.modes.len() != self.prototypes.len() {
                return Err(Error::config("scene.modes", "need one mode list per class"));
            }
            if self.modes.iter().flatten().any(|m| m.len() != self.dim) {
                return Err(Error::config("scene.modes", "mode offset length differs from dim"));
            }
        }
        if !(self.sigma >= S::zero()) || !(self.instance_sigma >= S::zero()) {
            return Err(Error::config("scene.sigma", "noise levels must be nonnegative"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config("scene.objects_per_image", "need 1 <= min <= max"));
        }
        let (rlo, rhi) = self.object_radius;
        if rlo == 0 || rlo > rhi {
            return Err(Error::config("scene.object_radius", "need 1 <= min <= max"));
        }
        if self
            .object_classes
            .iter()
            .any(|&c| c == BACKGROUND || c as usize >= self.prototypes.len())
        {
            return Err(Error::config(
                "scene.object_classes",
                "object classes must be foreground ids with prototypes",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyNoiseSpec {
    /// Largest erosion/dilation radius applied per object.
    pub boundary_radius: usize,
    pub flip_rate: f64,
    pub miss_rate: f64,
}

impl SaliencyNoiseSpec {
    pub fn clean() -> Self {
        Self {
            boundary_radius: 0,
            flip_rate: 0.0,
            miss_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (rate, field) in [(self.flip_rate, "noise.flip_rate"), (self.miss_rate, "noise.miss_rate")] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(field, format!("{rate} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldSpec {
    /// Foreground base classes; background is added on top.
    pub n_base_fg: usize,
    pub n_novel: usize,
    pub n_base_images: usize,
    pub n_novel_images: usize,
    pub n_val_images: usize,
    /// Upper bound on novel objects drawn into one novel or val image.
    pub max_novel_per_image: usize,
    /// Probability that an object in a base image is drawn from a novel class.
    pub base_novel_rate: f64,
    pub seed: u64,
}

impl FoldSpec {
    pub fn class_space(&self) -> Result<ClassSpace> {
        ClassSpace::new(self.n_base_fg + 1, self.n_novel)
    }

    pub fn validate<S: Scalar>(&self, scene: &SceneSpec<S>) -> Result<()> {
        if self.n_base_fg == 0 {
            return Err(Error::config("fold.n_base_fg", "need at least one base class"));
        }
        if self.n_novel == 0 {
            return Err(Error::config("fold.n_novel", "need at least one novel class"));
        }
        let needed = self.n_base_fg + 1 + self.n_novel;
        if scene.n_classes() != needed {
            return Err(Error::config(
                "fold.n_novel",
                format!(
                    "fold needs {needed} class prototypes, scene has {}",
                    scene.n_classes()
                ),
            ));
        }
        if self.max_novel_per_image == 0 {
            return Err(Error::config("fold.max_novel_per_image", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.base_novel_rate) {
            return Err(Error::config("fold.base_novel_rate", "must lie in [0, 1]"));
        }
        if self.n_base_images == 0 || self.n_novel_images == 0 || self.n_val_images == 0 {
            return Err(Error::config("fold.images", "every split needs at least one image"));
        }
        Ok(())
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

struct Rendered<S> {
    features: FeatureMap<S>,
    labels: LabelMap,
}

fn render<S: Scalar, R: Rng>(spec: &SceneSpec<S>, classes: &[ClassId], rng: &mut R) -> Rendered<S> {
    let (h, w, d) = (spec.height, spec.width, spec.dim);
    // owner 0 is background, owner i + 1 is object i
    let mut owner = vec![0usize; h * w];
    let mut labels = vec![BACKGROUND; h * w];
    let (rlo, rhi) = spec.object_radius;
    for (i, &class) in classes.iter().enumerate() {
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let ry = rng.random_range(rlo..=rhi) as f64;
        let rx = rng.random_range(rlo..=rhi) as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    owner[y * w + x] = i + 1;
                    labels[y * w + x] = class;
                }
            }
        }
    }

    let inst = spec.instance_sigma.widen();
    let mut offsets: Vec<Vec<f64>> = (0..=classes.len())
        .map(|_| {
            (0..d)
                .map(|_| if inst > 0.0 { gaussian(rng) * inst } else { 0.0 })
                .collect()
        })
        .collect();
    for (i, &class) in classes.iter().enumerate() {
        let modes = spec.modes.get(class as usize).map_or(&[][..], |m| &m[..]);
        if !modes.is_empty() {
            let m = &modes[rng.random_range(0..modes.len())];
            for (o, v) in offsets[i + 1].iter_mut().zip(m) {
                *o += v.widen();
            }
        }
    }
    let sigma = spec.sigma.widen();
    let mut values = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        let proto = &spec.prototypes[labels[p] as usize];
        for c in 0..d {
            let noise = if sigma > 0.0 { gaussian(rng) * sigma } else { 0.0 };
            values.push(S::cast(round_f32(proto[c].widen() + offsets[owner[p]][c] + noise)));
        }
    }
    Rendered {
        features: FeatureMap::new(h, w, d, values).expect("rendered features are finite"),
        labels: LabelMap::new(h, w, labels).expect("extent matches"),
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Renders one scene with objects drawn from `spec.object_classes`.
pub fn generate_scene<S: Scalar>(spec: &SceneSpec<S>, seed: u64) -> Result<(FeatureMap<S>, LabelMap)> {
    spec.validate()?;
    if spec.object_classes.is_empty() {
        return Err(Error::config("scene.object_classes", "no classes to draw from"));
    }
    let mut rng = seed::rng(seed, &[0x73_63_65_6e]);
    let (lo, hi) = spec.objects_per_image;
    let n = rng.random_range(lo..=hi);
    let classes: Vec<ClassId> = (0..n)
        .map(|_| spec.object_classes[rng.random_range(0..spec.object_classes.len())])
        .collect();
    let out = render(spec, &classes, &mut rng);
    Ok((out.features, out.labels))
}

/// Same-class connected components of the foreground (4-connectivity).
fn foreground_components(labels: &LabelMap) -> Vec<Vec<usize>> {
    let (h, w) = (labels.height(), labels.width());
    let vals = labels.values();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if seen[start] || vals[start] == BACKGROUND {
            continue;
        }
        let class = vals[start];
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && vals[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Dilates (`radius > 0`) or erodes (`radius < 0`) a pixel set with a square window.
fn morph(region: &[bool], h: usize, w: usize, radius: isize) -> Vec<bool> {
    if radius == 0 {
        return region.to_vec();
    }
    let r = radius.unsigned_abs() as isize;
    let dilate = radius > 0;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0
                        && xx >= 0
                        && yy < h as isize
                        && xx < w as isize
                        && region[(yy as usize) * w + xx as usize];
                    any |= inside;
                    all &= inside;
                }
            }
            out[(y as usize) * w + x as usize] = if dilate { any } else { all };
        }
    }
    out
}

/// Emulates an imperfect saliency model on top of ground-truth labels.
pub fn generate_saliency(labels: &LabelMap, noise: &SaliencyNoiseSpec, seed: u64) -> Result<BinaryMask> {
    noise.validate()?;
    let (h, w) = (labels.height(), labels.width());
    let mut rng = seed::rng(seed, &[0x73_61_6c]);
    let mut mask = vec![false; h * w];
    let radius = noise.boundary_radius as i64;
    for comp in foreground_components(labels) {
        if noise.miss_rate > 0.0 && rng.random_bool(noise.miss_rate) {
            continue;
        }
        let jitter = if radius > 0 {
            rng.random_range(-radius..=radius) as isize
        } else {
            0
        };
        let mut region = vec![false; h * w];
        for &p in &comp {
            region[p] = true;
        }
        for (m, r) in mask.iter_mut().zip(morph(&region, h, w, jitter)) {
            *m |= r;
        }
    }
    if noise.flip_rate > 0.0 {
        for m in mask.iter_mut() {
            if rng.random_bool(noise.flip_rate) {
                *m = !*m;
            }
        }
    }
    BinaryMask::new(h, w, mask)
}

/// The three splits of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark<S> {
    pub base: Dataset<S>,
    pub novel: Dataset<S>,
    pub val: Dataset<S>,
}

const TAG_BASE: u64 = 1;
const TAG_NOVEL: u64 = 2;
const TAG_VAL: u64 = 3;

fn plan_base_image<R: Rng>(fold: &FoldSpec, range: (usize, usize), rng: &mut R) -> Vec<ClassId> {
    let n = rng.random_range(range.0..=range.1);
    let n_base = fold.n_base_fg + 1;
    (0..n)
        .map(|_| {
            if fold.base_novel_rate > 0.0 && rng.random_bool(fold.base_novel_rate) {
                (n_base + rng.random_range(0..fold.n_novel)) as ClassId
            } else {
                rng.random_range(1..n_base) as ClassId
            }
        })
        .collect()
}

fn plan_novel_image<R: Rng>(fold: &FoldSpec, range: (usize, usize), rng: &mut R) -> Vec<ClassId> {
    let n = rng.random_range(range.0..=range.1);
    let n_base = fold.n_base_fg + 1;
    let novel = |rng: &mut R| (n_base + rng.random_range(0..fold.n_novel)) as ClassId;
    let mut classes = vec![novel(rng)];
    let mut n_novel = 1;
    for _ in 1..n {
        if n_novel < fold.max_novel_per_image && rng.random_bool(0.5) {
            classes.push(novel(rng));
            n_novel += 1;
        } else {
            classes.push(rng.random_range(1..n_base) as ClassId);
        }
    }
    classes.shuffle(rng);
    classes
}

/// Generates base, novel and val splits for one fold.
///
/// Base labels map novel pixels to background. Novel items carry a
/// saliency mask and hidden ground truth for evaluation only. Val items
/// carry full labels.
pub fn make_fold_benchmark<S: Scalar>(
    scene: &SceneSpec<S>,
    fold: &FoldSpec,
    noise: &SaliencyNoiseSpec,
) -> Result<Benchmark<S>> {
    scene.validate()?;
    fold.validate(scene)?;
    noise.validate()?;
    let cs = fold.class_space()?;
    let n_base = cs.n_base() as ClassId;
    let range = scene.objects_per_image;

    let base_items = (0..fold.n_base_images)
        .map(|i| {
            let mut rng = seed::rng(fold.seed, &[TAG_BASE, i as u64]);
            let classes = plan_base_image(fold, range, &mut rng);
            let out = render(scene, &classes, &mut rng);
            let labels = out.labels.map(|c| if c >= n_base { BACKGROUND } else { c });
            Item::new(format!("base-{i:05}"), out.features).with_labels(labels)
        })
        .collect();

    let novel_like = |tag: u64, prefix: &str, count: usize, with_saliency: bool| {
        (0..count)
            .map(|i| {
                let mut rng = seed::rng(fold.seed, &[tag, i as u64]);
                let classes = plan_novel_image(fold, range, &mut rng);
                let out = render(scene, &classes, &mut rng);
                let mut item = Item::new(format!("{prefix}-{i:05}"), out.features);
                if with_saliency {
                    let sal_seed = seed::derive(fold.seed, &[tag, i as u64, 0x5a]);
                    item = item.with_saliency(generate_saliency(&out.labels, noise, sal_seed)?);
                }
                Ok(item.with_labels(out.labels))
            })
            .collect::<Result<Vec<_>>>()
    };

    Ok(Benchmark {
        base: Dataset::new(SplitTag::Base, cs, base_items)?,
        novel: Dataset::new(SplitTag::Novel, cs, novel_like(TAG_NOVEL, "novel", fold.n_novel_images, true)?)?,
        val: Dataset::new(SplitTag::Val, cs, novel_like(TAG_VAL, "val", fold.n_val_images, false)?)?,
    })
}
