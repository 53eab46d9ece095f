//! Run configuration: flat `section.key = value` text.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ncdss_core::pseudolabel::PseudoLabelConfig;
use ncdss_core::clustering::{ClusterMode, MIN_NOVEL_PIXELS};
use ncdss_core::segmenter::TrainConfig;
use ncdss_core::selftrain::{Ablation, AugmentationSpec, EumsConfig};
use ncdss_core::synth::{FoldSpec, SaliencyNoiseSpec, SceneSpec};
use ncdss_core::{Error, Result};

/// Scene parameters; prototypes are drawn from `prototype_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub prototype_spread: f64,
    pub prototype_seed: u64,
    pub sigma: f64,
    pub instance_sigma: f64,
    pub modes: usize,
    pub mode_spread: f64,
    pub mode_seed: u64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub radius_min: usize,
    pub radius_max: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            dim: 8,
            prototype_spread: 1.0,
            prototype_seed: 0,
            sigma: 0.5,
            instance_sigma: 0.0,
            modes: 0,
            mode_spread: 1.0,
            mode_seed: 0,
            objects_min: 1,
            objects_max: 3,
            radius_min: 3,
            radius_max: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub fold: FoldSpec,
    pub saliency: SaliencyNoiseSpec,
    pub train: TrainConfig,
    /// Stage 1 also trains on novel images with novel pixels as background.
    pub base_includes_novel_images: bool,
    pub eums: EumsConfig,
    pub min_novel_pixels: usize,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub cache: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            fold: FoldSpec {
                n_base_fg: 15,
                n_novel: 5,
                n_base_images: 200,
                n_novel_images: 300,
                n_val_images: 100,
                max_novel_per_image: 2,
                base_novel_rate: 0.0,
                seed: 0,
            },
            saliency: SaliencyNoiseSpec {
                boundary_radius: 1,
                flip_rate: 0.05,
                miss_rate: 0.1,
            },
            train: TrainConfig::default(),
            base_includes_novel_images: true,
            eums: EumsConfig::default(),
            min_novel_pixels: MIN_NOVEL_PIXELS,
            ablation: Ablation::full(),
            seeds: vec![0],
            cache: true,
            output_dir: None,
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, bool);

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        // Debug keeps a decimal point and round-trips exactly
        format!("{self:?}")
    }
}

impl Value for Option<usize> {
    fn parse(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

impl Value for Option<PathBuf> {
    fn parse(s: &str) -> Option<Self> {
        Some(if s == "none" { None } else { Some(PathBuf::from(s)) })
    }
    fn show(&self) -> String {
        self.as_ref().map_or("none".into(), |p| p.display().to_string())
    }
}

impl Value for Vec<u64> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|v| v.trim().parse().ok()).collect()
    }
    fn show(&self) -> String {
        self.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_value<T: Value>(key: &str, raw: &str) -> Result<T> {
    T::parse(raw).ok_or_else(|| Error::config(key, format!("cannot parse `{raw}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $t:ty),* $(,)?) => {
        /// Every accepted key, in snapshot order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value::<$t>(key, raw)?,)*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            /// Text form of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(<$t as Value>::show(&self.$($field).+)),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "scene.height" => scene.height: usize,
    "scene.width" => scene.width: usize,
    "scene.dim" => scene.dim: usize,
    "scene.prototype_spread" => scene.prototype_spread: f64,
    "scene.prototype_seed" => scene.prototype_seed: u64,
    "scene.sigma" => scene.sigma: f64,
    "scene.instance_sigma" => scene.instance_sigma: f64,
    "scene.modes" => scene.modes: usize,
    "scene.mode_spread" => scene.mode_spread: f64,
    "scene.mode_seed" => scene.mode_seed: u64,
    "scene.objects_min" => scene.objects_min: usize,
    "scene.objects_max" => scene.objects_max: usize,
    "scene.radius_min" => scene.radius_min: usize,
    "scene.radius_max" => scene.radius_max: usize,
    "fold.n_base_fg" => fold.n_base_fg: usize,
    "fold.n_novel" => fold.n_novel: usize,
    "fold.n_base_images" => fold.n_base_images: usize,
    "fold.n_novel_images" => fold.n_novel_images: usize,
    "fold.n_val_images" => fold.n_val_images: usize,
    "fold.max_novel_per_image" => fold.max_novel_per_image: usize,
    "fold.base_novel_rate" => fold.base_novel_rate: f64,
    "fold.seed" => fold.seed: u64,
    "saliency.boundary_radius" => saliency.boundary_radius: usize,
    "saliency.flip_rate" => saliency.flip_rate: f64,
    "saliency.miss_rate" => saliency.miss_rate: f64,
    "train.learning_rate" => train.learning_rate: f64,
    "train.momentum" => train.momentum: f64,
    "train.weight_decay" => train.weight_decay: f64,
    "train.epochs" => train.epochs: usize,
    "train.batch_size" => train.batch_size: usize,
    "train.lr_decay_epoch" => train.lr_decay_epoch: Option<usize>,
    "train.lr_decay_factor" => train.lr_decay_factor: f64,
    "train.include_novel_images" => base_includes_novel_images: bool,
    "eums.tau" => eums.tau: f64,
    "eums.lambda" => eums.lambda: f64,
    "eums.eta" => eums.eta: f64,
    "eums.ramp_length" => eums.ramp_length: usize,
    "eums.reassign_epoch" => eums.reassign_epoch: usize,
    "eums.ema_momentum" => eums.ema_momentum: f64,
    "eums.epochs" => eums.epochs: usize,
    "eums.over_factor" => eums.over_factor: usize,
    "eums.min_novel_pixels" => min_novel_pixels: usize,
    "augment.flip_prob" => eums.augment.flip_prob: f64,
    "augment.strong_noise" => eums.augment.strong_noise: f64,
    "augment.scale_jitter" => eums.augment.scale_jitter: f64,
    "ablation.over_clustering" => ablation.over_clustering: bool,
    "ablation.entropy_ranking" => ablation.entropy_ranking: bool,
    "ablation.dynamic_reassignment" => ablation.dynamic_reassignment: bool,
    "ablation.self_training" => ablation.self_training: bool,
    "run.seeds" => seeds: Vec<u64>,
    "run.cache" => cache: bool,
    "run.output_dir" => output_dir: Option<PathBuf>,
}

/// Keys that do not change what a run computes.
const PRESENTATION_KEYS: &[&str] = &["run.cache", "run.output_dir"];

impl RunConfig {
    /// Parses config text over the defaults; later keys may not repeat earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "set more than once"));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Every key with its value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let prefix = key.split('.').next().unwrap_or("");
            if prefix != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = prefix;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Keys whose values differ between two configs, ignoring output
    /// location and caching.
    pub fn differing_keys(&self, other: &Self) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| !PRESENTATION_KEYS.contains(k) && self.get(k) != other.get(k))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec()?.validate()?;
        self.fold.validate(&self.scene_spec()?)?;
        self.saliency.validate()?;
        self.train.validate()?;
        self.eums.validate()?;
        self.ablation.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds", "need at least one seed"));
        }
        if self.min_novel_pixels == 0 {
            return Err(Error::config("eums.min_novel_pixels", "must be at least 1"));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec<f64>> {
        let s = &self.scene;
        if !(s.prototype_spread > 0.0) {
            return Err(Error::config("scene.prototype_spread", "must be positive"));
        }
        if !(s.mode_spread >= 0.0) {
            return Err(Error::config("scene.mode_spread", "must be nonnegative"));
        }
        let n_classes = self.fold.n_base_fg + 1 + self.fold.n_novel;
        let mut spec = SceneSpec::with_random_prototypes(n_classes, s.dim, s.prototype_spread, s.prototype_seed);
        if s.modes > 0 {
            spec = spec.with_modes(s.modes, s.mode_spread, s.mode_seed);
        }
        spec.height = s.height;
        spec.width = s.width;
        spec.sigma = s.sigma;
        spec.instance_sigma = s.instance_sigma;
        spec.objects_per_image = (s.objects_min, s.objects_max);
        spec.object_radius = (s.radius_min, s.radius_max);
        Ok(spec)
    }

    pub fn cluster_mode(&self) -> ClusterMode {
        if self.ablation.over_clustering {
            ClusterMode::Over
        } else {
            ClusterMode::Exact
        }
    }

    pub fn pseudo_label_config(&self, seed: u64) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau: self.eums.tau,
            mode: self.cluster_mode(),
            over_factor: self.eums.over_factor,
            min_novel_pixels: self.min_novel_pixels,
            seed,
        }
    }

    pub fn stage1_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train }
    }

    pub fn augment(&self) -> AugmentationSpec {
        self.eums.augment
    }
}
