//! Novel class discovery for semantic segmentation over per-pixel features.
//!
//! The pipeline trains a base segmenter on labeled base classes, builds
//! clustering pseudo-labels for unlabeled images from saliency masks and
//! confident base predictions, then fine-tunes with entropy-ranked
//! clean/unclean splits and mean-teacher self-training.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

// `!(x > 0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod pseudolabel;
pub mod scalar;
pub mod seed;
pub mod segmenter;
pub mod selftrain;
pub mod synth;
pub mod uncertainty;

pub use data::{
    argmax_class, BinaryMask, ClassId, ClassSpace, Dataset, FeatureMap, Item, LabelMap,
    NovelMask, ProbMap, SaliencyMask, SplitTag, BACKGROUND, IGNORE_ID,
};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type ProbMapF64 = ProbMap<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type DatasetF64 = Dataset<f64>;
