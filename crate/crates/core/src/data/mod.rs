//! Per-pixel tensors, label maps and class spaces.

mod dataset;
pub mod format;

pub use dataset::{Dataset, Item, SplitTag};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Class identifier. Ids below [`IGNORE_ID`] are real classes.
pub type ClassId = u8;

/// Sentinel excluded from every loss and metric.
pub const IGNORE_ID: ClassId = 255;

/// Background class id.
pub const BACKGROUND: ClassId = 0;

/// Base and novel label spaces.
///
/// Base ids are `[0, n_base)` with background at 0. Novel output channels
/// occupy `[n_base, n_base + novel_head_size)`; the ground-truth novel
/// classes occupy `[n_base, n_base + n_novel)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSpace {
    n_base: usize,
    n_novel: usize,
    novel_head_size: usize,
}

impl ClassSpace {
    /// Class space whose novel head has exactly one channel per novel class.
    pub fn new(n_base: usize, n_novel: usize) -> Result<Self> {
        Self::with_head(n_base, n_novel, n_novel)
    }

    pub fn with_head(n_base: usize, n_novel: usize, novel_head_size: usize) -> Result<Self> {
        if n_base < 1 {
            return Err(Error::InvalidValue("n_base must be at least 1".into()));
        }
        if n_novel < 1 || novel_head_size < 1 {
            return Err(Error::InvalidValue(
                "n_novel and novel_head_size must be at least 1".into(),
            ));
        }
        let widest = n_base + n_novel.max(novel_head_size);
        if widest > IGNORE_ID as usize {
            return Err(Error::InvalidValue(format!(
                "{widest} class ids do not fit below the ignore id {IGNORE_ID}"
            )));
        }
        Ok(Self {
            n_base,
            n_novel,
            novel_head_size,
        })
    }

    /// Same counts with a different novel head width.
    pub fn with_head_size(&self, novel_head_size: usize) -> Result<Self> {
        Self::with_head(self.n_base, self.n_novel, novel_head_size)
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.n_novel
    }

    pub fn novel_head_size(&self) -> usize {
        self.novel_head_size
    }

    /// Ground-truth class count, `n_base + n_novel`.
    pub fn n_total(&self) -> usize {
        self.n_base + self.n_novel
    }

    /// Output channels of a segmenter over this space.
    pub fn n_outputs(&self) -> usize {
        self.n_base + self.novel_head_size
    }

    pub fn is_base(&self, id: ClassId) -> bool {
        (id as usize) < self.n_base
    }

    /// Ground-truth novel class ids.
    pub fn novel_classes(&self) -> std::ops::Range<usize> {
        self.n_base..self.n_total()
    }

    /// Novel output channel ids.
    pub fn novel_channels(&self) -> std::ops::Range<usize> {
        self.n_base..self.n_outputs()
    }
}

fn check_extent(height: usize, width: usize, what: &str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("{what} must be at least 1x1")));
    }
    Ok(())
}

/// H x W x D feature tensor, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<S>) -> Result<Self> {
        check_extent(height, width, "feature map")?;
        if dim == 0 {
            return Err(Error::Shape("feature dim must be at least 1".into()));
        }
        if values.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[S] {
        let start = (h * self.width + w) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Pixel feature vectors in row-major order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, S> {
        self.values.chunks_exact(self.dim)
    }

    /// Mirror along the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for h in 0..self.height {
            for w in (0..self.width).rev() {
                values.extend_from_slice(self.pixel(h, w));
            }
        }
        Self { values, ..*self }
    }

    /// Elementwise transform of `(channel, value)`; the result must stay finite.
    pub fn map_channels(&self, mut f: impl FnMut(usize, S) -> S) -> Result<Self> {
        let dim = self.dim;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % dim, v))
            .collect();
        Self::new(self.height, self.width, self.dim, values)
    }

    pub fn cast<T: Scalar>(&self) -> FeatureMap<T> {
        FeatureMap {
            height: self.height,
            width: self.width,
            dim: self.dim,
            values: self.values.iter().map(|v| T::cast(v.widen())).collect(),
        }
    }
}

/// H x W map of class ids, with [`IGNORE_ID`] marking excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<ClassId>) -> Result<Self> {
        check_extent(height, width, "label map")?;
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, id: ClassId) -> Result<Self> {
        Self::new(height, width, vec![id; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> ClassId {
        self.values[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, id: ClassId) {
        self.values[h * self.width + w] = id;
    }

    pub fn same_extent(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// Checks every non-ignore id is below `bound`.
    pub fn validate(&self, bound: usize) -> Result<()> {
        match self
            .values
            .iter()
            .find(|&&v| v != IGNORE_ID && v as usize >= bound)
        {
            Some(v) => Err(Error::InvalidValue(format!(
                "label {v} outside the class space of {bound} ids"
            ))),
            None => Ok(()),
        }
    }

    pub fn count_valid(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE_ID).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width) {
            values.extend(row.iter().rev());
        }
        Self { values, ..*self }
    }

    pub fn map(&self, f: impl Fn(ClassId) -> ClassId) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }
}

/// Binary H x W mask. Used both for saliency maps and salient novel maps.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

pub type SaliencyMask = BinaryMask;
pub type NovelMask = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        check_extent(height, width, "mask")?;
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Result<Self> {
        Self::new(height, width, vec![on; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.values[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, on: bool) {
        self.values[h * self.width + w] = on;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn same_extent(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width) {
            values.extend(row.iter().rev());
        }
        Self { values, ..*self }
    }
}

/// Per-pixel class distribution over C' channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<S> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<S>,
}

/// Tolerance on per-pixel probability mass.
pub const SIMPLEX_TOL: f64 = 1e-6;

impl<S: Scalar> ProbMap<S> {
    /// Validating constructor: every pixel must lie on the simplex.
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<S>) -> Result<Self> {
        check_extent(height, width, "probability map")?;
        if channels == 0 || values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "probability map {height}x{width}x{channels} got {} values",
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(channels).enumerate() {
            let mut total = 0.0f64;
            for &p in row {
                if !(p >= S::zero()) || !p.is_finite() {
                    return Err(Error::InvalidValue(format!(
                        "pixel {i} has probability {p}"
                    )));
                }
                total += p.widen();
            }
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidValue(format!(
                    "pixel {i} sums to {total}, not 1"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Constructor for producers that normalize by construction.
    pub(crate) fn from_normalized(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<S>,
    ) -> Self {
        debug_assert_eq!(values.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[S] {
        let start = (h * self.width + w) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, S> {
        self.values.chunks_exact(self.channels)
    }

    /// Per-pixel argmax, ties to the lowest id.
    pub fn argmax_map(&self) -> LabelMap {
        let values = self.pixels().map(|row| argmax(row).0).collect();
        LabelMap {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Index and value of the largest entry; ties resolve to the lowest index.
pub(crate) fn argmax<S: Scalar>(row: &[S]) -> (ClassId, S) {
    let mut best = 0usize;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    (best as ClassId, row[best])
}

/// Class with maximal probability at `(h, w)`; ties break toward the lowest id.
pub fn argmax_class<S: Scalar>(prob: &ProbMap<S>, h: usize, w: usize) -> ClassId {
    argmax(prob.pixel(h, w)).0
}
