use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::{BinaryMask, ClassSpace, FeatureMap, LabelMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Base,
    Novel,
    Val,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Base => "base",
            SplitTag::Novel => "novel",
            SplitTag::Val => "val",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitTag::Base),
            "novel" => Ok(SplitTag::Novel),
            "val" => Ok(SplitTag::Val),
            other => Err(Error::Manifest(format!("unknown split tag `{other}`"))),
        }
    }
}

/// One image worth of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Item<S> {
    pub id: String,
    pub features: FeatureMap<S>,
    pub labels: Option<LabelMap>,
    pub saliency: Option<BinaryMask>,
}

impl<S: Scalar> Item<S> {
    pub fn new(id: impl Into<String>, features: FeatureMap<S>) -> Self {
        Self {
            id: id.into(),
            features,
            labels: None,
            saliency: None,
        }
    }

    pub fn with_labels(mut self, labels: LabelMap) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_saliency(mut self, saliency: BinaryMask) -> Self {
        self.saliency = Some(saliency);
        self
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, w) = (self.features.height(), self.features.width());
        if let Some(labels) = &self.labels {
            if !labels.same_extent(h, w) {
                return Err(Error::Shape(format!(
                    "image `{}`: labels {}x{} vs features {h}x{w}",
                    self.id,
                    labels.height(),
                    labels.width()
                )));
            }
        }
        if let Some(mask) = &self.saliency {
            if !mask.same_extent(h, w) {
                return Err(Error::Shape(format!(
                    "image `{}`: saliency {}x{} vs features {h}x{w}",
                    self.id,
                    mask.height(),
                    mask.width()
                )));
            }
        }
        Ok(())
    }
}

/// A split of images sharing one class space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    split: SplitTag,
    class_space: ClassSpace,
    items: Vec<Item<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(split: SplitTag, class_space: ClassSpace, items: Vec<Item<S>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        let dim = items.first().map(|it| it.features.dim());
        for item in &items {
            if item.id.is_empty() || item.id.contains(char::is_whitespace) {
                return Err(Error::InvalidValue(format!(
                    "image id `{}` must be non-empty without whitespace",
                    item.id
                )));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidValue(format!("duplicate image id `{}`", item.id)));
            }
            item.check_shapes()?;
            if Some(item.features.dim()) != dim {
                return Err(Error::Shape(format!(
                    "image `{}` has feature dim {}, dataset uses {}",
                    item.id,
                    item.features.dim(),
                    dim.unwrap_or(0)
                )));
            }
            match split {
                SplitTag::Base | SplitTag::Val if item.labels.is_none() => {
                    return Err(Error::InvalidValue(format!(
                        "{split} image `{}` carries no labels",
                        item.id
                    )));
                }
                SplitTag::Novel if item.saliency.is_none() => {
                    return Err(Error::InvalidValue(format!(
                        "novel image `{}` carries no saliency mask",
                        item.id
                    )));
                }
                _ => {}
            }
            if let Some(labels) = &item.labels {
                let bound = match split {
                    SplitTag::Base => class_space.n_base(),
                    SplitTag::Novel | SplitTag::Val => {
                        class_space.n_total().max(class_space.n_outputs())
                    }
                };
                labels.validate(bound).map_err(|e| {
                    Error::InvalidValue(format!("image `{}`: {e}", item.id))
                })?;
            }
        }
        Ok(Self {
            split,
            class_space,
            items,
        })
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn class_space(&self) -> ClassSpace {
        self.class_space
    }

    pub fn items(&self) -> &[Item<S>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Feature dimension, if the split is nonempty.
    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.features.dim())
    }

    pub fn get(&self, id: &str) -> Option<&Item<S>> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            split: self.split,
            class_space: self.class_space,
            items: self
                .items
                .iter()
                .map(|it| Item {
                    id: it.id.clone(),
                    features: it.features.cast(),
                    labels: it.labels.clone(),
                    saliency: it.saliency.clone(),
                })
                .collect(),
        }
    }
}
