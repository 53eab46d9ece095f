use rand::seq::SliceRandom;

use super::{CeAccumulator, LinearSegmenter, Params};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch from which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            lr_decay_epoch: Some(15),
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("train.lr_decay_factor", "must be positive"));
        }
        Ok(())
    }

    /// Optimizer settings in effect during `epoch`.
    pub fn sgd_at(&self, epoch: usize) -> SgdParams {
        let decayed = matches!(self.lr_decay_epoch, Some(e) if epoch >= e);
        SgdParams {
            learning_rate: if decayed {
                self.learning_rate * self.lr_decay_factor
            } else {
                self.learning_rate
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum SGD step with coupled weight decay:
/// `v <- m v + g + wd theta`, `theta <- theta - lr v`.
pub fn sgd_step<S: Scalar>(
    model: &mut LinearSegmenter<S>,
    grad: &Params<S>,
    velocity: &mut Params<S>,
    sgd: &SgdParams,
) -> Result<()> {
    if !grad.same_shape(model.params()) || !velocity.same_shape(model.params()) {
        return Err(Error::Shape("gradient or velocity does not match the model".into()));
    }
    let m = S::cast(sgd.momentum);
    let wd = S::cast(sgd.weight_decay);
    let lr = S::cast(sgd.learning_rate);
    for ((theta, v), &g) in model
        .params_mut()
        .iter_mut()
        .zip(velocity.iter_mut())
        .zip(grad.iter())
    {
        *v = m * *v + g + wd * *theta;
        *theta -= lr * *v;
    }
    Ok(())
}

/// Trains the base model `f_b` (one output per base class) on a labeled base split.
///
/// The model starts from zero; mini-batches are reshuffled every epoch
/// from a stream derived from `cfg.seed`.
pub fn train_base<S: Scalar>(base: &Dataset<S>, cfg: &TrainConfig) -> Result<LinearSegmenter<S>> {
    fit_base(base, cfg, false).map(|(model, _)| model)
}

/// [`train_base`] plus the full-split loss after every epoch.
pub fn train_base_logged<S: Scalar>(
    base: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<(LinearSegmenter<S>, Vec<f64>)> {
    fit_base(base, cfg, true)
}

fn fit_base<S: Scalar>(
    base: &Dataset<S>,
    cfg: &TrainConfig,
    log: bool,
) -> Result<(LinearSegmenter<S>, Vec<f64>)> {
    cfg.validate()?;
    let dim = base
        .dim()
        .ok_or_else(|| Error::Empty("base split has no images".into()))?;
    let mut model = LinearSegmenter::base(base.class_space(), dim);
    let mut velocity = Params::zeros(model.outputs(), dim);
    let mut rng = seed::rng(cfg.seed, &[0x62_61_73_65]);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let sgd = cfg.sgd_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = CeAccumulator::for_model(&model);
            for &i in batch {
                let item = &base.items()[i];
                let labels = item
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidValue(format!("base image `{}` is unlabeled", item.id)))?;
                acc.add(&model, &item.features, labels)?;
            }
            if let Some((_, grad)) = acc.mean() {
                sgd_step(&mut model, &grad, &mut velocity, &sgd)?;
            }
        }
        if log {
            history.push(dataset_loss(&model, base)?);
        }
    }
    Ok((model, history))
}

/// Pixel-mean cross-entropy of `model` over the labeled items of a split.
pub fn dataset_loss<S: Scalar>(model: &LinearSegmenter<S>, ds: &Dataset<S>) -> Result<f64> {
    let mut acc = CeAccumulator::for_model(model);
    for item in ds.items() {
        if let Some(y) = &item.labels {
            acc.add(model, &item.features, y)?;
        }
    }
    Ok(acc.mean::<S>().map(|(l, _)| l).unwrap_or(0.0))
}
