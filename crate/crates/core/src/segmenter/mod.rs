//! Per-pixel linear-softmax segmenter.
//!
//! Every pixel is classified independently: `softmax(W x + b)` with
//! `W` of shape `C' x D`. Losses are pixel-mean cross-entropy over
//! non-ignore pixels; gradients are analytic.

mod checkpoint;
mod ema;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ema::{ema_update, TeacherState};
pub use optim::{dataset_loss, sgd_step, train_base, train_base_logged, SgdParams, TrainConfig};

use crate::data::{ClassSpace, FeatureMap, LabelMap, ProbMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weight matrix and bias vector. Also the shape of gradients and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    outputs: usize,
    dim: usize,
    /// Row-major `outputs x dim`.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(outputs: usize, dim: usize) -> Self {
        Self {
            outputs,
            dim,
            weights: vec![S::zero(); outputs * dim],
            bias: vec![S::zero(); outputs],
        }
    }

    pub fn from_parts(outputs: usize, dim: usize, weights: Vec<S>, bias: Vec<S>) -> Result<Self> {
        if weights.len() != outputs * dim || bias.len() != outputs {
            return Err(Error::Shape(format!(
                "parameters for {outputs}x{dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            outputs,
            dim,
            weights,
            bias,
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.outputs == other.outputs && self.dim == other.dim
    }

    /// All entries, weights first.
    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSegmenter<S> {
    params: Params<S>,
    class_space: ClassSpace,
}

impl<S: Scalar> LinearSegmenter<S> {
    pub fn new(class_space: ClassSpace, params: Params<S>) -> Result<Self> {
        if !params.is_finite() {
            return Err(Error::InvalidValue("segmenter parameters must be finite".into()));
        }
        if params.outputs() != class_space.n_base() && params.outputs() != class_space.n_outputs() {
            return Err(Error::Shape(format!(
                "{} output channels fit neither the base ({}) nor the full ({}) head",
                params.outputs(),
                class_space.n_base(),
                class_space.n_outputs()
            )));
        }
        Ok(Self {
            params,
            class_space,
        })
    }

    /// Zero-initialized base model with `n_base` output channels.
    pub fn base(class_space: ClassSpace, dim: usize) -> Self {
        Self {
            params: Params::zeros(class_space.n_base(), dim),
            class_space,
        }
    }

    /// Zero-initialized model over every output channel of `class_space`.
    pub fn full(class_space: ClassSpace, dim: usize) -> Self {
        Self {
            params: Params::zeros(class_space.n_outputs(), dim),
            class_space,
        }
    }

    /// Novel model seeded from a base model: base rows copied, novel rows zero.
    pub fn expand_from_base(base: &Self, class_space: ClassSpace) -> Result<Self> {
        if base.outputs() != class_space.n_base() || base.class_space.n_base() != class_space.n_base() {
            return Err(Error::Shape(format!(
                "base model has {} outputs, class space has {} base classes",
                base.outputs(),
                class_space.n_base()
            )));
        }
        let mut params = Params::zeros(class_space.n_outputs(), base.dim());
        params.weights[..base.params.weights.len()].copy_from_slice(&base.params.weights);
        params.bias[..base.params.bias.len()].copy_from_slice(&base.params.bias);
        Ok(Self {
            params,
            class_space,
        })
    }

    pub fn class_space(&self) -> ClassSpace {
        self.class_space
    }

    pub fn outputs(&self) -> usize {
        self.params.outputs
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    /// Rounds every parameter through `f32`, matching a checkpoint round trip.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in out.params.iter_mut() {
            *v = S::cast(v.widen() as f32 as f64);
        }
        out
    }

    fn check_input(&self, x: &FeatureMap<S>) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "features have dim {}, model expects {}",
                x.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Writes `log softmax` of one pixel into `out`.
    #[inline]
    fn log_probs(&self, pixel: &[S], out: &mut [f64]) {
        let d = self.dim();
        let mut max = f64::NEG_INFINITY;
        for (c, z) in out.iter_mut().enumerate() {
            let row = &self.params.weights[c * d..(c + 1) * d];
            let mut acc = self.params.bias[c].widen();
            for (w, v) in row.iter().zip(pixel) {
                acc += w.widen() * v.widen();
            }
            *z = acc;
            max = max.max(acc);
        }
        let mut total = 0.0;
        for z in out.iter() {
            total += (z - max).exp();
        }
        let log_norm = max + total.ln();
        for z in out.iter_mut() {
            *z -= log_norm;
        }
    }
}

/// Per-pixel class probabilities.
pub fn forward<S: Scalar>(model: &LinearSegmenter<S>, x: &FeatureMap<S>) -> Result<ProbMap<S>> {
    model.check_input(x)?;
    let c = model.outputs();
    let mut buf = vec![0.0f64; c];
    let mut values = Vec::with_capacity(x.n_pixels() * c);
    for pixel in x.pixels() {
        model.log_probs(pixel, &mut buf);
        values.extend(buf.iter().map(|lp| S::cast(lp.exp())));
    }
    Ok(ProbMap::from_normalized(x.height(), x.width(), c, values))
}

/// Running sum of cross-entropy and its gradient over any number of images.
///
/// Sums are kept in `f64`; [`CeAccumulator::mean`] divides by the number
/// of contributing pixels.
#[derive(Clone, Debug)]
pub struct CeAccumulator {
    outputs: usize,
    dim: usize,
    loss: f64,
    count: usize,
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
    scratch: Vec<f64>,
}

impl CeAccumulator {
    pub fn new(outputs: usize, dim: usize) -> Self {
        Self {
            outputs,
            dim,
            loss: 0.0,
            count: 0,
            grad_w: vec![0.0; outputs * dim],
            grad_b: vec![0.0; outputs],
            scratch: vec![0.0; outputs],
        }
    }

    pub fn for_model<S: Scalar>(model: &LinearSegmenter<S>) -> Self {
        Self::new(model.outputs(), model.dim())
    }

    /// Adds every non-ignore pixel of one image.
    pub fn add<S: Scalar>(
        &mut self,
        model: &LinearSegmenter<S>,
        x: &FeatureMap<S>,
        y: &LabelMap,
    ) -> Result<()> {
        model.check_input(x)?;
        if model.outputs() != self.outputs || model.dim() != self.dim {
            return Err(Error::Shape("accumulator built for a different model".into()));
        }
        if !y.same_extent(x.height(), x.width()) {
            return Err(Error::Shape(format!(
                "labels {}x{} vs features {}x{}",
                y.height(),
                y.width(),
                x.height(),
                x.width()
            )));
        }
        let d = self.dim;
        for (pixel, &label) in x.pixels().zip(y.values()) {
            if label == IGNORE_ID {
                continue;
            }
            let label = label as usize;
            if label >= self.outputs {
                return Err(Error::InvalidValue(format!(
                    "label {label} outside {} output channels",
                    self.outputs
                )));
            }
            model.log_probs(pixel, &mut self.scratch);
            self.loss -= self.scratch[label];
            self.count += 1;
            for c in 0..self.outputs {
                let delta = self.scratch[c].exp() - if c == label { 1.0 } else { 0.0 };
                self.grad_b[c] += delta;
                let row = &mut self.grad_w[c * d..(c + 1) * d];
                for (g, v) in row.iter_mut().zip(pixel) {
                    *g += delta * v.widen();
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn loss_sum(&self) -> f64 {
        self.loss
    }

    /// Pixel-mean loss and gradient; `None` when no pixel contributed.
    pub fn mean<S: Scalar>(&self) -> Option<(f64, Params<S>)> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let grad = Params {
            outputs: self.outputs,
            dim: self.dim,
            weights: self.grad_w.iter().map(|g| S::cast(g / n)).collect(),
            bias: self.grad_b.iter().map(|g| S::cast(g / n)).collect(),
        };
        Some((self.loss / n, grad))
    }
}

/// Mean cross-entropy over non-ignore pixels and its exact gradient.
pub fn ce_loss_grad<S: Scalar>(
    model: &LinearSegmenter<S>,
    x: &FeatureMap<S>,
    y: &LabelMap,
) -> Result<(f64, Params<S>)> {
    let mut acc = CeAccumulator::for_model(model);
    acc.add(model, x, y)?;
    acc.mean()
        .ok_or_else(|| Error::Empty("every pixel carries the ignore label".into()))
}

/// Mean cross-entropy without the gradient.
pub fn ce_loss<S: Scalar>(model: &LinearSegmenter<S>, x: &FeatureMap<S>, y: &LabelMap) -> Result<f64> {
    ce_loss_grad(model, x, y).map(|(loss, _)| loss)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    pub(crate) fn random_model(outputs: usize, dim: usize, rng: &mut ChaCha8Rng) -> LinearSegmenter<f64> {
        let cs = ClassSpace::with_head(1, 1, outputs - 1).unwrap();
        let mut params = Params::zeros(outputs, dim);
        for v in params.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        LinearSegmenter::new(cs, params).unwrap()
    }

    pub(crate) fn random_features(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central finite-difference gradient of `loss` with respect to every parameter.
    pub(crate) fn finite_difference(
        model: &LinearSegmenter<f64>,
        loss: impl Fn(&LinearSegmenter<f64>) -> f64,
    ) -> Vec<f64> {
        let eps = 1e-6;
        let mut out = Vec::with_capacity(model.params().len());
        for i in 0..model.params().len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            *plus.params_mut().iter_mut().nth(i).unwrap() += eps;
            *minus.params_mut().iter_mut().nth(i).unwrap() -= eps;
            out.push((loss(&plus) - loss(&minus)) / (2.0 * eps));
        }
        out
    }

    pub(crate) fn max_relative_error(analytic: &Params<f64>, numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_model_is_uniform() {
        let cs = ClassSpace::with_head(2, 1, 2).unwrap();
        let model = LinearSegmenter::<f64>::full(cs, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = forward(&model, &random_features(2, 2, 3, &mut rng)).unwrap();
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shifting_logits_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(4, 3, &mut rng);
        let x = random_features(3, 3, 3, &mut rng);
        let mut shifted = model.clone();
        for b in shifted.params_mut().bias.iter_mut() {
            *b += 17.5;
        }
        let a = forward(&model, &x).unwrap();
        let b = forward(&shifted, &x).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(3, 2, &mut rng);
        let x = random_features(3, 3, 2, &mut rng);
        let p = forward(&model, &x).unwrap();
        let (w, b) = (&model.params().weights, &model.params().bias);
        for h in 0..3 {
            for col in 0..3 {
                let f = x.pixel(h, col);
                let logits: Vec<f64> = (0..3).map(|c| b[c] + w[c * 2] * f[0] + w[c * 2 + 1] * f[1]).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (c, l) in logits.iter().enumerate() {
                    assert!((p.pixel(h, col)[c] - l.exp() / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(3, 2, &mut rng);
        assert!(forward(&model, &random_features(2, 2, 3, &mut rng)).is_err());
    }

    #[test]
    fn uniform_model_loss_is_log_c() {
        let cs = ClassSpace::with_head(2, 1, 2).unwrap();
        let model = LinearSegmenter::<f64>::full(cs, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(2, 4, 2, &mut rng);
        let y = LabelMap::new(2, 4, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let loss = ce_loss(&model, &x, &y).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_model_has_vanishing_loss() {
        let cs = ClassSpace::new(1, 1).unwrap();
        let params = Params::from_parts(2, 1, vec![0.0, 0.0], vec![40.0, -40.0]).unwrap();
        let model = LinearSegmenter::new(cs, params).unwrap();
        let x = FeatureMap::new(1, 2, 1, vec![0.3, -0.4]).unwrap();
        let y = LabelMap::filled(1, 2, 0).unwrap();
        assert!(ce_loss(&model, &x, &y).unwrap() < 1e-30);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(3, 2, &mut rng);
        let x = random_features(2, 2, 2, &mut rng);
        let y = LabelMap::filled(2, 2, IGNORE_ID).unwrap();
        assert!(matches!(ce_loss_grad(&model, &x, &y), Err(Error::Empty(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let model = random_model(4, 10, &mut rng);
            let x = random_features(2, 4, 10, &mut rng);
            let mut labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..4)).collect();
            labels[3] = IGNORE_ID;
            let y = LabelMap::new(2, 4, labels).unwrap();
            let (_, grad) = ce_loss_grad(&model, &x, &y).unwrap();
            let numeric = finite_difference(&model, |m| ce_loss(m, &x, &y).unwrap());
            assert!(max_relative_error(&grad, &numeric) < 1e-4);
        }
    }

    #[test]
    fn expansion_copies_base_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cs = ClassSpace::with_head(3, 2, 4).unwrap();
        let mut base = LinearSegmenter::<f64>::base(cs, 2);
        for v in base.params_mut().iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let full = LinearSegmenter::expand_from_base(&base, cs).unwrap();
        assert_eq!(full.outputs(), 7);
        assert_eq!(&full.params().weights[..6], &base.params().weights[..]);
        assert!(full.params().weights[6..].iter().all(|&v| v == 0.0));
        assert_eq!(&full.params().bias[..3], &base.params().bias[..]);
    }
}
