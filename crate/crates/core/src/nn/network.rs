use rand::RngCore;

use super::layer::{Layer, LayerGrad, LayerSpec, Saved};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Probabilities below this are clamped before taking the logarithm.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// A feed-forward classifier ending in a softmax layer.
///
/// Shapes are fixed at construction; an ill-shaped layer list never produces
/// a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

struct Trace {
    saved: Vec<Saved>,
    output: Vec<f64>,
}

impl NetworkModel {
    /// Builds a network for per-sample `input_shape`, initialising weights
    /// uniformly in `±sqrt(6 / (fan_in + fan_out))` from `seed`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        match specs.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(Error::Shape("the last layer must be softmax".into())),
        }
        if specs[..specs.len() - 1].contains(&LayerSpec::Softmax) {
            return Err(Error::Shape("softmax is only supported as the last layer".into()));
        }
        let mut rng = seed::stream(seed, "init");
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::new(*spec, &shape, &mut rng)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", spec.kind())))?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Reassembles a model from stored parameters, re-validating every shape.
    pub fn from_parts(
        input_shape: &[usize],
        specs: &[LayerSpec],
        params: Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut model = Self::new(input_shape, specs, 0)?;
        if params.len() != model.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter sets for {} layers",
                params.len(),
                model.layers.len()
            )));
        }
        for (i, (layer, (w, b))) in model.layers.iter_mut().zip(params).enumerate() {
            if w.len() != layer.weights.len() || b.len() != layer.bias.len() {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) expects {}+{} parameters, got {}+{}",
                    layer.spec.kind(),
                    layer.weights.len(),
                    layer.bias.len(),
                    w.len(),
                    b.len()
                )));
            }
            layer.weights = w;
            layer.bias = b;
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_shape[0])
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() < 2 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match network input [n, {}]",
                batch.shape(),
                self.input_shape
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(batch.batch_size())
    }

    fn run(
        &self,
        batch: &Tensor,
        mut dropout_rng: Option<&mut dyn RngCore>,
        keep: bool,
    ) -> Result<Trace> {
        let n = self.check_batch(batch)?;
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut current: Vec<f64> = batch.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let rng = dropout_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let (out, s) = layer.forward(&current, n, rng, keep);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow {
                    layer: i,
                    kind: layer.spec.kind(),
                });
            }
            saved.push(s);
            current = out;
        }
        Ok(Trace {
            saved,
            output: current,
        })
    }

    /// Inference-mode loss together with the piecewise-linear branch taken at
    /// every relu input and max-pool window.
    pub(crate) fn loss_and_branches(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<usize>)> {
        let n = self.check_batch(batch)?;
        check_labels(labels, n, self.num_classes())?;
        let trace = self.run(batch, None, true)?;
        let mut branches = Vec::new();
        for (layer, saved) in self.layers.iter().zip(&trace.saved) {
            match (layer.spec, saved) {
                (LayerSpec::Relu, Saved::Input(x)) => {
                    branches.extend(x.iter().map(|&v| usize::from(v > 0.0)));
                }
                (LayerSpec::MaxPool2x2, Saved::Argmax(idx)) => branches.extend_from_slice(idx),
                _ => {}
            }
        }
        let w = vec![1.0 / n as f64; n];
        Ok((weighted_loss(&trace.output, labels, &w, self.num_classes()), branches))
    }

    /// Per-sample class probabilities, shape `[n, num_classes]`.
    ///
    /// Dropout masks are drawn from `rng` in training mode only.
    pub fn forward(&self, batch: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
        let dropout = match mode {
            Mode::Training => Some(rng),
            Mode::Inference => None,
        };
        let trace = self.run(batch, dropout, false)?;
        Ok(Tensor::from_parts(
            vec![batch.batch_size(), self.num_classes()],
            trace.output,
        ))
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let trace = self.run(batch, None, false)?;
        Ok(Tensor::from_parts(
            vec![batch.batch_size(), self.num_classes()],
            trace.output,
        ))
    }

    /// Probability of class 1 for every sample, evaluated in chunks of `chunk`.
    pub fn predict_positive(&self, batch: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        let n = self.check_batch(batch)?;
        let mut out = Vec::with_capacity(n);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let probs = if start == 0 && end == n {
                self.predict(batch)?
            } else {
                self.predict(&batch.select(&idx)?)?
            };
            let k = self.num_classes();
            out.extend(probs.data().chunks(k).map(|r| r[1]));
            start = end;
        }
        Ok(out)
    }

    /// Loss and parameter gradients (one entry per layer, `None` for
    /// parameter-free layers). The forward pass uses `mode`.
    pub fn gradients(
        &self,
        batch: &Tensor,
        labels: &[usize],
        weights: Option<&[f64]>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<Option<LayerGrad>>)> {
        let n = self.check_batch(batch)?;
        check_labels(labels, n, self.num_classes())?;
        let dropout = match mode {
            Mode::Training => Some(rng),
            Mode::Inference => None,
        };
        let trace = self.run(batch, dropout, true)?;
        let k = self.num_classes();
        let sample_weights = normalized_weights(weights, n)?;
        let loss = weighted_loss(&trace.output, labels, &sample_weights, k);

        // Softmax and cross-entropy are differentiated together: d loss / d logits = w·(p − onehot).
        let mut grad: Vec<f64> = trace.output.clone();
        for (i, row) in grad.chunks_mut(k).enumerate() {
            row[labels[i]] -= 1.0;
            for v in row.iter_mut() {
                *v *= sample_weights[i];
            }
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        for i in (0..last).rev() {
            let layer = &self.layers[i];
            let need_input = self.layers[..i].iter().any(Layer::has_params);
            let (gx, g) = layer.backward(&grad, &trace.saved[i], n, need_input);
            if let Some(g) = &g {
                if g.weights.iter().chain(&g.bias).any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        layer: i,
                        kind: layer.spec.kind(),
                    });
                }
            }
            grads[i] = g;
            if !need_input {
                break;
            }
            grad = gx;
        }
        Ok((loss, grads))
    }

    /// One SGD step on `batch`. Returns the loss measured before the update.
    pub fn train_step(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        lr: f64,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        self.train_step_weighted(batch, labels, None, lr, rng)
    }

    pub fn train_step_weighted(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        weights: Option<&[f64]>,
        lr: f64,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let (loss, grads) = self.gradients(batch, labels, weights, Mode::Training, rng)?;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= lr * d;
                }
                for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                    *b -= lr * d;
                }
            }
        }
        Ok(loss)
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Weights rescaled to sum to one; uniform `1/n` when none are given.
fn normalized_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::Shape(format!("{} sample weights for {n} samples", w.len())));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Config("sample weights must be non-negative with a positive sum".into()));
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

fn weighted_loss(probs: &[f64], labels: &[usize], weights: &[f64], k: usize) -> f64 {
    probs
        .chunks(k)
        .zip(labels)
        .zip(weights)
        .map(|((row, &l), w)| -w * row[l].max(LOG_EPSILON).ln())
        .sum()
}

/// Mean of `-ln p(true class)` over the batch; probabilities are clamped at
/// [`LOG_EPSILON`] so a zero probability yields a large finite loss.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    weighted_cross_entropy(probs, labels, None)
}

/// Cross-entropy with per-sample weights, normalised by their sum.
pub fn weighted_cross_entropy(probs: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    if probs.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "probabilities must be [n, classes], got {:?}",
            probs.shape()
        )));
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    check_labels(labels, n, k)?;
    let w = normalized_weights(weights, n)?;
    Ok(weighted_loss(probs.data(), labels, &w, k))
}
