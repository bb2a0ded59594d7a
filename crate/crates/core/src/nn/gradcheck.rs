use rand::seq::index::sample;

use super::network::{Mode, NetworkModel};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Parameters per tensor (weights or bias of one layer) probed by
/// [`gradient_check`]; smaller tensors are checked exhaustively.
pub const MAX_PROBES_PER_TENSOR: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub probes: usize,
    /// Probes whose ±epsilon perturbation switched a relu sign or a max-pool
    /// winner; the loss is not differentiable there and they are excluded.
    pub kinks_skipped: usize,
}

/// Largest relative disagreement between backpropagated gradients and
/// central differences, `|a − n| / max(|a|, |n|, 1e-8)`, over a seeded sample
/// of parameters. Dropout is inactive throughout.
pub fn gradient_check(model: &NetworkModel, batch: &Tensor, labels: &[usize], epsilon: f64) -> Result<f64> {
    gradient_check_report(model, batch, labels, epsilon).map(|r| r.max_relative_error)
}

pub fn gradient_check_report(
    model: &NetworkModel,
    batch: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradientCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let mut unused = seed::rng(0);
    let (_, grads) = model.gradients(batch, labels, None, Mode::Inference, &mut unused)?;
    let (_, base_branches) = model.loss_and_branches(batch, labels)?;
    let mut probe_rng = seed::stream(0, "gradient-check");
    let mut work = model.clone();

    let mut report = GradientCheckReport {
        max_relative_error: 0.0,
        probes: 0,
        kinks_skipped: 0,
    };
    for (li, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for (is_bias, analytic) in [(false, &grad.weights), (true, &grad.bias)] {
            let len = analytic.len();
            let picks: Vec<usize> = if len <= MAX_PROBES_PER_TENSOR {
                (0..len).collect()
            } else {
                sample(&mut probe_rng, len, MAX_PROBES_PER_TENSOR).into_vec()
            };
            for idx in picks {
                let original = param(&work, li, is_bias, idx);
                set_param(&mut work, li, is_bias, idx, original + epsilon);
                let (plus, plus_branches) = work.loss_and_branches(batch, labels)?;
                set_param(&mut work, li, is_bias, idx, original - epsilon);
                let (minus, minus_branches) = work.loss_and_branches(batch, labels)?;
                set_param(&mut work, li, is_bias, idx, original);
                if plus_branches != base_branches || minus_branches != base_branches {
                    report.kinks_skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * epsilon);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.max_relative_error = report.max_relative_error.max(rel);
                report.probes += 1;
            }
        }
    }
    Ok(report)
}

fn param(m: &NetworkModel, layer: usize, bias: bool, idx: usize) -> f64 {
    let l = &m.layers()[layer];
    if bias {
        l.bias()[idx]
    } else {
        l.weights()[idx]
    }
}

fn set_param(m: &mut NetworkModel, layer: usize, bias: bool, idx: usize, v: f64) {
    let l = &mut m.layers_mut()[layer];
    if bias {
        l.bias_mut()[idx] = v;
    } else {
        l.weights_mut()[idx] = v;
    }
}

/// Layer families exercised by [`gradient_check_suite`] with their tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeNetwork {
    /// dense, relu, dropout, softmax
    Dense,
    /// conv2d, relu, maxpool, dense, softmax
    Conv,
}

impl ProbeNetwork {
    pub fn name(self) -> &'static str {
        match self {
            ProbeNetwork::Dense => "dense/relu/dropout/softmax",
            ProbeNetwork::Conv => "conv2d/relu/maxpool/dense/softmax",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            ProbeNetwork::Dense => 1e-4,
            ProbeNetwork::Conv => 1e-3,
        }
    }

    fn build(self, seed: u64) -> Result<(NetworkModel, Vec<usize>)> {
        use super::layer::LayerSpec::*;
        match self {
            ProbeNetwork::Dense => Ok((
                NetworkModel::new(
                    &[5],
                    &[
                        Dense { in_units: 5, out_units: 8 },
                        Relu,
                        Dropout { rate: 0.5 },
                        Dense { in_units: 8, out_units: 3 },
                        Softmax,
                    ],
                    seed,
                )?,
                vec![6, 5],
            )),
            ProbeNetwork::Conv => Ok((
                NetworkModel::new(
                    &[2, 10, 10],
                    &[
                        Conv2d { in_channels: 2, out_channels: 3, kernel_size: 3, stride: 1 },
                        Relu,
                        MaxPool2x2,
                        Conv2d { in_channels: 3, out_channels: 4, kernel_size: 2, stride: 1 },
                        Relu,
                        Dense { in_units: 36, out_units: 2 },
                        Softmax,
                    ],
                    seed,
                )?,
                vec![3, 2, 10, 10],
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteResult {
    pub network: ProbeNetwork,
    pub seed: u64,
    pub report: GradientCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < self.network.tolerance()
    }
}

/// Gradient checks of both probe networks for seeds `0..seeds`, each on a
/// random batch with random labels.
pub fn gradient_check_suite(seeds: u64, epsilon: f64) -> Result<Vec<SuiteResult>> {
    use rand::Rng;
    let mut out = Vec::new();
    for network in [ProbeNetwork::Dense, ProbeNetwork::Conv] {
        for s in 0..seeds {
            let (model, shape) = network.build(s)?;
            let mut rng = seed::stream(s, "gradient-check-data");
            let n: usize = shape.iter().product();
            let batch = Tensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let k = model.num_classes();
            let labels: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(0..k)).collect();
            out.push(SuiteResult {
                network,
                seed: s,
                report: gradient_check_report(&model, &batch, &labels, epsilon)?,
            });
        }
    }
    Ok(out)
}
