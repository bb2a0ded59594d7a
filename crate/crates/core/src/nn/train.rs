use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::NetworkModel;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassWeighting {
    None,
    /// Each sample weighted by `n / (classes · n_class)`.
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            class_weighting: ClassWeighting::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mini-batch SGD over `samples` for `config.epochs` epochs.
///
/// Runs exactly `epochs · ceil(n / batch_size)` steps; shuffling and dropout
/// masks are drawn from streams of `config.seed`.
pub fn train(
    mut model: NetworkModel,
    samples: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<NetworkModel> {
    config.validate()?;
    let n = samples.batch_size();
    if samples.is_empty() || n == 0 {
        return Err(Error::Empty("no training samples".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    let k = model.num_classes();
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Shape(format!("label {l} out of range for {k} classes")));
        }
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        log::warn!("training on a single-class sample set ({n} samples)");
    }
    let sample_weights: Option<Vec<f64>> = match config.class_weighting {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => {
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            Some(
                labels
                    .iter()
                    .map(|&l| n as f64 / (present * counts[l] as f64))
                    .collect(),
            )
        }
    };

    let mut order_rng = seed::stream(config.seed, "shuffle");
    let mut dropout_rng = seed::stream(config.seed, "dropout");
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = samples.select(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let w: Option<Vec<f64>> = sample_weights
                .as_ref()
                .map(|sw| chunk.iter().map(|&i| sw[i]).collect());
            epoch_loss += model.train_step_weighted(
                &batch,
                &batch_labels,
                w.as_deref(),
                config.learning_rate,
                &mut dropout_rng,
            )? * chunk.len() as f64;
        }
        log::debug!("epoch {epoch}: mean loss {:.6}", epoch_loss / n as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::Rng;
    use rand_distr_free::normal;

    /// Box-Muller so the test does not depend on the implementation's sampling helpers.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal(rng: &mut impl Rng) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    fn blobs(seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = crate::seed::rng(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let l = i % 2;
            let c = if l == 1 { 1.5 } else { -1.5 };
            data.push(c + 0.6 * normal(&mut rng));
            data.push(c + 0.6 * normal(&mut rng));
            labels.push(l);
        }
        (Tensor::new(vec![200, 2], data).unwrap(), labels)
    }

    fn net(seed: u64) -> NetworkModel {
        NetworkModel::new(
            &[2],
            &[
                LayerSpec::Dense { in_units: 2, out_units: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_units: 8, out_units: 2 },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    fn accuracy(model: &NetworkModel, x: &Tensor, y: &[usize]) -> f64 {
        let p = model.predict_positive(x, 64).unwrap();
        p.iter().zip(y).filter(|(p, &l)| (**p >= 0.5) == (l == 1)).count() as f64 / y.len() as f64
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (x, y) = blobs(1);
        let m = net(3);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(train(m.clone(), &x, &y, &cfg).unwrap(), m);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(2);
        // nearest-centroid baseline on the same data
        let mut centroids = [[0.0; 2]; 2];
        let mut counts = [0.0; 2];
        for (i, &l) in y.iter().enumerate() {
            centroids[l][0] += x.row(i)[0];
            centroids[l][1] += x.row(i)[1];
            counts[l] += 1.0;
        }
        for l in 0..2 {
            centroids[l][0] /= counts[l];
            centroids[l][1] /= counts[l];
        }
        let nc_correct = y
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let d = |c: [f64; 2]| (x.row(*i)[0] - c[0]).powi(2) + (x.row(*i)[1] - c[1]).powi(2);
                (d(centroids[1]) < d(centroids[0])) == (l == 1)
            })
            .count() as f64
            / y.len() as f64;
        assert!(nc_correct >= 0.9, "baseline {nc_correct}");

        let cfg = TrainConfig { epochs: 50, learning_rate: 0.1, batch_size: 16, seed: 5, ..Default::default() };
        let m = train(net(4), &x, &y, &cfg).unwrap();
        let acc = accuracy(&m, &x, &y);
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let (x, y) = blobs(3);
        let cfg = TrainConfig { epochs: 3, seed: 9, ..Default::default() };
        let a = train(net(1), &x, &y, &cfg).unwrap();
        let b = train(net(1), &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repeated_steps_are_reproducible() {
        let (x, y) = blobs(4);
        let batch = x.select(&(0..8).collect::<Vec<_>>()).unwrap();
        let run = || {
            let mut m = net(2);
            let mut rng = crate::seed::rng(1);
            let a = m.train_step(&batch, &y[..8], 0.05, &mut rng).unwrap();
            let b = m.train_step(&batch, &y[..8], 0.05, &mut rng).unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let (x, y) = blobs(5);
        let cfg = TrainConfig::default();
        assert!(train(net(0), &x, &y[..10], &cfg).is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(train(net(0), &x, &y, &bad), Err(Error::Config(_))));
        let mut rng = crate::seed::rng(0);
        let _ = rng.gen::<u8>();
        // single-class data trains (with a warning)
        let ones = vec![1; y.len()];
        assert!(train(net(0), &x, &ones, &TrainConfig { epochs: 1, ..Default::default() }).is_ok());
    }
}
