//! Small from-scratch MLP: rectifier hidden layers, softmax or linear
//! output, cross-entropy training with seeded mini-batch SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Softmax,
    Linear,
}

/// Fully connected layer, weights row-major (rows = outputs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputKind,
    /// Per-input divisors applied before the first layer, so the stored
    /// model reproduces training-time normalization exactly.
    pub input_scale: Vec<f64>,
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

impl Mlp {
    /// Seeded He-style initialization.
    pub fn new(layer_sizes: &[usize], output: OutputKind, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("MLP needs at least input and output sizes"));
        }
        let mut rng = SimRng::substream(seed, 0x4d4c50, 0);
        let mut layers = Vec::new();
        for win in layer_sizes.windows(2) {
            let (cols, rows) = (win[0], win[1]);
            let std = (2.0 / cols as f64).sqrt();
            let w = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
            layers.push(Dense { rows, cols, w, b: vec![0.0; rows] });
        }
        Ok(Mlp { layers, output, input_scale: vec![1.0; layer_sizes[0]] })
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map(|l| l.rows).unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_len()];
        sizes.extend(self.layers.iter().map(|l| l.rows));
        sizes
    }

    /// Forward pass. Softmax output sums to 1; linear output is raw.
    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.input_len(), "feature length mismatch");
        let mut x: Vec<f64> = features
            .iter()
            .zip(&self.input_scale)
            .map(|(f, s)| f / s)
            .collect();
        let mut buf = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut buf);
            if i < last {
                for z in buf.iter_mut() {
                    if *z < 0.0 {
                        *z = 0.0;
                    }
                }
            }
            std::mem::swap(&mut x, &mut buf);
        }
        if self.output == OutputKind::Softmax {
            softmax(&mut x);
        }
        x
    }

    /// Forward keeping post-activation values per layer, for backprop.
    fn forward_cached(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let x0: Vec<f64> = features
            .iter()
            .zip(&self.input_scale)
            .map(|(f, s)| f / s)
            .collect();
        let mut acts = vec![x0];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(acts.last().unwrap(), &mut z);
            if i < last {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Mean cross-entropy of the batch (softmax output only).
    pub fn cross_entropy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let probs = self.forward(x);
            total -= probs[y].max(1e-300).ln();
        }
        total / features.len() as f64
    }

    /// Accumulates the gradient of mean cross-entropy over the batch into
    /// `grads` (same shapes as the layers). Returns the batch loss.
    pub fn backprop_batch(&self, features: &[Vec<f64>], labels: &[usize], grads: &mut Gradients) -> f64 {
        grads.zero();
        let n = features.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let acts = self.forward_cached(x);
            let mut probs = acts.last().unwrap().clone();
            softmax(&mut probs);
            loss -= probs[y].max(1e-300).ln();

            // delta at the output: (p - onehot)/n
            let mut delta: Vec<f64> = probs.iter().enumerate()
                .map(|(i, p)| (p - if i == y { 1.0 } else { 0.0 }) / n)
                .collect();

            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let gw = &mut grads.w[li];
                let gb = &mut grads.b[li];
                for r in 0..layer.rows {
                    gb[r] += delta[r];
                    let row = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                    for (g, xi) in row.iter_mut().zip(input) {
                        *g += delta[r] * xi;
                    }
                }
                if li > 0 {
                    let mut next = vec![0.0; layer.cols];
                    for r in 0..layer.rows {
                        let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                        for (nd, wi) in next.iter_mut().zip(row) {
                            *nd += delta[r] * wi;
                        }
                    }
                    // rectifier derivative: activations of the previous layer
                    for (nd, a) in next.iter_mut().zip(&acts[li]) {
                        if *a <= 0.0 {
                            *nd = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        loss / n
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.w.iter().zip(&grads.b)) {
            for (w, g) in layer.w.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, g) in layer.b.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mlp: Mlp = serde_json::from_reader(file)?;
        for (i, layer) in mlp.layers.iter().enumerate() {
            if layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.rows {
                return Err(Error::config(format!("model layer {i} has inconsistent shapes")));
            }
        }
        Ok(mlp)
    }
}

/// Gradient buffers matching an `Mlp`'s layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn like(mlp: &Mlp) -> Self {
        Gradients {
            w: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn zero(&mut self) {
        for g in self.w.iter_mut().chain(self.b.iter_mut()) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Per-epoch record emitted by training.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Seeded mini-batch SGD over a labeled dataset.
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 400, lr: 0.05, batch_size: 64, seed: 0 }
    }
}

pub fn train(
    mlp: &mut Mlp,
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if features.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if features.len() != labels.len() {
        return Err(Error::config("features/labels length mismatch"));
    }
    let mut rng = SimRng::substream(cfg.seed, 0x534744, 0);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut grads = Gradients::like(mlp);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_x: Vec<Vec<f64>> = Vec::new();
    let mut batch_y: Vec<usize> = Vec::new();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(features[i].clone());
                batch_y.push(labels[i]);
            }
            epoch_loss += mlp.backprop_batch(&batch_x, &batch_y, &mut grads);
            mlp.sgd_step(&grads, cfg.lr);
            batches += 1.0;
        }
        history.push(EpochStats { epoch, train_loss: epoch_loss / batches });
    }
    Ok(history)
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(mlp: &Mlp, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        if argmax(&mlp.forward(x)) == y {
            correct += 1;
        }
    }
    correct as f64 / features.len() as f64
}

/// Index of the maximum, ties broken by the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut mlp = Mlp::new(&[4, 8, 5], OutputKind::Softmax, 0).unwrap();
        for layer in mlp.layers.iter_mut() {
            layer.w.iter_mut().for_each(|w| *w = 0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let out = mlp.forward(&[1.0, -2.0, 0.5, 3.0]);
        for p in &out {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mlp = Mlp::new(&[6, 16, 5], OutputKind::Softmax, 3).unwrap();
        let out = mlp.forward(&[0.3, -1.0, 2.0, 0.0, 4.0, -0.5]);
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(out.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut mlp = Mlp::new(&[6, 12, 10, 4], OutputKind::Softmax, 7).unwrap();
        let mut rng = SimRng::seed_from(11);
        let features: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| rng.normal(0.0, 1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..10).map(|_| rng.index(4)).collect();

        let mut grads = Gradients::like(&mlp);
        mlp.backprop_batch(&features, &labels, &mut grads);

        let eps = 1e-5;
        for li in 0..mlp.layers.len() {
            for wi in 0..mlp.layers[li].w.len() {
                let orig = mlp.layers[li].w[wi];
                mlp.layers[li].w[wi] = orig + eps;
                let lp = mlp.cross_entropy(&features, &labels);
                mlp.layers[li].w[wi] = orig - eps;
                let lm = mlp.cross_entropy(&features, &labels);
                mlp.layers[li].w[wi] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.w[li][wi];
                let tol = 1e-6 * analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "layer {li} weight {wi}: analytic {analytic} vs numeric {numeric}"
                );
            }
            for bi in 0..mlp.layers[li].b.len() {
                let orig = mlp.layers[li].b[bi];
                mlp.layers[li].b[bi] = orig + eps;
                let lp = mlp.cross_entropy(&features, &labels);
                mlp.layers[li].b[bi] = orig - eps;
                let lm = mlp.cross_entropy(&features, &labels);
                mlp.layers[li].b[bi] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.b[li][bi];
                let tol = 1e-6 * analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "layer {li} bias {bi}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn learns_linearly_separable_classes() {
        let mut rng = SimRng::seed_from(5);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let x = rng.normal(0.0, 1.0);
            let y = rng.normal(0.0, 1.0);
            let label = usize::from(x + y > 0.0);
            features.push(vec![x, y]);
            labels.push(label);
        }
        let mut mlp = Mlp::new(&[2, 16, 2], OutputKind::Softmax, 1).unwrap();
        train(&mut mlp, &features, &labels, &TrainConfig { epochs: 400, lr: 0.1, batch_size: 32, seed: 2 }).unwrap();
        assert!(accuracy(&mlp, &features, &labels) >= 0.99);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut rng = SimRng::seed_from(9);
        let features: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]).collect();
        let labels: Vec<usize> = features.iter().map(|f| usize::from(f[0] > 0.0)).collect();
        let cfg = TrainConfig { epochs: 20, lr: 0.1, batch_size: 16, seed: 4 };
        let mut a = Mlp::new(&[2, 8, 2], OutputKind::Softmax, 3).unwrap();
        let mut b = Mlp::new(&[2, 8, 2], OutputKind::Softmax, 3).unwrap();
        train(&mut a, &features, &labels, &cfg).unwrap();
        train(&mut b, &features, &labels, &cfg).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.2, 0.2, 0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
