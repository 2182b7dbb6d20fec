//! Minibatch gradient descent with momentum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Head, Layer, Network, Normalization, STABLE, UNSTABLE};
use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Widths of the hidden ReLU layers.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub loss: Loss,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainingConfig {
    pub fn classifier(hidden: Vec<usize>, seed: u64) -> Self {
        Self {
            hidden,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            loss: Loss::CrossEntropy,
            seed,
        }
    }

    pub fn regressor(hidden: Vec<usize>, seed: u64) -> Self {
        Self {
            loss: Loss::MeanSquaredError,
            ..Self::classifier(hidden, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidTraining("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidTraining("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidTraining("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidTraining("momentum must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidTraining("hidden layers need >= 1 neuron".into()));
        }
        Ok(())
    }
}

/// Supervision signal: class labels (`true` = stable) or regression targets.
#[derive(Debug, Clone)]
pub enum Targets<T> {
    /// Stability flags; `true` marks a stable sample.
    Labels(Vec<bool>),
    Values(Vec<T>),
}

impl<T> Targets<T> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean training loss of every epoch, in normalized target units.
    pub epoch_losses: Vec<f64>,
}

struct Grads<T> {
    w: Vec<Matrix<T>>,
    b: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    fn zeros_like(layers: &[Layer<T>]) -> Self {
        Self {
            w: layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            b: layers.iter().map(|l| vec![T::zero(); l.out_dim()]).collect(),
        }
    }
}

/// Trains a classifier (cross-entropy) or regressor (MSE) from raw features.
///
/// Feature standardization is computed from the data and stored in the
/// returned network. Regression targets are standardized during training and
/// the scaling is folded back into the output layer.
pub fn train<T: Scalar>(
    inputs: &[Vec<T>],
    targets: &Targets<T>,
    cfg: &TrainingConfig,
) -> Result<(Network<T>, TrainingReport)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidTraining("empty dataset".into()));
    }
    if targets.len() != inputs.len() {
        return Err(Error::Dimension {
            context: "targets vs inputs",
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let dim = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
        return Err(Error::Dimension {
            context: "training input",
            expected: dim,
            got: bad.len(),
        });
    }
    let head = match (cfg.loss, targets) {
        (Loss::CrossEntropy, Targets::Labels(_)) => Head::Classifier,
        (Loss::MeanSquaredError, Targets::Values(_)) => Head::Regressor,
        _ => {
            return Err(Error::InvalidTraining(
                "cross-entropy needs labels, mean-squared-error needs values".into(),
            ))
        }
    };

    let normalization = standardize(inputs);
    let xs: Vec<Vec<T>> = inputs.iter().map(|x| normalization.apply(x)).collect();
    let (y_mean, y_std, ys) = match targets {
        Targets::Values(v) => {
            let n = T::lit(v.len() as f64);
            let mean = v.iter().copied().sum::<T>() / n;
            let var = v.iter().map(|&y| (y - mean) * (y - mean)).sum::<T>() / n;
            let std = if var.sqrt() > T::lit(1e-12) {
                var.sqrt()
            } else {
                T::one()
            };
            (mean, std, v.iter().map(|&y| (y - mean) / std).collect())
        }
        Targets::Labels(_) => (T::zero(), T::one(), Vec::new()),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(head.output_dim());
    let mut layers: Vec<Layer<T>> = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.gen_range(-limit..limit)))
                .collect();
            Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data),
                bias: vec![T::zero(); fan_out],
            }
        })
        .collect();

    let lr = T::lit(cfg.learning_rate);
    let mom = T::lit(cfg.momentum);
    let mut velocity = Grads::zeros_like(&layers);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(&layers);
            for &i in batch {
                let target = match targets {
                    Targets::Labels(l) => Target::Class(l[i]),
                    Targets::Values(_) => Target::Value(ys[i]),
                };
                total = total + backprop(&layers, &xs[i], target, &mut grads);
            }
            let scale = lr / T::lit(batch.len() as f64);
            for (k, layer) in layers.iter_mut().enumerate() {
                update(
                    layer.weight.as_mut_slice(),
                    velocity.w[k].as_mut_slice(),
                    grads.w[k].as_slice(),
                    mom,
                    scale,
                );
                update(&mut layer.bias, &mut velocity.b[k], &grads.b[k], mom, scale);
            }
        }
        let mean = (total / T::lit(xs.len() as f64)).to_f64_lossy();
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, last_loss });
        }
        last_loss = mean;
        epoch_losses.push(mean);
    }

    if head == Head::Regressor {
        let out = layers.last_mut().expect("output layer");
        for c in 0..out.in_dim() {
            out.weight.set(0, c, out.weight.get(0, c) * y_std);
        }
        out.bias[0] = out.bias[0] * y_std + y_mean;
    }
    let net = Network::new(dim, head, normalization, layers)?;
    Ok((net, TrainingReport { epoch_losses }))
}

fn update<T: Scalar>(param: &mut [T], vel: &mut [T], grad: &[T], mom: T, scale: T) {
    for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = mom * *v - scale * g;
        *p = *p + *v;
    }
}

#[derive(Clone, Copy)]
enum Target<T> {
    Class(bool),
    Value(T),
}

/// Accumulates parameter gradients of one sample; returns its loss.
fn backprop<T: Scalar>(layers: &[Layer<T>], x: &[T], target: Target<T>, g: &mut Grads<T>) -> T {
    let last = layers.len() - 1;
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    let mut pre: Vec<Vec<T>> = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let z = layer.apply(&acts[k]);
        if k < last {
            acts.push(z.iter().map(|v| v.relu()).collect());
        }
        pre.push(z);
    }
    let out = &pre[last];
    let (loss, mut delta) = match target {
        Target::Class(stable) => {
            let m = out[STABLE].max(out[UNSTABLE]);
            let e0 = (out[STABLE] - m).exp();
            let e1 = (out[UNSTABLE] - m).exp();
            let sum = e0 + e1;
            let p = [e0 / sum, e1 / sum];
            let y = if stable { STABLE } else { UNSTABLE };
            let loss = m + sum.ln() - out[y];
            let mut d = p.to_vec();
            d[y] = d[y] - T::one();
            (loss, d)
        }
        Target::Value(y) => {
            let r = out[0] - y;
            (r * r, vec![T::lit(2.0) * r])
        }
    };
    for k in (0..layers.len()).rev() {
        let input = &acts[k];
        for (r, &d) in delta.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            g.b[k][r] = g.b[k][r] + d;
            let row = g.w[k].row_mut(r);
            for (gw, &a) in row.iter_mut().zip(input) {
                *gw = *gw + d * a;
            }
        }
        if k > 0 {
            let mut prev = layers[k].weight.tmatvec(&delta);
            for (p, &z) in prev.iter_mut().zip(&pre[k - 1]) {
                if z <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
    }
    loss
}

fn standardize<T: Scalar>(inputs: &[Vec<T>]) -> Normalization<T> {
    let dim = inputs[0].len();
    let n = T::lit(inputs.len() as f64);
    let mut shift = vec![T::zero(); dim];
    for x in inputs {
        for (s, &v) in shift.iter_mut().zip(x) {
            *s = *s + v;
        }
    }
    shift.iter_mut().for_each(|s| *s = *s / n);
    let mut scale = vec![T::zero(); dim];
    for x in inputs {
        for ((s, &v), &m) in scale.iter_mut().zip(x).zip(&shift) {
            *s = *s + (v - m) * (v - m);
        }
    }
    for s in scale.iter_mut() {
        let sd = (*s / n).sqrt();
        *s = if sd > T::lit(1e-9) { sd } else { T::one() };
    }
    Normalization { shift, scale }
}
