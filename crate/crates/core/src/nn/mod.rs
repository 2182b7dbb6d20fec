//! Feed-forward ReLU networks: evaluation, input gradients, training and file IO.
//!
//! A network is a chain of affine layers with ReLU between them and no
//! activation after the last layer. Inputs are normalized per feature with a
//! stored shift and scale before the first layer. The classifier head emits
//! two logits ordered `[stable, unstable]`; the regressor head emits a
//! single transient stability index estimate.

mod io;
mod train;

pub use io::{load_network, save_network};
pub use train::{train, Loss, Targets, TrainingConfig, TrainingReport};

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::{Error, Result, Scalar};

/// Index of the stable-class logit.
pub const STABLE: usize = 0;
/// Index of the unstable-class logit.
pub const UNSTABLE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "classifier-2-logit")]
    Classifier,
    #[serde(rename = "regressor-scalar")]
    Regressor,
}

impl Head {
    pub fn output_dim(self) -> usize {
        match self {
            Head::Classifier => 2,
            Head::Regressor => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::Dimension {
                context: "bias length vs weight rows",
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.out_dim())
            .map(|r| dot(self.weight.row(r), x) + self.bias[r])
            .collect()
    }
}

/// Per-feature affine normalization `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization<T> {
    pub shift: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Normalization<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![T::zero(); dim],
            scale: vec![T::one(); dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|s| *s == T::zero()) && self.scale.iter().all(|s| *s == T::one())
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(&v, (&sh, &sc))| (v - sh) / sc)
            .collect()
    }
}

/// Values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Pre-activation vector of every layer; the last entry is the output.
    pub pre: Vec<Vec<T>>,
    /// Post-activation vector of every hidden layer.
    pub post: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_dim: usize,
    head: Head,
    normalization: Normalization<T>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(
        input_dim: usize,
        head: Head,
        normalization: Normalization<T>,
        layers: Vec<Layer<T>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if normalization.shift.len() != input_dim || normalization.scale.len() != input_dim {
            return Err(Error::Dimension {
                context: "normalization length",
                expected: input_dim,
                got: normalization.shift.len().min(normalization.scale.len()),
            });
        }
        if normalization
            .scale
            .iter()
            .any(|s| !(s.is_finite() && *s > T::zero()))
        {
            return Err(Error::InvalidNetwork(
                "normalization scales must be finite and strictly positive".into(),
            ));
        }
        if normalization.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite normalization shift".into()));
        }
        let mut expected = input_dim;
        for layer in &layers {
            if layer.in_dim() != expected {
                return Err(Error::Dimension {
                    context: "layer input dimension",
                    expected,
                    got: layer.in_dim(),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension {
                    context: "bias length",
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidNetwork("non-finite weight or bias".into()));
            }
            expected = layer.out_dim();
        }
        if expected != head.output_dim() {
            return Err(Error::Dimension {
                context: "output dimension for head",
                expected: head.output_dim(),
                got: expected,
            });
        }
        Ok(Self {
            input_dim,
            head,
            normalization,
            layers,
        })
    }

    /// Network without input normalization.
    pub fn from_layers(head: Head, layers: Vec<Layer<T>>) -> Result<Self> {
        let input_dim = layers.first().map_or(0, Layer::in_dim);
        Self::new(input_dim, head, Normalization::identity(input_dim), layers)
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn head(&self) -> Head {
        self.head
    }

    pub fn normalization(&self) -> &Normalization<T> {
        &self.normalization
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Widths of the hidden (ReLU) layers.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::out_dim)
            .collect()
    }

    pub fn num_hidden_neurons(&self) -> usize {
        self.hidden_sizes().iter().sum()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = self.normalization.apply(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.relu());
            }
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let mut h = self.normalization.apply(x);
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            if i < last {
                h = z.iter().map(|v| v.relu()).collect();
                post.push(h.clone());
            }
            pre.push(z);
        }
        Ok(ForwardTrace { pre, post })
    }

    /// Stable-minus-unstable logit difference; positive means stable.
    pub fn margin(&self, x: &[T]) -> Result<T> {
        if self.head != Head::Classifier {
            return Err(Error::WrongHead {
                expected: "classifier",
            });
        }
        let out = self.forward(x)?;
        Ok(out[STABLE] - out[UNSTABLE])
    }

    /// Scalar objective: the margin for a classifier, the output for a regressor.
    pub fn objective(&self, x: &[T]) -> Result<T> {
        let out = self.forward(x)?;
        Ok(match self.head {
            Head::Classifier => out[STABLE] - out[UNSTABLE],
            Head::Regressor => out[0],
        })
    }

    /// Value and reverse-mode input gradient of [`Network::objective`].
    ///
    /// The ReLU derivative at exactly zero is taken as 0.
    pub fn input_gradient(&self, x: &[T]) -> Result<(T, Vec<T>)> {
        let trace = self.forward_trace(x)?;
        let out = trace.output();
        let (value, mut adj) = match self.head {
            Head::Classifier => {
                let mut seed = vec![T::zero(); 2];
                seed[STABLE] = T::one();
                seed[UNSTABLE] = -T::one();
                (out[STABLE] - out[UNSTABLE], seed)
            }
            Head::Regressor => (out[0], vec![T::one()]),
        };
        for k in (0..self.layers.len()).rev() {
            let mut g = self.layers[k].weight.tmatvec(&adj);
            if k > 0 {
                for (gi, &z) in g.iter_mut().zip(&trace.pre[k - 1]) {
                    if z <= T::zero() {
                        *gi = T::zero();
                    }
                }
            }
            adj = g;
        }
        for (gi, &s) in adj.iter_mut().zip(&self.normalization.scale) {
            *gi = *gi / s;
        }
        Ok((value, adj))
    }

    /// Equivalent network whose first layer absorbs the input normalization.
    pub fn fold_normalization(&self) -> Network<T> {
        if self.normalization.is_identity() {
            return self.clone();
        }
        let mut layers = self.layers.clone();
        let first = &mut layers[0];
        let Normalization { shift, scale } = &self.normalization;
        for r in 0..first.out_dim() {
            let mut offset = T::zero();
            for c in 0..first.in_dim() {
                let w = first.weight.get(r, c) / scale[c];
                first.weight.set(r, c, w);
                offset = offset + w * shift[c];
            }
            first.bias[r] = first.bias[r] - offset;
        }
        Network {
            input_dim: self.input_dim,
            head: self.head,
            normalization: Normalization::identity(self.input_dim),
            layers,
        }
    }

    /// Scalar network computing `sign * objective(x)` on raw inputs.
    ///
    /// Normalization is folded in and, for a classifier, the output layer is
    /// collapsed to the logit difference so that verification only ever
    /// needs to lower-bound a single output.
    pub fn margin_network(&self, sign: T) -> Network<T> {
        let mut net = self.fold_normalization();
        let last = net.layers.last_mut().expect("non-empty");
        let (row, bias): (Vec<T>, T) = match self.head {
            Head::Classifier => (
                last.weight
                    .row(STABLE)
                    .iter()
                    .zip(last.weight.row(UNSTABLE))
                    .map(|(&a, &b)| sign * (a - b))
                    .collect(),
                sign * (last.bias[STABLE] - last.bias[UNSTABLE]),
            ),
            Head::Regressor => (
                last.weight.row(0).iter().map(|&a| sign * a).collect(),
                sign * last.bias[0],
            ),
        };
        let cols = row.len();
        *last = Layer {
            weight: Matrix::from_vec(1, cols, row),
            bias: vec![bias],
        };
        net.head = Head::Regressor;
        net
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_dim: self.input_dim,
            head: self.head,
            normalization: Normalization {
                shift: cast_vec(&self.normalization.shift),
                scale: cast_vec(&self.normalization.scale),
            },
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: cast_vec(&l.bias),
                })
                .collect(),
        }
    }
}

pub(crate) fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect()
}
