//! Pre-activation bounds of hidden layers and split bookkeeping.

use serde::{Deserialize, Serialize};

use crate::attack::PerturbationBall;
use crate::nn::Network;
use crate::Scalar;

/// Width below which an unstable neuron is treated as stable by the sign of
/// its interval midpoint.
pub(crate) const DEGENERATE_WIDTH: f64 = 1e-12;

/// Branching decision for one hidden neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub enum Neuron {
    #[default]
    Free,
    /// Constrained to z >= 0.
    Active,
    /// Constrained to z < 0.
    Inactive,
}

impl Neuron {
    /// Entry of the split-encoding diagonal: -1 for z >= 0, +1 for z < 0.
    pub fn sign_code<T: Scalar>(self) -> T {
        match self {
            Neuron::Free => T::zero(),
            Neuron::Active => -T::one(),
            Neuron::Inactive => T::one(),
        }
    }
}

/// Split decision for every hidden neuron, indexed `[layer][neuron]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitState {
    layers: Vec<Vec<Neuron>>,
}

impl SplitState {
    pub fn free(hidden_sizes: &[usize]) -> Self {
        Self {
            layers: hidden_sizes.iter().map(|&n| vec![Neuron::Free; n]).collect(),
        }
    }

    pub fn get(&self, layer: usize, neuron: usize) -> Neuron {
        self.layers[layer][neuron]
    }

    pub fn with(&self, layer: usize, neuron: usize, state: Neuron) -> Self {
        let mut next = self.clone();
        next.layers[layer][neuron] = state;
        next
    }

    pub fn layer(&self, layer: usize) -> &[Neuron] {
        &self.layers[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_splits(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .filter(|s| **s != Neuron::Free)
            .count()
    }

    /// `(layer, neuron)` of every split neuron in layer-major order.
    pub fn split_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            for (j, s) in layer.iter().enumerate() {
                if *s != Neuron::Free {
                    out.push((k, j));
                }
            }
        }
        out
    }
}

/// Lower/upper bounds of every hidden pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds<T> {
    pub lower: Vec<Vec<T>>,
    pub upper: Vec<Vec<T>>,
}

/// Stability class of a hidden neuron under given bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Active,
    Inactive,
    Unstable,
}

impl<T: Scalar> LayerBounds<T> {
    /// True when some split made a neuron's interval empty, i.e. the
    /// subdomain contains no input.
    pub fn is_empty_domain(&self) -> bool {
        self.lower
            .iter()
            .flatten()
            .zip(self.upper.iter().flatten())
            .any(|(l, u)| l > u)
    }

    pub(crate) fn phase(&self, layer: usize, j: usize) -> Phase {
        phase(self.lower[layer][j], self.upper[layer][j])
    }

    /// Unstable neurons as `(layer, neuron)`.
    pub fn unstable(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.lower.len() {
            for j in 0..self.lower[k].len() {
                if self.phase(k, j) == Phase::Unstable {
                    out.push((k, j));
                }
            }
        }
        out
    }
}

pub(crate) fn phase<T: Scalar>(l: T, u: T) -> Phase {
    if l >= T::zero() {
        Phase::Active
    } else if u <= T::zero() {
        Phase::Inactive
    } else if u - l < T::lit(DEGENERATE_WIDTH) {
        if l + u >= T::zero() {
            Phase::Active
        } else {
            Phase::Inactive
        }
    } else {
        Phase::Unstable
    }
}

/// Interval image of `[mid - rad, mid + rad]` under an affine layer, as
/// `(lower, upper)`.
pub(crate) fn affine_interval<T: Scalar>(
    net: &Network<T>,
    layer: usize,
    mid: &[T],
    rad: &[T],
) -> (Vec<T>, Vec<T>) {
    let l = &net.layers()[layer];
    let c = l.apply(mid);
    let r = l.weight.abs().matvec(rad);
    (
        c.iter().zip(&r).map(|(&c, &r)| c - r).collect(),
        c.iter().zip(&r).map(|(&c, &r)| c + r).collect(),
    )
}

pub(crate) fn intersect_splits<T: Scalar>(
    lower: &mut [T],
    upper: &mut [T],
    splits: &[Neuron],
) {
    for ((l, u), s) in lower.iter_mut().zip(upper.iter_mut()).zip(splits) {
        match s {
            Neuron::Active => *l = l.max(T::zero()),
            Neuron::Inactive => *u = u.min(T::zero()),
            Neuron::Free => {}
        }
    }
}

fn relu_box<T: Scalar>(lower: &[T], upper: &[T]) -> (Vec<T>, Vec<T>) {
    let two = T::lit(2.0);
    lower
        .iter()
        .zip(upper)
        .map(|(&l, &u)| {
            let (a, b) = (l.relu(), u.relu().max(l.relu()));
            ((a + b) / two, (b - a) / two)
        })
        .unzip()
}

/// Layer-by-layer interval arithmetic, intersected with the split half-lines.
pub fn interval_bounds<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    splits: &SplitState,
) -> LayerBounds<T> {
    let hidden = net.layers().len() - 1;
    let mut mid = ball.midpoint();
    let mut rad = ball.half_width();
    let mut lower = Vec::with_capacity(hidden);
    let mut upper = Vec::with_capacity(hidden);
    for k in 0..hidden {
        let (mut l, mut u) = affine_interval(net, k, &mid, &rad);
        intersect_splits(&mut l, &mut u, splits.layer(k));
        (mid, rad) = relu_box(&l, &u);
        lower.push(l);
        upper.push(u);
    }
    LayerBounds { lower, upper }
}

/// Interval bound of the scalar output given hidden-layer bounds.
pub fn output_interval<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    bounds: &LayerBounds<T>,
) -> (T, T) {
    let last = net.layers().len() - 1;
    let (mid, rad) = match bounds.lower.last() {
        Some(l) => relu_box(l, bounds.upper.last().expect("paired")),
        None => (ball.midpoint(), ball.half_width()),
    };
    let (l, u) = affine_interval(net, last, &mid, &rad);
    (l[0], u[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{Head, Layer};
    use crate::testing::random_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_affine_layer_is_exact() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let l1 = Layer::new(w, vec![0.1, -0.2]).unwrap();
        let l2 = Layer::new(Matrix::from_vec(1, 2, vec![1.0, 1.0]), vec![0.0]).unwrap();
        let net = Network::from_layers(Head::Regressor, vec![l1, l2]).unwrap();
        let ball = PerturbationBall::new(vec![1.0, 2.0], vec![0.5, 0.25]).unwrap();
        let b = interval_bounds(&net, &ball, &SplitState::free(&[2]));
        // l = a·x̃ − |a|·ε + b
        assert_eq!(b.lower[0], vec![1.0 - 4.0 - (0.5 + 0.5) + 0.1, 0.5 + 6.0 - (0.25 + 0.75) - 0.2]);
        assert_eq!(b.upper[0], vec![1.0 - 4.0 + 1.0 + 0.1, 0.5 + 6.0 + 1.0 - 0.2]);
    }

    #[test]
    fn point_ball_gives_forward_values() {
        let net = random_network(2, 3, &[5, 4], Head::Regressor);
        let x = vec![0.3, -0.1, 0.7];
        let ball = PerturbationBall::new(x.clone(), vec![0.0; 3]).unwrap();
        let b = interval_bounds(&net, &ball, &SplitState::free(&net.hidden_sizes()));
        let trace = net.forward_trace(&x).unwrap();
        for k in 0..2 {
            for j in 0..b.lower[k].len() {
                assert!((b.lower[k][j] - trace.pre[k][j]).abs() < 1e-12);
                assert!((b.upper[k][j] - trace.pre[k][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_preactivations_stay_inside() {
        use rand::Rng;
        let net = random_network(9, 4, &[12, 10, 8], Head::Regressor);
        let ball = PerturbationBall::new(vec![0.2, -0.4, 0.0, 1.0], vec![0.3, 0.1, 0.5, 0.2]).unwrap();
        let b = interval_bounds(&net, &ball, &SplitState::free(&net.hidden_sizes()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let x = ball.sample(&mut rng);
            let t = net.forward_trace(&x).unwrap();
            for k in 0..3 {
                for j in 0..b.lower[k].len() {
                    let z = t.pre[k][j];
                    assert!(z >= b.lower[k][j] - 1e-12 && z <= b.upper[k][j] + 1e-12);
                }
            }
            let _ = rng.gen::<u8>();
        }
    }

    #[test]
    fn splits_clip_intervals() {
        let net = random_network(4, 2, &[6], Head::Regressor);
        let ball = PerturbationBall::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let free = interval_bounds(&net, &ball, &SplitState::free(&[6]));
        let (k, j) = free.unstable()[0];
        let act = interval_bounds(&net, &ball, &SplitState::free(&[6]).with(k, j, Neuron::Active));
        assert_eq!(act.lower[k][j], 0.0);
        assert_eq!(act.upper[k][j], free.upper[k][j]);
        let ina = interval_bounds(&net, &ball, &SplitState::free(&[6]).with(k, j, Neuron::Inactive));
        assert_eq!(ina.upper[k][j], 0.0);
    }
}
