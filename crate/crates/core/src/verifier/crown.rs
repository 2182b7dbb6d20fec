//! Backward linear bound propagation with optimizable ReLU lower slopes (α)
//! and Lagrange multipliers for split constraints (β).
//!
//! For a target row `coef` over the pre-activation of layer `m`, the pass
//! walks back through the network keeping a row `Λ` over the current
//! post-activation. At every hidden layer each ReLU is replaced by a linear
//! function that lower-bounds `Λ_j * relu(z_j)`:
//!
//! | neuron              | slope       | offset per unit `Λ_j` |
//! |---------------------|-------------|-----------------------|
//! | `l >= 0`            | 1           | 0                     |
//! | `u <= 0`            | 0           | 0                     |
//! | unstable, `Λ_j >= 0`| `α_j`       | 0                     |
//! | unstable, `Λ_j < 0` | `u/(u-l)`   | `-u l/(u-l)`          |
//!
//! Split neurons add `β_j S_j z_j` with `S_j = -1` for `z >= 0` and `+1`
//! for `z < 0`; since `S_j z_j <= 0` on the subdomain and `β >= 0`, the
//! result stays a lower bound. The input-level form `a·x + c` is minimized
//! over the box in closed form.

use serde::{Deserialize, Serialize};

use super::bounds::{affine_interval, intersect_splits, phase, LayerBounds, Phase, SplitState};
use crate::attack::PerturbationBall;
use crate::linalg::dot;
use crate::nn::Network;
use crate::Scalar;

/// Lower-bound slopes of every hidden neuron, indexed `[layer][neuron]`.
pub type Relaxation<T> = Vec<Vec<T>>;

/// Input-level linear lower bound `(a + Pβ)·x + q·β + c`.
///
/// `p` and `q` hold one entry per split neuron (in
/// [`SplitState::split_positions`] order) and describe how its multiplier
/// enters the bound with the relaxation choices of the pass frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearForm<T> {
    pub a: Vec<T>,
    pub c: T,
    pub p: Vec<Vec<T>>,
    pub q: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LinearForm<T> {
    pub fn affine(a: Vec<T>, c: T) -> Self {
        Self {
            a,
            c,
            p: Vec::new(),
            q: Vec::new(),
            beta: Vec::new(),
        }
    }

    /// `a + Pβ`.
    pub fn coefficients(&self) -> Vec<T> {
        let mut out = self.a.clone();
        for (row, &b) in self.p.iter().zip(&self.beta) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o = *o + b * r;
            }
        }
        out
    }

    /// `q·β + c`.
    pub fn constant(&self) -> T {
        self.c + dot(&self.q, &self.beta)
    }

    pub fn eval(&self, x: &[T]) -> T {
        dot(&self.coefficients(), x) + self.constant()
    }

    /// Box corner minimizing the form.
    pub fn minimizer(&self, ball: &PerturbationBall<T>) -> Vec<T> {
        self.coefficients()
            .iter()
            .zip(ball.lower().iter().zip(ball.upper()))
            .map(|(&a, (&l, &u))| if a > T::zero() { l } else { u })
            .collect()
    }
}

/// Minimum of the form over the box:
/// `-Σ|a + Pβ|_i ε_i + (Pᵀx̃ + q)·β + a·x̃ + c` with `x̃` the box midpoint and
/// `ε` its half-widths.
pub fn closed_form_inner_min<T: Scalar>(form: &LinearForm<T>, ball: &PerturbationBall<T>) -> T {
    let mid = ball.midpoint();
    let rad = ball.half_width();
    let coef = form.coefficients();
    let dual_norm: T = coef.iter().zip(&rad).map(|(&a, &r)| a.abs() * r).sum();
    let beta_term: T = form
        .p
        .iter()
        .zip(&form.q)
        .zip(&form.beta)
        .map(|((row, &q), &b)| (dot(row, &mid) + q) * b)
        .sum();
    -dual_norm + beta_term + dot(&form.a, &mid) + form.c
}

/// Initial slopes: 1 where `u >= -l`, else 0.
pub fn default_alpha<T: Scalar>(bounds: &LayerBounds<T>) -> Relaxation<T> {
    bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(l, u)| {
            l.iter()
                .zip(u)
                .map(|(&l, &u)| if u >= -l { T::one() } else { T::zero() })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BackwardResult<T> {
    pub form: LinearForm<T>,
    /// Closed-form minimum of `form` over the box.
    pub bound: T,
    /// d bound / d α (zero for neurons whose α is unused).
    pub grad_alpha: Relaxation<T>,
    /// d bound / d β (zero for free neurons).
    pub grad_beta: Vec<Vec<T>>,
}

struct Pass<T> {
    a: Vec<T>,
    c: T,
    lambdas: Vec<Vec<T>>,
    slopes: Vec<Vec<T>>,
    offsets: Vec<Vec<T>>,
    alpha_used: Vec<Vec<bool>>,
    p_rows: Vec<((usize, usize), Vec<T>, T)>,
}

/// Backward pass bounding `coef · z_target` from below.
#[allow(clippy::too_many_arguments)]
fn pass<T: Scalar>(
    net: &Network<T>,
    bounds: &LayerBounds<T>,
    splits: &SplitState,
    target: usize,
    coef: &[T],
    alpha: &[Vec<T>],
    beta: Option<&[Vec<T>]>,
    track_p: bool,
) -> Pass<T> {
    let layers = net.layers();
    let mut c = dot(coef, &layers[target].bias);
    let mut lam = layers[target].weight.tmatvec(coef);
    let mut lambdas = vec![Vec::new(); target];
    let mut slopes = vec![Vec::new(); target];
    let mut offsets = vec![Vec::new(); target];
    let mut alpha_used = vec![Vec::new(); target];
    let mut p_rows: Vec<((usize, usize), Vec<T>, T)> = Vec::new();

    for k in (0..target).rev() {
        let n = lam.len();
        let mut slope = vec![T::zero(); n];
        let mut offset = vec![T::zero(); n];
        let mut used = vec![false; n];
        for j in 0..n {
            let (l, u) = (bounds.lower[k][j], bounds.upper[k][j]);
            match phase(l, u) {
                Phase::Active => slope[j] = T::one(),
                Phase::Inactive => {}
                Phase::Unstable => {
                    if lam[j] >= T::zero() {
                        slope[j] = alpha[k][j];
                        used[j] = true;
                    } else {
                        let s = u / (u - l);
                        slope[j] = s;
                        offset[j] = -s * l;
                    }
                }
            }
        }
        let mut mu: Vec<T> = lam.iter().zip(&slope).map(|(&a, &s)| a * s).collect();
        c = c + dot(&lam, &offset);
        for (_, row, q) in p_rows.iter_mut() {
            *q = *q + dot(row, &offset);
            row.iter_mut().zip(&slope).for_each(|(r, &s)| *r = *r * s);
        }
        for (j, st) in splits.layer(k).iter().enumerate() {
            let code: T = st.sign_code();
            if code == T::zero() {
                continue;
            }
            if let Some(beta) = beta {
                mu[j] = mu[j] + beta[k][j] * code;
            }
            if track_p {
                let mut row = vec![T::zero(); n];
                row[j] = code;
                p_rows.push(((k, j), row, T::zero()));
            }
        }
        let layer = &layers[k];
        c = c + dot(&mu, &layer.bias);
        for (_, row, q) in p_rows.iter_mut() {
            *q = *q + dot(row, &layer.bias);
            *row = layer.weight.tmatvec(row);
        }
        lambdas[k] = lam;
        slopes[k] = slope;
        offsets[k] = offset;
        alpha_used[k] = used;
        lam = layer.weight.tmatvec(&mu);
    }
    p_rows.sort_by_key(|(pos, _, _)| *pos);
    Pass {
        a: lam,
        c,
        lambdas,
        slopes,
        offsets,
        alpha_used,
        p_rows,
    }
}

fn box_min<T: Scalar>(a: &[T], c: T, mid: &[T], rad: &[T]) -> T {
    a.iter()
        .zip(mid.iter().zip(rad))
        .map(|(&a, (&m, &r))| a * m - a.abs() * r)
        .sum::<T>()
        + c
}

/// Lower bound of the scalar network output over the (split) domain.
pub fn crown_backward<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    bounds: &LayerBounds<T>,
    splits: &SplitState,
    alpha: &[Vec<T>],
    beta: Option<&[Vec<T>]>,
) -> BackwardResult<T> {
    let target = net.layers().len() - 1;
    let coef = vec![T::one()];
    let pass = pass(net, bounds, splits, target, &coef, alpha, beta, true);
    let mid = ball.midpoint();
    let rad = ball.half_width();
    let bound = box_min(&pass.a, pass.c, &mid, &rad);

    // adjoint sweep from the input upward
    let layers = net.layers();
    let mut grad_alpha: Vec<Vec<T>> = bounds.lower.iter().map(|l| vec![T::zero(); l.len()]).collect();
    let mut grad_beta = grad_alpha.clone();
    let mut prev_bar: Vec<T> = pass
        .a
        .iter()
        .zip(mid.iter().zip(&rad))
        .map(|(&a, (&m, &r))| m - a.sign0() * r)
        .collect();
    for k in 0..target {
        let layer = &layers[k];
        let mu_bar: Vec<T> = layer
            .weight
            .matvec(&prev_bar)
            .iter()
            .zip(&layer.bias)
            .map(|(&v, &b)| v + b)
            .collect();
        let mut lam_bar = vec![T::zero(); mu_bar.len()];
        for j in 0..mu_bar.len() {
            let code: T = splits.get(k, j).sign_code();
            grad_beta[k][j] = mu_bar[j] * code;
            if pass.alpha_used[k][j] {
                grad_alpha[k][j] = mu_bar[j] * pass.lambdas[k][j];
            }
            lam_bar[j] = mu_bar[j] * pass.slopes[k][j] + pass.offsets[k][j];
        }
        prev_bar = lam_bar;
    }

    let positions = splits.split_positions();
    let beta_flat: Vec<T> = positions
        .iter()
        .map(|&(k, j)| beta.map_or(T::zero(), |b| b[k][j]))
        .collect();
    let mut a0 = pass.a.clone();
    let mut c0 = pass.c;
    let mut p = Vec::with_capacity(positions.len());
    let mut q = Vec::with_capacity(positions.len());
    for ((_, row, qv), &b) in pass.p_rows.into_iter().zip(&beta_flat) {
        for (a, &r) in a0.iter_mut().zip(&row) {
            *a = *a - b * r;
        }
        c0 = c0 - b * qv;
        p.push(row);
        q.push(qv);
    }
    BackwardResult {
        form: LinearForm {
            a: a0,
            c: c0,
            p,
            q,
            beta: beta_flat,
        },
        bound,
        grad_alpha,
        grad_beta,
    }
}

/// Hidden-layer bounds: interval arithmetic tightened by one backward pass
/// per neuron (default slopes), intersected with the split half-lines.
pub(crate) fn layer_bounds<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    splits: &SplitState,
) -> LayerBounds<T> {
    let hidden = net.layers().len() - 1;
    let mid0 = ball.midpoint();
    let rad0 = ball.half_width();
    let mut bounds = LayerBounds {
        lower: Vec::with_capacity(hidden),
        upper: Vec::with_capacity(hidden),
    };
    let (mut mid, mut rad) = (mid0.clone(), rad0.clone());
    for k in 0..hidden {
        let (mut l, mut u) = affine_interval(net, k, &mid, &rad);
        if k > 0 {
            let alpha = default_alpha(&bounds);
            let n = l.len();
            for j in 0..n {
                let mut e = vec![T::zero(); n];
                e[j] = T::one();
                let lo = pass(net, &bounds, splits, k, &e, &alpha, None, false);
                l[j] = l[j].max(box_min(&lo.a, lo.c, &mid0, &rad0));
                e[j] = -T::one();
                let hi = pass(net, &bounds, splits, k, &e, &alpha, None, false);
                u[j] = u[j].min(-box_min(&hi.a, hi.c, &mid0, &rad0));
            }
        }
        intersect_splits(&mut l, &mut u, splits.layer(k));
        let two = T::lit(2.0);
        (mid, rad) = l
            .iter()
            .zip(&u)
            .map(|(&l, &u)| {
                let (a, b) = (l.relu(), u.relu().max(l.relu()));
                ((a + b) / two, (b - a) / two)
            })
            .unzip();
        bounds.lower.push(l);
        bounds.upper.push(u);
    }
    bounds
}

/// Projected gradient ascent schedule for α and β.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AscentConfig {
    pub iters: usize,
    pub lr: f64,
    pub decay: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            iters: 20,
            lr: 0.1,
            decay: 0.98,
        }
    }
}

/// A branch-and-bound subproblem: the ball restricted by ReLU splits.
#[derive(Debug, Clone)]
pub struct Domain<T> {
    pub splits: SplitState,
    pub bounds: LayerBounds<T>,
    pub alpha: Relaxation<T>,
    pub beta: Vec<Vec<T>>,
    /// Certified lower bound of the output on this subdomain.
    pub lower_bound: T,
    /// Linear form that produced `lower_bound`, if any.
    pub form: Option<LinearForm<T>>,
}

impl<T: Scalar> Domain<T> {
    /// Unsplit domain with default slopes; its bound is the interval bound.
    pub fn root(net: &Network<T>, ball: &PerturbationBall<T>) -> Self {
        let splits = SplitState::free(&net.hidden_sizes());
        let bounds = layer_bounds(net, ball, &splits);
        Self::with_bounds(net, ball, splits, bounds)
    }

    fn with_bounds(
        net: &Network<T>,
        ball: &PerturbationBall<T>,
        splits: SplitState,
        bounds: LayerBounds<T>,
    ) -> Self {
        let alpha = default_alpha(&bounds);
        let beta = bounds.lower.iter().map(|l| vec![T::zero(); l.len()]).collect();
        let lower_bound = super::bounds::output_interval(net, ball, &bounds).0;
        Self {
            splits,
            bounds,
            alpha,
            beta,
            lower_bound,
            form: None,
        }
    }

    /// Child with one more split; `None` when the split empties the domain.
    /// The child inherits the parent's α, β and bound.
    pub fn child(
        &self,
        net: &Network<T>,
        ball: &PerturbationBall<T>,
        layer: usize,
        neuron: usize,
        state: super::Neuron,
    ) -> Option<Self> {
        let splits = self.splits.with(layer, neuron, state);
        let bounds = layer_bounds(net, ball, &splits);
        if bounds.is_empty_domain() {
            return None;
        }
        let interval = super::bounds::output_interval(net, ball, &bounds).0;
        Some(Self {
            splits,
            bounds,
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            lower_bound: self.lower_bound.max(interval),
            form: None,
        })
    }
}

/// Runs the joint (α, β) ascent on a domain. The returned bound never falls
/// below the domain's incoming bound.
pub fn beta_crown_domain<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    mut domain: Domain<T>,
    cfg: &AscentConfig,
) -> Domain<T> {
    let use_beta = domain.splits.num_splits() > 0;
    let mut alpha = domain.alpha.clone();
    let mut beta = domain.beta.clone();
    let mut lr = T::lit(cfg.lr);
    let decay = T::lit(cfg.decay);
    let mut best: Option<Candidate<T>> = None;
    for it in 0..=cfg.iters {
        let r = crown_backward(
            net,
            ball,
            &domain.bounds,
            &domain.splits,
            &alpha,
            use_beta.then_some(beta.as_slice()),
        );
        if r.bound.is_finite() && best.as_ref().is_none_or(|b| r.bound > b.0) {
            best = Some((r.bound, alpha.clone(), beta.clone(), r.form));
        }
        if it == cfg.iters {
            break;
        }
        for (a, g) in alpha.iter_mut().zip(&r.grad_alpha) {
            for (a, &g) in a.iter_mut().zip(g) {
                *a = (*a + lr * g).max(T::zero()).min(T::one());
            }
        }
        if use_beta {
            for (b, g) in beta.iter_mut().zip(&r.grad_beta) {
                for (b, &g) in b.iter_mut().zip(g) {
                    *b = (*b + lr * g).max(T::zero());
                }
            }
        }
        lr = lr * decay;
    }
    if use_beta {
        if let Some(b) = best.as_mut() {
            polish_beta(net, ball, &domain, b);
        }
    }
    if let Some((bound, alpha, beta, form)) = best {
        domain.alpha = alpha;
        domain.beta = beta;
        if bound > domain.lower_bound || domain.form.is_none() {
            domain.form = Some(form);
        }
        domain.lower_bound = domain.lower_bound.max(bound);
    }
    domain
}

type Candidate<T> = (T, Relaxation<T>, Vec<Vec<T>>, LinearForm<T>);

/// Exact coordinate-wise maximization of the closed-form bound over each
/// multiplier with the relaxation of the best pass frozen. Every candidate
/// is re-evaluated by a full pass, so only consistent bounds are kept.
fn polish_beta<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    domain: &Domain<T>,
    best: &mut Candidate<T>,
) {
    let positions = domain.splits.split_positions();
    let mid = ball.midpoint();
    let rad = ball.half_width();
    for _ in 0..3 {
        let form = &best.3;
        let mut beta = form.beta.clone();
        for r in 0..beta.len() {
            beta[r] = T::zero();
            let others = LinearForm {
                beta: beta.clone(),
                ..form.clone()
            };
            let base = others.coefficients();
            let row = &form.p[r];
            let slope = dot(row, &mid) + form.q[r];
            let phi = |t: T| -> T {
                slope * t
                    - base
                        .iter()
                        .zip(row)
                        .zip(&rad)
                        .map(|((&b, &p), &e)| (b + t * p).abs() * e)
                        .sum::<T>()
            };
            let mut arg = T::zero();
            let mut val = phi(arg);
            for (&b, &p) in base.iter().zip(row) {
                if p != T::zero() {
                    let t = -b / p;
                    if t > T::zero() && t.is_finite() {
                        let v = phi(t);
                        if v > val {
                            (arg, val) = (t, v);
                        }
                    }
                }
            }
            beta[r] = arg;
        }
        let mut nested = best.2.clone();
        for (&(k, j), &b) in positions.iter().zip(&beta) {
            nested[k][j] = b;
        }
        let r = crown_backward(net, ball, &domain.bounds, &domain.splits, &best.1, Some(&nested));
        if r.bound.is_finite() && r.bound > best.0 {
            *best = (r.bound, best.1.clone(), nested, r.form);
        } else {
            break;
        }
    }
}

/// Result of slope optimization on the unsplit ball.
#[derive(Debug, Clone)]
pub struct AlphaCrownResult<T> {
    /// Interval-arithmetic output bound.
    pub interval_bound: T,
    /// Backward bound with default slopes.
    pub crown_bound: T,
    /// Best bound after slope ascent (never below the other two).
    pub bound: T,
    pub domain: Domain<T>,
}

/// Optimizes the lower slopes of unstable neurons by projected gradient ascent.
pub fn alpha_crown<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    cfg: &AscentConfig,
) -> AlphaCrownResult<T> {
    let root = Domain::root(net, ball);
    let interval_bound = root.lower_bound;
    let crown_bound = crown_backward(net, ball, &root.bounds, &root.splits, &root.alpha, None)
        .bound
        .max(interval_bound);
    let domain = beta_crown_domain(net, ball, root, cfg);
    AlphaCrownResult {
        interval_bound,
        crown_bound,
        bound: domain.lower_bound.max(crown_bound),
        domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{Head, Layer};
    use crate::testing::random_network;
    use crate::verifier::Neuron;

    fn one_unstable_net() -> Network<f64> {
        // z = x, y = relu(z) - 0.3 z + 0.1 on x in [-1, 1]
        let l1 = Layer::new(Matrix::from_vec(2, 1, vec![1.0, 1.0]), vec![0.0, 5.0]).unwrap();
        let l2 = Layer::new(Matrix::from_vec(1, 2, vec![1.0, -0.3]), vec![1.6]).unwrap();
        Network::from_layers(Head::Regressor, vec![l1, l2]).unwrap()
    }

    #[test]
    fn relaxation_upper_line_at_symmetric_interval() {
        // l = -1, u = 1: slope 0.5, intercept 0.5
        let net = one_unstable_net();
        let ball = PerturbationBall::new(vec![0.0], vec![1.0]).unwrap();
        let bounds = layer_bounds(&net, &ball, &SplitState::free(&[2]));
        assert_eq!((bounds.lower[0][0], bounds.upper[0][0]), (-1.0, 1.0));
        let p = pass(&net, &bounds, &SplitState::free(&[2]), 1, &[-1.0], &default_alpha(&bounds), None, false);
        assert_eq!(p.slopes[0][0], 0.5);
        assert_eq!(p.offsets[0][0], 0.5);
        // the upper line touches relu at both endpoints
        for z in [-1.0, 1.0] {
            let line = p.slopes[0][0] * z + p.offsets[0][0];
            assert_eq!(line, f64::max(z, 0.0));
        }
    }

    #[test]
    fn stable_network_bound_is_exact_affine_minimum() {
        // all pre-activations positive on the ball
        let l1 = Layer::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(), vec![10.0, 10.0]).unwrap();
        let l2 = Layer::new(Matrix::from_vec(1, 2, vec![1.0, -3.0]), vec![0.5]).unwrap();
        let net = Network::from_layers(Head::Regressor, vec![l1, l2]).unwrap();
        let ball = PerturbationBall::new(vec![0.5, -0.5], vec![1.0, 2.0]).unwrap();
        let root = Domain::root(&net, &ball);
        let r = crown_backward(&net, &ball, &root.bounds, &root.splits, &root.alpha, None);
        // effective affine map: (1+3)x1 + (2-1.5)x2 + 10 - 30 + 0.5
        let exact: f64 = 4.0 * (0.5 - 1.0) + 0.5 * (-0.5 - 2.0) - 19.5;
        assert!((r.bound - exact).abs() < 1e-12_f64);
    }

    #[test]
    fn closed_form_examples() {
        let ball = PerturbationBall::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let f = LinearForm::affine(vec![1.0, -2.0], 0.0);
        assert_eq!(closed_form_inner_min(&f, &ball), -3.0);
        let point = PerturbationBall::new(vec![0.5, 2.0], vec![0.0, 0.0]).unwrap();
        let f = LinearForm::affine(vec![3.0, -1.0], 0.25);
        assert_eq!(closed_form_inner_min(&f, &point), 1.5 - 2.0 + 0.25);
    }

    #[test]
    fn closed_form_matches_pass_with_beta() {
        let net = random_network(21, 3, &[8, 6], Head::Regressor);
        let ball = PerturbationBall::new(vec![0.1, 0.2, -0.3], vec![0.5, 0.4, 0.6]).unwrap();
        let root = Domain::root(&net, &ball);
        let unstable = root.bounds.unstable();
        let (k, j) = unstable[0];
        let d = root.child(&net, &ball, k, j, Neuron::Active).unwrap();
        let mut beta = d.beta.clone();
        beta[k][j] = 0.7;
        let r = crown_backward(&net, &ball, &d.bounds, &d.splits, &d.alpha, Some(&beta));
        assert_eq!(r.form.beta, vec![0.7]);
        let cf = closed_form_inner_min(&r.form, &ball);
        assert!((cf - r.bound).abs() < 1e-10, "{cf} vs {}", r.bound);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = random_network(5, 3, &[7, 7], Head::Regressor);
        let ball = PerturbationBall::new(vec![0.0, 0.1, -0.2], vec![0.7, 0.5, 0.6]).unwrap();
        let root = Domain::root(&net, &ball);
        let (k, j) = root.bounds.unstable()[0];
        let d = root.child(&net, &ball, k, j, Neuron::Inactive).unwrap();
        let mut alpha = d.alpha.clone();
        alpha.iter_mut().flatten().for_each(|a| *a = 0.37);
        let mut beta = d.beta.clone();
        beta[k][j] = 0.2;
        let r = crown_backward(&net, &ball, &d.bounds, &d.splits, &alpha, Some(&beta));
        let h = 1e-6;
        for kk in 0..alpha.len() {
            for jj in 0..alpha[kk].len() {
                let mut ap = alpha.clone();
                ap[kk][jj] += h;
                let mut am = alpha.clone();
                am[kk][jj] -= h;
                let fp = crown_backward(&net, &ball, &d.bounds, &d.splits, &ap, Some(&beta)).bound;
                let fm = crown_backward(&net, &ball, &d.bounds, &d.splits, &am, Some(&beta)).bound;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - r.grad_alpha[kk][jj]).abs() < 1e-6, "alpha[{kk}][{jj}] fd {fd} vs {}", r.grad_alpha[kk][jj]);
            }
        }
        let mut bp = beta.clone();
        bp[k][j] += h;
        let mut bm = beta.clone();
        bm[k][j] -= h;
        let fp = crown_backward(&net, &ball, &d.bounds, &d.splits, &alpha, Some(&bp)).bound;
        let fm = crown_backward(&net, &ball, &d.bounds, &d.splits, &alpha, Some(&bm)).bound;
        assert!(((fp - fm) / (2.0 * h) - r.grad_beta[k][j]).abs() < 1e-6);
    }

    #[test]
    fn alpha_vacuous_without_unstable_neurons() {
        let net = random_network(8, 2, &[5], Head::Regressor);
        let ball = PerturbationBall::new(vec![0.3, 0.3], vec![0.0, 0.0]).unwrap();
        let res = alpha_crown(&net, &ball, &AscentConfig::default());
        assert_eq!(res.bound, res.crown_bound);
    }
}
