//! Projected gradient descent search for misclassified inputs in a box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::Network;
use crate::{Error, Result, Scalar};

/// Axis-aligned ℓ∞ box `[center - radii, center + radii]`, optionally
/// clamped from below by per-dimension physical floors.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBall<T> {
    center: Vec<T>,
    radii: Vec<T>,
    floors: Vec<T>,
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> PerturbationBall<T> {
    pub fn new(center: Vec<T>, radii: Vec<T>) -> Result<Self> {
        if center.len() != radii.len() {
            return Err(Error::Dimension {
                context: "ball radii",
                expected: center.len(),
                got: radii.len(),
            });
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBall("non-finite center".into()));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r >= T::zero())) {
            return Err(Error::InvalidBall("radii must be finite and >= 0".into()));
        }
        let floors = vec![T::neg_infinity(); center.len()];
        Ok(Self::assemble(center, radii, floors))
    }

    fn assemble(center: Vec<T>, radii: Vec<T>, floors: Vec<T>) -> Self {
        let lower = center
            .iter()
            .zip(&radii)
            .zip(&floors)
            .map(|((&c, &r), &f)| (c - r).max(f))
            .collect();
        let upper = center.iter().zip(&radii).map(|(&c, &r)| c + r).collect();
        Self {
            center,
            radii,
            floors,
            lower,
            upper,
        }
    }

    /// Raises lower edges to `floors` (use `-inf` for unconstrained dimensions).
    ///
    /// A center below its floor is an error; the center must stay in the box.
    pub fn with_floors(self, floors: &[T]) -> Result<Self> {
        if floors.len() != self.dim() {
            return Err(Error::Dimension {
                context: "ball floors",
                expected: self.dim(),
                got: floors.len(),
            });
        }
        for (i, &f) in floors.iter().enumerate() {
            if self.center[i] < f {
                return Err(Error::InvalidBall(format!(
                    "center[{i}] lies below its floor"
                )));
            }
            if self.lower[i] < f {
                log::warn!("ball dimension {i} clamped at its physical floor");
            }
        }
        let floors = floors
            .iter()
            .zip(&self.floors)
            .map(|(&a, &b)| a.max(b))
            .collect();
        Ok(Self::assemble(self.center, self.radii, floors))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[T] {
        &self.center
    }

    pub fn radii(&self) -> &[T] {
        &self.radii
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    /// Box midpoint (equals the center unless a floor clipped the box).
    pub fn midpoint(&self) -> Vec<T> {
        let two = T::lit(2.0);
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (l + u) / two)
            .collect()
    }

    pub fn half_width(&self) -> Vec<T> {
        let two = T::lit(2.0);
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (u - l) / two)
            .collect()
    }

    /// Same center and floors with every radius multiplied by `s`.
    pub fn scaled(&self, s: T) -> Self {
        let radii = self.radii.iter().map(|&r| r * s).collect();
        Self::assemble(self.center.clone(), radii, self.floors.clone())
    }

    pub fn is_point(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l == u)
    }

    /// Elementwise clamp onto the box.
    pub fn project(&self, x: &mut [T]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(l).min(u);
        }
    }

    pub fn contains(&self, x: &[T], tol: T) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<T> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| {
                if u > l {
                    l + (u - l) * T::lit(rng.gen::<f64>())
                } else {
                    l
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size; a fraction of each half-width when `scale_by_radius`, an
    /// absolute step otherwise.
    pub eta: f64,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default = "yes")]
    pub scale_by_radius: bool,
}

fn yes() -> bool {
    true
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.1,
            restarts: 10,
            seed: 0,
            scale_by_radius: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack steps must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) && self.scale_by_radius {
            return Err(Error::InvalidConfig("attack eta must lie in (0, 1]".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig("attack eta must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("attack restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Input whose predicted class differs from the center's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample<T> {
    pub x: Vec<T>,
    /// Classifier margin at `x`.
    pub margin: T,
}

/// Searches the ball for an input classified differently from its center.
///
/// Each restart ascends the cross-entropy loss of the center's class by
/// signed gradient steps projected onto the box. For two logits that loss
/// is decreasing in the defended margin `s * margin(x)`, so its gradient
/// sign is `-s * sign(grad margin)`. Restart 0 starts at the center, the
/// rest at uniform points of the box. The lowest defended margin of each
/// restart is kept; the first restart (by index) reaching a non-positive
/// defended margin wins.
pub fn pgd_attack<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    cfg: &AttackConfig,
) -> Result<Option<Counterexample<T>>> {
    cfg.validate()?;
    let m0 = net.margin(ball.center())?;
    if ball.dim() != net.input_dim() {
        return Err(Error::Dimension {
            context: "ball vs network input",
            expected: net.input_dim(),
            got: ball.dim(),
        });
    }
    if m0 == T::zero() {
        return Err(Error::AmbiguousCenter);
    }
    let sign = m0.sign0();
    if ball.is_point() {
        return Ok(None);
    }
    let results: Vec<Option<Counterexample<T>>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                ball.center().to_vec()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(r as u64);
                ball.sample(&mut rng)
            };
            let (value, x) = descend(net, ball, sign, start, cfg);
            (value <= T::zero()).then(|| Counterexample {
                margin: sign * value,
                x,
            })
        })
        .collect();
    Ok(results.into_iter().flatten().next())
}

/// Signed-gradient descent on the defended margin from `start`; returns the
/// lowest defended margin seen and where.
pub(crate) fn descend<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    sign: T,
    mut x: Vec<T>,
    cfg: &AttackConfig,
) -> (T, Vec<T>) {
    let eta = T::lit(cfg.eta);
    let step: Vec<T> = if cfg.scale_by_radius {
        ball.half_width().iter().map(|&h| eta * h).collect()
    } else {
        vec![eta; ball.dim()]
    };
    ball.project(&mut x);
    let mut best = (T::infinity(), x.clone());
    for _ in 0..cfg.steps {
        let (m, g) = net.input_gradient(&x).expect("dimension checked");
        let v = sign * m;
        if v < best.0 {
            best = (v, x.clone());
        }
        let mut moved = false;
        for i in 0..x.len() {
            let d = (sign * g[i]).sign0();
            if d != T::zero() && step[i] > T::zero() {
                let before = x[i];
                x[i] = (x[i] - step[i] * d).max(ball.lower()[i]).min(ball.upper()[i]);
                moved |= x[i] != before;
            }
        }
        if !moved {
            break;
        }
    }
    let v = sign * net.margin(&x).expect("dimension checked");
    if v < best.0 {
        best = (v, x);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{Head, Layer};

    fn affine_classifier(w: &[f64], b: f64) -> Network<f64> {
        let mut data = w.to_vec();
        data.extend(std::iter::repeat_n(0.0, w.len()));
        let layer = Layer::new(Matrix::from_vec(2, w.len(), data), vec![b, 0.0]).unwrap();
        Network::from_layers(Head::Classifier, vec![layer]).unwrap()
    }

    #[test]
    fn zero_radius_finds_nothing() {
        let net = affine_classifier(&[1.0, -1.0], 0.5);
        let ball = PerturbationBall::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!(pgd_attack(&net, &ball, &AttackConfig::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn affine_attack_reaches_the_worst_corner() {
        let w = [2.0, -1.0, 0.5];
        let net = affine_classifier(&w, 1.0);
        let center = vec![0.2, 0.1, -0.3];
        let radii = vec![0.5, 0.4, 1.0];
        // worst corner: 1 + 2(-0.3) - (0.5) + 0.5(-1.3) = -0.75
        let ball = PerturbationBall::new(center.clone(), radii.clone()).unwrap();
        let cfg = AttackConfig {
            restarts: 1,
            ..AttackConfig::default()
        };
        let cex = pgd_attack(&net, &ball, &cfg).unwrap().expect("corner flips");
        for i in 0..3 {
            let corner = center[i] - radii[i] * w[i].signum();
            assert!((cex.x[i] - corner).abs() < 1e-12);
        }
        assert!((cex.margin + 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_center_rejected() {
        let net = affine_classifier(&[1.0], 0.0);
        let ball = PerturbationBall::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            pgd_attack(&net, &ball, &AttackConfig::default()),
            Err(Error::AmbiguousCenter)
        ));
    }

    #[test]
    fn frozen_dimension_never_moves() {
        let net = affine_classifier(&[1.0, 1.0], 0.3);
        let ball = PerturbationBall::new(vec![0.0, 0.0], vec![0.0, 1.0]).unwrap();
        let cex = pgd_attack(&net, &ball, &AttackConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(cex.x[0], 0.0);
        assert!((cex.x[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn floors_clip_the_box() {
        let ball = PerturbationBall::new(vec![0.5, 2.0], vec![1.0, 1.0])
            .unwrap()
            .with_floors(&[0.0, f64::NEG_INFINITY])
            .unwrap();
        assert_eq!(ball.lower(), &[0.0, 1.0]);
        assert_eq!(ball.upper(), &[1.5, 3.0]);
        let s = ball.scaled(0.25);
        assert_eq!(s.lower(), &[0.25, 1.75]);
        let s = ball.scaled(2.0);
        assert_eq!(s.lower(), &[0.0, 0.0]);
        assert!(PerturbationBall::new(vec![-1.0], vec![1.0])
            .unwrap()
            .with_floors(&[0.0])
            .is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let net = affine_classifier(&[1.0], 1.0);
        let ball = PerturbationBall::new(vec![0.0], vec![1.0]).unwrap();
        for cfg in [
            AttackConfig {
                steps: 0,
                ..Default::default()
            },
            AttackConfig {
                eta: 1.5,
                ..Default::default()
            },
            AttackConfig {
                restarts: 0,
                ..Default::default()
            },
        ] {
            assert!(pgd_attack(&net, &ball, &cfg).is_err());
        }
    }
}
