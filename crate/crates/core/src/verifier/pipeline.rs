//! Staged verification: attack, slope-optimized bound, then branch and bound.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bab::{search, BabConfig};
use super::crown::{alpha_crown, AscentConfig};
use crate::attack::{pgd_attack, AttackConfig, Counterexample, PerturbationBall};
use crate::nn::Network;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    SafeIncomplete,
    SafeComplete,
    Unsafe,
    Unknown,
}

impl Status {
    pub fn is_safe(self) -> bool {
        matches!(self, Status::SafeIncomplete | Status::SafeComplete)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::SafeIncomplete => "safe-incomplete",
            Status::SafeComplete => "safe-complete",
            Status::Unsafe => "unsafe",
            Status::Unknown => "unknown",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage that produced the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pgd,
    AlphaCrown,
    BranchAndBound,
}

/// Seconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub pgd: f64,
    pub alpha_crown: f64,
    pub bab: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome<T> {
    pub status: Status,
    /// Certified lower bound of the center-signed margin over the ball (or
    /// the best known global bound when undecided).
    pub bound: Option<T>,
    pub counterexample: Option<Counterexample<T>>,
    pub stage: Stage,
    pub domains: usize,
    pub times: StageTimes,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub attack: AttackConfig,
    /// Skip the attack stage when false.
    #[serde(default = "yes")]
    pub run_pgd: bool,
    pub ascent: AscentConfig,
    pub bab: BabConfig,
}

fn yes() -> bool {
    true
}

impl VerifyConfig {
    pub fn new() -> Self {
        Self {
            run_pgd: true,
            ..Self::default()
        }
    }
}

/// Decides whether every input of the ball keeps the center's label.
pub fn verify_pipeline<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    cfg: &VerifyConfig,
) -> Result<VerifyOutcome<T>> {
    if ball.dim() != net.input_dim() {
        return Err(Error::Dimension {
            context: "ball vs network input",
            expected: net.input_dim(),
            got: ball.dim(),
        });
    }
    let m0 = net.margin(ball.center())?;
    if m0 == T::zero() {
        return Err(Error::AmbiguousCenter);
    }
    cfg.attack.validate()?;
    cfg.bab.attack.validate()?;
    let sign = m0.sign0();
    let mut times = StageTimes::default();
    let outcome = |status, bound, cex, stage, domains, times| VerifyOutcome {
        status,
        bound,
        counterexample: cex,
        stage,
        domains,
        times,
    };
    if ball.is_point() {
        return Ok(outcome(Status::SafeIncomplete, Some(m0.abs()), None, Stage::AlphaCrown, 0, times));
    }

    if cfg.run_pgd {
        let t = Instant::now();
        let cex = pgd_attack(net, ball, &cfg.attack)?;
        times.pgd = t.elapsed().as_secs_f64();
        if let Some(cex) = cex {
            return Ok(outcome(Status::Unsafe, None, Some(cex), Stage::Pgd, 0, times));
        }
    }

    let t = Instant::now();
    let scalar = net.margin_network(sign);
    let ac = alpha_crown(&scalar, ball, &cfg.ascent);
    times.alpha_crown = t.elapsed().as_secs_f64();
    if ac.bound > T::zero() {
        return Ok(outcome(Status::SafeIncomplete, Some(ac.bound), None, Stage::AlphaCrown, 1, times));
    }

    let mut root = ac.domain;
    root.lower_bound = ac.bound;
    let mut out = search(net, &scalar, ball, sign, root, &cfg.bab, Instant::now());
    times.bab = out.times.bab;
    out.times = times;
    Ok(out)
}

/// Bracket of the global radius scale separating certified-safe from
/// not-certified balls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeScale<T> {
    /// Largest tested scale verified safe.
    pub safe: T,
    /// Smallest tested scale not verified safe, if any.
    pub not_safe: Option<T>,
    /// Verdict at `not_safe` (unsafe or unknown).
    pub not_safe_status: Option<Status>,
    /// Final verdict at `safe` (`None` for the trivial scale 0).
    pub safe_status: Option<Status>,
    pub evaluations: usize,
}

/// Bisects the scale `s ∈ [0, max_scale]` applied to the radii of `ball`
/// until the bracket is narrower than `resolution`. Unknown verdicts count
/// as not safe.
pub fn max_safe_perturbation<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    max_scale: T,
    resolution: T,
    cfg: &VerifyConfig,
) -> Result<SafeScale<T>> {
    if !(max_scale > T::zero()) || !(resolution > T::zero()) {
        return Err(Error::InvalidConfig(
            "scale bisection needs positive max_scale and resolution".into(),
        ));
    }
    let mut evaluations = 0;
    let mut eval = |s: T| -> Result<Status> {
        evaluations += 1;
        Ok(verify_pipeline(net, &ball.scaled(s), cfg)?.status)
    };
    let top = eval(max_scale)?;
    if top.is_safe() {
        return Ok(SafeScale {
            safe: max_scale,
            not_safe: None,
            not_safe_status: None,
            safe_status: Some(top),
            evaluations,
        });
    }
    let (mut lo, mut hi) = (T::zero(), max_scale);
    let (mut lo_status, mut hi_status) = (None, top);
    let two = T::lit(2.0);
    while hi - lo > resolution {
        let mid = (lo + hi) / two;
        let st = eval(mid)?;
        if st.is_safe() {
            lo = mid;
            lo_status = Some(st);
        } else {
            hi = mid;
            hi_status = st;
        }
    }
    Ok(SafeScale {
        safe: lo,
        not_safe: Some(hi),
        not_safe_status: Some(hi_status),
        safe_status: lo_status,
        evaluations,
    })
}
