//! Bisection on the stability margin λ: solve the stability-constrained OPF,
//! verify the classifier over an uncertainty ball around the resulting
//! strategy, and tighten or relax λ until the strategy certifies safe.

use std::time::Instant;

use certopf_core::attack::{Counterexample, PerturbationBall};
use certopf_core::verifier::{verify_pipeline, Stage, StageTimes, Status, VerifyConfig};
use certopf_core::{Ball64, Network64, Outcome64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{FaultScenario, FeatureClass, Injections, PowerSystemCase};
use crate::dataset::{label_point, ClassPercents};
use crate::opf::{pdipm_solve, OpfOptions, OpfProblem, OpfSolution};
use crate::{GridError, Result};

/// What the caller should do after a bisection step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    /// Solve and verify again at the updated λ.
    Continue,
    /// The bracket is narrower than the tolerance.
    Done,
    /// The OPF failed and the strategy was not safe: no feasible solution
    /// for the current uncertainty range.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionState {
    pub lambda: f64,
    pub lambda_left: f64,
    pub lambda_right: f64,
    pub delta: f64,
    pub zeta: f64,
}

impl BisectionState {
    pub fn new(lambda_right: f64, zeta: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(GridError::InvalidConfig("ζ must be > 0".into()));
        }
        if !(lambda_right > 0.0 && lambda_right < 100.0) {
            return Err(GridError::InvalidConfig("λ_right must lie in (0, 100)".into()));
        }
        Ok(Self {
            lambda: 0.0,
            lambda_left: 0.0,
            lambda_right,
            delta: 2.0,
            zeta,
        })
    }
}

/// Applies one outcome to the bracket.
///
/// Converged but not safe raises λ toward `lambda_right`; not converged and
/// not safe is terminal; anything else (safe) lowers λ toward `lambda_left`.
/// The search stops once the next move `|Δλ|/2` would be below ζ.
pub fn bisection_step(state: &mut BisectionState, converged: bool, status: Status) -> Step {
    let safe = status.is_safe();
    match (converged, safe) {
        (true, false) => {
            state.delta = state.lambda_right - state.lambda;
            state.lambda_left = state.lambda;
        }
        (false, false) => return Step::Infeasible,
        _ => {
            state.delta = state.lambda - state.lambda_left;
            state.lambda_right = state.lambda;
        }
    }
    state.lambda = state.lambda_left + state.delta / 2.0;
    if (state.delta / 2.0).abs() < state.zeta {
        Step::Done
    } else {
        Step::Continue
    }
}

/// Certifies that the classifier labels a whole ball stable.
pub trait StrategyVerifier: Sync {
    fn verify(&self, ball: &Ball64) -> Result<Outcome64>;
}

/// The staged attack / bound / branch-and-bound verifier on a classifier.
///
/// A ball whose center the classifier already labels unstable is unsafe with
/// the center as counterexample.
pub struct PipelineVerifier<'a> {
    pub net: &'a Network64,
    pub config: VerifyConfig,
}

impl StrategyVerifier for PipelineVerifier<'_> {
    fn verify(&self, ball: &Ball64) -> Result<Outcome64> {
        let m0 = self.net.margin(ball.center())?;
        if m0 <= 0.0 {
            return Ok(Outcome64 {
                status: Status::Unsafe,
                bound: None,
                counterexample: Some(Counterexample {
                    x: ball.center().to_vec(),
                    margin: m0,
                }),
                stage: Stage::Pgd,
                domains: 0,
                times: StageTimes::default(),
            });
        }
        Ok(verify_pipeline(self.net, ball, &self.config)?)
    }
}

/// Stub that certifies everything.
pub struct AlwaysSafe;

impl StrategyVerifier for AlwaysSafe {
    fn verify(&self, _ball: &Ball64) -> Result<Outcome64> {
        Ok(Outcome64 {
            status: Status::SafeIncomplete,
            bound: None,
            counterexample: None,
            stage: Stage::AlphaCrown,
            domains: 0,
            times: StageTimes::default(),
        })
    }
}

/// Uncertainty ball around a feature vector. SG and load radii are percents
/// of the entry, IBR radii percents of the forecast; power entries are
/// floored at zero.
pub fn strategy_ball(case: &PowerSystemCase, x: &[f64], forecast: &[f64], pct: &ClassPercents) -> Result<Ball64> {
    let classes = case.feature_classes();
    let ni = case.ibrs.len();
    let np = ni + case.generators.len() + case.loads.len();
    let radii: Vec<f64> = x
        .iter()
        .zip(&classes)
        .enumerate()
        .map(|(j, (&v, &c))| {
            let reference = if c == FeatureClass::Ibr { forecast[j] } else { v.abs() };
            pct.get(c) / 100.0 * reference
        })
        .collect();
    let floors: Vec<f64> = (0..x.len()).map(|j| if j < np { 0.0 } else { f64::NEG_INFINITY }).collect();
    let center: Vec<f64> = x.iter().enumerate().map(|(j, &v)| if j < np { v.max(0.0) } else { v }).collect();
    Ok(PerturbationBall::new(center, radii)?.with_floors(&floors)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlConfig {
    pub lambda_right: f64,
    pub zeta: f64,
    pub ball: ClassPercents,
    pub opf: OpfOptions,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            lambda_right: 90.0,
            zeta: 1.0,
            ball: ClassPercents {
                ibr: 10.0,
                sg: 2.0,
                load: 2.0,
            },
            opf: OpfOptions::default(),
        }
    }
}

/// One row of the iteration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub ite: usize,
    pub lambda: f64,
    pub converged: bool,
    pub verification: Status,
    pub cost: f64,
    /// Regressor TSI estimate at the OPF solution.
    pub tsi: f64,
    pub opf_iterations: usize,
    pub verify_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlStrategy {
    /// Feature vector `[P_IBR, P_SG, Pd, Qd]`.
    pub x: Vec<f64>,
    pub injections: Injections,
    pub lambda: f64,
    pub status: Status,
    pub cost: f64,
    pub tsi_estimate: f64,
    pub ball_lower: Vec<f64>,
    pub ball_upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ControlOutcome {
    Certified(ControlStrategy),
    /// No converged strategy verified safe for the given uncertainty range.
    Infeasible { iteration: usize, lambda: f64, advice: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlReport {
    pub log: Vec<IterationRecord>,
    pub outcome: ControlOutcome,
    /// TSI of one simulation of the certified strategy.
    pub tds_tsi: Option<f64>,
}

impl ControlReport {
    pub fn strategy(&self) -> Option<&ControlStrategy> {
        match &self.outcome {
            ControlOutcome::Certified(s) => Some(s),
            ControlOutcome::Infeasible { .. } => None,
        }
    }

    /// Iteration table: `ite,lambda,converge,verification,cost,tsi`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("ite,lambda,converge,verification,cost,tsi\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.ite, r.lambda, r.converged, r.verification, r.cost, r.tsi
            ));
        }
        out
    }
}

const INFEASIBLE_ADVICE: &str = "no feasible solution: reduce the range of the uncertainty ball or shed load";

/// Runs the bisection loop. `forecast`, `pd` and `qd` are the forecasts the
/// OPF dispatches against; `net_e` is the regressor embedded in the OPF.
#[allow(clippy::too_many_arguments)]
pub fn run_preventive_control(
    case: &PowerSystemCase,
    base: &OpfProblem<'_>,
    fault: &FaultScenario,
    net_c: &Network64,
    net_e: &Network64,
    verifier: &dyn StrategyVerifier,
    cfg: &ControlConfig,
) -> Result<ControlReport> {
    fault.validate(case)?;
    if net_c.input_dim() != case.feature_dim() || net_e.input_dim() != case.feature_dim() {
        return Err(GridError::Dimension {
            expected: case.feature_dim(),
            got: if net_c.input_dim() != case.feature_dim() { net_c.input_dim() } else { net_e.input_dim() },
        });
    }
    let mut state = BisectionState::new(cfg.lambda_right, cfg.zeta)?;
    let mut log = Vec::new();
    let mut best: Option<ControlStrategy> = None;
    let max_iter = ((cfg.lambda_right / cfg.zeta).log2().ceil() as usize) + 4;
    let outcome = loop {
        let ite = log.len() + 1;
        let lambda = state.lambda;
        let problem = OpfProblem {
            stability: None,
            ..base.clone()
        }
        .with_stability(net_e, lambda);
        let sol = pdipm_solve(&problem, &cfg.opf).map_err(|e| GridError::Opf(format!("iteration {ite}, λ = {lambda}: {e}")))?;
        let x = sol.features();
        let ball = strategy_ball(case, &x, &base.forecast, &cfg.ball)?;
        let t = Instant::now();
        let verdict = verifier
            .verify(&ball)
            .map_err(|e| GridError::InvalidConfig(format!("verification at iteration {ite}: {e}")))?;
        let verify_seconds = t.elapsed().as_secs_f64();
        let tsi = sol.tsi_estimate.unwrap_or(f64::NAN);
        log_disagreement(net_c, &x, tsi);
        log::info!(
            "iteration {ite}: λ = {lambda}, converged = {}, {} , cost = {:.2}",
            sol.converged,
            verdict.status,
            sol.cost
        );
        log.push(IterationRecord {
            ite,
            lambda,
            converged: sol.converged,
            verification: verdict.status,
            cost: sol.cost,
            tsi,
            opf_iterations: sol.iterations,
            verify_seconds,
        });
        if sol.converged && verdict.status.is_safe() {
            best = Some(strategy_of(&sol, x, lambda, verdict.status, &ball));
        }
        match bisection_step(&mut state, sol.converged, verdict.status) {
            Step::Continue if log.len() < max_iter => {}
            Step::Infeasible => {
                break ControlOutcome::Infeasible {
                    iteration: ite,
                    lambda,
                    advice: INFEASIBLE_ADVICE.into(),
                }
            }
            _ => match best.take() {
                Some(s) => break ControlOutcome::Certified(s),
                None => {
                    break ControlOutcome::Infeasible {
                        iteration: ite,
                        lambda,
                        advice: INFEASIBLE_ADVICE.into(),
                    }
                }
            },
        }
    };
    let tds_tsi = match &outcome {
        ControlOutcome::Certified(s) => {
            let (_, tsi) = label_point(case, &s.injections, fault)?;
            if tsi <= 0.0 {
                log::warn!("certified strategy is unstable in simulation (TSI {tsi:.2})");
            }
            Some(tsi)
        }
        ControlOutcome::Infeasible { .. } => None,
    };
    Ok(ControlReport { log, outcome, tds_tsi })
}

fn log_disagreement(net_c: &Network64, x: &[f64], tsi: f64) {
    if let Ok(m) = net_c.margin(x) {
        if tsi.is_finite() && (m > 0.0) != (tsi > 0.0) {
            log::info!("classifier margin {m:.3} and regressor TSI {tsi:.3} disagree at the strategy");
        }
    }
}

fn strategy_of(sol: &OpfSolution, x: Vec<f64>, lambda: f64, status: Status, ball: &Ball64) -> ControlStrategy {
    ControlStrategy {
        x,
        injections: sol.strategy.clone(),
        lambda,
        status,
        cost: sol.cost,
        tsi_estimate: sol.tsi_estimate.unwrap_or(f64::NAN),
        ball_lower: ball.lower().to_vec(),
        ball_upper: ball.upper().to_vec(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McsReport {
    pub samples: usize,
    pub unstable: usize,
    /// Samples whose power flow failed.
    pub dropped: usize,
    pub min_tsi: f64,
    pub tsi: Vec<f64>,
}

/// Simulates `n` uniform points of the ball (seeded, order-preserving).
pub fn monte_carlo_validate(
    case: &PowerSystemCase,
    fault: &FaultScenario,
    ball: &Ball64,
    n: usize,
    seed: u64,
) -> Result<McsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n).map(|_| ball.sample(&mut rng)).collect();
    let results: Vec<Option<f64>> = points
        .par_iter()
        .map(|x| {
            let inj = Injections::from_features(case, x).ok()?;
            label_point(case, &inj, fault).ok().map(|(_, tsi)| tsi)
        })
        .collect();
    let tsi: Vec<f64> = results.iter().flatten().copied().collect();
    Ok(McsReport {
        samples: n,
        unstable: tsi.iter().filter(|t| **t <= 0.0).count(),
        dropped: results.iter().filter(|r| r.is_none()).count(),
        min_tsi: tsi.iter().copied().fold(f64::INFINITY, f64::min),
        tsi,
    })
}
