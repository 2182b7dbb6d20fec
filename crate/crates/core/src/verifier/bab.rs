//! Branch and bound over ReLU splits.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bounds::{LayerBounds, Phase};
use super::crown::{alpha_crown, beta_crown_domain, AscentConfig, Domain};
use super::pipeline::{Stage, StageTimes, Status, VerifyOutcome};
use super::Neuron;
use crate::attack::{descend, AttackConfig, Counterexample, PerturbationBall};
use crate::linalg::Matrix;
use crate::nn::Network;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BabBudget {
    /// Maximum number of domains bounded and branched.
    pub max_domains: usize,
    /// Wall-clock limit; `None` means unlimited.
    pub max_seconds: Option<f64>,
}

impl Default for BabBudget {
    fn default() -> Self {
        Self {
            max_domains: 1 << 16,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BabConfig {
    pub budget: BabBudget,
    pub ascent: AscentConfig,
    /// Attack run inside every popped domain, started at the minimizer of
    /// its linear bound.
    pub attack: AttackConfig,
    /// Domains popped and processed in parallel per round.
    pub batch: usize,
}

impl Default for BabConfig {
    fn default() -> Self {
        Self {
            budget: BabBudget::default(),
            ascent: AscentConfig::default(),
            attack: AttackConfig {
                steps: 20,
                restarts: 1,
                ..AttackConfig::default()
            },
            batch: 8,
        }
    }
}

struct Entry {
    bound: f64,
    seq: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // max-heap on the reversed key pops the lowest bound, then oldest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.seq.cmp(&self.seq))
    }
}

enum Processed<T> {
    Closed(T),
    Counterexample(Counterexample<T>),
    Unresolved(T),
    Split(Vec<Domain<T>>),
}

/// Complete verification that the classifier keeps the center's label over
/// the ball. Returns [`Status::SafeComplete`], [`Status::Unsafe`] or, on
/// budget exhaustion, [`Status::Unknown`].
pub fn branch_and_bound<T: Scalar>(
    net: &Network<T>,
    ball: &PerturbationBall<T>,
    cfg: &BabConfig,
) -> Result<VerifyOutcome<T>> {
    let m0 = net.margin(ball.center())?;
    if m0 == T::zero() {
        return Err(Error::AmbiguousCenter);
    }
    if ball.dim() != net.input_dim() {
        return Err(Error::Dimension {
            context: "ball vs network input",
            expected: net.input_dim(),
            got: ball.dim(),
        });
    }
    cfg.attack.validate()?;
    let sign = m0.sign0();
    let scalar = net.margin_network(sign);
    let start = Instant::now();
    let root = alpha_crown(&scalar, ball, &cfg.ascent).domain;
    Ok(search(net, &scalar, ball, sign, root, cfg, start))
}

pub(crate) fn search<T: Scalar>(
    net: &Network<T>,
    scalar: &Network<T>,
    ball: &PerturbationBall<T>,
    sign: T,
    root: Domain<T>,
    cfg: &BabConfig,
    start: Instant,
) -> VerifyOutcome<T> {
    let finish = |status, bound: Option<T>, cex, domains| VerifyOutcome {
        status,
        bound,
        counterexample: cex,
        stage: Stage::BranchAndBound,
        domains,
        times: StageTimes {
            bab: start.elapsed().as_secs_f64(),
            ..StageTimes::default()
        },
    };

    let mut store: Vec<Option<Domain<T>>> = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut closed_min = T::infinity();
    let mut unresolved_min: Option<T> = None;
    let mut processed = 0usize;

    let push = |d: Domain<T>, store: &mut Vec<Option<Domain<T>>>, heap: &mut BinaryHeap<Entry>| {
        heap.push(Entry {
            bound: d.lower_bound.to_f64_lossy(),
            seq: store.len(),
        });
        store.push(Some(d));
    };
    if root.lower_bound > T::zero() {
        return finish(Status::SafeComplete, Some(root.lower_bound), None, 1);
    }
    push(root, &mut store, &mut heap);

    loop {
        if heap.is_empty() {
            return match unresolved_min {
                Some(b) => finish(Status::Unknown, Some(b.min(closed_min)), None, processed),
                None => finish(Status::SafeComplete, Some(closed_min), None, processed),
            };
        }
        let out_of_time = cfg
            .budget
            .max_seconds
            .is_some_and(|s| start.elapsed().as_secs_f64() >= s);
        if processed >= cfg.budget.max_domains || out_of_time {
            let open_min = heap
                .peek()
                .and_then(|e| store[e.seq].as_ref())
                .map_or(T::infinity(), |d| d.lower_bound);
            let bound = open_min.min(closed_min);
            let bound = unresolved_min.map_or(bound, |u| bound.min(u));
            return finish(Status::Unknown, Some(bound), None, processed);
        }
        let take = cfg
            .batch
            .max(1)
            .min(cfg.budget.max_domains - processed)
            .min(heap.len());
        let batch: Vec<Domain<T>> = (0..take)
            .map(|_| {
                let e = heap.pop().expect("non-empty");
                store[e.seq].take().expect("domain stored once")
            })
            .collect();
        processed += batch.len();
        let batch_min = batch.iter().map(|d| d.lower_bound).fold(T::infinity(), T::min);
        let results: Vec<Processed<T>> = batch
            .into_par_iter()
            .map(|d| process(net, scalar, ball, sign, d, cfg))
            .collect();
        for r in results {
            match r {
                Processed::Counterexample(cex) => {
                    let bound = heap
                        .iter()
                        .filter_map(|e| store[e.seq].as_ref())
                        .map(|d| d.lower_bound)
                        .fold(closed_min.min(batch_min), T::min);
                    return finish(Status::Unsafe, Some(bound.min(T::zero())), Some(cex), processed);
                }
                Processed::Closed(b) => closed_min = closed_min.min(b),
                Processed::Unresolved(b) => {
                    unresolved_min = Some(unresolved_min.map_or(b, |u| u.min(b)));
                }
                Processed::Split(children) => {
                    for c in children {
                        if c.lower_bound > T::zero() {
                            closed_min = closed_min.min(c.lower_bound);
                        } else {
                            push(c, &mut store, &mut heap);
                        }
                    }
                }
            }
        }
    }
}

fn process<T: Scalar>(
    net: &Network<T>,
    scalar: &Network<T>,
    ball: &PerturbationBall<T>,
    sign: T,
    d: Domain<T>,
    cfg: &BabConfig,
) -> Processed<T> {
    if d.lower_bound > T::zero() {
        return Processed::Closed(d.lower_bound);
    }
    let Some((k, j)) = branching_neuron(&d.bounds) else {
        return solve_leaf(net, scalar, ball, sign, &d, cfg);
    };
    let start = match &d.form {
        Some(form) => form.minimizer(ball),
        None => ball.center().to_vec(),
    };
    if let Some(cex) = flips(net, sign, &start) {
        return Processed::Counterexample(cex);
    }
    let (value, x) = descend(net, ball, sign, start, &cfg.attack);
    if value <= T::zero() {
        if let Some(cex) = flips(net, sign, &x) {
            return Processed::Counterexample(cex);
        }
    }
    let children = [Neuron::Active, Neuron::Inactive]
        .into_iter()
        .filter_map(|state| d.child(scalar, ball, k, j, state))
        .map(|c| beta_crown_domain(scalar, ball, c, &cfg.ascent))
        .collect();
    Processed::Split(children)
}

fn flips<T: Scalar>(net: &Network<T>, sign: T, x: &[T]) -> Option<Counterexample<T>> {
    let m = net.margin(x).ok()?;
    (sign * m <= T::zero()).then(|| Counterexample {
        x: x.to_vec(),
        margin: m,
    })
}

/// Unstable neuron with the largest relaxation area `u(-l)/(u-l)`; ties go
/// to the earliest layer, then the lowest index.
pub(crate) fn branching_neuron<T: Scalar>(bounds: &LayerBounds<T>) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), T)> = None;
    for (k, j) in bounds.unstable() {
        let (l, u) = (bounds.lower[k][j], bounds.upper[k][j]);
        let score = u * (-l) / (u - l);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some(((k, j), score));
        }
    }
    best.map(|(pos, _)| pos)
}

/// On a domain without unstable neurons the network is affine and the
/// domain is a polytope, so the exact minimum is a small linear program.
fn solve_leaf<T: Scalar>(
    net: &Network<T>,
    scalar: &Network<T>,
    ball: &PerturbationBall<T>,
    sign: T,
    d: &Domain<T>,
    cfg: &BabConfig,
) -> Processed<T> {
    let dim = ball.dim();
    let layers = scalar.layers();
    // h = H x + g for the current post-activation
    let mut h = Matrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        h.set(i, i, 1.0);
    }
    let mut g = vec![0.0; dim];
    let mut rows: Vec<(Vec<f64>, f64, Neuron)> = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        let w = layer.weight.cast::<f64>();
        let n = layer.out_dim();
        let mut zh = Matrix::<f64>::zeros(n, dim);
        let mut zg = vec![0.0; n];
        for r in 0..n {
            zg[r] = layer.bias[r].to_f64_lossy() + crate::linalg::dot(w.row(r), &g);
            for c in 0..dim {
                let v: f64 = (0..w.cols()).map(|t| w.get(r, t) * h.get(t, c)).sum();
                zh.set(r, c, v);
            }
        }
        if k + 1 == layers.len() {
            rows.push((zh.row(0).to_vec(), zg[0], Neuron::Free));
            break;
        }
        for r in 0..n {
            let state = d.splits.get(k, r);
            if state != Neuron::Free {
                rows.push((zh.row(r).to_vec(), zg[r], state));
            }
            if d.bounds.phase(k, r) == Phase::Inactive {
                zh.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                zg[r] = 0.0;
            }
        }
        h = zh;
        g = zg;
    }
    let (obj, obj_c, _) = rows.pop().expect("output row");

    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..dim)
        .map(|i| {
            lp.add_var(
                obj[i],
                (ball.lower()[i].to_f64_lossy(), ball.upper()[i].to_f64_lossy()),
            )
        })
        .collect();
    for (a, c, state) in &rows {
        let expr: Vec<_> = vars.iter().copied().zip(a.iter().copied()).collect();
        let op = if *state == Neuron::Active {
            ComparisonOp::Ge
        } else {
            ComparisonOp::Le
        };
        lp.add_constraint(expr.as_slice(), op, -c);
    }
    match lp.solve().map(|o| o.into_solution()) {
        Err(microlp::Error::Infeasible) => Processed::Closed(T::infinity()),
        Ok(Ok(sol)) => {
            let x: Vec<T> = vars.iter().map(|&v| T::lit(sol.var_value(v))).collect();
            let value = T::lit(sol.objective() + obj_c);
            if let Some(cex) = flips(net, sign, &x) {
                return Processed::Counterexample(cex);
            }
            if value > T::zero() {
                return Processed::Closed(value.max(d.lower_bound));
            }
            let (v, x) = descend(net, ball, sign, x, &cfg.attack);
            match (v <= T::zero()).then(|| flips(net, sign, &x)).flatten() {
                Some(cex) => Processed::Counterexample(cex),
                None => Processed::Unresolved(value.max(d.lower_bound)),
            }
        }
        _ => Processed::Unresolved(d.lower_bound),
    }
}
