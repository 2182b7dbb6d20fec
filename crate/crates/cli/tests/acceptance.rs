//! Acceptance gate: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use certopf_core::attack::{pgd_attack, AttackConfig, Counterexample, PerturbationBall};
use certopf_core::nn::{load_network, Head};
use certopf_core::testing::{exact_min_planar, grid_points, random_network_with};
use certopf_core::verifier::*;
use certopf_core::{Ball64, Network64};
use certopf_grid::case::{Bus, BusKind, Generator, Line, Load};
use certopf_grid::control::*;
use certopf_grid::dataset::ClassPercents;
use certopf_grid::opf::*;
use certopf_grid::powerflow::bus_power;
use certopf_grid::tds::build_model;
use certopf_grid::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;

type Verdict = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn case9() -> PowerSystemCase {
    PowerSystemCase::load(fixture("case9.json")).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bisection_trace() -> Verdict {
    use Status::*;
    let script = [
        (true, Unsafe),
        (true, Unsafe),
        (false, SafeComplete),
        (true, Unsafe),
        (true, Unsafe),
        (true, SafeComplete),
        (true, SafeComplete),
    ];
    let expected = [0.0, 45.0, 67.5, 56.25, 61.875, 64.6875, 63.28125];
    let t = Instant::now();
    let mut st = BisectionState::new(90.0, 1.0).map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    let mut last = Step::Continue;
    for (c, s) in script {
        trace.push(st.lambda);
        last = bisection_step(&mut st, c, s);
    }
    let elapsed = t.elapsed().as_secs_f64();
    ensure(trace == expected, || format!("trace {trace:?}"))?;
    ensure(last == Step::Done, || format!("final step {last:?}"))?;
    ensure(elapsed < 1e-3, || format!("took {elapsed} s"))?;
    Ok(format!("λ trace {trace:?}"))
}

struct Instance {
    net: Network64,
    ball: Ball64,
    sign: f64,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let layers = rng.gen_range(2..=3);
        let d = rng.gen_range(2..=3);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.gen_range(4..=16)).collect();
        let net = random_network_with(&mut rng, d, &hidden, Head::Classifier);
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..0.5)).collect();
        let m = net.margin(&c).unwrap();
        if m != 0.0 {
            let ball = PerturbationBall::new(c, r).unwrap();
            return Instance { net, ball, sign: m.signum() };
        }
    }
}

fn sampled_min(inst: &Instance) -> f64 {
    let d = inst.ball.dim();
    let per = (1e4f64.powf(1.0 / d as f64)).ceil() as usize;
    grid_points(inst.ball.lower(), inst.ball.upper(), per)
        .iter()
        .map(|x| inst.sign * inst.net.margin(x).unwrap())
        .fold(f64::INFINITY, f64::min)
}

struct BoundRecord {
    interval: f64,
    crown: f64,
    alpha: f64,
    bab: f64,
    truth: f64,
    unstable: bool,
    cex: Option<Counterexample<f64>>,
}

fn bound_records() -> &'static Vec<(Instance, BoundRecord)> {
    static CELL: std::sync::OnceLock<Vec<(Instance, BoundRecord)>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let inst = random_instance(1000 + seed);
                let scalar = inst.net.margin_network(inst.sign);
                let ac = alpha_crown(&scalar, &inst.ball, &AscentConfig::default());
                let bab = branch_and_bound(&inst.net, &inst.ball, &BabConfig::default()).unwrap();
                let rec = BoundRecord {
                    interval: ac.interval_bound,
                    crown: ac.crown_bound,
                    alpha: ac.bound,
                    bab: bab.bound.unwrap_or(f64::NEG_INFINITY),
                    truth: sampled_min(&inst),
                    unstable: !ac.domain.bounds.unstable().is_empty(),
                    cex: bab.counterexample,
                };
                (inst, rec)
            })
            .collect()
    })
}

fn soundness() -> Verdict {
    let recs = bound_records();
    let mut bad = Vec::new();
    for (i, (_, r)) in recs.iter().enumerate() {
        for (name, b) in [("crown", r.crown), ("alpha", r.alpha), ("bab", r.bab)] {
            if b > r.truth + 1e-9 {
                bad.push(format!("#{i} {name} {b} > {}", r.truth));
            }
        }
    }
    ensure(bad.is_empty(), || format!("{} violations: {:?}", bad.len(), &bad[..bad.len().min(5)]))?;
    let slack = recs.iter().map(|(_, r)| r.truth - r.alpha).fold(f64::INFINITY, f64::min);
    Ok(format!("{} instances, smallest α-CROWN slack {slack:.3e}", recs.len()))
}

fn ordering() -> Verdict {
    let recs = bound_records();
    let mut bad = 0;
    let (mut with_unstable, mut improved) = (0, 0);
    for (_, r) in recs {
        if !(r.interval <= r.crown + 1e-9 && r.crown <= r.alpha + 1e-9 && r.alpha <= r.bab + 1e-9) {
            bad += 1;
        }
        if r.unstable {
            with_unstable += 1;
            improved += usize::from(r.alpha > r.crown);
        }
    }
    ensure(bad == 0, || format!("{bad} ordering violations"))?;
    let frac = improved as f64 / with_unstable.max(1) as f64;
    ensure(frac >= 0.3, || format!("α-CROWN improved {improved}/{with_unstable}"))?;
    Ok(format!("ordering holds on {}; α-CROWN tighter on {improved}/{with_unstable} ({:.0}%)", recs.len(), 100.0 * frac))
}

fn completeness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cases = Vec::new();
    let mut ties = 0;
    while cases.len() < 100 {
        let layers = rng.gen_range(1..=3);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.gen_range(2..=12 / layers)).collect();
        let net = random_network_with(&mut rng, 2, &hidden, Head::Classifier);
        let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..2).map(|_| rng.gen_range(0.05..1.0)).collect();
        let m = net.margin(&c).unwrap();
        if m == 0.0 {
            continue;
        }
        let ball = PerturbationBall::new(c, r).unwrap();
        let (exact, _) = exact_min_planar(&net.margin_network(m.signum()), ball.lower(), ball.upper());
        if exact.abs() < 1e-7 {
            ties += 1;
            continue;
        }
        cases.push((net, ball, exact));
    }
    let cfg = BabConfig {
        budget: BabBudget { max_domains: usize::MAX, max_seconds: None },
        ..BabConfig::default()
    };
    let outs: Vec<_> = cases.par_iter().map(|(net, ball, _)| branch_and_bound(net, ball, &cfg).unwrap()).collect();
    let mut tally = BTreeMap::new();
    for ((net, _, exact), out) in cases.iter().zip(&outs) {
        *tally.entry(out.status.as_str()).or_insert(0) += 1;
        let agree = match out.status {
            Status::Unsafe => *exact < 0.0,
            Status::SafeComplete | Status::SafeIncomplete => *exact > 0.0,
            Status::Unknown => false,
        };
        ensure(agree, || format!("verdict {} vs exact minimum {exact} ({:?})", out.status, net.hidden_sizes()))?;
    }
    Ok(format!("100 instances agree with enumeration {tally:?}; {ties} exact ties skipped"))
}

fn counterexamples() -> Verdict {
    let mut checked = 0;
    let mut check = |inst: &Instance, cex: &Counterexample<f64>, src: &str| -> Result<(), String> {
        checked += 1;
        let m = inst.net.margin(&cex.x).unwrap();
        ensure(inst.ball.contains(&cex.x, 1e-12), || format!("{src}: counterexample outside the ball"))?;
        ensure(inst.sign * m <= 0.0, || format!("{src}: margin {m} keeps the center's sign"))?;
        ensure((m - cex.margin).abs() <= 1e-9 * m.abs().max(1.0), || format!("{src}: reported margin {} vs {m}", cex.margin))
    };
    let mut bab_unsafe = 0;
    for (inst, r) in bound_records() {
        if let Some(cex) = &r.cex {
            bab_unsafe += 1;
            check(inst, cex, "bab")?;
        }
    }
    let pipeline: Vec<_> = (0..500u64)
        .into_par_iter()
        .map(|seed| {
            let inst = random_instance(9000 + seed);
            let pgd = pgd_attack(&inst.net, &inst.ball, &AttackConfig::default()).unwrap();
            let out = verify_pipeline(&inst.net, &inst.ball, &VerifyConfig::new()).unwrap();
            (inst, pgd, out)
        })
        .collect();
    let mut pgd_found = 0;
    let mut pipeline_unsafe = 0;
    for (inst, pgd, out) in &pipeline {
        if let Some(c) = pgd {
            pgd_found += 1;
            check(inst, c, "pgd")?;
        }
        if out.status == Status::Unsafe {
            pipeline_unsafe += 1;
            let c = out.counterexample.as_ref().ok_or("unsafe outcome without counterexample")?;
            check(inst, c, &format!("{:?}", out.stage))?;
        } else {
            ensure(out.counterexample.is_none(), || "counterexample on a non-unsafe outcome".into())?;
        }
    }
    ensure(bab_unsafe > 0 && pgd_found > 0, || "no unsafe outcomes exercised".into())?;
    Ok(format!(
        "{checked} counterexamples valid (branch and bound {bab_unsafe}, attack {pgd_found}, pipeline {pipeline_unsafe})"
    ))
}

fn pattern(net: &Network64, x: &[f64]) -> Vec<bool> {
    let t = net.forward_trace(x).unwrap();
    let hidden = t.pre.len() - 1;
    t.pre[..hidden].iter().flatten().map(|v| *v > 0.0).collect()
}

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = an.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(1e-8)
    }
}

fn random_z(case: &PowerSystemCase, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = VarLayout::of(case);
    let mut z = vec![0.0; l.len()];
    for i in 0..l.nb {
        z[l.va() + i] = rng.gen_range(-0.3..0.3);
        z[l.vm() + i] = rng.gen_range(0.95..1.05);
    }
    for (k, g) in case.generators.iter().enumerate() {
        z[l.pg() + k] = rng.gen_range(g.pmin..g.pmax) / case.base_mva;
        z[l.qg() + k] = rng.gen_range(g.qmin..g.qmax) / case.base_mva;
    }
    for (k, r) in case.ibrs.iter().enumerate() {
        z[l.pr() + k] = rng.gen_range(0.0..r.forecast) / case.base_mva;
        z[l.qr() + k] = rng.gen_range(-0.2..0.2);
    }
    z
}

fn gradients() -> Verdict {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    // network input gradients
    let mut worst_nn: f64 = 0.0;
    let mut probes = 0;
    while probes < 200 {
        let head = if probes % 2 == 0 { Head::Classifier } else { Head::Regressor };
        let depth = rng.gen_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(4..=16)).collect();
        let d = rng.gen_range(2..=6);
        let net = random_network_with(&mut rng, d, &hidden, head);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shifted = |i: usize, s: f64| {
            let mut y = x.clone();
            y[i] += s;
            y
        };
        let p0 = pattern(&net, &x);
        if (0..d).any(|i| pattern(&net, &shifted(i, h)) != p0 || pattern(&net, &shifted(i, -h)) != p0) {
            continue;
        }
        probes += 1;
        let (_, g) = net.input_gradient(&x).unwrap();
        let fd: Vec<f64> = (0..d)
            .map(|i| (net.objective(&shifted(i, h)).unwrap() - net.objective(&shifted(i, -h)).unwrap()) / (2.0 * h))
            .collect();
        worst_nn = worst_nn.max(rel_err(&fd, &g));
    }
    // OPF objective and constraints, including the trained stability constraint
    let case = case9();
    let net = load_network(fixture("dbn_e.json")).unwrap();
    let problem = OpfProblem::nominal(&case).with_stability(&net, 30.0);
    let forecast = problem.forecast.clone();
    let (mut worst_f, mut worst_c) = (0.0f64, 0.0f64);
    let mut probes = 0;
    while probes < 200 {
        let z = random_z(&case, &mut rng);
        let n = z.len();
        let shifted = |j: usize, s: f64| {
            let mut y = z.clone();
            y[j] += s;
            y
        };
        let p0 = pattern(&net, &problem.features(&z));
        if (0..n).any(|j| {
            pattern(&net, &problem.features(&shifted(j, h))) != p0 || pattern(&net, &problem.features(&shifted(j, -h))) != p0
        }) {
            continue;
        }
        probes += 1;
        let (_, df, _) = evaluate_objective(&case, &forecast, &z);
        let fd: Vec<f64> = (0..n)
            .map(|j| {
                (evaluate_objective(&case, &forecast, &shifted(j, h)).0 - evaluate_objective(&case, &forecast, &shifted(j, -h)).0)
                    / (2.0 * h)
            })
            .collect();
        worst_f = worst_f.max(rel_err(&fd, &df));
        let c0 = evaluate_constraints(&problem, &z).unwrap();
        let plus: Vec<_> = (0..n).map(|j| evaluate_constraints(&problem, &shifted(j, h)).unwrap()).collect();
        let minus: Vec<_> = (0..n).map(|j| evaluate_constraints(&problem, &shifted(j, -h)).unwrap()).collect();
        for r in 0..c0.g.len() {
            let fd: Vec<f64> = (0..n).map(|j| (plus[j].g[r] - minus[j].g[r]) / (2.0 * h)).collect();
            let an: Vec<f64> = (0..n).map(|j| c0.dg[(r, j)]).collect();
            worst_c = worst_c.max(rel_err(&fd, &an));
        }
        for r in 0..c0.h.len() {
            let fd: Vec<f64> = (0..n).map(|j| (plus[j].h[r] - minus[j].h[r]) / (2.0 * h)).collect();
            let an: Vec<f64> = (0..n).map(|j| c0.dh[(r, j)]).collect();
            worst_c = worst_c.max(rel_err(&fd, &an));
        }
    }
    ensure(worst_nn < 1e-5 && worst_f < 1e-5 && worst_c < 1e-5, || {
        format!("worst relative errors: network {worst_nn:.2e}, objective {worst_f:.2e}, constraints {worst_c:.2e}")
    })?;
    Ok(format!(
        "200 probes each; worst relative errors: network {worst_nn:.1e}, objective {worst_f:.1e}, constraints {worst_c:.1e}"
    ))
}

fn power_system() -> Verdict {
    let case = case9();
    let inj = case.nominal_injections();
    let pf = solve_power_flow(&case, &inj).map_err(|e| e.to_string())?;
    let s = bus_power(&case.ybus(&[]), &pf.voltages());
    let resolved = pf.resolved(&inj);
    let base = case.base_mva;
    let mut worst: f64 = 0.0;
    for i in 0..case.n_bus() {
        let mut p = -s[i].re;
        let mut q = -s[i].im;
        for (k, g) in case.generators.iter().enumerate() {
            if case.bus_index(g.bus) == i {
                p += resolved.p_sg[k] / base;
                q += pf.q_sg[k] / base;
            }
        }
        for (k, r) in case.ibrs.iter().enumerate() {
            if case.bus_index(r.bus) == i {
                p += inj.p_ibr[k] / base;
                q += inj.q_ibr[k] / base;
            }
        }
        for (k, l) in case.loads.iter().enumerate() {
            if case.bus_index(l.bus) == i {
                p -= inj.pd[k] / base;
                q -= inj.qd[k] / base;
            }
        }
        let pq_bus = case.buses[i].kind == BusKind::Pq;
        worst = worst.max(p.abs());
        if pq_bus {
            worst = worst.max(q.abs());
        }
    }
    ensure(worst < 1e-8, || format!("power-flow residual {worst:.2e}"))?;

    let (_, traj) = simulate(&case, &inj, &FaultScenario::none(5.0, 0.005)).map_err(|e| e.to_string())?;
    let d0 = &traj.delta_deg[0];
    let drift = traj
        .delta_deg
        .iter()
        .flat_map(|d| (0..d.len()).map(move |g| ((d[g] - d[0]) - (d0[g] - d0[0])).to_radians().abs()))
        .fold(0.0, f64::max);
    ensure(drift < 1e-3, || format!("unfaulted drift {drift:.2e} rad"))?;

    let smib = |pm: f64| PowerSystemCase {
        base_mva: 100.0,
        buses: vec![
            Bus { id: 1, kind: BusKind::Pv, v_set: 1.0, vmin: 0.9, vmax: 1.1 },
            Bus { id: 2, kind: BusKind::Slack, v_set: 1.0, vmin: 0.9, vmax: 1.1 },
        ],
        lines: vec![
            Line { from: 1, to: 2, r: 0.0, x: 0.4, b: 0.0, rating: 1e3 },
            Line { from: 1, to: 2, r: 0.0, x: 0.4, b: 0.0, rating: 1e3 },
        ],
        generators: vec![machine(1, 0.05, 0.2, pm), machine(2, 1e9, 1e-6, 0.0)],
        ibrs: vec![],
        loads: Vec::<Load>::new(),
    };
    let case = smib(90.0);
    let inj = case.nominal_injections();
    let pf = solve_power_flow(&case, &inj).map_err(|e| e.to_string())?;
    let h = 0.005;
    let model = build_model(&case, &pf.resolved(&inj), &pf, &FaultScenario::none(5.0, h)).map_err(|e| e.to_string())?;
    let (e1, e2) = (model.pre.e_mag[0], model.pre.e_mag[1]);
    let pm = 0.9;
    let p_pre = e1 * e2 / (0.2 + 0.2 + 1e-6);
    let p_post = e1 * e2 / (0.2 + 0.4 + 1e-6);
    let d0 = (pm / p_pre).asin();
    let dm = std::f64::consts::PI - (pm / p_post).asin();
    // Equal areas with zero electrical power during the fault.
    let dcr = ((pm * (dm - d0) + p_post * dm.cos()) / p_post).acos();
    let t_cr = (2.0 * 0.05 * (dcr - d0) / pm).sqrt();
    let stable = |tc: f64| {
        let sc = FaultScenario { line: 0, bus: 1, t_fault: 0.0, t_clear: tc, t_end: 5.0, h };
        compute_tsi(&simulate(&case, &inj, &sc).unwrap().1).unwrap() > 0.0
    };
    let mut k = 1;
    while stable(k as f64 * h) {
        k += 1;
        ensure(k < 400, || "SMIB never loses stability".into())?;
    }
    let (lo, hi) = ((k - 1) as f64 * h, k as f64 * h);
    ensure(lo <= t_cr + h && hi >= t_cr - h, || format!("equal-area t_cr {t_cr:.4} outside [{lo}, {hi}] ± {h}"))?;
    Ok(format!(
        "residual {worst:.1e} p.u.; unfaulted drift {drift:.1e} rad; simulated CCT in [{lo:.3}, {hi:.3}] s vs equal-area {t_cr:.4} s"
    ))
}

fn machine(bus: usize, m: f64, xd: f64, p: f64) -> Generator {
    Generator {
        bus,
        m,
        d: 0.0,
        xd_prime: xd,
        pmin: -1e4,
        pmax: 1e4,
        qmin: -1e4,
        qmax: 1e4,
        cost_a: 0.0,
        cost_b: 0.0,
        cost_c: 0.0,
        p_set: Some(p),
    }
}

fn opf_correctness() -> Verdict {
    let gen = |bus, a, b| Generator {
        pmin: 0.0,
        pmax: 300.0,
        qmin: -300.0,
        qmax: 300.0,
        cost_a: a,
        cost_b: b,
        p_set: None,
        ..machine(bus, 0.1, 0.2, 0.0)
    };
    let case = PowerSystemCase {
        base_mva: 100.0,
        buses: vec![
            Bus { id: 1, kind: BusKind::Slack, v_set: 1.0, vmin: 0.9, vmax: 1.1 },
            Bus { id: 2, kind: BusKind::Pv, v_set: 1.0, vmin: 0.9, vmax: 1.1 },
        ],
        lines: vec![Line { from: 1, to: 2, r: 0.0, x: 0.1, b: 0.0, rating: 1e3 }],
        generators: vec![gen(1, 0.01, 10.0), gen(2, 0.02, 8.0)],
        ibrs: vec![],
        loads: vec![Load { bus: 2, pd: 100.0, qd: 30.0 }],
    };
    let sol = pdipm_solve(&OpfProblem::nominal(&case), &OpfOptions::default()).map_err(|e| e.to_string())?;
    ensure(sol.converged, || "2-bus OPF did not converge".into())?;
    let cost = |pb: f64| {
        let pa = 100.0 - pb;
        0.01 * pa * pa + 10.0 * pa + 0.02 * pb * pb + 8.0 * pb
    };
    let (best_pb, best) = (0..=1_000_000)
        .map(|i| 100.0 * i as f64 / 1e6)
        .map(|pb| (pb, cost(pb)))
        .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let err = (sol.strategy.p_sg[1] - best_pb).abs();
    ensure(err < 1e-4 && (sol.cost - best).abs() < 1e-4, || {
        format!("PDIPM P_B {} cost {} vs grid search {best_pb} {best}", sol.strategy.p_sg[1], sol.cost)
    })?;

    let case = case9();
    let net = load_network(fixture("dbn_e.json")).unwrap();
    let lambdas = [0.0, 36.0, 38.0, 40.0, 42.0, 44.0, 46.0, 48.0, 50.0, 55.0];
    let costs: Vec<(bool, f64)> = lambdas
        .par_iter()
        .map(|&l| {
            let s = pdipm_solve(&OpfProblem::nominal(&case).with_stability(&net, l), &OpfOptions::default()).unwrap();
            (s.converged, s.cost)
        })
        .collect();
    ensure(costs.iter().all(|c| c.0), || format!("non-converged points in the sweep: {costs:?}"))?;
    ensure(costs.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-6), || format!("cost not monotone: {costs:?}"))?;
    Ok(format!(
        "2-bus P_B off by {err:.1e} MW; cost over λ {:?}: {:.2} → {:.2} $/h",
        (lambdas[0], lambdas[9]),
        costs[0].1,
        costs[9].1
    ))
}

fn end_to_end() -> Verdict {
    let case = case9();
    let fault = FaultScenario::load(fixture("fault9.json")).unwrap();
    let net_c: Network64 = load_network(fixture("dbn_c.json")).unwrap();
    let net_e: Network64 = load_network(fixture("dbn_e.json")).unwrap();
    let cfg = ControlConfig {
        ball: ClassPercents { ibr: 10.0, sg: 5.0, load: 5.0 },
        ..ControlConfig::default()
    };
    let base = OpfProblem::nominal(&case);
    let plain = pdipm_solve(&base, &cfg.opf).map_err(|e| e.to_string())?;
    let ball0 = strategy_ball(&case, &plain.features(), &base.forecast, &cfg.ball).map_err(|e| e.to_string())?;
    let attack = pgd_attack(&net_c, &ball0, &AttackConfig::default()).map_err(|e| e.to_string())?;
    ensure(attack.is_some(), || "λ = 0 strategy is not attackable".into())?;

    let verifier = PipelineVerifier { net: &net_c, config: VerifyConfig::new() };
    let report = run_preventive_control(&case, &base, &fault, &net_c, &net_e, &verifier, &cfg).map_err(|e| e.to_string())?;
    let s = report.strategy().ok_or_else(|| format!("loop ended infeasible:\n{}", report.table_csv()))?;
    ensure(s.status.is_safe() && s.lambda > 0.0, || format!("final λ {} status {}", s.lambda, s.status))?;
    ensure(s.cost >= plain.cost - 1e-6, || "certified strategy cheaper than the λ = 0 optimum".into())?;
    let ball = PerturbationBall::new(
        s.ball_lower.iter().zip(&s.ball_upper).map(|(l, u)| 0.5 * (l + u)).collect(),
        s.ball_lower.iter().zip(&s.ball_upper).map(|(l, u)| 0.5 * (u - l)).collect(),
    )
    .unwrap();
    let mcs = monte_carlo_validate(&case, &fault, &ball, 500, 12).map_err(|e| e.to_string())?;
    ensure(mcs.samples == 500 && mcs.dropped == 0 && mcs.unstable == 0, || {
        format!("MCS: {} unstable, {} dropped of {}", mcs.unstable, mcs.dropped, mcs.samples)
    })?;
    let before = monte_carlo_validate(&case, &fault, &ball0, 500, 12).map_err(|e| e.to_string())?;
    Ok(format!(
        "certified at λ = {} ({}) after {} iterations, cost {:.2} vs {:.2} $/h; 0/500 unstable in the final ball (min TSI {:.1}); λ = 0 ball: {}/500 unstable",
        s.lambda,
        s.status,
        report.log.len(),
        s.cost,
        plain.cost,
        mcs.min_tsi,
        before.unstable
    ))
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_certopf"))
        .arg("--out-dir")
        .arg(out)
        .arg("--seed")
        .arg("5")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })
}

const TIMING_KEYS: [&str; 2] = ["timings", "stage_times"];

fn normalized(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: Value = serde_json::from_slice(&bytes).unwrap();
        if let Value::Object(m) = &mut v {
            for k in TIMING_KEYS {
                m.remove(k);
            }
        }
        serde_json::to_vec(&v).unwrap()
    } else {
        bytes
    }
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let case = fixture("case9.json");
    let fault = fixture("fault9.json");
    let (case, fault) = (case.to_str().unwrap(), fault.to_str().unwrap());
    let net_c = fixture("dbn_c.json");
    let net_e = fixture("dbn_e.json");
    let (net_c, net_e) = (net_c.to_str().unwrap(), net_e.to_str().unwrap());
    let center = "[60,69.48,110.02,77.41,90,100,125,30,35,50]";
    let mut compared = 0;
    for (name, run) in [
        ("gen", vec!["gen", "--case", case, "--fault", fault, "--count", "200"]),
        ("attack", vec!["attack", "--network", net_c, "--center", center, "--percent", "ibr=10,sg=5,load=5", "--class-map", case]),
        ("verify", vec!["verify", "--network", net_c, "--center", center, "--percent", "2"]),
        ("opf", vec!["opf", "--case", case, "--network", net_e, "--lambda", "42"]),
        ("control", vec!["control", "--case", case, "--fault", fault, "--net-c", net_c, "--net-e", net_e, "--percent-sg", "5", "--percent-load", "5", "--mcs", "50"]),
        ("simulate", vec!["simulate", "--case", case, "--fault", fault]),
    ] {
        let dirs = [root.path().join(format!("{name}-a")), root.path().join(format!("{name}-b"))];
        for d in &dirs {
            run_cli(d, &run)?;
        }
        if name == "gen" {
            // Training reuses the generated dataset.
            let data = dirs[0].join("dataset.csv");
            let data = data.to_str().unwrap().to_string();
            let tdirs = [root.path().join("train-a"), root.path().join("train-b")];
            for d in &tdirs {
                run_cli(d, &["train", "--data", &data, "--head", "classifier", "--hidden", "8", "--epochs", "30"])?;
            }
            compared += compare_dirs(&tdirs[0], &tdirs[1])?;
        }
        compared += compare_dirs(&dirs[0], &dirs[1])?;
    }
    Ok(format!("7 subcommands run twice; {compared} result files identical (timing fields excluded)"))
}

fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        let (pa, pb) = (a.join(n), b.join(n));
        ensure(pb.exists(), || format!("{n:?} missing in second run"))?;
        ensure(normalized(&pa) == normalized(&pb), || format!("{} differs between runs", pa.display()))?;
    }
    Ok(names.len())
}

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 10] = [
        (1, "bisection trace replay", bisection_trace),
        (2, "bound soundness", soundness),
        (3, "bound ordering", ordering),
        (4, "branch-and-bound completeness", completeness),
        (5, "counterexample validity", counterexamples),
        (6, "gradient fidelity", gradients),
        (7, "power-system oracles", power_system),
        (8, "OPF correctness", opf_correctness),
        (9, "end-to-end preventive control", end_to_end),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
