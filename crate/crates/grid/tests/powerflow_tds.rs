use std::path::PathBuf;

use certopf_grid::case::{Bus, BusKind, Generator, Line, Load};
use certopf_grid::powerflow::bus_power;
use certopf_grid::tds::{build_model, SwingSystem};
use certopf_grid::*;
use num_complex::Complex64;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn case9() -> PowerSystemCase {
    PowerSystemCase::load(fixture("case9.json")).unwrap()
}

fn bus(id: usize, kind: BusKind, v: f64) -> Bus {
    Bus { id, kind, v_set: v, vmin: 0.9, vmax: 1.1 }
}

fn machine(bus: usize, m: f64, xd: f64, p: f64) -> Generator {
    Generator {
        bus, m, d: 0.0, xd_prime: xd, pmin: -1e4, pmax: 1e4, qmin: -1e4, qmax: 1e4,
        cost_a: 0.0, cost_b: 0.0, cost_c: 0.0, p_set: Some(p),
    }
}

fn line(from: usize, to: usize, x: f64) -> Line {
    Line { from, to, r: 0.0, x, b: 0.0, rating: 1e3 }
}

/// Independent Gauss-Seidel power flow (rectangular complex form).
fn gauss_seidel(case: &PowerSystemCase, inj: &Injections) -> Vec<Complex64> {
    let n = case.n_bus();
    let y = case.ybus(&[]);
    let base = case.base_mva;
    let mut s = vec![Complex64::new(0.0, 0.0); n];
    for (g, p) in case.generators.iter().zip(&inj.p_sg) {
        s[case.bus_index(g.bus)] += Complex64::new(p / base, 0.0);
    }
    for (r, p) in case.ibrs.iter().zip(&inj.p_ibr) {
        s[case.bus_index(r.bus)] += Complex64::new(p / base, 0.0);
    }
    for (k, l) in case.loads.iter().enumerate() {
        s[case.bus_index(l.bus)] -= Complex64::new(inj.pd[k], inj.qd[k]) / base;
    }
    let mut v: Vec<Complex64> = case
        .buses
        .iter()
        .map(|b| Complex64::new(if b.kind == BusKind::Pq { 1.0 } else { b.v_set }, 0.0))
        .collect();
    for _ in 0..100_000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let kind = case.buses[i].kind;
            if kind == BusKind::Slack {
                continue;
            }
            let sum: Complex64 = (0..n).filter(|&k| k != i).map(|k| y[(i, k)] * v[k]).sum();
            let mut si = s[i];
            if kind == BusKind::Pv {
                let q = (v[i] * (sum + y[(i, i)] * v[i]).conj()).im;
                si = Complex64::new(s[i].re, q);
            }
            let mut nv = ((si / v[i]).conj() - sum) / y[(i, i)];
            if kind == BusKind::Pv {
                nv = nv * (case.buses[i].v_set / nv.norm());
            }
            change = change.max((nv - v[i]).norm());
            v[i] = nv;
        }
        if change < 1e-13 {
            break;
        }
    }
    v
}

#[test]
fn nine_bus_power_flow_matches_gauss_seidel() {
    let case = case9();
    let inj = case.nominal_injections();
    let pf = solve_power_flow(&case, &inj).unwrap();
    assert!(pf.mismatch < 1e-8);
    // residual recomputed from the solved voltages
    let s = bus_power(&case.ybus(&[]), &pf.voltages());
    let resolved = pf.resolved(&inj);
    for i in 0..case.n_bus() {
        let mut p = -s[i].re;
        for (g, v) in case.generators.iter().zip(&resolved.p_sg) {
            if case.bus_index(g.bus) == i {
                p += v / case.base_mva;
            }
        }
        for (r, v) in case.ibrs.iter().zip(&inj.p_ibr) {
            if case.bus_index(r.bus) == i {
                p += v / case.base_mva;
            }
        }
        for (k, l) in case.loads.iter().enumerate() {
            if case.bus_index(l.bus) == i {
                p -= inj.pd[k] / case.base_mva;
            }
        }
        assert!(p.abs() < 1e-8, "bus {i}: P residual {p}");
    }
    let gs = gauss_seidel(&case, &resolved);
    for (i, v) in gs.iter().enumerate() {
        assert!((v.norm() - pf.vm[i]).abs() < 1e-6, "bus {i} magnitude");
        assert!((v.arg() - pf.theta[i]).abs() < 1e-6, "bus {i} angle");
    }
}

fn smib(pm_mw: f64) -> PowerSystemCase {
    PowerSystemCase {
        base_mva: 100.0,
        buses: vec![bus(1, BusKind::Pv, 1.0), bus(2, BusKind::Slack, 1.0)],
        lines: vec![line(1, 2, 0.4), line(1, 2, 0.4)],
        generators: vec![machine(1, 0.05, 0.2, pm_mw), machine(2, 1e9, 1e-6, 0.0)],
        ibrs: vec![],
        loads: vec![],
    }
}

fn smib_stable(case: &PowerSystemCase, t_clear: f64, h: f64) -> bool {
    let sc = FaultScenario { line: 0, bus: 1, t_fault: 0.0, t_clear, t_end: 5.0, h };
    let (_, traj) = simulate(case, &case.nominal_injections(), &sc).unwrap();
    compute_tsi(&traj).unwrap() > 0.0
}

#[test]
fn smib_critical_clearing_time_matches_equal_area() {
    let case = smib(90.0);
    let inj = case.nominal_injections();
    let pf = solve_power_flow(&case, &inj).unwrap();
    let sc = FaultScenario { line: 0, bus: 1, t_fault: 0.0, t_clear: 0.1, t_end: 5.0, h: 0.005 };
    let model = build_model(&case, &pf.resolved(&inj), &pf, &sc).unwrap();
    let (e1, e2) = (model.pre.e_mag[0], model.pre.e_mag[1]);
    let pm = 0.9;
    let x_pre = 0.2 + 0.2 + 1e-6;
    let x_post = 0.2 + 0.4 + 1e-6;
    let (p_pre, p_post) = (e1 * e2 / x_pre, e1 * e2 / x_post);
    let d0 = (pm / p_pre).asin();
    assert!((model.delta0[0] - model.delta0[1] - d0).abs() < 1e-6);
    let dm = std::f64::consts::PI - (pm / p_post).asin();
    let dcr = ((pm * (dm - d0) + p_post * dm.cos()) / p_post).acos();
    let t_cr = (2.0 * 0.05 * (dcr - d0) / pm).sqrt();

    let h = 0.005;
    let mut k = 1;
    while smib_stable(&case, k as f64 * h, h) {
        k += 1;
        assert!(k < 200, "never unstable");
    }
    let (stable, unstable) = ((k - 1) as f64 * h, k as f64 * h);
    assert!(stable <= t_cr + h && unstable >= t_cr - h, "t_cr {t_cr} not in [{stable}, {unstable}] ± h");
}

#[test]
fn undamped_swing_conserves_energy() {
    let case = smib(90.0);
    let inj = case.nominal_injections();
    let pf = solve_power_flow(&case, &inj).unwrap();
    let model = build_model(&case, &pf.resolved(&inj), &pf, &FaultScenario::none(5.0, 0.005)).unwrap();
    let sys: &SwingSystem = &model.pre;
    let energy = |d: &[f64], w: &[f64]| -> f64 {
        let mut e = 0.0;
        for i in 0..2 {
            e += 0.5 * sys.m[i] * w[i] * w[i] - sys.pm[i] * d[i];
        }
        let b = sys.y[(0, 1)].im;
        e - sys.e_mag[0] * sys.e_mag[1] * b * (d[0] - d[1]).cos()
    };
    let mut d = vec![model.delta0[0] + 0.3, model.delta0[1]];
    let mut w = vec![1.0, 0.0];
    let e0 = energy(&d, &w);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        (d, w) = sys.rk4_step(&d, &w, 0.005);
        worst = worst.max((energy(&d, &w) - e0).abs());
    }
    assert!(worst < 1e-6, "energy drift {worst}");
}

#[test]
fn unfaulted_nine_bus_stays_at_equilibrium() {
    let case = case9();
    let (_, traj) = simulate(&case, &case.nominal_injections(), &FaultScenario::none(5.0, 0.005)).unwrap();
    let d0 = &traj.delta_deg[0];
    for d in &traj.delta_deg {
        for g in 0..d.len() {
            for k in 0..d.len() {
                let drift = ((d[g] - d[k]) - (d0[g] - d0[k])).to_radians().abs();
                assert!(drift < 1e-3);
            }
        }
    }
    assert!(compute_tsi(&traj).unwrap() > 0.0);
}

#[test]
fn halving_the_step_barely_moves_the_peak_angle() {
    let case = case9();
    let run = |h: f64| {
        let sc = FaultScenario { line: 5, bus: 7, t_fault: 0.0, t_clear: 0.2, t_end: 5.0, h };
        simulate(&case, &case.nominal_injections(), &sc).unwrap().1
    };
    let (a, b) = (run(0.005), run(0.0025));
    assert!(!a.diverged && !b.diverged);
    let diff = (a.delta_max_deg() - b.delta_max_deg()).to_radians().abs();
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn symmetric_machines_swing_together() {
    let case = PowerSystemCase {
        base_mva: 100.0,
        buses: vec![bus(1, BusKind::Slack, 1.0), bus(2, BusKind::Pv, 1.0), bus(3, BusKind::Pq, 1.0)],
        lines: vec![line(1, 3, 0.1), line(2, 3, 0.1), line(1, 2, 0.3)],
        generators: vec![machine(1, 0.1, 0.2, 50.0), machine(2, 0.1, 0.2, 50.0)],
        ibrs: vec![],
        loads: vec![Load { bus: 3, pd: 100.0, qd: 20.0 }],
    };
    let sc = FaultScenario { line: 2, bus: 3, t_fault: 0.0, t_clear: 0.1, t_end: 5.0, h: 0.005 };
    let (_, traj) = simulate(&case, &case.nominal_injections(), &sc).unwrap();
    let gap0 = (traj.delta_deg[0][0] - traj.delta_deg[0][1]).abs();
    assert!(gap0 < 1e-9);
    assert!((traj.delta_max_deg() - gap0).abs() < 1e-9);
    assert!((compute_tsi(&traj).unwrap() - 100.0).abs() < 1e-6);
}

#[test]
fn islanding_fault_is_a_topology_error() {
    let mut case = smib(50.0);
    case.lines.truncate(1);
    let sc = FaultScenario { line: 0, bus: 1, t_fault: 0.0, t_clear: 0.1, t_end: 1.0, h: 0.005 };
    assert!(matches!(
        simulate(&case, &case.nominal_injections(), &sc),
        Err(GridError::Topology(_))
    ));
}

#[test]
fn trajectory_grid_is_uniform() {
    let case = case9();
    let sc = FaultScenario { line: 5, bus: 7, t_fault: 0.1, t_clear: 0.2, t_end: 2.0, h: 0.01 };
    let (_, traj) = simulate(&case, &case.nominal_injections(), &sc).unwrap();
    assert_eq!(traj.times.len(), 201);
    for (k, t) in traj.times.iter().enumerate() {
        assert!((t - k as f64 * 0.01).abs() < 1e-12);
    }
    let csv = traj.to_csv();
    assert!(csv.starts_with("time,delta_0,delta_1,delta_2\n"));
}
