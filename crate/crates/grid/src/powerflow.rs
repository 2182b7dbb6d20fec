//! Newton-Raphson AC power flow in polar coordinates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{BusKind, Injections, PowerSystemCase};
use crate::{GridError, Result};

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Bus voltage angles (rad), in `buses` order.
    pub theta: Vec<f64>,
    /// Bus voltage magnitudes (p.u.).
    pub vm: Vec<f64>,
    /// Generator active outputs (MW), slack entry resolved by the solve.
    pub p_sg: Vec<f64>,
    /// Generator reactive outputs (MVAr).
    pub q_sg: Vec<f64>,
    pub iterations: usize,
    /// Largest absolute P/Q mismatch at the solution (p.u.).
    pub mismatch: f64,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.theta)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    /// The injections with the slack generator set to its solved output.
    pub fn resolved(&self, inj: &Injections) -> Injections {
        Injections {
            p_sg: self.p_sg.clone(),
            ..inj.clone()
        }
    }
}

/// Complex bus injections `S = V ∘ conj(Y V)` in p.u.
pub fn bus_power(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let vv = DVector::from_column_slice(v);
    let i = y * &vv;
    v.iter().zip(i.iter()).map(|(a, b)| a * b.conj()).collect()
}

/// Partial derivatives of the bus injections with respect to voltage
/// angles and magnitudes.
pub fn dsbus_dv(
    y: &DMatrix<Complex64>,
    v: &[Complex64],
) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = v.len();
    let vv = DVector::from_column_slice(v);
    let ibus = y * &vv;
    let vnorm: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
    let j = Complex64::new(0.0, 1.0);
    let mut d_va = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut d_vm = d_va.clone();
    for r in 0..n {
        for c in 0..n {
            let yrc = y[(r, c)];
            // diag(V) conj(diag(I) - Y diag(V))
            let mut a = -yrc * v[c];
            if r == c {
                a += ibus[r];
            }
            d_va[(r, c)] = j * v[r] * a.conj();
            let mut m = v[r] * (yrc * vnorm[c]).conj();
            if r == c {
                m += ibus[r].conj() * vnorm[r];
            }
            d_vm[(r, c)] = m;
        }
    }
    (d_va, d_vm)
}

/// Solves the power flow for the given injections. SG outputs at PV buses
/// are taken from `inj.p_sg`; the slack entry is ignored and returned
/// solved. IBRs inject `p_ibr + j q_ibr`.
pub fn solve_power_flow(case: &PowerSystemCase, inj: &Injections) -> Result<PowerFlowSolution> {
    solve_power_flow_with(case, inj, &[])
}

/// As [`solve_power_flow`] with some lines out of service.
pub fn solve_power_flow_with(
    case: &PowerSystemCase,
    inj: &Injections,
    removed: &[usize],
) -> Result<PowerFlowSolution> {
    inj.check(case)?;
    if !case.is_connected(removed) {
        return Err(GridError::Topology("network is islanded".into()));
    }
    let n = case.n_bus();
    let y = case.ybus(removed);
    let slack = case.slack_index();
    let (p_spec, q_spec) = inj.bus_injections(case);
    let pv_pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Pq).collect();

    let mut vm: Vec<f64> = case
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.v_set })
        .collect();
    let mut theta = vec![0.0; n];
    let voltages = |vm: &[f64], th: &[f64]| -> Vec<Complex64> {
        vm.iter().zip(th).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
    };
    let mismatch = |v: &[Complex64]| -> Vec<f64> {
        let s = bus_power(&y, v);
        let mut f: Vec<f64> = pv_pq.iter().map(|&i| s[i].re - p_spec[i]).collect();
        f.extend(pq.iter().map(|&i| s[i].im - q_spec[i]));
        f
    };

    let mut iterations = 0;
    let mut v = voltages(&vm, &theta);
    let mut f = mismatch(&v);
    let mut norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while norm >= PF_TOLERANCE {
        if iterations == PF_MAX_ITER || !norm.is_finite() {
            return Err(GridError::PowerFlowDiverged {
                iterations,
                mismatch: norm,
            });
        }
        iterations += 1;
        let (d_va, d_vm) = dsbus_dv(&y, &v);
        let (np, nq) = (pv_pq.len(), pq.len());
        let mut jac = DMatrix::zeros(np + nq, np + nq);
        for (r, &i) in pv_pq.iter().enumerate() {
            for (c, &k) in pv_pq.iter().enumerate() {
                jac[(r, c)] = d_va[(i, k)].re;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, np + c)] = d_vm[(i, k)].re;
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pv_pq.iter().enumerate() {
                jac[(np + r, c)] = d_va[(i, k)].im;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(np + r, np + c)] = d_vm[(i, k)].im;
            }
        }
        let rhs = DVector::from_iterator(f.len(), f.iter().map(|x| -x));
        let dx = jac.lu().solve(&rhs).ok_or(GridError::PowerFlowDiverged {
            iterations,
            mismatch: norm,
        })?;
        for (r, &i) in pv_pq.iter().enumerate() {
            theta[i] += dx[r];
        }
        for (r, &i) in pq.iter().enumerate() {
            vm[i] += dx[np + r];
        }
        v = voltages(&vm, &theta);
        f = mismatch(&v);
        norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }

    let s = bus_power(&y, &v);
    let base = case.base_mva;
    let mut p_sg = inj.p_sg.clone();
    let mut q_sg = vec![0.0; case.generators.len()];
    for (k, g) in case.generators.iter().enumerate() {
        let i = case.bus_index(g.bus);
        // generator output = bus injection minus the other devices there
        let q_other = q_spec[i];
        q_sg[k] = (s[i].im - q_other) * base;
        if i == slack {
            let p_other = p_spec[i] - inj.p_sg[k] / base;
            p_sg[k] = (s[i].re - p_other) * base;
        }
    }
    Ok(PowerFlowSolution {
        theta,
        vm,
        p_sg,
        q_sg,
        iterations,
        mismatch: norm,
    })
}
