//! Classical-model transient stability simulation on Kron-reduced networks.
//!
//! Each SG is a constant EMF `E'` behind `x'd`. Loads become constant shunt
//! admittances at their pre-fault voltage and IBRs constant current
//! injections (pre-fault phasor). The network is reduced to the SG internal
//! nodes for the pre-fault, fault-on and post-fault topologies and the swing
//! equations `M δ'' = Pm - Pe(δ) - D δ'` are integrated with fixed-step RK4.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{FaultScenario, Injections, PowerSystemCase};
use crate::powerflow::{solve_power_flow, PowerFlowSolution};
use crate::{GridError, Result};

/// Admittance of the bolted fault shunt (1e-6 p.u. impedance).
const FAULT_ADMITTANCE: f64 = 1e6;
/// Pairwise angle gap (degrees) declaring divergence.
pub const DIVERGENCE_DEG: f64 = 1000.0;

/// Rotor angles (degrees) and speed deviations (rad/s) on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub delta_deg: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub diverged: bool,
}

impl Trajectory {
    /// Largest pairwise rotor-angle difference over the run (degrees).
    pub fn delta_max_deg(&self) -> f64 {
        self.delta_deg.iter().map(|d| spread(d)).fold(0.0, f64::max)
    }

    pub fn num_generators(&self) -> usize {
        self.delta_deg.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let n = self.num_generators();
        let mut out = String::from("time");
        for g in 0..n {
            out.push_str(&format!(",delta_{g}"));
        }
        out.push('\n');
        for (t, d) in self.times.iter().zip(&self.delta_deg) {
            out.push_str(&format!("{t}"));
            for v in d {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn spread(d: &[f64]) -> f64 {
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Swing dynamics of the SG internal nodes for one network topology:
/// `I = Y E + i0`, `Pe_i = Re(E_i conj(I_i))`.
#[derive(Debug, Clone)]
pub struct SwingSystem {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    pub pm: Vec<f64>,
    pub e_mag: Vec<f64>,
    pub y: DMatrix<Complex64>,
    pub i0: Vec<Complex64>,
}

impl SwingSystem {
    pub fn electrical_power(&self, delta: &[f64]) -> Vec<f64> {
        let e: Vec<Complex64> = self
            .e_mag
            .iter()
            .zip(delta)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect();
        (0..e.len())
            .map(|i| {
                let mut cur = self.i0[i];
                for (k, ek) in e.iter().enumerate() {
                    cur += self.y[(i, k)] * ek;
                }
                (e[i] * cur.conj()).re
            })
            .collect()
    }

    fn rates(&self, delta: &[f64], omega: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pe = self.electrical_power(delta);
        let acc = (0..delta.len())
            .map(|i| (self.pm[i] - pe[i] - self.d[i] * omega[i]) / self.m[i])
            .collect();
        (omega.to_vec(), acc)
    }

    /// One classical RK4 step of length `h`.
    pub fn rk4_step(&self, delta: &[f64], omega: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
        let shift = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(a, b)| a + s * b).collect()
        };
        let (k1d, k1w) = self.rates(delta, omega);
        let (k2d, k2w) = self.rates(&shift(delta, &k1d, h / 2.0), &shift(omega, &k1w, h / 2.0));
        let (k3d, k3w) = self.rates(&shift(delta, &k2d, h / 2.0), &shift(omega, &k2w, h / 2.0));
        let (k4d, k4w) = self.rates(&shift(delta, &k3d, h), &shift(omega, &k3w, h));
        let comb = |x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
            (0..x.len())
                .map(|i| x[i] + h / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]))
                .collect()
        };
        (
            comb(delta, &k1d, &k2d, &k3d, &k4d),
            comb(omega, &k1w, &k2w, &k3w, &k4w),
        )
    }
}

/// Machine initial conditions and the three reduced networks.
#[derive(Debug, Clone)]
pub struct TransientModel {
    pub delta0: Vec<f64>,
    pub pre: SwingSystem,
    pub fault: Option<SwingSystem>,
    pub post: Option<SwingSystem>,
}

struct Reduction {
    y: DMatrix<Complex64>,
    i0: Vec<Complex64>,
}

fn reduce(
    case: &PowerSystemCase,
    removed: &[usize],
    shunts: &[Complex64],
    ibr_current: &[Complex64],
) -> Result<Reduction> {
    let n = case.n_bus();
    let ng = case.generators.len();
    let mut ynn = case.ybus(removed);
    for i in 0..n {
        ynn[(i, i)] += shunts[i];
    }
    let mut ygn = DMatrix::from_element(ng, n, Complex64::new(0.0, 0.0));
    let mut ygg = DMatrix::from_element(ng, ng, Complex64::new(0.0, 0.0));
    for (g, gen) in case.generators.iter().enumerate() {
        let yg = Complex64::new(0.0, -1.0 / gen.xd_prime);
        let b = case.bus_index(gen.bus);
        ynn[(b, b)] += yg;
        ygg[(g, g)] = yg;
        ygn[(g, b)] = -yg;
    }
    let lu = ynn.lu();
    let singular = || GridError::Topology("singular network reduction".into());
    // K = Y_GN Y_NN^{-1}, computed as (Y_NN^{-T} Y_GN^T)^T with symmetric Y
    let k = lu.solve(&ygn.transpose()).ok_or_else(singular)?.transpose();
    if k.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(singular());
    }
    let y = &ygg - &k * ygn.transpose();
    let ivec = nalgebra::DVector::from_column_slice(ibr_current);
    let i0 = &k * ivec;
    Ok(Reduction {
        y,
        i0: i0.iter().copied().collect(),
    })
}

/// Builds the transient model around a converged operating point.
/// `inj` must carry the solved slack output (see [`PowerFlowSolution::resolved`]).
pub fn build_model(
    case: &PowerSystemCase,
    inj: &Injections,
    pf: &PowerFlowSolution,
    scenario: &FaultScenario,
) -> Result<TransientModel> {
    scenario.validate(case)?;
    let n = case.n_bus();
    let base = case.base_mva;
    let v = pf.voltages();

    let mut shunts = vec![Complex64::new(0.0, 0.0); n];
    for (k, l) in case.loads.iter().enumerate() {
        let i = case.bus_index(l.bus);
        let s = Complex64::new(inj.pd[k], inj.qd[k]) / base;
        shunts[i] += s.conj() / (v[i].norm() * v[i].norm());
    }
    let mut ibr_current = vec![Complex64::new(0.0, 0.0); n];
    for (k, r) in case.ibrs.iter().enumerate() {
        let i = case.bus_index(r.bus);
        let q = inj.q_ibr.get(k).copied().unwrap_or(0.0);
        let s = Complex64::new(inj.p_ibr[k], q) / base;
        ibr_current[i] += (s / v[i]).conj();
    }

    let mut e_mag = Vec::new();
    let mut delta0 = Vec::new();
    for (g, gen) in case.generators.iter().enumerate() {
        let vb = v[case.bus_index(gen.bus)];
        let s = Complex64::new(pf.p_sg[g], pf.q_sg[g]) / base;
        let ig = (s / vb).conj();
        let e = vb + Complex64::new(0.0, gen.xd_prime) * ig;
        e_mag.push(e.norm());
        delta0.push(e.arg());
    }

    let system = |red: Reduction, pm: &[f64]| SwingSystem {
        m: case.generators.iter().map(|g| g.m).collect(),
        d: case.generators.iter().map(|g| g.d).collect(),
        pm: pm.to_vec(),
        e_mag: e_mag.clone(),
        y: red.y,
        i0: red.i0,
    };
    let mut pre = system(reduce(case, &[], &shunts, &ibr_current)?, &vec![0.0; e_mag.len()]);
    pre.pm = pre.electrical_power(&delta0);
    if scenario.is_disturbance_free() {
        return Ok(TransientModel {
            delta0,
            pre,
            fault: None,
            post: None,
        });
    }
    if !case.is_connected(&[scenario.line]) {
        return Err(GridError::Topology(format!(
            "tripping line {} islands the network",
            scenario.line
        )));
    }
    let mut fault_shunts = shunts.clone();
    fault_shunts[case.bus_index(scenario.bus)] += Complex64::new(FAULT_ADMITTANCE, 0.0);
    let fault = system(reduce(case, &[], &fault_shunts, &ibr_current)?, &pre.pm);
    let post = system(reduce(case, &[scenario.line], &shunts, &ibr_current)?, &pre.pm);
    Ok(TransientModel {
        delta0,
        pre,
        fault: Some(fault),
        post: Some(post),
    })
}

/// Integrates the model over the scenario. The topology used for the step
/// `[t, t + h]` is the one in force at its midpoint.
pub fn integrate(model: &TransientModel, scenario: &FaultScenario) -> Trajectory {
    let h = scenario.h;
    let steps = (scenario.t_end / h).round() as usize;
    let mut delta = model.delta0.clone();
    let mut omega = vec![0.0; delta.len()];
    let deg = |d: &[f64]| d.iter().map(|x| x.to_degrees()).collect::<Vec<_>>();
    let mut traj = Trajectory {
        times: vec![0.0],
        delta_deg: vec![deg(&delta)],
        omega: vec![omega.clone()],
        diverged: false,
    };
    for k in 0..steps {
        let mid = (k as f64 + 0.5) * h;
        let sys = match &model.fault {
            Some(_) if mid >= scenario.t_clear => model.post.as_ref().expect("built with fault"),
            Some(f) if mid >= scenario.t_fault => f,
            _ => &model.pre,
        };
        (delta, omega) = sys.rk4_step(&delta, &omega, h);
        let d = deg(&delta);
        let gap = spread(&d);
        traj.times.push((k + 1) as f64 * h);
        traj.delta_deg.push(d);
        traj.omega.push(omega.clone());
        if !gap.is_finite() || gap > DIVERGENCE_DEG {
            traj.diverged = true;
            break;
        }
    }
    traj
}

/// Runs the simulation from a converged operating point.
pub fn run_tds(
    case: &PowerSystemCase,
    inj: &Injections,
    pf: &PowerFlowSolution,
    scenario: &FaultScenario,
) -> Result<Trajectory> {
    let model = build_model(case, inj, pf, scenario)?;
    Ok(integrate(&model, scenario))
}

/// Solves the power flow for `inj` and simulates the scenario.
pub fn simulate(
    case: &PowerSystemCase,
    inj: &Injections,
    scenario: &FaultScenario,
) -> Result<(PowerFlowSolution, Trajectory)> {
    let pf = solve_power_flow(case, inj)?;
    let resolved = pf.resolved(inj);
    let traj = run_tds(case, &resolved, &pf, scenario)?;
    Ok((pf, traj))
}

/// Transient stability index of a maximum angle gap in degrees.
pub fn tsi_from_delta(delta_max_deg: f64) -> f64 {
    (360.0 - delta_max_deg) / (360.0 + delta_max_deg) * 100.0
}

/// TSI of a trajectory; stable iff positive.
pub fn compute_tsi(traj: &Trajectory) -> Result<f64> {
    if traj.num_generators() < 2 {
        return Err(GridError::SingleGenerator);
    }
    Ok(tsi_from_delta(traj.delta_max_deg()))
}
