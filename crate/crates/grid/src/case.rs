//! Network data, fault scenarios and admittance matrices.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{GridError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Voltage magnitude setpoint (p.u.) for slack and PV buses.
    #[serde(default = "one")]
    pub v_set: f64,
    #[serde(default = "vmin_default")]
    pub vmin: f64,
    #[serde(default = "vmax_default")]
    pub vmax: f64,
}

fn one() -> f64 {
    1.0
}
fn vmin_default() -> f64 {
    0.9
}
fn vmax_default() -> f64 {
    1.1
}

/// Pi-model branch in per unit; `rating` in MVA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    pub rating: f64,
}

/// Synchronous generator: classical machine data, limits in MW/MVAr and
/// quadratic cost `a P² + b P + c` with P in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    /// Inertia constant M (p.u. power · s² / rad).
    pub m: f64,
    /// Damping (p.u. power · s / rad).
    #[serde(default)]
    pub d: f64,
    pub xd_prime: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    pub cost_c: f64,
    /// Base-case dispatch (MW); defaults to the midpoint of the limits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_set: Option<f64>,
}

/// Inverter-based resource with rated apparent power (MVA), curtailment
/// cost ($/MWh) and active-power forecast (MW).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ibr {
    pub bus: usize,
    pub s_rated: f64,
    pub curtail_cost: f64,
    pub forecast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub pd: f64,
    pub qd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSystemCase {
    #[serde(default = "base_default")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub ibrs: Vec<Ibr>,
    #[serde(default)]
    pub loads: Vec<Load>,
}

fn base_default() -> f64 {
    100.0
}

impl PowerSystemCase {
    pub fn from_json(text: &str) -> Result<Self> {
        let case: Self = serde_json::from_str(text)?;
        case.validate()?;
        Ok(case)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GridError::InvalidCase(msg));
        if !(self.base_mva > 0.0) {
            return bad("base_mva must be positive".into());
        }
        let slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack != 1 {
            return bad(format!("expected exactly one slack bus, found {slack}"));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if seen.insert(b.id, i).is_some() {
                return bad(format!("duplicate bus id {}", b.id));
            }
            if !(b.vmin <= b.vmax) || !b.vmin.is_finite() || !b.vmax.is_finite() {
                return bad(format!("bus {}: voltage limits", b.id));
            }
        }
        let known = |id: usize| seen.contains_key(&id);
        for (i, l) in self.lines.iter().enumerate() {
            if !known(l.from) || !known(l.to) || l.from == l.to {
                return bad(format!("line {i}: bad endpoints {}-{}", l.from, l.to));
            }
            if !(l.rating > 0.0) {
                return bad(format!("line {i}: rating must be positive"));
            }
            if l.r == 0.0 && l.x == 0.0 {
                return bad(format!("line {i}: zero impedance"));
            }
        }
        let mut gen_buses = HashMap::new();
        for (i, g) in self.generators.iter().enumerate() {
            if !known(g.bus) {
                return bad(format!("generator {i}: unknown bus {}", g.bus));
            }
            if gen_buses.insert(g.bus, i).is_some() {
                return bad(format!("bus {} has more than one generator", g.bus));
            }
            if !(g.m > 0.0) || !(g.xd_prime > 0.0) {
                return bad(format!("generator {i}: M and x'd must be positive"));
            }
            let finite = [g.pmin, g.pmax, g.qmin, g.qmax].iter().all(|v| v.is_finite());
            if !finite || g.pmin > g.pmax || g.qmin > g.qmax {
                return bad(format!("generator {i}: limits"));
            }
        }
        for b in &self.buses {
            if b.kind != BusKind::Pq && !gen_buses.contains_key(&b.id) {
                return bad(format!("bus {} is {:?} but has no generator", b.id, b.kind));
            }
        }
        for (i, r) in self.ibrs.iter().enumerate() {
            if !known(r.bus) || !(r.s_rated > 0.0) || r.forecast < 0.0 || r.forecast > r.s_rated {
                return bad(format!("IBR {i}: bus, rating or forecast"));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if !known(l.bus) {
                return bad(format!("load {i}: unknown bus {}", l.bus));
            }
        }
        Ok(())
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: usize) -> usize {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .unwrap_or_else(|| panic!("unknown bus id {id}"))
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Generator position at the slack bus.
    pub fn slack_generator(&self) -> usize {
        let id = self.buses[self.slack_index()].id;
        self.generators
            .iter()
            .position(|g| g.bus == id)
            .expect("validated slack bus has a generator")
    }

    /// Bus admittance matrix, optionally without some lines.
    pub fn ybus(&self, removed: &[usize]) -> DMatrix<Complex64> {
        let n = self.n_bus();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (k, l) in self.lines.iter().enumerate() {
            if removed.contains(&k) {
                continue;
            }
            let (i, j) = (self.bus_index(l.from), self.bus_index(l.to));
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(l.r, l.x);
            let sh = Complex64::new(0.0, l.b / 2.0);
            y[(i, i)] += ys + sh;
            y[(j, j)] += ys + sh;
            y[(i, j)] -= ys;
            y[(j, i)] -= ys;
        }
        y
    }

    /// True when every bus reaches the slack bus through in-service lines.
    pub fn is_connected(&self, removed: &[usize]) -> bool {
        let n = self.n_bus();
        let mut adj = vec![Vec::new(); n];
        for (k, l) in self.lines.iter().enumerate() {
            if !removed.contains(&k) {
                let (i, j) = (self.bus_index(l.from), self.bus_index(l.to));
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.slack_index()];
        seen[stack[0]] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Base-case injections: SGs at `p_set` (or the midpoint of their
    /// limits), IBRs at their forecasts, loads at their nominal values.
    pub fn nominal_injections(&self) -> Injections {
        Injections {
            p_ibr: self.ibrs.iter().map(|r| r.forecast).collect(),
            q_ibr: vec![0.0; self.ibrs.len()],
            p_sg: self.generators.iter().map(|g| g.p_set.unwrap_or(0.5 * (g.pmin + g.pmax))).collect(),
            pd: self.loads.iter().map(|l| l.pd).collect(),
            qd: self.loads.iter().map(|l| l.qd).collect(),
        }
    }

    /// Number of entries of the feature vector `[P_IBR, P_SG, Pd, Qd]`.
    pub fn feature_dim(&self) -> usize {
        self.ibrs.len() + self.generators.len() + 2 * self.loads.len()
    }

    /// Column names of the feature vector.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_dim());
        names.extend(self.ibrs.iter().map(|r| format!("ibr_{}", r.bus)));
        names.extend(self.generators.iter().map(|g| format!("sg_{}", g.bus)));
        names.extend(self.loads.iter().map(|l| format!("pd_{}", l.bus)));
        names.extend(self.loads.iter().map(|l| format!("qd_{}", l.bus)));
        names
    }

    /// Device class of every feature entry.
    pub fn feature_classes(&self) -> Vec<FeatureClass> {
        let mut c = vec![FeatureClass::Ibr; self.ibrs.len()];
        c.extend(vec![FeatureClass::Sg; self.generators.len()]);
        c.extend(vec![FeatureClass::Load; 2 * self.loads.len()]);
        c
    }
}

/// Device class of a feature entry, used for percent-radius balls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureClass {
    Ibr,
    Sg,
    Load,
}

/// Power injections in MW / MVAr, one entry per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p_ibr: Vec<f64>,
    #[serde(default)]
    pub q_ibr: Vec<f64>,
    pub p_sg: Vec<f64>,
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
}

impl Injections {
    /// Feature vector `[P_IBR, P_SG, Pd, Qd]`.
    pub fn features(&self) -> Vec<f64> {
        let mut x = self.p_ibr.clone();
        x.extend(&self.p_sg);
        x.extend(&self.pd);
        x.extend(&self.qd);
        x
    }

    pub fn from_features(case: &PowerSystemCase, x: &[f64]) -> Result<Self> {
        if x.len() != case.feature_dim() {
            return Err(GridError::Dimension {
                expected: case.feature_dim(),
                got: x.len(),
            });
        }
        let (ni, ng, nl) = (case.ibrs.len(), case.generators.len(), case.loads.len());
        Ok(Self {
            p_ibr: x[..ni].to_vec(),
            q_ibr: vec![0.0; ni],
            p_sg: x[ni..ni + ng].to_vec(),
            pd: x[ni + ng..ni + ng + nl].to_vec(),
            qd: x[ni + ng + nl..].to_vec(),
        })
    }

    pub(crate) fn check(&self, case: &PowerSystemCase) -> Result<()> {
        let q_ok = self.q_ibr.is_empty() || self.q_ibr.len() == case.ibrs.len();
        if self.p_ibr.len() != case.ibrs.len()
            || !q_ok
            || self.p_sg.len() != case.generators.len()
            || self.pd.len() != case.loads.len()
            || self.qd.len() != case.loads.len()
        {
            return Err(GridError::InvalidCase("injection vector sizes do not match the case".into()));
        }
        Ok(())
    }

    /// Net specified complex injection per bus in p.u. (generation minus load),
    /// excluding SG reactive power.
    pub(crate) fn bus_injections(&self, case: &PowerSystemCase) -> (Vec<f64>, Vec<f64>) {
        let n = case.n_bus();
        let base = case.base_mva;
        let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
        for (g, &v) in case.generators.iter().zip(&self.p_sg) {
            p[case.bus_index(g.bus)] += v / base;
        }
        for (k, r) in case.ibrs.iter().enumerate() {
            let i = case.bus_index(r.bus);
            p[i] += self.p_ibr[k] / base;
            q[i] += self.q_ibr.get(k).copied().unwrap_or(0.0) / base;
        }
        for (k, l) in case.loads.iter().enumerate() {
            let i = case.bus_index(l.bus);
            p[i] -= self.pd[k] / base;
            q[i] -= self.qd[k] / base;
        }
        (p, q)
    }
}

/// Three-phase bus fault cleared by tripping a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    /// Index into `lines` of the line removed at clearing.
    pub line: usize,
    /// Bus id where the fault is applied.
    pub bus: usize,
    pub t_fault: f64,
    pub t_clear: f64,
    #[serde(default = "t_end_default")]
    pub t_end: f64,
    #[serde(default = "h_default")]
    pub h: f64,
}

fn t_end_default() -> f64 {
    5.0
}
fn h_default() -> f64 {
    0.005
}

impl FaultScenario {
    /// Scenario without any disturbance over `[0, t_end]`.
    pub fn none(t_end: f64, h: f64) -> Self {
        Self {
            line: usize::MAX,
            bus: usize::MAX,
            t_fault: t_end,
            t_clear: t_end,
            t_end,
            h,
        }
    }

    pub fn is_disturbance_free(&self) -> bool {
        self.t_fault >= self.t_end
    }

    pub fn validate(&self, case: &PowerSystemCase) -> Result<()> {
        let bad = |m: &str| Err(GridError::InvalidFault(m.into()));
        if !(self.h > 0.0) || !(self.t_end > 0.0) {
            return bad("step and end time must be positive");
        }
        if self.is_disturbance_free() {
            return Ok(());
        }
        if !(0.0 <= self.t_fault && self.t_fault < self.t_clear && self.t_clear < self.t_end) {
            return bad("need 0 <= t_fault < t_clear < t_end");
        }
        if self.line >= case.lines.len() {
            return bad("faulted line index out of range");
        }
        if !case.buses.iter().any(|b| b.id == self.bus) {
            return bad("fault bus not in case");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
