//! AC optimal power flow with an optional neural stability constraint,
//! solved by a primal-dual interior-point method.
//!
//! Decision vector (per unit, radians): `[Θ, Vm, P_SG, Q_SG, P_IBR, Q_IBR]`.

use certopf_core::Network64;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{Injections, PowerSystemCase};
use crate::powerflow::{bus_power, dsbus_dv};
use crate::{GridError, Result};

type CMat = DMatrix<Complex64>;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Offsets of the variable blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub nb: usize,
    pub ng: usize,
    pub ni: usize,
}

impl VarLayout {
    pub fn of(case: &PowerSystemCase) -> Self {
        Self {
            nb: case.n_bus(),
            ng: case.generators.len(),
            ni: case.ibrs.len(),
        }
    }
    pub fn va(&self) -> usize {
        0
    }
    pub fn vm(&self) -> usize {
        self.nb
    }
    pub fn pg(&self) -> usize {
        2 * self.nb
    }
    pub fn qg(&self) -> usize {
        2 * self.nb + self.ng
    }
    pub fn pr(&self) -> usize {
        2 * self.nb + 2 * self.ng
    }
    pub fn qr(&self) -> usize {
        2 * self.nb + 2 * self.ng + self.ni
    }
    pub fn len(&self) -> usize {
        2 * (self.nb + self.ng + self.ni)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpfOptions {
    /// Tolerance on the scaled feasibility, gradient, complementarity and
    /// cost-change conditions.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary factor.
    pub xi: f64,
    /// Barrier reduction factor.
    pub sigma: f64,
    /// Initial slack and barrier value.
    pub z0: f64,
    /// Gauss-Newton weight κ/μ on the stability constraint curvature.
    pub nn_curvature: f64,
    /// The constraint enforces `DBN-E(x) >= λ + strict_margin`.
    pub strict_margin: f64,
    /// Backtrack on the barrier Lagrangian when a full step worsens both
    /// feasibility and stationarity.
    pub step_control: bool,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 150,
            xi: 0.995,
            sigma: 0.1,
            z0: 0.1,
            nn_curvature: 1e-2,
            strict_margin: 1e-6,
            step_control: true,
        }
    }
}

/// `DBN-E(x) >= λ` with the regressor evaluated on `[P_IBR, P_SG, Pd, Qd]`.
#[derive(Debug, Clone, Copy)]
pub struct StabilityConstraint<'a> {
    pub net: &'a Network64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct OpfProblem<'a> {
    pub case: &'a PowerSystemCase,
    /// Available IBR output P̄_IBR (MW).
    pub forecast: Vec<f64>,
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
    pub stability: Option<StabilityConstraint<'a>>,
}

impl<'a> OpfProblem<'a> {
    /// Plain OPF at the case's nominal forecasts and loads.
    pub fn nominal(case: &'a PowerSystemCase) -> Self {
        Self {
            case,
            forecast: case.ibrs.iter().map(|r| r.forecast).collect(),
            pd: case.loads.iter().map(|l| l.pd).collect(),
            qd: case.loads.iter().map(|l| l.qd).collect(),
            stability: None,
        }
    }

    pub fn with_stability(mut self, net: &'a Network64, lambda: f64) -> Self {
        self.stability = Some(StabilityConstraint { net, lambda });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.case;
        let dim = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(GridError::Dimension { expected, got })
            }
        };
        dim(c.ibrs.len(), self.forecast.len())?;
        dim(c.loads.len(), self.pd.len())?;
        dim(c.loads.len(), self.qd.len())?;
        if self.forecast.iter().any(|f| !(*f >= 0.0)) {
            return Err(GridError::InvalidConfig("IBR forecasts must be >= 0".into()));
        }
        if let Some(s) = &self.stability {
            if s.net.head() != certopf_core::nn::Head::Regressor {
                return Err(GridError::InvalidConfig("stability constraint needs a regressor network".into()));
            }
            dim(c.feature_dim(), s.net.input_dim())?;
            if !(0.0..100.0).contains(&s.lambda) && s.lambda.is_finite() {
                return Err(GridError::InvalidConfig(format!("λ = {} outside [0, 100)", s.lambda)));
            }
        }
        for g in &c.generators {
            if !(g.pmin <= g.pmax && g.qmin <= g.qmax) {
                return Err(GridError::InvalidCase(format!("generator at bus {} has empty limits", g.bus)));
            }
        }
        Ok(())
    }

    /// Feature vector `[P_IBR, P_SG, Pd, Qd]` (MW) of a decision vector.
    pub fn features(&self, z: &[f64]) -> Vec<f64> {
        let l = VarLayout::of(self.case);
        let base = self.case.base_mva;
        let mut x: Vec<f64> = z[l.pr()..l.pr() + l.ni].iter().map(|v| v * base).collect();
        x.extend(z[l.pg()..l.pg() + l.ng].iter().map(|v| v * base));
        x.extend_from_slice(&self.pd);
        x.extend_from_slice(&self.qd);
        x
    }
}

/// Generation cost plus curtailment cost ($/h), its gradient and the
/// diagonal of its Hessian, for a per-unit decision vector.
pub fn evaluate_objective(case: &PowerSystemCase, forecast: &[f64], z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let l = VarLayout::of(case);
    let base = case.base_mva;
    let mut f = 0.0;
    let mut grad = vec![0.0; l.len()];
    let mut hess = vec![0.0; l.len()];
    for (k, g) in case.generators.iter().enumerate() {
        let p = z[l.pg() + k] * base;
        f += g.cost_a * p * p + g.cost_b * p + g.cost_c;
        grad[l.pg() + k] = (2.0 * g.cost_a * p + g.cost_b) * base;
        hess[l.pg() + k] = 2.0 * g.cost_a * base * base;
    }
    for (k, r) in case.ibrs.iter().enumerate() {
        let p = z[l.pr() + k] * base;
        f += r.curtail_cost * (forecast[k] - p);
        grad[l.pr() + k] = -r.curtail_cost * base;
    }
    (f, grad, hess)
}

#[derive(Debug, Clone)]
pub struct NnConstraint {
    /// `λ - DBN-E(x)`; feasible when `<= 0`.
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Gauss-Newton curvature `κ g gᵀ`.
    pub hessian: DMatrix<f64>,
}

/// Value, gradient with respect to the decision vector and Gauss-Newton
/// Hessian of the stability constraint `λ - DBN-E(x)`.
pub fn nn_constraint(
    problem: &OpfProblem<'_>,
    net: &Network64,
    lambda: f64,
    kappa: f64,
    z: &[f64],
) -> Result<NnConstraint> {
    let case = problem.case;
    let l = VarLayout::of(case);
    if net.input_dim() != case.feature_dim() {
        return Err(GridError::Dimension {
            expected: case.feature_dim(),
            got: net.input_dim(),
        });
    }
    let x = problem.features(z);
    let (tsi, gx) = net.input_gradient(&x)?;
    let base = case.base_mva;
    let mut gradient = vec![0.0; l.len()];
    for k in 0..l.ni {
        gradient[l.pr() + k] = -gx[k] * base;
    }
    for k in 0..l.ng {
        gradient[l.pg() + k] = -gx[l.ni + k] * base;
    }
    let g = DVector::from_column_slice(&gradient);
    Ok(NnConstraint {
        value: lambda - tsi,
        hessian: &g * g.transpose() * kappa,
        gradient,
    })
}

/// From/to branch admittance rows and bus connections.
struct Branches {
    yf: CMat,
    yt: CMat,
    f: Vec<usize>,
    t: Vec<usize>,
    /// Squared rating in p.u.; `None` for unlimited lines.
    limit: Vec<Option<f64>>,
}

impl Branches {
    fn of(case: &PowerSystemCase) -> Self {
        let (nl, nb) = (case.lines.len(), case.n_bus());
        let zero = Complex64::new(0.0, 0.0);
        let mut yf = CMat::from_element(nl, nb, zero);
        let mut yt = yf.clone();
        let (mut f, mut t, mut limit) = (Vec::new(), Vec::new(), Vec::new());
        for (k, ln) in case.lines.iter().enumerate() {
            let (i, j) = (case.bus_index(ln.from), case.bus_index(ln.to));
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(ln.r, ln.x);
            let sh = Complex64::new(0.0, ln.b / 2.0);
            yf[(k, i)] = ys + sh;
            yf[(k, j)] = -ys;
            yt[(k, j)] = ys + sh;
            yt[(k, i)] = -ys;
            f.push(i);
            t.push(j);
            let r = ln.rating / case.base_mva;
            limit.push((ln.rating > 0.0).then_some(r * r));
        }
        Self { yf, yt, f, t, limit }
    }
}

/// Branch flows `S = V_end conj(Y_br V)` and their derivatives.
fn dsbr_dv(ybr: &CMat, ends: &[usize], v: &[Complex64]) -> (Vec<Complex64>, CMat, CMat) {
    let (nl, nb) = ybr.shape();
    let i = ybr * DVector::from_column_slice(v);
    let vnorm: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
    let s: Vec<Complex64> = (0..nl).map(|k| v[ends[k]] * i[k].conj()).collect();
    let mut d_va = CMat::zeros(nl, nb);
    let mut d_vm = CMat::zeros(nl, nb);
    for k in 0..nl {
        let e = ends[k];
        for c in 0..nb {
            let mut a = -v[e] * (ybr[(k, c)] * v[c]).conj();
            let mut m = v[e] * (ybr[(k, c)] * vnorm[c]).conj();
            if c == e {
                a += i[k].conj() * v[e];
                m += i[k].conj() * vnorm[e];
            }
            d_va[(k, c)] = J * a;
            d_vm[(k, c)] = m;
        }
    }
    (s, d_va, d_vm)
}

/// Second derivatives of `Σ lam_k S_bus,k` in `[Va, Vm]` order.
fn d2sbus_dv2(y: &CMat, v: &[Complex64], lam: &[f64]) -> [CMat; 4] {
    let n = v.len();
    let vv = DVector::from_column_slice(v);
    let ibus = y * &vv;
    let lamc: Vec<Complex64> = lam.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let diag = |d: &[Complex64]| CMat::from_diagonal(&DVector::from_column_slice(d));
    let dv = diag(v);
    let a = diag(&lamc.iter().zip(v).map(|(l, x)| l * x).collect::<Vec<_>>());
    let b = y * &dv;
    let c = &a * b.map(|x| x.conj());
    let d = y.adjoint() * &dv;
    let dlam = &d * DVector::from_column_slice(&lamc);
    let e = dv.map(|x| x.conj()) * (&d * diag(&lamc) - diag(dlam.as_slice()));
    let f = &c - &a * diag(&ibus.iter().map(|x| x.conj()).collect::<Vec<_>>());
    let g = diag(&v.iter().map(|x| Complex64::new(1.0 / x.norm(), 0.0)).collect::<Vec<_>>());
    let gaa = &e + &f;
    let gva = (&g * (&e - &f)).map(|x| J * x);
    let gav = gva.transpose();
    let gvv = &g * (&c + c.transpose()) * &g;
    debug_assert_eq!(gaa.nrows(), n);
    [gaa, gav, gva, gvv]
}

/// Second derivatives of `Σ lam_k S_br,k` in `[Va, Vm]` order for complex
/// multipliers.
fn d2sbr_dv2(ybr: &CMat, ends: &[usize], v: &[Complex64], lam: &[Complex64]) -> [CMat; 4] {
    let (nl, nb) = ybr.shape();
    let mut cbr = CMat::zeros(nl, nb);
    for (k, &e) in ends.iter().enumerate() {
        cbr[(k, e)] = Complex64::new(1.0, 0.0);
    }
    let diag = |d: &[Complex64]| CMat::from_diagonal(&DVector::from_column_slice(d));
    let vv = DVector::from_column_slice(v);
    let dv = diag(v);
    let a = ybr.adjoint() * diag(lam) * &cbr;
    let b = dv.map(|x| x.conj()) * &a * &dv;
    let av = &a * &vv;
    let d = diag(&av.iter().zip(v).map(|(x, y)| x * y.conj()).collect::<Vec<_>>());
    let atv = a.transpose() * vv.map(|x| x.conj());
    let e = diag(&atv.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>());
    let f = &b + b.transpose();
    let g = diag(&v.iter().map(|x| Complex64::new(1.0 / x.norm(), 0.0)).collect::<Vec<_>>());
    let haa = &f - &d - &e;
    let hva = (&g * (&b - b.transpose() - &d + &e)).map(|x| J * x);
    let hav = hva.transpose();
    let hvv = &g * &f * &g;
    [haa, hav, hva, hvv]
}

/// Hessian blocks of `Σ mu_k |S_br,k|²`.
fn d2asbr_dv2(
    ybr: &CMat,
    ends: &[usize],
    v: &[Complex64],
    s: &[Complex64],
    d_va: &CMat,
    d_vm: &CMat,
    mu: &[f64],
) -> [DMatrix<f64>; 4] {
    let lam: Vec<Complex64> = s.iter().zip(mu).map(|(x, m)| x.conj() * *m).collect();
    let [saa, sav, sva, svv] = d2sbr_dv2(ybr, ends, v, &lam);
    let dm = CMat::from_diagonal(&DVector::from_iterator(mu.len(), mu.iter().map(|&m| Complex64::new(m, 0.0))));
    let term = |a: &CMat, b: &CMat| a.transpose() * &dm * b.map(|x| x.conj());
    let re2 = |m: CMat| m.map(|x| 2.0 * x.re);
    [
        re2(saa + term(d_va, d_va)),
        re2(sav + term(d_va, d_vm)),
        re2(sva + term(d_vm, d_va)),
        re2(svv + term(d_vm, d_vm)),
    ]
}

/// One evaluation of every problem function at `z`.
struct Eval {
    f: f64,
    df: Vec<f64>,
    g: DVector<f64>,
    dg: DMatrix<f64>,
    h: DVector<f64>,
    dh: DMatrix<f64>,
    /// Per-inequality kind, used to assemble the Hessian.
    nn: Option<NnConstraint>,
}

/// Equality and inequality constraint values with their Jacobians at a
/// per-unit decision vector. Equalities are `g(z) = 0`, inequalities
/// `h(z) <= 0`; row order matches the solver's internal layout.
#[derive(Debug, Clone)]
pub struct ConstraintEval {
    pub g: Vec<f64>,
    pub dg: DMatrix<f64>,
    pub h: Vec<f64>,
    pub dh: DMatrix<f64>,
}

pub fn evaluate_constraints(problem: &OpfProblem<'_>, z: &[f64]) -> Result<ConstraintEval> {
    problem.validate()?;
    let model = Model::new(problem, OpfOptions::default());
    if z.len() != model.layout.len() {
        return Err(GridError::Dimension {
            expected: model.layout.len(),
            got: z.len(),
        });
    }
    let ev = model.evaluate(z)?;
    Ok(ConstraintEval {
        g: ev.g.as_slice().to_vec(),
        dg: ev.dg,
        h: ev.h.as_slice().to_vec(),
        dh: ev.dh,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ineq {
    Linear,
    /// `P_IBR,k² + Q_IBR,k² <= S²`
    Apparent(usize),
    /// From/to flow limit of a line.
    FlowFrom(usize),
    FlowTo(usize),
    Nn,
}

struct Model<'p, 'a> {
    p: &'p OpfProblem<'a>,
    opts: OpfOptions,
    layout: VarLayout,
    y: CMat,
    br: Branches,
    kinds: Vec<Ineq>,
}

impl<'p, 'a> Model<'p, 'a> {
    fn new(p: &'p OpfProblem<'a>, opts: OpfOptions) -> Self {
        let case = p.case;
        let layout = VarLayout::of(case);
        let br = Branches::of(case);
        let mut kinds = vec![Ineq::Linear; 2 * (layout.nb + 2 * layout.ng + layout.ni)];
        kinds.extend((0..layout.ni).map(Ineq::Apparent));
        for (k, lim) in br.limit.iter().enumerate() {
            if lim.is_some() {
                kinds.push(Ineq::FlowFrom(k));
                kinds.push(Ineq::FlowTo(k));
            }
        }
        // λ = -inf disables the constraint while keeping the TSI estimate
        if p.stability.is_some_and(|s| s.lambda.is_finite()) {
            kinds.push(Ineq::Nn);
        }
        Self {
            p,
            opts,
            layout,
            y: case.ybus(&[]),
            br,
            kinds,
        }
    }

    fn voltages(&self, z: &[f64]) -> Vec<Complex64> {
        let l = self.layout;
        (0..l.nb)
            .map(|i| Complex64::from_polar(z[l.vm() + i], z[l.va() + i]))
            .collect()
    }

    /// Net specified injections (p.u.) excluding the variable generation.
    fn load_injection(&self) -> (Vec<f64>, Vec<f64>) {
        let case = self.p.case;
        let (mut p, mut q) = (vec![0.0; self.layout.nb], vec![0.0; self.layout.nb]);
        for (k, ld) in case.loads.iter().enumerate() {
            let i = case.bus_index(ld.bus);
            p[i] -= self.p.pd[k] / case.base_mva;
            q[i] -= self.p.qd[k] / case.base_mva;
        }
        (p, q)
    }

    fn initial_point(&self) -> Vec<f64> {
        let case = self.p.case;
        let l = self.layout;
        let base = case.base_mva;
        let mut z = vec![0.0; l.len()];
        for (i, b) in case.buses.iter().enumerate() {
            z[l.vm() + i] = 1.0f64.clamp(b.vmin, b.vmax);
            if !(b.vmin < 1.0 && 1.0 < b.vmax) {
                z[l.vm() + i] = 0.5 * (b.vmin + b.vmax);
            }
        }
        for (k, g) in case.generators.iter().enumerate() {
            z[l.pg() + k] = 0.5 * (g.pmin + g.pmax) / base;
            z[l.qg() + k] = 0.5 * (g.qmin + g.qmax) / base;
        }
        for k in 0..l.ni {
            z[l.pr() + k] = 0.5 * self.p.forecast[k] / base;
        }
        z
    }

    fn evaluate(&self, z: &[f64]) -> Result<Eval> {
        let case = self.p.case;
        let l = self.layout;
        let n = l.len();
        let base = case.base_mva;
        let (f, df, _) = evaluate_objective(case, &self.p.forecast, z);

        // equalities: P and Q balance at every bus, slack angle
        let v = self.voltages(z);
        let s = bus_power(&self.y, &v);
        let (d_va, d_vm) = dsbus_dv(&self.y, &v);
        let (pl, ql) = self.load_injection();
        let neq = 2 * l.nb + 1;
        let mut g = DVector::zeros(neq);
        let mut dg = DMatrix::zeros(neq, n);
        for i in 0..l.nb {
            g[i] = s[i].re - pl[i];
            g[l.nb + i] = s[i].im - ql[i];
            for c in 0..l.nb {
                dg[(i, l.va() + c)] = d_va[(i, c)].re;
                dg[(i, l.vm() + c)] = d_vm[(i, c)].re;
                dg[(l.nb + i, l.va() + c)] = d_va[(i, c)].im;
                dg[(l.nb + i, l.vm() + c)] = d_vm[(i, c)].im;
            }
        }
        for (k, gen) in case.generators.iter().enumerate() {
            let i = case.bus_index(gen.bus);
            g[i] -= z[l.pg() + k];
            g[l.nb + i] -= z[l.qg() + k];
            dg[(i, l.pg() + k)] = -1.0;
            dg[(l.nb + i, l.qg() + k)] = -1.0;
        }
        for (k, r) in case.ibrs.iter().enumerate() {
            let i = case.bus_index(r.bus);
            g[i] -= z[l.pr() + k];
            g[l.nb + i] -= z[l.qr() + k];
            dg[(i, l.pr() + k)] = -1.0;
            dg[(l.nb + i, l.qr() + k)] = -1.0;
        }
        let slack = case.slack_index();
        g[2 * l.nb] = z[l.va() + slack];
        dg[(2 * l.nb, l.va() + slack)] = 1.0;

        // inequalities
        let niq = self.kinds.len();
        let mut h = DVector::zeros(niq);
        let mut dh = DMatrix::zeros(niq, n);
        let mut row = 0;
        let mut bound = |h: &mut DVector<f64>, dh: &mut DMatrix<f64>, var: usize, lo: f64, hi: f64| {
            h[row] = z[var] - hi;
            dh[(row, var)] = 1.0;
            h[row + 1] = lo - z[var];
            dh[(row + 1, var)] = -1.0;
            row += 2;
        };
        for (i, b) in case.buses.iter().enumerate() {
            bound(&mut h, &mut dh, l.vm() + i, b.vmin, b.vmax);
        }
        for (k, gen) in case.generators.iter().enumerate() {
            bound(&mut h, &mut dh, l.pg() + k, gen.pmin / base, gen.pmax / base);
            bound(&mut h, &mut dh, l.qg() + k, gen.qmin / base, gen.qmax / base);
        }
        for k in 0..l.ni {
            bound(&mut h, &mut dh, l.pr() + k, 0.0, self.p.forecast[k] / base);
        }
        let (sf, dsf_va, dsf_vm) = dsbr_dv(&self.br.yf, &self.br.f, &v);
        let (st, dst_va, dst_vm) = dsbr_dv(&self.br.yt, &self.br.t, &v);
        let mut nn = None;
        for (r, kind) in self.kinds.iter().enumerate() {
            match *kind {
                Ineq::Linear => {}
                Ineq::Apparent(k) => {
                    let (p, q) = (z[l.pr() + k], z[l.qr() + k]);
                    let s_max = case.ibrs[k].s_rated / base;
                    h[r] = p * p + q * q - s_max * s_max;
                    dh[(r, l.pr() + k)] = 2.0 * p;
                    dh[(r, l.qr() + k)] = 2.0 * q;
                }
                Ineq::FlowFrom(k) | Ineq::FlowTo(k) => {
                    let (s, dva, dvm) = if matches!(kind, Ineq::FlowFrom(_)) {
                        (&sf, &dsf_va, &dsf_vm)
                    } else {
                        (&st, &dst_va, &dst_vm)
                    };
                    h[r] = s[k].norm_sqr() - self.br.limit[k].expect("limited line");
                    for c in 0..l.nb {
                        dh[(r, l.va() + c)] = 2.0 * (s[k].re * dva[(k, c)].re + s[k].im * dva[(k, c)].im);
                        dh[(r, l.vm() + c)] = 2.0 * (s[k].re * dvm[(k, c)].re + s[k].im * dvm[(k, c)].im);
                    }
                }
                Ineq::Nn => {
                    let st = self.p.stability.as_ref().expect("nn row implies constraint");
                    let c = nn_constraint(self.p, st.net, st.lambda + self.opts.strict_margin, 0.0, z)?;
                    h[r] = c.value;
                    for (j, gj) in c.gradient.iter().enumerate() {
                        dh[(r, j)] = *gj;
                    }
                    nn = Some(c);
                }
            }
        }
        Ok(Eval { f, df, g, dg, h, dh, nn })
    }

    /// Hessian of the Lagrangian.
    fn hessian(&self, z: &[f64], ev: &Eval, lam: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        let case = self.p.case;
        let l = self.layout;
        let n = l.len();
        let (_, _, d2f) = evaluate_objective(case, &self.p.forecast, z);
        let mut hx = DMatrix::from_diagonal(&DVector::from_vec(d2f));
        let v = self.voltages(z);
        let nb = l.nb;
        let add_blocks = |hx: &mut DMatrix<f64>, blocks: [DMatrix<f64>; 4]| {
            let [aa, av, va, vv] = blocks;
            for r in 0..nb {
                for c in 0..nb {
                    hx[(l.va() + r, l.va() + c)] += aa[(r, c)];
                    hx[(l.va() + r, l.vm() + c)] += av[(r, c)];
                    hx[(l.vm() + r, l.va() + c)] += va[(r, c)];
                    hx[(l.vm() + r, l.vm() + c)] += vv[(r, c)];
                }
            }
        };
        let gp = d2sbus_dv2(&self.y, &v, &lam.as_slice()[..nb]);
        let gq = d2sbus_dv2(&self.y, &v, &lam.as_slice()[nb..2 * nb]);
        let [pa, pb, pc, pd] = gp;
        let [qa, qb, qc, qd] = gq;
        add_blocks(
            &mut hx,
            [
                pa.map(|x| x.re) + qa.map(|x| x.im),
                pb.map(|x| x.re) + qb.map(|x| x.im),
                pc.map(|x| x.re) + qc.map(|x| x.im),
                pd.map(|x| x.re) + qd.map(|x| x.im),
            ],
        );

        let nl = case.lines.len();
        let (mut mu_f, mut mu_t) = (vec![0.0; nl], vec![0.0; nl]);
        for (r, kind) in self.kinds.iter().enumerate() {
            match *kind {
                Ineq::Apparent(k) => {
                    hx[(l.pr() + k, l.pr() + k)] += 2.0 * mu[r];
                    hx[(l.qr() + k, l.qr() + k)] += 2.0 * mu[r];
                }
                Ineq::FlowFrom(k) => mu_f[k] = mu[r],
                Ineq::FlowTo(k) => mu_t[k] = mu[r],
                Ineq::Nn => {
                    if let Some(c) = &ev.nn {
                        let g = DVector::from_column_slice(&c.gradient);
                        hx += &g * g.transpose() * (self.opts.nn_curvature * mu[r]);
                    }
                }
                Ineq::Linear => {}
            }
        }
        if self.kinds.iter().any(|k| matches!(k, Ineq::FlowFrom(_))) {
            let (sf, dva, dvm) = dsbr_dv(&self.br.yf, &self.br.f, &v);
            add_blocks(&mut hx, d2asbr_dv2(&self.br.yf, &self.br.f, &v, &sf, &dva, &dvm, &mu_f));
            let (st, dva, dvm) = dsbr_dv(&self.br.yt, &self.br.t, &v);
            add_blocks(&mut hx, d2asbr_dv2(&self.br.yt, &self.br.t, &v, &st, &dva, &dvm, &mu_t));
        }
        debug_assert_eq!(hx.nrows(), n);
        hx
    }
}

/// Scaled optimality conditions at the returned point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub feasibility: f64,
    pub gradient: f64,
    pub complementarity: f64,
    pub cost_change: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.feasibility
            .max(self.gradient)
            .max(self.complementarity)
            .max(self.cost_change)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfSolution {
    pub converged: bool,
    pub iterations: usize,
    /// Objective in $/h.
    pub cost: f64,
    /// Dispatch strategy (MW / MVAr); loads are the problem's parameters.
    pub strategy: Injections,
    pub q_sg: Vec<f64>,
    pub theta: Vec<f64>,
    pub vm: Vec<f64>,
    /// Full per-unit decision vector.
    pub vars: Vec<f64>,
    /// Surrogate TSI at the solution when a stability constraint is present.
    pub tsi_estimate: Option<f64>,
    /// Largest bus power mismatch (p.u.).
    pub power_balance: f64,
    /// Largest inequality value (p.u. or TSI units; `<= 0` when satisfied).
    pub max_violation: f64,
    pub kkt: KktResiduals,
}

impl OpfSolution {
    /// Feature vector `[P_IBR, P_SG, Pd, Qd]` of the strategy.
    pub fn features(&self) -> Vec<f64> {
        self.strategy.features()
    }
}

/// Backtracking on the barrier Lagrangian, used when the full step worsens
/// both feasibility and stationarity: halve until the actual change of the
/// merit function agrees with its quadratic model within 5 %.
#[allow(clippy::too_many_arguments)]
fn merit_step(
    model: &Model<'_, '_>,
    ev: &Eval,
    x: &DVector<f64>,
    z: &DVector<f64>,
    lam: &DVector<f64>,
    mu: &DVector<f64>,
    gamma: f64,
    dx: &DVector<f64>,
    lx: &DVector<f64>,
    lxx: &DMatrix<f64>,
    kkt: &KktResiduals,
) -> Result<f64> {
    const MAX_REDUCTIONS: usize = 20;
    let x1 = x + dx;
    let e1 = model.evaluate(x1.as_slice())?;
    let maxh1 = e1.h.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(h));
    let feas1 = inf_norm(&e1.g).max(maxh1) / (1.0 + inf_norm(&x1).max(inf_norm(z)));
    let lx1 = DVector::from_column_slice(&e1.df) + e1.dg.transpose() * lam + e1.dh.transpose() * mu;
    let grad1 = inf_norm(&lx1) / (1.0 + inf_norm(lam).max(inf_norm(mu)));
    if !(feas1 > kkt.feasibility && grad1 > kkt.gradient) {
        return Ok(1.0);
    }
    let log_z: f64 = z.iter().map(|v| v.ln()).sum();
    let merit = |e: &Eval| e.f + lam.dot(&e.g) + mu.dot(&(&e.h + z)) - gamma * log_z;
    let l0 = merit(ev);
    let mut alpha = 1.0;
    for _ in 0..MAX_REDUCTIONS {
        let d = dx * alpha;
        let e = model.evaluate((x + &d).as_slice())?;
        let predicted = lx.dot(&d) + 0.5 * d.dot(&(lxx * &d));
        let rho = (merit(&e) - l0) / predicted;
        if rho > 0.95 && rho < 1.05 {
            break;
        }
        alpha /= 2.0;
    }
    Ok(alpha)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Primal-dual iterations from `x0`.
fn interior_point(model: &Model<'_, '_>, x0: Vec<f64>) -> Result<Iterate> {
    let opts = &model.opts;
    let n = model.layout.len();
    let mut x = DVector::from_vec(x0);
    let mut ev = model.evaluate(x.as_slice())?;
    let neq = ev.g.len();
    let niq = ev.h.len();

    let mut gamma = opts.z0;
    let mut z = DVector::from_iterator(niq, ev.h.iter().map(|&h| opts.z0.max(-h)));
    let mut mu = DVector::from_iterator(niq, z.iter().map(|&zi| (gamma / zi).max(opts.z0)));
    let mut lam = DVector::zeros(neq);
    let mut f0 = ev.f;
    let residuals = |ev: &Eval, x: &DVector<f64>, z: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>, f0: f64| {
        let lx = DVector::from_column_slice(&ev.df) + ev.dg.transpose() * lam + ev.dh.transpose() * mu;
        let maxh = ev.h.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(h));
        let feas = inf_norm(&ev.g).max(maxh) / (1.0 + inf_norm(x).max(inf_norm(z)));
        KktResiduals {
            feasibility: feas,
            gradient: inf_norm(&lx) / (1.0 + inf_norm(lam).max(inf_norm(mu))),
            complementarity: z.dot(mu) / (1.0 + inf_norm(x)),
            cost_change: (ev.f - f0).abs() / (1.0 + f0.abs()),
        }
    };

    let mut kkt = residuals(&ev, &x, &z, &lam, &mu, f0);
    kkt.cost_change = f64::INFINITY;
    let mut converged = false;
    let mut breakdown = None;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let lx = DVector::from_column_slice(&ev.df) + ev.dg.transpose() * &lam + ev.dh.transpose() * &mu;
        let lxx = model.hessian(x.as_slice(), &ev, &lam, &mu);
        let zinv = z.map(|v| 1.0 / v);
        // dhᵀ diag(mu/z) dh
        let mut dh_scaled = ev.dh.clone();
        for (r, mut row) in dh_scaled.row_iter_mut().enumerate() {
            row *= (mu[r] * zinv[r]).sqrt();
        }
        let m = &lxx + dh_scaled.transpose() * &dh_scaled;
        let nvec = &lx
            + ev.dh.transpose() * DVector::from_iterator(niq, (0..niq).map(|r| zinv[r] * (mu[r] * ev.h[r] + gamma)));
        let mut kmat = DMatrix::zeros(n + neq, n + neq);
        kmat.view_mut((0, 0), (n, n)).copy_from(&m);
        kmat.view_mut((0, n), (n, neq)).copy_from(&ev.dg.transpose());
        kmat.view_mut((n, 0), (neq, n)).copy_from(&ev.dg);
        let mut rhs = DVector::zeros(n + neq);
        rhs.rows_mut(0, n).copy_from(&(-&nvec));
        rhs.rows_mut(n, neq).copy_from(&(-&ev.g));
        let Some(sol) = kmat.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite())) else {
            breakdown = Some(format!("singular KKT system at iteration {iterations}"));
            break;
        };
        let mut dx = sol.rows(0, n).into_owned();
        let mut dlam = sol.rows(n, neq).into_owned();
        let mut dz = -&ev.h - &z - &ev.dh * &dx;
        let mut dmu = DVector::from_iterator(niq, (0..niq).map(|r| -mu[r] + zinv[r] * (gamma - mu[r] * dz[r])));

        if opts.step_control {
            let a = merit_step(model, &ev, &x, &z, &lam, &mu, gamma, &dx, &lx, &lxx, &kkt)?;
            if a < 1.0 {
                dx *= a;
                dz *= a;
                dlam *= a;
                dmu *= a;
            }
        }

        let step = |v: &DVector<f64>, dv: &DVector<f64>| {
            let mut a: f64 = 1.0;
            for (vi, di) in v.iter().zip(dv.iter()) {
                if *di < 0.0 {
                    a = a.min(opts.xi * vi / -di);
                }
            }
            a
        };
        let alpha_p = step(&z, &dz);
        let alpha_d = step(&mu, &dmu);
        let next = &x + &dx * alpha_p;
        if next.iter().any(|v| !v.is_finite()) || inf_norm(&next) > 1e10 {
            breakdown = Some(format!("iterate diverged at iteration {iterations}"));
            break;
        }
        x = next;
        z += &dz * alpha_p;
        lam += &dlam * alpha_d;
        mu += &dmu * alpha_d;
        if niq > 0 {
            gamma = opts.sigma * z.dot(&mu) / niq as f64;
        }
        f0 = ev.f;
        ev = model.evaluate(x.as_slice())?;
        kkt = residuals(&ev, &x, &z, &lam, &mu, f0);
        log::trace!("pdipm {iterations}: f {:.6} {:?}", ev.f, kkt);
        if kkt.max() < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(Iterate { x: x.as_slice().to_vec(), ev, kkt, converged, iterations, breakdown })
}

struct Iterate {
    x: Vec<f64>,
    ev: Eval,
    kkt: KktResiduals,
    converged: bool,
    iterations: usize,
    /// Why the iterations stopped early, if they broke down numerically.
    breakdown: Option<String>,
}

/// Solves the (stability-constrained) OPF.
///
/// The OPF without the stability constraint is solved first from a flat
/// start (flat voltages, midpoint generation). If its optimum already
/// satisfies the constraint it is returned; otherwise the constrained
/// problem is solved starting from that optimum's primal point.
///
/// Non-convergence within the iteration cap is reported through
/// `converged = false`. A singular KKT system or a non-finite iterate is an
/// error for the unconstrained solve; in the constrained solve it is the
/// typical symptom of an unreachable λ and is reported as non-convergence.
pub fn pdipm_solve(problem: &OpfProblem<'_>, opts: &OpfOptions) -> Result<OpfSolution> {
    problem.validate()?;
    if !(opts.xi > 0.0 && opts.xi < 1.0 && opts.sigma > 0.0 && opts.sigma < 1.0 && opts.tol > 0.0 && opts.z0 > 0.0) {
        return Err(GridError::InvalidConfig("invalid interior-point options".into()));
    }
    let model = Model::new(problem, *opts);
    let active = model.kinds.contains(&Ineq::Nn);
    let plain_problem = OpfProblem {
        stability: None,
        ..problem.clone()
    };
    let plain = Model::new(&plain_problem, *opts);
    let mut it = interior_point(&plain, plain.initial_point())?;
    if let Some(why) = it.breakdown.take() {
        return Err(GridError::Opf(why));
    }
    if active {
        let st = problem.stability.as_ref().expect("active constraint");
        let tsi = st.net.objective(&problem.features(&it.x))?;
        if it.converged && tsi >= st.lambda + opts.strict_margin {
            it.ev = model.evaluate(&it.x)?;
        } else {
            let mut starts = vec![model.initial_point()];
            if it.converged {
                starts.insert(0, it.x.clone());
            }
            let mut spent = it.iterations;
            let mut best: Option<Iterate> = None;
            for x0 in starts {
                let mut attempt = interior_point(&model, x0)?;
                if let Some(why) = attempt.breakdown.take() {
                    log::warn!("constrained OPF at λ = {}: {why}", st.lambda);
                }
                spent += attempt.iterations;
                attempt.iterations = spent;
                let better = best.as_ref().is_none_or(|b| attempt.converged || attempt.kkt.max() < b.kkt.max());
                if better {
                    best = Some(attempt);
                }
                if best.as_ref().is_some_and(|b| b.converged) {
                    break;
                }
            }
            it = best.expect("at least one start");
            it.iterations = spent;
        }
    }
    let Iterate { x, ev, kkt, converged, iterations, .. } = it;
    let x = DVector::from_vec(x);

    let case = problem.case;
    let l = model.layout;
    let base = case.base_mva;
    let xs = x.as_slice();
    let scaled = |off: usize, len: usize| xs[off..off + len].iter().map(|v| v * base).collect::<Vec<_>>();
    let strategy = Injections {
        p_ibr: scaled(l.pr(), l.ni),
        q_ibr: scaled(l.qr(), l.ni),
        p_sg: scaled(l.pg(), l.ng),
        pd: problem.pd.clone(),
        qd: problem.qd.clone(),
    };
    let tsi_estimate = match &problem.stability {
        Some(s) => Some(s.net.objective(&problem.features(xs))?),
        None => None,
    };
    Ok(OpfSolution {
        converged,
        iterations,
        cost: ev.f,
        strategy,
        q_sg: scaled(l.qg(), l.ng),
        theta: xs[l.va()..l.va() + l.nb].to_vec(),
        vm: xs[l.vm()..l.vm() + l.nb].to_vec(),
        vars: xs.to_vec(),
        tsi_estimate,
        power_balance: inf_norm(&ev.g),
        max_violation: ev.h.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(h)),
        kkt,
    })
}
