//! Hovorka gluco-regulatory model.
//!
//! Ten-state ODE covering subcutaneous insulin absorption, plasma insulin,
//! the three remote insulin actions, two-compartment glucose kinetics and
//! two-compartment gut absorption. The same equations serve as the
//! controller-internal model and, with perturbed parameters, as the virtual
//! plant.
//!
//! Units follow the usual conventions for this model: glucose masses in
//! mmol, insulin actions in 1/min, insulin depots in mU, plasma insulin in
//! mU/L, insulin input in mU/min and oral carbohydrate in g/min.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// Number of physiological states.
pub const N_STATES: usize = 10;

/// mmol/L to mg/dL for glucose (M_wg / 10).
pub const MGDL_PER_MMOLL: f64 = 18.016;

/// Internal RK4 substep, minutes.
pub const SUBSTEP_MIN: f64 = 1.0;

pub type StateVec = SVector<f64, N_STATES>;
pub type StateMat = SMatrix<f64, N_STATES, N_STATES>;

const F01_SCALING_THRESHOLD: f64 = 4.5;
const RENAL_THRESHOLD: f64 = 9.0;
const RENAL_RATE: f64 = 0.003;
const EXPM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` must be positive and finite (got {value})")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("non-finite {what} component `{component}`")]
    NonFinite {
        what: &'static str,
        component: &'static str,
    },
    #[error("integration produced a non-finite value in `{component}`")]
    IntegrationFailure { component: &'static str },
    #[error("glucose target {target} mg/dL outside [{lo}, {hi}]")]
    TargetOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("no positive-insulin equilibrium at {target} mg/dL")]
    InfeasibleEquilibrium { target: f64 },
    #[error("sampling time must be positive (got {0})")]
    InvalidSampleTime(f64),
}

/// Full parameter vector of one (virtual) subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientParameters {
    pub k12: f64,
    pub egp0_per_kg: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub ka3: f64,
    pub si1: f64,
    pub si2: f64,
    pub si3: f64,
    pub tau_s: f64,
    pub ke: f64,
    pub ag: f64,
    pub mwg: f64,
    pub tau_d: f64,
    pub vg_per_kg: f64,
    pub vi_per_kg: f64,
    pub f01_per_kg: f64,
    pub bw: f64,
}

impl Default for PatientParameters {
    fn default() -> Self {
        Self::population(70.0)
    }
}

impl PatientParameters {
    /// Population values for a subject of body weight `bw` kg.
    pub fn population(bw: f64) -> Self {
        Self {
            k12: 66e-3,
            egp0_per_kg: 161e-4,
            ka1: 6e-3,
            ka2: 6e-3,
            ka3: 0.03,
            si1: 51.2e-4,
            si2: 8.2e-4,
            si3: 520e-4,
            tau_s: 55.0,
            ke: 138e-3,
            ag: 0.8,
            mwg: 180.16,
            tau_d: 40.0,
            vg_per_kg: 0.16,
            vi_per_kg: 0.12,
            f01_per_kg: 0.0097,
            bw,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields: [(&'static str, f64); 17] = [
            ("k12", self.k12),
            ("egp0_per_kg", self.egp0_per_kg),
            ("ka1", self.ka1),
            ("ka2", self.ka2),
            ("ka3", self.ka3),
            ("si1", self.si1),
            ("si2", self.si2),
            ("si3", self.si3),
            ("tau_s", self.tau_s),
            ("ke", self.ke),
            ("ag", self.ag),
            ("mwg", self.mwg),
            ("tau_d", self.tau_d),
            ("vg_per_kg", self.vg_per_kg),
            ("vi_per_kg", self.vi_per_kg),
            ("f01_per_kg", self.f01_per_kg),
            ("bw", self.bw),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidParameter { name, value });
            }
        }
        if self.ag > 1.0 {
            return Err(ModelError::InvalidParameter {
                name: "ag",
                value: self.ag,
            });
        }
        Ok(())
    }

    pub fn kb1(&self) -> f64 {
        self.si1 * self.ka1
    }
    pub fn kb2(&self) -> f64 {
        self.si2 * self.ka2
    }
    pub fn kb3(&self) -> f64 {
        self.si3 * self.ka3
    }
    /// Glucose distribution volume, L.
    pub fn vg(&self) -> f64 {
        self.vg_per_kg * self.bw
    }
    /// Insulin distribution volume, L.
    pub fn vi(&self) -> f64 {
        self.vi_per_kg * self.bw
    }
    /// Endogenous glucose production at zero insulin, mmol/min.
    pub fn egp0(&self) -> f64 {
        self.egp0_per_kg * self.bw
    }
    /// Non-insulin-dependent glucose flux, mmol/min.
    pub fn f01(&self) -> f64 {
        self.f01_per_kg * self.bw
    }
    /// mmol of glucose per gram of ingested carbohydrate reaching D1.
    pub fn carb_to_mmol(&self) -> f64 {
        1000.0 * self.ag / self.mwg
    }
}

/// Physiological state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelState {
    pub q1: f64,
    pub q2: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub s1: f64,
    pub s2: f64,
    pub i: f64,
    pub d1: f64,
    pub d2: f64,
}

pub const STATE_NAMES: [&str; N_STATES] = ["Q1", "Q2", "x1", "x2", "x3", "S1", "S2", "I", "D1", "D2"];

pub mod idx {
    pub const Q1: usize = 0;
    pub const Q2: usize = 1;
    pub const X1: usize = 2;
    pub const X2: usize = 3;
    pub const X3: usize = 4;
    pub const S1: usize = 5;
    pub const S2: usize = 6;
    pub const I: usize = 7;
    pub const D1: usize = 8;
    pub const D2: usize = 9;
}

impl ModelState {
    pub fn to_vector(&self) -> StateVec {
        StateVec::from([
            self.q1, self.q2, self.x1, self.x2, self.x3, self.s1, self.s2, self.i, self.d1, self.d2,
        ])
    }

    pub fn from_vector(v: &StateVec) -> Self {
        Self {
            q1: v[0],
            q2: v[1],
            x1: v[2],
            x2: v[3],
            x3: v[4],
            s1: v[5],
            s2: v[6],
            i: v[7],
            d1: v[8],
            d2: v[9],
        }
    }

    fn check_finite(&self, what: &'static str) -> Result<(), ModelError> {
        let v = self.to_vector();
        match v.iter().position(|c| !c.is_finite()) {
            Some(k) => Err(ModelError::NonFinite {
                what,
                component: STATE_NAMES[k],
            }),
            None => Ok(()),
        }
    }
}

/// Exogenous inputs, held constant over an integration step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelInput {
    /// Insulin infusion, mU/min.
    pub u: f64,
    /// Oral carbohydrate, g/min.
    pub d: f64,
}

impl ModelInput {
    pub fn new(u: f64, d: f64) -> Self {
        Self { u, d }
    }

    fn check(&self) -> Result<(), ModelError> {
        if !self.u.is_finite() {
            return Err(ModelError::NonFinite {
                what: "input",
                component: "u",
            });
        }
        if !self.d.is_finite() {
            return Err(ModelError::NonFinite {
                what: "input",
                component: "d",
            });
        }
        Ok(())
    }
}

/// Plasma glucose in mg/dL.
pub fn glucose_of(x: &ModelState, p: &PatientParameters) -> f64 {
    x.q1 / p.vg() * MGDL_PER_MMOLL
}

pub fn mgdl_to_mmoll(g: f64) -> f64 {
    g / MGDL_PER_MMOLL
}

pub fn mmoll_to_mgdl(g: f64) -> f64 {
    g * MGDL_PER_MMOLL
}

/// Non-insulin-dependent uptake, mmol/min, for plasma glucose `g` in mmol/L.
pub fn f01_c(g: f64, p: &PatientParameters) -> f64 {
    if g >= F01_SCALING_THRESHOLD {
        p.f01()
    } else {
        p.f01() * g / F01_SCALING_THRESHOLD
    }
}

/// Renal excretion, mmol/min.
pub fn renal(g: f64, p: &PatientParameters) -> f64 {
    if g >= RENAL_THRESHOLD {
        RENAL_RATE * (g - RENAL_THRESHOLD) * p.vg()
    } else {
        0.0
    }
}

/// Endogenous glucose production, mmol/min, clipped at zero.
pub fn egp(x3: f64, p: &PatientParameters) -> f64 {
    (p.egp0() * (1.0 - x3)).max(0.0)
}

/// Time derivative with an extra glucose appearance term (mmol/min) added
/// to the accessible compartment. Used by the plant for rescue carbohydrate
/// absorbed outside the D1/D2 chain.
pub fn derivatives_with_appearance(
    x: &ModelState,
    inp: &ModelInput,
    extra_ra: f64,
    p: &PatientParameters,
) -> StateVec {
    let vg = p.vg();
    let g = x.q1 / vg;
    let ug = x.d2 / p.tau_d;
    let dq1 = ug - x.x1 * x.q1 - f01_c(g, p) - renal(g, p) + p.k12 * x.q2 + egp(x.x3, p) + extra_ra;
    let dq2 = x.x1 * x.q1 - (x.x2 + p.k12) * x.q2;
    let dx1 = -p.ka1 * x.x1 + p.kb1() * x.i;
    let dx2 = -p.ka2 * x.x2 + p.kb2() * x.i;
    let dx3 = -p.ka3 * x.x3 + p.kb3() * x.i;
    let ds1 = -x.s1 / p.tau_s + inp.u;
    let ds2 = (x.s1 - x.s2) / p.tau_s;
    let di = -p.ke * x.i + x.s2 / (p.tau_s * p.vi());
    let dd1 = p.carb_to_mmol() * inp.d - x.d1 / p.tau_d;
    let dd2 = (x.d1 - x.d2) / p.tau_d;
    StateVec::from([dq1, dq2, dx1, dx2, dx3, ds1, ds2, di, dd1, dd2])
}

/// dx/dt of the model.
pub fn derivatives(
    x: &ModelState,
    inp: &ModelInput,
    p: &PatientParameters,
) -> Result<StateVec, ModelError> {
    x.check_finite("state")?;
    inp.check()?;
    Ok(derivatives_with_appearance(x, inp, 0.0, p))
}

/// Result of one zero-order-hold integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: ModelState,
    /// Number of components that were clamped at zero.
    pub clamped: u32,
}

/// One classical Runge-Kutta step.
pub fn rk4<const N: usize, F>(x: &SVector<f64, N>, h: f64, f: F) -> SVector<f64, N>
where
    F: Fn(&SVector<f64, N>) -> SVector<f64, N>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (0.5 * h)));
    let k3 = f(&(x + k2 * (0.5 * h)));
    let k4 = f(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn clamp_nonnegative(v: &mut StateVec) -> u32 {
    let mut n = 0;
    for c in v.iter_mut() {
        if *c < 0.0 {
            *c = 0.0;
            n += 1;
        }
    }
    n
}

/// RK4 integration over `dt` minutes using substeps no longer than `substep`.
/// Negative components are clamped to zero after every substep.
pub fn integrate_with_substep(
    x: &ModelState,
    inp: &ModelInput,
    extra_ra: f64,
    p: &PatientParameters,
    dt: f64,
    substep: f64,
) -> Result<StepResult, ModelError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ModelError::InvalidSampleTime(dt));
    }
    x.check_finite("state")?;
    inp.check()?;
    let n = (dt / substep).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    let mut v = x.to_vector();
    let mut clamped = 0;
    for _ in 0..n {
        v = rk4(&v, h, |s| {
            derivatives_with_appearance(&ModelState::from_vector(s), inp, extra_ra, p)
        });
        if let Some(k) = v.iter().position(|c| !c.is_finite()) {
            return Err(ModelError::IntegrationFailure {
                component: STATE_NAMES[k],
            });
        }
        clamped += clamp_nonnegative(&mut v);
    }
    Ok(StepResult {
        state: ModelState::from_vector(&v),
        clamped,
    })
}

/// Advance the model by `dt` minutes with inputs held constant (RK4, 1-min substeps).
pub fn integrate_step(
    x: &ModelState,
    inp: &ModelInput,
    p: &PatientParameters,
    dt: f64,
) -> Result<StepResult, ModelError> {
    integrate_with_substep(x, inp, 0.0, p, dt, SUBSTEP_MIN)
}

/// Equilibrium state and insulin rate (mU/min) at a glucose level, without
/// the operating-range precondition of [`find_steady_state`].
pub fn steady_state_at(
    g_target: f64,
    p: &PatientParameters,
) -> Result<(ModelState, f64), ModelError> {
    p.validate()?;
    if !(g_target.is_finite() && g_target > 0.0) {
        return Err(ModelError::InfeasibleEquilibrium { target: g_target });
    }
    let g = mgdl_to_mmoll(g_target);
    let q1 = g * p.vg();
    let outflow = f01_c(g, p) + renal(g, p);
    // Net glucose balance of Q1 at plasma insulin `i` (Q2 eliminated);
    // strictly decreasing in `i`.
    let balance = |i: f64| {
        let x1 = p.si1 * i;
        let x2 = p.si2 * i;
        egp(p.si3 * i, p) - outflow - x1 * x2 * q1 / (x2 + p.k12)
    };
    if balance(0.0) <= 0.0 {
        return Err(ModelError::InfeasibleEquilibrium { target: g_target });
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while balance(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(ModelError::InfeasibleEquilibrium { target: g_target });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if balance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let i = 0.5 * (lo + hi);
    let x1 = p.si1 * i;
    let x2 = p.si2 * i;
    let x3 = p.si3 * i;
    let u = p.ke * i * p.vi();
    let state = ModelState {
        q1,
        q2: x1 * q1 / (x2 + p.k12),
        x1,
        x2,
        x3,
        s1: p.tau_s * u,
        s2: p.tau_s * u,
        i,
        d1: 0.0,
        d2: 0.0,
    };
    Ok((state, u))
}

/// Starting state at `g` mg/dL: the equilibrium when one exists, otherwise
/// the insulin-free state (glucose then falls without insulin).
pub fn initial_state_at(g: f64, p: &PatientParameters) -> Result<ModelState, ModelError> {
    match steady_state_at(g, p) {
        Ok((x, _)) => Ok(x),
        Err(ModelError::InfeasibleEquilibrium { .. }) if g.is_finite() && g > 0.0 => {
            Ok(ModelState {
                q1: mgdl_to_mmoll(g) * p.vg(),
                ..Default::default()
            })
        }
        Err(e) => Err(e),
    }
}

/// Equilibrium state and insulin rate (mU/min) holding plasma glucose at
/// `g_target` mg/dL with no meals. `g_target` must lie in [70, 300].
pub fn find_steady_state(
    g_target: f64,
    p: &PatientParameters,
) -> Result<(ModelState, f64), ModelError> {
    const LO: f64 = 70.0;
    const HI: f64 = 300.0;
    if !(LO..=HI).contains(&g_target) {
        return Err(ModelError::TargetOutOfRange {
            target: g_target,
            lo: LO,
            hi: HI,
        });
    }
    steady_state_at(g_target, p)
}

/// Analytic continuous-time Jacobians (A_c, B_c). Breakpoints resolve to
/// the `>=` branch.
pub fn jacobians(x: &ModelState, p: &PatientParameters) -> (StateMat, StateVec) {
    use idx::*;
    let vg = p.vg();
    let g = x.q1 / vg;
    let mut a = StateMat::zeros();

    let df01 = if g >= F01_SCALING_THRESHOLD {
        0.0
    } else {
        p.f01() / (F01_SCALING_THRESHOLD * vg)
    };
    let dfr = if g >= RENAL_THRESHOLD { RENAL_RATE } else { 0.0 };
    a[(Q1, Q1)] = -x.x1 - df01 - dfr;
    a[(Q1, Q2)] = p.k12;
    a[(Q1, X1)] = -x.q1;
    a[(Q1, X3)] = if p.egp0() * (1.0 - x.x3) >= 0.0 {
        -p.egp0()
    } else {
        0.0
    };
    a[(Q1, D2)] = 1.0 / p.tau_d;

    a[(Q2, Q1)] = x.x1;
    a[(Q2, Q2)] = -(x.x2 + p.k12);
    a[(Q2, X1)] = x.q1;
    a[(Q2, X2)] = -x.q2;

    a[(X1, X1)] = -p.ka1;
    a[(X1, I)] = p.kb1();
    a[(X2, X2)] = -p.ka2;
    a[(X2, I)] = p.kb2();
    a[(X3, X3)] = -p.ka3;
    a[(X3, I)] = p.kb3();

    a[(S1, S1)] = -1.0 / p.tau_s;
    a[(S2, S1)] = 1.0 / p.tau_s;
    a[(S2, S2)] = -1.0 / p.tau_s;
    a[(I, S2)] = 1.0 / (p.tau_s * p.vi());
    a[(I, I)] = -p.ke;

    a[(D1, D1)] = -1.0 / p.tau_d;
    a[(D2, D1)] = 1.0 / p.tau_d;
    a[(D2, D2)] = -1.0 / p.tau_d;

    let mut b = StateVec::zeros();
    b[S1] = 1.0;
    (a, b)
}

type Augmented = SMatrix<f64, { N_STATES + 1 }, { N_STATES + 1 }>;

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
fn expm(m: &Augmented) -> Augmented {
    let norm = m.iter().map(|v| v.abs()).fold(0.0_f64, f64::max) * (N_STATES + 1) as f64;
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let ms = m * scale;
    let mut result = Augmented::identity();
    let mut term = Augmented::identity();
    for k in 1..64 {
        term = term * ms / k as f64;
        result += term;
        if term.iter().map(|v| v.abs()).fold(0.0_f64, f64::max) < EXPM_TOL * 1e-4 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result * result;
    }
    result
}

/// Exact zero-order-hold discretization of (A_c, B_c) over `ts` minutes.
pub fn discretize(a_c: &StateMat, b_c: &StateVec, ts: f64) -> (StateMat, StateVec) {
    let mut m = Augmented::zeros();
    m.fixed_view_mut::<N_STATES, N_STATES>(0, 0).copy_from(&(a_c * ts));
    m.fixed_view_mut::<N_STATES, 1>(0, N_STATES).copy_from(&(b_c * ts));
    let e = expm(&m);
    (
        e.fixed_view::<N_STATES, N_STATES>(0, 0).into_owned(),
        e.fixed_view::<N_STATES, 1>(0, N_STATES).into_owned(),
    )
}

/// Discrete affine model around an operating point:
/// `x[k+1] = x_op + offset + A (x[k] - x_op) + B (u[k] - u_op)`,
/// `y = y_op + C (x - x_op)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub a: StateMat,
    pub b: StateVec,
    /// Output row, mg/dL per state unit.
    pub c: SMatrix<f64, 1, N_STATES>,
    pub x_op: ModelState,
    /// Insulin rate at the operating point, mU/min.
    pub u_op: f64,
    /// Glucose at the operating point, mg/dL.
    pub y_op: f64,
    /// One-step nonlinear free response from (x_op, u_op, d = 0), minus x_op.
    pub offset: StateVec,
    pub ts: f64,
}

/// Output row selecting Q1 in mg/dL.
pub fn output_row(p: &PatientParameters) -> SMatrix<f64, 1, N_STATES> {
    let mut c = SMatrix::<f64, 1, N_STATES>::zeros();
    c[(0, idx::Q1)] = MGDL_PER_MMOLL / p.vg();
    c
}

/// Linearize at (x_op, u_op) and discretize with sampling time `ts`.
pub fn linearize(
    x_op: &ModelState,
    u_op: f64,
    p: &PatientParameters,
    ts: f64,
) -> Result<LinearizedModel, ModelError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(ModelError::InvalidSampleTime(ts));
    }
    x_op.check_finite("operating point")?;
    let (a_c, b_c) = jacobians(x_op, p);
    let (a, b) = discretize(&a_c, &b_c, ts);
    let next = integrate_step(x_op, &ModelInput::new(u_op, 0.0), p, ts)?;
    Ok(LinearizedModel {
        a,
        b,
        c: output_row(p),
        x_op: *x_op,
        u_op,
        y_op: glucose_of(x_op, p),
        offset: next.state.to_vector() - x_op.to_vector(),
        ts,
    })
}

impl LinearizedModel {
    /// Propagate one step of the affine model.
    pub fn step(&self, x: &StateVec, u: f64) -> StateVec {
        let xop = self.x_op.to_vector();
        xop + self.offset + self.a * (x - xop) + self.b * (u - self.u_op)
    }

    pub fn output(&self, x: &StateVec) -> f64 {
        self.y_op + (self.c * (x - self.x_op.to_vector()))[(0, 0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop() -> PatientParameters {
        PatientParameters::population(70.0)
    }

    #[test]
    fn glucose_conversion() {
        let p = pop();
        let x = ModelState {
            q1: 5.0 * p.vg(),
            ..Default::default()
        };
        assert!((glucose_of(&x, &p) - 90.08).abs() < 1e-12);
        assert_eq!(glucose_of(&ModelState::default(), &p), 0.0);
        for g in [40.0, 97.3, 120.0, 333.3] {
            assert!((mmoll_to_mgdl(mgdl_to_mmoll(g)) - g).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        let p = pop();
        let (x, u) = find_steady_state(120.0, &p).unwrap();
        assert!(u > 0.0);
        let f = derivatives(&x, &ModelInput::new(u, 0.0), &p).unwrap();
        for v in f.iter() {
            assert!(v.abs() < 1e-9, "{f}");
        }
        assert!((glucose_of(&x, &p) - 120.0).abs() < 1e-9);
    }

    #[test]
    fn renal_branch_active_above_nine() {
        let p = pop();
        assert!((renal(9.5, &p) - 0.003 * 0.5 * p.vg()).abs() < 1e-15);
        assert!(renal(9.5, &p) > 0.0);
        assert_eq!(renal(8.9, &p), 0.0);
    }

    #[test]
    fn f01_scaled_below_threshold() {
        let p = pop();
        assert!((f01_c(4.0, &p) - p.f01() * 4.0 / 4.5).abs() < 1e-15);
        assert_eq!(f01_c(5.0, &p), p.f01());
    }

    #[test]
    fn piecewise_terms_continuous() {
        let p = pop();
        for bp in [4.5, 9.0] {
            let lo = f01_c(bp - 1e-9, &p) + renal(bp - 1e-9, &p);
            let hi = f01_c(bp + 1e-9, &p) + renal(bp + 1e-9, &p);
            assert!((hi - lo).abs() < 1e-6);
        }
        let x3_break = 1.0;
        assert!((egp(x3_break - 1e-9, &p) - egp(x3_break + 1e-9, &p)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let p = pop();
        let x = ModelState::default();
        let err = derivatives(&x, &ModelInput::new(f64::NAN, 0.0), &p).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { component: "u", .. }));
        let bad = ModelState {
            i: f64::INFINITY,
            ..Default::default()
        };
        let err = derivatives(&bad, &ModelInput::default(), &p).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { component: "I", .. }));
    }

    #[test]
    fn infeasible_equilibrium_when_uptake_exceeds_egp() {
        let mut p = pop();
        p.f01_per_kg = 0.03;
        assert!(matches!(
            find_steady_state(120.0, &p),
            Err(ModelError::InfeasibleEquilibrium { .. })
        ));
        assert!(matches!(
            find_steady_state(350.0, &pop()),
            Err(ModelError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn insulin_washes_out_without_input() {
        let p = pop();
        let (mut x, _) = find_steady_state(120.0, &p).unwrap();
        let mut last = (x.s1, x.s2, x.i);
        for step in 0..400 {
            x = integrate_step(&x, &ModelInput::default(), &p, 5.0).unwrap().state;
            if step > 20 {
                assert!(x.s1 <= last.0 && x.s2 <= last.1 && x.i <= last.2 + 1e-15);
            }
            last = (x.s1, x.s2, x.i);
        }
        assert!(x.i < 1e-6 && x.s1 < 1e-6 && x.s2 < 1e-6);
    }

    #[test]
    fn zoh_limit_is_identity() {
        let p = pop();
        let (x, u) = find_steady_state(140.0, &p).unwrap();
        let lin = linearize(&x, u, &p, 1e-12).unwrap();
        assert!((lin.a - StateMat::identity()).abs().max() < 1e-8);
        assert!(lin.b.abs().max() < 1e-8);
    }

    #[test]
    fn input_enters_only_s1() {
        let p = pop();
        let (x, _) = find_steady_state(140.0, &p).unwrap();
        let (_, b) = jacobians(&x, &p);
        for k in 0..N_STATES {
            let expected = if k == idx::S1 { 1.0 } else { 0.0 };
            assert_eq!(b[k], expected);
        }
    }

    #[test]
    fn discrete_b_matches_integrated_a() {
        // For a stable A, B_d = A^-1 (A_d - I) B.
        let p = pop();
        let (x, _) = find_steady_state(150.0, &p).unwrap();
        let (a_c, b_c) = jacobians(&x, &p);
        let (a_d, b_d) = discretize(&a_c, &b_c, 5.0);
        let rhs = (a_d - StateMat::identity()) * b_c;
        let lhs = a_c * b_d;
        assert!((lhs - rhs).abs().max() < 1e-10);
    }
}
