//! Fits the controller model's six most sensitive parameters to a training
//! trace by RMSE minimization against CGM.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{self, integrate_step, ModelInput, PatientParameters};
use crate::mpc::{DoseKind, MU_PER_MIN_PER_U_PER_H};
use crate::scenario::{SimulationTrace, CONTROL_STEP_MIN};

pub const N_FREE: usize = 6;
pub const FREE_NAMES: [&str; N_FREE] = ["ke", "vg_per_kg", "si1", "si2", "tau_d", "tau_s"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("training data invalid: {0}")]
    InvalidData(String),
    #[error("every start failed to integrate")]
    AllStartsFailed,
}

/// Controller-visible training data on the CGM grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    /// Sample times, min; uniform spacing `dt`.
    pub t: Vec<f64>,
    pub cgm: Vec<f64>,
    /// Insulin infusion over [t_k, t_k + dt), mU/min.
    pub insulin: Vec<f64>,
    /// Announced carbohydrate at t_k, g.
    pub carbs: Vec<f64>,
    pub dt: f64,
}

impl FitData {
    /// Extracts what the controller saw and delivered: CGM, insulin and the
    /// announced (not true) meals.
    pub fn from_trace(trace: &SimulationTrace) -> Self {
        let n = trace.rows.len();
        let t: Vec<f64> = trace.rows.iter().map(|r| r.t).collect();
        let t0 = t.first().copied().unwrap_or(0.0);
        let mut insulin = vec![0.0; n];
        for d in &trace.dosing {
            let k = ((d.t - t0) / CONTROL_STEP_MIN).round();
            if k < 0.0 || k as usize >= n {
                continue;
            }
            insulin[k as usize] += match d.kind {
                DoseKind::BasalStep => d.amount * 60.0 / d.duration * MU_PER_MIN_PER_U_PER_H,
                _ => d.amount * 1000.0 / CONTROL_STEP_MIN,
            };
        }
        Self {
            t,
            cgm: trace.rows.iter().map(|r| r.cgm).collect(),
            insulin,
            carbs: trace.rows.iter().map(|r| r.meal_announced).collect(),
            dt: CONTROL_STEP_MIN,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let n = self.t.len();
        if n < 2 || self.cgm.len() != n || self.insulin.len() != n || self.carbs.len() != n {
            return Err(FitError::InvalidData("series lengths differ or are too short".into()));
        }
        if !(self.dt > 0.0) {
            return Err(FitError::InvalidData("non-positive sample time".into()));
        }
        if self.cgm.iter().chain(&self.insulin).chain(&self.carbs).any(|v| !v.is_finite()) {
            return Err(FitError::InvalidData("non-finite sample".into()));
        }
        Ok(())
    }

    pub fn days(&self) -> f64 {
        self.t.len() as f64 * self.dt / 1440.0
    }
}

/// Open-loop prediction of BG on the data grid from the recorded inputs.
pub fn simulate_for_fit(p: &PatientParameters, data: &FitData) -> Result<Vec<f64>, model::ModelError> {
    let mut x = model::initial_state_at(data.cgm[0], p)?;
    let mut out = Vec::with_capacity(data.t.len());
    for k in 0..data.t.len() {
        out.push(model::glucose_of(&x, p));
        let u = data.insulin[k];
        if data.carbs[k] > 0.0 {
            x = integrate_step(&x, &ModelInput::new(u, data.carbs[k]), p, 1.0)?.state;
            x = integrate_step(&x, &ModelInput::new(u, 0.0), p, data.dt - 1.0)?.state;
        } else {
            x = integrate_step(&x, &ModelInput::new(u, 0.0), p, data.dt)?.state;
        }
    }
    Ok(out)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt()
}

pub fn free_values(p: &PatientParameters) -> [f64; N_FREE] {
    [p.ke, p.vg_per_kg, p.si1, p.si2, p.tau_d, p.tau_s]
}

pub fn with_free_values(base: &PatientParameters, v: &[f64; N_FREE]) -> PatientParameters {
    PatientParameters {
        ke: v[0],
        vg_per_kg: v[1],
        si1: v[2],
        si2: v[3],
        tau_d: v[4],
        tau_s: v[5],
        ..*base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Free parameters range over [lo, hi] times their population value.
    pub lower_factor: f64,
    pub upper_factor: f64,
    pub starts: usize,
    pub max_evals: usize,
    /// Simplex diameter tolerance in log space.
    pub xtol: f64,
    /// Initial simplex edge in log space.
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lower_factor: 0.2,
            upper_factor: 5.0,
            starts: 5,
            max_evals: 2000,
            xtol: 1e-4,
            initial_step: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartResult {
    pub theta: [f64; N_FREE],
    pub rmse: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: PatientParameters,
    pub rmse: f64,
    /// RMSE at the population point.
    pub initial_rmse: f64,
    /// Objective evaluations of the winning start.
    pub iterations: usize,
    pub converged: bool,
    /// Per free parameter: fitted value on a search bound.
    pub bound_active: [bool; N_FREE],
    /// RMSE spread over the best three starts.
    pub flatness: f64,
    pub starts: Vec<StartResult>,
}

impl FitResult {
    pub fn any_bound_active(&self) -> bool {
        self.bound_active.iter().any(|b| *b)
    }
}

struct Objective<'a> {
    pop: &'a PatientParameters,
    data: &'a FitData,
    lo: f64,
    hi: f64,
}

impl Objective<'_> {
    fn clamp(&self, theta: &[f64; N_FREE]) -> [f64; N_FREE] {
        theta.map(|v| v.clamp(self.lo, self.hi))
    }

    fn params(&self, theta: &[f64; N_FREE]) -> PatientParameters {
        let base = free_values(self.pop);
        let th = self.clamp(theta);
        let mut v = [0.0; N_FREE];
        for i in 0..N_FREE {
            v[i] = base[i] * th[i].exp();
        }
        with_free_values(self.pop, &v)
    }

    fn cost(&self, theta: &[f64; N_FREE]) -> f64 {
        match simulate_for_fit(&self.params(theta), self.data) {
            Ok(pred) => {
                let r = rmse(&pred, &self.data.cgm);
                if r.is_finite() {
                    r
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }
}

fn diameter(simplex: &[[f64; N_FREE]]) -> f64 {
    let mut d: f64 = 0.0;
    for a in simplex {
        for b in simplex {
            let s = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            d = d.max(s.sqrt());
        }
    }
    d
}

/// Bounded Nelder–Mead; points are clamped into the box before evaluation.
fn nelder_mead(obj: &Objective, start: [f64; N_FREE], cfg: &FitConfig) -> StartResult {
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64; N_FREE]| {
        evals.set(evals.get() + 1);
        obj.cost(x)
    };
    let x0 = obj.clamp(&start);
    let mut pts = vec![x0];
    for i in 0..N_FREE {
        let mut x = x0;
        // Step inward when the start sits on the upper bound.
        x[i] = if x[i] + cfg.initial_step <= obj.hi {
            x[i] + cfg.initial_step
        } else {
            x[i] - cfg.initial_step
        };
        pts.push(obj.clamp(&x));
    }
    let mut f: Vec<f64> = pts.iter().map(eval).collect();
    let mut converged = false;

    loop {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
        pts = order.iter().map(|&i| pts[i]).collect();
        f = order.iter().map(|&i| f[i]).collect();

        if diameter(&pts) < cfg.xtol {
            converged = true;
            break;
        }
        if evals.get() >= cfg.max_evals {
            break;
        }

        let n = N_FREE;
        let mut c = [0.0; N_FREE];
        for p in &pts[..n] {
            for j in 0..N_FREE {
                c[j] += p[j] / n as f64;
            }
        }
        let along = |t: f64| -> [f64; N_FREE] {
            let mut x = [0.0; N_FREE];
            for j in 0..N_FREE {
                x[j] = c[j] + t * (pts[n][j] - c[j]);
            }
            obj.clamp(&x)
        };
        let xr = along(-alpha);
        let fr = eval(&xr);
        if fr < f[0] {
            let xe = along(-gamma);
            let fe = eval(&xe);
            if fe < fr {
                pts[n] = xe;
                f[n] = fe;
            } else {
                pts[n] = xr;
                f[n] = fr;
            }
            continue;
        }
        if fr < f[n - 1] {
            pts[n] = xr;
            f[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < f[n] {
            let x = along(-rho);
            let fx = eval(&x);
            (x, fx)
        } else {
            let x = along(rho);
            let fx = eval(&x);
            (x, fx)
        };
        if fc < f[n].min(fr) {
            pts[n] = xc;
            f[n] = fc;
            continue;
        }
        let best = pts[0];
        for i in 1..=n {
            for j in 0..N_FREE {
                pts[i][j] = best[j] + sigma * (pts[i][j] - best[j]);
            }
            f[i] = eval(&pts[i]);
        }
    }

    StartResult {
        theta: pts[0],
        rmse: f[0],
        evals: evals.get(),
        converged,
    }
}

/// Latin-hypercube draws in the log-space box.
fn latin_hypercube(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; N_FREE]> {
    let mut out = vec![[0.0; N_FREE]; n];
    for j in 0..N_FREE {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            out[i][j] = lo + (hi - lo) * (s as f64 + u) / n as f64;
        }
    }
    out
}

/// Multi-start fit of the six free parameters around `pop`.
pub fn fit(pop: &PatientParameters, data: &FitData, cfg: &FitConfig) -> Result<FitResult, FitError> {
    data.validate()?;
    if !(cfg.lower_factor > 0.0 && cfg.upper_factor > cfg.lower_factor) || cfg.starts == 0 {
        return Err(FitError::InvalidData("bad search box or start count".into()));
    }
    let obj = Objective {
        pop,
        data,
        lo: cfg.lower_factor.ln(),
        hi: cfg.upper_factor.ln(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = vec![[0.0; N_FREE]];
    starts.extend(latin_hypercube(cfg.starts - 1, obj.lo, obj.hi, &mut rng));

    let initial_rmse = obj.cost(&[0.0; N_FREE]);
    let results: Vec<StartResult> = starts
        .par_iter()
        .map(|s| nelder_mead(&obj, *s, cfg))
        .collect();

    let mut ranked: Vec<&StartResult> = results.iter().filter(|r| r.rmse.is_finite()).collect();
    if ranked.is_empty() {
        return Err(FitError::AllStartsFailed);
    }
    ranked.sort_by(|a, b| a.rmse.total_cmp(&b.rmse));
    let best = ranked[0];
    let top = &ranked[..ranked.len().min(3)];
    let flatness = top.last().map_or(0.0, |r| r.rmse - best.rmse);
    let tol = 1e-6;
    let bound_active = best
        .theta
        .map(|v| (v - obj.lo).abs() < tol || (v - obj.hi).abs() < tol);

    Ok(FitResult {
        params: obj.params(&best.theta),
        rmse: best.rmse,
        initial_rmse,
        iterations: best.evals,
        converged: best.converged,
        bound_active,
        flatness,
        starts: results,
    })
}
