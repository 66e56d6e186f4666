//! Successive-linearization MPC.
//!
//! Every control interval the internal model is relinearized at the current
//! state estimate, the prediction is condensed into a box-constrained QP
//! over the future basal rates, and only the first move is applied. The
//! admissible rates are adapted to total daily insulin, insulin on board,
//! the CGM level and its rate of change.
//!
//! Rates inside this module are U/h; the physiological model takes mU/min.

pub mod qp;

use nalgebra::{DMatrix, DVector};

use crate::estimator::EkfState;
use crate::model::{self, LinearizedModel, PatientParameters};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus};

/// mU/min per U/h.
pub const MU_PER_MIN_PER_U_PER_H: f64 = 1000.0 / 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub np: usize,
    pub nc: usize,
    /// Glucose target, mg/dL.
    pub target: f64,
    pub q_weight: f64,
    pub r_weight: f64,
    pub n_tdi_min: f64,
    pub n_tdi_max: f64,
    /// Falling-glucose suspension threshold, mg/dL/min.
    pub n_roc_high: f64,
    pub delta_u_min: f64,
    pub delta_u_max: f64,
    /// Control interval, min.
    pub ts: f64,
    pub low_glucose_floor: f64,
    /// Multiplier on the one-hour insulin budget used as the IoB threshold.
    pub iob_threshold_scale: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            np: 12,
            nc: 12,
            target: 120.0,
            q_weight: 1e-6,
            r_weight: 1e-6,
            n_tdi_min: 1.5,
            n_tdi_max: 3.0,
            n_roc_high: 0.7,
            delta_u_min: f64::NEG_INFINITY,
            delta_u_max: f64::INFINITY,
            ts: 5.0,
            low_glucose_floor: 40.0,
            iob_threshold_scale: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.nc < 1 || self.np < self.nc {
            return Err(format!("need np >= nc >= 1 (np={}, nc={})", self.np, self.nc));
        }
        if !(self.q_weight > 0.0 && self.r_weight > 0.0) {
            return Err("q_weight and r_weight must be positive".into());
        }
        if !(self.n_tdi_max > self.n_tdi_min && self.n_tdi_min > 0.0) {
            return Err("need n_tdi_max > n_tdi_min > 0".into());
        }
        if !(self.ts > 0.0) {
            return Err("ts must be positive".into());
        }
        if self.delta_u_min > self.delta_u_max {
            return Err("delta_u_min exceeds delta_u_max".into());
        }
        Ok(())
    }
}

/// Therapy settings as the controller believes them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TherapyProfile {
    /// Open-loop basal rate, U/h.
    pub u_basal: f64,
    /// Basal insulin over 24 h, U/day.
    pub tdi_basal: f64,
    /// Carbohydrate ratio, g/U.
    pub cr: f64,
    /// Correction factor, mg/dL per U.
    pub cf: f64,
    /// Insulin action duration, min.
    pub dia: f64,
}

impl TherapyProfile {
    /// Same profile with basal beliefs multiplied by `factor`.
    pub fn with_basal_bias(&self, factor: f64) -> Self {
        Self {
            u_basal: self.u_basal * factor,
            tdi_basal: self.tdi_basal * factor,
            ..*self
        }
    }

    /// Hourly basal-equivalent of the daily basal total, U/h.
    pub fn hourly_basal(&self) -> f64 {
        self.tdi_basal / 24.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DoseKind {
    BasalStep,
    PrandialBolus,
    CorrectionBolus,
}

impl DoseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DoseKind::BasalStep => "basal",
            DoseKind::PrandialBolus => "prandial",
            DoseKind::CorrectionBolus => "correction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DosingRecord {
    /// Delivery start, min.
    pub t: f64,
    /// Insulin delivered, U.
    pub amount: f64,
    pub kind: DoseKind,
    /// Delivery duration, min (the control interval for basal steps).
    pub duration: f64,
}

/// Insulin on board (U) with linear decay over the action duration.
/// Boluses count fully; basal steps count only their part above the
/// nominal profile rate.
pub fn compute_iob(history: &[DosingRecord], t_now: f64, profile: &TherapyProfile) -> f64 {
    history
        .iter()
        .filter(|r| r.t <= t_now)
        .map(|r| {
            let active = match r.kind {
                DoseKind::BasalStep => (r.amount - profile.u_basal * r.duration / 60.0).max(0.0),
                _ => r.amount,
            };
            let remaining = (1.0 - (t_now - r.t) / profile.dia).max(0.0);
            active * remaining
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocEstimate {
    /// mg/dL/min.
    pub roc: f64,
    pub cold_start: bool,
}

/// Window over which CGM samples contribute to the slope, min.
pub const ROC_WINDOW_MIN: f64 = 15.0;

/// Least-squares slope over the most recent (at most 3) CGM samples inside
/// the 15-min window ending at `t_now`.
pub fn compute_roc(cgm_history: &[(f64, f64)], t_now: f64) -> RocEstimate {
    let recent: Vec<(f64, f64)> = cgm_history
        .iter()
        .rev()
        .filter(|(t, _)| *t <= t_now && t_now - *t < ROC_WINDOW_MIN)
        .take(3)
        .copied()
        .collect();
    if recent.len() < 2 {
        return RocEstimate {
            roc: 0.0,
            cold_start: true,
        };
    }
    let n = recent.len() as f64;
    let tm = recent.iter().map(|s| s.0).sum::<f64>() / n;
    let ym = recent.iter().map(|s| s.1).sum::<f64>() / n;
    let sxy: f64 = recent.iter().map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = recent.iter().map(|(t, _)| (t - tm) * (t - tm)).sum();
    if sxx <= 0.0 {
        return RocEstimate {
            roc: 0.0,
            cold_start: true,
        };
    }
    RocEstimate {
        roc: sxy / sxx,
        cold_start: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsulinBounds {
    /// U/h.
    pub min: f64,
    /// U/h.
    pub max: f64,
    pub suspended: bool,
    /// Which TDI branch applied.
    pub high_iob: bool,
}

/// Admissible basal range (U/h), applied to every move of the horizon.
pub fn adaptive_bounds(
    y_cgm: f64,
    roc: f64,
    iob: f64,
    profile: &TherapyProfile,
    cfg: &MpcConfig,
) -> InsulinBounds {
    let hourly = profile.hourly_basal();
    let threshold = cfg.iob_threshold_scale * cfg.n_tdi_max * hourly;
    let high_iob = iob > threshold;
    let (mut lo, mut hi) = if high_iob {
        (profile.u_basal, cfg.n_tdi_min * hourly)
    } else {
        (0.0, cfg.n_tdi_max * hourly)
    };
    // CGM/RoC stage. Readings at or below the floor also suspend.
    let hypo = y_cgm <= 70.0;
    let falling = y_cgm > 70.0 && y_cgm < 200.0 && roc <= -cfg.n_roc_high;
    let suspended = hypo || falling;
    if suspended {
        lo = 0.0;
        hi = 0.0;
    } else if y_cgm > 70.0 && y_cgm <= 120.0 {
        lo = lo.max(0.0);
        hi = hi.min(profile.u_basal);
    }
    if lo > hi {
        lo = hi;
    }
    debug_assert!(lo <= hi);
    InsulinBounds {
        min: lo,
        max: hi,
        suspended,
        high_iob,
    }
}

/// Condensed QP together with the prediction it was built from.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    /// Predicted glucose (mg/dL) for steps 1..=Np with U = 0.
    pub y_free: DVector<f64>,
    /// dy/dU, Np x Nc, mg/dL per U/h.
    pub gain: DMatrix<f64>,
}

impl CondensedQp {
    pub fn predict(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.y_free + &self.gain * u
    }
}

/// Build the tracking QP around the linearized model.
///
/// Outputs y_1..y_Np enter the tracking term, inputs beyond the control
/// horizon repeat the last move, and `u_prev` anchors the first increment.
pub fn build_condensed(
    lin: &LinearizedModel,
    x_hat: &model::ModelState,
    u_prev: f64,
    bounds: &InsulinBounds,
    cfg: &MpcConfig,
    profile: &TherapyProfile,
) -> CondensedQp {
    let np = cfg.np;
    let nc = cfg.nc;
    let b = lin.b * MU_PER_MIN_PER_U_PER_H;
    let x_op = lin.x_op.to_vector();

    // Free response with every deviation input at -u_op (i.e. U = 0).
    let mut y_free = DVector::zeros(np);
    let mut dx = x_hat.to_vector() - x_op;
    for k in 0..np {
        dx = lin.a * dx + lin.offset - lin.b * lin.u_op;
        y_free[k] = lin.y_op + (lin.c * dx)[(0, 0)];
    }

    // Markov parameters s_m = C A^m B.
    let mut markov = Vec::with_capacity(np);
    let mut ab = b;
    for _ in 0..np {
        markov.push((lin.c * ab)[(0, 0)]);
        ab = lin.a * ab;
    }
    let mut gain = DMatrix::zeros(np, nc);
    for k in 1..=np {
        for j in 0..k {
            let col = j.min(nc - 1);
            gain[(k - 1, col)] += markov[k - 1 - j];
        }
    }

    let ub2 = profile.u_basal * profile.u_basal;
    let q = cfg.q_weight / ub2;
    let r = cfg.r_weight / ub2;

    let mut diff = DMatrix::zeros(nc, nc);
    for k in 0..nc {
        diff[(k, k)] = 1.0;
        if k > 0 {
            diff[(k, k - 1)] = -1.0;
        }
    }
    let resid = &y_free - DVector::from_element(np, cfg.target);
    let gt = gain.transpose();
    let mut h = (&gt * &gain) * (2.0 * q) + (diff.transpose() * &diff) * (2.0 * r);
    h = (&h + h.transpose()) * 0.5;
    let mut g = (&gt * resid) * (2.0 * q);
    // -2R D' e0 u_prev, and D' e0 = e0.
    g[0] -= 2.0 * r * u_prev;

    let lb = DVector::from_element(nc, bounds.min);
    let ub = DVector::from_element(nc, bounds.max);
    let rows = rate_rows(u_prev, bounds, cfg);

    CondensedQp {
        qp: QpProblem { h, g, lb, ub, rows },
        y_free,
        gain,
    }
}

/// Optional increment limits as rows. The first increment is widened so
/// the clamped previous rate stays admissible: safety bounds take
/// precedence over rate limits.
fn rate_rows(
    u_prev: f64,
    bounds: &InsulinBounds,
    cfg: &MpcConfig,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let nc = cfg.nc;
    let has_max = cfg.delta_u_max.is_finite();
    let has_min = cfg.delta_u_min.is_finite();
    if !has_max && !has_min {
        return None;
    }
    let jump = u_prev.clamp(bounds.min, bounds.max) - u_prev;
    let mut a_rows: Vec<Vec<f64>> = Vec::new();
    let mut b_rows = Vec::new();
    for k in 0..nc {
        let mut row = vec![0.0; nc];
        row[k] = 1.0;
        if k > 0 {
            row[k - 1] = -1.0;
        }
        let offset = if k == 0 { u_prev } else { 0.0 };
        if has_max {
            let lim = if k == 0 { cfg.delta_u_max.max(jump) } else { cfg.delta_u_max };
            a_rows.push(row.clone());
            b_rows.push(lim + offset);
        }
        if has_min {
            let lim = if k == 0 { cfg.delta_u_min.min(jump) } else { cfg.delta_u_min };
            a_rows.push(row.iter().map(|v| -v).collect());
            b_rows.push(-lim - offset);
        }
    }
    let a = DMatrix::from_fn(a_rows.len(), nc, |i, j| a_rows[i][j]);
    Some((a, DVector::from_vec(b_rows)))
}

pub fn build_qp(
    lin: &LinearizedModel,
    x_hat: &model::ModelState,
    u_prev: f64,
    bounds: &InsulinBounds,
    cfg: &MpcConfig,
    profile: &TherapyProfile,
) -> QpProblem {
    build_condensed(lin, x_hat, u_prev, bounds, cfg, profile).qp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Ok,
    SolverDegraded(QpStatus),
    LinearizationFailed,
}

impl MpcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MpcStatus::Ok => "ok",
            MpcStatus::SolverDegraded(s) => s.as_str(),
            MpcStatus::LinearizationFailed => "linearization-failed",
        }
    }

    pub fn is_degraded(&self) -> bool {
        !matches!(self, MpcStatus::Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcDecision {
    pub t: f64,
    pub cgm: f64,
    pub roc: RocEstimate,
    pub iob: f64,
    pub bounds: InsulinBounds,
    /// Commanded basal for the next interval, U/h.
    pub rate: f64,
    pub iterations: usize,
    pub status: MpcStatus,
}

/// One receding-horizon step: linearize at the estimate, adapt bounds,
/// solve, apply the first move and log it in `dosing`.
#[allow(clippy::too_many_arguments)]
pub fn mpc_step(
    ekf: &EkfState,
    cgm_history: &[(f64, f64)],
    dosing: &mut Vec<DosingRecord>,
    u_prev: f64,
    profile: &TherapyProfile,
    cfg: &MpcConfig,
    p: &PatientParameters,
) -> MpcDecision {
    let t_now = ekf.t;
    let cgm = cgm_history.last().map(|s| s.1).unwrap_or(f64::NAN);
    let roc = compute_roc(cgm_history, t_now);
    let iob = compute_iob(dosing, t_now, profile);
    let bounds = adaptive_bounds(cgm, roc.roc, iob, profile, cfg);
    let fallback = u_prev.clamp(bounds.min, bounds.max);

    let (rate, iterations, status) =
        match model::linearize(&ekf.x_hat, u_prev * MU_PER_MIN_PER_U_PER_H, p, cfg.ts) {
            Err(_) => (fallback, 0, MpcStatus::LinearizationFailed),
            Ok(lin) => {
                let qp = build_qp(&lin, &ekf.x_hat, u_prev, &bounds, cfg, profile);
                let warm = DVector::from_element(cfg.nc, u_prev);
                let sol = solve_qp(&qp, Some(&warm));
                match sol.status {
                    QpStatus::Optimal => (
                        sol.u[0].clamp(bounds.min, bounds.max),
                        sol.iterations,
                        MpcStatus::Ok,
                    ),
                    s => (fallback, sol.iterations, MpcStatus::SolverDegraded(s)),
                }
            }
        };

    dosing.push(DosingRecord {
        t: t_now,
        amount: rate * cfg.ts / 60.0,
        kind: DoseKind::BasalStep,
        duration: cfg.ts,
    });
    MpcDecision {
        t: t_now,
        cgm,
        roc,
        iob,
        bounds,
        rate,
        iterations,
        status,
    }
}
