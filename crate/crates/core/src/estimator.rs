//! Extended Kalman filter over the Hovorka model, driven by CGM samples and
//! the insulin and announced meals known to the controller.

use nalgebra::{SMatrix, SymmetricEigen};
use thiserror::Error;

use crate::model::{
    self, glucose_of, integrate_step, ModelError, ModelInput, ModelState, PatientParameters,
    StateMat, StateVec, N_STATES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("covariance trace {trace:e} exceeds ceiling {ceiling:e}")]
    Divergence { trace: f64, ceiling: f64 },
    #[error("invalid CGM sample {0}")]
    InvalidMeasurement(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    /// Process-noise variance per hour, per state (diagonal).
    pub q_per_hour: StateVec,
    /// CGM noise variance, (mg/dL)^2.
    pub r_meas: f64,
    /// Initial covariance diagonal.
    pub p0: StateVec,
    /// Innovation gate in innovation standard deviations.
    pub gate_sigmas: f64,
    pub trace_ceiling: f64,
    pub eig_floor: f64,
}

impl EkfConfig {
    /// Scale-aware defaults around an equilibrium state: process noise SD of
    /// 5% of each state's magnitude per hour, initial SD of 25%.
    pub fn for_equilibrium(x_eq: &ModelState, sensor_sd: f64) -> Self {
        let v = x_eq.to_vector();
        let q = v.map(|c| (0.05 * c.abs()).powi(2).max(1e-8));
        let p0 = v.map(|c| (0.25 * c.abs()).powi(2).max(1e-6));
        let r = if sensor_sd > 0.0 { sensor_sd * sensor_sd } else { 4.0 };
        Self {
            q_per_hour: q,
            r_meas: r,
            p0,
            gate_sigmas: 10.0,
            trace_ceiling: 1e12,
            eig_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x_hat: ModelState,
    pub p: StateMat,
    /// min.
    pub t: f64,
}

impl EkfState {
    pub fn new(x0: ModelState, cfg: &EkfConfig, t: f64) -> Self {
        Self {
            x_hat: x0,
            p: StateMat::from_diagonal(&cfg.p0),
            t,
        }
    }

    pub fn glucose(&self, p: &PatientParameters) -> f64 {
        glucose_of(&self.x_hat, p)
    }
}

fn symmetrize(p: &StateMat) -> StateMat {
    (p + p.transpose()) * 0.5
}

/// Symmetrize and lift eigenvalues below `floor`.
fn condition(p: &StateMat, floor: f64) -> StateMat {
    let s = symmetrize(p);
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.min() >= floor {
        return s;
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let v = eig.eigenvectors;
    symmetrize(&(v * StateMat::from_diagonal(&lifted) * v.transpose()))
}

/// Minimum eigenvalue of the symmetric part.
pub fn min_eigenvalue(p: &StateMat) -> f64 {
    SymmetricEigen::new(symmetrize(p)).eigenvalues.min()
}

/// Propagate mean and covariance over `dt` minutes.
pub fn ekf_predict(
    s: &EkfState,
    inp: &ModelInput,
    p: &PatientParameters,
    cfg: &EkfConfig,
    dt: f64,
) -> Result<EkfState, EstimatorError> {
    let next = integrate_step(&s.x_hat, inp, p, dt)?;
    let (a_c, b_c) = model::jacobians(&s.x_hat, p);
    let (f, _) = model::discretize(&a_c, &b_c, dt);
    let q = StateMat::from_diagonal(&(cfg.q_per_hour * (dt / 60.0)));
    let pn = condition(&(f * s.p * f.transpose() + q), cfg.eig_floor);
    let trace = pn.trace();
    if !(trace.is_finite() && trace <= cfg.trace_ceiling) {
        return Err(EstimatorError::Divergence {
            trace,
            ceiling: cfg.trace_ceiling,
        });
    }
    Ok(EkfState {
        x_hat: next.state,
        p: pn,
        t: s.t + dt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub state: EkfState,
    /// Measurement minus predicted output, mg/dL.
    pub innovation: f64,
    pub innovation_var: f64,
    /// False when the gate rejected the sample.
    pub accepted: bool,
}

/// Scalar CGM update with Joseph-form covariance.
pub fn ekf_update(
    s: &EkfState,
    y_cgm: f64,
    p: &PatientParameters,
    cfg: &EkfConfig,
) -> Result<UpdateOutcome, EstimatorError> {
    if !(y_cgm.is_finite() && (20.0..=600.0).contains(&y_cgm)) {
        return Err(EstimatorError::InvalidMeasurement(y_cgm));
    }
    let h = model::output_row(p);
    let innovation = y_cgm - glucose_of(&s.x_hat, p);
    let s_var = (h * s.p * h.transpose())[(0, 0)] + cfg.r_meas;
    if innovation.abs() > cfg.gate_sigmas * s_var.sqrt() {
        return Ok(UpdateOutcome {
            state: s.clone(),
            innovation,
            innovation_var: s_var,
            accepted: false,
        });
    }
    let k: SMatrix<f64, N_STATES, 1> = s.p * h.transpose() / s_var;
    let mut x = s.x_hat.to_vector() + k * innovation;
    for c in x.iter_mut() {
        if *c < 0.0 {
            *c = 0.0;
        }
    }
    let ikh = StateMat::identity() - k * h;
    let pn = ikh * s.p * ikh.transpose() + k * k.transpose() * cfg.r_meas;
    Ok(UpdateOutcome {
        state: EkfState {
            x_hat: ModelState::from_vector(&x),
            p: condition(&pn, cfg.eig_floor),
            t: s.t,
        },
        innovation,
        innovation_var: s_var,
        accepted: true,
    })
}
