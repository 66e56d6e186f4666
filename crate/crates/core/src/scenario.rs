//! Virtual cohort, meal and sensor processes, hypoglycemia rescue and the
//! closed-loop runner for the benchmark, robustness and training protocols.

use std::fmt;
use std::str::FromStr;

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::estimator::{ekf_predict, ekf_update, EkfConfig, EkfState};
use crate::ibd::{
    correction_bolus, prandial_bolus, BolusBreakdown, BolusRequest, CorrectionGate, GateState,
    TrendArrow,
};
use crate::model::{
    self, derivatives_with_appearance, glucose_of, ModelError, ModelInput, ModelState,
    PatientParameters, N_STATES,
};
use crate::mpc::{
    compute_iob, compute_roc, mpc_step, DoseKind, DosingRecord, InsulinBounds, MpcConfig,
    MpcDecision, MpcStatus, TherapyProfile, MU_PER_MIN_PER_U_PER_H,
};

pub const MINUTES_PER_DAY: f64 = 1440.0;
/// Control interval, min.
pub const CONTROL_STEP_MIN: f64 = 5.0;
pub const STEPS_PER_DAY: usize = 288;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cohort draw failed after {0} retries")]
    CohortExhausted(usize),
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
    Train,
}

impl ScenarioId {
    pub const TESTS: [ScenarioId; 10] = [
        ScenarioId::S0,
        ScenarioId::S1,
        ScenarioId::S2,
        ScenarioId::S3,
        ScenarioId::S4,
        ScenarioId::S5,
        ScenarioId::S6,
        ScenarioId::S7,
        ScenarioId::S8,
        ScenarioId::S9,
    ];

    pub fn index(&self) -> usize {
        match self {
            ScenarioId::Train => 10,
            s => ScenarioId::TESTS.iter().position(|x| x == s).unwrap_or(0),
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioId::Train => write!(f, "TRAIN"),
            s => write!(f, "S{}", s.index()),
        }
    }
}

impl FromStr for ScenarioId {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase().replace('-', "");
        if t == "TRAIN" {
            return Ok(ScenarioId::Train);
        }
        t.strip_prefix('S')
            .and_then(|d| d.parse::<usize>().ok())
            .and_then(|i| ScenarioId::TESTS.get(i).copied())
            .ok_or_else(|| ScenarioError::UnknownScenario(s.to_string()))
    }
}

/// Carbohydrate-counting error model for one day of meals. The announced
/// amount is the true amount times a factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CcError {
    None,
    /// Factor uniform in [lo, hi].
    Uniform { lo: f64, hi: f64 },
    /// Fixed factor.
    Systematic(f64),
    /// Factor 1 + e, e ~ N(0, sd) truncated to [-max, max].
    Normal { sd: f64, max: f64 },
}

impl CcError {
    fn factor<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CcError::None => 1.0,
            CcError::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
            CcError::Systematic(f) => f,
            CcError::Normal { sd, max } => {
                if sd <= 0.0 {
                    return 1.0;
                }
                let n = Normal::new(0.0, sd).expect("positive sd");
                loop {
                    let e: f64 = n.sample(rng);
                    if e.abs() <= max {
                        break 1.0 + e;
                    }
                }
            }
        }
    }
}

impl fmt::Display for CcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CcError::None => write!(f, "none"),
            CcError::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            CcError::Systematic(x) => write!(f, "systematic({x})"),
            CcError::Normal { sd, max } => write!(f, "normal({sd},{max})"),
        }
    }
}

impl FromStr for CcError {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "none" {
            return Ok(CcError::None);
        }
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| format!("bad carb-count error `{s}`"))?;
        let args: Vec<f64> = rest
            .trim_end_matches(')')
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad carb-count error `{s}`: {e}"))?;
        match (name.trim(), args.as_slice()) {
            ("uniform", [lo, hi]) => Ok(CcError::Uniform { lo: *lo, hi: *hi }),
            ("systematic", [x]) => Ok(CcError::Systematic(*x)),
            ("normal", [sd, max]) => Ok(CcError::Normal { sd: *sd, max: *max }),
            _ => Err(format!("bad carb-count error `{s}`")),
        }
    }
}

/// Declarative description of one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub days: usize,
    /// Per-day multiplier on the controller's basal belief; the last entry
    /// repeats.
    pub basal_bias: Vec<f64>,
    /// Per-day carb-count error; the last entry repeats.
    pub cc_error: Vec<CcError>,
    /// Announcement delay range, min.
    pub announce_delay: Option<(f64, f64)>,
    /// Initial plant glucose, mg/dL (equilibrium at 120 when absent).
    pub initial_glucose: Option<f64>,
    pub rescue: bool,
    /// Run the MPC; otherwise a fixed nominal basal with prandial boluses.
    pub closed_loop: bool,
}

const RANDOM_OVER: CcError = CcError::Uniform { lo: 1.0, hi: 1.25 };
const RANDOM_UNDER: CcError = CcError::Uniform { lo: 0.75, hi: 1.0 };
const RANDOM_BOTH: CcError = CcError::Uniform { lo: 0.75, hi: 1.25 };

impl ScenarioSpec {
    pub fn preset(id: ScenarioId) -> Self {
        use ScenarioId::*;
        let mut s = ScenarioSpec {
            id,
            days: 5,
            basal_bias: vec![1.0],
            cc_error: vec![CcError::None],
            announce_delay: Some((0.0, 30.0)),
            initial_glucose: None,
            rescue: true,
            closed_loop: true,
        };
        let piecewise_basal = vec![1.0, 1.25, 1.0, 0.75, 1.0];
        let piecewise_cc = vec![
            RANDOM_BOTH,
            CcError::Systematic(1.25),
            RANDOM_BOTH,
            CcError::Systematic(0.75),
            RANDOM_BOTH,
        ];
        match id {
            S0 => s.announce_delay = None,
            S1 => s.basal_bias = vec![1.25],
            S2 => s.basal_bias = vec![0.75],
            S3 => s.cc_error = vec![RANDOM_OVER],
            S4 => s.cc_error = vec![RANDOM_UNDER],
            S5 => s.basal_bias = piecewise_basal,
            S6 => s.cc_error = piecewise_cc,
            S7 => {
                s.basal_bias = piecewise_basal;
                s.cc_error = piecewise_cc;
            }
            S8 => {
                s.days = 1;
                s.initial_glucose = Some(60.0);
            }
            S9 => {
                s.days = 1;
                s.initial_glucose = Some(250.0);
            }
            Train => {
                s.days = 7;
                s.announce_delay = None;
                s.cc_error = vec![CcError::Normal { sd: 0.25, max: 0.5 }];
                s.closed_loop = false;
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.days < 1 {
            return Err(ScenarioError::InvalidSpec("days must be >= 1".into()));
        }
        if self.basal_bias.is_empty() || self.basal_bias.iter().any(|b| !(*b > 0.0)) {
            return Err(ScenarioError::InvalidSpec(
                "basal_bias multipliers must be positive".into(),
            ));
        }
        if self.cc_error.is_empty() {
            return Err(ScenarioError::InvalidSpec("cc_error must not be empty".into()));
        }
        if let Some((a, b)) = self.announce_delay {
            if !(0.0 <= a && a <= b) {
                return Err(ScenarioError::InvalidSpec(format!("bad delay range [{a}, {b}]")));
            }
        }
        Ok(())
    }

    pub fn bias_for_day(&self, day: usize) -> f64 {
        *self.basal_bias.get(day).or(self.basal_bias.last()).unwrap_or(&1.0)
    }

    pub fn cc_for_day(&self, day: usize) -> CcError {
        *self.cc_error.get(day).or(self.cc_error.last()).unwrap_or(&CcError::None)
    }

    pub fn steps(&self) -> usize {
        self.days * STEPS_PER_DAY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MealSlot {
    Breakfast,
    Lunch,
    Dinner,
    Rescue,
}

impl MealSlot {
    pub fn as_str(&self) -> &'static str {
        match self {
            MealSlot::Breakfast => "breakfast",
            MealSlot::Lunch => "lunch",
            MealSlot::Dinner => "dinner",
            MealSlot::Rescue => "rescue",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MealEvent {
    pub t_true: f64,
    pub grams_true: f64,
    pub t_announced: f64,
    /// Zero for rescue carbohydrate, which is never announced.
    pub grams_announced: f64,
    pub slot: MealSlot,
}

struct MealWindow {
    slot: MealSlot,
    start: f64,
    end: f64,
    lo: f64,
    hi: f64,
}

const MEAL_WINDOWS: [MealWindow; 3] = [
    MealWindow {
        slot: MealSlot::Breakfast,
        start: 420.0,
        end: 510.0,
        lo: 15.0,
        hi: 50.0,
    },
    MealWindow {
        slot: MealSlot::Lunch,
        start: 720.0,
        end: 810.0,
        lo: 50.0,
        hi: 90.0,
    },
    MealWindow {
        slot: MealSlot::Dinner,
        start: 1140.0,
        end: 1230.0,
        lo: 30.0,
        hi: 70.0,
    },
];

fn truncated_normal<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let n = Normal::new(0.5 * (lo + hi), (hi - lo) / 4.0).expect("positive sd");
    loop {
        let v: f64 = n.sample(rng);
        if (lo..=hi).contains(&v) {
            break v;
        }
    }
}

/// Three meals per day. Times and sizes come from one stream and the
/// announcement process from another, so scenarios sharing a seed share
/// the same meals.
pub fn generate_meals(spec: &ScenarioSpec, seed: u64) -> Vec<MealEvent> {
    let mut meal_rng = ChaCha8Rng::seed_from_u64(seed);
    meal_rng.set_stream(1);
    let mut ann_rng = ChaCha8Rng::seed_from_u64(seed);
    ann_rng.set_stream(2);
    let mut meals = Vec::with_capacity(spec.days * 3);
    for day in 0..spec.days {
        let cc = spec.cc_for_day(day);
        for w in &MEAL_WINDOWS {
            let t = day as f64 * MINUTES_PER_DAY + meal_rng.random_range(w.start..w.end).floor();
            let grams = truncated_normal(&mut meal_rng, w.lo, w.hi);
            let delay = match spec.announce_delay {
                Some((a, b)) if b > a => ann_rng.random_range(a..=b),
                Some((a, _)) => a,
                None => 0.0,
            };
            let factor = cc.factor(&mut ann_rng);
            meals.push(MealEvent {
                t_true: t,
                grams_true: grams,
                t_announced: t + delay,
                grams_announced: grams * factor,
                slot: w.slot,
            });
        }
    }
    meals
}

/// AR(1) CGM error model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    /// Innovation SD, mg/dL; zero turns noise off.
    pub sigma: f64,
    pub phi: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            phi: 0.7,
            lo: 40.0,
            hi: 400.0,
        }
    }
}

/// Carries the AR(1) error between samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorState {
    pub error: f64,
}

pub fn sense_cgm<R: Rng>(
    plant_bg: f64,
    model: &SensorModel,
    state: &mut SensorState,
    rng: &mut R,
) -> f64 {
    if model.sigma > 0.0 {
        let w: f64 = Normal::new(0.0, model.sigma).expect("positive sd").sample(rng);
        state.error = model.phi * state.error + w;
    } else {
        state.error = 0.0;
    }
    (plant_bg + state.error).clamp(model.lo, model.hi)
}

/// 15/15 hypoglycemia treatment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescueRule {
    pub threshold: f64,
    pub interval: f64,
    pub grams: f64,
    /// Absorption time constant relative to the subject's tau_D.
    pub tau_factor: f64,
}

impl Default for RescueRule {
    fn default() -> Self {
        Self {
            threshold: 70.0,
            interval: 15.0,
            grams: 15.0,
            tau_factor: 0.5,
        }
    }
}

/// Emit a rescue meal when plant BG is below threshold and the previous
/// rescue is at least `interval` minutes old.
pub fn apply_rescue(
    t: f64,
    plant_bg: f64,
    last_rescue: &mut Option<f64>,
    rule: &RescueRule,
) -> Option<MealEvent> {
    if plant_bg >= rule.threshold {
        return None;
    }
    if last_rescue.is_some_and(|l| t - l < rule.interval) {
        return None;
    }
    *last_rescue = Some(t);
    Some(MealEvent {
        t_true: t,
        grams_true: rule.grams,
        t_announced: t,
        grams_announced: 0.0,
        slot: MealSlot::Rescue,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    /// Coefficient of variation of the log-normal parameter draws.
    pub cv: f64,
    pub bw_min: f64,
    pub bw_max: f64,
    /// Assumed basal share of total daily insulin when deriving CR and CF.
    pub basal_fraction: f64,
    pub dia: f64,
    pub max_retries: usize,
    /// Glucose at which the nominal basal is derived, mg/dL.
    pub basal_glucose: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            cv: 0.15,
            bw_min: 55.0,
            bw_max: 95.0,
            basal_fraction: 0.4,
            dia: 240.0,
            max_retries: 100,
            basal_glucose: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSubject {
    pub id: usize,
    pub plant_params: PatientParameters,
    pub controller_params: PatientParameters,
    pub profile: TherapyProfile,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Therapy profile from a subject's true basal requirement.
pub fn derive_profile(
    plant: &PatientParameters,
    cfg: &CohortConfig,
) -> Result<TherapyProfile, ModelError> {
    let (_, u_ss) = model::find_steady_state(cfg.basal_glucose, plant)?;
    let u_basal = u_ss / MU_PER_MIN_PER_U_PER_H;
    let tdi_basal = 24.0 * u_basal;
    let tdi = tdi_basal / cfg.basal_fraction;
    Ok(TherapyProfile {
        u_basal,
        tdi_basal,
        cr: 500.0 / tdi,
        cf: 1800.0 / tdi,
        dia: cfg.dia,
    })
}

pub fn generate_cohort(
    n: usize,
    seed: u64,
    cfg: &CohortConfig,
) -> Result<Vec<VirtualSubject>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (1.0 + cfg.cv * cfg.cv).ln().sqrt();
    let lognormal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut retries = 0;
        loop {
            let bw = if cfg.bw_max > cfg.bw_min {
                rng.random_range(cfg.bw_min..cfg.bw_max)
            } else {
                cfg.bw_min
            };
            let pop = PatientParameters::population(bw);
            let mut draw = |v: f64| {
                let z: f64 = lognormal.sample(&mut rng);
                if sigma > 0.0 {
                    v * z.exp()
                } else {
                    v
                }
            };
            let plant = PatientParameters {
                k12: draw(pop.k12),
                egp0_per_kg: draw(pop.egp0_per_kg),
                si1: draw(pop.si1),
                si2: draw(pop.si2),
                si3: draw(pop.si3),
                tau_s: draw(pop.tau_s),
                tau_d: draw(pop.tau_d),
                ke: draw(pop.ke),
                vg_per_kg: draw(pop.vg_per_kg),
                ..pop
            };
            match derive_profile(&plant, cfg) {
                Ok(profile) => {
                    out.push(VirtualSubject {
                        id,
                        plant_params: plant,
                        controller_params: pop,
                        profile,
                        seed: mix_seed(seed, id as u64 + 1),
                    });
                    break;
                }
                Err(_) => {
                    retries += 1;
                    if retries > cfg.max_retries {
                        return Err(ScenarioError::CohortExhausted(cfg.max_retries));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Everything the closed loop needs besides the subject and scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mpc: MpcConfig,
    pub gate: CorrectionGate,
    pub sensor: SensorModel,
    pub rescue: RescueRule,
    /// Target for bolus formulas, mg/dL.
    pub bolus_target: f64,
    /// Innovation gate for the estimator, in SDs.
    pub ekf_gate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            gate: CorrectionGate::default(),
            sensor: SensorModel::default(),
            rescue: RescueRule::default(),
            bolus_target: 120.0,
            ekf_gate: 10.0,
        }
    }
}

/// What the controller is told at a sampling instant. Deliberately free of
/// plant truth: no true carbohydrate, no true basal need.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub cgm: f64,
    /// Announced carbohydrate (g) reported during this interval.
    pub announced: Vec<f64>,
    /// Basal profile the user has programmed for today.
    pub profile: TherapyProfile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolusEvent {
    pub t: f64,
    pub kind: DoseKind,
    pub terms: BolusBreakdown,
    pub cho_announced: f64,
    pub arrow: TrendArrow,
    pub gate: GateState,
}

/// Output of one controller step: insulin for the next interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub basal: f64,
    pub prandial: f64,
    pub correction: f64,
    pub decision: Option<MpcDecision>,
    pub bounds: InsulinBounds,
    pub boluses: Vec<BolusEvent>,
    pub estimate_bg: f64,
    pub measurement_rejected: bool,
    pub degraded: bool,
}

/// Controller side of the loop: estimator, MPC and bolus logic for one
/// subject.
#[derive(Debug, Clone)]
pub struct Controller {
    params: PatientParameters,
    cfg: SimConfig,
    ekf_cfg: EkfConfig,
    ekf: EkfState,
    cgm_history: Vec<(f64, f64)>,
    dosing: Vec<DosingRecord>,
    gate_state: GateState,
    u_prev: f64,
    closed_loop: bool,
    /// Insulin (mU/min) and carbohydrate (g/min) applied to the estimate
    /// over the current interval.
    pending: ModelInput,
}

impl Controller {
    pub fn new(
        params: PatientParameters,
        profile: &TherapyProfile,
        cfg: &SimConfig,
        first_cgm: f64,
        t0: f64,
        closed_loop: bool,
    ) -> Result<Self, ModelError> {
        let x0 = model::initial_state_at(first_cgm, &params)?;
        let x_eq = model::initial_state_at(cfg.mpc.target, &params)?;
        let mut ekf_cfg = EkfConfig::for_equilibrium(&x_eq, cfg.sensor.sigma);
        ekf_cfg.gate_sigmas = cfg.ekf_gate;
        Ok(Self {
            params,
            cfg: cfg.clone(),
            ekf: EkfState::new(x0, &ekf_cfg, t0),
            ekf_cfg,
            cgm_history: Vec::new(),
            dosing: Vec::new(),
            gate_state: GateState::default(),
            u_prev: profile.u_basal,
            closed_loop,
            pending: ModelInput::default(),
        })
    }

    pub fn dosing(&self) -> &[DosingRecord] {
        &self.dosing
    }

    pub fn estimate(&self) -> &EkfState {
        &self.ekf
    }

    pub fn step(&mut self, obs: &Observation) -> Command {
        let t = obs.t;
        let profile = obs.profile;
        let mut degraded = false;
        let mut rejected = false;

        if self.closed_loop {
            if t > self.ekf.t {
                match ekf_predict(&self.ekf, &self.pending, &self.params, &self.ekf_cfg, t - self.ekf.t) {
                    Ok(s) => self.ekf = s,
                    Err(_) => {
                        degraded = true;
                        self.reset_estimate(obs.cgm, t);
                    }
                }
            }
            match ekf_update(&self.ekf, obs.cgm, &self.params, &self.ekf_cfg) {
                Ok(out) => {
                    rejected = !out.accepted;
                    self.ekf = out.state;
                }
                Err(_) => degraded = true,
            }
        }
        self.cgm_history.push((t, obs.cgm));

        let roc = compute_roc(&self.cgm_history, t);
        let arrow = TrendArrow::from_roc(roc.roc);
        let mut boluses = Vec::new();
        let mut prandial = 0.0;
        let mut correction = 0.0;
        let mut announced_carbs = 0.0;

        for &cho in &obs.announced {
            let iob = compute_iob(&self.dosing, t, &profile);
            let terms = prandial_bolus(&BolusRequest {
                t,
                cho,
                g_cur: obs.cgm,
                arrow,
                g_tar: self.cfg.bolus_target,
                profile,
                iob,
            });
            self.gate_state.last_meal_announcement = Some(t);
            if terms.amount > 0.0 {
                self.dosing.push(DosingRecord {
                    t,
                    amount: terms.amount,
                    kind: DoseKind::PrandialBolus,
                    duration: CONTROL_STEP_MIN,
                });
            }
            prandial += terms.amount;
            announced_carbs += cho;
            boluses.push(BolusEvent {
                t,
                kind: DoseKind::PrandialBolus,
                terms,
                cho_announced: cho,
                arrow,
                gate: self.gate_state,
            });
        }

        if self.closed_loop {
            let iob = compute_iob(&self.dosing, t, &profile);
            let mut gate = self.cfg.gate;
            gate.g_tar = self.cfg.bolus_target;
            if let Some(terms) = correction_bolus(
                t,
                obs.cgm,
                &arrow,
                &profile,
                iob,
                &gate,
                &mut self.gate_state,
            ) {
                if terms.amount > 0.0 {
                    self.dosing.push(DosingRecord {
                        t,
                        amount: terms.amount,
                        kind: DoseKind::CorrectionBolus,
                        duration: CONTROL_STEP_MIN,
                    });
                    correction = terms.amount;
                    boluses.push(BolusEvent {
                        t,
                        kind: DoseKind::CorrectionBolus,
                        terms,
                        cho_announced: 0.0,
                        arrow,
                        gate: self.gate_state,
                    });
                }
            }
        }

        // Known boluses and announced carbohydrate enter the estimate's
        // depots now so the prediction accounts for them.
        let bolus_mu = (prandial + correction) * 1000.0;
        if self.closed_loop {
            self.ekf.x_hat.s1 += bolus_mu;
            self.ekf.x_hat.d1 += announced_carbs * self.params.carb_to_mmol();
        }

        let (basal, decision, bounds) = if self.closed_loop {
            let mut ekf_now = self.ekf.clone();
            ekf_now.t = t;
            let d = mpc_step(
                &ekf_now,
                &self.cgm_history,
                &mut self.dosing,
                self.u_prev,
                &profile,
                &self.cfg.mpc,
                &self.params,
            );
            degraded |= matches!(d.status, MpcStatus::SolverDegraded(_) | MpcStatus::LinearizationFailed);
            (d.rate, Some(d), d.bounds)
        } else {
            let rate = profile.u_basal;
            self.dosing.push(DosingRecord {
                t,
                amount: rate * CONTROL_STEP_MIN / 60.0,
                kind: DoseKind::BasalStep,
                duration: CONTROL_STEP_MIN,
            });
            let b = InsulinBounds {
                min: rate,
                max: rate,
                suspended: false,
                high_iob: false,
            };
            (rate, None, b)
        };
        self.u_prev = basal;
        self.pending = ModelInput::new(basal * MU_PER_MIN_PER_U_PER_H, 0.0);

        Command {
            basal,
            prandial,
            correction,
            decision,
            bounds,
            boluses,
            estimate_bg: glucose_of(&self.ekf.x_hat, &self.params),
            measurement_rejected: rejected,
            degraded,
        }
    }

    fn reset_estimate(&mut self, cgm: f64, t: f64) {
        if let Ok(x) = model::initial_state_at(cgm.max(40.0), &self.params) {
            self.ekf = EkfState::new(x, &self.ekf_cfg, t);
        } else {
            self.ekf.t = t;
        }
    }
}

/// Plant state: the model plus a fast gut chain for rescue carbohydrate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub x: ModelState,
    /// Rescue carbohydrate compartments, mmol.
    pub rescue: [f64; 2],
}

type PlantVec = SVector<f64, { N_STATES + 2 }>;

fn plant_vec(s: &PlantState) -> PlantVec {
    let v = s.x.to_vector();
    let mut out = PlantVec::zeros();
    out.fixed_rows_mut::<N_STATES>(0).copy_from(&v);
    out[N_STATES] = s.rescue[0];
    out[N_STATES + 1] = s.rescue[1];
    out
}

fn plant_from_vec(v: &PlantVec) -> PlantState {
    PlantState {
        x: ModelState::from_vector(&v.fixed_rows::<N_STATES>(0).into_owned()),
        rescue: [v[N_STATES], v[N_STATES + 1]],
    }
}

/// One plant substep with constant inputs. Returns the clamp count.
pub fn plant_step(
    s: &mut PlantState,
    inp: &ModelInput,
    p: &PatientParameters,
    tau_rescue: f64,
    dt: f64,
) -> Result<u32, ModelError> {
    let f = |v: &PlantVec| {
        let ps = plant_from_vec(v);
        let ra = ps.rescue[1] / tau_rescue;
        let dx = derivatives_with_appearance(&ps.x, inp, ra, p);
        let mut out = PlantVec::zeros();
        out.fixed_rows_mut::<N_STATES>(0).copy_from(&dx);
        out[N_STATES] = -ps.rescue[0] / tau_rescue;
        out[N_STATES + 1] = (ps.rescue[0] - ps.rescue[1]) / tau_rescue;
        out
    };
    let mut v = model::rk4(&plant_vec(s), dt, f);
    if let Some(k) = v.iter().position(|c| !c.is_finite()) {
        let component = model::STATE_NAMES.get(k).copied().unwrap_or("rescue gut");
        return Err(ModelError::IntegrationFailure { component });
    }
    let mut clamped = 0;
    for c in v.iter_mut() {
        if *c < 0.0 {
            *c = 0.0;
            clamped += 1;
        }
    }
    *s = plant_from_vec(&v);
    Ok(clamped)
}

/// One row per control interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub plant_bg: f64,
    pub cgm: f64,
    pub estimate_bg: f64,
    pub roc: f64,
    pub iob: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// U/h.
    pub basal: f64,
    /// U.
    pub prandial: f64,
    /// U.
    pub correction: f64,
    pub meal_true: f64,
    pub meal_announced: f64,
    pub rescue: f64,
    pub basal_bias: f64,
    pub qp_iterations: usize,
    pub status: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub scenario: ScenarioId,
    pub subject: usize,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    /// Insulin actually delivered.
    pub dosing: Vec<DosingRecord>,
    pub meals: Vec<MealEvent>,
    pub rescues: Vec<MealEvent>,
    pub boluses: Vec<BolusEvent>,
    pub clamp_events: u32,
    pub degraded_steps: usize,
    pub rejected_measurements: usize,
    pub body_weight: f64,
}

impl SimulationTrace {
    pub fn days(&self) -> f64 {
        self.rows.len() as f64 / STEPS_PER_DAY as f64
    }

    pub fn plant_bg(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.plant_bg).collect()
    }
}

/// Closed-loop (or open-loop therapy) simulation of one subject.
pub fn run_scenario(
    spec: &ScenarioSpec,
    subject: &VirtualSubject,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimulationTrace, ScenarioError> {
    spec.validate()?;
    let meals = generate_meals(spec, seed);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed);
    sensor_rng.set_stream(3);
    let mut sensor = SensorState::default();

    let p_plant = &subject.plant_params;
    let g0 = spec.initial_glucose.unwrap_or(120.0);
    let x0 = model::initial_state_at(g0, p_plant)?;
    let mut plant = PlantState {
        x: x0,
        rescue: [0.0, 0.0],
    };
    let tau_rescue = p_plant.tau_d * cfg.rescue.tau_factor;

    let steps = spec.steps();
    let mut rows = Vec::with_capacity(steps);
    let mut dosing = Vec::with_capacity(steps + 64);
    let mut rescues = Vec::new();
    let mut bolus_log = Vec::new();
    let mut last_rescue = None;
    let mut clamp_events = 0;
    let mut degraded_steps = 0;
    let mut rejected = 0;
    let mut controller: Option<Controller> = None;

    for k in 0..steps {
        let t = k as f64 * CONTROL_STEP_MIN;
        let t_end = t + CONTROL_STEP_MIN;
        let day = k / STEPS_PER_DAY;
        let bias = spec.bias_for_day(day);
        let profile = subject.profile.with_basal_bias(bias);

        let bg = glucose_of(&plant.x, p_plant);
        let cgm = sense_cgm(bg, &cfg.sensor, &mut sensor, &mut sensor_rng);

        let rescue = if spec.rescue {
            apply_rescue(t, bg, &mut last_rescue, &cfg.rescue)
        } else {
            None
        };
        if let Some(r) = rescue {
            plant.rescue[0] += r.grams_true * p_plant.carb_to_mmol();
            rescues.push(r);
        }

        let announced: Vec<f64> = meals
            .iter()
            .filter(|m| m.t_announced >= t && m.t_announced < t_end)
            .map(|m| m.grams_announced)
            .collect();
        let obs = Observation {
            t,
            cgm,
            announced: announced.clone(),
            profile,
        };
        let ctrl = match controller.as_mut() {
            Some(c) => c,
            None => controller.insert(Controller::new(
                subject.controller_params,
                &profile,
                cfg,
                cgm,
                t,
                spec.closed_loop,
            )?),
        };
        let cmd = ctrl.step(&obs);
        if cmd.degraded {
            degraded_steps += 1;
        }
        if cmd.measurement_rejected {
            rejected += 1;
        }

        // Delivered insulin for this interval.
        dosing.push(DosingRecord {
            t,
            amount: cmd.basal * CONTROL_STEP_MIN / 60.0,
            kind: DoseKind::BasalStep,
            duration: CONTROL_STEP_MIN,
        });
        for b in &cmd.boluses {
            if b.terms.amount > 0.0 {
                dosing.push(DosingRecord {
                    t,
                    amount: b.terms.amount,
                    kind: b.kind,
                    duration: CONTROL_STEP_MIN,
                });
            }
        }
        bolus_log.extend(cmd.boluses.iter().copied());

        let u_rate = cmd.basal * MU_PER_MIN_PER_U_PER_H
            + (cmd.prandial + cmd.correction) * 1000.0 / CONTROL_STEP_MIN;
        let minutes = CONTROL_STEP_MIN as usize;
        for m in 0..minutes {
            let m0 = t + m as f64;
            let d: f64 = meals
                .iter()
                .filter(|e| e.t_true >= m0 && e.t_true < m0 + 1.0)
                .map(|e| e.grams_true)
                .sum();
            clamp_events += plant_step(
                &mut plant,
                &ModelInput::new(u_rate, d),
                p_plant,
                tau_rescue,
                1.0,
            )?;
        }

        let meal_true: f64 = meals
            .iter()
            .filter(|m| m.t_true >= t && m.t_true < t_end)
            .map(|m| m.grams_true)
            .sum();
        let (roc, iob, iters, status) = match &cmd.decision {
            Some(d) => (d.roc.roc, d.iob, d.iterations, d.status.as_str()),
            None => (
                compute_roc(&ctrl.cgm_history, t).roc,
                compute_iob(ctrl.dosing(), t, &profile),
                0,
                "open-loop",
            ),
        };
        rows.push(TraceRow {
            t,
            plant_bg: bg,
            cgm,
            estimate_bg: cmd.estimate_bg,
            roc,
            iob,
            u_min: cmd.bounds.min,
            u_max: cmd.bounds.max,
            basal: cmd.basal,
            prandial: cmd.prandial,
            correction: cmd.correction,
            meal_true,
            meal_announced: announced.iter().sum(),
            rescue: rescue.map_or(0.0, |r| r.grams_true),
            basal_bias: bias,
            qp_iterations: iters,
            status,
        });
    }

    Ok(SimulationTrace {
        scenario: spec.id,
        subject: subject.id,
        seed,
        rows,
        dosing,
        meals,
        rescues,
        boluses: bolus_log,
        clamp_events,
        degraded_steps,
        rejected_measurements: rejected,
        body_weight: p_plant.bw,
    })
}

/// Seed of a (subject, protocol) run. Test scenarios share one seed per
/// subject so they see the same meals; training uses its own.
pub fn run_seed(subject: &VirtualSubject, id: ScenarioId) -> u64 {
    match id {
        ScenarioId::Train => mix_seed(subject.seed, 0x7472_6169_6e),
        _ => mix_seed(subject.seed, 0x7465_7374),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ids_round_trip() {
        for id in ScenarioId::TESTS.iter().chain([ScenarioId::Train].iter()) {
            assert_eq!(id.to_string().parse::<ScenarioId>().unwrap(), *id);
        }
        assert_eq!("s-3".parse::<ScenarioId>().unwrap(), ScenarioId::S3);
        assert!("S10".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn presets_follow_protocol() {
        let s1 = ScenarioSpec::preset(ScenarioId::S1);
        assert!((0..5).all(|d| s1.bias_for_day(d) == 1.25));
        let s5 = ScenarioSpec::preset(ScenarioId::S5);
        let b: Vec<f64> = (0..5).map(|d| s5.bias_for_day(d)).collect();
        assert_eq!(b, vec![1.0, 1.25, 1.0, 0.75, 1.0]);
        let s6 = ScenarioSpec::preset(ScenarioId::S6);
        assert_eq!(s6.cc_for_day(1), CcError::Systematic(1.25));
        assert_eq!(s6.cc_for_day(3), CcError::Systematic(0.75));
        assert!(matches!(s6.cc_for_day(0), CcError::Uniform { .. }));
        assert!(ScenarioSpec::preset(ScenarioId::S0).announce_delay.is_none());
        assert_eq!(ScenarioSpec::preset(ScenarioId::S8).initial_glucose, Some(60.0));
        assert_eq!(ScenarioSpec::preset(ScenarioId::S9).initial_glucose, Some(250.0));
        assert_eq!(ScenarioSpec::preset(ScenarioId::Train).days, 7);
    }

    #[test]
    fn cc_error_parse() {
        for s in ["none", "uniform(0.75,1.25)", "systematic(1.25)", "normal(0.25,0.5)"] {
            let e: CcError = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        assert!("uniform(1)".parse::<CcError>().is_err());
    }

    #[test]
    fn systematic_underestimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(80.0 * CcError::Systematic(0.75).factor(&mut rng), 60.0);
        assert_eq!(CcError::None.factor(&mut rng), 1.0);
    }

    #[test]
    fn meals_in_windows() {
        let spec = ScenarioSpec::preset(ScenarioId::S1);
        let meals = generate_meals(&spec, 11);
        assert_eq!(meals.len(), 15);
        for (i, m) in meals.iter().enumerate() {
            let w = &MEAL_WINDOWS[i % 3];
            let tod = m.t_true % MINUTES_PER_DAY;
            assert!(tod >= w.start && tod < w.end);
            assert!(m.grams_true >= w.lo && m.grams_true <= w.hi);
            assert!(m.t_announced >= m.t_true && m.t_announced <= m.t_true + 30.0);
            assert_eq!(m.grams_announced, m.grams_true);
        }
    }

    #[test]
    fn same_seed_same_meals_across_scenarios() {
        let a = generate_meals(&ScenarioSpec::preset(ScenarioId::S0), 5);
        let b = generate_meals(&ScenarioSpec::preset(ScenarioId::S4), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t_true, y.t_true);
            assert_eq!(x.grams_true, y.grams_true);
            assert!(y.grams_announced <= y.grams_true && y.grams_announced >= 0.75 * y.grams_true);
        }
    }

    #[test]
    fn sensor_clamps_and_is_exact_without_noise() {
        let m = SensorModel::default();
        let mut st = SensorState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sense_cgm(123.4, &m, &mut st, &mut rng), 123.4);
        assert_eq!(sense_cgm(450.0, &m, &mut st, &mut rng), 400.0);
        assert_eq!(sense_cgm(30.0, &m, &mut st, &mut rng), 40.0);
    }

    #[test]
    fn sensor_noise_magnitude() {
        let m = SensorModel {
            sigma: 2.0,
            ..Default::default()
        };
        let mut st = SensorState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 288;
        let mae: f64 = (0..n)
            .map(|_| (sense_cgm(150.0, &m, &mut st, &mut rng) - 150.0).abs())
            .sum::<f64>()
            / n as f64;
        // Stationary SD is 2 / sqrt(1 - 0.49) = 2.8 mg/dL.
        assert!(mae < 5.0 && mae > 0.5, "{mae}");
    }

    #[test]
    fn rescue_rule() {
        let rule = RescueRule::default();
        let mut last = None;
        assert!(apply_rescue(0.0, 65.0, &mut last, &rule).is_some());
        assert!(apply_rescue(10.0, 65.0, &mut last, &rule).is_none());
        assert!(apply_rescue(15.0, 65.0, &mut last, &rule).is_some());
        assert!(apply_rescue(30.0, 72.0, &mut last, &rule).is_none());
        let r = apply_rescue(40.0, 60.0, &mut last, &rule).unwrap();
        assert_eq!(r.grams_true, 15.0);
        assert_eq!(r.grams_announced, 0.0);
    }

    #[test]
    fn cohort_is_deterministic() {
        let cfg = CohortConfig::default();
        let a = generate_cohort(4, 3, &cfg).unwrap();
        let b = generate_cohort(4, 3, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cv_gives_population_subjects() {
        let cfg = CohortConfig {
            cv: 0.0,
            bw_min: 70.0,
            bw_max: 70.0,
            ..Default::default()
        };
        let c = generate_cohort(3, 9, &cfg).unwrap();
        for s in &c {
            assert_eq!(s.plant_params, PatientParameters::population(70.0));
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ScenarioSpec::preset(ScenarioId::S0);
        s.basal_bias = vec![1.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = ScenarioSpec::preset(ScenarioId::S0);
        s.announce_delay = Some((10.0, 5.0));
        assert!(s.validate().is_err());
    }
}
