mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use unibe::estimator::{ekf_predict, ekf_update, EkfConfig, EkfState};
use unibe::model::*;
use unibe::mpc::qp::{solve_qp, QpStatus};
use unibe::mpc::*;

fn pop() -> PatientParameters {
    PatientParameters::population(70.0)
}

fn profile_for(u_basal: f64) -> TherapyProfile {
    TherapyProfile {
        u_basal,
        tdi_basal: 24.0 * u_basal,
        cr: 10.0,
        cf: 40.0,
        dia: 240.0,
    }
}

fn wide(max: f64) -> InsulinBounds {
    InsulinBounds {
        min: 0.0,
        max,
        suspended: false,
        high_iob: false,
    }
}

#[test]
fn active_set_matches_projected_gradient_oracle() {
    let mut rng = common::seeded(2024);
    for case in 0..1000 {
        let n = 1 + case % 12;
        let qp = common::random_box_qp(&mut rng, n);
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let oracle = common::projected_gradient_oracle(&qp, 1e-10);
        let gap = qp.objective(&sol.u) - qp.objective(&oracle);
        assert!(gap.abs() < 1e-6, "case {case}: gap {gap:e}");
        let kkt = qp.projected_gradient_norm(&sol.u);
        assert!(kkt < 1e-8, "case {case}: KKT residual {kkt:e}");
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let mut rng = common::seeded(5);
    for _ in 0..50 {
        let qp = common::random_box_qp(&mut rng, 12);
        let a = solve_qp(&qp, None);
        let b = solve_qp(&qp, None);
        assert_eq!(a, b);
    }
}

/// Nc = Np = 1 with wide bounds: the minimizer has a closed form in the
/// one-step gain and free response, both taken here from the affine model.
#[test]
fn scalar_horizon_closed_form() {
    let p = pop();
    let (x_eq, u_eq) = steady_state_at(150.0, &p).unwrap();
    let mut x = x_eq;
    x.q1 *= 1.2;
    let u_prev = 1.3;
    let cfg = MpcConfig {
        np: 1,
        nc: 1,
        ..MpcConfig::default()
    };
    let prof = profile_for(u_eq / MU_PER_MIN_PER_U_PER_H);
    let lin = linearize(&x, u_prev * MU_PER_MIN_PER_U_PER_H, &p, 5.0).unwrap();
    let y_of = |u_h: f64| lin.output(&lin.step(&x.to_vector(), u_h * MU_PER_MIN_PER_U_PER_H));
    let y_free = y_of(0.0);
    let cb = y_of(1.0) - y_free;
    let q = cfg.q_weight / prof.u_basal.powi(2);
    let r = cfg.r_weight / prof.u_basal.powi(2);
    let want = (cb * q * (cfg.target - y_free) + r * u_prev) / (q * cb * cb + r);

    let qp = build_qp(&lin, &x, u_prev, &wide(1e6), &cfg, &prof);
    let sol = solve_qp(&qp, None);
    assert!(want > 0.0);
    assert!((sol.u[0] - want).abs() < 1e-9 * want.max(1.0), "{} vs {want}", sol.u[0]);
}

#[test]
fn zero_cost_reference_keeps_previous_rate() {
    let p = pop();
    let (x, u_eq) = steady_state_at(120.0, &p).unwrap();
    let u_prev = u_eq / MU_PER_MIN_PER_U_PER_H;
    let prof = profile_for(u_prev);
    let cfg = MpcConfig::default();
    let lin = linearize(&x, u_eq, &p, cfg.ts).unwrap();
    let qp = build_qp(&lin, &x, u_prev, &wide(3.0 * u_prev), &cfg, &prof);
    let asym = (&qp.h - qp.h.transpose()).amax();
    assert!(asym < 1e-12);
    let sol = solve_qp(&qp, Some(&DVector::from_element(cfg.nc, u_prev)));
    for v in sol.u.iter() {
        assert!((v - u_prev).abs() < 1e-6, "{v} vs {u_prev}");
    }
}

#[test]
fn common_weight_scaling_leaves_solution_unchanged() {
    let p = pop();
    let (x_eq, u_eq) = steady_state_at(120.0, &p).unwrap();
    let prof = profile_for(u_eq / MU_PER_MIN_PER_U_PER_H);
    let mut rng = common::seeded(9);
    for _ in 0..20 {
        let (x, _) = common::random_state(&mut rng, &p);
        let x = if glucose_of(&x, &p) > 0.0 { x } else { x_eq };
        let u_prev = prof.u_basal;
        let base = MpcConfig::default();
        let scaled = MpcConfig {
            q_weight: base.q_weight * 37.5,
            r_weight: base.r_weight * 37.5,
            ..base.clone()
        };
        let lin = linearize(&x, u_prev * MU_PER_MIN_PER_U_PER_H, &p, 5.0).unwrap();
        let b = wide(3.0 * prof.u_basal);
        let a = solve_qp(&build_qp(&lin, &x, u_prev, &b, &base, &prof), None);
        let s = solve_qp(&build_qp(&lin, &x, u_prev, &b, &scaled, &prof), None);
        assert!((&a.u - &s.u).amax() < 1e-9, "{} vs {}", a.u, s.u);
    }
}

#[test]
fn mpc_qps_satisfy_kkt() {
    let p = pop();
    let (_, u_eq) = steady_state_at(120.0, &p).unwrap();
    let prof = profile_for(u_eq / MU_PER_MIN_PER_U_PER_H);
    let cfg = MpcConfig::default();
    let mut rng = common::seeded(31);
    for _ in 0..100 {
        let (x, _) = common::random_state(&mut rng, &p);
        let lin = linearize(&x, prof.u_basal * MU_PER_MIN_PER_U_PER_H, &p, 5.0).unwrap();
        let qp = build_qp(&lin, &x, prof.u_basal, &wide(3.0 * prof.u_basal), &cfg, &prof);
        let sol = solve_qp(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(qp.projected_gradient_norm(&sol.u) < 1e-8);
    }
}

#[test]
fn iob_examples() {
    let prof = profile_for(1.0);
    let bolus = |t: f64, amount: f64| DosingRecord {
        t,
        amount,
        kind: DoseKind::PrandialBolus,
        duration: 5.0,
    };
    assert!((compute_iob(&[bolus(0.0, 5.0)], 120.0, &prof) - 2.5).abs() < 1e-12);
    assert_eq!(compute_iob(&[bolus(0.0, 5.0)], 241.0, &prof), 0.0);
    let two = [bolus(0.0, 2.0), bolus(120.0, 3.0)];
    assert!((compute_iob(&two, 180.0, &prof) - (3.0 * 0.75 + 2.0 * 0.25)).abs() < 1e-12);
}

#[test]
fn roc_examples() {
    let r = compute_roc(&[(0.0, 100.0), (5.0, 110.0), (10.0, 120.0)], 10.0);
    assert!((r.roc - 2.0).abs() < 1e-12);
    let r = compute_roc(&[(0.0, 130.0), (5.0, 130.0), (10.0, 130.0)], 10.0);
    assert_eq!(r.roc, 0.0);
    let r = compute_roc(&[(0.0, 180.0), (5.0, 170.0), (10.0, 155.0)], 10.0);
    assert!((r.roc + 2.5).abs() < 1e-12);
}

#[test]
fn bound_examples() {
    let prof = profile_for(1.0);
    let cfg = MpcConfig::default();
    let b = adaptive_bounds(65.0, 0.0, 0.0, &prof, &cfg);
    assert_eq!((b.min, b.max), (0.0, 0.0));
    let b = adaptive_bounds(100.0, 0.0, 0.0, &prof, &cfg);
    assert_eq!((b.min, b.max), (0.0, prof.u_basal));
    let b = adaptive_bounds(150.0, -1.0, 0.0, &prof, &cfg);
    assert_eq!((b.min, b.max), (0.0, 0.0));
    let b = adaptive_bounds(160.0, 1.0, 10.0, &prof, &cfg);
    assert_eq!((b.min, b.max), (prof.u_basal, 1.5 * prof.tdi_basal / 24.0));
}

struct Loop {
    p: PatientParameters,
    prof: TherapyProfile,
    cfg: MpcConfig,
    ekf_cfg: EkfConfig,
    ekf: EkfState,
    plant: ModelState,
    history: Vec<(f64, f64)>,
    dosing: Vec<DosingRecord>,
    u_prev: f64,
    t: f64,
}

impl Loop {
    fn at(g_plant: f64) -> Self {
        let p = pop();
        let (x_eq, u_eq) = steady_state_at(120.0, &p).unwrap();
        let prof = profile_for(u_eq / MU_PER_MIN_PER_U_PER_H);
        let ekf_cfg = EkfConfig::for_equilibrium(&x_eq, 0.0);
        let plant = initial_state_at(g_plant, &p).unwrap();
        Self {
            ekf: EkfState::new(plant, &ekf_cfg, 0.0),
            p,
            prof,
            cfg: MpcConfig::default(),
            ekf_cfg,
            plant,
            history: vec![],
            dosing: vec![],
            u_prev: prof.u_basal,
            t: 0.0,
        }
    }

    /// One control step with a forced CGM reading, or the plant's.
    fn step(&mut self, forced_cgm: Option<f64>) -> MpcDecision {
        let cgm = forced_cgm.unwrap_or_else(|| glucose_of(&self.plant, &self.p));
        if self.t > 0.0 {
            let inp = ModelInput::new(self.u_prev * MU_PER_MIN_PER_U_PER_H, 0.0);
            self.ekf = ekf_predict(&self.ekf, &inp, &self.p, &self.ekf_cfg, 5.0).unwrap();
            self.ekf = ekf_update(&self.ekf, cgm.max(20.0), &self.p, &self.ekf_cfg).unwrap().state;
        }
        self.history.push((self.t, cgm));
        let d = mpc_step(&self.ekf, &self.history, &mut self.dosing, self.u_prev, &self.prof, &self.cfg, &self.p);
        let inp = ModelInput::new(d.rate * MU_PER_MIN_PER_U_PER_H, 0.0);
        self.plant = integrate_step(&self.plant, &inp, &self.p, 5.0).unwrap().state;
        self.u_prev = d.rate;
        self.t += 5.0;
        d
    }
}

#[test]
fn closed_loop_holds_equilibrium() {
    let mut l = Loop::at(120.0);
    let u_ss = l.prof.u_basal;
    for _ in 0..72 {
        let d = l.step(None);
        assert!(d.rate >= 0.5 * u_ss && d.rate <= 1.5 * u_ss, "rate {} vs {u_ss}", d.rate);
        let g = glucose_of(&l.plant, &l.p);
        assert!((g - 120.0).abs() < 5.0, "bg {g}");
    }
}

#[test]
fn hypoglycemic_reading_suspends_next_command() {
    let mut l = Loop::at(120.0);
    for _ in 0..3 {
        l.step(None);
    }
    let d = l.step(Some(65.0));
    assert_eq!(d.rate, 0.0);
    assert!(d.bounds.suspended);
}

#[test]
fn high_flat_reading_drives_rate_to_upper_bound() {
    let mut l = Loop::at(250.0);
    let mut d = l.step(None);
    for _ in 0..2 {
        d = l.step(Some(250.0));
    }
    let cap = l.cfg.n_tdi_max * l.prof.hourly_basal();
    assert!(!d.bounds.high_iob);
    assert!((d.bounds.max - cap).abs() < 1e-12);
    assert!(d.rate >= 0.95 * cap, "rate {} cap {cap}", d.rate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bounds_are_ordered_and_suspend_low_readings(
        cgm in 39.0f64..401.0,
        roc in -4.0f64..4.0,
        iob in 0.0f64..10.0,
        u_basal in 0.2f64..3.0,
    ) {
        let prof = profile_for(u_basal);
        let b = adaptive_bounds(cgm, roc, iob, &prof, &MpcConfig::default());
        prop_assert!(0.0 <= b.min && b.min <= b.max);
        if cgm <= 70.0 {
            prop_assert_eq!((b.min, b.max), (0.0, 0.0));
        }
    }

    #[test]
    fn commanded_rate_respects_bounds(
        seed in 0u64..1000,
        cgm in 40.0f64..400.0,
        iob_bolus in 0.0f64..8.0,
    ) {
        let p = pop();
        let mut rng = common::seeded(seed);
        let (x, _) = common::random_state(&mut rng, &p);
        let (_, u_eq) = steady_state_at(120.0, &p).unwrap();
        let prof = profile_for(u_eq / MU_PER_MIN_PER_U_PER_H);
        let cfg = MpcConfig::default();
        let ekf = EkfState::new(x, &EkfConfig::for_equilibrium(&x, 0.0), 100.0);
        let mut dosing = vec![DosingRecord { t: 50.0, amount: iob_bolus, kind: DoseKind::CorrectionBolus, duration: 5.0 }];
        let hist = [(90.0, cgm), (95.0, cgm), (100.0, cgm)];
        let d = mpc_step(&ekf, &hist, &mut dosing, prof.u_basal, &prof, &cfg, &p);
        prop_assert!(d.rate >= d.bounds.min && d.rate <= d.bounds.max);
        prop_assert_eq!(dosing.len(), 2);
    }
}
