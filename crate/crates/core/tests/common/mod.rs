#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unibe::model::*;
use unibe::mpc::qp::QpProblem;

/// Random box-constrained QP with a well-conditioned SPD Hessian.
pub fn random_box_qp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
    let h = &m * m.transpose() + DMatrix::identity(n, n) * rng.random_range(0.1..1.0);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let mut lb = DVector::zeros(n);
    let mut ub = DVector::zeros(n);
    for i in 0..n {
        let a: f64 = rng.random_range(-3.0..3.0);
        let w: f64 = rng.random_range(0.0..4.0);
        lb[i] = a;
        ub[i] = a + w;
    }
    QpProblem {
        h,
        g,
        lb,
        ub,
        rows: None,
    }
}

/// Accelerated projected gradient (FISTA with restart) run until the
/// projected-gradient residual drops below `tol`.
pub fn projected_gradient_oracle(qp: &QpProblem, tol: f64) -> DVector<f64> {
    let n = qp.g.len();
    let lmax = SymmetricEigen::new(qp.h.clone()).eigenvalues.max();
    let step = 1.0 / lmax;
    let project = |v: DVector<f64>| DVector::from_fn(n, |i, _| v[i].clamp(qp.lb[i], qp.ub[i]));
    let mut x = project(DVector::zeros(n));
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..2_000_000 {
        let grad = &qp.h * &y + &qp.g;
        let x_next = project(&y - grad * step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let restart = (&y - &x_next).dot(&(&x_next - &x)) > 0.0;
        y = if restart {
            t = 1.0;
            x_next.clone()
        } else {
            &x_next + (&x_next - &x) * ((t - 1.0) / t_next)
        };
        if !restart {
            t = t_next;
        }
        x = x_next;
        if qp.projected_gradient_norm(&x) < tol {
            break;
        }
    }
    x
}

fn rhs(x: &StateVec, u: f64, p: &PatientParameters) -> StateVec {
    derivatives(&ModelState::from_vector(x), &ModelInput::new(u, 0.0), p).unwrap()
}

/// Random state around the 120 mg/dL equilibrium, kept clear of the
/// piecewise breakpoints so central differences stay on one branch.
pub fn random_state(rng: &mut ChaCha8Rng, p: &PatientParameters) -> (ModelState, f64) {
    let (x_eq, u_eq) = steady_state_at(120.0, p).unwrap();
    loop {
        let mut v = x_eq.to_vector();
        for c in v.iter_mut().take(8) {
            *c *= rng.random_range(0.3..3.0);
        }
        v[8] = rng.random_range(0.0..300.0);
        v[9] = rng.random_range(0.0..300.0);
        let g = v[0] / p.vg();
        if (g - 4.5).abs() > 0.05 && (g - 9.0).abs() > 0.05 && (v[4] - 1.0).abs() > 0.05 {
            return (ModelState::from_vector(&v), u_eq * rng.random_range(0.0..4.0));
        }
    }
}

/// Worst column-scaled relative error of the analytic A_c and worst
/// absolute error of B_c against central differences (h = 1e-6 relative).
pub fn jacobian_errors(states: usize, seed: u64) -> (f64, f64) {
    let p = PatientParameters::population(70.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for _ in 0..states {
        let (x, u) = random_state(&mut rng, &p);
        let (a, b) = jacobians(&x, &p);
        let v = x.to_vector();
        for j in 0..N_STATES {
            let h = 1e-6 * v[j].abs().max(1e-3);
            let mut up = v;
            let mut dn = v;
            up[j] += h;
            dn[j] -= h;
            let col = (rhs(&up, u, &p) - rhs(&dn, u, &p)) / (2.0 * h);
            let scale = col.amax().max(a.column(j).amax()).max(1e-12);
            for i in 0..N_STATES {
                worst_a = worst_a.max((a[(i, j)] - col[i]).abs() / scale);
            }
        }
        let hu = 1e-6 * u.max(1.0);
        let col = (rhs(&v, u + hu, &p) - rhs(&v, u - hu, &p)) / (2.0 * hu);
        worst_b = worst_b.max((b - col).amax());
    }
    (worst_a, worst_b)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Trend-arrow glucose shift table:
/// (arrow, representative RoC, G_adj - G_cur).
pub const ADJUSTED_GLUCOSE_TABLE: [(unibe::ibd::ArrowCategory, f64, f64); 7] = {
    use unibe::ibd::ArrowCategory::*;
    [
        (DoubleUp, 3.5, 100.0),
        (SingleUp, 2.5, 75.0),
        (DiagonalUp, 1.5, 50.0),
        (Flat, 0.0, 0.0),
        (DiagonalDown, -1.5, -50.0),
        (SingleDown, -2.5, -75.0),
        (DoubleDown, -3.5, -100.0),
    ]
};

/// Bolus adjustment (U) by arrow magnitude row (double, single, diagonal,
/// horizontal) and CF band column (<25, [25,50), [50,75), >=75).
pub const ROC_CF_TABLE: [[f64; 4]; 4] = [
    [4.5, 3.0, 1.5, 1.0],
    [3.0, 2.0, 1.0, 0.5],
    [1.5, 1.0, 0.5, 0.25],
    [0.0, 0.0, 0.0, 0.0],
];

/// CF values probing every band including both edges.
pub const CF_PROBES: [(f64, usize); 9] = [
    (5.0, 0),
    (24.999, 0),
    (25.0, 1),
    (40.0, 1),
    (49.999, 1),
    (50.0, 2),
    (74.999, 2),
    (75.0, 3),
    (150.0, 3),
];

/// Checks every (arrow, CF) cell of both tables against the implementation;
/// returns (cells checked, mismatches).
pub fn bolus_table_mismatches() -> (usize, Vec<String>) {
    use unibe::ibd::*;
    let mut checked = 0;
    let mut bad = Vec::new();
    for (cat, roc, shift) in ADJUSTED_GLUCOSE_TABLE {
        let arrow = TrendArrow::from_roc(roc);
        if arrow.category != cat {
            bad.push(format!("RoC {roc} classified as {}", arrow.category.as_str()));
        }
        for g in [150.0, 200.0, 250.0] {
            checked += 1;
            if adjusted_glucose(g, &arrow) != g + shift {
                bad.push(format!("G_adj({g}, {})", cat.as_str()));
            }
        }
        let row = 3 - cat.magnitude() as usize;
        for (cf, band) in CF_PROBES {
            checked += 1;
            let want = cat.direction() * ROC_CF_TABLE[row][band];
            let got = roc_cf_adjustment(&arrow, cf);
            if got != want || cf_band(cf) != band {
                bad.push(format!("{} CF {cf}: {got} vs {want}", cat.as_str()));
            }
        }
    }
    (checked, bad)
}

/// Safety-rule violations in a trace: suspension at CGM <= 70, commanded
/// basal inside its bounds, correction spacing and the post-meal block.
pub fn trace_violations(tr: &unibe::scenario::SimulationTrace) -> Vec<String> {
    use unibe::mpc::DoseKind;
    let gate = unibe::ibd::CorrectionGate::default();
    let mut out = Vec::new();
    for r in &tr.rows {
        if r.cgm <= 70.0 && r.basal != 0.0 {
            out.push(format!("t={} cgm={} basal={}", r.t, r.cgm, r.basal));
        }
        if r.basal < r.u_min || r.basal > r.u_max {
            out.push(format!("t={} basal {} outside [{}, {}]", r.t, r.basal, r.u_min, r.u_max));
        }
    }
    let corrections: Vec<f64> = tr
        .boluses
        .iter()
        .filter(|b| b.kind == DoseKind::CorrectionBolus && b.terms.amount > 0.0)
        .map(|b| b.t)
        .collect();
    for w in corrections.windows(2) {
        if w[1] - w[0] < gate.min_since_correction {
            out.push(format!("corrections at {} and {}", w[0], w[1]));
        }
    }
    for c in &corrections {
        for m in &tr.meals {
            let seen = 5.0 * (m.t_announced / 5.0).floor();
            if *c >= seen && *c - seen < gate.min_since_meal {
                out.push(format!("correction at {c} after announcement at {seen}"));
            }
        }
    }
    out
}
