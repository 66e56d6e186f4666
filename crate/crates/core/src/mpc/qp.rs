//! Dense primal active-set solver for small convex QPs
//!
//! ```text
//!     minimize    1/2 U' H U + g' U
//!     subject to  lb <= U <= ub
//!                 A U <= b          (optional rows)
//! ```
//!
//! Variables with `lb == ub` are eliminated up front. The start point is the
//! projection of the supplied warm start onto the box, so any general rows
//! must already be satisfied there. Ties in the pivoting rules go to the
//! lowest constraint index, which keeps repeated solves bit-identical.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// General inequality rows `a U <= b`.
    pub rows: Option<(DMatrix<f64>, DVector<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Iteration cap reached; the iterate is feasible but not certified.
    MaxIterations,
    /// The warm start violates a general row or the bounds are crossed.
    Infeasible,
    /// A singular working-set system was met.
    Singular,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max-iterations",
            QpStatus::Infeasible => "infeasible",
            QpStatus::Singular => "singular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.g.dot(u)
    }

    /// Infinity norm of `U - clamp(U - grad)` over the box; zero at a box
    /// KKT point.
    pub fn projected_gradient_norm(&self, u: &DVector<f64>) -> f64 {
        let grad = &self.h * u + &self.g;
        (0..u.len())
            .map(|i| (u[i] - (u[i] - grad[i]).clamp(self.lb[i], self.ub[i])).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Lower(usize),
    Upper(usize),
    Row,
}

struct Constraint {
    kind: Kind,
    a: DVector<f64>,
    b: f64,
}

const STEP_TOL: f64 = 1e-13;
const MULT_TOL: f64 = 1e-12;
const FEAS_TOL: f64 = 1e-10;

/// Solve with `20 * n` as the iteration cap.
pub fn solve_qp(qp: &QpProblem, warm: Option<&DVector<f64>>) -> QpSolution {
    solve_qp_with_cap(qp, warm, 20 * qp.dim().max(1))
}

pub fn solve_qp_with_cap(
    qp: &QpProblem,
    warm: Option<&DVector<f64>>,
    max_iter: usize,
) -> QpSolution {
    let n = qp.dim();
    let fail = |u: DVector<f64>, status| QpSolution {
        objective: qp.objective(&u),
        u,
        status,
        iterations: 0,
    };
    if (0..n).any(|i| qp.lb[i] > qp.ub[i]) {
        return fail(DVector::zeros(n), QpStatus::Infeasible);
    }

    // Normalize so tolerances are relative; the argmin is unchanged.
    let scale = qp.h.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let mut u = match warm {
        Some(w) => w.clone(),
        None => DVector::zeros(n),
    };
    for i in 0..n {
        u[i] = u[i].clamp(qp.lb[i], qp.ub[i]);
    }
    if let Some((a, b)) = &qp.rows {
        let r = a * &u - b;
        if r.iter().any(|v| *v > FEAS_TOL * (1.0 + b.amax())) {
            return fail(u, QpStatus::Infeasible);
        }
    }

    let free: Vec<usize> = (0..n).filter(|&i| qp.lb[i] < qp.ub[i]).collect();
    let nf = free.len();
    if nf == 0 {
        return QpSolution {
            objective: qp.objective(&u),
            u,
            status: QpStatus::Optimal,
            iterations: 0,
        };
    }

    // Reduced problem over the free variables.
    let h = DMatrix::from_fn(nf, nf, |r, c| qp.h[(free[r], free[c])] / scale);
    let fixed_part = {
        let mut uf = u.clone();
        for &i in &free {
            uf[i] = 0.0;
        }
        &qp.h * uf
    };
    let g = DVector::from_fn(nf, |r, _| (qp.g[free[r]] + fixed_part[free[r]]) / scale);

    let mut cons: Vec<Constraint> = Vec::new();
    for (r, &i) in free.iter().enumerate() {
        if qp.lb[i].is_finite() {
            let mut a = DVector::zeros(nf);
            a[r] = -1.0;
            cons.push(Constraint {
                kind: Kind::Lower(r),
                a,
                b: -qp.lb[i],
            });
        }
        if qp.ub[i].is_finite() {
            let mut a = DVector::zeros(nf);
            a[r] = 1.0;
            cons.push(Constraint {
                kind: Kind::Upper(r),
                a,
                b: qp.ub[i],
            });
        }
    }
    if let Some((am, bv)) = &qp.rows {
        for k in 0..am.nrows() {
            let mut shift = 0.0;
            for i in 0..n {
                if qp.lb[i] >= qp.ub[i] {
                    shift += am[(k, i)] * u[i];
                }
            }
            let a = DVector::from_fn(nf, |r, _| am[(k, free[r])]);
            if a.amax() == 0.0 {
                continue;
            }
            cons.push(Constraint {
                kind: Kind::Row,
                a,
                b: bv[k] - shift,
            });
        }
    }

    let mut x = DVector::from_fn(nf, |r, _| u[free[r]]);
    // Initial working set: box constraints active at the start point.
    let mut working: Vec<usize> = cons
        .iter()
        .enumerate()
        .filter(|(_, c)| match c.kind {
            Kind::Lower(r) => x[r] <= qp.lb[free[r]],
            Kind::Upper(r) => x[r] >= qp.ub[free[r]],
            Kind::Row => false,
        })
        .map(|(k, _)| k)
        .collect();
    // A variable cannot sit on both bounds here since lb < ub.

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let m = working.len();
        let dim = nf + m;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nf, nf)).copy_from(&h);
        for (j, &k) in working.iter().enumerate() {
            for r in 0..nf {
                kkt[(r, nf + j)] = cons[k].a[r];
                kkt[(nf + j, r)] = cons[k].a[r];
            }
        }
        let grad = &h * &x + &g;
        let mut rhs = DVector::zeros(dim);
        for r in 0..nf {
            rhs[r] = -grad[r];
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                status = QpStatus::Singular;
                break;
            }
        };
        let p = sol.rows(0, nf).into_owned();
        if p.amax() <= STEP_TOL * (1.0 + x.amax()) {
            // Stationary on the working set; check multiplier signs.
            let mut worst: Option<(usize, f64)> = None;
            for j in 0..m {
                let lambda = sol[nf + j];
                if lambda < -MULT_TOL && worst.is_none_or(|(_, w)| lambda < w) {
                    worst = Some((j, lambda));
                }
            }
            match worst {
                None => {
                    status = QpStatus::Optimal;
                    break;
                }
                Some((j, _)) => {
                    working.remove(j);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for (k, c) in cons.iter().enumerate() {
                if working.contains(&k) {
                    continue;
                }
                let ap = c.a.dot(&p);
                if ap > 0.0 {
                    let slack = (c.b - c.a.dot(&x)).max(0.0);
                    let t = slack / ap;
                    if t < alpha {
                        alpha = t;
                        blocking = Some(k);
                    }
                }
            }
            x += &p * alpha;
            if let Some(k) = blocking {
                // Snap exactly onto box bounds.
                match cons[k].kind {
                    Kind::Lower(r) => x[r] = qp.lb[free[r]],
                    Kind::Upper(r) => x[r] = qp.ub[free[r]],
                    Kind::Row => {}
                }
                working.push(k);
                working.sort_unstable();
            }
        }
    }

    for (r, &i) in free.iter().enumerate() {
        u[i] = x[r].clamp(qp.lb[i], qp.ub[i]);
    }
    QpSolution {
        objective: qp.objective(&u),
        u,
        status,
        iterations,
    }
}
