use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpOptions, QpStatus};
use super::{Linearization, Ocp, OcpSolution, SolveStatus};
use crate::error::Result;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;
/// Merit changes below this fraction of the merit are roundoff.
const ROUNDOFF: f64 = 10.0 * f64::EPSILON;
/// Raffinate multipliers above this fraction of `ρ` switch on the
/// constraint-curvature term of the Hessian.
const CURVATURE_TRIGGER: f64 = 1e-6;
/// Relative input perturbation for differencing constraint gradients.
const CURVATURE_STEP: f64 = 1e-6;

/// Row blocks of the QP constraint matrix, in order.
struct Rows {
    np: usize,
}

impl Rows {
    fn coupling(&self, i: usize) -> usize {
        i
    }
    fn slack(&self, i: usize) -> usize {
        self.np + i
    }
    fn box_hi(&self, i: usize) -> usize {
        2 * self.np + i
    }
    fn box_lo(&self, i: usize) -> usize {
        3 * self.np + i
    }
    fn rate_hi(&self, i: usize) -> usize {
        4 * self.np + i
    }
    fn rate_lo(&self, i: usize) -> usize {
        5 * self.np + i
    }
    fn count(&self) -> usize {
        6 * self.np
    }
}

/// Curvature given to the slacks, relative to `ρ`. The slacks always sit
/// at their lower bound, so this only raises the marginal penalty to
/// `ρ(1 + SLACK_CURVATURE·s)`, while the subproblem becomes strictly convex.
const SLACK_CURVATURE: f64 = 1e-9;

/// Subproblem in the variables `(Δu, s)`.
fn build_qp(
    ocp: &Ocp,
    u: &[f64],
    lin: &Linearization,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let sp = ocp.spec();
    let np = u.len();
    let rows = Rows { np };
    let nz = 2 * np;
    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (np, np)).copy_from(&lin.hessian);
    for i in np..nz {
        h[(i, i)] = SLACK_CURVATURE * sp.rho;
    }
    let mut c = DVector::zeros(nz);
    c.rows_mut(0, np).copy_from(&lin.gradient);
    c.rows_mut(np, np).fill(sp.rho);

    let b_ = &sp.bounds;
    let mut a = DMatrix::zeros(rows.count(), nz);
    let mut b = DVector::zeros(rows.count());
    for i in 0..np {
        // x17_i + G_i Δu − s_i ≤ tol
        let r = rows.coupling(i);
        a.view_mut((r, 0), (1, np))
            .copy_from(&lin.raffinate_jacobian.row(i));
        a[(r, np + i)] = -1.0;
        b[r] = sp.raffinate_tol - lin.raffinate[i];

        a[(rows.slack(i), np + i)] = -1.0;

        a[(rows.box_hi(i), i)] = 1.0;
        b[rows.box_hi(i)] = b_.u_max - u[i];
        a[(rows.box_lo(i), i)] = -1.0;
        b[rows.box_lo(i)] = u[i] - b_.u_min;

        let prev = if i == 0 { sp.u_prev } else { u[i - 1] };
        let (hi, lo) = (rows.rate_hi(i), rows.rate_lo(i));
        a[(hi, i)] = 1.0;
        a[(lo, i)] = -1.0;
        if i > 0 {
            a[(hi, i - 1)] = -1.0;
            a[(lo, i - 1)] = 1.0;
        }
        b[hi] = b_.du_max - (u[i] - prev);
        b[lo] = (u[i] - prev) - b_.du_min;
    }
    // the current point may violate the limits by roundoff only
    b.iter_mut().skip(2 * np).for_each(|v| *v = v.max(0.0));
    (h, c, a, b)
}

/// First-order optimality residual at `u` with the QP multipliers.
///
/// Stationarity is measured componentwise relative to the terms of the
/// Lagrangian gradient, stationarity in the slacks relative to `ρ`, and
/// complementarity as `λ·gap / (1 + λ)`. Primal feasibility holds by
/// construction since the inputs are kept inside their limits and the
/// slacks are set to their smallest feasible values.
fn kkt_residual(ocp: &Ocp, u: &[f64], lin: &Linearization, lambda: &DVector<f64>) -> f64 {
    let sp = ocp.spec();
    let np = u.len();
    let rows = Rows { np };
    let b_ = &sp.bounds;
    let mut worst: f64 = 0.0;
    for j in 0..np {
        let mut terms = [lin.gradient[j], 0.0, 0.0, 0.0];
        for i in 0..np {
            terms[1] += lin.raffinate_jacobian[(i, j)] * lambda[rows.coupling(i)];
        }
        terms[2] = lambda[rows.box_hi(j)] - lambda[rows.box_lo(j)];
        terms[3] = lambda[rows.rate_hi(j)] - lambda[rows.rate_lo(j)];
        if j + 1 < np {
            terms[3] -= lambda[rows.rate_hi(j + 1)] - lambda[rows.rate_lo(j + 1)];
        }
        let stat: f64 = terms.iter().sum();
        let scale = 1.0 + terms.iter().map(|t| t.abs()).sum::<f64>();
        worst = worst.max(stat.abs() / scale);
    }
    for i in 0..np {
        let stat = sp.rho - lambda[rows.coupling(i)] - lambda[rows.slack(i)];
        worst = worst.max(stat.abs() / sp.rho);
    }
    let compl = |lam: f64, gap: f64| lam.max(0.0) * gap.max(0.0) / (1.0 + lam.abs());
    for i in 0..np {
        let c = lin.raffinate[i];
        let s = (c - sp.raffinate_tol).max(0.0);
        let prev = if i == 0 { sp.u_prev } else { u[i - 1] };
        let d = u[i] - prev;
        worst = worst
            .max(compl(lambda[rows.coupling(i)], sp.raffinate_tol + s - c))
            .max(compl(lambda[rows.slack(i)], s))
            .max(compl(lambda[rows.box_hi(i)], b_.u_max - u[i]))
            .max(compl(lambda[rows.box_lo(i)], u[i] - b_.u_min))
            .max(compl(lambda[rows.rate_hi(i)], b_.du_max - d))
            .max(compl(lambda[rows.rate_lo(i)], d - b_.du_min));
    }
    worst
}

/// `Σ λ_i ∇²x17_i` by forward differences of the exact constraint
/// gradients, symmetrized and with negative eigenvalues dropped so that the
/// subproblem stays convex.
fn constraint_curvature(
    ocp: &Ocp,
    u: &[f64],
    lin: &Linearization,
    lambda_c: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let np = u.len();
    let base = lin.raffinate_jacobian.tr_mul(lambda_c);
    let mut m = DMatrix::zeros(np, np);
    for j in 0..np {
        let eps = CURVATURE_STEP * (1.0 + u[j].abs());
        let mut up = u.to_vec();
        up[j] += eps;
        let shifted = ocp.linearize(&up)?.raffinate_jacobian.tr_mul(lambda_c);
        m.set_column(j, &((shifted - &base) / eps));
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

fn penalty(ocp: &Ocp, raffinate: impl IntoIterator<Item = f64>) -> f64 {
    let tol = ocp.spec().raffinate_tol;
    ocp.spec().rho
        * raffinate
            .into_iter()
            .map(|c| (c - tol).max(0.0))
            .sum::<f64>()
}

/// Change of the penalty when the raffinate moves from `from` by `delta`,
/// summed term by term; the penalty itself is too large to difference.
fn penalty_change(ocp: &Ocp, from: &DVector<f64>, delta: &DVector<f64>) -> f64 {
    let tol = ocp.spec().raffinate_tol;
    let change: f64 = from
        .iter()
        .zip(delta.iter())
        .map(|(&c, &d)| {
            let (before, after) = (c - tol, c - tol + d);
            if before > 0.0 && after > 0.0 {
                d
            } else {
                after.max(0.0) - before.max(0.0)
            }
        })
        .sum();
    ocp.spec().rho * change
}

/// Solves the horizon problem from `warm_start` (or a constant sequence at
/// the previous input), projected onto the input limits.
///
/// Numerical failure of the model is the only error; a non-converged solve
/// returns the best iterate with its status.
pub fn solve_ocp(ocp: &Ocp, warm_start: Option<&[f64]>) -> Result<OcpSolution> {
    let sp = ocp.spec();
    let np = ocp.horizon();
    let mut u = match warm_start {
        Some(w) if w.len() == np => w.to_vec(),
        _ => vec![sp.u_prev; np],
    };
    sp.bounds.project_sequence(&mut u, sp.u_prev);

    let mut lin = ocp.linearize(&u)?;
    let mut merit = lin.cost + penalty(ocp, lin.raffinate.iter().copied());
    let mut kkt = f64::INFINITY;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    let mut lambda_c: Option<DVector<f64>> = None;

    while iterations < sp.solver.max_iter {
        iterations += 1;
        let (mut h, c, a, b) = build_qp(ocp, &u, &lin);
        if let Some(l) = lambda_c
            .as_ref()
            .filter(|l| l.amax() > CURVATURE_TRIGGER * sp.rho)
        {
            let curv = constraint_curvature(ocp, &u, &lin, l)?;
            h.view_mut((0, 0), (np, np)).add_assign(&curv);
        }
        let qp = solve_qp(&h, &c, &a, &b, QpOptions::default());
        lambda_c = Some(qp.lambda.rows(0, np).into_owned());
        kkt = kkt_residual(ocp, &u, &lin, &qp.lambda);
        if kkt <= sp.solver.kkt_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if qp.status != QpStatus::Solved {
            status = SolveStatus::Stalled;
            break;
        }

        let du = qp.z.rows(0, np).into_owned();
        let mut slope = lin.gradient.dot(&du)
            + penalty_change(ocp, &lin.raffinate, &(&lin.raffinate_jacobian * &du));
        // a step this close to the solution has no measurable slope; take it
        // if the merit does not grow beyond roundoff
        if slope >= 0.0 && slope <= 100.0 * ROUNDOFF * merit.abs() {
            slope = 0.0;
        }
        if slope > 0.0 {
            status = SolveStatus::Stalled;
            break;
        }

        let mut alpha = 1.0;
        let accepted = loop {
            let mut trial: Vec<f64> = u
                .iter()
                .zip(du.iter())
                .map(|(ui, d)| ui + alpha * d)
                .collect();
            sp.bounds.project_sequence(&mut trial, sp.u_prev);
            let states = ocp.predict(&trial)?;
            let m = ocp.objective_of(&trial, &states);
            if m <= merit + ARMIJO * alpha * slope + ROUNDOFF * merit.abs() {
                break Some((trial, m));
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                break None;
            }
        };
        let Some((trial, m)) = accepted else {
            status = SolveStatus::Stalled;
            break;
        };
        u = trial;
        merit = m;
        lin = ocp.linearize(&u)?;
    }

    let slacks = ocp.slacks(lin.raffinate.as_slice());
    Ok(OcpSolution {
        u_star: u,
        states: lin.states,
        objective: merit,
        slacks,
        iterations,
        kkt,
        status,
    })
}
