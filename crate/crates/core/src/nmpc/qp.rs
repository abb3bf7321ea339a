//! Dense strictly convex QP by the dual active-set method of Goldfarb and
//! Idnani:
//!
//! ```text
//! minimize   ½ zᵀ H z + cᵀ z
//! subject to A z ≤ b
//! ```
//!
//! Starting from the unconstrained minimum, the most violated constraint is
//! added at every step while the dual iterate stays feasible, so the method
//! ends after finitely many steps with the exact solution. `H` must be
//! positive definite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Relative feasibility tolerance.
    pub tol: f64,
    /// Limit on add and drop steps.
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-12,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    /// `H` is not positive definite.
    NotConvex,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `A z ≤ b`, all nonnegative.
    pub lambda: DVector<f64>,
    /// Indices of the constraints active at the solution.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub status: QpStatus,
}

/// Active-set factorization: `L⁻¹ N = Q₁ R` with `N` the active constraint
/// normals as columns.
struct Basis {
    q1: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Basis {
    fn new(l_inv: &DMatrix<f64>, a: &DMatrix<f64>, active: &[usize]) -> Self {
        let n = l_inv.nrows();
        if active.is_empty() {
            return Basis {
                q1: DMatrix::zeros(n, 0),
                r: DMatrix::zeros(0, 0),
            };
        }
        let normals = DMatrix::from_fn(n, active.len(), |i, j| -a[(active[j], i)]);
        let qr = (l_inv * normals).qr();
        Basis {
            q1: qr.q(),
            r: qr.r(),
        }
    }

    /// Primal direction `J₂J₂ᵀ n` in the null space of the active set and
    /// dual direction `R⁻¹ Q₁ᵀ L⁻¹ n` for adding the normal `n`.
    fn step(&self, l_inv: &DMatrix<f64>, n: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let v = l_inv * n;
        let d1 = self.q1.tr_mul(&v);
        let r = self
            .r
            .solve_upper_triangular(&d1)
            .expect("active normals stay linearly independent");
        let primal = l_inv.tr_mul(&(v - &self.q1 * d1));
        (primal, r)
    }
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    opts: QpOptions,
) -> QpSolution {
    let n = c.len();
    let m = b.len();
    debug_assert_eq!(h.shape(), (n, n));
    debug_assert_eq!(a.shape(), (m, n));

    let fail = |status| QpSolution {
        z: DVector::zeros(n),
        lambda: DVector::zeros(m),
        active: Vec::new(),
        iterations: 0,
        status,
    };
    let Some(chol): Option<Cholesky<f64, Dyn>> = h.clone().cholesky() else {
        return fail(QpStatus::NotConvex);
    };
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor is nonsingular");

    let row_norm: Vec<f64> = a.row_iter().map(|r| r.norm()).collect();
    let mut z = -chol.solve(c);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut basis = Basis::new(&l_inv, a, &active);

    // scaled violation of row i; positive means violated
    let violation = |z: &DVector<f64>, i: usize| {
        let az = a.row(i).dot(&z.transpose());
        (az - b[i]) / (row_norm[i].max(f64::MIN_POSITIVE) * (1.0 + z.amax()) + b[i].abs())
    };

    let mut iterations = 0;
    let status = 'outer: loop {
        let Some(p) = (0..m)
            .filter(|i| row_norm[*i] > 0.0 && !active.contains(i))
            .map(|i| (i, violation(&z, i)))
            .filter(|&(_, v)| v > opts.tol)
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i)
        else {
            if (0..m).any(|i| row_norm[i] == 0.0 && b[i] < 0.0) {
                break QpStatus::Infeasible;
            }
            break QpStatus::Solved;
        };
        let normal = -a.row(p).transpose();
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                break 'outer QpStatus::MaxIterations;
            }
            let (dz, r) = basis.step(&l_inv, &normal);
            // constraint p written as nᵀz ≥ −b_p
            let slack = normal.dot(&z) + b[p];
            if slack >= 0.0 {
                break;
            }
            let curvature = dz.dot(&normal);
            let full = if dz.amax() > 1e-14 * (1.0 + normal.amax()) && curvature > 0.0 {
                Some(-slack / curvature)
            } else {
                None
            };
            let partial = r
                .iter()
                .enumerate()
                .filter(|(_, &rj)| rj > 0.0)
                .map(|(j, &rj)| (j, u[j] / rj))
                .min_by(|x, y| x.1.total_cmp(&y.1));

            let t = match (full, partial) {
                (None, None) => break 'outer QpStatus::Infeasible,
                (Some(tf), Some((_, tp))) => tf.min(tp),
                (Some(tf), None) => tf,
                (None, Some((_, tp))) => tp,
            };
            if full.is_some() {
                z += t * &dz;
            }
            for (uj, rj) in u.iter_mut().zip(r.iter()) {
                *uj -= t * rj;
            }
            u_p += t;

            if full.is_some_and(|tf| tf <= t) {
                active.push(p);
                u.push(u_p);
                basis = Basis::new(&l_inv, a, &active);
                break;
            }
            let (drop, _) = partial.expect("partial step taken");
            active.remove(drop);
            u.remove(drop);
            basis = Basis::new(&l_inv, a, &active);
        }
    };

    if status == QpStatus::Solved {
        if let Some((zp, up)) = polish(h, c, a, b, &active) {
            let feasible = (0..m).all(|i| violation(&zp, i) <= opts.tol);
            if feasible && up.iter().all(|&v| v >= 0.0) {
                z = zp;
                u = up.iter().copied().collect();
            }
        }
    }
    let mut lambda = DVector::zeros(m);
    for (&i, &ui) in active.iter().zip(u.iter()) {
        lambda[i] = ui.max(0.0);
    }
    QpSolution {
        z,
        lambda,
        active,
        iterations,
        status,
    }
}

/// Solves the optimality conditions with the final active set held as
/// equalities. The updates of the active-set loop start from the
/// unconstrained minimum, which can lie far away when some curvature is
/// small, and lose digits on the way.
fn polish(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = c.len();
    let q = active.len();
    let mut kkt = DMatrix::zeros(n + q, n + q);
    let mut rhs = DVector::zeros(n + q);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    rhs.rows_mut(0, n).copy_from(&-c);
    for (k, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = a[(i, j)];
            kkt[(j, n + k)] = a[(i, j)];
        }
        rhs[n + k] = b[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, q).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle for tiny QPs: enumerate every active set, solve
    /// the equality-constrained KKT system and keep the best feasible point.
    fn enumerate(
        h: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> DVector<f64> {
        let (m, n) = a.shape();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if act.len() > n {
                continue;
            }
            let k = n + act.len();
            let mut kkt = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for (r, &i) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = a[(i, j)];
                    kkt[(j, n + r)] = a[(i, j)];
                }
                rhs[n + r] = b[i];
            }
            for j in 0..n {
                rhs[j] = -c[j];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else {
                continue;
            };
            let z = sol.rows(0, n).into_owned();
            if (a * &z - b).iter().any(|&v| v > 1e-9) {
                continue;
            }
            let f = 0.5 * z.dot(&(h * &z)) + c.dot(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf - 1e-12) {
                best = Some((f, z));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn box_constrained_quadratic_matches_enumeration() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let c = DVector::from_row_slice(&[-8.0, 3.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_row_slice(&[1.0, 1.0, 1.0, 1.0]);
        let sol = solve_qp(&h, &c, &a, &b, QpOptions::default());
        assert_eq!(sol.status, QpStatus::Solved);
        let oracle = enumerate(&h, &c, &a, &b);
        assert!((sol.z - oracle).amax() < 1e-8);
    }

    #[test]
    fn penalty_slack_with_small_curvature() {
        // min ½ x² − 3x + 10 s + ½ε s²   s.t. x − s ≤ 1, s ≥ 0  →  x = 1, s = 0
        let eps = 1e-6;
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, eps]);
        let c = DVector::from_row_slice(&[-3.0, 10.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, -1.0]);
        let b = DVector::from_row_slice(&[1.0, 0.0]);
        let sol = solve_qp(&h, &c, &a, &b, QpOptions::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.z[0] - 1.0).abs() < 1e-12 && sol.z[1].abs() < 1e-12);
        // marginal value of the coupling row
        assert!((sol.lambda[0] - 2.0).abs() < 1e-12);
        assert!((sol.lambda[1] - 8.0).abs() < 1e-12);

        // cheap slack: the coupling row is relaxed instead
        let c = DVector::from_row_slice(&[-3.0, 0.5]);
        let sol = solve_qp(&h, &c, &a, &b, QpOptions::default());
        assert!((sol.z[0] - 2.5).abs() < 1e-5 && (sol.z[1] - 1.5).abs() < 1e-5);
    }

    #[test]
    fn semidefinite_hessian_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let c = DVector::from_row_slice(&[-3.0, 10.0]);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let b = DVector::from_row_slice(&[0.0]);
        assert_eq!(
            solve_qp(&h, &c, &a, &b, QpOptions::default()).status,
            QpStatus::NotConvex
        );
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::zeros(1);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_row_slice(&[-1.0, -1.0]); // z ≤ −1 and z ≥ 1
        assert_eq!(
            solve_qp(&h, &c, &a, &b, QpOptions::default()).status,
            QpStatus::Infeasible
        );
    }

    #[test]
    fn random_small_qps_match_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let n = 3;
            let m = 6;
            let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0)); // z = 0 feasible
            let sol = solve_qp(&h, &c, &a, &b, QpOptions::default());
            assert_eq!(sol.status, QpStatus::Solved);
            let oracle = enumerate(&h, &c, &a, &b);
            assert!((&sol.z - &oracle).amax() < 1e-6, "{} vs {}", sol.z, oracle);
            assert!(sol.lambda.iter().all(|&l| l >= 0.0));
        }
    }

    /// Largest violation of the optimality conditions, each relative to the
    /// size of its terms.
    fn kkt_violation(
        h: &DMatrix<f64>,
        c: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        sol: &QpSolution,
    ) -> f64 {
        let hz = h * &sol.z;
        let atl = a.tr_mul(&sol.lambda);
        let az = a * &sol.z;
        let mut worst: f64 = 0.0;
        for i in 0..c.len() {
            let r = hz[i] + c[i] + atl[i];
            worst = worst.max(r.abs() / (1.0 + hz[i].abs() + c[i].abs() + atl[i].abs()));
        }
        for i in 0..b.len() {
            let scale = 1.0 + az[i].abs() + b[i].abs();
            worst = worst.max((az[i] - b[i]).max(0.0) / scale);
            worst =
                worst.max(sol.lambda[i] * (b[i] - az[i]).abs() / (scale * (1.0 + sol.lambda[i])));
            worst = worst.max((-sol.lambda[i]).max(0.0));
        }
        worst
    }

    /// Problems shaped like the controller subproblems: inputs with box and
    /// rate limits on both sides, and heavily penalized slacks relaxing a
    /// coupling row per input.
    #[test]
    fn penalty_structured_qps_satisfy_optimality_conditions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let np = 10;
        let n = 2 * np;
        let rho = 1e6;
        for _ in 0..50 {
            let l = DMatrix::from_fn(np, np, |_, _| rng.gen_range(-0.3..0.3));
            let mut h = DMatrix::zeros(n, n);
            h.view_mut((0, 0), (np, np))
                .copy_from(&(&l * l.transpose() + DMatrix::identity(np, np) * 0.05));
            for i in np..n {
                h[(i, i)] = 1e-9 * rho;
            }
            let mut c = DVector::zeros(n);
            for i in 0..np {
                c[i] = rng.gen_range(-1.0..1.0);
                c[np + i] = rho;
            }
            let mut a = DMatrix::zeros(6 * np, n);
            let mut b = DVector::zeros(6 * np);
            for i in 0..np {
                for j in 0..=i {
                    a[(i, j)] = rng.gen_range(0.0..1e-3) * (i - j + 1) as f64;
                }
                a[(i, np + i)] = -1.0;
                b[i] = rng.gen_range(-0.1..1e-3);
                a[(np + i, np + i)] = -1.0;
                a[(2 * np + i, i)] = 1.0;
                b[2 * np + i] = rng.gen_range(0.0..40.0);
                a[(3 * np + i, i)] = -1.0;
                b[3 * np + i] = rng.gen_range(0.0..40.0);
                a[(4 * np + i, i)] = 1.0;
                a[(5 * np + i, i)] = -1.0;
                if i > 0 {
                    a[(4 * np + i, i - 1)] = -1.0;
                    a[(5 * np + i, i - 1)] = 1.0;
                }
                b[4 * np + i] = rng.gen_range(0.0..5.0);
                b[5 * np + i] = rng.gen_range(0.0..5.0);
            }
            let sol = solve_qp(&h, &c, &a, &b, QpOptions::default());
            assert_eq!(sol.status, QpStatus::Solved);
            let v = kkt_violation(&h, &c, &a, &b, &sol);
            assert!(v < 1e-9, "optimality violated by {v:e}");
        }
    }
}
