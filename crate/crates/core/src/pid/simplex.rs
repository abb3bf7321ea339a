//! Nelder-Mead downhill simplex for small, nonsmooth problems.
//!
//! Non-finite objective values are treated as `+∞`, so a start that makes
//! the closed loop diverge simply loses every comparison.

/// Termination settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Edge length of the initial simplex along each coordinate.
    pub initial_step: f64,
    /// Stop once the spread of the vertex values falls below
    /// `f_tol·(1 + |f_best|)` and the simplex is smaller than `x_tol`.
    pub f_tol: f64,
    pub x_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            initial_step: 0.25,
            f_tol: 1e-9,
            x_tol: 1e-6,
            max_evals: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Value at the starting point.
    pub f_start: f64,
    pub evaluations: usize,
    /// Best value after each iteration, starting with `f_start`.
    pub trace: Vec<f64>,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `f` from `x0`. The returned point is the best vertex ever
/// seen, so `result.f <= result.f_start` always holds.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: SimplexOptions,
) -> SimplexResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    let mut pts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f_start = eval(x0, &mut evals);
    pts.push((x0.to_vec(), f_start));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = eval(&x, &mut evals);
        pts.push((x, v));
    }
    let mut trace = vec![f_start];

    loop {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(pts[0].1);
        let (best, worst) = (pts[0].1, pts[n].1);
        let size = pts[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let flat = worst - best <= opts.f_tol * (1.0 + best.abs());
        if (flat && size <= opts.x_tol) || evals >= opts.max_evals {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| pts[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < pts[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < pts[n - 1].1 {
            pts[n] = (xr, fr);
            continue;
        }
        // contract toward the better of the reflected and worst points
        let (xc, fc) = if fr < pts[n].1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fr.min(pts[n].1) {
            pts[n] = (xc, fc);
            continue;
        }
        let x_best = pts[0].0.clone();
        for (x, v) in pts[1..].iter_mut() {
            for (xi, bi) in x.iter_mut().zip(&x_best) {
                *xi = bi + 0.5 * (*xi - bi);
            }
            *v = eval(x, &mut evals);
        }
    }

    let (x, fx) = pts.swap_remove(0);
    SimplexResult {
        x,
        f: fx,
        f_start,
        evaluations: evals,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_the_rosenbrock_minimum() {
        let rosen = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = SimplexOptions {
            initial_step: 0.5,
            f_tol: 1e-14,
            x_tol: 1e-8,
            max_evals: 2000,
        };
        let r = minimize(rosen, &[-1.2, 1.0], opts);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4,
            "{:?}",
            r.x
        );
        assert!(r.f < 1e-8);
    }

    #[test]
    fn trace_never_increases_and_ends_at_the_result() {
        let f = |x: &[f64]| x[0].abs() + 2.0 * (x[1] - 0.3).abs() + (x[2] + 1.0).powi(2);
        let r = minimize(f, &[2.0, -1.0, 0.5], SimplexOptions::default());
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.trace.last().unwrap(), r.f);
        assert!(r.f <= r.f_start);
        assert!(r.evaluations <= SimplexOptions::default().max_evals + 5);
    }

    #[test]
    fn non_finite_values_lose_every_comparison() {
        let f = |x: &[f64]| {
            if x[0] > 0.5 {
                f64::NAN
            } else {
                (x[0] + 1.0).powi(2)
            }
        };
        let r = minimize(f, &[0.4], SimplexOptions::default());
        assert!((r.x[0] + 1.0).abs() < 1e-3, "{:?}", r.x);
    }
}
