//! Steady states, feed-flow sweeps and the critical saturation set point.
//!
//! Steady states solve `f_c(x, u, p) = 0` by damped Newton in the form of
//! pseudo-transient continuation: each iterate solves
//! `(I/τ − J) δ = f_c(x)` and the pseudo time step `τ` grows as the
//! residual falls, so early iterations behave like implicit-Euler time
//! steps and late ones like plain Newton. A step that raises the residual
//! more than tenfold is rejected and retried with `τ/4`. Cold starts begin from
//! the empty cascade with a small `τ`; warm starts (continuation) begin
//! from the guess with a large one. If the iteration stalls, the plant is
//! integrated for up to [`FALLBACK_HORIZON`] hours and the iteration
//! restarted from there.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, CascadeState, Inputs, Integrator, SparseJacobian};
use crate::error::{Error, Result};

/// Hours of plant integration per fallback attempt.
pub const FALLBACK_CHUNK: f64 = 200.0;
/// Maximum hours of fallback integration before giving up.
pub const FALLBACK_HORIZON: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Convergence threshold on `‖f_c‖∞`, mol/L/h.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial pseudo time step for cold starts, h.
    pub tau_cold: f64,
    /// Initial pseudo time step for warm starts, h.
    pub tau_warm: f64,
    /// Substep of the seeding and fallback integrations, h.
    pub h_sub: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-9,
            max_iter: 200,
            tau_cold: 0.1,
            tau_warm: 1e3,
            h_sub: 1e-3,
        }
    }
}

/// A steady state of the cascade at fixed `(u, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyPoint {
    pub u: f64,
    pub p: f64,
    pub x_ss: CascadeState,
    /// `[U]aq_D,1`, mol/L.
    pub raffinate_u: f64,
    /// `[U]og_D,n`, mol/L.
    pub loaded_u: f64,
    /// `‖f_c(x_ss)‖∞`, mol/L/h.
    pub residual: f64,
    pub newton_iterations: usize,
    /// Hours of plant integration spent seeding or rescuing Newton.
    pub integrated_hours: f64,
}

impl SteadyPoint {
    fn new(u: f64, p: f64, x_ss: CascadeState, residual: f64, iters: usize, hours: f64) -> Self {
        SteadyPoint {
            u,
            p,
            raffinate_u: x_ss.raffinate_u(),
            loaded_u: x_ss.loaded_u(),
            x_ss,
            residual,
            newton_iterations: iters,
            integrated_hours: hours,
        }
    }
}

/// Tracking target: the steady state at the critical feed flow for a given
/// solvent flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPoint {
    pub u_set: f64,
    pub x_set: CascadeState,
    pub p: f64,
}

impl SetPoint {
    pub fn from_steady(sp: &SteadyPoint) -> Self {
        SetPoint {
            u_set: sp.u,
            x_set: sp.x_ss.clone(),
            p: sp.p,
        }
    }

    /// Loaded-solvent uranium at the set point, mol/L.
    pub fn loaded_u(&self) -> f64 {
        self.x_set.loaded_u()
    }

    pub fn raffinate_u(&self) -> f64 {
        self.x_set.raffinate_u()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetpointOptions {
    /// Bisection stops once the bracket is narrower than this fraction of
    /// the initial search interval.
    pub rel_width: f64,
    /// Factor in (0, 1] applied to the critical feed flow.
    pub margin: f64,
}

impl Default for SetpointOptions {
    fn default() -> Self {
        SetpointOptions {
            rel_width: 1e-3,
            margin: 0.98,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Steady-state solver bound to one cascade model.
#[derive(Debug, Clone)]
pub struct SteadyStateSolver<'a> {
    model: &'a CascadeModel,
    pub options: NewtonOptions,
}

const MIN_TAU: f64 = 1e-3;
/// Largest residual growth accepted for one pseudo time step.
const ACCEPT_GROWTH: f64 = 10.0;
const MAX_TAU: f64 = 1e12;

struct NewtonOutcome {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
}

impl<'a> SteadyStateSolver<'a> {
    pub fn new(model: &'a CascadeModel) -> Self {
        SteadyStateSolver {
            model,
            options: NewtonOptions::default(),
        }
    }

    pub fn with_options(model: &'a CascadeModel, options: NewtonOptions) -> Self {
        SteadyStateSolver { model, options }
    }

    pub fn model(&self) -> &CascadeModel {
        self.model
    }

    fn newton(&self, x0: &[f64], inp: Inputs, tau0: f64) -> NewtonOutcome {
        let n = x0.len();
        let opts = &self.options;
        let mut x = x0.to_vec();
        let mut f = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut trial_f = vec![0.0; n];
        let mut jac = SparseJacobian::default();
        self.model.rhs_jacobian(&x, inp, &mut f, &mut jac);
        let mut res = inf_norm(&f);
        let mut tau = tau0;
        let mut iterations = 0;
        while res >= opts.tol && iterations < opts.max_iter {
            iterations += 1;
            let mut m = jac.to_dense(n);
            m.neg_mut();
            for i in 0..n {
                m[(i, i)] += 1.0 / tau;
            }
            let Some(step) = m.lu().solve(&DVector::from_column_slice(&f)) else {
                tau *= 0.25;
                continue;
            };
            for ((t, xi), si) in trial.iter_mut().zip(&x).zip(step.iter()) {
                *t = (xi + si).max(0.0);
            }
            self.model.rhs_into(&trial, inp, &mut trial_f);
            let r = inf_norm(&trial_f);
            if r.is_finite() && (r < ACCEPT_GROWTH * res || tau < MIN_TAU) {
                tau = (tau * (res / r).clamp(1.5, 100.0)).min(MAX_TAU);
                std::mem::swap(&mut x, &mut trial);
                res = r;
                self.model.rhs_jacobian(&x, inp, &mut f, &mut jac);
            } else {
                tau *= 0.25;
            }
        }
        NewtonOutcome {
            converged: res < opts.tol,
            x,
            residual: res,
            iterations,
        }
    }

    fn integrate(&self, x: &CascadeState, inp: Inputs, hours: f64) -> Result<CascadeState> {
        let integ = Integrator::new(hours, self.options.h_sub)?;
        Ok(self.model.step(x, inp, integ)?.state)
    }

    /// Steady state at `(u, p)`, starting from `guess` when given.
    pub fn solve(&self, u: f64, p: f64, guess: Option<&CascadeState>) -> Result<SteadyPoint> {
        if !(u >= 0.0 && p > 0.0) {
            return Err(Error::invalid(
                "u",
                format!("need u >= 0 and p > 0, got u = {u}, p = {p}"),
            ));
        }
        let inp = Inputs::new(u, p);
        let n_stages = self.model.flowsheet().n_stages;
        let mut hours = 0.0;
        let mut total_iters = 0;
        let (mut start, mut tau) = match guess {
            Some(g) => (g.clone(), self.options.tau_warm),
            None => (CascadeState::zeros(n_stages), self.options.tau_cold),
        };
        let mut best = f64::INFINITY;
        loop {
            let out = self.newton(start.as_slice(), inp, tau);
            total_iters += out.iterations;
            if out.converged {
                let x = CascadeState::from_vec(n_stages, out.x)?;
                return Ok(SteadyPoint::new(u, p, x, out.residual, total_iters, hours));
            }
            best = best.min(out.residual);
            if tau == self.options.tau_warm && hours == 0.0 {
                // continuation guess on the wrong side of a sharp front
                start = CascadeState::zeros(n_stages);
                tau = self.options.tau_cold;
                continue;
            }
            if hours >= FALLBACK_HORIZON {
                break;
            }
            let chunk = FALLBACK_CHUNK.min(FALLBACK_HORIZON - hours);
            start = self.integrate(&start, inp, chunk)?;
            hours += chunk;
            tau = self.options.tau_cold;
        }
        Err(Error::SteadyState {
            u,
            p,
            residual: best,
        })
    }

    /// Steady states along an ascending grid of feed flows, each seeded by
    /// the previous solution.
    pub fn sweep(&self, u_grid: &[f64], p: f64) -> Result<Vec<SteadyPoint>> {
        if u_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("u_grid", "grid must be sorted ascending"));
        }
        let mut out: Vec<SteadyPoint> = Vec::with_capacity(u_grid.len());
        for &u in u_grid {
            let guess = out.last().map(|sp| &sp.x_ss);
            out.push(self.solve(u, p, guess)?);
        }
        Ok(out)
    }

    /// Largest feed flow in `[u_lo, u_hi]` whose steady raffinate stays at
    /// or below the tolerance, scaled by `opts.margin`, together with the
    /// steady state at the scaled flow.
    pub fn critical_setpoint(
        &self,
        p: f64,
        u_lo: f64,
        u_hi: f64,
        opts: SetpointOptions,
    ) -> Result<SetPoint> {
        if !(opts.margin > 0.0 && opts.margin <= 1.0) {
            return Err(Error::invalid(
                "margin",
                format!("must lie in (0, 1], got {}", opts.margin),
            ));
        }
        if u_lo.partial_cmp(&u_hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::invalid("u_lo", "search interval is empty"));
        }
        let tol = self.model.flowsheet().raffinate_tol;
        let lo_pt = self.solve(u_lo, p, None)?;
        if lo_pt.raffinate_u > tol {
            return Err(Error::Bracket {
                u_lo,
                u_hi,
                raffinate_lo: lo_pt.raffinate_u,
                raffinate_hi: f64::NAN,
                tol,
            });
        }
        let hi_pt = self.solve(u_hi, p, None)?;
        let mut lo = lo_pt;
        if hi_pt.raffinate_u > tol {
            let mut hi = hi_pt;
            let width = opts.rel_width * (u_hi - u_lo);
            while hi.u - lo.u > width {
                let mid = 0.5 * (lo.u + hi.u);
                let pt = self.solve(mid, p, Some(&lo.x_ss))?;
                if pt.raffinate_u <= tol {
                    lo = pt;
                } else {
                    hi = pt;
                }
            }
        } else {
            // the tolerance never binds on this interval
            lo = hi_pt;
        }
        let u_set = opts.margin * lo.u;
        let sp = if u_set == lo.u {
            lo
        } else {
            self.solve(u_set, p, Some(&lo.x_ss))?
        };
        Ok(SetPoint::from_steady(&sp))
    }
}

/// Writes a sweep as CSV: `u, p, raffinate_U, loaded_U`, optionally
/// followed by the full state vector.
pub fn write_sweep_csv<W: std::io::Write>(
    points: &[SteadyPoint],
    full_state: bool,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "u".to_string(),
        "p".into(),
        "raffinate_U".into(),
        "loaded_U".into(),
    ];
    if let Some(first) = points.first().filter(|_| full_state) {
        header.extend((1..=first.x_ss.len()).map(|k| format!("x{k}")));
    }
    w.write_record(&header)?;
    for sp in points {
        let mut row = vec![
            sp.u.to_string(),
            sp.p.to_string(),
            sp.raffinate_u.to_string(),
            sp.loaded_u.to_string(),
        ];
        if full_state {
            row.extend(sp.x_ss.as_slice().iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Newton iteration matrix, exposed for diagnostics.
pub fn jacobian(model: &CascadeModel, x: &CascadeState, inp: Inputs) -> DMatrix<f64> {
    let mut f = vec![0.0; x.len()];
    let mut jac = SparseJacobian::default();
    model.rhs_jacobian(x.as_slice(), inp, &mut f, &mut jac);
    jac.to_dense(x.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::Block;
    use crate::flowsheet::FlowSheet;

    #[test]
    fn uranium_free_feed_leaves_uranium_blocks_empty() {
        let fs = FlowSheet::default().with_uranium_feed(0.0);
        let model = CascadeModel::new(&fs);
        let sp = SteadyStateSolver::new(&model)
            .solve(30.0, 100.0, None)
            .unwrap();
        for b in [Block::UAqMixer, Block::UAqSettler, Block::UOgSettler] {
            assert!(
                sp.x_ss.block(b).iter().all(|&v| v.abs() < 1e-20),
                "{:?}",
                sp.x_ss.block(b)
            );
        }
        assert!(sp.x_ss.block(Block::HAqMixer).iter().all(|&v| v > 0.0));
        assert!(sp.residual < 1e-9);
    }

    #[test]
    fn empty_grid_gives_empty_sweep() {
        let model = CascadeModel::new(&FlowSheet::default());
        assert!(SteadyStateSolver::new(&model)
            .sweep(&[], 100.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unsorted_grid_is_rejected() {
        let model = CascadeModel::new(&FlowSheet::default());
        assert!(SteadyStateSolver::new(&model)
            .sweep(&[20.0, 10.0], 100.0)
            .is_err());
    }

    #[test]
    fn unbounded_tolerance_returns_the_scaled_upper_end() {
        let fs = FlowSheet {
            raffinate_tol: f64::INFINITY,
            ..FlowSheet::default()
        };
        let model = CascadeModel::new(&fs);
        let sp = SteadyStateSolver::new(&model)
            .critical_setpoint(100.0, 10.0, 60.0, SetpointOptions::default())
            .unwrap();
        assert_eq!(sp.u_set, 0.98 * 60.0);
    }

    #[test]
    fn knee_outside_the_interval_is_a_bracket_error() {
        let model = CascadeModel::new(&FlowSheet::default());
        let err = SteadyStateSolver::new(&model)
            .critical_setpoint(100.0, 60.0, 70.0, SetpointOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Bracket { .. }));
    }
}
