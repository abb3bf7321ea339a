//! Discrete PID control of the loaded-solvent uranium and its offline
//! tuning.
//!
//! With `y = [U]og_D,n` (uranium in the organic settler of the last stage)
//! and `e = y_set − y` the controller computes
//!
//! ```text
//! u_raw(k) = u_set + K_P e(k) + K_I e_I(k) + K_D e_D(k)
//! e_I(k)   = e_I(k−1) + T (e(k) + e(k−1)) / 2
//! e_D(k)   = (e(k) − e(k−1)) / T
//! ```
//!
//! and applies `u_raw` clamped first to the box `[u_min, u_max]` and then
//! to the rate window around the previously applied input. `T` is the
//! control sampling time. There is no anti-windup beyond the clamps and no
//! derivative filter.

pub mod simplex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, CascadeState, Inputs, Integrator};
use crate::error::{Error, Result};
use crate::flowsheet::InputBounds;
use crate::steady_state::SetPoint;

use simplex::{minimize, SimplexOptions};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    #[serde(rename = "K_P")]
    pub k_p: f64,
    #[serde(rename = "K_I")]
    pub k_i: f64,
    #[serde(rename = "K_D")]
    pub k_d: f64,
}

impl PidGains {
    pub fn new(k_p: f64, k_i: f64, k_d: f64) -> Self {
        PidGains { k_p, k_i, k_d }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.k_p, self.k_i, self.k_d].iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(
                "gains",
                format!("PID gains must be finite, got {self:?}"),
            ))
        }
    }
}

/// Memory of the controller between samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidState {
    pub e_prev: f64,
    /// Integrated error, mol·h/L.
    pub e_i: f64,
    /// Input applied over the previous interval.
    pub u_prev: f64,
    /// Sampling interval, h.
    pub t: f64,
}

impl PidState {
    /// Zero error memory with `u_prev` as the last applied input.
    pub fn new(u_prev: f64, t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(
                "T",
                format!("sampling interval must be > 0, got {t}"),
            ));
        }
        Ok(PidState {
            e_prev: 0.0,
            e_i: 0.0,
            u_prev,
            t,
        })
    }
}

/// Unclamped PID output and the error memory it implies.
fn raw_output(st: &PidState, gains: &PidGains, e: f64, u_set: f64) -> (f64, f64) {
    let e_i = st.e_i + 0.5 * st.t * (e + st.e_prev);
    let e_d = (e - st.e_prev) / st.t;
    (
        u_set + gains.k_p * e + gains.k_i * e_i + gains.k_d * e_d,
        e_i,
    )
}

/// One controller update; returns the applied input and the next state.
pub fn pid_step(
    st: &PidState,
    gains: &PidGains,
    y: f64,
    y_set: f64,
    u_set: f64,
    bounds: &InputBounds,
) -> (f64, PidState) {
    let e = y_set - y;
    let (raw, e_i) = raw_output(st, gains, e, u_set);
    let u = bounds.clamp(raw, st.u_prev);
    let next = PidState {
        e_prev: e,
        e_i,
        u_prev: u,
        t: st.t,
    };
    (u, next)
}

/// A PID controller bound to its gains and limits.
#[derive(Debug, Clone, PartialEq)]
pub struct PidController {
    pub gains: PidGains,
    pub bounds: InputBounds,
    pub state: PidState,
}

impl PidController {
    pub fn new(gains: PidGains, bounds: InputBounds, u_prev: f64, t: f64) -> Result<Self> {
        gains.validate()?;
        Ok(PidController {
            gains,
            bounds,
            state: PidState::new(u_prev, t)?,
        })
    }

    /// Applied input for the measurement `y` against the active set point.
    pub fn step(&mut self, y: f64, setpoint: &SetPoint) -> f64 {
        let (u, next) = pid_step(
            &self.state,
            &self.gains,
            y,
            setpoint.loaded_u(),
            setpoint.u_set,
            &self.bounds,
        );
        self.state = next;
        u
    }
}

/// Closed-loop PID run of `p_seq.len()` intervals from `x0`.
///
/// Returns the applied inputs `u(0) … u(N)` (one more than intervals, the
/// last computed from the final state) and the outputs `y(0) … y(N)`.
pub fn simulate_pid(
    model: &CascadeModel,
    x0: &CascadeState,
    u_prev: f64,
    setpoint: &SetPoint,
    p_seq: &[f64],
    gains: &PidGains,
    integ: Integrator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ctl = PidController::new(*gains, model.flowsheet().input_bounds(), u_prev, integ.t_s)?;
    let mut x = x0.clone();
    let mut us = Vec::with_capacity(p_seq.len() + 1);
    let mut ys = Vec::with_capacity(p_seq.len() + 1);
    for k in 0..=p_seq.len() {
        let y = x.loaded_u();
        let u = ctl.step(y, setpoint);
        us.push(u);
        ys.push(y);
        if let Some(&p) = p_seq.get(k) {
            x = model
                .step(&x, Inputs::new(u, p), integ)
                .map_err(|e| e.at_step(k))?
                .state;
        }
    }
    Ok((us, ys))
}

/// Settings of the gain tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneOptions {
    /// Length of the tuning simulation in control steps.
    #[serde(rename = "N_PID")]
    pub n_pid: usize,
    /// Weight of `(u − u_set)²`; defaults to `1/u_set²`.
    pub r: Option<f64>,
    /// Weight of `(u(k+1) − u(k))²`; defaults to `1/u_set²`.
    pub s: Option<f64>,
    /// Number of simplex runs, the first from the initial gains.
    pub starts: usize,
    pub seed: u64,
    pub max_evals: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            n_pid: 30,
            r: None,
            s: None,
            starts: 5,
            seed: 2024,
            max_evals: 300,
        }
    }
}

impl TuneOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_pid == 0 {
            return Err(Error::invalid(
                "N_PID",
                "tuning horizon must be at least one step",
            ));
        }
        if self.starts == 0 {
            return Err(Error::invalid("starts", "at least one start is required"));
        }
        for (name, w) in [("r", self.r), ("s", self.s)] {
            if let Some(w) = w.filter(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invalid(
                    name,
                    format!("weight must be finite and >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// The closed loop the gains are tuned on.
#[derive(Debug, Clone)]
pub struct TuningProblem<'a> {
    pub model: &'a CascadeModel,
    pub x0: CascadeState,
    pub u_prev: f64,
    pub setpoint: SetPoint,
    /// Solvent flow during each of the `N_PID` intervals.
    pub p_seq: Vec<f64>,
    pub integrator: Integrator,
}

/// One simplex run of the tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRun {
    pub start: PidGains,
    pub start_objective: f64,
    pub gains: PidGains,
    pub objective: f64,
    pub evaluations: usize,
    /// Best objective after each simplex iteration.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub gains: PidGains,
    pub objective: f64,
    /// Objective of the initial gains.
    pub initial_objective: f64,
    /// Objective with all gains zero (open loop at `u_set`).
    pub baseline_objective: f64,
    pub seed: u64,
    pub runs: Vec<TuningRun>,
}

impl<'a> TuningProblem<'a> {
    /// `Σ_{k<N} e(k)² + r (u(k) − u_set)² + s (u(k+1) − u(k))²`, or `+∞`
    /// when the simulation fails.
    pub fn objective(&self, gains: &PidGains, r: f64, s: f64) -> f64 {
        let Ok((us, ys)) = simulate_pid(
            self.model,
            &self.x0,
            self.u_prev,
            &self.setpoint,
            &self.p_seq,
            gains,
            self.integrator,
        ) else {
            return f64::INFINITY;
        };
        let (y_set, u_set) = (self.setpoint.loaded_u(), self.setpoint.u_set);
        (0..self.p_seq.len())
            .map(|k| {
                let e = y_set - ys[k];
                let du = us[k + 1] - us[k];
                e * e + r * (us[k] - u_set).powi(2) + s * du * du
            })
            .sum()
    }

    /// Gain scales that make one simplex unit a comparable move in each
    /// gain: a full-scale error moves `u` by `u_set` through the
    /// proportional term, over 10 h through the integral term and over 1 h
    /// through the derivative term.
    fn scales(&self) -> [f64; 3] {
        let (y, u) = (self.setpoint.loaded_u().max(1e-6), self.setpoint.u_set);
        [u / y, u / (10.0 * y), u / y]
    }
}

/// Multistart simplex search for the gains minimizing the tuning
/// objective.
///
/// The first run starts from `initial`, the others from seeded random
/// gains. Every run returns an objective no worse than its own start, so
/// the result is never worse than `initial`. Fails if no run improves on
/// zero gains.
pub fn tune_pid(
    problem: &TuningProblem<'_>,
    opts: &TuneOptions,
    initial: PidGains,
) -> Result<TuningReport> {
    opts.validate()?;
    initial.validate()?;
    if problem.p_seq.len() != opts.n_pid {
        return Err(Error::invalid(
            "N_PID",
            format!(
                "p trace has {} entries, expected {}",
                problem.p_seq.len(),
                opts.n_pid
            ),
        ));
    }
    let u_set = problem.setpoint.u_set;
    let r = opts.r.unwrap_or(1.0 / (u_set * u_set));
    let s = opts.s.unwrap_or(1.0 / (u_set * u_set));
    let scale = problem.scales();
    let to_gains = |z: &[f64]| PidGains::new(z[0] * scale[0], z[1] * scale[1], z[2] * scale[2]);
    let to_scaled = |g: &PidGains| vec![g.k_p / scale[0], g.k_i / scale[1], g.k_d / scale[2]];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![to_scaled(&initial)];
    while starts.len() < opts.starts {
        starts.push(vec![
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(-0.5..0.5),
        ]);
    }
    let simplex = SimplexOptions {
        max_evals: opts.max_evals,
        ..SimplexOptions::default()
    };

    // the runs are independent; each thread owns its run and results are
    // collected in start order, so the outcome does not depend on timing
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = starts
            .iter()
            .map(|z0| {
                scope
                    .spawn(move || minimize(|z| problem.objective(&to_gains(z), r, s), z0, simplex))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("tuning thread panicked"))
            .collect()
    });

    let runs: Vec<TuningRun> = starts
        .iter()
        .zip(results)
        .map(|(z0, res)| TuningRun {
            start: to_gains(z0),
            start_objective: res.f_start,
            gains: to_gains(&res.x),
            objective: res.f,
            evaluations: res.evaluations,
            trace: res.trace,
        })
        .collect();

    let baseline = problem.objective(&PidGains::default(), r, s);
    let best = runs
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one start");
    if best.objective.partial_cmp(&baseline) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Tuning(format!(
            "no start improved on the zero-gain objective {baseline:.6e} (best {:.6e})",
            best.objective
        )));
    }
    Ok(TuningReport {
        gains: best.gains,
        objective: best.objective,
        initial_objective: runs[0].start_objective,
        baseline_objective: baseline,
        seed: opts.seed,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsheet::FlowSheet;
    use proptest::prelude::*;

    fn bounds() -> InputBounds {
        FlowSheet::default().input_bounds()
    }

    #[test]
    fn zero_error_returns_the_set_point_input() {
        let st = PidState::new(40.0, 0.5).unwrap();
        let (u, next) = pid_step(
            &st,
            &PidGains::new(3.0, 2.0, 1.0),
            0.39,
            0.39,
            40.0,
            &bounds(),
        );
        assert_eq!(u, 40.0);
        assert_eq!(next.e_i, 0.0);
        assert_eq!(next.u_prev, 40.0);
    }

    #[test]
    fn zero_gains_ignore_the_measurement() {
        let mut st = PidState::new(40.0, 0.5).unwrap();
        for y in [0.0, 0.2, 1.7, 0.39] {
            let (u, next) = pid_step(&st, &PidGains::default(), y, 0.39, 40.0, &bounds());
            assert_eq!(u, 40.0);
            st = next;
        }
    }

    #[test]
    fn integral_term_grows_by_half_the_error_per_step() {
        let gains = PidGains::new(0.0, 1.0, 0.0);
        let (y, y_set) = (0.25, 0.5);
        let e = y_set - y;
        let mut st = PidState {
            e_prev: e,
            e_i: 0.0,
            u_prev: 40.0,
            t: 0.5,
        };
        for k in 1..=3 {
            let (u, next) = pid_step(&st, &gains, y, y_set, 40.0, &bounds());
            assert_eq!(u - 40.0, 0.5 * e * k as f64);
            st = next;
        }
    }

    #[test]
    fn output_is_box_then_rate_clamped() {
        let st = PidState::new(78.0, 0.5).unwrap();
        // raw 140: box gives 80, within the rate window of 78
        let (u, _) = pid_step(
            &st,
            &PidGains::new(100.0, 0.0, 0.0),
            0.0,
            1.0,
            40.0,
            &bounds(),
        );
        assert_eq!(u, 80.0);
        let st = PidState::new(10.0, 0.5).unwrap();
        let (u, _) = pid_step(
            &st,
            &PidGains::new(100.0, 0.0, 0.0),
            0.0,
            1.0,
            40.0,
            &bounds(),
        );
        assert_eq!(u, 15.0);
    }

    #[test]
    fn nonpositive_sampling_interval_is_rejected() {
        assert!(PidState::new(40.0, 0.0).is_err());
        assert!(
            PidController::new(PidGains::new(f64::NAN, 0.0, 0.0), bounds(), 40.0, 0.5).is_err()
        );
    }

    proptest! {
        #[test]
        fn clamping_is_idempotent(raw in -200.0..300.0f64, prev in 5.0..80.0f64) {
            let b = bounds();
            let once = b.clamp(raw, prev);
            prop_assert_eq!(b.clamp(once, prev), once);
            // `prev + du` rounds, so the window holds to roundoff only
            prop_assert!(b.contains(once, prev, 1e-12));
        }

        #[test]
        fn applied_inputs_respect_the_rate_limits(
            k_p in -500.0..500.0f64,
            k_i in -100.0..100.0f64,
            k_d in -50.0..50.0f64,
            ys in proptest::collection::vec(0.0..1.0f64, 1..40),
            u0 in 5.0..80.0f64,
        ) {
            let b = bounds();
            let mut st = PidState::new(u0, 0.5).unwrap();
            for y in ys {
                let prev = st.u_prev;
                let (u, next) = pid_step(&st, &PidGains::new(k_p, k_i, k_d), y, 0.39, 40.0, &b);
                prop_assert!(b.contains(u, prev, 1e-12));
                st = next;
            }
        }
    }
}
