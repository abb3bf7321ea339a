//! Receding-horizon control of the feed flow by single shooting.
//!
//! At every sampling instant `k` the controller solves
//!
//! ```text
//! minimize   Σ_{i=0}^{N−1} ( ‖x̃_i‖²_Q + R ũ_i² + S (u_i − u_{i−1})² ) + ‖x̃_N‖²_P + ρ Σ_{i=1}^{N} s_i
//! subject to x_{i+1} = F(x_i, u_i, p̂),  x_0 = x(k),  u_{−1} = u(k−1)
//!            x_17(i) ≤ tol + s_i,  s_i ≥ 0                       i = 1..N
//!            u_min ≤ u_i ≤ u_max,  Δu_min ≤ u_i − u_{i−1} ≤ Δu_max
//! ```
//!
//! where `x̃ = x − x_set`, `ũ = u − u_set`, `F` is one control interval of
//! the explicit-Euler cascade model and `p̂` the solvent flow measured at
//! `k`, held over the horizon. Only the inputs are decision variables (the
//! states follow by simulation), so the problem has `N` inputs and `N`
//! slacks.
//!
//! The nonlinear program is solved by sequential quadratic programming with
//! a Gauss-Newton Hessian built from exact forward sensitivities of the
//! shooting map, a dual active-set QP solver for the subproblems and a
//! backtracking line search on the exact L1 penalty.

pub mod qp;
mod shooting;
mod sqp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeState, Integrator};
use crate::error::{Error, Result};
use crate::flowsheet::{FlowSheet, InputBounds};
use crate::steady_state::SetPoint;

pub use shooting::{Linearization, Ocp};
pub use sqp::solve_ocp;

/// Stage and terminal weights of the tracking cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcWeights {
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    r: f64,
    s: f64,
    q_norm: f64,
}

fn check_spd(name: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::invalid(
            name,
            format!("expected {n}x{n}, got {:?}", m.shape()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(name, "entries must be finite"));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::invalid(
            name,
            format!("not symmetric (max asymmetry {asym:e})"),
        ));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::invalid(name, "not positive definite"));
    }
    Ok(())
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            name,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

impl MpcWeights {
    pub fn new(q: DMatrix<f64>, p: DMatrix<f64>, r: f64, s: f64) -> Result<Self> {
        let n = q.nrows();
        check_spd("Q", &q, n)?;
        check_spd("P", &p, n)?;
        check_positive("R", r)?;
        check_positive("S", s)?;
        let q_norm = q.clone().symmetric_eigenvalues().max();
        Ok(MpcWeights { q, p, r, s, q_norm })
    }

    /// `Q = q·I`, `P = p·I`.
    pub fn diagonal(n: usize, q: f64, p: f64, r: f64, s: f64) -> Result<Self> {
        check_positive("Q", q)?;
        check_positive("P", p)?;
        check_positive("R", r)?;
        check_positive("S", s)?;
        Ok(MpcWeights {
            q: DMatrix::identity(n, n) * q,
            p: DMatrix::identity(n, n) * p,
            r,
            s,
            q_norm: q,
        })
    }

    /// `Q = P = I` and `R = S = 1/u_set`.
    pub fn for_setpoint(n: usize, u_set: f64) -> Result<Self> {
        Self::diagonal(n, 1.0, 1.0, 1.0 / u_set, 1.0 / u_set)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Spectral norm of `Q`.
    pub fn q_norm(&self) -> f64 {
        self.q_norm
    }
}

/// Controller settings as read from a configuration file.
///
/// `r`, `s` default to `1/u_set` of the active set point and `rho` to
/// `1e6·‖Q‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcOptions {
    #[serde(rename = "N_p")]
    pub horizon: usize,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    pub h_sub_pred: f64,
    pub q: f64,
    pub p: f64,
    pub r: Option<f64>,
    pub s: Option<f64>,
    pub rho: Option<f64>,
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for MpcOptions {
    fn default() -> Self {
        MpcOptions {
            horizon: 10,
            t_s: 0.5,
            h_sub_pred: 1e-3,
            q: 1.0,
            p: 1.0,
            r: None,
            s: None,
            rho: None,
            kkt_tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl MpcOptions {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("N_p", "horizon must be at least one step"));
        }
        Integrator::new(self.t_s, self.h_sub_pred)?.substeps()?;
        check_positive("kkt_tol", self.kkt_tol)?;
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        if let Some(rho) = self.rho {
            check_positive("rho", rho)?;
        }
        Ok(())
    }

    pub fn weights(&self, n: usize, u_set: f64) -> Result<MpcWeights> {
        MpcWeights::diagonal(
            n,
            self.q,
            self.p,
            self.r.unwrap_or(1.0 / u_set),
            self.s.unwrap_or(1.0 / u_set),
        )
    }

    pub fn integrator(&self) -> Result<Integrator> {
        Integrator::new(self.t_s, self.h_sub_pred)
    }
}

/// Iteration limits of the SQP solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kkt_tol: 1e-6,
            max_iter: 200,
        }
    }
}

/// One horizon problem.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub x_k: CascadeState,
    /// Input applied over the previous interval.
    pub u_prev: f64,
    pub setpoint: SetPoint,
    /// Solvent flow assumed over the whole horizon.
    pub p_hat: f64,
    pub horizon: usize,
    /// Sampling time and prediction substep.
    pub integrator: Integrator,
    pub weights: MpcWeights,
    pub bounds: InputBounds,
    pub raffinate_tol: f64,
    /// Penalty on the raffinate slacks.
    pub rho: f64,
    pub solver: SolverOptions,
}

impl OcpSpec {
    /// Assembles a problem from a flowsheet and controller options, with
    /// weights resolved against `setpoint`.
    pub fn from_options(
        x_k: CascadeState,
        u_prev: f64,
        setpoint: SetPoint,
        p_hat: f64,
        fs: &FlowSheet,
        options: &MpcOptions,
    ) -> Result<Self> {
        options.validate()?;
        let weights = options.weights(fs.state_len(), setpoint.u_set)?;
        let rho = options.rho.unwrap_or(1e6 * weights.q_norm());
        Ok(OcpSpec {
            x_k,
            u_prev,
            setpoint,
            p_hat,
            horizon: options.horizon,
            integrator: options.integrator()?,
            weights,
            bounds: fs.input_bounds(),
            raffinate_tol: fs.raffinate_tol,
            rho,
            solver: SolverOptions {
                kkt_tol: options.kkt_tol,
                max_iter: options.max_iter,
            },
        })
    }

    pub fn validate(&self, fs: &FlowSheet) -> Result<()> {
        let n = fs.state_len();
        if self.horizon == 0 {
            return Err(Error::invalid("N_p", "horizon must be at least one step"));
        }
        if self.x_k.len() != n || self.setpoint.x_set.len() != n {
            return Err(Error::invalid("x_k", format!("state length must be {n}")));
        }
        if self.weights.q().nrows() != n {
            return Err(Error::invalid("Q", format!("weights must be {n}x{n}")));
        }
        let b = &self.bounds;
        if !(b.u_min < b.u_max && b.du_min <= 0.0 && b.du_max >= 0.0) {
            return Err(Error::invalid(
                "bounds",
                format!("inconsistent input bounds {b:?}"),
            ));
        }
        if !(self.u_prev >= b.u_min && self.u_prev <= b.u_max) {
            return Err(Error::invalid(
                "u_prev",
                format!("{} lies outside [{}, {}]", self.u_prev, b.u_min, b.u_max),
            ));
        }
        check_positive("p_hat", self.p_hat)?;
        check_positive("raffinate_tol", self.raffinate_tol)?;
        check_positive("rho", self.rho)?;
        self.integrator.substeps()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// KKT residual below tolerance.
    Optimal,
    MaxIterations,
    /// The line search could not reduce the merit function any further.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u_star: Vec<f64>,
    /// Predicted states `x_0 … x_N`.
    pub states: Vec<CascadeState>,
    /// Tracking cost plus slack penalty.
    pub objective: f64,
    pub slacks: Vec<f64>,
    pub iterations: usize,
    pub kkt: f64,
    pub status: SolveStatus,
}

/// Compact per-step record of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub objective: f64,
    pub max_slack: f64,
}

impl From<&OcpSolution> for SolveSummary {
    fn from(s: &OcpSolution) -> Self {
        SolveSummary {
            status: s.status,
            iterations: s.iterations,
            kkt: s.kkt,
            objective: s.objective,
            max_slack: s.slacks.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub fn build_ocp(spec: OcpSpec, fs: &FlowSheet) -> Result<Ocp> {
    spec.validate(fs)?;
    Ok(Ocp::new(spec, fs))
}

/// Previous optimal sequence moved one step forward with its last entry
/// repeated.
pub fn shift_warm_start(prev: &[f64]) -> Vec<f64> {
    match prev {
        [] => Vec::new(),
        [_, rest @ ..] => {
            let mut out = rest.to_vec();
            out.push(*prev.last().unwrap());
            out
        }
    }
}

/// Solves one horizon problem and returns the first input, clamped to the
/// box and rate limits, with the full solution.
pub fn mpc_step(
    x_k: &CascadeState,
    u_prev: f64,
    setpoint: &SetPoint,
    p_now: f64,
    fs: &FlowSheet,
    options: &MpcOptions,
    warm_start: Option<&[f64]>,
) -> Result<(f64, OcpSolution)> {
    let spec = OcpSpec::from_options(x_k.clone(), u_prev, setpoint.clone(), p_now, fs, options)?;
    let bounds = spec.bounds;
    let ocp = build_ocp(spec, fs)?;
    let sol = solve_ocp(&ocp, warm_start)?;
    Ok((bounds.clamp(sol.u_star[0], u_prev), sol))
}

/// Stateful wrapper that warm-starts each solve from the previous one.
#[derive(Debug, Clone)]
pub struct NmpcController {
    fs: FlowSheet,
    options: MpcOptions,
    previous: Option<Vec<f64>>,
}

impl NmpcController {
    pub fn new(fs: &FlowSheet, options: MpcOptions) -> Result<Self> {
        options.validate()?;
        Ok(NmpcController {
            fs: fs.clone(),
            options,
            previous: None,
        })
    }

    pub fn options(&self) -> &MpcOptions {
        &self.options
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn step(
        &mut self,
        x_k: &CascadeState,
        u_prev: f64,
        setpoint: &SetPoint,
        p_now: f64,
    ) -> Result<(f64, OcpSolution)> {
        let warm = self.previous.as_deref().map(shift_warm_start);
        let (u, sol) = mpc_step(
            x_k,
            u_prev,
            setpoint,
            p_now,
            &self.fs,
            &self.options,
            warm.as_deref(),
        )?;
        self.previous = Some(sol.u_star.clone());
        Ok((u, sol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warm_start_shift_repeats_the_last_entry() {
        assert_eq!(shift_warm_start(&[1.0, 2.0, 3.0]), vec![2.0, 3.0, 3.0]);
        assert_eq!(shift_warm_start(&[4.0]), vec![4.0]);
        assert!(shift_warm_start(&[]).is_empty());
    }

    #[test]
    fn weights_reject_indefinite_and_asymmetric_matrices() {
        let mut q = DMatrix::identity(3, 3);
        q[(0, 1)] = 0.5;
        assert!(MpcWeights::new(q.clone(), DMatrix::identity(3, 3), 1.0, 1.0).is_err());
        q[(1, 0)] = 0.5;
        let w = MpcWeights::new(q, DMatrix::identity(3, 3), 1.0, 1.0).unwrap();
        assert!((w.q_norm() - 1.5).abs() < 1e-12);
        let mut bad = DMatrix::identity(3, 3);
        bad[(2, 2)] = -1.0;
        assert!(MpcWeights::new(DMatrix::identity(3, 3), bad, 1.0, 1.0).is_err());
        assert!(MpcWeights::diagonal(3, 1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn default_weights_follow_the_set_point() {
        let w = MpcOptions::default().weights(96, 40.0).unwrap();
        assert_eq!(w.r(), 1.0 / 40.0);
        assert_eq!(w.s(), 1.0 / 40.0);
        assert_eq!(w.q()[(5, 5)], 1.0);
        assert_eq!(w.q_norm(), 1.0);
    }

    use crate::cascade::CascadeModel;
    use crate::steady_state::{SetpointOptions, SteadyStateSolver};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_setpoint(fs: &FlowSheet) -> SetPoint {
        let model = CascadeModel::new(fs);
        SteadyStateSolver::new(&model)
            .critical_setpoint(
                fs.o_e_nominal,
                fs.u_min,
                fs.u_max,
                SetpointOptions::default(),
            )
            .unwrap()
    }

    /// Steady state of the cascade without uranium in the feed.
    fn startup_state(fs: &FlowSheet, u: f64) -> CascadeState {
        let clean = fs.with_uranium_feed(0.0);
        let model = CascadeModel::new(&clean);
        SteadyStateSolver::new(&model)
            .solve(u, fs.o_e_nominal, None)
            .unwrap()
            .x_ss
    }

    fn spec(fs: &FlowSheet, sp: &SetPoint, x_k: CascadeState, u_prev: f64) -> OcpSpec {
        OcpSpec::from_options(
            x_k,
            u_prev,
            sp.clone(),
            fs.o_e_nominal,
            fs,
            &MpcOptions::default(),
        )
        .unwrap()
    }

    fn assert_hard_constraints(sol: &OcpSolution, b: &InputBounds, u_prev: f64) {
        let mut prev = u_prev;
        for &u in &sol.u_star {
            assert!(b.contains(u, prev, 1e-8), "{u} after {prev} violates {b:?}");
            prev = u;
        }
    }

    #[test]
    fn cost_gradient_matches_central_differences() {
        let fs = FlowSheet::default();
        let sp = reference_setpoint(&fs);
        let x0 = startup_state(&fs, sp.u_set);
        let ocp = build_ocp(spec(&fs, &sp, x0, sp.u_set), &fs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5 * sp.u_set;
        for _ in 0..10 {
            let mut u: Vec<f64> = (0..10)
                .map(|_| sp.u_set + rng.gen_range(-4.0..4.0))
                .collect();
            fs.input_bounds().project_sequence(&mut u, sp.u_set);
            let lin = ocp.linearize(&u).unwrap();
            let scale = lin.gradient.amax();
            for j in 0..u.len() {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[j] += h;
                dn[j] -= h;
                let fd = (ocp.cost(&up).unwrap() - ocp.cost(&dn).unwrap()) / (2.0 * h);
                let err = (fd - lin.gradient[j]).abs() / scale;
                assert!(
                    err < 1e-5,
                    "component {j}: fd {fd}, exact {}, rel {err:e}",
                    lin.gradient[j]
                );
            }
        }
    }

    #[test]
    fn set_point_is_a_fixed_point() {
        let fs = FlowSheet::default();
        let sp = reference_setpoint(&fs);
        let ocp = build_ocp(spec(&fs, &sp, sp.x_set.clone(), sp.u_set), &fs).unwrap();
        let warm = vec![sp.u_set; 10];
        let sol = solve_ocp(&ocp, Some(&warm)).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        for &u in &sol.u_star {
            assert!((u - sp.u_set).abs() < 1e-6, "{u} vs {}", sp.u_set);
        }
        assert!(sol.objective < 1e-10, "objective {}", sol.objective);
    }

    #[test]
    fn startup_solve_is_feasible_with_zero_slacks() {
        let fs = FlowSheet::default();
        let sp = reference_setpoint(&fs);
        let x0 = startup_state(&fs, sp.u_set);
        let u_prev = 20.0;
        let ocp = build_ocp(spec(&fs, &sp, x0, u_prev), &fs).unwrap();
        let sol = solve_ocp(&ocp, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.kkt < 1e-6);
        assert_hard_constraints(&sol, &fs.input_bounds(), u_prev);
        // the rate limit binds on the way up from 20 L/h
        assert!((sol.u_star[0] - 25.0).abs() < 1e-8);
        assert!(sol.slacks.iter().all(|&s| s < 1e-8), "{:?}", sol.slacks);
    }

    #[test]
    fn options_reject_a_zero_horizon() {
        let o = MpcOptions {
            horizon: 0,
            ..MpcOptions::default()
        };
        assert!(o.validate().is_err());
    }
}
