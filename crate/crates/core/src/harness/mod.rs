//! Closed-loop case studies: the plant, one controller, a solvent-flow
//! schedule and the bookkeeping needed to compare controllers.
//!
//! Each run integrates the cascade at the control rate. Before every
//! control step the scheduled solvent flow is read; when it differs from
//! the flow of the active set point, a new set point is computed for it
//! and takes effect at that step. Every controller output passes through
//! the box and rate clamp before it reaches the plant.

pub mod config;
pub mod metrics;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, CascadeState, Inputs, Integrator, Trajectory};
use crate::error::{Error, Result};
use crate::flowsheet::FlowSheet;
use crate::nmpc::{MpcOptions, NmpcController, SolveStatus, SolveSummary};
use crate::pid::{tune_pid, PidController, PidGains, TuningProblem, TuningReport};
use crate::steady_state::{SetPoint, SetpointOptions, SteadyStateSolver};

pub use config::{
    CaseOptions, Disturbance, PidOptions, RunConfig, SimulationOptions, SweepOptions,
};
pub use metrics::{compare, extracted_uranium, Comparison, ComparisonRow, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    /// Start-up from the uranium-free steady state at constant solvent flow.
    A,
    /// Start-up followed by steps of the solvent flow.
    B,
    /// Start from an over-saturated steady state.
    C,
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseId::A => "A",
            CaseId::B => "B",
            CaseId::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// Stepwise-constant `u_set(p)`.
    OpenLoop,
    Pid,
    Nmpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::Nmpc,
        ControllerKind::Pid,
        ControllerKind::OpenLoop,
    ];
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ControllerKind::OpenLoop => "openloop",
            ControllerKind::Pid => "pid",
            ControllerKind::Nmpc => "nmpc",
        };
        f.write_str(s)
    }
}

/// How the initial plant state is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRule {
    /// Steady state without uranium in the feed, at the initial set point;
    /// uranium enters with the feed from `t = 0` on.
    UraniumFree,
    /// Steady state at `factor` times the critical feed flow of the
    /// initial solvent flow, which is also the previous input.
    Oversaturated { factor: f64 },
    /// Steady state at a given feed and solvent flow.
    Steady { u: f64, p: f64 },
    /// Given state and previous input.
    Explicit { state: Vec<f64>, u_prev: f64 },
}

/// Piecewise-constant solvent flow, changing only at control instants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSchedule {
    /// `(step, p)` pairs; the first step is 0 and steps increase strictly.
    changes: Vec<(usize, f64)>,
}

impl PSchedule {
    pub fn constant(p: f64) -> Self {
        PSchedule {
            changes: vec![(0, p)],
        }
    }

    /// Schedule from `(time, p)` pairs; every time must be a multiple of
    /// `t_s` and the first must be 0.
    pub fn from_times(points: &[(f64, f64)], t_s: f64) -> Result<Self> {
        let mut changes = Vec::with_capacity(points.len());
        for &(t, p) in points {
            let k = (t / t_s).round();
            if !(t >= 0.0 && (t / t_s - k).abs() < 1e-9 * (1.0 + k)) {
                return Err(Error::invalid(
                    "disturbances",
                    format!("time {t} h is not a multiple of T_s = {t_s} h"),
                ));
            }
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid(
                    "disturbances",
                    format!("solvent flow must be > 0, got {p}"),
                ));
            }
            let k = k as usize;
            if changes.last().is_some_and(|&(last, _)| k <= last) {
                return Err(Error::invalid(
                    "disturbances",
                    "change times must increase strictly",
                ));
            }
            changes.push((k, p));
        }
        if changes.first().map(|c| c.0) != Some(0) {
            return Err(Error::invalid(
                "disturbances",
                "the schedule must start at t = 0",
            ));
        }
        Ok(PSchedule { changes })
    }

    pub fn at_step(&self, k: usize) -> f64 {
        self.changes
            .iter()
            .take_while(|&&(s, _)| s <= k)
            .last()
            .expect("schedule starts at step 0")
            .1
    }

    pub fn changes(&self) -> &[(usize, f64)] {
        &self.changes
    }
}

/// Everything one closed-loop run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub flowsheet: FlowSheet,
    pub initial: InitialRule,
    pub controller: ControllerKind,
    pub schedule: PSchedule,
    /// Simulated time, h; a whole number of sampling intervals.
    pub duration: f64,
    pub integrator: Integrator,
    pub setpoint: SetpointOptions,
    pub nmpc: MpcOptions,
    pub pid: PidOptions,
}

impl Scenario {
    /// One of the three case studies as configured in `cfg`.
    pub fn case(cfg: &RunConfig, case: CaseId, controller: ControllerKind) -> Result<Self> {
        cfg.validate()?;
        let fs = &cfg.flowsheet;
        let t_s = cfg.simulation.t_s;
        let p0 = fs.o_e_nominal;
        let c = &cfg.cases;
        let (initial, schedule, duration) = match case {
            CaseId::A => (
                InitialRule::UraniumFree,
                PSchedule::constant(p0),
                c.nominal_duration,
            ),
            CaseId::B => {
                let mut pts = vec![(0.0, p0)];
                pts.extend(c.disturbances.iter().map(|d| (d.t, d.factor * p0)));
                (
                    InitialRule::UraniumFree,
                    PSchedule::from_times(&pts, t_s)?,
                    c.disturbance_duration,
                )
            }
            CaseId::C => (
                InitialRule::Oversaturated {
                    factor: c.oversaturation,
                },
                PSchedule::constant(p0),
                c.recovery_duration,
            ),
        };
        let sc = Scenario {
            name: format!("case-{case}-{controller}"),
            flowsheet: fs.clone(),
            initial,
            controller,
            schedule,
            duration,
            integrator: cfg.simulation.integrator()?,
            setpoint: cfg.setpoint,
            nmpc: cfg.nmpc.clone(),
            pid: cfg.pid.clone(),
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn steps(&self) -> Result<usize> {
        let n = self.duration / self.integrator.t_s;
        let k = n.round();
        if !(k >= 1.0 && (n - k).abs() < 1e-9 * k) {
            return Err(Error::invalid(
                "duration",
                format!(
                    "{} h is not a whole number of {} h intervals",
                    self.duration, self.integrator.t_s
                ),
            ));
        }
        Ok(k as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.flowsheet.validate()?;
        self.integrator.substeps()?;
        let n = self.steps()?;
        if self.schedule.changes().iter().any(|&(k, _)| k >= n) {
            return Err(Error::invalid(
                "disturbances",
                "schedule changes must lie inside the run",
            ));
        }
        if self.controller == ControllerKind::Nmpc {
            self.nmpc.validate()?;
            if self.nmpc.t_s != self.integrator.t_s {
                return Err(Error::invalid(
                    "T_s",
                    "controller and plant sampling times differ",
                ));
            }
        }
        if let InitialRule::Explicit { state, .. } = &self.initial {
            if state.len() != self.flowsheet.state_len() {
                return Err(Error::invalid(
                    "initial",
                    format!("state must have {} entries", self.flowsheet.state_len()),
                ));
            }
        }
        Ok(())
    }
}

/// A set point taking effect at a control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetpointEvent {
    pub step: usize,
    pub p: f64,
    pub u_set: f64,
    /// Loaded-solvent uranium at the set point, mol/L.
    pub y_set: f64,
}

/// Aggregated NMPC diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: usize,
    pub optimal: usize,
    pub max_iterations: usize,
    pub mean_iterations: f64,
    pub max_kkt: f64,
    pub max_slack: f64,
}

impl SolverStats {
    fn of(s: &[SolveSummary]) -> Self {
        SolverStats {
            solves: s.len(),
            optimal: s
                .iter()
                .filter(|x| x.status == SolveStatus::Optimal)
                .count(),
            max_iterations: s.iter().map(|x| x.iterations).max().unwrap_or(0),
            mean_iterations: s.iter().map(|x| x.iterations as f64).sum::<f64>()
                / s.len().max(1) as f64,
            max_kkt: s.iter().map(|x| x.kkt).fold(0.0, f64::max),
            max_slack: s.iter().map(|x| x.max_slack).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub controller: ControllerKind,
    pub duration: f64,
    pub trajectory: Trajectory,
    /// Input applied before `t = 0`.
    pub u_prev0: f64,
    /// Set points in the order they took effect.
    pub setpoints: Vec<SetpointEvent>,
    /// Loaded-solvent target active at every sampling instant.
    pub y_set: Vec<f64>,
    /// Set point active at every control step.
    pub active_setpoint: Vec<usize>,
    /// Set-point computations after the initial one.
    pub recomputations: usize,
    pub metrics: Metrics,
    pub pid_gains: Option<PidGains>,
    pub tuning: Option<TuningReport>,
    /// Per-step NMPC diagnostics.
    pub solves: Vec<SolveSummary>,
    pub solver: Option<SolverStats>,
    /// Wall time of the whole run, s.
    pub wall_seconds: f64,
    /// Wall time spent in NMPC solves, s.
    pub solve_seconds: f64,
}

impl RunResult {
    /// Extracted uranium up to instant `k_f`.
    pub fn extracted_uranium(&self, k_f: usize) -> Result<f64> {
        extracted_uranium(&self.trajectory, k_f)
    }

    pub fn write_trajectory_csv<W: std::io::Write>(
        &self,
        model: &CascadeModel,
        out: W,
    ) -> Result<()> {
        self.trajectory.write_csv(model, out)
    }
}

fn setpoint_for(solver: &SteadyStateSolver<'_>, p: f64, opts: SetpointOptions) -> Result<SetPoint> {
    let fs = solver.model().flowsheet();
    solver.critical_setpoint(p, fs.u_min, fs.u_max, opts)
}

/// Initial state and previous input.
fn initial_condition(
    sc: &Scenario,
    solver: &SteadyStateSolver<'_>,
    sp0: &SetPoint,
) -> Result<(CascadeState, f64)> {
    let fs = &sc.flowsheet;
    match &sc.initial {
        InitialRule::UraniumFree => {
            let clean = CascadeModel::new(&fs.with_uranium_feed(0.0));
            let x = SteadyStateSolver::new(&clean)
                .solve(sp0.u_set, sp0.p, None)?
                .x_ss;
            Ok((x, sp0.u_set))
        }
        InitialRule::Oversaturated { factor } => {
            let critical = sp0.u_set / sc.setpoint.margin;
            let u = (factor * critical).clamp(fs.u_min, fs.u_max);
            Ok((solver.solve(u, sp0.p, Some(&sp0.x_set))?.x_ss, u))
        }
        InitialRule::Steady { u, p } => Ok((solver.solve(*u, *p, None)?.x_ss, *u)),
        InitialRule::Explicit { state, u_prev } => {
            Ok((CascadeState::from_vec(fs.n_stages, state.clone())?, *u_prev))
        }
    }
}

/// Tunes PID gains on the start-up from the uranium-free steady state at
/// the nominal solvent flow.
pub fn tune_nominal(
    model: &CascadeModel,
    integrator: Integrator,
    setpoint: SetpointOptions,
    pid: &PidOptions,
) -> Result<TuningReport> {
    let fs = model.flowsheet();
    let solver = SteadyStateSolver::new(model);
    let sp = setpoint_for(&solver, fs.o_e_nominal, setpoint)?;
    let clean = CascadeModel::new(&fs.with_uranium_feed(0.0));
    let x0 = SteadyStateSolver::new(&clean)
        .solve(sp.u_set, sp.p, None)?
        .x_ss;
    let problem = TuningProblem {
        model,
        x0,
        u_prev: sp.u_set,
        p_seq: vec![sp.p; pid.tuning.n_pid],
        setpoint: sp,
        integrator,
    };
    tune_pid(&problem, &pid.tuning, pid.initial_gains)
}

enum Control {
    OpenLoop,
    Pid(PidController),
    Nmpc(Box<NmpcController>),
}

/// Runs one scenario. Errors carry the control step they occurred at.
pub fn run_scenario(sc: &Scenario) -> Result<RunResult> {
    sc.validate()?;
    let started = Instant::now();
    let n = sc.steps()?;
    let fs = &sc.flowsheet;
    let model = CascadeModel::new(fs);
    let solver = SteadyStateSolver::new(&model);
    let bounds = fs.input_bounds();
    let t_s = sc.integrator.t_s;

    let p0 = sc.schedule.at_step(0);
    let mut sp = setpoint_for(&solver, p0, sc.setpoint)?;
    let (x0, u_prev0) = initial_condition(sc, &solver, &sp)?;
    let mut setpoints = vec![SetpointEvent {
        step: 0,
        p: p0,
        u_set: sp.u_set,
        y_set: sp.loaded_u(),
    }];

    let mut tuning = None;
    let mut pid_gains = None;
    let mut control = match sc.controller {
        ControllerKind::OpenLoop => Control::OpenLoop,
        ControllerKind::Pid => {
            let gains = match sc.pid.gains {
                Some(g) => g,
                None => {
                    let report = tune_nominal(&model, sc.integrator, sc.setpoint, &sc.pid)?;
                    let g = report.gains;
                    tuning = Some(report);
                    g
                }
            };
            pid_gains = Some(gains);
            Control::Pid(PidController::new(gains, bounds, u_prev0, t_s)?)
        }
        ControllerKind::Nmpc => Control::Nmpc(Box::new(NmpcController::new(fs, sc.nmpc.clone())?)),
    };

    let mut traj = Trajectory::start(x0, t_s);
    let mut y_set = Vec::with_capacity(n + 1);
    let mut active = Vec::with_capacity(n);
    let mut solves = Vec::new();
    let mut solve_seconds = 0.0;
    let mut u_prev = u_prev0;
    for k in 0..n {
        let p = sc.schedule.at_step(k);
        if p != sp.p {
            sp = setpoint_for(&solver, p, sc.setpoint).map_err(|e| e.at_step(k))?;
            setpoints.push(SetpointEvent {
                step: k,
                p,
                u_set: sp.u_set,
                y_set: sp.loaded_u(),
            });
        }
        active.push(setpoints.len() - 1);
        y_set.push(sp.loaded_u());

        let x = traj.last_state().clone();
        let u = match &mut control {
            Control::OpenLoop => bounds.clamp(sp.u_set, u_prev),
            Control::Pid(pid) => pid.step(x.loaded_u(), &sp),
            Control::Nmpc(mpc) => {
                let t0 = Instant::now();
                let (u, sol) = mpc.step(&x, u_prev, &sp, p).map_err(|e| e.at_step(k))?;
                solve_seconds += t0.elapsed().as_secs_f64();
                solves.push(SolveSummary::from(&sol));
                u
            }
        };
        let out = model
            .step(&x, Inputs::new(u, p), sc.integrator)
            .map_err(|e| e.at_step(k))?;
        traj.push(u, p, sc.schedule.at_step(k + 1), out);
        u_prev = u;
    }
    y_set.push(sp.loaded_u());

    let metrics = Metrics::of(&traj, &y_set, u_prev0, fs.raffinate_tol)?;
    let solver_stats = (!solves.is_empty()).then(|| SolverStats::of(&solves));
    Ok(RunResult {
        name: sc.name.clone(),
        controller: sc.controller,
        duration: sc.duration,
        trajectory: traj,
        u_prev0,
        recomputations: setpoints.len() - 1,
        setpoints,
        y_set,
        active_setpoint: active,
        metrics,
        pid_gains,
        tuning,
        solves,
        solver: solver_stats,
        wall_seconds: started.elapsed().as_secs_f64(),
        solve_seconds,
    })
}

/// Runs the three controllers on one case, concurrently, and returns the
/// results ordered nmpc, pid, open loop.
pub fn run_case(cfg: &RunConfig, case: CaseId) -> Result<Vec<RunResult>> {
    let scenarios = ControllerKind::ALL
        .iter()
        .map(|&c| Scenario::case(cfg, case, c))
        .collect::<Result<Vec<_>>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sc| s.spawn(move || run_scenario(sc)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    })
}

/// Everything needed to repeat a run, plus its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub case: CaseId,
    pub controller: ControllerKind,
    /// Resolved configuration, including the PID gains actually used.
    pub config: RunConfig,
    pub setpoints: Vec<SetpointEvent>,
    pub recomputations: usize,
    pub metrics: Metrics,
    pub solver: Option<SolverStats>,
    pub tuning: Option<TuningReport>,
    /// Trajectory file name, relative to the manifest.
    pub trajectory: String,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Parse {
            what: path.display().to_string(),
            source,
        })?;
        m.config.validate()?;
        Ok(m)
    }

    /// The scenario this manifest records, with the recorded PID gains.
    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::case(&self.config, self.case, self.controller)
    }
}

pub fn trajectory_file(case: CaseId, controller: ControllerKind) -> String {
    format!("trajectory_{case}_{controller}.csv")
}

pub fn manifest_file(case: CaseId, controller: ControllerKind) -> String {
    format!("manifest_{case}_{controller}.json")
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the trajectory CSV and the run manifest of `result` into `dir`
/// and returns the manifest path.
pub fn write_run(dir: &Path, cfg: &RunConfig, case: CaseId, result: &RunResult) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let traj_name = trajectory_file(case, result.controller);
    let model = CascadeModel::new(&cfg.flowsheet);
    result.write_trajectory_csv(&model, create(&dir.join(&traj_name))?)?;

    let mut config = cfg.clone();
    if let Some(g) = result.pid_gains {
        config.pid.gains = Some(g);
    }
    let manifest = Manifest {
        case,
        controller: result.controller,
        config,
        setpoints: result.setpoints.clone(),
        recomputations: result.recomputations,
        metrics: result.metrics,
        solver: result.solver.clone(),
        tuning: result.tuning.clone(),
        trajectory: traj_name,
    };
    let path = dir.join(manifest_file(case, result.controller));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&path, &text)?;
    Ok(path)
}

/// Writes `comparison_<case>.csv` and `comparison_<case>.txt` into `dir`.
pub fn write_comparison(dir: &Path, case: CaseId, table: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    table.write_csv(create(&dir.join(format!("comparison_{case}.csv")))?)?;
    write_text(
        &dir.join(format!("comparison_{case}.txt")),
        &table.to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_holds_values_between_changes() {
        let s = PSchedule::from_times(&[(0.0, 100.0), (30.0, 150.0), (60.0, 50.0)], 0.5).unwrap();
        assert_eq!(s.at_step(0), 100.0);
        assert_eq!(s.at_step(59), 100.0);
        assert_eq!(s.at_step(60), 150.0);
        assert_eq!(s.at_step(500), 50.0);
    }

    #[test]
    fn schedule_rejects_off_grid_and_unordered_times() {
        assert!(PSchedule::from_times(&[(0.0, 100.0), (30.2, 150.0)], 0.5).is_err());
        assert!(PSchedule::from_times(&[(0.0, 100.0), (30.0, 150.0), (30.0, 50.0)], 0.5).is_err());
        assert!(PSchedule::from_times(&[(1.0, 100.0)], 0.5).is_err());
    }

    #[test]
    fn case_b_schedule_follows_the_disturbances() {
        let sc =
            Scenario::case(&RunConfig::default(), CaseId::B, ControllerKind::OpenLoop).unwrap();
        let ch: Vec<_> = sc.schedule.changes().to_vec();
        assert_eq!(ch, vec![(0, 100.0), (60, 150.0), (120, 100.0), (180, 50.0)]);
        assert_eq!(sc.steps().unwrap(), 240);
    }

    #[test]
    fn fractional_durations_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.cases.nominal_duration = 30.2;
        assert!(Scenario::case(&cfg, CaseId::A, ControllerKind::OpenLoop).is_err());
    }

    #[test]
    fn open_loop_ramps_down_from_an_oversaturated_start() {
        let mut cfg = RunConfig::default();
        cfg.cases.recovery_duration = 3.0;
        let sc = Scenario::case(&cfg, CaseId::C, ControllerKind::OpenLoop).unwrap();
        let r = run_scenario(&sc).unwrap();
        let u_set = r.setpoints[0].u_set;
        assert!(r.u_prev0 > u_set + 5.0);
        assert_eq!(r.trajectory.inputs[0], r.u_prev0 - 5.0);
        assert_eq!(*r.trajectory.inputs.last().unwrap(), u_set);
        assert!(r.metrics.max_abs_du <= 5.0 + 1e-12);
    }
}
