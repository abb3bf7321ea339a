//! Command-line front end: steady-state sweeps, set points, single runs,
//! PID tuning and controller comparisons.
//!
//! Exit status is 0 on success, 1 for configuration problems and 2 for
//! numerical failures, in which case the failing control step is printed
//! on standard error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use uxcascade::harness::{
    compare, run_case, run_scenario, tune_nominal, write_comparison, write_run, CaseId,
    ControllerKind, Manifest, RunConfig, Scenario,
};
use uxcascade::steady_state::{write_sweep_csv, SteadyStateSolver};
use uxcascade::{CascadeModel, Error, Result};

#[derive(Parser)]
#[command(
    name = "uxcascade",
    version,
    about = "Uranium extraction cascade: steady states and closed-loop control"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON); the reference configuration when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// NMPC prediction horizon in control steps.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Sampling time in hours, for the plant and the controllers.
    #[arg(long, global = true)]
    ts: Option<f64>,
    /// Explicit-Euler substep in hours, for the plant and the NMPC model.
    #[arg(long, global = true)]
    hsub: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Steady-state raffinate and loaded-solvent curves over the feed-flow grid.
    Sweep,
    /// Critical feed flow for a solvent flow.
    Setpoint {
        /// Solvent flow in L/h; the nominal flow when omitted.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Runs one scenario, or repeats the run recorded in a manifest.
    Simulate {
        #[arg(long, value_enum, required_unless_present = "manifest")]
        case: Option<Case>,
        #[arg(long, value_enum, required_unless_present = "manifest")]
        controller: Option<Controller>,
        /// Manifest of an earlier run to repeat with its recorded
        /// configuration; `--config` and the override flags are ignored.
        #[arg(long, conflicts_with_all = ["case", "controller"])]
        manifest: Option<PathBuf>,
    },
    /// Tunes the PID gains on the nominal start-up.
    TunePid,
    /// Runs all three controllers on a case and tabulates the results.
    Compare {
        #[arg(long, value_enum)]
        case: Case,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "C")]
    C,
}

impl From<Case> for CaseId {
    fn from(c: Case) -> Self {
        match c {
            Case::A => CaseId::A,
            Case::B => CaseId::B,
            Case::C => CaseId::C,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Openloop,
    Pid,
    Nmpc,
}

impl From<Controller> for ControllerKind {
    fn from(c: Controller) -> Self {
        match c {
            Controller::Openloop => ControllerKind::OpenLoop,
            Controller::Pid => ControllerKind::Pid,
            Controller::Nmpc => ControllerKind::Nmpc,
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = g.horizon {
        cfg.nmpc.horizon = n;
    }
    if let Some(t) = g.ts {
        cfg.simulation.t_s = t;
        cfg.nmpc.t_s = t;
    }
    if let Some(h) = g.hsub {
        cfg.simulation.h_sub = h;
        cfg.nmpc.h_sub_pred = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let model = CascadeModel::new(&cfg.flowsheet);
    let solver = SteadyStateSolver::new(&model);
    let grid = cfg.sweep.grid();
    for &factor in &cfg.sweep.p_factors {
        let p = factor * cfg.flowsheet.o_e_nominal;
        let points = solver.sweep(&grid, p)?;
        let path = out.join(format!("sweep_p{p}.csv"));
        write_sweep_csv(&points, cfg.sweep.full_state, create(&path)?)?;
        println!("{}: {} points at p = {p} L/h", path.display(), points.len());
    }
    Ok(())
}

fn setpoint(cfg: &RunConfig, p: Option<f64>, out: &Path) -> Result<()> {
    let fs = &cfg.flowsheet;
    let p = p.unwrap_or(fs.o_e_nominal);
    let model = CascadeModel::new(fs);
    let sp =
        SteadyStateSolver::new(&model).critical_setpoint(p, fs.u_min, fs.u_max, cfg.setpoint)?;
    let value = json!({
        "p": sp.p,
        "u_set": sp.u_set,
        "y_set": sp.loaded_u(),
        "raffinate_U": sp.raffinate_u(),
        "margin": cfg.setpoint.margin,
    });
    create_dir(out)?;
    write_json(&out.join("setpoint.json"), &value)?;
    println!(
        "u_set = {:.6} L/h, y_set = {:.6} mol/L at p = {p} L/h",
        sp.u_set,
        sp.loaded_u()
    );
    Ok(())
}

fn simulate(cfg: &RunConfig, case: CaseId, controller: ControllerKind, out: &Path) -> Result<()> {
    let result = run_scenario(&Scenario::case(cfg, case, controller)?)?;
    let manifest = write_run(out, cfg, case, &result)?;
    let m = &result.metrics;
    println!(
        "{}: R = {:.4} mol, settling {}, violation {:.4e}, final error {:.3}%",
        result.name,
        m.extracted_uranium,
        m.settling_time.map_or("never".into(), |t| format!("{t} h")),
        m.violation_integral,
        100.0 * m.final_error
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn rerun(path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(path)?;
    simulate(&manifest.config, manifest.case, manifest.controller, out)
}

fn tune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = CascadeModel::new(&cfg.flowsheet);
    let report = tune_nominal(&model, cfg.simulation.integrator()?, cfg.setpoint, &cfg.pid)?;
    create_dir(out)?;
    let value = serde_json::to_value(&report).expect("tuning report serializes");
    write_json(&out.join("pid_tuning.json"), &value)?;
    let g = report.gains;
    println!(
        "K_P = {}, K_I = {}, K_D = {} (objective {:.6}, initial {:.6}, zero gains {:.6})",
        g.k_p, g.k_i, g.k_d, report.objective, report.initial_objective, report.baseline_objective
    );
    Ok(())
}

fn compare_case(cfg: &RunConfig, case: CaseId, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    if cfg.pid.gains.is_none() {
        let model = CascadeModel::new(&cfg.flowsheet);
        let report = tune_nominal(&model, cfg.simulation.integrator()?, cfg.setpoint, &cfg.pid)?;
        cfg.pid.gains = Some(report.gains);
    }
    let results = run_case(&cfg, case)?;
    for r in &results {
        write_run(out, &cfg, case, r)?;
    }
    let table = compare(&results)?;
    write_comparison(out, case, &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.global.out;
    if let Command::Simulate {
        manifest: Some(path),
        ..
    } = &cli.command
    {
        return rerun(path, out);
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Sweep => sweep(&cfg, out),
        Command::Setpoint { p } => setpoint(&cfg, p, out),
        Command::Simulate {
            case, controller, ..
        } => simulate(
            &cfg,
            case.expect("required by the parser").into(),
            controller.expect("required by the parser").into(),
            out,
        ),
        Command::TunePid => tune(&cfg, out),
        Command::Compare { case } => compare_case(&cfg, case.into(), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_configuration() => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            match &e {
                Error::AtStep { step, source } => {
                    eprintln!("numerical failure at step {step}: {source}")
                }
                _ => eprintln!("numerical failure: {e}"),
            }
            ExitCode::from(2)
        }
    }
}
