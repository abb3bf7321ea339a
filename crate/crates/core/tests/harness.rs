use uxcascade::harness::{
    compare, extracted_uranium, run_scenario, write_run, CaseId, ControllerKind, Manifest,
    RunConfig, Scenario,
};
use uxcascade::Error;

fn reference_config() -> RunConfig {
    RunConfig::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/reference.json"
    ))
    .unwrap()
}

#[test]
fn reference_config_is_the_default() {
    assert_eq!(reference_config(), RunConfig::default());
}

#[test]
fn every_solvent_step_recomputes_the_set_point() {
    let cfg = RunConfig::default();
    let sc = Scenario::case(&cfg, CaseId::B, ControllerKind::OpenLoop).unwrap();
    let r = run_scenario(&sc).unwrap();
    assert_eq!(r.recomputations, cfg.cases.disturbances.len());
    assert_eq!(r.setpoints.len(), cfg.cases.disturbances.len() + 1);
    for (k, &p) in r
        .trajectory
        .params
        .iter()
        .enumerate()
        .take(sc.steps().unwrap())
    {
        let active = &r.setpoints[r.active_setpoint[k]];
        assert_eq!(active.p, p, "step {k}");
        assert_eq!(p, sc.schedule.at_step(k));
    }
    // the target follows the set point in force at every instant
    for (k, &y) in r.y_set.iter().enumerate().take(sc.steps().unwrap()) {
        assert_eq!(y, r.setpoints[r.active_setpoint[k]].y_set, "instant {k}");
    }
}

#[test]
fn extracted_uranium_is_recoverable_from_the_written_files() {
    let cfg = RunConfig::default();
    let r =
        run_scenario(&Scenario::case(&cfg, CaseId::A, ControllerKind::OpenLoop).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(write_run(dir.path(), &cfg, CaseId::A, &r).unwrap()).unwrap();

    let mut rd = csv::Reader::from_path(dir.path().join(&manifest.trajectory)).unwrap();
    let header = rd.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (p_col, y_col) = (col("p"), col("U_og_D_16"));
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let sum: f64 = rows
        .iter()
        .map(|row| row[p_col].parse::<f64>().unwrap() * row[y_col].parse::<f64>().unwrap())
        .sum();
    let from_file = cfg.simulation.t_s * sum;
    let online = extracted_uranium(&r.trajectory, rows.len() - 1).unwrap();
    assert!((from_file - online).abs() <= 1e-12 * online);
    assert_eq!(manifest.metrics.extracted_uranium, online);
}

#[test]
fn comparing_runs_of_different_length_fails() {
    let cfg = RunConfig::default();
    let mut short = Scenario::case(&cfg, CaseId::A, ControllerKind::OpenLoop).unwrap();
    short.duration = 1.0;
    let mut long = short.clone();
    long.duration = 2.0;
    long.controller = ControllerKind::Pid;
    long.pid.gains = Some(Default::default());
    let runs = [run_scenario(&short).unwrap(), run_scenario(&long).unwrap()];
    assert!(matches!(compare(&runs), Err(Error::Mismatch(_))));

    let table = compare(&runs[..1]).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].gain_vs_openloop_pct, Some(0.0));
}
