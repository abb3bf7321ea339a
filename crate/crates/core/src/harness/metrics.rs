//! Scalar performance measures of a closed-loop run and the comparison
//! table built from them.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ControllerKind, RunResult};
use crate::cascade::Trajectory;
use crate::error::{Error, Result};

/// Relative band around the set point used for settling times.
pub const SETTLING_BAND: f64 = 0.02;

/// Extracted uranium `T_s Σ_{k=0}^{k_f} O_E(k) y(k)` in mol, with `y` the
/// loaded-solvent uranium and `O_E(k)` the scheduled solvent flow at
/// instant `k`.
pub fn extracted_uranium(traj: &Trajectory, k_f: usize) -> Result<f64> {
    if k_f >= traj.states.len() || k_f >= traj.params.len() {
        return Err(Error::invalid(
            "k_f",
            format!(
                "trajectory holds instants 0..={}, asked for {k_f}",
                traj.states.len() - 1
            ),
        ));
    }
    let sum: f64 = (0..=k_f)
        .map(|k| traj.params[k] * traj.states[k].loaded_u())
        .sum();
    Ok(traj.t_s * sum)
}

/// First sampling time after which `y` stays within `band` (relative) of
/// `target`; `None` if the last sample is still outside.
pub fn settling_time(times: &[f64], y: &[f64], target: &[f64], band: f64) -> Option<f64> {
    let outside = |k: usize| (y[k] - target[k]).abs() > band * target[k].abs();
    match (0..y.len()).rev().find(|&k| outside(k)) {
        None => Some(times[0]),
        Some(k) if k + 1 < y.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

/// `∫ max(0, x_17 − tol) dt` by the left rectangle rule on the samples.
pub fn violation_integral(traj: &Trajectory, tol: f64) -> f64 {
    let n = traj.steps();
    traj.t_s
        * traj.states[..n]
            .iter()
            .map(|x| (x.raffinate_u() - tol).max(0.0))
            .sum::<f64>()
}

/// Largest `|u(k) − u(k−1)|`, the first move measured from `u_prev`.
pub fn max_abs_move(inputs: &[f64], u_prev: f64) -> f64 {
    let mut prev = u_prev;
    let mut worst: f64 = 0.0;
    for &u in inputs {
        worst = worst.max((u - prev).abs());
        prev = u;
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Extracted uranium over the whole run, mol.
    pub extracted_uranium: f64,
    /// 2% settling time of the loaded-solvent uranium, h.
    pub settling_time: Option<f64>,
    /// Raffinate violation integral, mol·h/L.
    pub violation_integral: f64,
    pub max_abs_du: f64,
    /// `|y − y_set| / y_set` at the final instant.
    pub final_error: f64,
    /// Largest raffinate uranium over the run, mol/L.
    pub max_raffinate: f64,
}

impl Metrics {
    /// Recomputes every metric from the stored trajectory.
    pub fn of(traj: &Trajectory, y_set: &[f64], u_prev: f64, tol: f64) -> Result<Metrics> {
        let y = traj.loaded_u();
        let last = y.len() - 1;
        Ok(Metrics {
            extracted_uranium: extracted_uranium(traj, traj.steps())?,
            settling_time: settling_time(&traj.times, &y, y_set, SETTLING_BAND),
            violation_integral: violation_integral(traj, tol),
            max_abs_du: max_abs_move(&traj.inputs, u_prev),
            final_error: (y[last] - y_set[last]).abs() / y_set[last],
            max_raffinate: traj.raffinate_u().into_iter().fold(0.0, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub extracted_uranium: f64,
    /// Gain in extracted uranium over the open-loop run of the same table.
    pub gain_vs_openloop_pct: Option<f64>,
    pub settling_time: Option<f64>,
    pub violation_integral: f64,
    pub max_abs_du: f64,
}

/// One row per run, ordered nmpc, pid, open loop.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Comparison {
    pub duration: Option<f64>,
    pub rows: Vec<ComparisonRow>,
}

fn rank(c: ControllerKind) -> u8 {
    match c {
        ControllerKind::Nmpc => 0,
        ControllerKind::Pid => 1,
        ControllerKind::OpenLoop => 2,
    }
}

/// Builds the comparison table. All runs must cover the same duration.
pub fn compare(results: &[RunResult]) -> Result<Comparison> {
    let Some(first) = results.first() else {
        return Ok(Comparison::default());
    };
    if let Some(r) = results.iter().find(|r| r.duration != first.duration) {
        return Err(Error::Mismatch(format!(
            "{} run lasts {} h but {} run lasts {} h",
            r.controller, r.duration, first.controller, first.duration
        )));
    }
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| rank(r.controller));
    let open = sorted
        .iter()
        .find(|r| r.controller == ControllerKind::OpenLoop)
        .map(|r| r.metrics.extracted_uranium);
    let rows = sorted
        .iter()
        .map(|r| {
            let m = &r.metrics;
            ComparisonRow {
                controller: r.controller,
                extracted_uranium: m.extracted_uranium,
                gain_vs_openloop_pct: open.map(|o| 100.0 * (m.extracted_uranium - o) / o),
                settling_time: m.settling_time,
                violation_integral: m.violation_integral,
                max_abs_du: m.max_abs_du,
            }
        })
        .collect();
    Ok(Comparison {
        duration: Some(first.duration),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "controller",
            "R",
            "R_gain_vs_openloop_pct",
            "settling_time_h",
            "violation_integral",
            "max_abs_du",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.controller.to_string(),
                r.extracted_uranium.to_string(),
                opt(r.gain_vs_openloop_pct),
                opt(r.settling_time),
                r.violation_integral.to_string(),
                r.max_abs_du.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>12} {:>10} {:>12} {:>14} {:>10}",
            "controller", "R [mol]", "vs OL [%]", "settle [h]", "violation", "max|du|"
        )?;
        for r in &self.rows {
            let gain = r
                .gain_vs_openloop_pct
                .map(|g| format!("{g:+.2}"))
                .unwrap_or_else(|| "-".into());
            let settle = r
                .settling_time
                .map(|t| format!("{t:.1}"))
                .unwrap_or_else(|| "never".into());
            writeln!(
                f,
                "{:<10} {:>12.4} {:>10} {:>12} {:>14.4e} {:>10.3}",
                r.controller.to_string(),
                r.extracted_uranium,
                gain,
                settle,
                r.violation_integral,
                r.max_abs_du
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{CascadeState, StepOutcome};

    fn constant_trajectory(c: f64, o_e: f64, steps: usize) -> Trajectory {
        let mut x = CascadeState::zeros(16);
        let idx = CascadeState::loaded_index(16);
        x.as_mut_slice()[idx] = c;
        let mut t = Trajectory::start(x.clone(), 0.5);
        for _ in 0..steps {
            let out = StepOutcome {
                state: x.clone(),
                clamped: 0.0,
            };
            t.push(30.0, o_e, o_e, out);
        }
        t
    }

    #[test]
    fn zero_trajectory_extracts_nothing() {
        let t = constant_trajectory(0.0, 100.0, 10);
        assert_eq!(extracted_uranium(&t, 10).unwrap(), 0.0);
    }

    #[test]
    fn constant_trajectory_has_the_closed_form() {
        let t = constant_trajectory(0.4, 100.0, 60);
        let r = extracted_uranium(&t, 60).unwrap();
        assert!((r - 0.5 * 61.0 * 100.0 * 0.4).abs() < 1e-9);
        assert!(extracted_uranium(&t, 61).is_err());
    }

    #[test]
    fn settling_time_is_the_last_band_entry() {
        let times = [0.0, 1.0, 2.0, 3.0, 4.0];
        let target = [1.0; 5];
        assert_eq!(
            settling_time(&times, &[0.5, 0.99, 1.05, 1.01, 1.0], &target, 0.02),
            Some(3.0)
        );
        assert_eq!(settling_time(&times, &[1.0; 5], &target, 0.02), Some(0.0));
        assert_eq!(
            settling_time(&times, &[1.0, 1.0, 1.0, 1.0, 0.9], &target, 0.02),
            None
        );
    }

    #[test]
    fn first_move_counts_from_the_previous_input() {
        assert_eq!(max_abs_move(&[42.0, 40.0, 41.0], 45.0), 3.0);
        assert_eq!(max_abs_move(&[], 45.0), 0.0);
    }

    #[test]
    fn empty_comparison_is_empty() {
        let c = compare(&[]).unwrap();
        assert!(c.rows.is_empty());
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
