//! The run configuration file.
//!
//! A single JSON object with the sections `flowsheet`, `simulation`,
//! `setpoint`, `cases`, `nmpc`, `pid` and `sweep`. Every section except
//! `flowsheet` may be omitted and falls back to its defaults; unknown keys
//! are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::Integrator;
use crate::error::{Error, Result};
use crate::flowsheet::FlowSheet;
use crate::nmpc::MpcOptions;
use crate::pid::{PidGains, TuneOptions};
use crate::steady_state::SetpointOptions;

/// Plant integration settings shared by every scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationOptions {
    /// Control sampling time, h.
    #[serde(rename = "T_s")]
    pub t_s: f64,
    /// Explicit-Euler substep, h.
    pub h_sub: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            t_s: 0.5,
            h_sub: 1e-3,
        }
    }
}

impl SimulationOptions {
    pub fn integrator(&self) -> Result<Integrator> {
        Integrator::new(self.t_s, self.h_sub)
    }
}

/// A step of the solvent flow to `factor·O_E_nominal` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub t: f64,
    pub factor: f64,
}

/// Durations and disturbance data of the three case studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaseOptions {
    /// Case A: start-up from the uranium-free steady state, h.
    pub nominal_duration: f64,
    /// Case B: start-up followed by solvent-flow steps, h.
    pub disturbance_duration: f64,
    pub disturbances: Vec<Disturbance>,
    /// Case C: start from an over-saturated steady state, h.
    pub recovery_duration: f64,
    /// Initial feed flow of case C relative to the critical feed flow.
    pub oversaturation: f64,
}

impl Default for CaseOptions {
    fn default() -> Self {
        CaseOptions {
            nominal_duration: 30.0,
            disturbance_duration: 120.0,
            disturbances: vec![
                Disturbance {
                    t: 30.0,
                    factor: 1.5,
                },
                Disturbance {
                    t: 60.0,
                    factor: 1.0,
                },
                Disturbance {
                    t: 90.0,
                    factor: 0.5,
                },
            ],
            recovery_duration: 30.0,
            oversaturation: 1.2,
        }
    }
}

/// PID gains to use, or the tuner settings to find them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidOptions {
    /// Fixed gains; when absent the gains are tuned at the start of each
    /// run on the nominal start-up (uranium-free steady state, nominal
    /// solvent flow) and reused for the rest of it.
    pub gains: Option<PidGains>,
    /// Starting point of the first tuner run.
    pub initial_gains: PidGains,
    pub tuning: TuneOptions,
}

/// Feed-flow grid of the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub u_start: f64,
    pub u_end: f64,
    pub points: usize,
    /// Solvent flows as multiples of `O_E_nominal`.
    pub p_factors: Vec<f64>,
    /// Append the full steady state to every row.
    pub full_state: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            u_start: 10.0,
            u_end: 80.0,
            points: 71,
            p_factors: vec![0.5, 1.0, 1.5],
            full_state: false,
        }
    }
}

impl SweepOptions {
    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.u_start];
        }
        let du = (self.u_end - self.u_start) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| self.u_start + du * i as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub flowsheet: FlowSheet,
    #[serde(default)]
    pub simulation: SimulationOptions,
    #[serde(default)]
    pub setpoint: SetpointOptions,
    #[serde(default)]
    pub cases: CaseOptions,
    #[serde(default)]
    pub nmpc: MpcOptions,
    #[serde(default)]
    pub pid: PidOptions,
    #[serde(default)]
    pub sweep: SweepOptions,
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Parse {
            what: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| Error::Parse {
            what: "run configuration".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.flowsheet.validate()?;
        self.simulation.integrator()?;
        self.nmpc.validate()?;
        if self.nmpc.t_s != self.simulation.t_s {
            return Err(Error::invalid(
                "T_s",
                format!(
                    "controller sampling time {} differs from the plant's {}",
                    self.nmpc.t_s, self.simulation.t_s
                ),
            ));
        }
        let m = self.setpoint.margin;
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::invalid(
                "margin",
                format!("must lie in (0, 1], got {m}"),
            ));
        }
        positive("rel_width", self.setpoint.rel_width)?;

        let c = &self.cases;
        positive("nominal_duration", c.nominal_duration)?;
        positive("disturbance_duration", c.disturbance_duration)?;
        positive("recovery_duration", c.recovery_duration)?;
        positive("oversaturation", c.oversaturation)?;
        let mut last = 0.0;
        for d in &c.disturbances {
            if !(d.t > last && d.t < c.disturbance_duration) {
                return Err(Error::invalid(
                    "disturbances",
                    "times must increase strictly and lie inside (0, disturbance_duration)",
                ));
            }
            positive("factor", d.factor)?;
            last = d.t;
        }

        if let Some(g) = &self.pid.gains {
            g.validate()?;
        }
        self.pid.initial_gains.validate()?;
        self.pid.tuning.validate()?;

        let s = &self.sweep;
        if s.points == 0 || !(s.u_start > 0.0 && s.u_end >= s.u_start && s.u_end.is_finite()) {
            return Err(Error::invalid(
                "sweep",
                "grid needs points >= 1 and 0 < u_start <= u_end",
            ));
        }
        for &f in &s.p_factors {
            positive("p_factors", f)?;
        }
        Ok(())
    }
}
