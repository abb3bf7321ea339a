//! Cascade parameters, countercurrent routing and per-stage flows.
//!
//! Stages are numbered `1..=n_stages` in configuration files and in the
//! public accessors that take a stage number; internal arrays are 0-based.
//! Fresh solvent enters stage 1 and flows up the cascade, scrub acid enters
//! stage `n_stages` and flows down, and the aqueous feed joins the aqueous
//! stream in the mixer of `feed_stage`. The raffinate leaves stage 1 on the
//! aqueous side and the loaded solvent leaves stage `n_stages`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All physical, chemical and topological parameters of the cascade.
///
/// Flows are in L/h, volumes in L, concentrations in mol/L. `k_u` has units
/// of (L/mol)^4 and `k_h` of (L/mol)^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSheet {
    pub n_stages: usize,
    pub feed_stage: usize,
    #[serde(rename = "A_E")]
    pub a_e: f64,
    #[serde(rename = "O_E_nominal")]
    pub o_e_nominal: f64,
    #[serde(rename = "A_F_nominal")]
    pub a_f_nominal: f64,
    #[serde(rename = "U_feed")]
    pub u_feed: f64,
    #[serde(rename = "H_feed")]
    pub h_feed: f64,
    #[serde(rename = "H_scrub")]
    pub h_scrub: f64,
    #[serde(rename = "U_solvent_in")]
    pub u_solvent_in: f64,
    #[serde(rename = "H_solvent_in")]
    pub h_solvent_in: f64,
    #[serde(rename = "TBP_total")]
    pub tbp_total: f64,
    #[serde(rename = "K_U")]
    pub k_u: f64,
    #[serde(rename = "K_H")]
    pub k_h: f64,
    #[serde(rename = "V_mixer_total")]
    pub v_mixer_total: f64,
    #[serde(rename = "V_settler_aq")]
    pub v_settler_aq: f64,
    #[serde(rename = "V_settler_og")]
    pub v_settler_og: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub du_min: f64,
    pub du_max: f64,
    pub raffinate_tol: f64,
}

/// The reference flowsheet shipped in `configs/reference.json`.
impl Default for FlowSheet {
    fn default() -> Self {
        FlowSheet {
            n_stages: 16,
            feed_stage: 8,
            a_e: 10.0,
            o_e_nominal: 100.0,
            a_f_nominal: 35.0,
            u_feed: 1.0,
            h_feed: 3.0,
            h_scrub: 1.0,
            u_solvent_in: 0.0,
            h_solvent_in: 0.0,
            tbp_total: 1.1,
            k_u: 10.0,
            k_h: 0.2,
            v_mixer_total: 14.0,
            v_settler_aq: 20.0,
            v_settler_og: 20.0,
            u_min: 5.0,
            u_max: 80.0,
            du_min: -5.0,
            du_max: 5.0,
            raffinate_tol: 1e-3,
        }
    }
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

fn nonnegative(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be finite and >= 0, got {v}"),
        ))
    }
}

impl FlowSheet {
    /// Reads and validates a JSON flowsheet.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { source, .. } => Error::Parse {
                what: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fs: FlowSheet = serde_json::from_str(text).map_err(|source| Error::Parse {
            what: "flowsheet".into(),
            source,
        })?;
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 {
            return Err(Error::invalid("n_stages", "at least 2 stages are required"));
        }
        if self.feed_stage < 1 || self.feed_stage >= self.n_stages {
            return Err(Error::invalid(
                "feed_stage",
                format!(
                    "must lie in [1, {}), got {}",
                    self.n_stages, self.feed_stage
                ),
            ));
        }
        positive("A_E", self.a_e)?;
        positive("O_E_nominal", self.o_e_nominal)?;
        positive("A_F_nominal", self.a_f_nominal)?;
        positive("U_feed", self.u_feed)?;
        positive("H_feed", self.h_feed)?;
        positive("H_scrub", self.h_scrub)?;
        nonnegative("U_solvent_in", self.u_solvent_in)?;
        nonnegative("H_solvent_in", self.h_solvent_in)?;
        positive("TBP_total", self.tbp_total)?;
        positive("K_U", self.k_u)?;
        positive("K_H", self.k_h)?;
        positive("V_mixer_total", self.v_mixer_total)?;
        positive("V_settler_aq", self.v_settler_aq)?;
        positive("V_settler_og", self.v_settler_og)?;
        positive("u_min", self.u_min)?;
        positive("u_max", self.u_max)?;
        if self.u_min >= self.u_max {
            return Err(Error::invalid(
                "u_min",
                format!(
                    "u_min ({}) must be below u_max ({})",
                    self.u_min, self.u_max
                ),
            ));
        }
        if !(self.du_min.is_finite() && self.du_min < 0.0) {
            return Err(Error::invalid(
                "du_min",
                format!("must be < 0, got {}", self.du_min),
            ));
        }
        if !(self.du_max.is_finite() && self.du_max > 0.0) {
            return Err(Error::invalid(
                "du_max",
                format!("must be > 0, got {}", self.du_max),
            ));
        }
        positive("raffinate_tol", self.raffinate_tol)?;
        Ok(())
    }

    pub fn input_bounds(&self) -> InputBounds {
        InputBounds {
            u_min: self.u_min,
            u_max: self.u_max,
            du_min: self.du_min,
            du_max: self.du_max,
        }
    }

    /// 0-based index of the feed stage.
    pub fn feed_index(&self) -> usize {
        self.feed_stage - 1
    }

    /// Length of the cascade state vector.
    pub fn state_len(&self) -> usize {
        6 * self.n_stages
    }

    /// Same flowsheet with a different uranium feed concentration. Used for
    /// the uranium-free start-up condition, which bypasses the `U_feed > 0`
    /// validation on purpose.
    pub fn with_uranium_feed(&self, u_feed: f64) -> Self {
        FlowSheet {
            u_feed,
            ..self.clone()
        }
    }

    /// Aqueous throughput of the stage with 0-based index `i`.
    #[inline]
    pub fn aqueous_flow(&self, i: usize, a_f: f64) -> f64 {
        if i < self.feed_stage {
            self.a_e + a_f
        } else {
            self.a_e
        }
    }

    /// Per-stage flows, mixer sub-volumes and routing at the given feed and
    /// solvent flow rates.
    pub fn stage_flows(&self, a_f: f64, o_e: f64) -> StageFlows {
        assert!(a_f >= 0.0, "feed flow must be nonnegative");
        assert!(o_e > 0.0, "solvent flow must be positive");
        let n = self.n_stages;
        let stages = (0..n)
            .map(|i| {
                let aqueous = self.aqueous_flow(i, a_f);
                let organic = o_e;
                let v_aq = self.v_mixer_total * aqueous / (aqueous + organic);
                StageFlow {
                    aqueous,
                    organic,
                    aqueous_in: if i + 1 < n {
                        AqueousSource::Stage(i + 2)
                    } else {
                        AqueousSource::Scrub
                    },
                    organic_in: if i > 0 {
                        OrganicSource::Stage(i)
                    } else {
                        OrganicSource::Solvent
                    },
                    feed_in: i == self.feed_index(),
                    mixer_aq_volume: v_aq,
                    mixer_og_volume: self.v_mixer_total - v_aq,
                }
            })
            .collect();
        StageFlows {
            feed_flow: a_f,
            solvent_flow: o_e,
            stages,
        }
    }
}

/// Box and rate limits on the feed flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub u_min: f64,
    pub u_max: f64,
    pub du_min: f64,
    pub du_max: f64,
}

impl InputBounds {
    /// Box clamp followed by the rate clamp against the previously applied
    /// input. The result always satisfies the rate limits; it satisfies the
    /// box as well whenever `u_prev` does.
    pub fn clamp(&self, u: f64, u_prev: f64) -> f64 {
        let boxed = u.clamp(self.u_min, self.u_max);
        boxed.clamp(u_prev + self.du_min, u_prev + self.du_max)
    }

    /// Greedy forward projection of a whole sequence onto the box and rate
    /// limits, anchored at `u_prev`.
    pub fn project_sequence(&self, u: &mut [f64], u_prev: f64) {
        let mut prev = u_prev;
        for ui in u.iter_mut() {
            let lo = self.u_min.max(prev + self.du_min);
            let hi = self.u_max.min(prev + self.du_max);
            *ui = if lo <= hi {
                ui.clamp(lo, hi)
            } else {
                self.clamp(*ui, prev)
            };
            prev = *ui;
        }
    }

    pub fn contains(&self, u: f64, u_prev: f64, slack: f64) -> bool {
        u >= self.u_min - slack
            && u <= self.u_max + slack
            && u - u_prev >= self.du_min - slack
            && u - u_prev <= self.du_max + slack
    }
}

/// Upstream source of the aqueous stream entering a mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AqueousSource {
    /// Aqueous settler outlet of the given (1-based) stage.
    Stage(usize),
    Scrub,
}

/// Upstream source of the organic stream entering a mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrganicSource {
    /// Organic settler outlet of the given (1-based) stage.
    Stage(usize),
    Solvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFlow {
    /// Aqueous throughput `A_n`, L/h.
    pub aqueous: f64,
    /// Organic throughput `O_n`, L/h.
    pub organic: f64,
    pub aqueous_in: AqueousSource,
    pub organic_in: OrganicSource,
    /// Whether the aqueous feed also enters this mixer.
    pub feed_in: bool,
    /// Aqueous mixer volume `V^M_n`, L.
    pub mixer_aq_volume: f64,
    /// Organic mixer volume `W^M_n`, L.
    pub mixer_og_volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFlows {
    pub feed_flow: f64,
    pub solvent_flow: f64,
    pub stages: Vec<StageFlow>,
}

impl StageFlows {
    /// Flows of the 1-based stage `n`.
    pub fn stage(&self, n: usize) -> &StageFlow {
        &self.stages[n - 1]
    }

    /// Raffinate flow leaving stage 1.
    pub fn raffinate_flow(&self) -> f64 {
        self.stages[0].aqueous
    }

    /// Loaded-solvent flow leaving the last stage.
    pub fn loaded_solvent_flow(&self) -> f64 {
        self.stages[self.stages.len() - 1].organic
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> FlowSheet {
        FlowSheet::default()
    }

    #[test]
    fn no_feed_gives_uniform_aqueous_flow() {
        let fs = reference();
        let flows = fs.stage_flows(0.0, fs.o_e_nominal);
        assert!(flows.stages.iter().all(|s| s.aqueous == fs.a_e));
    }

    #[test]
    fn feed_splits_the_aqueous_flow_at_the_feed_stage() {
        let fs = reference();
        let flows = fs.stage_flows(fs.a_f_nominal, fs.o_e_nominal);
        assert_eq!(fs.feed_stage, 8);
        assert_eq!(flows.stage(8).aqueous, fs.a_e + fs.a_f_nominal);
        assert_eq!(flows.stage(9).aqueous, fs.a_e);
        assert!(flows.stage(8).feed_in);
        assert_eq!(flows.stages.iter().filter(|s| s.feed_in).count(), 1);
    }

    #[test]
    fn mixer_volumes_sum_to_total() {
        let fs = reference();
        let flows = fs.stage_flows(fs.a_f_nominal, fs.o_e_nominal);
        for s in &flows.stages {
            assert!((s.mixer_aq_volume + s.mixer_og_volume - fs.v_mixer_total).abs() < 1e-12);
            let ratio = s.mixer_aq_volume / s.mixer_og_volume;
            assert!((ratio - s.aqueous / s.organic).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_is_a_countercurrent_chain() {
        let fs = reference();
        let flows = fs.stage_flows(30.0, 100.0);
        let n = fs.n_stages;
        assert_eq!(flows.stage(1).organic_in, OrganicSource::Solvent);
        assert_eq!(flows.stage(n).aqueous_in, AqueousSource::Scrub);
        for k in 2..=n {
            assert_eq!(flows.stage(k).organic_in, OrganicSource::Stage(k - 1));
        }
        for k in 1..n {
            assert_eq!(flows.stage(k).aqueous_in, AqueousSource::Stage(k + 1));
        }
        // one organic stream: what enters stage 1 leaves stage n
        assert!(flows.stages.iter().all(|s| s.organic == 100.0));
        assert_eq!(flows.loaded_solvent_flow(), 100.0);
        assert_eq!(flows.raffinate_flow(), fs.a_e + 30.0);
    }

    #[test]
    fn mixer_split_follows_feed_flow() {
        let fs = reference();
        let lo = fs.stage_flows(20.0, 100.0);
        let hi = fs.stage_flows(21.0, 100.0);
        for i in 0..fs.feed_stage {
            assert!(hi.stages[i].mixer_aq_volume > lo.stages[i].mixer_aq_volume);
            assert!(hi.stages[i].mixer_og_volume < lo.stages[i].mixer_og_volume);
        }
        for i in fs.feed_stage..fs.n_stages {
            assert_eq!(hi.stages[i], lo.stages[i]);
        }
    }

    #[test]
    fn validation_rejects_bad_bounds() {
        let mut fs = reference();
        fs.feed_stage = 0;
        assert!(matches!(
            fs.validate(),
            Err(Error::Validation {
                field: "feed_stage",
                ..
            })
        ));

        let mut fs = reference();
        fs.feed_stage = fs.n_stages;
        assert!(fs.validate().is_err());

        let mut fs = reference();
        fs.u_min = 90.0;
        assert!(matches!(
            fs.validate(),
            Err(Error::Validation { field: "u_min", .. })
        ));

        let mut fs = reference();
        fs.du_min = 1.0;
        assert!(matches!(
            fs.validate(),
            Err(Error::Validation {
                field: "du_min",
                ..
            })
        ));

        let mut fs = reference();
        fs.k_u = -1.0;
        assert!(matches!(
            fs.validate(),
            Err(Error::Validation { field: "K_U", .. })
        ));

        let mut fs = reference();
        fs.raffinate_tol = 0.0;
        assert!(fs.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(reference()).unwrap();
        v["k_mass_transfer"] = serde_json::json!(1.0);
        let err = FlowSheet::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn json_field_names_follow_the_documented_schema() {
        let v = serde_json::to_value(reference()).unwrap();
        for key in [
            "A_E",
            "O_E_nominal",
            "TBP_total",
            "K_U",
            "V_settler_og",
            "raffinate_tol",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back = FlowSheet::from_json(&v.to_string()).unwrap();
        assert_eq!(back, reference());
    }
}
