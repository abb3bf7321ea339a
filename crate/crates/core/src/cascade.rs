//! Reduced mass-balance dynamics of the mixer-settler cascade.
//!
//! Each stage carries six states: aqueous uranium in the mixer, aqueous and
//! organic uranium in the settler, and the same three for nitric acid. The
//! organic mixer concentrations are not states; they sit at their
//! equilibrium value, so the mixer balance is the sum of the aqueous and
//! organic mixer balances with the organic accumulation dropped:
//!
//! ```text
//! V^M_n d[S]aq_M/dt = A_in [S]aq_in + O_in [S]og_in − A_n [S]aq_M − O_n [S]og_M*
//! V^D_n d[S]aq_D/dt = A_n ([S]aq_M − [S]aq_D)
//! W^D_n d[S]og_D/dt = O_n ([S]og_M* − [S]og_D)
//! ```
//!
//! The state vector is laid out block by block, each block holding one
//! quantity for stages `1..=n`:
//!
//! | block | quantity      |
//! |-------|---------------|
//! | 1     | `[U]aq_M`     |
//! | 2     | `[U]aq_D`     |
//! | 3     | `[U]og_D`     |
//! | 4     | `[H]aq_M`     |
//! | 5     | `[H]aq_D`     |
//! | 6     | `[H]og_D`     |
//!
//! With 16 stages, entry 17 (1-based) is the raffinate uranium and entry 48
//! is the uranium in the loaded solvent.

use std::io::Write;

use crate::equilibrium::{AqueousPoint, Extractant};
use crate::error::{Error, Result};
use crate::flowsheet::FlowSheet;

/// One of the six per-stage quantities of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    UAqMixer = 0,
    UAqSettler = 1,
    UOgSettler = 2,
    HAqMixer = 3,
    HAqSettler = 4,
    HOgSettler = 5,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::UAqMixer,
        Block::UAqSettler,
        Block::UOgSettler,
        Block::HAqMixer,
        Block::HAqSettler,
        Block::HOgSettler,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Block::UAqMixer => "U_aq_M",
            Block::UAqSettler => "U_aq_D",
            Block::UOgSettler => "U_og_D",
            Block::HAqMixer => "H_aq_M",
            Block::HAqSettler => "H_aq_D",
            Block::HOgSettler => "H_og_D",
        }
    }
}

/// Flat vector of the `6 · n_stages` concentrations, mol/L.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    n_stages: usize,
    values: Vec<f64>,
}

impl CascadeState {
    pub fn zeros(n_stages: usize) -> Self {
        CascadeState {
            n_stages,
            values: vec![0.0; 6 * n_stages],
        }
    }

    pub fn from_vec(n_stages: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 6 * n_stages {
            return Err(Error::invalid(
                "state",
                format!("expected {} entries, got {}", 6 * n_stages, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(
                "state",
                format!("entries must be finite and >= 0, got {v}"),
            ));
        }
        Ok(CascadeState { n_stages, values })
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Flat 0-based index of `block` at the 1-based `stage`.
    #[inline]
    pub fn index(&self, block: Block, stage: usize) -> usize {
        debug_assert!((1..=self.n_stages).contains(&stage));
        block as usize * self.n_stages + stage - 1
    }

    pub fn get(&self, block: Block, stage: usize) -> f64 {
        self.values[self.index(block, stage)]
    }

    pub fn block(&self, block: Block) -> &[f64] {
        let off = block as usize * self.n_stages;
        &self.values[off..off + self.n_stages]
    }

    /// 0-based position of the raffinate uranium entry (`x_17` for 16 stages).
    pub fn raffinate_index(n_stages: usize) -> usize {
        n_stages
    }

    /// 0-based position of the loaded-solvent uranium entry (`x_48` for 16 stages).
    pub fn loaded_index(n_stages: usize) -> usize {
        3 * n_stages - 1
    }

    /// Raffinate uranium `[U]aq_D,1`.
    pub fn raffinate_u(&self) -> f64 {
        self.values[Self::raffinate_index(self.n_stages)]
    }

    /// Loaded-solvent uranium `[U]og_D,n`.
    pub fn loaded_u(&self) -> f64 {
        self.values[Self::loaded_index(self.n_stages)]
    }

    pub fn max_abs_diff(&self, other: &CascadeState) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Manipulated feed flow `u = A_F` and measured solvent flow `p = O_E`, L/h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inputs {
    pub u: f64,
    pub p: f64,
}

impl Inputs {
    pub fn new(u: f64, p: f64) -> Self {
        debug_assert!(u >= 0.0 && p > 0.0);
        Inputs { u, p }
    }
}

/// Explicit-Euler settings: control interval `t_s` split into substeps of `h_sub`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub t_s: f64,
    pub h_sub: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            t_s: 0.5,
            h_sub: 1e-3,
        }
    }
}

impl Integrator {
    pub fn new(t_s: f64, h_sub: f64) -> Result<Self> {
        let it = Integrator { t_s, h_sub };
        it.substeps()?;
        Ok(it)
    }

    /// Number of substeps per control interval; `t_s / h_sub` must be a
    /// positive integer.
    pub fn substeps(&self) -> Result<usize> {
        if !(self.t_s > 0.0 && self.h_sub > 0.0 && self.t_s.is_finite()) {
            return Err(Error::invalid("h_sub", "T_s and h_sub must be positive"));
        }
        let ratio = self.t_s / self.h_sub;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
            return Err(Error::invalid(
                "h_sub",
                format!("T_s / h_sub = {ratio} is not a positive integer"),
            ));
        }
        Ok(n as usize)
    }
}

/// States above this magnitude are treated as numerical blow-up.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// In-place Euler update `x += h·dx` with negative entries reset to zero.
/// `on_clamp` receives the index of every reset entry. Returns the clamped
/// mass, or a divergence error tagged with `substep`.
pub(crate) fn euler_update(
    x: &mut [f64],
    dx: &[f64],
    h: f64,
    substep: usize,
    mut on_clamp: impl FnMut(usize),
) -> Result<f64> {
    let mut clamped = 0.0;
    let mut worst: f64 = 0.0;
    for (i, (xi, di)) in x.iter_mut().zip(dx).enumerate() {
        *xi += h * di;
        if *xi < 0.0 {
            clamped -= *xi;
            *xi = 0.0;
            on_clamp(i);
        }
        worst = worst.max(xi.abs());
        if xi.is_nan() {
            worst = f64::INFINITY;
        }
    }
    if worst <= DIVERGENCE_GUARD {
        Ok(clamped)
    } else {
        Err(Error::Divergence {
            substep,
            magnitude: worst,
        })
    }
}

/// Sparse Jacobian of the right-hand side: `(row, col, value)` triplets for
/// `∂f/∂x` and a dense column `∂f/∂u`.
#[derive(Debug, Clone, Default)]
pub struct SparseJacobian {
    pub entries: Vec<(u32, u32, f64)>,
    pub du: Vec<f64>,
}

impl SparseJacobian {
    pub fn to_dense(&self, n: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for &(r, c, v) in &self.entries {
            m[(r as usize, c as usize)] += v;
        }
        m
    }
}

/// The reduced cascade model bound to one flowsheet.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    fs: FlowSheet,
    ext: Extractant,
}

/// Result of one control interval.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: CascadeState,
    /// Sum of the magnitudes of negative entries reset to zero.
    pub clamped: f64,
}

/// Uranium and acid holdups of the cascade, mol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inventory {
    pub uranium: f64,
    pub acid: f64,
}

/// Instantaneous boundary flows of uranium and acid, mol/h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFlux {
    pub uranium_in: f64,
    pub uranium_out: f64,
    pub acid_in: f64,
    pub acid_out: f64,
}

impl CascadeModel {
    pub fn new(fs: &FlowSheet) -> Self {
        CascadeModel {
            fs: fs.clone(),
            ext: Extractant {
                k_u: fs.k_u,
                k_h: fs.k_h,
                tbp_total: fs.tbp_total,
            },
        }
    }

    pub fn flowsheet(&self) -> &FlowSheet {
        &self.fs
    }

    pub fn extractant(&self) -> &Extractant {
        &self.ext
    }

    pub fn state_len(&self) -> usize {
        self.fs.state_len()
    }

    #[inline]
    fn mixer_aq_volume(&self, aqueous: f64, organic: f64) -> f64 {
        self.fs.v_mixer_total * aqueous / (aqueous + organic)
    }

    /// Time derivative `f_c(x, u, p)` written into `out`, mol/L/h.
    pub fn rhs_into(&self, x: &[f64], inp: Inputs, out: &mut [f64]) {
        self.eval(x, inp, out, None);
    }

    pub fn rhs(&self, x: &CascadeState, inp: Inputs) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.rhs_into(x.as_slice(), inp, &mut out);
        out
    }

    /// Right-hand side and its sparse Jacobian in one pass.
    pub fn rhs_jacobian(&self, x: &[f64], inp: Inputs, out: &mut [f64], jac: &mut SparseJacobian) {
        self.eval(x, inp, out, Some(jac));
    }

    fn eval(&self, x: &[f64], inp: Inputs, out: &mut [f64], mut jac: Option<&mut SparseJacobian>) {
        let fs = &self.fs;
        let n = fs.n_stages;
        debug_assert_eq!(x.len(), 6 * n);
        let (a_f, o) = (inp.u, inp.p);
        let feed = fs.feed_index();
        let (vd, wd) = (fs.v_settler_aq, fs.v_settler_og);
        let off = |b: Block| b as usize * n;
        let (uam, uad, uod) = (
            off(Block::UAqMixer),
            off(Block::UAqSettler),
            off(Block::UOgSettler),
        );
        let (ham, had, hod) = (
            off(Block::HAqMixer),
            off(Block::HAqSettler),
            off(Block::HOgSettler),
        );

        if let Some(j) = jac.as_deref_mut() {
            j.entries.clear();
            j.du.clear();
            j.du.resize(6 * n, 0.0);
        }

        for i in 0..n {
            let a = fs.aqueous_flow(i, a_f);
            let vm = self.mixer_aq_volume(a, o);
            let pt = AqueousPoint {
                u_aq: x[uam + i],
                h_aq: x[ham + i],
            };

            // aqueous inlet from the settler above (or scrub), plus feed
            let (mut u_in, mut h_in) = if i + 1 < n {
                let a_up = fs.aqueous_flow(i + 1, a_f);
                (a_up * x[uad + i + 1], a_up * x[had + i + 1])
            } else {
                (0.0, fs.a_e * fs.h_scrub)
            };
            if i == feed {
                u_in += a_f * fs.u_feed;
                h_in += a_f * fs.h_feed;
            }
            // organic inlet from the settler below (or fresh solvent)
            if i > 0 {
                u_in += o * x[uod + i - 1];
                h_in += o * x[hod + i - 1];
            } else {
                u_in += o * fs.u_solvent_in;
                h_in += o * fs.h_solvent_in;
            }

            let (u_og, h_og, d_u_og, d_h_og) = if jac.is_some() {
                let s = self.ext.solve_with_sensitivity(pt);
                (s.u_og, s.h_og, s.d_u_og, s.d_h_og)
            } else {
                let s = self.ext.solve(pt);
                (s.u_og, s.h_og, [0.0; 2], [0.0; 2])
            };

            let rate_u = (u_in - a * x[uam + i] - o * u_og) / vm;
            let rate_h = (h_in - a * x[ham + i] - o * h_og) / vm;
            out[uam + i] = rate_u;
            out[ham + i] = rate_h;
            out[uad + i] = a * (x[uam + i] - x[uad + i]) / vd;
            out[had + i] = a * (x[ham + i] - x[had + i]) / vd;
            out[uod + i] = o * (u_og - x[uod + i]) / wd;
            out[hod + i] = o * (h_og - x[hod + i]) / wd;

            let Some(j) = jac.as_deref_mut() else {
                continue;
            };
            let e = &mut j.entries;
            let ix = |k: usize| k as u32;
            // mixer rows
            e.push((ix(uam + i), ix(uam + i), (-a - o * d_u_og[0]) / vm));
            e.push((ix(uam + i), ix(ham + i), -o * d_u_og[1] / vm));
            e.push((ix(ham + i), ix(uam + i), -o * d_h_og[0] / vm));
            e.push((ix(ham + i), ix(ham + i), (-a - o * d_h_og[1]) / vm));
            if i + 1 < n {
                let a_up = fs.aqueous_flow(i + 1, a_f);
                e.push((ix(uam + i), ix(uad + i + 1), a_up / vm));
                e.push((ix(ham + i), ix(had + i + 1), a_up / vm));
            }
            if i > 0 {
                e.push((ix(uam + i), ix(uod + i - 1), o / vm));
                e.push((ix(ham + i), ix(hod + i - 1), o / vm));
            }
            // settler rows
            e.push((ix(uad + i), ix(uam + i), a / vd));
            e.push((ix(uad + i), ix(uad + i), -a / vd));
            e.push((ix(had + i), ix(ham + i), a / vd));
            e.push((ix(had + i), ix(had + i), -a / vd));
            e.push((ix(uod + i), ix(uam + i), o * d_u_og[0] / wd));
            e.push((ix(uod + i), ix(ham + i), o * d_u_og[1] / wd));
            e.push((ix(uod + i), ix(uod + i), -o / wd));
            e.push((ix(hod + i), ix(uam + i), o * d_h_og[0] / wd));
            e.push((ix(hod + i), ix(ham + i), o * d_h_og[1] / wd));
            e.push((ix(hod + i), ix(hod + i), -o / wd));

            // feed-flow sensitivity: A_n, V^M_n and the feed itself depend on u
            let da = if i < fs.feed_stage { 1.0 } else { 0.0 };
            let d_vm = fs.v_mixer_total * o / ((a + o) * (a + o)) * da;
            let up_da = if i + 1 < n && i + 1 < fs.feed_stage {
                1.0
            } else {
                0.0
            };
            let (mut dn_u, mut dn_h) = (-da * x[uam + i], -da * x[ham + i]);
            if i + 1 < n {
                dn_u += up_da * x[uad + i + 1];
                dn_h += up_da * x[had + i + 1];
            }
            if i == feed {
                dn_u += fs.u_feed;
                dn_h += fs.h_feed;
            }
            j.du[uam + i] = (dn_u - rate_u * d_vm) / vm;
            j.du[ham + i] = (dn_h - rate_h * d_vm) / vm;
            j.du[uad + i] = da * (x[uam + i] - x[uad + i]) / vd;
            j.du[had + i] = da * (x[ham + i] - x[had + i]) / vd;
        }
    }

    /// Advances one control interval with `t_s / h_sub` explicit-Euler
    /// substeps at constant inputs.
    pub fn step(&self, x: &CascadeState, inp: Inputs, integ: Integrator) -> Result<StepOutcome> {
        self.step_observed(x, inp, integ, |_| {})
    }

    /// Like [`step`](Self::step) but calls `observe` with the state at the
    /// start of every substep.
    pub fn step_observed(
        &self,
        x: &CascadeState,
        inp: Inputs,
        integ: Integrator,
        mut observe: impl FnMut(&[f64]),
    ) -> Result<StepOutcome> {
        let n_sub = integ.substeps()?;
        let h = integ.h_sub;
        let mut state = x.clone();
        let mut dx = vec![0.0; state.len()];
        let mut clamped = 0.0;
        for k in 0..n_sub {
            observe(state.as_slice());
            self.rhs_into(state.as_slice(), inp, &mut dx);
            clamped += euler_update(&mut state.values, &dx, h, k, |_| {})?;
        }
        Ok(StepOutcome { state, clamped })
    }

    /// Applies `u_seq[k]` and `p_seq[k]` over successive control intervals.
    pub fn simulate(
        &self,
        x0: &CascadeState,
        u_seq: &[f64],
        p_seq: &[f64],
        integ: Integrator,
    ) -> Result<Trajectory> {
        if u_seq.len() != p_seq.len() {
            return Err(Error::invalid(
                "p_seq",
                "input and parameter sequences differ in length",
            ));
        }
        let mut traj = Trajectory::start(x0.clone(), integ.t_s);
        for (k, (&u, &p)) in u_seq.iter().zip(p_seq).enumerate() {
            let out = self
                .step(traj.last_state(), Inputs::new(u, p), integ)
                .map_err(|e| e.at_step(k))?;
            traj.push(u, p, p, out);
        }
        Ok(traj)
    }

    /// Holdups implied by the modelled balances: aqueous mixer plus both
    /// settler phases. The organic mixer holdup is not a dynamic quantity of
    /// the reduced model.
    pub fn inventory(&self, x: &CascadeState, a_f: f64, o_e: f64) -> Inventory {
        let fs = &self.fs;
        let (mut uranium, mut acid) = (0.0, 0.0);
        for i in 0..fs.n_stages {
            let s = i + 1;
            let vm = self.mixer_aq_volume(fs.aqueous_flow(i, a_f), o_e);
            uranium += vm * x.get(Block::UAqMixer, s)
                + fs.v_settler_aq * x.get(Block::UAqSettler, s)
                + fs.v_settler_og * x.get(Block::UOgSettler, s);
            acid += vm * x.get(Block::HAqMixer, s)
                + fs.v_settler_aq * x.get(Block::HAqSettler, s)
                + fs.v_settler_og * x.get(Block::HOgSettler, s);
        }
        Inventory { uranium, acid }
    }

    /// Organic mixer holdups `W^M_n [S]og_M*`, which the reduced model
    /// treats as instantaneous.
    pub fn organic_mixer_inventory(&self, x: &CascadeState, a_f: f64, o_e: f64) -> Inventory {
        let fs = &self.fs;
        let (mut uranium, mut acid) = (0.0, 0.0);
        for i in 0..fs.n_stages {
            let s = i + 1;
            let wm = fs.v_mixer_total - self.mixer_aq_volume(fs.aqueous_flow(i, a_f), o_e);
            let eq = self.ext.solve(AqueousPoint {
                u_aq: x.get(Block::UAqMixer, s),
                h_aq: x.get(Block::HAqMixer, s),
            });
            uranium += wm * eq.u_og;
            acid += wm * eq.h_og;
        }
        Inventory { uranium, acid }
    }

    /// Flows across the cascade boundary: feed, scrub and solvent in;
    /// raffinate and loaded solvent out.
    pub fn boundary_flux(&self, x: &[f64], inp: Inputs) -> BoundaryFlux {
        let fs = &self.fs;
        let n = fs.n_stages;
        let raff = fs.aqueous_flow(0, inp.u);
        BoundaryFlux {
            uranium_in: inp.u * fs.u_feed + inp.p * fs.u_solvent_in,
            uranium_out: raff * x[n] + inp.p * x[3 * n - 1],
            acid_in: inp.u * fs.h_feed + fs.a_e * fs.h_scrub + inp.p * fs.h_solvent_in,
            acid_out: raff * x[4 * n] + inp.p * x[6 * n - 1],
        }
    }

    /// Equilibrium organic uranium in the mixer of the last stage.
    pub fn loaded_mixer_u(&self, x: &CascadeState) -> f64 {
        let n = self.fs.n_stages;
        self.ext
            .solve(AqueousPoint {
                u_aq: x.get(Block::UAqMixer, n),
                h_aq: x.get(Block::HAqMixer, n),
            })
            .u_og
    }
}

/// Closed- or open-loop trajectory sampled at the control rate.
///
/// `states` and `params` hold one entry per sampling instant `t_k`;
/// `inputs` and `clamped` hold one entry per interval, so they are one
/// shorter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t_s: f64,
    pub times: Vec<f64>,
    pub states: Vec<CascadeState>,
    pub inputs: Vec<f64>,
    pub params: Vec<f64>,
    pub clamped: Vec<f64>,
}

impl Trajectory {
    pub fn start(x0: CascadeState, t_s: f64) -> Self {
        Trajectory {
            t_s,
            times: vec![0.0],
            states: vec![x0],
            inputs: Vec::new(),
            params: Vec::new(),
            clamped: Vec::new(),
        }
    }

    pub fn last_state(&self) -> &CascadeState {
        self.states
            .last()
            .expect("trajectory always holds its initial state")
    }

    /// Number of control intervals.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Records one interval: the applied input, the parameter during the
    /// interval and the parameter scheduled at the new instant.
    pub fn push(&mut self, u: f64, p: f64, p_next: f64, out: StepOutcome) {
        if self.params.len() < self.states.len() {
            self.params.push(p);
        }
        self.inputs.push(u);
        self.clamped.push(out.clamped);
        self.states.push(out.state);
        self.params.push(p_next);
        self.times.push(self.inputs.len() as f64 * self.t_s);
    }

    pub fn loaded_u(&self) -> Vec<f64> {
        self.states.iter().map(CascadeState::loaded_u).collect()
    }

    pub fn raffinate_u(&self) -> Vec<f64> {
        self.states.iter().map(CascadeState::raffinate_u).collect()
    }

    pub fn total_clamped(&self) -> f64 {
        self.clamped.iter().sum()
    }

    /// Writes one CSV row per sampling instant: `t, u, p`, the state vector
    /// in block order and the equilibrium `[U]og_M` of the last stage. The
    /// input column of the final row is empty since no interval follows it.
    pub fn write_csv<W: Write>(&self, model: &CascadeModel, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = model.flowsheet().n_stages;
        let mut header = vec!["t".to_string(), "u".into(), "p".into()];
        for b in Block::ALL {
            for s in 1..=n {
                header.push(format!("{}_{s}", b.label()));
            }
        }
        header.push(format!("U_og_M_{n}"));
        w.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let mut row = Vec::with_capacity(header.len());
            row.push(self.times[k].to_string());
            row.push(
                self.inputs
                    .get(k)
                    .map(|u| u.to_string())
                    .unwrap_or_default(),
            );
            row.push(
                self.params
                    .get(k)
                    .map(|p| p.to_string())
                    .unwrap_or_default(),
            );
            row.extend(x.as_slice().iter().map(|v| v.to_string()));
            row.push(model.loaded_mixer_u(x).to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}
