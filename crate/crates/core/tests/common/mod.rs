#![allow(dead_code)]

use uxcascade::steady_state::{SetPoint, SetpointOptions, SteadyStateSolver};
use uxcascade::{CascadeModel, CascadeState, FlowSheet};

/// Set point at solvent flow `p` with the default margin.
pub fn setpoint(fs: &FlowSheet, p: f64) -> SetPoint {
    let model = CascadeModel::new(fs);
    SteadyStateSolver::new(&model)
        .critical_setpoint(p, fs.u_min, fs.u_max, SetpointOptions::default())
        .unwrap()
}

/// Steady state reached with uranium-free feed at the set point flows.
pub fn startup_state(fs: &FlowSheet, sp: &SetPoint) -> CascadeState {
    let clean = CascadeModel::new(&fs.with_uranium_feed(0.0));
    SteadyStateSolver::new(&clean)
        .solve(sp.u_set, sp.p, None)
        .unwrap()
        .x_ss
}
