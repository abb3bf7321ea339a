mod common;

use proptest::prelude::*;
use uxcascade::steady_state::SteadyStateSolver;
use uxcascade::{CascadeModel, FlowSheet, Inputs, Integrator};

#[test]
fn steady_state_is_a_fixed_point_of_the_integrator() {
    let fs = FlowSheet::default();
    let model = CascadeModel::new(&fs);
    let ss = SteadyStateSolver::new(&model)
        .solve(fs.a_f_nominal, fs.o_e_nominal, None)
        .unwrap();
    let out = model
        .step(
            &ss.x_ss,
            Inputs::new(fs.a_f_nominal, fs.o_e_nominal),
            Integrator::default(),
        )
        .unwrap();
    assert!(out.state.max_abs_diff(&ss.x_ss) < 1e-9 * ss.x_ss.max_abs());
    assert_eq!(out.clamped, 0.0);
}

#[test]
fn nominal_start_up_never_clamps() {
    let fs = FlowSheet::default();
    let sp = common::setpoint(&fs, fs.o_e_nominal);
    let model = CascadeModel::new(&fs);
    let traj = model
        .simulate(
            &common::startup_state(&fs, &sp),
            &[sp.u_set; 60],
            &[sp.p; 60],
            Integrator::default(),
        )
        .unwrap();
    assert_eq!(traj.total_clamped(), 0.0);
}

#[test]
fn response_to_a_small_input_step_scales_linearly() {
    // far from any saturation, halving a small step halves the response
    let fs = FlowSheet::default();
    let model = CascadeModel::new(&fs);
    let ss = SteadyStateSolver::new(&model)
        .solve(25.0, fs.o_e_nominal, None)
        .unwrap();
    let integ = Integrator::default();
    let respond = |du: f64| {
        let x = model
            .step(&ss.x_ss, Inputs::new(25.0 + du, fs.o_e_nominal), integ)
            .unwrap()
            .state;
        x.loaded_u() - ss.x_ss.loaded_u()
    };
    let (full, half) = (respond(1e-3), respond(5e-4));
    assert!((full - 2.0 * half).abs() < 1e-3 * full.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn states_stay_nonnegative_for_admissible_inputs(
        us in proptest::collection::vec(5.0f64..80.0, 4),
        factor in 0.5f64..1.5,
    ) {
        let fs = FlowSheet::default();
        let model = CascadeModel::new(&fs);
        let p = vec![factor * fs.o_e_nominal; us.len()];
        let traj = model
            .simulate(&uxcascade::CascadeState::zeros(fs.n_stages), &us, &p, Integrator::default())
            .unwrap();
        for x in &traj.states {
            prop_assert!(x.as_slice().iter().all(|&v| v >= 0.0));
        }
    }
}
