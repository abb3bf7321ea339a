use nalgebra::{DMatrix, DVector};

use super::OcpSpec;
use crate::cascade::{euler_update, CascadeModel, CascadeState, Inputs, SparseJacobian};
use crate::error::Result;
use crate::flowsheet::FlowSheet;

/// A built horizon problem: the prediction model bound to one [`OcpSpec`].
#[derive(Debug, Clone)]
pub struct Ocp {
    model: CascadeModel,
    spec: OcpSpec,
    n_sub: usize,
}

/// Cost, constraints and their first derivatives at one input sequence.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub states: Vec<CascadeState>,
    /// Tracking cost without the slack penalty.
    pub cost: f64,
    pub gradient: DVector<f64>,
    /// Gauss-Newton approximation of the cost Hessian.
    pub hessian: DMatrix<f64>,
    /// Raffinate uranium `x_17` at the predicted states `1..=N`.
    pub raffinate: DVector<f64>,
    /// Row `i` is the gradient of `raffinate[i]` with respect to the inputs.
    pub raffinate_jacobian: DMatrix<f64>,
}

impl Ocp {
    pub(super) fn new(spec: OcpSpec, fs: &FlowSheet) -> Self {
        let n_sub = spec.integrator.substeps().expect("validated");
        Ocp {
            model: CascadeModel::new(fs),
            spec,
            n_sub,
        }
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn model(&self) -> &CascadeModel {
        &self.model
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn raffinate_index(&self) -> usize {
        CascadeState::raffinate_index(self.spec.x_k.n_stages())
    }

    /// Predicted states `x_0 … x_N` under the input sequence `u`.
    pub fn predict(&self, u: &[f64]) -> Result<Vec<CascadeState>> {
        assert_eq!(u.len(), self.horizon());
        let mut states = Vec::with_capacity(u.len() + 1);
        states.push(self.spec.x_k.clone());
        for (i, &ui) in u.iter().enumerate() {
            let out = self
                .model
                .step(
                    states.last().unwrap(),
                    Inputs::new(ui, self.spec.p_hat),
                    self.spec.integrator,
                )
                .map_err(|e| e.at_step(i))?;
            states.push(out.state);
        }
        Ok(states)
    }

    fn cost_of(&self, u: &[f64], states: &[CascadeState]) -> f64 {
        let sp = &self.spec;
        let w = &sp.weights;
        let x_set = DVector::from_column_slice(sp.setpoint.x_set.as_slice());
        let n = u.len();
        let mut cost = 0.0;
        for (i, x) in states.iter().enumerate() {
            let dx = DVector::from_column_slice(x.as_slice()) - &x_set;
            let m = if i == n { w.p() } else { w.q() };
            cost += dx.dot(&(m * &dx));
        }
        let mut prev = sp.u_prev;
        for &ui in u {
            let du = ui - sp.setpoint.u_set;
            cost += w.r() * du * du + w.s() * (ui - prev) * (ui - prev);
            prev = ui;
        }
        cost
    }

    /// Tracking cost without the slack penalty.
    pub fn cost(&self, u: &[f64]) -> Result<f64> {
        let states = self.predict(u)?;
        Ok(self.cost_of(u, &states))
    }

    /// Raffinate uranium at the predicted states `1..=N`.
    pub fn raffinate(&self, u: &[f64]) -> Result<Vec<f64>> {
        let r = self.raffinate_index();
        Ok(self.predict(u)?[1..]
            .iter()
            .map(|x| x.as_slice()[r])
            .collect())
    }

    /// Smallest slacks for which `u` is feasible.
    pub fn slacks(&self, raffinate: &[f64]) -> Vec<f64> {
        raffinate
            .iter()
            .map(|&c| (c - self.spec.raffinate_tol).max(0.0))
            .collect()
    }

    /// Full objective with the slacks at their smallest feasible values; this
    /// is the exact L1 penalty function of the problem.
    pub fn objective(&self, u: &[f64]) -> Result<f64> {
        let states = self.predict(u)?;
        Ok(self.objective_of(u, &states))
    }

    pub(super) fn objective_of(&self, u: &[f64], states: &[CascadeState]) -> f64 {
        let r = self.raffinate_index();
        let raff: Vec<f64> = states[1..].iter().map(|x| x.as_slice()[r]).collect();
        self.cost_of(u, states) + self.spec.rho * self.slacks(&raff).iter().sum::<f64>()
    }

    /// Simulates the horizon while propagating the exact sensitivities of
    /// the Euler map, including the zero derivative of clamped entries.
    pub fn linearize(&self, u: &[f64]) -> Result<Linearization> {
        let np = self.horizon();
        assert_eq!(u.len(), np);
        let nx = self.spec.x_k.len();
        let n_stages = self.spec.x_k.n_stages();
        let h = self.spec.integrator.h_sub;

        let mut x = self.spec.x_k.as_slice().to_vec();
        // row-major nx × np; column j only becomes nonzero from interval j on
        let mut sens = vec![0.0; nx * np];
        let mut next = vec![0.0; nx * np];
        let mut dx = vec![0.0; nx];
        let mut jac = SparseJacobian::default();

        let mut states = Vec::with_capacity(np + 1);
        states.push(self.spec.x_k.clone());
        let mut sens_at = Vec::with_capacity(np);

        for (i, &ui) in u.iter().enumerate() {
            let inp = Inputs::new(ui, self.spec.p_hat);
            let cols = i + 1;
            for k in 0..self.n_sub {
                self.model.rhs_jacobian(&x, inp, &mut dx, &mut jac);
                for r in 0..nx {
                    let row = r * np;
                    next[row..row + cols].copy_from_slice(&sens[row..row + cols]);
                }
                for &(r, c, v) in &jac.entries {
                    let (r, c) = (r as usize * np, c as usize * np);
                    let hv = h * v;
                    for j in 0..cols {
                        next[r + j] += hv * sens[c + j];
                    }
                }
                for (r, &d) in jac.du.iter().enumerate() {
                    next[r * np + i] += h * d;
                }
                euler_update(&mut x, &dx, h, k, |r| next[r * np..(r + 1) * np].fill(0.0))
                    .map_err(|e| e.at_step(i))?;
                std::mem::swap(&mut sens, &mut next);
            }
            states.push(CascadeState::from_vec(n_stages, x.clone())?);
            sens_at.push(DMatrix::from_row_slice(nx, np, &sens));
        }

        let sp = &self.spec;
        let w = &sp.weights;
        let x_set = DVector::from_column_slice(sp.setpoint.x_set.as_slice());
        let mut gradient = DVector::zeros(np);
        let mut hessian = DMatrix::zeros(np, np);
        for (i, g) in sens_at.iter().enumerate() {
            let m = if i + 1 == np { w.p() } else { w.q() };
            let dx = DVector::from_column_slice(states[i + 1].as_slice()) - &x_set;
            let mg = m * g;
            gradient += 2.0 * mg.tr_mul(&dx);
            hessian += 2.0 * g.tr_mul(&mg);
        }
        let mut prev = sp.u_prev;
        for i in 0..np {
            gradient[i] += 2.0 * w.r() * (u[i] - sp.setpoint.u_set);
            let d = u[i] - prev;
            gradient[i] += 2.0 * w.s() * d;
            hessian[(i, i)] += 2.0 * w.r() + 2.0 * w.s();
            if i > 0 {
                gradient[i - 1] -= 2.0 * w.s() * d;
                hessian[(i - 1, i - 1)] += 2.0 * w.s();
                hessian[(i, i - 1)] -= 2.0 * w.s();
                hessian[(i - 1, i)] -= 2.0 * w.s();
            }
            prev = u[i];
        }

        let r = self.raffinate_index();
        let raffinate = DVector::from_iterator(np, states[1..].iter().map(|x| x.as_slice()[r]));
        let raffinate_jacobian = DMatrix::from_fn(np, np, |i, j| sens_at[i][(r, j)]);
        let cost = self.cost_of(u, &states);

        Ok(Linearization {
            states,
            cost,
            gradient,
            hessian,
            raffinate,
            raffinate_jacobian,
        })
    }
}
