//! Closed-form chemical-equilibrium closure of a mixer.
//!
//! Uranyl nitrate binds two TBP molecules and nitric acid one, so with the
//! aqueous nitrate `N = 2 U + H` the equilibrium organic loadings are
//!
//! ```text
//! U_og* = K_U · U · N² · T²
//! H_og* = K_H · H · N · T
//! ```
//!
//! where `T` is the free TBP. The TBP balance `T + 2 U_og* + H_og* = TBP_total`
//! is a quadratic `a T² + b T − TBP_total = 0` with `a = 2 K_U U N²` and
//! `b = 1 + K_H H N`, whose nonnegative root is taken in the
//! cancellation-free form `T = 2 TBP_total / (b + √(b² + 4 a TBP_total))`.

/// Aqueous mixer concentrations, mol/L.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AqueousPoint {
    pub u_aq: f64,
    pub h_aq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumResult {
    /// Total aqueous nitrate, mol/L.
    pub nitrate: f64,
    pub tbp_free: f64,
    pub u_og: f64,
    pub h_og: f64,
}

/// Equilibrium loadings together with their partial derivatives with respect
/// to the aqueous concentrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumSensitivity {
    pub u_og: f64,
    pub h_og: f64,
    /// `[∂U_og*/∂U_aq, ∂U_og*/∂H_aq]`
    pub d_u_og: [f64; 2],
    /// `[∂H_og*/∂U_aq, ∂H_og*/∂H_aq]`
    pub d_h_og: [f64; 2],
}

/// Equilibrium constants and total extractant of one phase system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extractant {
    pub k_u: f64,
    pub k_h: f64,
    pub tbp_total: f64,
}

/// Total aqueous nitrate `2 U + H`.
#[inline]
pub fn nitrate(u_aq: f64, h_aq: f64) -> f64 {
    2.0 * u_aq + h_aq
}

/// Relative size of the quadratic coefficient below which the linear root is used.
const LINEAR_BRANCH: f64 = 1e-14;

#[inline]
fn free_tbp(a: f64, b: f64, tbp_total: f64) -> f64 {
    if a < LINEAR_BRANCH * b * b / tbp_total {
        tbp_total / b
    } else {
        2.0 * tbp_total / (b + (b * b + 4.0 * a * tbp_total).sqrt())
    }
}

impl Extractant {
    pub fn solve(&self, pt: AqueousPoint) -> EquilibriumResult {
        let AqueousPoint { u_aq: u, h_aq: h } = pt;
        let n = nitrate(u, h);
        let a = 2.0 * self.k_u * u * n * n;
        let b = 1.0 + self.k_h * h * n;
        let t = free_tbp(a, b, self.tbp_total);
        EquilibriumResult {
            nitrate: n,
            tbp_free: t,
            u_og: self.k_u * u * n * n * t * t,
            h_og: self.k_h * h * n * t,
        }
    }

    /// Loadings and their Jacobian with respect to `(U_aq, H_aq)`, obtained
    /// by implicit differentiation of the TBP balance.
    pub fn solve_with_sensitivity(&self, pt: AqueousPoint) -> EquilibriumSensitivity {
        let AqueousPoint { u_aq: u, h_aq: h } = pt;
        let (ku, kh) = (self.k_u, self.k_h);
        let n = nitrate(u, h);
        let a = 2.0 * ku * u * n * n;
        let b = 1.0 + kh * h * n;
        let t = free_tbp(a, b, self.tbp_total);

        // (2 a T + b) dT = −(T² da + T db)
        let da = [2.0 * ku * (n * n + 4.0 * u * n), 4.0 * ku * u * n];
        let db = [2.0 * kh * h, kh * (n + h)];
        let denom = 2.0 * a * t + b;
        let dt = [
            -(t * t * da[0] + t * db[0]) / denom,
            -(t * t * da[1] + t * db[1]) / denom,
        ];

        let g = ku * u * n * n; // U_og* = g T²
        let dg = [ku * (n * n + 4.0 * u * n), 2.0 * ku * u * n];
        let f = kh * h * n; // H_og* = f T
        let df = [2.0 * kh * h, kh * (n + h)];

        EquilibriumSensitivity {
            u_og: g * t * t,
            h_og: f * t,
            d_u_og: [
                dg[0] * t * t + 2.0 * g * t * dt[0],
                dg[1] * t * t + 2.0 * g * t * dt[1],
            ],
            d_h_og: [df[0] * t + f * dt[0], df[1] * t + f * dt[1]],
        }
    }
}

/// Solves the equilibrium closure for one mixer.
pub fn solve_equilibrium(
    pt: AqueousPoint,
    tbp_total: f64,
    k_u: f64,
    k_h: f64,
) -> EquilibriumResult {
    Extractant {
        k_u,
        k_h,
        tbp_total,
    }
    .solve(pt)
}
