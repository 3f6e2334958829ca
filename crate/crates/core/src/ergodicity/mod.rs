//! Checkable ingredients of the ergodicity results for both chains.
//!
//! Energies. For a state `(β, Σ)`:
//!
//! * `V = Σᵢ δᵢ`, the sum of Mahalanobis residuals (proper prior);
//! * `V_C = tr{(Y − Xβ) Σ⁻¹ (Y − Xβ)ᵀ C}` for SPD `C` (improper prior);
//! * with `C = C₀` built from `W = (X, Y)` and an orthonormal completion `Z`,
//!   `V_{C₀} = tr Σ⁻¹ + tr βΣ⁻¹βᵀ`.
//!
//! Conditions. Geometric ergodicity of the proper chain needs
//! `∫ u^{d/2+2} h(u) du < ∞`; uniform ergodicity needs `rank X = p` and
//! `∫ u^{d/2} h(u) du < ∞`; the improper chain with Student-t errors needs
//!
//! ```text
//! (n − p)/(ν_t + d − 2) < 1 / tr{(Σᵢ wᵢwᵢᵀ / (ε + ‖wᵢ‖²))⁻¹}   for some ε > 0.
//! ```
//!
//! The sampler-facing drift constants and the minorization lower bound are
//! assembled here; Monte-Carlo counterparts live in [`verify`].

pub mod verify;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{dim, invalid, Error, Result};
use crate::gibbs;
use crate::linalg;
use crate::matvar::{ln_multivariate_gamma, InverseWishartParams, MatrixNormalParams};
use crate::mixing::{MixingDensity, MomentValue};
use crate::model::{self, ChainState, Dataset, NIWPrior};

/// Relative margin separating "holds" from "boundary".
pub const STRICT_MARGIN: f64 = 1e-12;
/// Relative width at which the ε bisection stops.
pub const EPS_REL_TOL: f64 = 1e-10;
pub const MAX_BISECTIONS: usize = 200;
/// Relative tolerance for the agreement of the two conditional-mean forms.
pub const FORM_AGREEMENT_TOL: f64 = 1e-8;

const G_CURVE_EPS: [f64; 8] = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0];

#[derive(Debug, Clone, Serialize)]
pub struct EnergyBasis {
    /// Orthonormal basis of the complement of `col(X, Y)`, `n × (n − p − d)`.
    pub z: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub trace_c0_inv: f64,
}

/// `C₀ = ((X, Y, Z)⁻¹)ᵀ (X, Y, Z)⁻¹` with `Z` orthonormal and orthogonal to
/// `(X, Y)`. Then `C₀ = W⁺ᵀW⁺ + ZZᵀ` and `C₀⁻¹ = WWᵀ + ZZᵀ`.
pub fn build_energy_basis(data: &Dataset) -> Result<EnergyBasis> {
    data.require_full_rank_stacked()?;
    let w = data.stacked();
    let (n, k) = w.shape();
    // Householder QR of (W, I): the first k columns of Q span col(W), the rest
    // complete it to an orthonormal basis of ℝⁿ.
    let qr = linalg::hstack(&w, &DMatrix::identity(n, n)).qr();
    let q = qr.q();
    let r = qr.r();
    let r11 = r.view((0, 0), (k, k)).into_owned();
    let q1 = q.columns(0, k).into_owned();
    let z = q.columns(k, n - k).into_owned();
    // W⁺ᵀ = Q₁ R₁₁⁻ᵀ
    let pinv_t = r11
        .solve_upper_triangular(&q1.transpose())
        .ok_or_else(|| Error::RankDeficient("(X, Y) triangular factor is singular".into()))?
        .transpose();
    let c0 = linalg::symmetrize(&(&pinv_t * pinv_t.transpose() + &z * z.transpose()));
    let trace_c0_inv = w.norm_squared() + (n - k) as f64;
    Ok(EnergyBasis { z, c0, trace_c0_inv })
}

/// `V = Σᵢ (yᵢ − βᵀxᵢ)ᵀ Σ⁻¹ (yᵢ − βᵀxᵢ)`.
pub fn energy_proper(state: &ChainState, data: &Dataset) -> Result<f64> {
    Ok(model::mahalanobis_for_state(state, data)?.sum())
}

/// `V_C = tr{(Y − Xβ) Σ⁻¹ (Y − Xβ)ᵀ C}`.
pub fn energy_weighted(state: &ChainState, data: &Dataset, c: &DMatrix<f64>) -> Result<f64> {
    let n = data.n();
    if c.shape() != (n, n) {
        return Err(dim(format!("weight matrix is {:?}, expected {n}x{n}", c.shape())));
    }
    linalg::spd_cholesky(c, "energy weight C")?;
    let l = linalg::spd_cholesky(&state.sigma, "Σ")?.l();
    let r = data.y() - data.x() * &state.beta;
    // RΣ⁻¹Rᵀ = GᵀG with G = L⁻¹Rᵀ (d × n)
    let g = linalg::solve_lower(&l, &r.transpose());
    Ok((&g * c).component_mul(&g).sum())
}

/// `tr Σ⁻¹ + tr βΣ⁻¹βᵀ`.
pub fn energy_quadratic(state: &ChainState) -> Result<f64> {
    let l = linalg::spd_cholesky(&state.sigma, "Σ")?.l();
    let d = l.nrows();
    let l_inv = linalg::solve_lower(&l, &DMatrix::identity(d, d));
    let b = linalg::solve_lower(&l, &state.beta.transpose());
    Ok(l_inv.norm_squared() + b.norm_squared())
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCheck {
    pub holds: bool,
    /// Order `k` of the moment `∫ u^k h(u) du` that must be finite.
    pub order: f64,
    pub moment: MomentValue,
}

/// Geometric ergodicity of the proper chain: `∫ u^{d/2+2} h(u) du < ∞`.
pub fn check_proper_geometric(h: &MixingDensity, d: usize) -> MomentCheck {
    let order = d as f64 / 2.0 + 2.0;
    let moment = h.moment(order);
    MomentCheck { holds: moment.is_finite(), order, moment }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniformCheck {
    pub holds: bool,
    pub design_full_rank: bool,
    pub rank: usize,
    pub p: usize,
    pub singular_values: Vec<f64>,
    pub moment: MomentCheck,
}

/// Uniform ergodicity of the proper chain: `rank X = p` and `∫ u^{d/2} h(u) du < ∞`.
pub fn check_uniform(data: &Dataset, h: &MixingDensity) -> UniformCheck {
    let (rank, singular_values) = linalg::numerical_rank(data.x());
    let order = data.d() as f64 / 2.0;
    let moment = h.moment(order);
    let design_full_rank = rank == data.p();
    UniformCheck {
        holds: design_full_rank && moment.is_finite(),
        design_full_rank,
        rank,
        p: data.p(),
        singular_values,
        moment: MomentCheck { holds: moment.is_finite(), order, moment },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionStatus {
    Holds,
    /// `lhs` equals `g(0⁺)` to within [`STRICT_MARGIN`]; not verified.
    Boundary,
    NotVerified,
}

#[derive(Debug, Clone, Serialize)]
pub struct GPoint {
    pub eps: f64,
    pub g: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub status: ConditionStatus,
    pub holds: bool,
    /// `(n − p)/(ν_t + d − 2)`
    pub lhs: f64,
    /// `g(0⁺) = 1/tr{(Σ wᵢwᵢᵀ/‖wᵢ‖²)⁻¹}`
    pub g_zero_plus: f64,
    pub rhs_at_eps: Vec<GPoint>,
    /// Supremum of the feasible ε, present iff the condition holds.
    pub max_feasible_eps: Option<f64>,
    /// `n < ν_t + p − 2`
    pub legacy_condition_holds: bool,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub nu_t: f64,
}

/// `g(ε)` for the rows `w` of `W`; rows with `w = 0` are skipped.
fn g_of_eps(w: &DMatrix<f64>, eps: f64) -> Result<f64> {
    let k = w.ncols();
    let mut m = DMatrix::zeros(k, k);
    for row in w.row_iter() {
        let norm2 = row.norm_squared();
        if norm2 == 0.0 {
            continue;
        }
        let r = row.transpose();
        m += (&r * r.transpose()) / (eps + norm2);
    }
    let chol = linalg::spd_cholesky(&m, "Σᵢ wᵢwᵢᵀ/(ε + ‖wᵢ‖²)")?;
    let tr = chol.inverse().trace();
    Ok(1.0 / tr)
}

fn improper_preconditions(data: &Dataset, nu_t: f64) -> Result<()> {
    if !(nu_t.is_finite() && nu_t > 0.0) {
        return Err(invalid(format!("Student-t degrees of freedom must be positive, got {nu_t}")));
    }
    if nu_t + data.d() as f64 <= 2.0 {
        return Err(Error::Precondition(format!("need ν_t + d > 2, got ν_t + d = {}", nu_t + data.d() as f64)));
    }
    data.require_full_rank_stacked()
}

pub fn check_improper_condition(data: &Dataset, nu_t: f64) -> Result<ConditionReport> {
    improper_preconditions(data, nu_t)?;
    let (n, p, d) = (data.n(), data.p(), data.d());
    let w = data.stacked();
    let lhs = (n - p) as f64 / (nu_t + d as f64 - 2.0);
    let g0 = g_of_eps(&w, 0.0)?;
    let status = if lhs < g0 * (1.0 - STRICT_MARGIN) {
        ConditionStatus::Holds
    } else if lhs <= g0 * (1.0 + STRICT_MARGIN) {
        ConditionStatus::Boundary
    } else {
        ConditionStatus::NotVerified
    };
    let max_feasible_eps = if status == ConditionStatus::Holds {
        let feasible = |eps: f64| -> Result<bool> { Ok(lhs < g_of_eps(&w, eps)?) };
        let mut hi = 1.0;
        while feasible(hi)? {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Numerical("ε search diverged".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..MAX_BISECTIONS {
            if hi - lo <= EPS_REL_TOL * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    } else {
        None
    };
    let mut rhs_at_eps = vec![GPoint { eps: 0.0, g: g0 }];
    for eps in G_CURVE_EPS {
        rhs_at_eps.push(GPoint { eps, g: g_of_eps(&w, eps)? });
    }
    Ok(ConditionReport {
        status,
        holds: status == ConditionStatus::Holds,
        lhs,
        g_zero_plus: g0,
        rhs_at_eps,
        max_feasible_eps,
        legacy_condition_holds: (n as f64) < nu_t + p as f64 - 2.0,
        n,
        p,
        d,
        nu_t,
    })
}

/// `E[V | u] = (n+ν) Σᵢ rᵢᵀ Ψ⁻¹ rᵢ + d Σᵢ xᵢᵀ Ω xᵢ` with `rᵢ = yᵢ − Γᵀxᵢ`.
pub fn cond_mean_v_proper(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior) -> Result<f64> {
    let upd = model::compute_update(u, data, prior)?;
    let l_psi = linalg::spd_cholesky(&upd.psi, "Ψ")?.l();
    let r = data.y() - data.x() * &upd.gamma;
    let g = linalg::solve_lower(&l_psi, &r.transpose());
    let xo = data.x() * &upd.omega;
    let spread = xo.component_mul(data.x()).sum();
    Ok((data.n() as f64 + prior.nu()) * g.norm_squared() + data.d() as f64 * spread)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImproperCondMean {
    pub value: f64,
    /// `d tr(XᵀUX)⁻¹ + (n−p)(tr S⁻¹ + tr ΓS⁻¹Γᵀ)`
    pub direct: f64,
    /// `(n−p)[tr(ỸᵀQ_X̃Ỹ)⁻¹ + tr(X̃ᵀQ_ỸX̃)⁻¹] − (n−p−d) tr(X̃ᵀX̃)⁻¹`
    pub projector: f64,
    /// `(n−p) tr(WᵀUW)⁻¹`
    pub upper_bound: f64,
}

fn projector(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let gram = linalg::spd_cholesky(&(a.transpose() * a), "projector Gram matrix")?;
    Ok(DMatrix::identity(n, n) - a * gram.solve(&a.transpose()))
}

fn trace_inverse(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(linalg::spd_inverse(&linalg::symmetrize(m), what)?.trace())
}

/// `E[V_{C₀} | u]` under the improper-prior chain, evaluated two ways.
/// Fails if the forms disagree beyond [`FORM_AGREEMENT_TOL`] or the value
/// exceeds `(n−p) tr(WᵀUW)⁻¹`.
pub fn cond_mean_v_improper(u: &DVector<f64>, data: &Dataset) -> Result<ImproperCondMean> {
    let (n, p, d) = (data.n(), data.p(), data.d());
    if n < p + d {
        return Err(Error::Precondition(format!("need n ≥ p + d, got n = {n}, p + d = {}", p + d)));
    }
    let np = (n - p) as f64;
    let upd = gibbs::improper_update(u, data)?;
    let s_inv = linalg::spd_inverse(&upd.s, "(Y − XΓ)ᵀU(Y − XΓ)")?;
    let direct = d as f64 * upd.omega.trace()
        + np * (s_inv.trace() + (&upd.gamma * &s_inv * upd.gamma.transpose()).trace());

    let sqrt_u = u.map(f64::sqrt);
    let xt = linalg::scale_rows(data.x(), &sqrt_u);
    let yt = linalg::scale_rows(data.y(), &sqrt_u);
    let qx = projector(&xt)?;
    let qy = projector(&yt)?;
    let projector = np
        * (trace_inverse(&(yt.transpose() * &qx * &yt), "ỸᵀQ_X̃Ỹ")?
            + trace_inverse(&(xt.transpose() * &qy * &xt), "X̃ᵀQ_ỸX̃")?)
        - (n - p - d) as f64 * trace_inverse(&(xt.transpose() * &xt), "X̃ᵀX̃")?;

    let wt = linalg::scale_rows(&data.stacked(), &sqrt_u);
    let upper_bound = np * trace_inverse(&(wt.transpose() * &wt), "WᵀUW")?;

    if (direct - projector).abs() > FORM_AGREEMENT_TOL * (1.0 + direct.abs()) {
        return Err(Error::Numerical(format!(
            "conditional mean forms disagree: direct {direct:e}, projector {projector:e}"
        )));
    }
    if direct > upper_bound * (1.0 + FORM_AGREEMENT_TOL) {
        return Err(Error::Numerical(format!(
            "conditional mean {direct:e} exceeds its upper bound {upper_bound:e}"
        )));
    }
    Ok(ImproperCondMean { value: direct, direct, projector, upper_bound })
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftConstants {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
    /// `m_{d/2+2} / m_{d/2}`
    pub moment_ratio: f64,
}

/// Constants of the drift chain `E[V | u] ≤ M₃ + M₄ tr U² ≤ M₅` in expectation.
///
/// `M₁` and `M₂` are the sharpest spectral constants with `XᵀX ≤ M₁A⁻¹` and
/// `XAXᵀ ≤ M₂I`.
pub fn drift_constants_proper(data: &Dataset, prior: &NIWPrior, h: &MixingDensity) -> Result<DriftConstants> {
    prior.check_against(data)?;
    let (n, d) = (data.n(), data.d());
    let hi = check_proper_geometric(h, d);
    if !hi.holds {
        return Err(Error::DivergentMoment(format!(
            "moment of order {} of the mixing density is infinite; the proper chain is not covered (see check_proper_geometric)",
            hi.order
        )));
    }
    let lo = h.moment(d as f64 / 2.0);
    if !(lo.is_finite() && lo.value > 0.0) {
        return Err(Error::DivergentMoment(format!("moment of order {} of the mixing density is not finite", d as f64 / 2.0)));
    }
    let moment_ratio = hi.moment.value / lo.value;
    let (x, y) = (data.x(), data.y());
    let la = prior.a_chol().l();
    let xla = x * &la;
    let m1 = linalg::lambda_max(&(xla.transpose() * &xla));
    let m2 = linalg::lambda_max(&(x * prior.a() * x.transpose()));
    let m = n as f64 + prior.nu();
    let theta = prior.theta();
    let xax = (x * prior.a()).component_mul(x).sum();
    let yty_theta = (y * theta).component_mul(y).sum();
    let btab = prior.b().transpose() * prior.a_inv() * prior.b();
    let m3 = d as f64 * xax + 2.0 * m * yty_theta + 4.0 * m * m1 * (theta * btab).trace();
    let m4 = 4.0 * m * m1 * m2 * (theta * y.transpose() * y).trace();
    let m5 = m3 + m4 * n as f64 * moment_ratio;
    Ok(DriftConstants { m1, m2, m3, m4, m5, moment_ratio })
}

/// The global lower bound `q(β, Σ) ≤ E[p(β, Σ | u) | β°, Σ°]`, valid for every
/// starting point `(β°, Σ°)`.
#[derive(Debug, Clone)]
pub struct MinorizationBound {
    data: Dataset,
    prior: NIWPrior,
    mixing: MixingDensity,
    log_c1: f64,
    ln_norm: f64,
    five_btab: DMatrix<f64>,
}

impl MinorizationBound {
    pub fn new(data: &Dataset, prior: &NIWPrior, h: &MixingDensity) -> Result<Self> {
        prior.check_against(data)?;
        let (n, p, d) = (data.n(), data.p(), data.d());
        let half = d as f64 / 2.0;
        let ln_norm = h.ln_tilted_integral(half, 0.0)?;
        if !ln_norm.is_finite() {
            return Err(Error::DivergentMoment(format!("moment of order {half} of the mixing density is infinite")));
        }
        let m = n as f64 + prior.nu();
        let ln_c0 = -((p * d) as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln()
            + m * d as f64 / 2.0 * 2f64.ln()
            + ln_multivariate_gamma(d, m / 2.0));
        let ln_det_theta_inv = -linalg::log_det(&linalg::spd_cholesky(prior.theta(), "Θ")?);
        let ln_det_a = linalg::log_det(prior.a_chol());
        let log_c1 = ln_c0 + m / 2.0 * ln_det_theta_inv - half * ln_det_a;
        let five_btab = prior.b().transpose() * prior.a_inv() * prior.b() * 5.0;
        Ok(Self { data: data.clone(), prior: prior.clone(), mixing: h.clone(), log_c1, ln_norm, five_btab })
    }

    /// `log c₁` with `c₁ = c₀ |Θ⁻¹|^{(n+ν)/2} / |A|^{d/2}`.
    pub fn log_c1(&self) -> f64 {
        self.log_c1
    }

    /// `∫ h(u) u^{d/2} e^{-cu/2} du / ∫ h(u) u^{d/2} du` on the log scale.
    pub fn ln_tilted_ratio(&self, c: f64) -> Result<f64> {
        let half = self.data.d() as f64 / 2.0;
        Ok(self.mixing.ln_tilted_integral(half, c / 2.0)? - self.ln_norm)
    }

    pub fn log_bound(&self, beta: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
        let (n, p, d) = (self.data.n(), self.data.p(), self.data.d());
        if beta.shape() != (p, d) || sigma.shape() != (d, d) {
            return Err(dim(format!("β {:?} / Σ {:?} do not match p = {p}, d = {d}", beta.shape(), sigma.shape())));
        }
        let chol = linalg::spd_cholesky(sigma, "Σ")?;
        let sigma_inv = linalg::symmetrize(&chol.inverse());
        let m = n as f64 + self.prior.nu();
        let inner = self.prior.theta_inv() + &self.five_btab + beta.transpose() * self.prior.a_inv() * beta * 2.0;
        let mut lb = self.log_c1 - 0.5 * (&sigma_inv * inner).trace()
            - (m + (d + 1 + p) as f64) / 2.0 * linalg::log_det(&chol);
        // Ξ = 2XβΣ⁻¹βᵀXᵀ + 5YΣ⁻¹Yᵀ; only the diagonal enters.
        let xb = self.data.x() * beta;
        let a = &xb * &sigma_inv;
        let b = self.data.y() * &sigma_inv;
        for i in 0..n {
            let xi = 2.0 * a.row(i).dot(&xb.row(i)) + 5.0 * b.row(i).dot(&self.data.y().row(i));
            lb += self.ln_tilted_ratio(xi.max(0.0))?;
        }
        Ok(lb)
    }

    pub fn bound(&self, beta: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
        Ok(self.log_bound(beta, sigma)?.exp())
    }
}

pub fn minorization_lower_bound(
    beta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    data: &Dataset,
    prior: &NIWPrior,
    h: &MixingDensity,
) -> Result<f64> {
    MinorizationBound::new(data, prior, h)?.bound(beta, sigma)
}

/// `log p(β, Σ | u) = log N_{p,d}(β | Γ, Ω, Σ) + log IW_d(Σ | n+ν, Ψ⁻¹)`.
pub fn log_conditional_density(
    beta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    u: &DVector<f64>,
    data: &Dataset,
    prior: &NIWPrior,
) -> Result<f64> {
    let upd = model::compute_update(u, data, prior)?;
    let iw = InverseWishartParams::new(data.n() as f64 + prior.nu(), upd.psi)?;
    let mn = MatrixNormalParams::new(upd.gamma, upd.omega, sigma.clone())?;
    Ok(crate::matvar::matnorm_logpdf(beta, &mn)? + crate::matvar::invwishart_logpdf(sigma, &iw)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftCoefficient {
    /// `ρ(M₁) = (n−p)/(ν_t+d−2) · tr{(Σ wᵢwᵢᵀ/(ν_t/M₁ + ‖wᵢ‖²))⁻¹}`
    pub rho: f64,
    pub m1_cap: f64,
    pub contracts: bool,
    /// `lim_{M₁→∞} ρ(M₁) = lhs / g(0⁺)`
    pub rho_limit: f64,
    /// Infimum of the caps with `ρ < 1`, present iff the condition holds.
    pub smallest_cap: Option<f64>,
}

pub fn drift_coefficient_improper(data: &Dataset, nu_t: f64, m1_cap: f64) -> Result<DriftCoefficient> {
    if !(m1_cap.is_finite() && m1_cap > 0.0) {
        return Err(invalid(format!("M₁ must be positive and finite, got {m1_cap}")));
    }
    let report = check_improper_condition(data, nu_t)?;
    let g = g_of_eps(&data.stacked(), nu_t / m1_cap)?;
    let rho = report.lhs / g;
    // ρ(M) < 1 ⟺ g(ν_t/M) > lhs ⟺ ν_t/M < max feasible ε
    let smallest_cap = report.max_feasible_eps.map(|eps| nu_t / eps);
    Ok(DriftCoefficient {
        rho,
        m1_cap,
        contracts: rho < 1.0,
        rho_limit: report.lhs / report.g_zero_plus,
        smallest_cap,
    })
}
