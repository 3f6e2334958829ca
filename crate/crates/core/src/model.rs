//! Data, prior and chain-state containers, and the posterior hyperparameter
//! update shared by the sampler and the ergodicity analysis.
//!
//! Given latent weights `u` (with `U = diag(u)`), the conditional posterior of
//! `(β, Σ)` under the normal–inverse-Wishart prior is
//!
//! ```text
//! Σ | u ~ IW_d(n + ν, Ψ⁻¹),     β | Σ, u ~ N_{p,d}(Γ, Ω, Σ)
//! Ω = (XᵀUX + A⁻¹)⁻¹
//! Γ = Ω (XᵀUY + A⁻¹B)
//! Ψ = Θ⁻¹ + BᵀA⁻¹B + YᵀUY − ΓᵀΩ⁻¹Γ
//! ```
//!
//! `Ψ` can be assembled three algebraically equal ways (see [`PsiForm`]); the
//! literal formula above subtracts two large PSD matrices and is kept only as
//! a cross-check.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{self, Chol};

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(invalid("dataset needs at least one observation (n ≥ 1)"));
        }
        if x.nrows() != y.nrows() {
            return Err(dim(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(dim("X and Y need at least one column each"));
        }
        if !linalg::all_finite(&x) || !linalg::all_finite(&y) {
            return Err(invalid("X and Y must not contain NaN or infinite entries"));
        }
        Ok(Self { x, y })
    }

    /// Loads `X` and `Y` from two CSV files.
    pub fn from_csv(x_path: impl AsRef<Path>, y_path: impl AsRef<Path>) -> Result<Self> {
        Self::new(crate::io::read_matrix_csv(x_path)?, crate::io::read_matrix_csv(y_path)?)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    /// `W = (X, Y)`, rows `w_iᵀ = (x_iᵀ, y_iᵀ)`.
    pub fn stacked(&self) -> DMatrix<f64> {
        linalg::hstack(&self.x, &self.y)
    }

    /// Returns an error unless `(X, Y)` has full column rank `p + d ≤ n`.
    pub fn require_full_rank_stacked(&self) -> Result<()> {
        let (n, k) = (self.n(), self.p() + self.d());
        if n < k {
            return Err(Error::Precondition(format!("need n ≥ p + d, got n = {n}, p + d = {k}")));
        }
        let (rank, sv) = linalg::numerical_rank(&self.stacked());
        if rank < k {
            return Err(Error::RankDeficient(format!("(X, Y) has rank {rank} < p + d = {k}; singular values {sv:?}")));
        }
        Ok(())
    }
}

/// Conditionally conjugate prior `β | Σ ~ N_{p,d}(B, A, Σ)`, `Σ ~ IW_d(ν, Θ)`
/// (that is, `Σ⁻¹ ~ Wishart_d(ν, Θ)`).
#[derive(Debug, Clone, Serialize)]
pub struct NIWPrior {
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    nu: f64,
    theta: DMatrix<f64>,
    #[serde(skip)]
    a_chol: Chol,
    #[serde(skip)]
    a_inv: DMatrix<f64>,
    #[serde(skip)]
    theta_inv: DMatrix<f64>,
}

impl NIWPrior {
    pub fn new(b: DMatrix<f64>, a: DMatrix<f64>, nu: f64, theta: DMatrix<f64>) -> Result<Self> {
        let (p, d) = b.shape();
        if a.shape() != (p, p) || theta.shape() != (d, d) {
            return Err(dim(format!(
                "prior: B is {p}x{d}, A is {:?}, Θ is {:?}",
                a.shape(),
                theta.shape()
            )));
        }
        if !(nu.is_finite() && nu > d as f64 - 1.0) {
            return Err(invalid(format!("prior dof ν must exceed d - 1 = {}, got {nu}", d as f64 - 1.0)));
        }
        if !linalg::all_finite(&b) {
            return Err(invalid("prior mean B must be finite"));
        }
        let a_chol = linalg::spd_cholesky(&a, "prior row covariance A").map_err(|e| invalid(e.to_string()))?;
        let theta_chol = linalg::spd_cholesky(&theta, "prior scale Θ").map_err(|e| invalid(e.to_string()))?;
        let a_inv = linalg::symmetrize(&a_chol.inverse());
        let theta_inv = linalg::symmetrize(&theta_chol.inverse());
        Ok(Self { b, a, nu, theta, a_chol, a_inv, theta_inv })
    }

    /// `B = 0`, `A = 100·I`, `ν = d + 2`, `Θ = I`.
    pub fn weakly_informative(p: usize, d: usize) -> Self {
        Self::new(DMatrix::zeros(p, d), DMatrix::identity(p, p) * 100.0, d as f64 + 2.0, DMatrix::identity(d, d))
            .expect("default prior is valid")
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn theta_inv(&self) -> &DMatrix<f64> {
        &self.theta_inv
    }

    pub fn a_chol(&self) -> &Chol {
        &self.a_chol
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.p() != data.p() || self.d() != data.d() {
            return Err(dim(format!(
                "prior is for p = {}, d = {} but data has p = {}, d = {}",
                self.p(),
                self.d(),
                data.p(),
                data.d()
            )));
        }
        Ok(())
    }
}

/// Current `(β, Σ, u)` of a chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainState {
    pub beta: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub u: DVector<f64>,
}

impl ChainState {
    pub fn new(beta: DMatrix<f64>, sigma: DMatrix<f64>, u: DVector<f64>) -> Result<Self> {
        let s = Self { beta, sigma, u };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.shape() != (self.beta.ncols(), self.beta.ncols()) {
            return Err(dim(format!("β is {:?} but Σ is {:?}", self.beta.shape(), self.sigma.shape())));
        }
        linalg::spd_cholesky(&self.sigma, "Σ")?;
        if self.u.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("latent weights u must be positive and finite"));
        }
        Ok(())
    }

    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.beta.shape() != (data.p(), data.d()) || self.u.len() != data.n() {
            return Err(dim(format!(
                "state has β {:?} and {} weights; data has p = {}, d = {}, n = {}",
                self.beta.shape(),
                self.u.len(),
                data.p(),
                data.d(),
                data.n()
            )));
        }
        Ok(())
    }

    pub fn sigma_inv(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.sigma, "Σ")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PosteriorUpdate {
    pub psi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

/// How `Ψ` is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsiForm {
    /// `Θ⁻¹ + (Y−XΓ)ᵀU(Y−XΓ) + (Γ−B)ᵀA⁻¹(Γ−B)`: a sum of PSD terms, `O(n(p²+d²))`.
    #[default]
    CompletedSquare,
    /// `Θ⁻¹ + (XB−Y)ᵀ(U⁻¹+XAXᵀ)⁻¹(XB−Y)`: PSD by construction, `O(n³)`.
    Woodbury,
    /// `Θ⁻¹ + BᵀA⁻¹B + YᵀUY − ΓᵀΩ⁻¹Γ`, symmetrized.
    Textbook,
}

pub(crate) fn check_weights(u: &DVector<f64>, n: usize) -> Result<()> {
    if u.len() != n {
        return Err(dim(format!("expected {n} latent weights, got {}", u.len())));
    }
    if u.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid("latent weights u must be positive and finite"));
    }
    Ok(())
}

pub fn compute_update(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior) -> Result<PosteriorUpdate> {
    compute_update_with(u, data, prior, PsiForm::default())
}

pub fn compute_update_with(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior, form: PsiForm) -> Result<PosteriorUpdate> {
    check_weights(u, data.n())?;
    prior.check_against(data)?;
    let (x, y) = (data.x(), data.y());
    let ux = linalg::scale_rows(x, u);
    let precision = x.transpose() * &ux + prior.a_inv();
    let prec_chol = linalg::spd_cholesky(&precision, "XᵀUX + A⁻¹")
        .map_err(|e| Error::Numerical(format!("posterior precision: {e}")))?;
    let rhs = ux.transpose() * y + prior.a_inv() * prior.b();
    let gamma = prec_chol.solve(&rhs);
    let omega = linalg::symmetrize(&prec_chol.inverse());

    let psi = match form {
        PsiForm::CompletedSquare => {
            let resid = y - x * &gamma;
            let sqrt_u = u.map(f64::sqrt);
            let wr = linalg::scale_rows(&resid, &sqrt_u);
            let shrink = linalg::solve_lower(&prior.a_chol().l(), &(&gamma - prior.b()));
            prior.theta_inv() + wr.transpose() * wr + shrink.transpose() * shrink
        }
        PsiForm::Woodbury => psi_woodbury(u, data, prior)?,
        PsiForm::Textbook => {
            let b = prior.b();
            let uy = linalg::scale_rows(y, u);
            prior.theta_inv() + b.transpose() * prior.a_inv() * b + y.transpose() * uy - gamma.transpose() * &rhs
        }
    };
    Ok(PosteriorUpdate { psi: linalg::symmetrize(&psi), gamma, omega })
}

fn psi_woodbury(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior) -> Result<DMatrix<f64>> {
    let (x, y) = (data.x(), data.y());
    let mut k = x * prior.a() * x.transpose();
    for i in 0..data.n() {
        k[(i, i)] += 1.0 / u[i];
    }
    let k_chol = linalg::spd_cholesky(&linalg::symmetrize(&k), "U⁻¹ + XAXᵀ")
        .map_err(|e| Error::Numerical(format!("identity form of Ψ: {e}")))?;
    let r = x * prior.b() - y;
    let z = linalg::solve_lower(&k_chol.l(), &r);
    Ok(prior.theta_inv() + z.transpose() * z)
}

/// Max-abs difference between the literal `Ψ` formula and the identity form
/// `Θ⁻¹ + (XB−Y)ᵀ(U⁻¹+XAXᵀ)⁻¹(XB−Y)`.
pub fn psi_identity_residual(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior) -> Result<f64> {
    let textbook = compute_update_with(u, data, prior, PsiForm::Textbook)?.psi;
    let identity = compute_update_with(u, data, prior, PsiForm::Woodbury)?.psi;
    Ok(linalg::max_abs(&(textbook - identity)))
}

/// `δ_i = (y_i − βᵀx_i)ᵀ Σ⁻¹ (y_i − βᵀx_i)` for every row, with one
/// factorization of `Σ`.
pub fn mahalanobis_residuals(beta: &DMatrix<f64>, sigma: &DMatrix<f64>, data: &Dataset) -> Result<DVector<f64>> {
    if beta.shape() != (data.p(), data.d()) || sigma.shape() != (data.d(), data.d()) {
        return Err(dim(format!(
            "β {:?} / Σ {:?} do not match p = {}, d = {}",
            beta.shape(),
            sigma.shape(),
            data.p(),
            data.d()
        )));
    }
    let chol = linalg::spd_cholesky(sigma, "Σ")?;
    let resid = data.y() - data.x() * beta;
    let z = linalg::solve_lower(&chol.l(), &resid.transpose());
    Ok(DVector::from_iterator(data.n(), z.column_iter().map(|c| c.norm_squared())))
}

pub fn mahalanobis_for_state(state: &ChainState, data: &Dataset) -> Result<DVector<f64>> {
    mahalanobis_residuals(&state.beta, &state.sigma, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matvar::standard_normal_matrix;
    use crate::rng::substream;
    use rand::Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_instance(seed: u64, n: usize, p: usize, d: usize) -> (Dataset, NIWPrior, DVector<f64>) {
        let mut rng = substream(seed, 0);
        let x = standard_normal_matrix(n, p, &mut rng);
        let y = standard_normal_matrix(n, d, &mut rng) * 2.0;
        let g = standard_normal_matrix(p, p, &mut rng);
        let t = standard_normal_matrix(d, d, &mut rng);
        let prior = NIWPrior::new(
            standard_normal_matrix(p, d, &mut rng),
            &g * g.transpose() + DMatrix::identity(p, p),
            d as f64 + 1.5,
            &t * t.transpose() + DMatrix::identity(d, d),
        )
        .unwrap();
        let u = DVector::from_fn(n, |_, _| rng.random_range(0.05..4.0));
        (Dataset::new(x, y).unwrap(), prior, u)
    }

    #[test]
    fn all_zero_data() {
        let data = Dataset::new(scalar(0.0), scalar(0.0)).unwrap();
        let prior = NIWPrior::new(scalar(0.0), scalar(1.0), 1.0, scalar(1.0)).unwrap();
        let upd = compute_update(&DVector::from_element(1, 1.0), &data, &prior).unwrap();
        assert_eq!(upd.omega, scalar(1.0));
        assert_eq!(upd.gamma, scalar(0.0));
        assert_eq!(upd.psi, scalar(1.0));
    }

    #[test]
    fn hand_evaluated_psi() {
        // x=1, y=2, B=0, A=1, Θ=1, u=1: Ψ = 1 + 4/(1+1) = 3
        let data = Dataset::new(scalar(1.0), scalar(2.0)).unwrap();
        let prior = NIWPrior::new(scalar(0.0), scalar(1.0), 1.0, scalar(1.0)).unwrap();
        let u = DVector::from_element(1, 1.0);
        for form in [PsiForm::CompletedSquare, PsiForm::Woodbury, PsiForm::Textbook] {
            let psi = compute_update_with(&u, &data, &prior, form).unwrap().psi[(0, 0)];
            assert!((psi - 3.0).abs() < 1e-14, "{form:?}: {psi}");
        }
    }

    #[test]
    fn exact_fit_gives_prior_scale() {
        let mut rng = substream(9, 0);
        let x = standard_normal_matrix(6, 2, &mut rng);
        let b = standard_normal_matrix(2, 3, &mut rng);
        let data = Dataset::new(x.clone(), &x * &b).unwrap();
        let prior = NIWPrior::new(b, DMatrix::identity(2, 2), 4.0, DMatrix::identity(3, 3) * 2.0).unwrap();
        let u = DVector::from_element(6, 0.7);
        for form in [PsiForm::CompletedSquare, PsiForm::Woodbury] {
            let psi = compute_update_with(&u, &data, &prior, form).unwrap().psi;
            assert!((psi - prior.theta_inv()).amax() < 1e-12);
        }
    }

    #[test]
    fn psi_forms_agree_on_random_instances() {
        for seed in 0..50 {
            let (data, prior, u) = random_instance(seed, 12, 3, 2);
            let a = compute_update_with(&u, &data, &prior, PsiForm::CompletedSquare).unwrap().psi;
            let b = compute_update_with(&u, &data, &prior, PsiForm::Woodbury).unwrap().psi;
            let res = psi_identity_residual(&u, &data, &prior).unwrap();
            let scale = 1.0 + linalg::max_abs(&b);
            assert!(res <= 1e-9 * scale, "seed {seed}: {res}");
            assert!(linalg::max_abs(&(a - b)) <= 1e-9 * scale);
        }
    }

    #[test]
    fn vanishing_weights_recover_the_prior() {
        let (data, prior, _) = random_instance(3, 10, 2, 2);
        let u = DVector::from_element(10, 1e-12);
        for form in [PsiForm::CompletedSquare, PsiForm::Woodbury] {
            let upd = compute_update_with(&u, &data, &prior, form).unwrap();
            assert!((&upd.gamma - prior.b()).amax() < 1e-6);
            assert!((&upd.omega - prior.a()).amax() < 1e-6);
            assert!((&upd.psi - prior.theta_inv()).amax() < 1e-6);
        }
    }

    #[test]
    fn mahalanobis_cases() {
        let mut rng = substream(4, 0);
        let x = standard_normal_matrix(5, 2, &mut rng);
        let beta = standard_normal_matrix(2, 2, &mut rng);
        let data = Dataset::new(x.clone(), &x * &beta).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let delta = mahalanobis_residuals(&beta, &sigma, &data).unwrap();
        assert!(delta.amax() < 1e-20);

        let data = Dataset::new(scalar(0.0), scalar(2.0)).unwrap();
        let delta = mahalanobis_residuals(&scalar(5.0), &scalar(4.0), &data).unwrap();
        assert!((delta[0] - 1.0).abs() < 1e-15);

        let (data, _, _) = random_instance(5, 9, 3, 3);
        let beta = standard_normal_matrix(3, 3, &mut rng);
        let g = standard_normal_matrix(3, 3, &mut rng);
        let sigma = &g * g.transpose() + DMatrix::identity(3, 3);
        let fast = mahalanobis_residuals(&beta, &sigma, &data).unwrap();
        let sigma_inv = sigma.clone().try_inverse().unwrap();
        for i in 0..data.n() {
            let r = data.y().row(i).transpose() - beta.transpose() * data.x().row(i).transpose();
            let naive = (r.transpose() * &sigma_inv * &r)[(0, 0)];
            assert!((fast[i] - naive).abs() < 1e-12 * (1.0 + naive));
        }
    }

    #[test]
    fn validation() {
        assert!(Dataset::new(DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 1), DMatrix::zeros(3, 1)).is_err());
        assert!(Dataset::new(scalar(f64::NAN), scalar(0.0)).is_err());
        assert!(NIWPrior::new(scalar(0.0), scalar(-1.0), 1.0, scalar(1.0)).is_err());
        assert!(NIWPrior::new(DMatrix::zeros(1, 2), scalar(1.0), 1.0, DMatrix::identity(2, 2)).is_err());
        let data = Dataset::new(scalar(1.0), scalar(1.0)).unwrap();
        let prior = NIWPrior::new(scalar(0.0), scalar(1.0), 1.0, scalar(1.0)).unwrap();
        assert!(compute_update(&DVector::from_element(1, 0.0), &data, &prior).is_err());
        assert!(compute_update(&DVector::from_element(2, 1.0), &data, &prior).is_err());
    }
}
