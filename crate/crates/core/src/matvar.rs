//! Matrix-normal and inverse-Wishart kernels.
//!
//! Conventions used throughout the crate:
//!
//! * `β ~ N_{p,d}(Γ, Ω, Σ)` has density proportional to
//!   `etr{-Ω⁻¹(β-Γ)Σ⁻¹(β-Γ)ᵀ/2}`: `Ω` is the `p × p` row covariance and `Σ`
//!   the `d × d` column covariance, so `vec(β)` has covariance `Σ ⊗ Ω`.
//! * `Σ ~ IW_d(m, Ψ⁻¹)` means `Σ⁻¹ ~ Wishart_d(m, Ψ⁻¹)`. It is parameterized
//!   here by the degrees of freedom `m` and the inverse scale `Ψ`, so that
//!   `E[Σ⁻¹] = m Ψ⁻¹` and the density is
//!   `∝ |Ψ|^{m/2} |Σ|^{-(m+d+1)/2} etr(-ΨΣ⁻¹/2)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{dim, invalid, Result};
use crate::linalg::{self, Chol};

#[derive(Debug, Clone)]
pub struct MatrixNormalParams {
    mean: DMatrix<f64>,
    row_cov: DMatrix<f64>,
    col_cov: DMatrix<f64>,
    row_chol: Chol,
    col_chol: Chol,
}

impl MatrixNormalParams {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        if row_cov.nrows() != mean.nrows() || col_cov.nrows() != mean.ncols() {
            return Err(dim(format!(
                "matrix normal: mean is {}x{}, row covariance {}x{}, column covariance {}x{}",
                mean.nrows(),
                mean.ncols(),
                row_cov.nrows(),
                row_cov.ncols(),
                col_cov.nrows(),
                col_cov.ncols()
            )));
        }
        let row_chol = linalg::spd_cholesky(&row_cov, "matrix-normal row covariance")
            .map_err(|e| invalid(e.to_string()))?;
        let col_chol = linalg::spd_cholesky(&col_cov, "matrix-normal column covariance")
            .map_err(|e| invalid(e.to_string()))?;
        Ok(Self { mean, row_cov, col_cov, row_chol, col_chol })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn row_cov(&self) -> &DMatrix<f64> {
        &self.row_cov
    }

    pub fn col_cov(&self) -> &DMatrix<f64> {
        &self.col_cov
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mean.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct InverseWishartParams {
    dof: f64,
    inv_scale: DMatrix<f64>,
    inv_scale_chol: Chol,
}

impl InverseWishartParams {
    pub fn new(dof: f64, inv_scale: DMatrix<f64>) -> Result<Self> {
        let d = inv_scale.nrows();
        if !(dof.is_finite() && dof > d as f64 - 1.0) {
            return Err(invalid(format!("inverse Wishart needs dof > d - 1 = {}, got {dof}", d as f64 - 1.0)));
        }
        let inv_scale_chol =
            linalg::spd_cholesky(&inv_scale, "inverse-Wishart inverse scale").map_err(|e| invalid(e.to_string()))?;
        Ok(Self { dof, inv_scale, inv_scale_chol })
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn inv_scale(&self) -> &DMatrix<f64> {
        &self.inv_scale
    }

    pub fn dim(&self) -> usize {
        self.inv_scale.nrows()
    }

    /// `E[Σ⁻¹] = m Ψ⁻¹`.
    pub fn mean_precision(&self) -> DMatrix<f64> {
        linalg::symmetrize(&self.inv_scale_chol.inverse()) * self.dof
    }
}

/// A `rows × cols` matrix of independent standard normals, filled in
/// column-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `Γ + L_Ω E L_Σᵀ` for a given noise matrix `E`. This is the deterministic
/// core of [`sample_matrix_normal`] and doubles as the noise-injection hook.
pub fn matrix_normal_from_noise(params: &MatrixNormalParams, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if noise.shape() != params.mean.shape() {
        return Err(dim(format!("noise is {:?}, mean is {:?}", noise.shape(), params.mean.shape())));
    }
    let lo = params.row_chol.l();
    let ls = params.col_chol.l();
    Ok(&params.mean + lo * noise * ls.transpose())
}

pub fn sample_matrix_normal<R: Rng + ?Sized>(params: &MatrixNormalParams, rng: &mut R) -> DMatrix<f64> {
    let noise = standard_normal_matrix(params.rows(), params.cols(), rng);
    matrix_normal_from_noise(params, &noise).expect("noise shape matches by construction")
}

/// Lower-triangular Bartlett factor `T` with `T Tᵀ ~ Wishart_d(m, I)`.
fn bartlett_factor<R: Rng + ?Sized>(d: usize, dof: f64, rng: &mut R) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).expect("dof > d - 1 checked at construction");
        t[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            t[(i, j)] = StandardNormal.sample(rng);
        }
    }
    t
}

/// Draws `Σ` with `Σ⁻¹ ~ Wishart_d(m, Ψ⁻¹)`.
///
/// With `Ψ = L Lᵀ` and the Bartlett factor `T`, `Σ⁻¹ = L⁻ᵀ T Tᵀ L⁻¹`, hence
/// `Σ = G Gᵀ` with `G = L T⁻ᵀ`; no explicit inverse of `Ψ` is formed.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(params: &InverseWishartParams, rng: &mut R) -> DMatrix<f64> {
    let d = params.dim();
    let t = bartlett_factor(d, params.dof, rng);
    let t_inv = t
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .expect("Bartlett diagonal is positive almost surely");
    let g = params.inv_scale_chol.l() * t_inv.transpose();
    linalg::symmetrize(&(&g * g.transpose()))
}

/// `log Γ_d(a) = d(d-1)/4 · log π + Σ_{g=1}^{d} log Γ(a + (1-g)/2)`.
pub fn ln_multivariate_gamma(d: usize, a: f64) -> f64 {
    let mut acc = (d * d.saturating_sub(1)) as f64 / 4.0 * PI.ln();
    for g in 1..=d {
        acc += libm::lgamma(a + (1.0 - g as f64) / 2.0);
    }
    acc
}

pub fn matnorm_logpdf(beta: &DMatrix<f64>, params: &MatrixNormalParams) -> Result<f64> {
    if beta.shape() != params.mean.shape() {
        return Err(dim(format!("β is {:?}, mean is {:?}", beta.shape(), params.mean.shape())));
    }
    let (p, d) = (params.rows() as f64, params.cols() as f64);
    let resid = beta - &params.mean;
    // ‖L_Ω⁻¹ R L_Σ⁻ᵀ‖²_F = tr(Ω⁻¹ R Σ⁻¹ Rᵀ)
    let z = linalg::solve_lower(&params.row_chol.l(), &resid);
    let w = linalg::solve_lower(&params.col_chol.l(), &z.transpose());
    let quad = w.norm_squared();
    Ok(-0.5 * p * d * (2.0 * PI).ln()
        - 0.5 * d * linalg::log_det(&params.row_chol)
        - 0.5 * p * linalg::log_det(&params.col_chol)
        - 0.5 * quad)
}

pub fn invwishart_logpdf(sigma: &DMatrix<f64>, params: &InverseWishartParams) -> Result<f64> {
    let d = params.dim();
    if sigma.shape() != (d, d) {
        return Err(dim(format!("Σ is {:?}, expected {d}x{d}", sigma.shape())));
    }
    let sigma_chol = linalg::spd_cholesky(sigma, "Σ")?;
    let m = params.dof;
    let df = d as f64;
    let tr = sigma_chol.solve(&params.inv_scale).trace();
    Ok(0.5 * m * linalg::log_det(&params.inv_scale_chol)
        - 0.5 * m * df * std::f64::consts::LN_2
        - ln_multivariate_gamma(d, 0.5 * m)
        - 0.5 * (m + df + 1.0) * linalg::log_det(&sigma_chol)
        - 0.5 * tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn spd(rng: &mut crate::rng::Stream, k: usize) -> DMatrix<f64> {
        let a = standard_normal_matrix(k, k, rng);
        &a * a.transpose() + DMatrix::identity(k, k) * 0.5
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut rng = substream(1, 0);
        let mean = standard_normal_matrix(3, 2, &mut rng);
        let params = MatrixNormalParams::new(mean.clone(), spd(&mut rng, 3), spd(&mut rng, 2)).unwrap();
        let out = matrix_normal_from_noise(&params, &DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(out, mean);
    }

    #[test]
    fn scalar_matrix_normal_variance() {
        let params =
            MatrixNormalParams::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 3.0))
                .unwrap();
        let mut rng = substream(2, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_matrix_normal(&params, &mut rng)[(0, 0)]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // SE of the sample variance of a normal: σ²·sqrt(2/(n-1))
        let se = 6.0 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 6.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn kronecker_covariance() {
        let mut rng = substream(3, 0);
        let omega = spd(&mut rng, 2);
        let sigma = spd(&mut rng, 2);
        let params = MatrixNormalParams::new(DMatrix::zeros(2, 2), omega.clone(), sigma.clone()).unwrap();
        let target = sigma.kronecker(&omega);
        let n = 100_000;
        let draws: Vec<DMatrix<f64>> = (0..n).map(|_| sample_matrix_normal(&params, &mut rng)).collect();
        for a in 0..4 {
            for b in 0..4 {
                // vec() is column-stacking: entry k = (k % 2, k / 2)
                let prods: Vec<f64> =
                    draws.iter().map(|m| m[(a % 2, a / 2)] * m[(b % 2, b / 2)]).collect();
                let mean = prods.iter().sum::<f64>() / n as f64;
                let sd = (prods.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                let se = sd / (n as f64).sqrt();
                assert!(
                    (mean - target[(a, b)]).abs() < 3.0 * se,
                    "entry ({a},{b}): {mean} vs {}",
                    target[(a, b)]
                );
            }
        }
    }

    #[test]
    fn scalar_inverse_wishart_precision_is_gamma() {
        // d=1, m=4, Ψ=2: Σ⁻¹ ~ Wishart_1(4, 1/2) = Gamma(shape 2, rate 1), mean 2
        let params = InverseWishartParams::new(4.0, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let mut rng = substream(4, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| 1.0 / sample_inverse_wishart(&params, &mut rng)[(0, 0)]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (2.0_f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn inverse_wishart_mean_precision() {
        let mut rng = substream(5, 0);
        let psi = spd(&mut rng, 3);
        let params = InverseWishartParams::new(5.5, psi).unwrap();
        let target = params.mean_precision();
        let n = 100_000;
        let draws: Vec<DMatrix<f64>> = (0..n)
            .map(|_| {
                let s = sample_inverse_wishart(&params, &mut rng);
                assert!(linalg::is_spd(&s));
                linalg::spd_inverse(&s, "Σ").unwrap()
            })
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let xs: Vec<f64> = draws.iter().map(|m| m[(i, j)]).collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                assert!((mean - target[(i, j)]).abs() < 3.0 * sd / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn inverse_wishart_rejects_low_dof() {
        assert!(InverseWishartParams::new(1.01, DMatrix::identity(2, 2)).is_ok());
        assert!(InverseWishartParams::new(0.99, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn matnorm_logpdf_standard_mode() {
        let params =
            MatrixNormalParams::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let v = matnorm_logpdf(&DMatrix::zeros(1, 1), &params).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn matnorm_logpdf_integrates_to_one() {
        let params = MatrixNormalParams::new(
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 0.7),
            DMatrix::from_element(1, 1, 1.9),
        )
        .unwrap();
        let f = |x: f64| matnorm_logpdf(&DMatrix::from_element(1, 1, x), &params).unwrap().exp();
        let v = crate::quadrature::integrate(f, -20.0, 20.0, 1e-12, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matnorm_logpdf_matches_kronecker_mvn() {
        let mut rng = substream(6, 0);
        let (p, d) = (3, 2);
        let omega = spd(&mut rng, p);
        let sigma = spd(&mut rng, d);
        let mean = standard_normal_matrix(p, d, &mut rng);
        let beta = standard_normal_matrix(p, d, &mut rng);
        let params = MatrixNormalParams::new(mean.clone(), omega.clone(), sigma.clone()).unwrap();
        // Oracle: multivariate normal of vec(β) with covariance Σ ⊗ Ω.
        let cov = sigma.kronecker(&omega);
        let x = DMatrix::from_column_slice(p * d, 1, (&beta - &mean).as_slice());
        let cov_inv = cov.clone().try_inverse().unwrap();
        let quad = (x.transpose() * cov_inv * &x)[(0, 0)];
        let oracle = -0.5 * (p * d) as f64 * (2.0 * PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * quad;
        let v = matnorm_logpdf(&beta, &params).unwrap();
        assert!((v - oracle).abs() < 1e-10 * (1.0 + oracle.abs()));
    }

    #[test]
    fn invwishart_scalar_is_inverse_gamma() {
        // d=1: Σ ~ inverse-gamma(shape m/2, rate Ψ/2)
        let (m, psi) = (5.3, 1.7);
        let params = InverseWishartParams::new(m, DMatrix::from_element(1, 1, psi)).unwrap();
        for s in [0.05_f64, 0.4, 1.0, 3.3, 12.0] {
            let (a, b) = (m / 2.0, psi / 2.0);
            let oracle = a * b.ln() - libm::lgamma(a) - (a + 1.0) * s.ln() - b / s;
            let v = invwishart_logpdf(&DMatrix::from_element(1, 1, s), &params).unwrap();
            assert!((v - oracle).abs() < 1e-10 * (1.0 + oracle.abs()), "{v} vs {oracle}");
        }
    }

    #[test]
    fn invwishart_scalar_integrates_to_one() {
        let params = InverseWishartParams::new(4.5, DMatrix::from_element(1, 1, 2.0)).unwrap();
        let f = |s: f64| {
            if s <= 0.0 {
                0.0
            } else {
                invwishart_logpdf(&DMatrix::from_element(1, 1, s), &params).unwrap().exp()
            }
        };
        let v = crate::quadrature::integrate(f, 0.0, 1e4, 1e-10, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn invwishart_rotation_invariance() {
        let mut rng = substream(8, 0);
        let psi = spd(&mut rng, 3);
        let sigma = spd(&mut rng, 3);
        let q = standard_normal_matrix(3, 3, &mut rng).qr().q();
        let a = invwishart_logpdf(&sigma, &InverseWishartParams::new(6.0, psi.clone()).unwrap()).unwrap();
        let rot = |m: &DMatrix<f64>| linalg::symmetrize(&(&q * m * q.transpose()));
        let b = invwishart_logpdf(&rot(&sigma), &InverseWishartParams::new(6.0, rot(&psi)).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }
}
