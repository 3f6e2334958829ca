//! The two data-augmentation chains and the chain runner.
//!
//! One scan of either chain draws every `u_i` given `(β, Σ)`, then `Σ` given
//! `u`, then `β` given `(Σ, u)`. The building blocks are public so that
//! alternative kernels (for instance a deliberately broken one in a
//! correctness test) can be assembled from the same pieces.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::matvar::{self, InverseWishartParams, MatrixNormalParams};
use crate::mixing::MixingDensity;
use crate::model::{self, ChainState, Dataset, NIWPrior};
use crate::rng::{substream, Stream};

/// Floor applied to every latent weight draw.
pub const U_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum SamplerSpec {
    /// Normal–inverse-Wishart prior with an arbitrary mixing density.
    Proper { prior: NIWPrior, mixing: MixingDensity },
    /// `π(β, Σ) ∝ |Σ|^{-(d+1)/2}` with Student-t errors on `nu_t` degrees of freedom.
    ImproperT { nu_t: f64 },
}

impl SamplerSpec {
    pub fn proper(prior: NIWPrior, mixing: MixingDensity) -> Self {
        Self::Proper { prior, mixing }
    }

    pub fn improper_t(nu_t: f64) -> Result<Self> {
        if !(nu_t.is_finite() && nu_t > 0.0) {
            return Err(invalid(format!("Student-t degrees of freedom must be positive, got {nu_t}")));
        }
        Ok(Self::ImproperT { nu_t })
    }

    /// Checks the sampler against a dataset. The improper chain needs
    /// `n ≥ p + d` and `(X, Y)` of full column rank for a proper posterior.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        match self {
            Self::Proper { prior, .. } => prior.check_against(data),
            Self::ImproperT { nu_t } => {
                if !(nu_t.is_finite() && *nu_t > 0.0) {
                    return Err(invalid(format!("Student-t degrees of freedom must be positive, got {nu_t}")));
                }
                data.require_full_rank_stacked()
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("sampler spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Proper { .. } => "proper",
            Self::ImproperT { .. } => "improper_t",
        }
    }
}

/// Result of one scan: the new state and how many weights hit [`U_FLOOR`].
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: ChainState,
    pub clamped: usize,
}

/// Draws every `u_i` from `∝ h(u) u^{d/2} e^{-uδ_i/2}` given `δ`.
pub fn sample_weights<R: Rng + ?Sized>(
    delta: &DVector<f64>,
    d: usize,
    h: &MixingDensity,
    rng: &mut R,
) -> Result<(DVector<f64>, usize)> {
    let mut clamped = 0;
    let mut u = DVector::zeros(delta.len());
    for (i, &di) in delta.iter().enumerate() {
        let v = h.sample_conditional(di, d, rng)?;
        if !(v >= U_FLOOR) {
            if v.is_nan() {
                return Err(Error::Sampling(format!("latent weight {i} is NaN (δ = {di})")));
            }
            clamped += 1;
            u[i] = U_FLOOR;
        } else {
            u[i] = v;
        }
    }
    Ok((u, clamped))
}

/// `(Σ, β) | u` under the proper prior: `Σ ~ IW_d(n+ν, Ψ⁻¹)`, `β ~ N_{p,d}(Γ, Ω, Σ)`.
pub fn sample_beta_sigma_proper<R: Rng + ?Sized>(
    u: &DVector<f64>,
    data: &Dataset,
    prior: &NIWPrior,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let upd = model::compute_update(u, data, prior)?;
    let iw = InverseWishartParams::new(data.n() as f64 + prior.nu(), upd.psi)?;
    let sigma = matvar::sample_inverse_wishart(&iw, rng);
    let beta = matvar::sample_matrix_normal(&MatrixNormalParams::new(upd.gamma, upd.omega, sigma.clone())?, rng);
    Ok((beta, sigma))
}

pub fn step_proper<R: Rng + ?Sized>(
    state: &ChainState,
    data: &Dataset,
    prior: &NIWPrior,
    h: &MixingDensity,
    rng: &mut R,
) -> Result<Transition> {
    let delta = model::mahalanobis_for_state(state, data)?;
    let (u, clamped) = sample_weights(&delta, data.d(), h, rng)?;
    let (beta, sigma) = sample_beta_sigma_proper(&u, data, prior, rng)?;
    Ok(Transition { state: ChainState { beta, sigma, u }, clamped })
}

/// Conditional posterior of `(β, Σ)` given `u` under the improper prior.
#[derive(Debug, Clone, Serialize)]
pub struct ImproperUpdate {
    /// `(XᵀUX)⁻¹ XᵀUY`
    pub gamma: DMatrix<f64>,
    /// `(XᵀUX)⁻¹`
    pub omega: DMatrix<f64>,
    /// `(Y − XΓ)ᵀ U (Y − XΓ)`
    pub s: DMatrix<f64>,
}

pub fn improper_update(u: &DVector<f64>, data: &Dataset) -> Result<ImproperUpdate> {
    model::check_weights(u, data.n())?;
    let (x, y) = (data.x(), data.y());
    let ux = linalg::scale_rows(x, u);
    let xtux = linalg::symmetrize(&(x.transpose() * &ux));
    let chol = linalg::spd_cholesky(&xtux, "XᵀUX").map_err(|e| {
        Error::Numerical(format!("{e}; min u = {:e}, max u = {:e}", u.min(), u.max()))
    })?;
    let gamma = chol.solve(&(ux.transpose() * y));
    let omega = linalg::symmetrize(&chol.inverse());
    let sqrt_u = u.map(f64::sqrt);
    let wr = linalg::scale_rows(&(y - x * &gamma), &sqrt_u);
    let s = linalg::symmetrize(&(wr.transpose() * wr));
    Ok(ImproperUpdate { gamma, omega, s })
}

/// `(Σ, β) | u` under the improper prior: `Σ ~ IW_d(n−p, S⁻¹)`, `β ~ N_{p,d}(Γ, (XᵀUX)⁻¹, Σ)`.
pub fn sample_beta_sigma_improper<R: Rng + ?Sized>(
    u: &DVector<f64>,
    data: &Dataset,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let upd = improper_update(u, data)?;
    let dof = (data.n() - data.p()) as f64;
    let iw = InverseWishartParams::new(dof, upd.s)
        .map_err(|e| Error::Numerical(format!("residual cross-product: {e}")))?;
    let sigma = matvar::sample_inverse_wishart(&iw, rng);
    let beta = matvar::sample_matrix_normal(&MatrixNormalParams::new(upd.gamma, upd.omega, sigma.clone())?, rng);
    Ok((beta, sigma))
}

/// One scan of the improper-prior chain. `u_i ~ Gamma((ν_t+d)/2, rate (ν_t+δ_i)/2)`.
pub fn step_improper<R: Rng + ?Sized>(
    state: &ChainState,
    data: &Dataset,
    nu_t: f64,
    rng: &mut R,
) -> Result<Transition> {
    if data.n() < data.p() + data.d() {
        return Err(Error::Precondition(format!(
            "improper prior needs n ≥ p + d, got n = {}, p + d = {}",
            data.n(),
            data.p() + data.d()
        )));
    }
    let h = MixingDensity::student_t(nu_t)?;
    let delta = model::mahalanobis_for_state(state, data)?;
    let (u, clamped) = sample_weights(&delta, data.d(), &h, rng)?;
    let (beta, sigma) = sample_beta_sigma_improper(&u, data, rng)?;
    Ok(Transition { state: ChainState { beta, sigma, u }, clamped })
}

pub fn step<R: Rng + ?Sized>(spec: &SamplerSpec, state: &ChainState, data: &Dataset, rng: &mut R) -> Result<Transition> {
    match spec {
        SamplerSpec::Proper { prior, mixing } => step_proper(state, data, prior, mixing, rng),
        SamplerSpec::ImproperT { nu_t } => step_improper(state, data, *nu_t, rng),
    }
}

/// Least-squares start: `β = X⁺Y`, `Σ = RᵀR/n + 10⁻⁶·I`, `u = 1`.
pub fn default_init(data: &Dataset) -> Result<ChainState> {
    let svd = data.x().clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = data.n().max(data.p()) as f64 * smax * f64::EPSILON;
    let beta = svd.solve(data.y(), eps).map_err(|e| Error::Numerical(format!("least-squares start: {e}")))?;
    let r = data.y() - data.x() * &beta;
    let d = data.d();
    let sigma = linalg::symmetrize(&(r.transpose() * r / data.n() as f64)) + DMatrix::identity(d, d) * 1e-6;
    ChainState::new(beta, sigma, DVector::from_element(data.n(), 1.0))
}

/// Draws `(β, Σ)` from the proper prior.
pub fn sample_prior<R: Rng + ?Sized>(prior: &NIWPrior, rng: &mut R) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let iw = InverseWishartParams::new(prior.nu(), prior.theta_inv().clone())?;
    let sigma = matvar::sample_inverse_wishart(&iw, rng);
    let mn = MatrixNormalParams::new(prior.b().clone(), prior.a().clone(), sigma.clone())?;
    Ok((matvar::sample_matrix_normal(&mn, rng), sigma))
}

/// `y_i ~ N(βᵀx_i, Σ/u_i)` for every row of `x`.
pub fn sample_response<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if u.len() != x.nrows() || beta.nrows() != x.ncols() || sigma.nrows() != beta.ncols() {
        return Err(crate::error::dim("shapes of X, β, Σ and u do not agree"));
    }
    let l = linalg::spd_cholesky(sigma, "Σ")?.l();
    let z = matvar::standard_normal_matrix(x.nrows(), beta.ncols(), rng);
    let inv_sqrt_u = u.map(|v| 1.0 / v.sqrt());
    Ok(x * beta + linalg::scale_rows(&(z * l.transpose()), &inv_sqrt_u))
}

/// Synthetic data from the generative model: `X` standard normal (first
/// column all ones if `intercept`), `u_i ~ h`, `y_i ~ N(βᵀx_i, Σ/u_i)`.
pub fn simulate_dataset<R: Rng + ?Sized>(
    n: usize,
    beta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    h: &MixingDensity,
    intercept: bool,
    rng: &mut R,
) -> Result<(Dataset, DVector<f64>)> {
    if n == 0 {
        return Err(invalid("need at least one observation"));
    }
    let p = beta.nrows();
    let mut x = matvar::standard_normal_matrix(n, p, rng);
    if intercept && p > 0 {
        x.column_mut(0).fill(1.0);
    }
    let mut u = DVector::zeros(n);
    for i in 0..n {
        u[i] = h.sample(rng)?.max(U_FLOOR);
    }
    let y = sample_response(&x, beta, sigma, &u, rng)?;
    Ok((Dataset::new(x, y)?, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChainSettings {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl ChainSettings {
    pub fn new(iters: usize, burnin: usize, thin: usize) -> Result<Self> {
        if iters <= burnin {
            return Err(invalid(format!("iterations ({iters}) must exceed burn-in ({burnin})")));
        }
        if thin == 0 {
            return Err(invalid("thinning interval must be at least 1"));
        }
        Ok(Self { iters, burnin, thin })
    }

    /// `⌊(iters − burnin) / thin⌋`
    pub fn stored(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceMeta {
    pub sampler: String,
    pub fingerprint: String,
    pub seed: u64,
    pub chain: u64,
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub stored: usize,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    /// Latent weights raised to the floor over the whole run.
    pub clamped_weights: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub states: Vec<ChainState>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Column names: `beta_r_c` (row-major), `sigma_r_c` for `r ≤ c`, then
    /// optionally `u_i`. Indices are 1-based.
    pub fn columns(&self, emit_u: bool) -> Vec<String> {
        let (p, d, n) = (self.meta.p, self.meta.d, self.meta.n);
        let mut cols = Vec::new();
        for r in 0..p {
            for c in 0..d {
                cols.push(format!("beta_{}_{}", r + 1, c + 1));
            }
        }
        for r in 0..d {
            for c in r..d {
                cols.push(format!("sigma_{}_{}", r + 1, c + 1));
            }
        }
        if emit_u {
            cols.extend((0..n).map(|i| format!("u_{}", i + 1)));
        }
        cols
    }

    /// One row per stored state, in the order of [`Trace::columns`].
    pub fn row(state: &ChainState, emit_u: bool) -> Vec<f64> {
        let (p, d) = state.beta.shape();
        let mut row = Vec::new();
        for r in 0..p {
            for c in 0..d {
                row.push(state.beta[(r, c)]);
            }
        }
        for r in 0..d {
            for c in r..d {
                row.push(state.sigma[(r, c)]);
            }
        }
        if emit_u {
            row.extend(state.u.iter().copied());
        }
        row
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, emit_u: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.columns(emit_u))?;
        for s in &self.states {
            w.write_record(Self::row(s, emit_u).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_meta_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, &self.meta)
    }
}

/// Runs chain `chain` of a fit on sub-stream `chain` of `seed`.
pub fn run_chain_indexed(
    spec: &SamplerSpec,
    data: &Dataset,
    init: Option<&ChainState>,
    settings: ChainSettings,
    seed: u64,
    chain: u64,
) -> Result<Trace> {
    spec.validate(data)?;
    let mut state = match init {
        Some(s) => {
            s.validate()?;
            s.check_against(data)?;
            s.clone()
        }
        None => default_init(data)?,
    };
    let mut rng: Stream = substream(seed, chain);
    let mut states = Vec::with_capacity(settings.stored());
    let mut clamped = 0u64;
    for t in 1..=settings.iters {
        let tr = step(spec, &state, data, &mut rng).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {t}: {m}")),
            other => other,
        })?;
        clamped += tr.clamped as u64;
        state = tr.state;
        if t > settings.burnin && (t - settings.burnin).is_multiple_of(settings.thin) {
            states.push(state.clone());
        }
    }
    let meta = TraceMeta {
        sampler: spec.kind().to_string(),
        fingerprint: spec.fingerprint(),
        seed,
        chain,
        iters: settings.iters,
        burnin: settings.burnin,
        thin: settings.thin,
        stored: states.len(),
        n: data.n(),
        p: data.p(),
        d: data.d(),
        clamped_weights: clamped,
    };
    Ok(Trace { states, meta })
}

pub fn run_chain(
    spec: &SamplerSpec,
    data: &Dataset,
    init: Option<&ChainState>,
    settings: ChainSettings,
    seed: u64,
) -> Result<Trace> {
    run_chain_indexed(spec, data, init, settings, seed, 0)
}

/// Runs `chains` independent chains in parallel; chain `k` uses sub-stream `k`.
pub fn run_chains(
    spec: &SamplerSpec,
    data: &Dataset,
    init: Option<&ChainState>,
    settings: ChainSettings,
    seed: u64,
    chains: usize,
) -> Result<Vec<Trace>> {
    (0..chains as u64)
        .into_par_iter()
        .map(|k| run_chain_indexed(spec, data, init, settings, seed, k))
        .collect()
}
