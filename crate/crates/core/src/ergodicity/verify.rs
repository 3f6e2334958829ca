//! Monte-Carlo counterparts of the exact formulas in the parent module, and
//! a suite that runs them all against one dataset.
//!
//! Replicates are split into blocks of [`BLOCK`] draws. Block `j` of a run
//! tagged `tag` uses stream `VERIFY_BASE + tag·2²⁰ + j` of the master seed;
//! blocks run in parallel and are merged in block order, so results do not
//! depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::*;
use crate::gibbs::{self, SamplerSpec};
use crate::matvar::{self, standard_normal_matrix};
use crate::rng::{substream, Stream, VERIFY_BASE};

pub const BLOCK: usize = 1000;
const TAG_SHIFT: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub reps: usize,
}

/// Replicate count, master seed and a tag separating independent runs.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub reps: usize,
    pub seed: u64,
    pub tag: u64,
}

impl McConfig {
    pub fn new(reps: usize, seed: u64, tag: u64) -> Self {
        Self { reps, seed, tag }
    }

    fn stream(&self, block: usize) -> Stream {
        substream(self.seed, VERIFY_BASE + (self.tag << TAG_SHIFT) + block as u64)
    }
}

#[derive(Clone, Copy, Default)]
struct Running {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, o: Running) -> Running {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Running { n, mean: self.mean + delta * o.n / n, m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n }
    }

    fn estimate(&self) -> McEstimate {
        let var = if self.n > 1.0 { self.m2 / (self.n - 1.0) } else { f64::NAN };
        McEstimate { mean: self.mean, se: (var / self.n).sqrt(), reps: self.n as usize }
    }
}

/// Means of `k` functionals of `cfg.reps` independent replicates of `draw`.
pub fn mc_means<F>(cfg: McConfig, k: usize, draw: F) -> Result<Vec<McEstimate>>
where
    F: Fn(&mut Stream) -> Result<Vec<f64>> + Sync,
{
    if cfg.reps < 2 {
        return Err(invalid("Monte-Carlo estimates need at least two replicates"));
    }
    let blocks = cfg.reps.div_ceil(BLOCK);
    let partial: Vec<Result<Vec<Running>>> = (0..blocks)
        .into_par_iter()
        .map(|j| {
            let mut rng = cfg.stream(j);
            let mut acc = vec![Running::default(); k];
            for _ in 0..BLOCK.min(cfg.reps - j * BLOCK) {
                let v = draw(&mut rng)?;
                if v.len() != k {
                    return Err(dim(format!("replicate returned {} values, expected {k}", v.len())));
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    a.push(x);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Running::default(); k];
    for block in partial {
        for (t, b) in total.iter_mut().zip(block?) {
            *t = t.merge(b);
        }
    }
    Ok(total.iter().map(Running::estimate).collect())
}

pub fn mc_mean<F>(cfg: McConfig, draw: F) -> Result<McEstimate>
where
    F: Fn(&mut Stream) -> Result<f64> + Sync,
{
    Ok(mc_means(cfg, 1, |rng| Ok(vec![draw(rng)?]))?[0])
}

/// MC estimate of `E[V | u]` from draws of `(β, Σ) | u` under the proper prior.
pub fn mc_cond_mean_v_proper(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior, cfg: McConfig) -> Result<McEstimate> {
    let upd = model::compute_update(u, data, prior)?;
    let iw = InverseWishartParams::new(data.n() as f64 + prior.nu(), upd.psi.clone())?;
    let l_omega = linalg::spd_cholesky(&upd.omega, "Ω")?.l();
    mc_mean(cfg, |rng| {
        let sigma = matvar::sample_inverse_wishart(&iw, rng);
        let l_sigma = linalg::spd_cholesky(&sigma, "Σ")?.l();
        let e = standard_normal_matrix(data.p(), data.d(), rng);
        let beta = &upd.gamma + &l_omega * e * l_sigma.transpose();
        energy_proper(&ChainState { beta, sigma, u: u.clone() }, data)
    })
}

/// MC estimate of `E[V_{C₀} | u]` from draws of `(β, Σ) | u` under the improper prior.
pub fn mc_cond_mean_v_improper(u: &DVector<f64>, data: &Dataset, cfg: McConfig) -> Result<McEstimate> {
    let upd = gibbs::improper_update(u, data)?;
    let iw = InverseWishartParams::new((data.n() - data.p()) as f64, upd.s.clone())?;
    let l_omega = linalg::spd_cholesky(&upd.omega, "(XᵀUX)⁻¹")?.l();
    mc_mean(cfg, |rng| {
        let sigma = matvar::sample_inverse_wishart(&iw, rng);
        let l_sigma = linalg::spd_cholesky(&sigma, "Σ")?.l();
        let e = standard_normal_matrix(data.p(), data.d(), rng);
        let beta = &upd.gamma + &l_omega * e * l_sigma.transpose();
        energy_quadratic(&ChainState { beta, sigma, u: u.clone() })
    })
}

/// MC estimate of `E[V(β′, Σ′) | β°, Σ°]` after one scan of the proper chain.
pub fn mc_drift_proper(
    start: &ChainState,
    data: &Dataset,
    prior: &NIWPrior,
    h: &MixingDensity,
    cfg: McConfig,
) -> Result<McEstimate> {
    mc_mean(cfg, |rng| {
        let next = gibbs::step_proper(start, data, prior, h, rng)?.state;
        energy_proper(&next, data)
    })
}

/// MC estimate of `E[V_{C₀}(β′, Σ′) | β°, Σ°]` after one scan of the improper chain.
pub fn mc_drift_improper(start: &ChainState, data: &Dataset, nu_t: f64, cfg: McConfig) -> Result<McEstimate> {
    mc_mean(cfg, |rng| {
        let next = gibbs::step_improper(start, data, nu_t, rng)?.state;
        energy_quadratic(&next)
    })
}

/// Comparison of `E[p(β, Σ | u) | β°, Σ°]` with the minorization bound at one
/// point. Both sides are divided by `exp(log_shift)`.
#[derive(Debug, Clone, Serialize)]
pub struct MinorizationCheck {
    pub log_shift: f64,
    pub lhs: McEstimate,
    pub bound: f64,
    pub log_bound: f64,
    /// `lhs.mean ≥ bound − 3·lhs.se`
    pub holds: bool,
}

/// Evaluates the minorization inequality at every point in `points` for the
/// start `(β°, Σ°)`, sharing the `u` draws across points.
pub fn mc_minorization(
    points: &[(DMatrix<f64>, DMatrix<f64>)],
    start: &ChainState,
    data: &Dataset,
    prior: &NIWPrior,
    h: &MixingDensity,
    cfg: McConfig,
) -> Result<Vec<MinorizationCheck>> {
    let mb = MinorizationBound::new(data, prior, h)?;
    let delta = model::mahalanobis_for_state(start, data)?;
    let mut u_bar = DVector::zeros(data.n());
    for i in 0..data.n() {
        u_bar[i] = h.conditional_moment(delta[i], data.d(), 1.0)?.value.max(gibbs::U_FLOOR);
    }
    let mut log_bounds = Vec::with_capacity(points.len());
    let mut shifts = Vec::with_capacity(points.len());
    for (beta, sigma) in points {
        let lb = mb.log_bound(beta, sigma)?;
        let typical = log_conditional_density(beta, sigma, &u_bar, data, prior)?;
        log_bounds.push(lb);
        shifts.push(lb.max(typical));
    }
    let est = mc_means(cfg, points.len(), |rng| {
        let (u, _) = gibbs::sample_weights(&delta, data.d(), h, rng)?;
        points
            .iter()
            .zip(&shifts)
            .map(|((beta, sigma), s)| Ok((log_conditional_density(beta, sigma, &u, data, prior)? - s).exp()))
            .collect()
    })?;
    Ok(est
        .into_iter()
        .zip(log_bounds.into_iter().zip(shifts))
        .map(|(lhs, (log_bound, log_shift))| {
            let bound = (log_bound - log_shift).exp();
            MinorizationCheck { log_shift, lhs, bound, log_bound, holds: lhs.mean >= bound - 3.0 * lhs.se }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn reps(self) -> usize {
        match self {
            Self::Fast => 10_000,
            Self::Full => 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub level: Level,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.outcome {
                Outcome::Pass => "PASS",
                Outcome::Fail => "FAIL",
                Outcome::Skipped => "SKIP",
            };
            s.push_str(&format!("{tag}  {:<width$}  {}\n", c.name, c.detail));
        }
        s.push_str(if self.passed { "all checks passed\n" } else { "some checks FAILED\n" });
        s
    }
}

/// `Ψ` as a function of `u`; the suite compares it with the identity form.
pub type PsiFn<'a> = dyn Fn(&DVector<f64>, &Dataset, &NIWPrior) -> Result<DMatrix<f64>> + Sync + 'a;

pub fn default_psi(u: &DVector<f64>, data: &Dataset, prior: &NIWPrior) -> Result<DMatrix<f64>> {
    Ok(model::compute_update(u, data, prior)?.psi)
}

const SUITE_U_VECTORS: usize = 3;
const SUITE_STARTS: usize = 5;
const SUITE_POINTS: usize = 5;
const SUITE_IDENTITY_DRAWS: usize = 20;

fn result(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), outcome: if pass { Outcome::Pass } else { Outcome::Fail }, detail }
}

fn skipped(name: &str, why: impl Into<String>) -> CheckResult {
    CheckResult { name: name.into(), outcome: Outcome::Skipped, detail: why.into() }
}

fn random_weights(rng: &mut Stream, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0))
}

/// Start states scattered around the least-squares fit.
fn random_starts(data: &Dataset, count: usize, rng: &mut Stream) -> Result<Vec<ChainState>> {
    let base = gibbs::default_init(data)?;
    let d = data.d();
    (0..count)
        .map(|_| {
            let g = standard_normal_matrix(d, d, rng);
            let scale = base.sigma.trace() / d as f64;
            let sigma = (&g * g.transpose() / d as f64 + DMatrix::identity(d, d)) * scale;
            let beta = &base.beta + standard_normal_matrix(data.p(), d, rng) * scale.sqrt();
            ChainState::new(beta, sigma, base.u.clone())
        })
        .collect()
}

/// Runs the identity checks and every applicable Monte-Carlo verifier.
pub fn run_suite(data: &Dataset, spec: &SamplerSpec, level: Level, seed: u64, psi: &PsiFn) -> Result<SuiteReport> {
    spec.validate(data).or_else(|e| match (spec, &e) {
        // Improper checks below report rank problems themselves.
        (SamplerSpec::ImproperT { .. }, Error::RankDeficient(_) | Error::Precondition(_)) => Ok(()),
        _ => Err(e),
    })?;
    let reps = level.reps();
    let mut rng = substream(seed, VERIFY_BASE - 1);
    let mut checks = Vec::new();
    let default_prior;
    let prior = match spec {
        SamplerSpec::Proper { prior, .. } => prior,
        SamplerSpec::ImproperT { .. } => {
            default_prior = NIWPrior::weakly_informative(data.p(), data.d());
            &default_prior
        }
    };
    let full_rank = data.require_full_rank_stacked();

    // Ψ identity
    let mut worst = 0.0f64;
    for _ in 0..SUITE_IDENTITY_DRAWS {
        let u = random_weights(&mut rng, data.n());
        let reference = model::compute_update_with(&u, data, prior, model::PsiForm::Woodbury)?.psi;
        let got = psi(&u, data, prior)?;
        worst = worst.max(linalg::max_abs(&(got - &reference)) / (1.0 + linalg::max_abs(&reference)));
    }
    checks.push(result("psi_identity", worst <= 1e-9, format!("max scaled difference {worst:.3e} (limit 1e-9)")));

    // Quadratic-form identity for V_{C₀}
    match &full_rank {
        Ok(()) => {
            let basis = build_energy_basis(data)?;
            let mut worst = 0.0f64;
            for s in random_starts(data, SUITE_IDENTITY_DRAWS, &mut rng)? {
                let q = energy_quadratic(&s)?;
                let v = energy_weighted(&s, data, &basis.c0)?;
                worst = worst.max((v - q).abs() / (1.0 + q));
            }
            checks.push(result("energy_c0_identity", worst <= 1e-8, format!("max scaled difference {worst:.3e} (limit 1e-8)")));
        }
        Err(e) => checks.push(skipped("energy_c0_identity", format!("(X, Y) not of full rank: {e}"))),
    }

    match spec {
        SamplerSpec::Proper { prior, mixing } => {
            let mut detail = Vec::new();
            let mut pass = true;
            for k in 0..SUITE_U_VECTORS {
                let u = random_weights(&mut rng, data.n());
                let exact = cond_mean_v_proper(&u, data, prior)?;
                let mc = mc_cond_mean_v_proper(&u, data, prior, McConfig::new(reps, seed, 1 + k as u64))?;
                pass &= (exact - mc.mean).abs() <= 3.0 * mc.se;
                detail.push(format!("{exact:.4} vs {:.4}±{:.4}", mc.mean, mc.se));
            }
            checks.push(result("cond_mean_proper", pass, detail.join("; ")));

            let starts = random_starts(data, SUITE_STARTS, &mut rng)?;
            match drift_constants_proper(data, prior, mixing) {
                Ok(c) => {
                    let mut pass = true;
                    let mut top = f64::NEG_INFINITY;
                    for (k, s) in starts.iter().enumerate() {
                        let mc = mc_drift_proper(s, data, prior, mixing, McConfig::new(reps, seed, 10 + k as u64))?;
                        pass &= mc.mean <= c.m5 + 3.0 * mc.se;
                        top = top.max(mc.mean);
                    }
                    checks.push(result("drift_proper", pass, format!("largest E[V] estimate {top:.4e} vs M5 = {:.4e}", c.m5)));
                }
                Err(e) => checks.push(skipped("drift_proper", e.to_string())),
            }

            match MinorizationBound::new(data, prior, mixing) {
                Ok(_) => {
                    let center = gibbs::default_init(data)?;
                    let u1 = DVector::from_element(data.n(), 1.0);
                    let upd = model::compute_update(&u1, data, prior)?;
                    let sigma_hat = &upd.psi / (data.n() as f64 + prior.nu());
                    let points: Vec<_> = random_starts(data, SUITE_POINTS, &mut rng)?
                        .into_iter()
                        .map(|s| (&upd.gamma + (&s.beta - &center.beta) * 0.1, &sigma_hat * (s.sigma.trace() / center.sigma.trace())))
                        .collect();
                    let mut pass = true;
                    let mut count = 0;
                    for (k, s) in starts.iter().enumerate() {
                        let cfg = McConfig::new(reps / 5, seed, 20 + k as u64);
                        for c in mc_minorization(&points, s, data, prior, mixing, cfg)? {
                            pass &= c.holds;
                            count += 1;
                        }
                    }
                    checks.push(result("minorization", pass, format!("{count} point pairs")));
                }
                Err(e) => checks.push(skipped("minorization", e.to_string())),
            }
            checks.push(skipped("cond_mean_improper", "proper model"));
            checks.push(skipped("drift_improper", "proper model"));
        }
        SamplerSpec::ImproperT { nu_t } => {
            checks.push(skipped("cond_mean_proper", "improper model"));
            checks.push(skipped("drift_proper", "improper model"));
            checks.push(skipped("minorization", "improper model"));
            if let Err(e) = &full_rank {
                checks.push(skipped("cond_mean_improper", e.to_string()));
                checks.push(skipped("drift_improper", e.to_string()));
            } else {
                let mut detail = Vec::new();
                let mut pass = true;
                for k in 0..SUITE_U_VECTORS {
                    let u = random_weights(&mut rng, data.n());
                    let exact = cond_mean_v_improper(&u, data)?;
                    let mc = mc_cond_mean_v_improper(&u, data, McConfig::new(reps, seed, 30 + k as u64))?;
                    pass &= (exact.value - mc.mean).abs() <= 3.0 * mc.se;
                    detail.push(format!("{:.4} vs {:.4}±{:.4}", exact.value, mc.mean, mc.se));
                }
                checks.push(result("cond_mean_improper", pass, detail.join("; ")));

                let report = check_improper_condition(data, *nu_t)?;
                match report.max_feasible_eps {
                    Some(eps) => {
                        let cap = 2.0 * nu_t / eps;
                        let coef = drift_coefficient_improper(data, *nu_t, cap)?;
                        let mut pass = true;
                        let mut worst = f64::NEG_INFINITY;
                        for (k, s) in random_starts(data, SUITE_STARTS, &mut rng)?.into_iter().enumerate() {
                            let s = rescale_to_energy(&s, 10.0 * cap)?;
                            let v0 = energy_quadratic(&s)?;
                            let mc = mc_drift_improper(&s, data, *nu_t, McConfig::new(reps, seed, 40 + k as u64))?;
                            pass &= mc.mean <= coef.rho * v0 + 3.0 * mc.se;
                            worst = worst.max(mc.mean / v0);
                        }
                        checks.push(result(
                            "drift_improper",
                            pass,
                            format!("largest E[V]/V0 estimate {worst:.4} vs rho = {:.4} at M1 = {cap:.4}", coef.rho),
                        ));
                    }
                    None => checks.push(skipped("drift_improper", "drift condition not verified for these data")),
                }
            }
        }
    }
    let passed = checks.iter().all(|c| c.outcome != Outcome::Fail);
    Ok(SuiteReport { level, seed, passed, checks })
}

/// Rescales `Σ` so that `tr Σ⁻¹ + tr βΣ⁻¹βᵀ = target`; `V_{C₀}` is
/// homogeneous of degree −1 in `Σ`.
pub fn rescale_to_energy(state: &ChainState, target: f64) -> Result<ChainState> {
    let v = energy_quadratic(state)?;
    ChainState::new(state.beta.clone(), &state.sigma * (v / target), state.u.clone())
}
