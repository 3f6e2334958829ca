//! The mixing density `h` on `(0, ∞)`.
//!
//! Every quantity the samplers and the ergodicity checks need from `h` is a
//! tilted integral
//!
//! ```text
//! I(β, c) = ∫₀^∞ h(u) u^β e^{-c u} du,      c ≥ 0
//! ```
//!
//! * moments: `m_k = I(k, 0)`,
//! * conditional moments of the latent weight given the quadratic form `δ`:
//!   `E[u^r | δ] = I(d/2 + r, δ/2) / I(d/2, δ/2)`,
//! * the error density: `f_h(ε) = (2π)^{-d/2} I(d/2, ‖ε‖²/2)`,
//! * the per-observation factor of the minorization bound.
//!
//! Three families are supported. `PointMass` and `Gamma` are handled in
//! closed form; `Gamma(ν/2, ν/2)` gives multivariate Student-t errors.
//! `Tabulated` is a piecewise-linear density on a user grid, zero to the left
//! of the grid and continued to the right by a power law `h(u) ∝ u^{-α}` whose
//! exponent is read off the last two grid points. Tail behaviour therefore
//! decides which moments are finite, and divergent integrals are reported as
//! `+∞` rather than as errors.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quadrature;

/// Mass tolerance for tabulated densities (trapezoid rule on the grid).
pub const TABULATED_MASS_TOL: f64 = 1e-6;

/// Relative tolerance for quadrature-backed integrals.
pub const QUAD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    ClosedForm,
    Quadrature,
}

/// A nonnegative extended real: `value` is `+∞` when the integral diverges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentValue {
    #[serde(serialize_with = "serialize_extended")]
    pub value: f64,
    pub method: MomentMethod,
}

fn serialize_extended<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

impl MomentValue {
    pub fn finite(value: f64, method: MomentMethod) -> Self {
        Self { value, method }
    }

    pub fn infinite(method: MomentMethod) -> Self {
        Self { value: f64::INFINITY, method }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Power-law continuation `h(u) = value · (u / start)^{-exponent}` for `u > start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerTail {
    pub start: f64,
    pub value: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabulatedDensity {
    grid: Vec<f64>,
    values: Vec<f64>,
    tail: Option<PowerTail>,
    #[serde(skip)]
    ln_grid: Vec<f64>,
    #[serde(skip)]
    ln_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MixingDensity {
    PointMass { u0: f64 },
    Gamma { shape: f64, rate: f64 },
    Tabulated(TabulatedDensity),
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2).zip(values.windows(2)).map(|(u, h)| 0.5 * (h[0] + h[1]) * (u[1] - u[0])).sum()
}

/// `∫_a^b u^e du`
fn pow_integral(e: f64, a: f64, b: f64) -> f64 {
    if (e + 1.0).abs() < 1e-12 {
        (b / a).ln()
    } else {
        (b.powf(e + 1.0) - a.powf(e + 1.0)) / (e + 1.0)
    }
}

impl TabulatedDensity {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(invalid(format!(
                "tabulated density needs at least two points and equal lengths (grid {}, values {})",
                grid.len(),
                values.len()
            )));
        }
        if grid.iter().any(|u| !(u.is_finite() && *u > 0.0)) {
            return Err(invalid("tabulated grid must be positive and finite"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("tabulated grid must be strictly ascending"));
        }
        if values.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(invalid("tabulated values must be finite and nonnegative"));
        }
        let mass = trapezoid(&grid, &values);
        if (mass - 1.0).abs() > TABULATED_MASS_TOL {
            return Err(invalid(format!("tabulated density integrates to {mass}, expected 1 within {TABULATED_MASS_TOL}")));
        }
        let k = grid.len() - 1;
        let tail = if values[k] > 0.0 && values[k - 1] > 0.0 {
            let exponent = -(values[k] / values[k - 1]).ln() / (grid[k] / grid[k - 1]).ln();
            if exponent <= 1.0 {
                return Err(invalid(format!(
                    "tabulated density tail decays like u^-{exponent:.4}, which is not integrable"
                )));
            }
            Some(PowerTail { start: grid[k], value: values[k], exponent })
        } else {
            None
        };
        let ln_grid = grid.iter().map(|u| u.ln()).collect();
        let ln_values = values.iter().map(|h| h.ln()).collect();
        Ok(Self { grid, values, tail, ln_grid, ln_values })
    }

    /// Rescales `values` to unit trapezoid mass before validating.
    pub fn normalized(grid: Vec<f64>, mut values: Vec<f64>) -> Result<Self> {
        let mass = trapezoid(&grid, &values);
        if !(mass.is_finite() && mass > 0.0) {
            return Err(invalid("tabulated density has no mass"));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail(&self) -> Option<PowerTail> {
        self.tail
    }

    pub fn density(&self, u: f64) -> f64 {
        let (g, v) = (&self.grid, &self.values);
        if u < g[0] {
            return 0.0;
        }
        if u >= g[g.len() - 1] {
            return match self.tail {
                Some(t) => t.value * (u / t.start).powf(-t.exponent),
                None if u == g[g.len() - 1] => v[v.len() - 1],
                None => 0.0,
            };
        }
        let j = g.partition_point(|x| *x <= u) - 1;
        let w = (u - g[j]) / (g[j + 1] - g[j]);
        v[j] + w * (v[j + 1] - v[j])
    }

    /// `∫ h(u) u^β du` exactly for the piecewise-linear body plus the power tail.
    fn power_integral(&self, beta: f64) -> f64 {
        let mut acc = 0.0;
        for (u, h) in self.grid.windows(2).zip(self.values.windows(2)) {
            let s = (h[1] - h[0]) / (u[1] - u[0]);
            acc += (h[0] - s * u[0]) * pow_integral(beta, u[0], u[1]) + s * pow_integral(beta + 1.0, u[0], u[1]);
        }
        if let Some(t) = self.tail {
            if beta - t.exponent >= -1.0 {
                return f64::INFINITY;
            }
            acc += t.value * t.start.powf(beta + 1.0) / (t.exponent - beta - 1.0);
        }
        acc.max(0.0)
    }

    fn log_tilted_at(&self, u: f64, beta: f64, rate: f64) -> f64 {
        self.density(u).ln() + beta * u.ln() - rate * u
    }

    /// `log I(β, c)` for `c > 0` by panelwise adaptive quadrature.
    fn ln_tilted_quadrature(&self, beta: f64, rate: f64) -> Result<f64> {
        let mut shift = f64::NEG_INFINITY;
        for &u in &self.grid {
            shift = shift.max(self.log_tilted_at(u, beta, rate));
        }
        if shift == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let mut acc = 0.0;
        for (u, h) in self.grid.windows(2).zip(self.values.windows(2)) {
            if h[0] == 0.0 && h[1] == 0.0 {
                continue;
            }
            let s = (h[1] - h[0]) / (u[1] - u[0]);
            let f = |x: f64| {
                let hx = h[0] + s * (x - u[0]);
                if hx <= 0.0 {
                    0.0
                } else {
                    (hx.ln() + beta * x.ln() - rate * x - shift).exp()
                }
            };
            acc += quadrature::integrate(f, u[0], u[1], QUAD_REL_TOL * 1e-2, 1e-300)?;
        }
        if let Some(t) = self.tail {
            // u = start / s maps (start, ∞) onto (0, 1).
            let ln_start = t.start.ln();
            let f = |s: f64| {
                let ln_s = s.ln();
                let lu = ln_start - ln_s;
                (t.value.ln() + t.exponent * ln_s + beta * lu - rate * t.start / s + ln_start - 2.0 * ln_s - shift).exp()
            };
            acc += quadrature::integrate(f, 0.0, 1.0, QUAD_REL_TOL * 1e-2, 1e-300)?;
        }
        Ok(acc.ln() + shift)
    }

    /// Inverse-CDF draw from the tilted density `h(u) u^β e^{-c u}`, linearly
    /// interpolated between grid points (and log-spaced tail points when `c > 0`).
    fn sample_tilted<R: Rng + ?Sized>(&self, beta: f64, rate: f64, rng: &mut R) -> Result<f64> {
        let mut pts: Vec<f64> = self.grid.clone();
        let mut logs: Vec<f64> =
            (0..pts.len()).map(|j| self.ln_values[j] + beta * self.ln_grid[j] - rate * pts[j]).collect();
        let mut pareto: Option<f64> = None;
        if let Some(t) = self.tail {
            if rate == 0.0 {
                let k = t.exponent - beta - 1.0;
                if k <= 0.0 {
                    return Err(Error::Sampling(format!(
                        "tilted density u^{beta}·h(u) is not integrable (tail exponent {})",
                        t.exponent
                    )));
                }
                pareto = Some(k);
            } else {
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut u = t.start;
                for _ in 0..1600 {
                    u *= 2f64.powf(0.125);
                    let lv = self.log_tilted_at(u, beta, rate);
                    pts.push(u);
                    logs.push(lv);
                    let slope = (beta - t.exponent) / u - rate;
                    if slope < 0.0 && lv < top - 41.5 {
                        break;
                    }
                }
            }
        }
        let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::Sampling("tilted density vanishes on the grid".into()));
        }
        let g: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
        let mut cum = Vec::with_capacity(pts.len());
        let mut total = 0.0;
        for j in 0..pts.len() - 1 {
            total += 0.5 * (g[j] + g[j + 1]) * (pts[j + 1] - pts[j]);
            cum.push(total);
        }
        let body = total;
        if let Some(k) = pareto {
            let last = pts.len() - 1;
            total += g[last] * pts[last] / k;
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Sampling("tilted density has no mass".into()));
        }
        let target = rng.random::<f64>() * total;
        if target >= body {
            let k = pareto.expect("mass beyond the body only exists with a Pareto tail");
            let v: f64 = rng.random();
            return Ok(pts[pts.len() - 1] * (1.0 - v).powf(-1.0 / k));
        }
        let j = cum.partition_point(|c| *c <= target).min(cum.len() - 1);
        let before = if j == 0 { 0.0 } else { cum[j - 1] };
        let rem = target - before;
        let width = pts[j + 1] - pts[j];
        let slope = (g[j + 1] - g[j]) / width;
        let disc = (g[j] * g[j] + 2.0 * slope * rem).max(0.0);
        let denom = g[j] + disc.sqrt();
        let x = if denom > 0.0 { 2.0 * rem / denom } else { 0.0 };
        Ok((pts[j] + x.clamp(0.0, width)).max(f64::MIN_POSITIVE))
    }

    /// Reads a two-column `u,h(u)` CSV (optional header) and validates it.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let m = crate::io::read_matrix_csv(path)?;
        if m.ncols() != 2 {
            return Err(invalid(format!("tabulated density CSV needs 2 columns, found {}", m.ncols())));
        }
        Self::new(m.column(0).iter().copied().collect(), m.column(1).iter().copied().collect())
    }
}

impl MixingDensity {
    pub fn point_mass(u0: f64) -> Result<Self> {
        if !(u0.is_finite() && u0 > 0.0) {
            return Err(invalid(format!("point mass location must be positive, got {u0}")));
        }
        Ok(Self::PointMass { u0 })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(invalid(format!("gamma mixing needs shape > 0 and rate > 0, got ({shape}, {rate})")));
        }
        Ok(Self::Gamma { shape, rate })
    }

    /// `Gamma(ν/2, ν/2)`, giving multivariate Student-t errors with `ν` degrees of freedom.
    pub fn student_t(nu: f64) -> Result<Self> {
        Self::gamma(nu / 2.0, nu / 2.0)
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Ok(Self::Tabulated(TabulatedDensity::new(grid, values)?))
    }

    pub fn tabulated_from_csv(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::Tabulated(TabulatedDensity::from_csv(path)?))
    }

    fn method(&self) -> MomentMethod {
        match self {
            Self::Tabulated(_) => MomentMethod::Quadrature,
            _ => MomentMethod::ClosedForm,
        }
    }

    /// `h(u)`; a point mass has no density and reports 0 everywhere.
    pub fn density(&self, u: f64) -> f64 {
        match self {
            Self::PointMass { .. } => 0.0,
            Self::Gamma { shape, rate } => {
                if u <= 0.0 {
                    0.0
                } else {
                    (shape * rate.ln() - libm::lgamma(*shape) + (shape - 1.0) * u.ln() - rate * u).exp()
                }
            }
            Self::Tabulated(t) => t.density(u),
        }
    }

    /// `log I(β, c) = log ∫ h(u) u^β e^{-c u} du`, `+∞` when divergent.
    pub fn ln_tilted_integral(&self, beta: f64, rate: f64) -> Result<f64> {
        if !(rate >= 0.0) || !beta.is_finite() {
            return Err(invalid(format!("tilted integral needs finite β and c ≥ 0, got ({beta}, {rate})")));
        }
        match self {
            Self::PointMass { u0 } => Ok(beta * u0.ln() - rate * u0),
            Self::Gamma { shape, rate: b } => {
                let a = *shape;
                if a + beta <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                Ok(a * b.ln() - libm::lgamma(a) + libm::lgamma(a + beta) - (a + beta) * (b + rate).ln())
            }
            Self::Tabulated(t) => {
                if rate == 0.0 {
                    Ok(t.power_integral(beta).ln())
                } else {
                    t.ln_tilted_quadrature(beta, rate)
                }
            }
        }
    }

    /// `m_k = ∫ u^k h(u) du`.
    pub fn moment(&self, k: f64) -> MomentValue {
        let method = self.method();
        match self.ln_tilted_integral(k, 0.0) {
            Ok(l) if l.is_finite() => MomentValue::finite(l.exp(), method),
            Ok(l) if l == f64::NEG_INFINITY => MomentValue::finite(0.0, method),
            _ => MomentValue::infinite(method),
        }
    }

    /// `E[u^r | δ, d]` under the tilted density `∝ h(u) u^{d/2} e^{-uδ/2}`.
    pub fn conditional_moment(&self, delta: f64, d: usize, r: f64) -> Result<MomentValue> {
        if !(delta >= 0.0) {
            return Err(invalid(format!("quadratic form must be nonnegative, got {delta}")));
        }
        let method = self.method();
        if let Self::Gamma { shape, rate } = self {
            let a = shape + d as f64 / 2.0;
            if a + r <= 0.0 {
                return Ok(MomentValue::infinite(method));
            }
            let v = (libm::lgamma(a + r) - libm::lgamma(a) - r * (rate + delta / 2.0).ln()).exp();
            return Ok(MomentValue::finite(v, method));
        }
        let half = d as f64 / 2.0;
        let den = self.ln_tilted_integral(half, delta / 2.0)?;
        if !den.is_finite() {
            return Err(Error::Numerical(format!("normalizer of the tilted density is {den} (δ = {delta}, d = {d})")));
        }
        let num = self.ln_tilted_integral(half + r, delta / 2.0)?;
        if num == f64::INFINITY {
            return Ok(MomentValue::infinite(method));
        }
        Ok(MomentValue::finite((num - den).exp(), method))
    }

    /// One draw of `u` from `∝ h(u) u^{d/2} e^{-uδ/2}`.
    pub fn sample_conditional<R: Rng + ?Sized>(&self, delta: f64, d: usize, rng: &mut R) -> Result<f64> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(invalid(format!("quadratic form must be finite and nonnegative, got {delta}")));
        }
        self.sample_tilted(d as f64 / 2.0, delta / 2.0, rng)
    }

    /// One draw from `h` itself.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.sample_tilted(0.0, 0.0, rng)
    }

    fn sample_tilted<R: Rng + ?Sized>(&self, beta: f64, c: f64, rng: &mut R) -> Result<f64> {
        match self {
            Self::PointMass { u0 } => Ok(*u0),
            Self::Gamma { shape, rate } => {
                let g = Gamma::new(shape + beta, 1.0 / (rate + c))
                    .map_err(|e| Error::Sampling(format!("gamma conditional: {e}")))?;
                Ok(g.sample(rng))
            }
            Self::Tabulated(t) => t.sample_tilted(beta, c, rng),
        }
    }

    /// `log f_h(ε)` with `f_h(ε) = ∫ (u/2π)^{d/2} e^{-u‖ε‖²/2} h(u) du`.
    pub fn error_logdensity(&self, eps: &[f64]) -> Result<f64> {
        if eps.is_empty() {
            return Err(invalid("error vector must be nonempty"));
        }
        let d = eps.len() as f64;
        let r2: f64 = eps.iter().map(|e| e * e).sum();
        let li = self.ln_tilted_integral(d / 2.0, r2 / 2.0)?;
        if !li.is_finite() {
            return Err(Error::Numerical(format!("error density integral evaluated to {li} at ‖ε‖² = {r2}")));
        }
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() + li)
    }
}
