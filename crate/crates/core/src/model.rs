//! Domain types of the Copas-type selection model and its elementary
//! conditional densities and selection probabilities.
//!
//! A latent study `i` has standard error `s*`, effect `θ* = θ + τu + s*ε` and
//! selection propensity `Z = γ1 + γ2/s* + δ` with `corr(ε, δ) = ρ`; it is
//! published iff `Z > 0`. Everything here reduces to univariate normal
//! quantities:
//!
//! * `f1 = pr(Z > 0 | θ*, s*) = Φ(v)`,
//! * `f2 = pr(θ* | s*)`, the `N(θ, τ² + s²)` density,
//! * `f3 = pr(Z > 0 | s*) = Φ(γ1 + γ2/s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::special::{log_std_normal_cdf, std_normal_cdf, std_normal_pdf};

/// Tolerance below which the squared `v` denominator counts as zero.
const DENOM_TOL: f64 = 1e-12;

/// One published study: effect estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub effect: f64,
    pub se: f64,
}

impl StudyRecord {
    pub fn new(effect: f64, se: f64) -> Result<Self> {
        let rec = StudyRecord { effect, se };
        rec.validate(0)?;
        Ok(rec)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !self.effect.is_finite() {
            return Err(Error::InvalidStudy { index, reason: "effect is not finite".into() });
        }
        if !(self.se.is_finite() && self.se > 0.0) {
            return Err(Error::InvalidStudy { index, reason: format!("se must be finite and > 0, got {}", self.se) });
        }
        Ok(())
    }
}

/// The published sample, `n >= 2` studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    studies: Vec<StudyRecord>,
}

impl MetaDataset {
    pub fn new(studies: Vec<StudyRecord>) -> Result<Self> {
        if studies.len() < 2 {
            return Err(Error::TooFewStudies { got: studies.len(), need: 2 });
        }
        for (i, s) in studies.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(MetaDataset { studies })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(effect, se)| StudyRecord { effect, se }).collect())
    }

    pub fn n(&self) -> usize {
        self.studies.len()
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn effects(&self) -> impl Iterator<Item = f64> + '_ {
        self.studies.iter().map(|s| s.effect)
    }

    pub fn ses(&self) -> impl Iterator<Item = f64> + '_ {
        self.studies.iter().map(|s| s.se)
    }

    /// Sample standard deviation of the effects (divisor `n - 1`).
    pub fn effect_sd(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.effects().sum::<f64>() / n;
        (self.effects().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    pub(crate) fn require(&self, need: usize) -> Result<()> {
        if self.n() < need {
            Err(Error::TooFewStudies { got: self.n(), need })
        } else {
            Ok(())
        }
    }
}

impl std::ops::Deref for MetaDataset {
    type Target = [StudyRecord];

    fn deref(&self) -> &[StudyRecord] {
        &self.studies
    }
}

/// Index of each coordinate in the raw parameter array `[γ1, γ2, ρ, τ, θ]`.
pub mod idx {
    pub const GAMMA1: usize = 0;
    pub const GAMMA2: usize = 1;
    pub const RHO: usize = 2;
    pub const TAU: usize = 3;
    pub const THETA: usize = 4;
}

/// Selection and outcome parameters `γ = (γ1, γ2, ρ, τ, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub rho: f64,
    pub tau: f64,
    pub theta: f64,
}

impl SelectionParams {
    pub fn new(gamma1: f64, gamma2: f64, rho: f64, tau: f64, theta: f64) -> Result<Self> {
        let g = SelectionParams { gamma1, gamma2, rho, tau, theta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParams("all selection parameters must be finite".into()));
        }
        if self.rho.abs() > 1.0 {
            return Err(Error::InvalidParams(format!("|rho| must be <= 1, got {}", self.rho)));
        }
        if self.tau < 0.0 {
            return Err(Error::InvalidParams(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.gamma1, self.gamma2, self.rho, self.tau, self.theta]
    }

    /// Builds from a raw array, folding `τ` to `|τ|`.
    pub fn from_array(a: [f64; 5]) -> Self {
        SelectionParams { gamma1: a[0], gamma2: a[1], rho: a[2], tau: a[3].abs(), theta: a[4] }
    }

    pub fn gamma12(&self) -> (f64, f64) {
        (self.gamma1, self.gamma2)
    }
}

/// Full-likelihood parameter `(N, α, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullParams {
    pub n_total: u64,
    pub alpha: f64,
    pub gamma: SelectionParams,
}

impl FullParams {
    pub fn new(n_total: u64, alpha: f64, gamma: SelectionParams, n_observed: usize) -> Result<Self> {
        if (n_total as usize) < n_observed {
            return Err(Error::InvalidParams(format!(
                "N = {n_total} is below the number of published studies {n_observed}"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParams(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        gamma.validate()?;
        Ok(FullParams { n_total, alpha, gamma })
    }
}

/// Raw `v_i(γ)` on an unchecked parameter array; `τ` enters only through `τ²`.
#[inline]
pub(crate) fn v_raw(g: &[f64; 5], effect: f64, se: f64) -> f64 {
    let var = g[idx::TAU] * g[idx::TAU] + se * se;
    let rho = g[idx::RHO];
    let denom2 = 1.0 - rho * rho * se * se / var;
    let num = g[idx::GAMMA1] + g[idx::GAMMA2] / se + rho * se * (effect - g[idx::THETA]) / var;
    num / denom2.sqrt()
}

/// `v_i(γ)`: the standardized selection threshold given the observed study.
pub fn v_of(g: &SelectionParams, s: &StudyRecord) -> Result<f64> {
    let var = g.tau * g.tau + s.se * s.se;
    let denom2 = 1.0 - g.rho * g.rho * s.se * s.se / var;
    if denom2 <= DENOM_TOL {
        return Err(Error::DegenerateDenominator);
    }
    Ok(v_raw(&g.to_array(), s.effect, s.se))
}

/// `pr(Z > 0 | θ*, s*) = Φ(v_i)`.
pub fn f1_select_given_study(g: &SelectionParams, s: &StudyRecord) -> Result<f64> {
    Ok(std_normal_cdf(v_of(g, s)?))
}

/// `pr(θ* | s*)`: the `N(θ, τ² + s²)` density at the observed effect.
pub fn f2_effect_density(g: &SelectionParams, s: &StudyRecord) -> Result<f64> {
    let var = g.tau * g.tau + s.se * s.se;
    if !(var > 0.0) {
        return Err(Error::Domain("tau^2 + se^2 must be positive".into()));
    }
    let r = s.effect - g.theta;
    Ok((-0.5 * r * r / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
}

/// `pr(Z > 0 | s*) = Φ(γ1 + γ2/s)`.
pub fn f3_select_given_se(g: &SelectionParams, s: &StudyRecord) -> Result<f64> {
    if !(s.se > 0.0) {
        return Err(Error::Domain("se must be positive".into()));
    }
    Ok(std_normal_cdf(selection_index(g.gamma1, g.gamma2, s.se)))
}

#[inline]
pub(crate) fn selection_index(gamma1: f64, gamma2: f64, se: f64) -> f64 {
    gamma1 + gamma2 / se
}

/// Pseudo-logarithm: `log z` above `1/c_n`, a matching quadratic below.
#[inline]
pub fn log_star(z: f64, c_n: f64) -> f64 {
    if z > 1.0 / c_n {
        z.ln()
    } else {
        -c_n.ln() - 1.5 + 2.0 * z * c_n - 0.5 * z * z * c_n * c_n
    }
}

#[inline]
pub(crate) fn log_star_d1(z: f64, c_n: f64) -> f64 {
    if z > 1.0 / c_n {
        1.0 / z
    } else {
        2.0 * c_n - z * c_n * c_n
    }
}

#[inline]
pub(crate) fn log_star_d2(z: f64, c_n: f64) -> f64 {
    if z > 1.0 / c_n {
        -1.0 / (z * z)
    } else {
        -c_n * c_n
    }
}
