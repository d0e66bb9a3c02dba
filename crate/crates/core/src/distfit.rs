//! Estimators of the marginal distributions of the standard errors (`F`)
//! and of the effects (`G`), full-likelihood and IPW versions, plus the
//! naive empirical CDFs they correct.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{FitReport, Likelihood};
use crate::likelihood::{el_weights_phi, selection_probs};
use crate::model::{MetaDataset, SelectionParams, StudyRecord};
use crate::special::{compensated_sum, log_std_normal_cdf, std_normal_cdf};

/// IPW mass ratios above this trigger an instability warning.
pub const IPW_RATIO_WARN: f64 = 100.0;

/// A discrete distribution with strictly increasing support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCDF {
    pub support: Vec<f64>,
    pub mass: Vec<f64>,
}

impl StepCDF {
    /// Sorts `points`, merges duplicates and normalizes `weights`. Points of
    /// zero weight are dropped.
    pub fn new(points: &[f64], weights: &[f64]) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::Domain("points and weights must be non-empty and of equal length".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Domain("weights must be nonnegative with a positive total".into()));
        }
        let mut pairs: Vec<(f64, f64)> =
            points.iter().copied().zip(weights.iter().copied()).filter(|&(_, w)| w > 0.0).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = compensated_sum(weights.iter().copied());
        let mut support: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut mass: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            match support.last() {
                Some(&last) if last == x => *mass.last_mut().unwrap() += w / total,
                _ => {
                    support.push(x);
                    mass.push(w / total);
                }
            }
        }
        Ok(StepCDF { support, mass })
    }

    pub fn empirical(points: &[f64]) -> Result<Self> {
        Self::new(points, &vec![1.0; points.len()])
    }

    /// `P(X ≤ x)`, clamped to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.support.partition_point(|&s| s <= x);
        if k == self.support.len() {
            return 1.0;
        }
        compensated_sum(self.mass[..k].iter().copied()).min(1.0)
    }

    /// Kolmogorov distance to another step CDF.
    pub fn kolmogorov(&self, other: &StepCDF) -> f64 {
        self.support.iter().chain(&other.support).map(|&x| (self.eval(x) - other.eval(x)).abs()).fold(0.0, f64::max)
    }
}

fn require_full(fit: &FitReport) -> Result<f64> {
    match (fit.likelihood, fit.alpha) {
        (Likelihood::Full, Some(a)) => Ok(a),
        _ => Err(Error::Domain("a full-likelihood fit is required".into())),
    }
}

/// EL masses `p̂_i` in study order.
fn el_masses(data: &MetaDataset, fit: &FitReport) -> Result<Vec<f64>> {
    let alpha = require_full(fit)?;
    let phis = selection_probs(fit.gamma.gamma1, fit.gamma.gamma2, data);
    Ok(el_weights_phi(alpha, &phis, fit.c_n)?.p)
}

/// IPW masses `∝ 1/Φ_i` in study order, with a warning when the max/min
/// ratio exceeds [`IPW_RATIO_WARN`].
pub fn ipw_masses(studies: &[StudyRecord], g: &SelectionParams) -> Result<(Vec<f64>, Option<String>)> {
    // on the log scale so that a selection probability below the double range
    // still gets (all of) the mass
    let lphi: Vec<f64> = studies.iter().map(|s| log_std_normal_cdf(g.gamma1 + g.gamma2 / s.se)).collect();
    if lphi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log selection probability".into()));
    }
    let floor = lphi.iter().copied().fold(f64::INFINITY, f64::min);
    let inv: Vec<f64> = lphi.iter().map(|l| (floor - l).exp()).collect();
    let total = compensated_sum(inv.iter().copied());
    let q: Vec<f64> = inv.iter().map(|w| w / total).collect();
    let (lo, hi) = q.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let warn = (hi / lo > IPW_RATIO_WARN).then(|| format!("IPW masses unstable: max/min ratio {:.1}", hi / lo));
    Ok((q, warn))
}

/// Full-likelihood estimate of the distribution of standard errors.
pub fn f_hat(data: &MetaDataset, fit_full: &FitReport) -> Result<StepCDF> {
    let p = el_masses(data, fit_full)?;
    let s: Vec<f64> = data.ses().collect();
    StepCDF::new(&s, &p)
}

fn mixture_cdf(studies: &[StudyRecord], w: &[f64], theta: f64, tau: f64, t_grid: &[f64]) -> Vec<f64> {
    let scale: Vec<f64> = studies.iter().map(|s| (tau * tau + s.se * s.se).sqrt()).collect();
    t_grid
        .iter()
        .map(|&t| {
            let v = compensated_sum(w.iter().zip(&scale).map(|(w, sd)| w * std_normal_cdf((t - theta) / sd)));
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Full-likelihood estimate of the effect distribution on `t_grid`.
pub fn g_hat(data: &MetaDataset, fit_full: &FitReport, t_grid: &[f64]) -> Result<Vec<f64>> {
    let p = el_masses(data, fit_full)?;
    Ok(mixture_cdf(data, &p, fit_full.gamma.theta, fit_full.gamma.tau, t_grid))
}

/// IPW estimate of the distribution of standard errors.
pub fn f_tilde(data: &MetaDataset, g_tilde: &SelectionParams) -> Result<(StepCDF, Option<String>)> {
    let (q, warn) = ipw_masses(data, g_tilde)?;
    let s: Vec<f64> = data.ses().collect();
    Ok((StepCDF::new(&s, &q)?, warn))
}

/// IPW estimate of the effect distribution on `t_grid`.
pub fn g_tilde_cdf(data: &MetaDataset, g_tilde: &SelectionParams, t_grid: &[f64]) -> Result<Vec<f64>> {
    let (q, _) = ipw_masses(data, g_tilde)?;
    Ok(mixture_cdf(data, &q, g_tilde.theta, g_tilde.tau, t_grid))
}

/// 201 equally spaced points over `θ ± 4·max(τ, max s_i)`.
pub fn default_t_grid(data: &MetaDataset, g: &SelectionParams) -> Vec<f64> {
    let smax = data.ses().fold(0.0, f64::max);
    let half = 4.0 * g.tau.abs().max(smax);
    (0..201).map(|k| g.theta - half + 2.0 * half * k as f64 / 200.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::FitMode;
    use proptest::prelude::*;

    fn full_report(g: SelectionParams, alpha: f64, n: usize) -> FitReport {
        FitReport {
            likelihood: Likelihood::Full,
            gamma: g,
            n_total: Some((n as f64 / alpha).round() as u64),
            alpha: Some(alpha),
            lambda: None,
            loglik: 0.0,
            converged: true,
            n_evals: 0,
            mode: FitMode::FreeGamma12,
            n_observed: n,
            c_n: n as f64,
            warnings: vec![],
        }
    }

    #[test]
    fn step_cdf_merges_and_evaluates() {
        let f = StepCDF::new(&[2.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(f.support, vec![1.0, 2.0, 3.0]);
        assert_eq!(f.mass, vec![0.25, 0.5, 0.25]);
        assert_eq!(f.eval(0.5), 0.0);
        assert_eq!(f.eval(1.0), 0.25);
        assert_eq!(f.eval(2.5), 0.75);
        assert_eq!(f.eval(3.0), 1.0);
        assert!(StepCDF::new(&[1.0], &[0.0]).is_err());
        assert_eq!(StepCDF::new(&[1.0, 2.0], &[0.0, 3.0]).unwrap().support, vec![2.0]);
    }

    #[test]
    fn two_study_toy_masses() {
        // solve γ1 + γ2/s_i = Φ^{-1}(0.2), Φ^{-1}(0.8)
        let q2 = crate::special::std_normal_quantile(0.2);
        let q8 = crate::special::std_normal_quantile(0.8);
        let (s1, s2) = (1.0, 0.5);
        let gamma2 = (q2 - q8) / (1.0 / s1 - 1.0 / s2);
        let gamma1 = q2 - gamma2 / s1;
        let g = SelectionParams::new(gamma1, gamma2, 0.0, 0.0, 0.0).unwrap();
        let data = MetaDataset::from_pairs(&[(0.0, s1), (0.0, s2)]).unwrap();
        let (f, _) = f_tilde(&data, &g).unwrap();
        // sorted by se: s2 (Φ = 0.8) then s1 (Φ = 0.2)
        assert!((f.mass[0] - 0.2).abs() < 1e-12 && (f.mass[1] - 0.8).abs() < 1e-12);
        let fh = f_hat(&data, &full_report(g, 0.4, 2)).unwrap();
        assert!((fh.mass[0] - 1.0 / 3.0).abs() < 1e-9 && (fh.mass[1] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn g_examples() {
        let g = SelectionParams::new(5.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        // two copies of one study act as a single point
        let data = MetaDataset::from_pairs(&[(0.3, 1.0), (0.3, 1.0)]).unwrap();
        let fit = full_report(g, std_normal_cdf(5.0), 2);
        let v = g_hat(&data, &fit, &[0.0, 1.0, 1e6]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn equal_phi_gives_empirical() {
        let g = SelectionParams::new(0.3, 0.0, 0.0, 0.4, 0.1).unwrap();
        let data = MetaDataset::from_pairs(&[(0.1, 0.2), (0.5, 0.4), (-0.2, 0.3), (0.9, 0.3)]).unwrap();
        let (f, warn) = f_tilde(&data, &g).unwrap();
        let e = StepCDF::empirical(&data.ses().collect::<Vec<_>>()).unwrap();
        assert!(warn.is_none() && f.kolmogorov(&e) < 1e-12);
    }

    #[test]
    fn t_grid_shape() {
        let g = SelectionParams::new(0.0, 0.5, 0.0, 0.1, 1.0).unwrap();
        let data = MetaDataset::from_pairs(&[(0.1, 0.2), (0.5, 0.5)]).unwrap();
        let t = default_t_grid(&data, &g);
        assert_eq!(t.len(), 201);
        assert!((t[0] + 1.0).abs() < 1e-12 && (t[200] - 3.0).abs() < 1e-12 && (t[100] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cdfs_monotone_in_unit_interval(
            pairs in prop::collection::vec((-2.0f64..2.0, 0.05f64..1.5), 2..12),
            g1 in -1.5f64..1.5, g2 in 0.0f64..1.0, tau in 0.0f64..1.0, theta in -1.0f64..1.0,
        ) {
            let data = MetaDataset::from_pairs(&pairs).unwrap();
            let g = SelectionParams::new(g1, g2, 0.0, tau, theta).unwrap();
            let (f, _) = f_tilde(&data, &g).unwrap();
            let grid = default_t_grid(&data, &g);
            let gv = g_tilde_cdf(&data, &g, &grid).unwrap();
            let mut prev = 0.0;
            for &x in f.support.iter() {
                let v = f.eval(x);
                prop_assert!(v >= prev && v <= 1.0);
                prev = v;
            }
            prop_assert!((f.eval(f64::INFINITY) - 1.0).abs() < 1e-12);
            prop_assert!(gv.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(gv.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
