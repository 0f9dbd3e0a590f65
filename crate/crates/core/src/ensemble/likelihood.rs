use serde::{Deserialize, Serialize};

use super::weightfn::{interval_index, WeightFunction};
use super::{BiasKind, ModelSpec};
use crate::dataset::MetaDataset;
use crate::error::{Error, Result};
use crate::stats::{norm_cdf, norm_logpdf, norm_quantile, norm_sf};

/// A point in a model's natural parameter space. Parameters a model does
/// not have are held at zero (`omega` is `None` outside selection models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub mu: f64,
    pub tau: f64,
    /// Full weight vector including the leading 1.
    pub omega: Option<Vec<f64>>,
    /// PET or PEESE coefficient.
    pub slope: f64,
}

impl ParamPoint {
    pub fn null() -> Self {
        Self {
            mu: 0.0,
            tau: 0.0,
            omega: None,
            slope: 0.0,
        }
    }
}

/// Per-dataset quantities reused across likelihood evaluations.
#[derive(Debug, Clone)]
pub struct LikelihoodData {
    theta: Vec<f64>,
    se: Vec<f64>,
    var: Vec<f64>,
    /// Observed interval index under the .05 and the .05/.10 weight functions.
    interval_05: Vec<u8>,
    interval_05_10: Vec<u8>,
    z_05: f64,
    z_10: f64,
}

fn critical_z(cutpoint: f64) -> f64 {
    norm_quantile(1.0 - cutpoint / 2.0)
}

/// Probability that a two-sided test of `Θ ~ N(m, s²)` against `se`
/// yields `p ≤ c`, i.e. `|Θ| ≥ se · z_{c/2}`.
#[inline]
fn prob_significant(threshold: f64, m: f64, s: f64) -> f64 {
    norm_sf((threshold + m) / s) + norm_sf((threshold - m) / s)
}

impl LikelihoodData {
    pub fn new(data: &MetaDataset) -> Self {
        let theta = data.thetas();
        let se = data.ses();
        let var = se.iter().map(|s| s * s).collect();
        let p: Vec<f64> = data.estimates().iter().map(|e| e.p_value()).collect();
        let idx = |cuts: &[f64]| p.iter().map(|&pv| interval_index(cuts, pv) as u8).collect();
        Self {
            interval_05: idx(&[0.05]),
            interval_05_10: idx(&[0.05, 0.10]),
            theta,
            se,
            var,
            z_05: critical_z(0.05),
            z_10: critical_z(0.10),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Unchecked log-likelihood. `omega` is the full weight vector for
    /// selection models and ignored otherwise.
    pub fn log_lik(&self, kind: BiasKind, mu: f64, tau: f64, omega: &[f64], slope: f64) -> f64 {
        let tau2 = tau * tau;
        match kind {
            BiasKind::None => self
                .theta
                .iter()
                .zip(&self.var)
                .map(|(&t, &v)| norm_logpdf(t, mu, v + tau2))
                .sum(),
            BiasKind::Pet => self
                .theta
                .iter()
                .zip(&self.se)
                .zip(&self.var)
                .map(|((&t, &s), &v)| norm_logpdf(t, mu + slope * s, v + tau2))
                .sum(),
            BiasKind::Peese => self
                .theta
                .iter()
                .zip(&self.var)
                .map(|(&t, &v)| norm_logpdf(t, mu + slope * v, v + tau2))
                .sum(),
            BiasKind::WeightFn05 => self.selection_log_lik(&self.interval_05, &[self.z_05], mu, tau2, omega),
            BiasKind::WeightFn05To10 => self.selection_log_lik(
                &self.interval_05_10,
                &[self.z_05, self.z_10],
                mu,
                tau2,
                omega,
            ),
        }
    }

    fn selection_log_lik(&self, observed: &[u8], z: &[f64], mu: f64, tau2: f64, omega: &[f64]) -> f64 {
        debug_assert_eq!(omega.len(), z.len() + 1);
        let mut log_omega = [0.0; 4];
        let mut step = [0.0; 4];
        for j in 0..omega.len() {
            log_omega[j] = omega[j].ln();
            if j + 1 < omega.len() {
                step[j] = omega[j] - omega[j + 1];
            }
        }
        let last = omega[omega.len() - 1];
        let mut total = 0.0;
        for q in 0..self.theta.len() {
            let v = self.var[q] + tau2;
            let s = v.sqrt();
            let mut norm = last;
            for (j, &zj) in z.iter().enumerate() {
                if step[j] != 0.0 {
                    norm += step[j] * prob_significant(self.se[q] * zj, mu, s);
                }
            }
            total += norm_logpdf(self.theta[q], mu, v) + log_omega[observed[q] as usize] - norm.ln();
        }
        total
    }
}

fn check_params(spec: &ModelSpec, params: &ParamPoint) -> Result<()> {
    if !(params.tau >= 0.0) || !params.tau.is_finite() {
        return Err(Error::Domain(format!("tau = {} must be finite and >= 0", params.tau)));
    }
    if !params.mu.is_finite() || !params.slope.is_finite() {
        return Err(Error::Domain("mu and slope must be finite".into()));
    }
    if !spec.has_effect && params.mu != 0.0 {
        return Err(Error::Domain(format!("model {} fixes mu = 0", spec.label())));
    }
    if !spec.has_heterogeneity && params.tau != 0.0 {
        return Err(Error::Domain(format!("model {} fixes tau = 0", spec.label())));
    }
    if !matches!(spec.bias_kind, BiasKind::Pet | BiasKind::Peese) && params.slope != 0.0 {
        return Err(Error::Domain(format!("model {} has no PET/PEESE slope", spec.label())));
    }
    match (spec.bias_kind.cutpoints(), &params.omega) {
        (Some(cuts), Some(omega)) => {
            WeightFunction::new(cuts.to_vec(), omega.clone())?;
        }
        (Some(_), None) => {
            return Err(Error::Domain(format!("model {} needs weights", spec.label())));
        }
        (None, Some(_)) => {
            return Err(Error::Domain(format!("model {} takes no weights", spec.label())));
        }
        (None, None) => {}
    }
    Ok(())
}

/// Log-likelihood of `data` under `spec` at `params`.
///
/// Without selection each estimate contributes `log N(θ; μ + b, σ² + τ²)`
/// with `b = β σ` (PET), `β σ²` (PEESE) or 0. Under a weight function the
/// density is multiplied by `ω(p)` and renormalised per estimate by the
/// probability-weighted mean weight `A(μ, τ, σ)`.
pub fn log_likelihood(spec: &ModelSpec, params: &ParamPoint, data: &MetaDataset) -> Result<f64> {
    check_params(spec, params)?;
    let cache = LikelihoodData::new(data);
    let omega = params.omega.as_deref().unwrap_or(&[]);
    Ok(cache.log_lik(spec.bias_kind, params.mu, params.tau, omega, params.slope))
}

/// Normaliser `A = Σ_j ω_j Pr[p ∈ interval_j]` for one estimate with
/// standard error `se`, evaluated in telescoped form
/// `ω_J + Σ_{j<J} (ω_j − ω_{j+1}) Pr[p ≤ c_j]`.
pub fn selection_normalizer(mu: f64, tau: f64, se: f64, wf: &WeightFunction) -> f64 {
    let s = (se * se + tau * tau).sqrt();
    let w = wf.omegas();
    let mut a = w[w.len() - 1];
    for (j, &c) in wf.cutpoints().iter().enumerate() {
        a += (w[j] - w[j + 1]) * prob_significant(se * critical_z(c), mu, s);
    }
    a
}

/// Probability of each p-value interval for `Θ ~ N(mu, se² + tau²)`,
/// computed as the mass of `|Θ|` between consecutive critical thresholds.
pub fn interval_probabilities(mu: f64, tau: f64, se: f64, cutpoints: &[f64]) -> Vec<f64> {
    let s = (se * se + tau * tau).sqrt();
    // thresholds on |Θ| decrease as the p-value cutpoint grows
    let mut bounds = vec![f64::INFINITY];
    bounds.extend(cutpoints.iter().map(|&c| se * critical_z(c)));
    bounds.push(0.0);
    bounds
        .windows(2)
        .map(|w| {
            let (hi, lo) = (w[0], w[1]);
            let upper = norm_cdf((hi - mu) / s) - norm_cdf((lo - mu) / s);
            let lower = norm_cdf((-lo - mu) / s) - norm_cdf((-hi - mu) / s);
            upper + lower
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EffectEstimate, ModeratorSchema};
    use std::f64::consts::PI;

    fn one(theta: f64, se: f64) -> MetaDataset {
        MetaDataset::new(
            vec![EffectEstimate::new("a", "s", theta, se)],
            ModeratorSchema::empty(),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let spec = ModelSpec::new(false, false, BiasKind::None);
        let ll = log_likelihood(&spec, &ParamPoint::null(), &one(0.0, 1.0)).unwrap();
        assert!((ll - (1.0 / (2.0 * PI).sqrt()).ln()).abs() < 1e-15);
    }

    #[test]
    fn two_interval_closed_form() {
        // observation with p = 0.5 → z = Φ⁻¹(0.75)
        let theta = norm_quantile(0.75);
        let spec = ModelSpec::new(false, false, BiasKind::WeightFn05);
        let params = ParamPoint {
            omega: Some(vec![1.0, 0.5]),
            ..ParamPoint::null()
        };
        let ll = log_likelihood(&spec, &params, &one(theta, 1.0)).unwrap();
        let sig = 2.0 * norm_sf(1.959963984540054);
        let expected = norm_logpdf(theta, 0.0, 1.0) + 0.5f64.ln() - (sig + (1.0 - sig) * 0.5).ln();
        assert!((ll - expected).abs() < 1e-14, "{ll} vs {expected}");
    }

    #[test]
    fn uniform_weights_reduce_to_plain_likelihood() {
        let d = one(0.3, 0.2);
        let plain = ModelSpec::new(true, true, BiasKind::None);
        let sel = ModelSpec::new(true, true, BiasKind::WeightFn05To10);
        let p = ParamPoint {
            mu: 0.1,
            tau: 0.05,
            omega: None,
            slope: 0.0,
        };
        let q = ParamPoint {
            omega: Some(vec![1.0, 1.0, 1.0]),
            ..p.clone()
        };
        assert_eq!(
            log_likelihood(&plain, &p, &d).unwrap(),
            log_likelihood(&sel, &q, &d).unwrap()
        );
    }

    #[test]
    fn domain_errors() {
        let d = one(0.3, 0.2);
        let spec = ModelSpec::new(true, true, BiasKind::WeightFn05);
        let bad_tau = ParamPoint {
            tau: -0.1,
            omega: Some(vec![1.0, 0.5]),
            ..ParamPoint::null()
        };
        assert!(matches!(log_likelihood(&spec, &bad_tau, &d), Err(Error::Domain(_))));
        let bad_omega = ParamPoint {
            omega: Some(vec![1.0, 1.5]),
            ..ParamPoint::null()
        };
        assert!(matches!(log_likelihood(&spec, &bad_omega, &d), Err(Error::Domain(_))));
        let missing = ParamPoint::null();
        assert!(log_likelihood(&spec, &missing, &d).is_err());
        let null = ModelSpec::new(false, false, BiasKind::None);
        let with_mu = ParamPoint {
            mu: 0.2,
            ..ParamPoint::null()
        };
        assert!(log_likelihood(&null, &with_mu, &d).is_err());
    }

    #[test]
    fn pet_and_peese_shift_the_mean() {
        let d = one(0.5, 0.2);
        let pet = ModelSpec::new(true, false, BiasKind::Pet);
        let peese = ModelSpec::new(true, false, BiasKind::Peese);
        let p = ParamPoint {
            mu: 0.1,
            slope: 2.0,
            ..ParamPoint::null()
        };
        let lp = log_likelihood(&pet, &p, &d).unwrap();
        assert!((lp - norm_logpdf(0.5, 0.1 + 2.0 * 0.2, 0.04)).abs() < 1e-15);
        let lq = log_likelihood(&peese, &p, &d).unwrap();
        assert!((lq - norm_logpdf(0.5, 0.1 + 2.0 * 0.04, 0.04)).abs() < 1e-15);
    }

    #[test]
    fn interval_probabilities_partition_unity() {
        for &(mu, tau, se) in &[(0.0, 0.0, 1.0), (0.3, 0.1, 0.2), (-2.0, 0.5, 0.05)] {
            let p = interval_probabilities(mu, tau, se, &[0.05, 0.10]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
        let p = interval_probabilities(0.0, 0.0, 1.0, &[0.05]);
        assert!((p[0] - 0.05).abs() < 1e-15);
    }
}
