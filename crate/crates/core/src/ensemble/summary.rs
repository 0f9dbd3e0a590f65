//! Posterior model probabilities, inclusion Bayes factors and
//! model-averaged parameter summaries.

use serde::{Deserialize, Serialize};

use super::weightfn::interval_index;
use super::{BiasKind, ModelPosterior, ModelSpec};
use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, weighted_mean, weighted_quantile};

/// Cutpoints shared by every weight function in the ensemble; the
/// averaged weight function is constant on the intervals they define.
pub const UNION_CUTPOINTS: [f64; 2] = [0.05, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub prior_prob: f64,
    pub posterior_prob: f64,
    pub log_bf: f64,
    pub log10_bf: f64,
    /// `None` when the Bayes factor overflows `f64`; `log10_bf` still holds.
    pub bf: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    /// Two-sided p-value bounds of the interval.
    pub p_lower: f64,
    pub p_upper: f64,
    pub mean: f64,
    pub ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub posterior_probs: Vec<f64>,
    pub effect: ComponentSummary,
    pub heterogeneity: ComponentSummary,
    pub bias: ComponentSummary,
    pub mu: ParamSummary,
    pub tau: ParamSummary,
    pub omega: Vec<IntervalSummary>,
    pub pet: ParamSummary,
    pub peese: ParamSummary,
}

impl EnsembleSummary {
    pub fn p_effect(&self) -> f64 {
        self.effect.posterior_prob
    }
    pub fn p_heterogeneity(&self) -> f64 {
        self.heterogeneity.posterior_prob
    }
    pub fn p_bias(&self) -> f64 {
        self.bias.posterior_prob
    }
}

fn component(specs: &[ModelSpec], log_joint: &[f64], included: impl Fn(&ModelSpec) -> bool) -> ComponentSummary {
    let (mut j1, mut j0) = (Vec::new(), Vec::new());
    let (mut prior1, mut prior0) = (0.0, 0.0);
    for (s, &lj) in specs.iter().zip(log_joint) {
        if included(s) {
            j1.push(lj);
            prior1 += s.prior_prob;
        } else {
            j0.push(lj);
            prior0 += s.prior_prob;
        }
    }
    let log_prior_odds = prior1.ln() - prior0.ln();
    let log_post_odds = log_sum_exp(&j1) - log_sum_exp(&j0);
    let log_bf = log_post_odds - log_prior_odds;
    let posterior_prob = if log_post_odds >= 0.0 {
        1.0 / (1.0 + (-log_post_odds).exp())
    } else {
        let e = log_post_odds.exp();
        e / (1.0 + e)
    };
    let bf = log_bf.exp();
    ComponentSummary {
        prior_prob: prior1 / (prior1 + prior0),
        posterior_prob,
        log_bf,
        log10_bf: log_bf / std::f64::consts::LN_10,
        bf: bf.is_finite().then_some(bf),
    }
}

/// Posterior model probabilities and component summaries from log
/// evidences alone.
pub(crate) fn model_probabilities(
    specs: &[ModelSpec],
    log_ml: &[f64],
) -> Result<(Vec<f64>, [ComponentSummary; 3])> {
    if let Some(i) = log_ml.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain(format!(
            "model {} has log evidence {}",
            specs[i].label(),
            log_ml[i]
        )));
    }
    let log_joint: Vec<f64> = specs.iter().zip(log_ml).map(|(s, l)| s.prior_prob.ln() + l).collect();
    let total = log_sum_exp(&log_joint);
    if total == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble);
    }
    let raw: Vec<f64> = log_joint.iter().map(|l| (l - total).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let probs = raw.iter().map(|p| p / sum).collect();
    let comps = [
        component(specs, &log_joint, |s| s.has_effect),
        component(specs, &log_joint, |s| s.has_heterogeneity),
        component(specs, &log_joint, |s| s.has_bias()),
    ];
    Ok((probs, comps))
}

fn summarise(mut pairs: Vec<(f64, f64)>) -> ParamSummary {
    let mean = weighted_mean(&pairs);
    let lo = weighted_quantile(&mut pairs, 0.025);
    let hi = weighted_quantile(&mut pairs, 0.975);
    ParamSummary { mean, ci95: [lo, hi] }
}

/// Mixture of every model's draws weighted by posterior model
/// probability. Models without a parameter contribute a point mass at its
/// null value (0 for μ, τ and the regression slopes, 1 for weights).
fn mixture(
    posteriors: &[ModelPosterior],
    probs: &[f64],
    pick: impl Fn(&ModelPosterior) -> Option<&[f64]>,
    null: f64,
) -> ParamSummary {
    let mut pairs = Vec::new();
    for (m, &p) in posteriors.iter().zip(probs) {
        if p <= 0.0 {
            continue;
        }
        match pick(m).filter(|d| !d.is_empty()) {
            Some(draws) => {
                let w = p / draws.len() as f64;
                pairs.extend(draws.iter().map(|&v| (v, w)));
            }
            None => pairs.push((null, p)),
        }
    }
    summarise(pairs)
}

/// Combines the fitted models into an ensemble summary.
pub fn average_ensemble(posteriors: &[ModelPosterior]) -> Result<EnsembleSummary> {
    if posteriors.is_empty() {
        return Err(Error::DegenerateEnsemble);
    }
    let specs: Vec<ModelSpec> = posteriors.iter().map(|p| p.spec).collect();
    let log_ml: Vec<f64> = posteriors.iter().map(|p| p.log_marginal_likelihood).collect();
    let (probs, [effect, heterogeneity, bias]) = model_probabilities(&specs, &log_ml)?;

    let mu = mixture(posteriors, &probs, |m| Some(&m.draws.mu), 0.0);
    let tau = mixture(posteriors, &probs, |m| Some(&m.draws.tau), 0.0);
    let pet = mixture(
        posteriors,
        &probs,
        |m| (m.spec.bias_kind == BiasKind::Pet).then_some(&m.draws.slope[..]),
        0.0,
    );
    let peese = mixture(
        posteriors,
        &probs,
        |m| (m.spec.bias_kind == BiasKind::Peese).then_some(&m.draws.slope[..]),
        0.0,
    );

    let mut bounds = vec![0.0];
    bounds.extend(UNION_CUTPOINTS);
    bounds.push(1.0);
    let omega = (0..=UNION_CUTPOINTS.len())
        .map(|k| {
            // any p inside union interval k identifies each model's interval
            let p_mid = 0.5 * (bounds[k] + bounds[k + 1]);
            let s = mixture(
                posteriors,
                &probs,
                |m| {
                    let c = m.spec.bias_kind.cutpoints()?;
                    Some(&m.draws.omega[interval_index(c, p_mid)][..])
                },
                1.0,
            );
            IntervalSummary { p_lower: bounds[k], p_upper: bounds[k + 1], mean: s.mean, ci95: s.ci95 }
        })
        .collect();

    Ok(EnsembleSummary {
        posterior_probs: probs,
        effect,
        heterogeneity,
        bias,
        mu,
        tau,
        omega,
        pet,
        peese,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::build_model_space;

    #[test]
    fn equal_evidence_gives_prior_probabilities() {
        let specs = build_model_space();
        let (probs, comps) = model_probabilities(&specs, &[-12.5; 20]).unwrap();
        assert!(probs.iter().all(|p| (p - 0.05).abs() < 1e-15));
        for c in &comps {
            assert!((c.bf.unwrap() - 1.0).abs() < 1e-12);
        }
        // bias is present in 16 of 20 models
        assert!((comps[2].prior_prob - 0.8).abs() < 1e-15);
        assert!((comps[2].posterior_prob - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_model_carries_all_mass() {
        let specs = build_model_space();
        let mut l = vec![f64::NEG_INFINITY; 20];
        // effect, no heterogeneity, PET
        let k = specs
            .iter()
            .position(|s| s.has_effect && !s.has_heterogeneity && s.bias_kind == BiasKind::Pet)
            .unwrap();
        l[k] = -3.0;
        let (probs, comps) = model_probabilities(&specs, &l).unwrap();
        assert_eq!(probs[k], 1.0);
        assert_eq!(comps[0].posterior_prob, 1.0);
        assert_eq!(comps[1].posterior_prob, 0.0);
        assert_eq!(comps[2].posterior_prob, 1.0);
        assert_eq!(comps[0].bf, None);
        assert_eq!(comps[0].log_bf, f64::INFINITY);
    }

    #[test]
    fn huge_bayes_factor_kept_in_log_space() {
        let specs = build_model_space();
        let l: Vec<f64> = specs.iter().map(|s| if s.has_heterogeneity { 1000.0 } else { 0.0 }).collect();
        let (_, comps) = model_probabilities(&specs, &l).unwrap();
        assert_eq!(comps[1].bf, None);
        assert!((comps[1].log10_bf - 1000.0 / std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn all_minus_infinity_is_degenerate() {
        let specs = build_model_space();
        let r = model_probabilities(&specs, &[f64::NEG_INFINITY; 20]);
        assert!(matches!(r, Err(Error::DegenerateEnsemble)));
    }
}
