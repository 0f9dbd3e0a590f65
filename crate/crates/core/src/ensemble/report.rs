use serde::{Deserialize, Serialize};
use std::io::Write;

use super::summary::EnsembleSummary;
use super::{BiasKind, EvidenceMethod, ModelPosterior};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub label: String,
    pub has_effect: bool,
    pub has_heterogeneity: bool,
    pub bias_kind: BiasKind,
    pub prior_prob: f64,
    pub log_marginal_likelihood: f64,
    pub evidence_method: EvidenceMethod,
    pub posterior_prob: f64,
    pub max_rhat: f64,
    pub converged: bool,
}

impl From<&ModelPosterior> for ModelRow {
    fn from(m: &ModelPosterior) -> Self {
        Self {
            label: m.spec.label(),
            has_effect: m.spec.has_effect,
            has_heterogeneity: m.spec.has_heterogeneity,
            bias_kind: m.spec.bias_kind,
            prior_prob: m.spec.prior_prob,
            log_marginal_likelihood: m.log_marginal_likelihood,
            evidence_method: m.evidence_method,
            posterior_prob: m.posterior_prob,
            max_rhat: m.diagnostics.max_rhat,
            converged: m.diagnostics.converged,
        }
    }
}

/// The JSON document written by the `bias` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub n_estimates: usize,
    pub models: Vec<ModelRow>,
    pub summary: EnsembleSummary,
    /// Labels of models whose split R-hat exceeded the threshold.
    pub unconverged: Vec<String>,
}

impl EnsembleReport {
    pub fn new(n_estimates: usize, posteriors: &[ModelPosterior], summary: EnsembleSummary) -> Self {
        let models: Vec<ModelRow> = posteriors.iter().map(ModelRow::from).collect();
        let unconverged = models.iter().filter(|m| !m.converged).map(|m| m.label.clone()).collect();
        Self { n_estimates, models, summary, unconverged }
    }

    /// Model-averaged weight function on `0, step, 2·step, …, 1`.
    pub fn weight_function(&self, step: f64) -> Vec<WeightFnPoint> {
        weight_function_curve(&self.summary, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFnPoint {
    pub p: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub(crate) fn weight_function_curve(summary: &EnsembleSummary, step: f64) -> Vec<WeightFnPoint> {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|i| {
            let p = i as f64 / n as f64;
            // closed on the left: ties go to the more significant interval
            let iv = summary
                .omega
                .iter()
                .find(|iv| p <= iv.p_upper)
                .unwrap_or_else(|| summary.omega.last().expect("at least one interval"));
            WeightFnPoint { p, mean: iv.mean, lower: iv.ci95[0], upper: iv.ci95[1] }
        })
        .collect()
}

pub fn write_weightfn_csv<W: Write>(writer: W, points: &[WeightFnPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["p", "mean", "lower", "upper"])?;
    for pt in points {
        w.write_record([pt.p, pt.mean, pt.lower, pt.upper].map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}
