//! Robust Bayesian model averaging over effect, heterogeneity and
//! publication-bias specifications.
//!
//! The ensemble crosses effect presence (μ free or μ = 0), heterogeneity
//! (τ free or τ = 0) and five bias specifications: none, two two-sided
//! step weight functions (cutpoints .05 and .05/.10), PET and PEESE.
//! Each of the 20 models is fitted by Metropolis-within-Gibbs, its
//! evidence computed by quadrature (up to two free parameters) or bridge
//! sampling, and the posteriors are mixed by posterior model probability.

mod evidence;
mod likelihood;
mod report;
mod sampler;
mod summary;
mod target;
mod weightfn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MetaDataset;
use crate::error::Result;

pub use evidence::{
    bridge_log_evidence, log_marginal_likelihood, quadrature_log_evidence, BridgeConfig,
    BridgeResult, EvidenceMethod, EvidenceStrategy,
};
pub use likelihood::{
    interval_probabilities, log_likelihood, selection_normalizer, LikelihoodData, ParamPoint,
};
pub use report::{write_weightfn_csv, EnsembleReport, ModelRow, WeightFnPoint};
pub use sampler::{sample_posterior, split_rhat, ChainDiagnostics, PosteriorDraws, SamplerConfig};
pub use summary::{average_ensemble, ComponentSummary, EnsembleSummary, IntervalSummary, ParamSummary};
pub use target::{Mode, ModelTarget, PriorConfig};
pub use weightfn::WeightFunction;

/// Publication-bias specification of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    None,
    #[serde(rename = "weightfn_05")]
    WeightFn05,
    #[serde(rename = "weightfn_05_10")]
    WeightFn05To10,
    Pet,
    Peese,
}

impl BiasKind {
    pub const ALL: [BiasKind; 5] = [
        BiasKind::None,
        BiasKind::WeightFn05,
        BiasKind::WeightFn05To10,
        BiasKind::Pet,
        BiasKind::Peese,
    ];

    /// Two-sided p-value cutpoints for the selection models.
    pub fn cutpoints(self) -> Option<&'static [f64]> {
        match self {
            BiasKind::WeightFn05 => Some(&[0.05]),
            BiasKind::WeightFn05To10 => Some(&[0.05, 0.10]),
            _ => None,
        }
    }

    pub fn is_selection(self) -> bool {
        self.cutpoints().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasKind::None => "none",
            BiasKind::WeightFn05 => "weightfn_05",
            BiasKind::WeightFn05To10 => "weightfn_05_10",
            BiasKind::Pet => "pet",
            BiasKind::Peese => "peese",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub has_effect: bool,
    pub has_heterogeneity: bool,
    pub bias_kind: BiasKind,
    pub prior_prob: f64,
}

impl ModelSpec {
    pub fn new(has_effect: bool, has_heterogeneity: bool, bias_kind: BiasKind) -> Self {
        Self {
            has_effect,
            has_heterogeneity,
            bias_kind,
            prior_prob: 1.0 / 20.0,
        }
    }

    pub fn has_bias(&self) -> bool {
        self.bias_kind != BiasKind::None
    }

    /// Number of free parameters: μ, τ, the J - 1 free weights of a
    /// J-interval weight function, and the PET/PEESE slope.
    pub fn n_free(&self) -> usize {
        let bias = match self.bias_kind {
            BiasKind::None => 0,
            BiasKind::Pet | BiasKind::Peese => 1,
            k => k.cutpoints().map_or(0, |c| c.len()),
        };
        usize::from(self.has_effect) + usize::from(self.has_heterogeneity) + bias
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            if self.has_effect { "effect" } else { "null" },
            if self.has_heterogeneity { "random" } else { "fixed" },
            self.bias_kind.as_str()
        )
    }
}

/// The 20-model space, ordered effect × heterogeneity × bias with every
/// prior probability equal to 1/20.
pub fn build_model_space() -> Vec<ModelSpec> {
    let mut specs = Vec::with_capacity(20);
    for has_effect in [true, false] {
        for has_heterogeneity in [true, false] {
            for bias in BiasKind::ALL {
                specs.push(ModelSpec::new(has_effect, has_heterogeneity, bias));
            }
        }
    }
    let p = 1.0 / specs.len() as f64;
    for s in &mut specs {
        s.prior_prob = p;
    }
    specs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub sampler: SamplerConfig,
    pub priors: PriorConfig,
    pub evidence: EvidenceStrategy,
    pub bridge: BridgeConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            priors: PriorConfig::default(),
            evidence: EvidenceStrategy::Auto,
            bridge: BridgeConfig::default(),
        }
    }
}

/// A fitted model: posterior draws, evidence and (after averaging) its
/// posterior probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPosterior {
    pub spec: ModelSpec,
    pub log_marginal_likelihood: f64,
    pub evidence_method: EvidenceMethod,
    pub posterior_prob: f64,
    pub draws: PosteriorDraws,
    pub diagnostics: ChainDiagnostics,
}

/// Fits one model: posterior sampling plus evidence by the configured
/// strategy.
pub fn fit_model(
    spec: ModelSpec,
    data: &MetaDataset,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<ModelPosterior> {
    let target = ModelTarget::new(spec, data, config.priors.clone())?;
    let mode = target.find_mode()?;
    let (draws, unconstrained, diagnostics) =
        sampler::run_chains(&target, &mode, &config.sampler, seed)?;
    let method = config.evidence.method_for(target.dim());
    let log_ml = match method {
        EvidenceMethod::Exact | EvidenceMethod::Quadrature => {
            evidence::quadrature_with_mode(&target, &mode)?
        }
        EvidenceMethod::Bridge => {
            evidence::bridge_log_evidence(&target, &unconstrained, &config.bridge, seed)?
                .log_evidence
        }
    };
    Ok(ModelPosterior {
        spec,
        log_marginal_likelihood: log_ml,
        evidence_method: method,
        posterior_prob: f64::NAN,
        draws,
        diagnostics,
    })
}

/// Fits every model of the ensemble in parallel and averages them. Each
/// model draws from its own seed-derived stream, so results do not depend
/// on scheduling.
pub fn fit_ensemble(
    data: &MetaDataset,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<(Vec<ModelPosterior>, EnsembleSummary)> {
    let specs = build_model_space();
    let mut posteriors = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| fit_model(spec, data, config, crate::seed::derive_seed(seed, "ensemble", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let summary = average_ensemble(&posteriors)?;
    for (p, prob) in posteriors.iter_mut().zip(&summary.posterior_probs) {
        p.posterior_prob = *prob;
    }
    Ok((posteriors, summary))
}
