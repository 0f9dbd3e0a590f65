//! Marginal likelihoods: exact for parameter-free models, adaptive
//! Gauss–Kronrod in one or two dimensions, Meng–Wong bridge sampling
//! otherwise.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sampler::run_chains;
use super::target::{Mode, ModelTarget, PriorConfig};
use super::{EnsembleConfig, ModelSpec};
use crate::dataset::MetaDataset;
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::stats::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMethod {
    Exact,
    Quadrature,
    Bridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceStrategy {
    /// Quadrature up to two free parameters, bridge sampling beyond.
    Auto,
    Quadrature,
    Bridge,
}

impl EvidenceStrategy {
    pub fn method_for(self, dim: usize) -> EvidenceMethod {
        match (self, dim) {
            (_, 0) => EvidenceMethod::Exact,
            (EvidenceStrategy::Auto, d) if d <= 2 => EvidenceMethod::Quadrature,
            (EvidenceStrategy::Quadrature, _) => EvidenceMethod::Quadrature,
            _ => EvidenceMethod::Bridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResult {
    pub log_evidence: f64,
    pub iterations: usize,
    pub n_posterior: usize,
    pub n_proposal: usize,
}

const DROP: f64 = 40.0;
const QUAD_REL_TOL: f64 = 1e-10;
const QUAD_SEGMENTS: usize = 200;

/// Walks from `center` in steps of `sd` (doubling every eight steps)
/// until `f` falls `DROP` below the highest value seen or `|x|` passes
/// `limit`.
fn support_edge(f: &mut impl FnMut(f64) -> f64, center: f64, sd: f64, dir: f64, limit: f64) -> f64 {
    let mut peak = f(center);
    let mut x = center;
    let mut step = sd;
    for k in 1..=400 {
        x += dir * step;
        let v = f(x);
        if v > peak {
            peak = v;
        }
        if !(v > peak - DROP) || x.abs() > limit {
            break;
        }
        if k % 8 == 0 {
            step *= 2.0;
        }
    }
    x
}

fn integrate_line(mut f: impl FnMut(f64) -> f64, center: f64, sd: f64, shift: f64, limit: f64) -> f64 {
    let lo = support_edge(&mut f, center, sd, -1.0, limit);
    let hi = support_edge(&mut f, center, sd, 1.0, limit);
    integrate(|x| (f(x) - shift).exp(), lo, hi, QUAD_REL_TOL, 0.0, QUAD_SEGMENTS).value
}

/// Log evidence by quadrature around a precomputed mode. Supports at
/// most two free parameters.
pub(crate) fn quadrature_with_mode(target: &ModelTarget, mode: &Mode) -> Result<f64> {
    let shift = mode.log_posterior;
    let limit = target.bound();
    let v = match target.dim() {
        0 => return Ok(target.log_posterior(&[])),
        1 => {
            let sd = mode.covariance[(0, 0)].sqrt();
            integrate_line(|x| target.log_posterior(&[x]), mode.x[0], sd, shift, limit)
        }
        2 => {
            let cov = &mode.covariance;
            let sd0 = cov[(0, 0)].sqrt();
            let slope = cov[(1, 0)] / cov[(0, 0)];
            let sd1 = (1.0 / mode.precision[(1, 1)]).sqrt();
            let (m0, m1) = (mode.x[0], mode.x[1]);
            let inner = |a: f64| {
                let center = m1 + slope * (a - m0);
                let g = |b: f64| target.log_posterior(&[a, b]);
                integrate_line(g, center, sd1, shift, limit)
            };
            let mut log_outer = |a: f64| inner(a).ln() + shift;
            let lo = support_edge(&mut log_outer, m0, sd0, -1.0, limit);
            let hi = support_edge(&mut log_outer, m0, sd0, 1.0, limit);
            integrate(inner, lo, hi, 1e-9, 0.0, QUAD_SEGMENTS).value
        }
        d => {
            return Err(Error::Domain(format!(
                "quadrature evidence supports at most 2 free parameters, model has {d}"
            )))
        }
    };
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::NonConvergence {
            message: format!("quadrature evidence for {} is {v}", target.spec().label()),
            trace: vec![],
        });
    }
    Ok(shift + v.ln())
}

/// Log evidence of a model with at most two free parameters by adaptive
/// quadrature over the prior.
pub fn quadrature_log_evidence(spec: ModelSpec, data: &MetaDataset, priors: &PriorConfig) -> Result<f64> {
    let target = ModelTarget::new(spec, data, priors.clone())?;
    let mode = target.find_mode()?;
    quadrature_with_mode(&target, &mode)
}

/// Meng–Wong optimal bridge sampling with a normal proposal fitted to the
/// first half of each chain; the second halves form the posterior sample.
/// `draws` are unconstrained coordinates, chains concatenated in equal
/// lengths.
pub fn bridge_log_evidence(
    target: &ModelTarget,
    draws: &[Vec<f64>],
    config: &BridgeConfig,
    seed: u64,
) -> Result<BridgeResult> {
    let d = target.dim();
    if d == 0 {
        return Ok(BridgeResult {
            log_evidence: target.log_posterior(&[]),
            iterations: 0,
            n_posterior: 0,
            n_proposal: 0,
        });
    }
    if draws.len() < 4 * (d + 1) {
        return Err(Error::InsufficientData(format!(
            "bridge sampling needs at least {} draws, got {}",
            4 * (d + 1),
            draws.len()
        )));
    }
    let (fit, eval): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = {
        let half = draws.len() / 2;
        (draws[..half].iter().collect(), draws[half..].iter().collect())
    };

    let n = fit.len() as f64;
    let mean = DVector::from_fn(d, |j, _| fit.iter().map(|x| x[j]).sum::<f64>() / n);
    let cov = DMatrix::from_fn(d, d, |i, j| {
        fit.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    let chol = Cholesky::new(cov).ok_or_else(|| Error::NonConvergence {
        message: format!("posterior draws of {} have a singular covariance", target.spec().label()),
        trace: vec![],
    })?;
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let log_q = |x: &[f64]| {
        let r = DVector::from_fn(d, |j, _| x[j] - mean[j]);
        let z = l.solve_lower_triangular(&r).expect("nonsingular factor");
        log_norm - 0.5 * z.norm_squared()
    };

    let n1 = eval.len();
    let n2 = n1;
    let mut rng = crate::seed::stream(seed, "bridge", 0);
    let l1: Vec<f64> = eval.iter().map(|x| target.log_posterior(x) - log_q(x)).collect();
    let l2: Vec<f64> = (0..n2)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y: Vec<f64> = (&mean + &l * z).iter().copied().collect();
            target.log_posterior(&y) - log_q(&y)
        })
        .collect();

    let mut sorted = l1.clone();
    sorted.sort_by(f64::total_cmp);
    let l_star = crate::stats::quantile_linear(&sorted, 0.5);
    if !l_star.is_finite() {
        return Err(Error::NonConvergence {
            message: format!("bridge sampling for {}: non-finite posterior density", target.spec().label()),
            trace: vec![],
        });
    }
    let (s1, s2) = (n1 as f64 / (n1 + n2) as f64, n2 as f64 / (n1 + n2) as f64);
    let (ls1, ls2) = (s1.ln(), s2.ln());
    let l1: Vec<f64> = l1.iter().map(|v| v - l_star).collect();
    let l2: Vec<f64> = l2.iter().map(|v| v - l_star).collect();

    let mut log_r = 0.0;
    let mut trace = Vec::new();
    let mut num = vec![0.0; n2];
    let mut den = vec![0.0; n1];
    for it in 1..=config.max_iter {
        let lr2 = ls2 + log_r;
        for (o, &v) in num.iter_mut().zip(&l2) {
            *o = v - lse2(ls1 + v, lr2);
        }
        for (o, &v) in den.iter_mut().zip(&l1) {
            *o = -lse2(ls1 + v, lr2);
        }
        let next = log_sum_exp(&num) - (n2 as f64).ln() - (log_sum_exp(&den) - (n1 as f64).ln());
        trace.push(format!("iteration {it}: log r = {next:.12}"));
        if !next.is_finite() {
            return Err(Error::NonConvergence {
                message: format!("bridge sampling for {} diverged", target.spec().label()),
                trace,
            });
        }
        let change = (next - log_r).abs();
        log_r = next;
        if change < config.tol {
            return Ok(BridgeResult {
                log_evidence: log_r + l_star,
                iterations: it,
                n_posterior: n1,
                n_proposal: n2,
            });
        }
    }
    Err(Error::NonConvergence {
        message: format!(
            "bridge sampling for {} did not converge in {} iterations",
            target.spec().label(),
            config.max_iter
        ),
        trace,
    })
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log marginal likelihood of one model under `config`'s evidence
/// strategy. Bridge sampling runs the configured sampler first.
pub fn log_marginal_likelihood(
    spec: ModelSpec,
    data: &MetaDataset,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<f64> {
    let target = ModelTarget::new(spec, data, config.priors.clone())?;
    let mode = target.find_mode()?;
    match config.evidence.method_for(target.dim()) {
        EvidenceMethod::Exact | EvidenceMethod::Quadrature => quadrature_with_mode(&target, &mode),
        EvidenceMethod::Bridge => {
            let (_, unconstrained, _) = run_chains(&target, &mode, &config.sampler, seed)?;
            Ok(bridge_log_evidence(&target, &unconstrained, &config.bridge, seed)?.log_evidence)
        }
    }
}
