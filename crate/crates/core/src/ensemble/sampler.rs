//! Blocked random-walk Metropolis-within-Gibbs.
//!
//! Each block (location, log τ, weight log-ratios) gets a Gaussian
//! proposal shaped by the conditional Laplace covariance at the mode.
//! Proposal scales adapt toward a target acceptance rate during burn-in
//! only, and halfway through burn-in the block shapes are re-estimated
//! from the chain's own draws, so the kept draws come from a fixed kernel.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::target::{Mode, ModelTarget, PriorConfig};
use super::ModelSpec;
use crate::dataset::MetaDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub rhat_threshold: f64,
    /// Burn-in iterations between proposal-scale updates.
    pub adapt_interval: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 5000,
            burn_in: 1000,
            rhat_threshold: 1.05,
            adapt_interval: 50,
        }
    }
}

impl SamplerConfig {
    pub fn kept_per_chain(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Validation("at least one chain is required".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Validation(format!(
                "burn-in ({}) must be shorter than the chain ({} iterations)",
                self.burn_in, self.iterations
            )));
        }
        if self.adapt_interval == 0 {
            return Err(Error::Validation("adapt_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Kept draws on the natural scale, chains concatenated in order. A
/// parameter the model does not contain has an empty vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub n_draws: usize,
    pub mu: Vec<f64>,
    pub tau: Vec<f64>,
    /// `omega[j]` holds the draws of interval j's weight (ω₀ ≡ 1 included).
    pub omega: Vec<Vec<f64>>,
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Post-burn-in acceptance rate per block, averaged over chains.
    pub acceptance: BTreeMap<String, f64>,
    pub rhat: BTreeMap<String, f64>,
    pub max_rhat: f64,
    pub converged: bool,
}

struct Block {
    idx: Vec<usize>,
    chol: DMatrix<f64>,
    log_scale: f64,
    accepted: usize,
    proposed: usize,
}

impl Block {
    fn target_rate(&self) -> f64 {
        if self.idx.len() == 1 {
            0.44
        } else {
            0.3
        }
    }
}

/// Lower Cholesky factor of the conditional covariance `inv(P_bb)`.
fn conditional_factor(precision: &DMatrix<f64>, idx: &[usize]) -> Option<DMatrix<f64>> {
    let p = DMatrix::from_fn(idx.len(), idx.len(), |i, j| precision[(idx[i], idx[j])]);
    let inv = Cholesky::new(p)?.inverse();
    Some(Cholesky::new(inv)?.l())
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    acceptance: Vec<f64>,
}

fn run_chain(
    target: &ModelTarget,
    mode: &Mode,
    config: &SamplerConfig,
    mut rng: ChaCha8Rng,
) -> Result<ChainOutput> {
    let d = target.dim();
    let mut blocks: Vec<Block> = target
        .blocks()
        .into_iter()
        .map(|(_, idx)| {
            let chol = conditional_factor(&mode.precision, &idx)
                .unwrap_or_else(|| DMatrix::identity(idx.len(), idx.len()) * 0.1);
            let log_scale = (2.38 / (idx.len() as f64).sqrt()).ln();
            Block { idx, chol, log_scale, accepted: 0, proposed: 0 }
        })
        .collect();

    // over-dispersed start: mode plus twice the Laplace spread
    let mut x = mode.x.clone();
    let mut lp = f64::NEG_INFINITY;
    if let Some(ch) = Cholesky::new(mode.covariance.clone()) {
        let l = ch.l();
        for _ in 0..20 {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let cand: Vec<f64> = (&mode.x[..])
                .iter()
                .zip((&l * z * 2.0).iter())
                .map(|(m, e)| m + e)
                .collect();
            let v = target.log_posterior(&cand);
            if v.is_finite() {
                x = cand;
                lp = v;
                break;
            }
        }
    }
    if !lp.is_finite() {
        x = mode.x.clone();
        lp = target.log_posterior(&x);
    }
    if !lp.is_finite() {
        return Err(Error::Domain(format!(
            "log posterior of {} is not finite at the mode",
            target.spec().label()
        )));
    }

    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(kept);
    let mut history: Vec<Vec<f64>> = Vec::new();
    let reshape_at = config.burn_in / 2;
    let mut cand = x.clone();
    let mut window = vec![(0usize, 0usize); blocks.len()];
    let mut n_adapt = 0usize;

    for iter in 0..config.iterations {
        if iter == config.burn_in {
            for b in &mut blocks {
                b.accepted = 0;
                b.proposed = 0;
            }
        }
        for (bi, b) in blocks.iter_mut().enumerate() {
            let k = b.idx.len();
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &b.chol * z * b.log_scale.exp();
            cand.copy_from_slice(&x);
            for (j, &i) in b.idx.iter().enumerate() {
                cand[i] += step[j];
            }
            let lp_new = target.log_posterior(&cand);
            let u: f64 = rng.random();
            let accept = lp_new.is_finite() && u.ln() < lp_new - lp;
            if accept {
                x.copy_from_slice(&cand);
                lp = lp_new;
            }
            b.proposed += 1;
            b.accepted += usize::from(accept);
            window[bi].0 += 1;
            window[bi].1 += usize::from(accept);
        }

        if iter < config.burn_in {
            if iter >= config.burn_in / 4 {
                history.push(x.clone());
            }
            if (iter + 1) % config.adapt_interval == 0 {
                n_adapt += 1;
                let gain = 1.0 / (n_adapt as f64).sqrt();
                for (b, w) in blocks.iter_mut().zip(window.iter_mut()) {
                    let rate = w.1 as f64 / w.0.max(1) as f64;
                    b.log_scale = (b.log_scale + gain * (rate - b.target_rate())).clamp(-12.0, 5.0);
                    *w = (0, 0);
                }
            }
            if iter + 1 == reshape_at && history.len() > 10 * (d + 1) {
                reshape_blocks(&mut blocks, &history);
            }
        } else {
            draws.push(x.clone());
        }
    }
    let acceptance = blocks
        .iter()
        .map(|b| b.accepted as f64 / b.proposed.max(1) as f64)
        .collect();
    Ok(ChainOutput { draws, acceptance })
}

/// Replaces each block's proposal shape by the conditional covariance
/// implied by the empirical covariance of `history`; blocks whose
/// estimate is singular keep their Laplace shape.
fn reshape_blocks(blocks: &mut [Block], history: &[Vec<f64>]) {
    let d = history[0].len();
    let n = history.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| history.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let cov = DMatrix::from_fn(d, d, |i, j| {
        history.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    let Some(ch) = Cholesky::new(cov) else { return };
    let precision = ch.inverse();
    for b in blocks {
        if let Some(l) = conditional_factor(&precision, &b.idx) {
            if l.iter().all(|v| v.is_finite()) {
                b.chol = l;
            }
        }
    }
}

/// Potential scale reduction on split chains: every chain is cut in
/// half and the halves are compared as separate chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if n < 2 || halves.len() < 2 {
        return f64::NAN;
    }
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h[..n].iter().sum::<f64>() / nf).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

/// Runs all chains of one model. Returns natural-scale draws, the
/// unconstrained draws (for bridge sampling) and diagnostics.
pub(crate) fn run_chains(
    target: &ModelTarget,
    mode: &Mode,
    config: &SamplerConfig,
    seed: u64,
) -> Result<(PosteriorDraws, Vec<Vec<f64>>, ChainDiagnostics)> {
    config.validate()?;
    let kept = config.kept_per_chain();
    let n_draws = kept * config.chains;
    if target.dim() == 0 {
        let diag = ChainDiagnostics { max_rhat: 1.0, converged: true, ..Default::default() };
        return Ok((PosteriorDraws { n_draws, ..Default::default() }, vec![Vec::new(); n_draws], diag));
    }

    let outputs = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, mode, config, crate::seed::stream(seed, "chain", c as u64)))
        .collect::<Result<Vec<_>>>()?;

    let spec = target.spec();
    let mut draws = PosteriorDraws { n_draws, ..Default::default() };
    let n_omega = spec.bias_kind.cutpoints().map_or(0, |c| c.len() + 1);
    draws.omega = vec![Vec::with_capacity(n_draws); n_omega];
    let mut unconstrained = Vec::with_capacity(n_draws);
    for out in &outputs {
        for x in &out.draws {
            let p = target.param_point(x);
            if spec.has_effect {
                draws.mu.push(p.mu);
            }
            if spec.has_heterogeneity {
                draws.tau.push(p.tau);
            }
            if let Some(w) = &p.omega {
                for (col, v) in draws.omega.iter_mut().zip(w) {
                    col.push(*v);
                }
            }
            if matches!(spec.bias_kind, super::BiasKind::Pet | super::BiasKind::Peese) {
                draws.slope.push(p.slope);
            }
        }
        unconstrained.extend(out.draws.iter().cloned());
    }

    let mut diag = ChainDiagnostics::default();
    for (bi, (name, _)) in target.blocks().iter().enumerate() {
        let rate = outputs.iter().map(|o| o.acceptance[bi]).sum::<f64>() / outputs.len() as f64;
        diag.acceptance.insert((*name).to_string(), rate);
    }
    let mut columns: Vec<(String, &Vec<f64>)> = vec![("mu".into(), &draws.mu), ("tau".into(), &draws.tau)];
    // ω₀ is fixed at one
    for (j, col) in draws.omega.iter().enumerate().skip(1) {
        columns.push((format!("omega_{j}"), col));
    }
    columns.push((spec.bias_kind.as_str().to_string(), &draws.slope));
    for (name, col) in columns {
        if col.is_empty() {
            continue;
        }
        let chains: Vec<&[f64]> = col.chunks(kept).collect();
        diag.rhat.insert(name, split_rhat(&chains));
    }
    diag.max_rhat = diag.rhat.values().copied().fold(1.0, f64::max);
    diag.converged = diag.rhat.values().all(|r| *r <= config.rhat_threshold);
    Ok((draws, unconstrained, diag))
}

/// Posterior draws of one model under the given priors.
pub fn sample_posterior(
    spec: ModelSpec,
    data: &MetaDataset,
    priors: &PriorConfig,
    config: &SamplerConfig,
    seed: u64,
) -> Result<(PosteriorDraws, ChainDiagnostics)> {
    let target = ModelTarget::new(spec, data, priors.clone())?;
    let mode = target.find_mode()?;
    let (draws, _, diag) = run_chains(&target, &mode, config, seed)?;
    Ok((draws, diag))
}
