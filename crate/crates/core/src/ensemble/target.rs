//! Unnormalised log posterior of one ensemble model on an unconstrained
//! parameter vector.
//!
//! Coordinates, in order: μ, the PET/PEESE slope, log τ, and for a
//! J-interval weight function the J − 1 additive log-ratios
//! `log(η_j / η_1)` of the Dirichlet-distributed increments η. Weights are
//! the reverse cumulative sums `ω_j = η_j + … + η_J`, so `ω_1 = 1` and the
//! weights never increase as p grows. Priors include the Jacobians of all
//! transforms, so the integral of `exp(log_posterior)` over the coordinates
//! is the model evidence.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::likelihood::{LikelihoodData, ParamPoint};
use super::{BiasKind, ModelSpec};
use crate::dataset::MetaDataset;
use crate::error::{Error, Result};
use crate::optim::{hessian, minimize, MinimizeOptions};
use crate::stats::{log_cauchy, norm_logpdf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// μ ~ Normal(0, mu_sd²).
    pub mu_sd: f64,
    /// τ ~ InverseGamma(tau_shape, tau_scale).
    pub tau_shape: f64,
    pub tau_scale: f64,
    /// β_PET ~ Cauchy(0, pet_scale).
    pub pet_scale: f64,
    /// β_PEESE ~ Cauchy(0, peese_scale).
    pub peese_scale: f64,
    /// Symmetric Dirichlet concentration of the weight increments.
    pub omega_alpha: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mu_sd: 2.0,
            tau_shape: 1.0,
            tau_scale: 0.15,
            pet_scale: 1.0,
            peese_scale: 5.0,
            omega_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Layout {
    mu: Option<usize>,
    slope: Option<usize>,
    log_tau: Option<usize>,
    /// First index and count (J − 1) of the weight log-ratios.
    omega: Option<(usize, usize)>,
    dim: usize,
}

/// Posterior mode in unconstrained coordinates with its Laplace
/// covariance.
#[derive(Debug, Clone)]
pub struct Mode {
    pub x: Vec<f64>,
    pub log_posterior: f64,
    /// Negative Hessian of the log posterior (regularised to be SPD).
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelTarget {
    spec: ModelSpec,
    lik: LikelihoodData,
    priors: PriorConfig,
    layout: Layout,
    start_mu: f64,
    start_tau: [f64; 2],
    /// (μ, slope) from a weighted regression of θ on the bias term, when
    /// the model has a slope.
    start_reg: Option<(f64, f64)>,
    /// Box on every unconstrained coordinate, wide enough for the largest
    /// location or slope the data can support.
    bound: f64,
}

const MAX_INTERVALS: usize = 4;

impl ModelTarget {
    pub fn new(spec: ModelSpec, data: &MetaDataset, priors: PriorConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InsufficientData("no estimates".into()));
        }
        let mut layout = Layout::default();
        let mut next = 0;
        let mut take = |n: usize| {
            let i = next;
            next += n;
            i
        };
        if spec.has_effect {
            layout.mu = Some(take(1));
        }
        if matches!(spec.bias_kind, BiasKind::Pet | BiasKind::Peese) {
            layout.slope = Some(take(1));
        }
        if spec.has_heterogeneity {
            layout.log_tau = Some(take(1));
        }
        if let Some(c) = spec.bias_kind.cutpoints() {
            layout.omega = Some((take(c.len()), c.len()));
        }
        layout.dim = next;

        // Inverse-variance mean and a DerSimonian–Laird τ as starting values.
        let thetas = data.thetas();
        let w: Vec<f64> = data.ses().iter().map(|s| 1.0 / (s * s)).collect();
        let sw: f64 = w.iter().sum();
        let mu = w.iter().zip(&thetas).map(|(w, t)| w * t).sum::<f64>() / sw;
        let q: f64 = w.iter().zip(&thetas).map(|(w, t)| w * (t - mu).powi(2)).sum();
        let c = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
        let tau_dl = ((q - (thetas.len() as f64 - 1.0)) / c).max(0.0).sqrt();
        let sd = crate::stats::sample_sd(&thetas);
        let sd = if sd.is_finite() && sd > 0.0 { sd } else { 0.1 };
        let start_reg = match spec.bias_kind {
            BiasKind::Pet | BiasKind::Peese => {
                let g: Vec<f64> = data
                    .ses()
                    .iter()
                    .map(|s| if spec.bias_kind == BiasKind::Pet { *s } else { s * s })
                    .collect();
                let swg: f64 = w.iter().zip(&g).map(|(w, g)| w * g).sum();
                let swgg: f64 = w.iter().zip(&g).map(|(w, g)| w * g * g).sum();
                let swgt: f64 = w.iter().zip(&g).zip(&thetas).map(|((w, g), t)| w * g * t).sum();
                let swt = mu * sw;
                let fit = if spec.has_effect {
                    let det = sw * swgg - swg * swg;
                    (det > 1e-12 * sw * swgg)
                        .then(|| ((swgg * swt - swg * swgt) / det, (sw * swgt - swg * swt) / det))
                } else {
                    (swgg > 0.0).then(|| (0.0, swgt / swgg))
                };
                fit.filter(|(a, b)| a.is_finite() && b.is_finite())
            }
            _ => None,
        };
        let reach = thetas
            .iter()
            .zip(data.ses())
            .map(|(t, s)| t.abs() / s.min(s * s))
            .fold(0.0, f64::max);

        Ok(Self {
            spec,
            lik: LikelihoodData::new(data),
            priors,
            layout,
            start_mu: mu,
            start_tau: [tau_dl.max(1e-3 * sd).max(1e-4), sd],
            start_reg,
            bound: (10.0 * reach).max(60.0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn priors(&self) -> &PriorConfig {
        &self.priors
    }

    pub(crate) fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Coordinate groups updated jointly by the sampler: location
    /// (μ and slope), log τ, weight log-ratios.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<usize>)> {
        let l = &self.layout;
        let mut out = Vec::new();
        let loc: Vec<usize> = [l.mu, l.slope].into_iter().flatten().collect();
        if !loc.is_empty() {
            out.push(("location", loc));
        }
        if let Some(i) = l.log_tau {
            out.push(("tau", vec![i]));
        }
        if let Some((start, n)) = l.omega {
            out.push(("omega", (start..start + n).collect()));
        }
        out
    }

    /// Log of the Dirichlet increments η from the weight log-ratios.
    fn log_increments(&self, x: &[f64], out: &mut [f64; MAX_INTERVALS]) -> usize {
        let (start, n) = self.layout.omega.expect("selection model");
        let j = n + 1;
        out[0] = 0.0;
        out[1..j].copy_from_slice(&x[start..start + n]);
        let max = out[..j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out[..j].iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        for v in out[..j].iter_mut() {
            *v -= lse;
        }
        j
    }

    fn omegas(&self, x: &[f64], out: &mut [f64; MAX_INTERVALS]) -> usize {
        let mut log_eta = [0.0; MAX_INTERVALS];
        let j = self.log_increments(x, &mut log_eta);
        let mut acc = 0.0;
        for k in (1..j).rev() {
            acc += log_eta[k].exp();
            out[k] = acc.min(1.0);
        }
        out[0] = 1.0;
        j
    }

    pub fn param_point(&self, x: &[f64]) -> ParamPoint {
        let l = &self.layout;
        ParamPoint {
            mu: l.mu.map_or(0.0, |i| x[i]),
            tau: l.log_tau.map_or(0.0, |i| x[i].exp()),
            omega: l.omega.map(|_| {
                let mut w = [0.0; MAX_INTERVALS];
                let j = self.omegas(x, &mut w);
                w[..j].to_vec()
            }),
            slope: l.slope.map_or(0.0, |i| x[i]),
        }
    }

    /// Inverse of `param_point`. Weights must be strictly decreasing for
    /// the increments to be positive.
    pub fn to_unconstrained(&self, p: &ParamPoint) -> Result<Vec<f64>> {
        let l = &self.layout;
        let mut x = vec![0.0; l.dim];
        if let Some(i) = l.mu {
            x[i] = p.mu;
        }
        if let Some(i) = l.slope {
            x[i] = p.slope;
        }
        if let Some(i) = l.log_tau {
            if !(p.tau > 0.0) {
                return Err(Error::Domain("tau must be > 0 in a heterogeneity model".into()));
            }
            x[i] = p.tau.ln();
        }
        if let Some((start, n)) = l.omega {
            let w = p
                .omega
                .as_ref()
                .filter(|w| w.len() == n + 1)
                .ok_or_else(|| Error::Domain("weight vector has the wrong length".into()))?;
            let eta: Vec<f64> = (0..=n)
                .map(|k| w[k] - w.get(k + 1).copied().unwrap_or(0.0))
                .collect();
            if eta.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Domain(format!(
                    "weights {w:?} must be strictly decreasing to map to increments"
                )));
            }
            for k in 1..=n {
                x[start + k - 1] = (eta[k] / eta[0]).ln();
            }
        }
        Ok(x)
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let pr = &self.priors;
        let mut lp = 0.0;
        if let Some(i) = l.mu {
            lp += norm_logpdf(x[i], 0.0, pr.mu_sd * pr.mu_sd);
        }
        if let Some(i) = l.slope {
            let scale = match self.spec.bias_kind {
                BiasKind::Pet => pr.pet_scale,
                _ => pr.peese_scale,
            };
            lp += log_cauchy(x[i], scale);
        }
        if let Some(i) = l.log_tau {
            // inverse-gamma density on τ times the Jacobian dτ/dlogτ = τ
            let (a, b) = (pr.tau_shape, pr.tau_scale);
            lp += a * b.ln() - ln_gamma(a) - a * x[i] - b * (-x[i]).exp();
        }
        if l.omega.is_some() {
            // Dirichlet density on the simplex times the additive log-ratio
            // Jacobian Π η_j
            let mut log_eta = [0.0; MAX_INTERVALS];
            let j = self.log_increments(x, &mut log_eta);
            let a = pr.omega_alpha;
            lp += ln_gamma(j as f64 * a) - j as f64 * ln_gamma(a)
                + a * log_eta[..j].iter().sum::<f64>();
        }
        lp
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let mu = l.mu.map_or(0.0, |i| x[i]);
        let tau = l.log_tau.map_or(0.0, |i| x[i].exp());
        let slope = l.slope.map_or(0.0, |i| x[i]);
        let mut w = [0.0; MAX_INTERVALS];
        let j = if l.omega.is_some() { self.omegas(x, &mut w) } else { 0 };
        self.lik.log_lik(self.spec.bias_kind, mu, tau, &w[..j], slope)
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        let lp = self.log_prior(x);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let v = lp + self.log_likelihood(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn starts(&self) -> Vec<Vec<f64>> {
        let l = &self.layout;
        let taus: &[f64] = if l.log_tau.is_some() {
            &self.start_tau
        } else {
            &self.start_tau[..1]
        };
        let locs = std::iter::once((self.start_mu, 0.0)).chain(self.start_reg);
        let mut out = Vec::new();
        for (mu, slope) in locs {
            for &tau in taus {
                let mut x = vec![0.0; l.dim];
                if let Some(i) = l.mu {
                    x[i] = mu;
                }
                if let Some(i) = l.slope {
                    x[i] = slope.clamp(-self.bound, self.bound);
                }
                if let Some(i) = l.log_tau {
                    x[i] = tau.ln();
                }
                out.push(x);
            }
        }
        out
    }

    /// Maximises the log posterior from a few data-driven starts and
    /// attaches the Laplace covariance at the best optimum.
    pub fn find_mode(&self) -> Result<Mode> {
        let d = self.dim();
        if d == 0 {
            return Ok(Mode {
                x: vec![],
                log_posterior: self.log_posterior(&[]),
                precision: DMatrix::zeros(0, 0),
                covariance: DMatrix::zeros(0, 0),
                trace: vec![],
            });
        }
        let opts = MinimizeOptions {
            lower: -self.bound,
            upper: self.bound,
            ..Default::default()
        };
        let neg = |x: &[f64]| -self.log_posterior(x);
        let mut best: Option<crate::optim::Minimum> = None;
        let mut trace = Vec::new();
        for start in self.starts() {
            let m = minimize(neg, &start, &opts);
            trace.extend(m.trace.iter().cloned());
            if best.as_ref().is_none_or(|b| m.f < b.f) {
                best = Some(m);
            }
        }
        let best = best.expect("at least one start");
        if !best.f.is_finite() {
            return Err(Error::NonConvergence {
                message: format!("posterior mode search failed for {}", self.spec.label()),
                trace,
            });
        }
        let h = hessian(&neg, &best.x);
        let (precision, covariance) = regularised_inverse(&h);
        Ok(Mode {
            x: best.x,
            log_posterior: -best.f,
            precision,
            covariance,
            trace,
        })
    }
}

/// Symmetrises `h`, floors its eigenvalues and returns it with its
/// inverse.
fn regularised_inverse(h: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max).max(1e-12);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(max * 1e-10).max(1e-12) } else { 1.0 });
    let q = &eig.eigenvectors;
    let precision = q * DMatrix::from_diagonal(&vals) * q.transpose();
    let covariance = q * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v)) * q.transpose();
    (precision, covariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EffectEstimate, ModeratorSchema};

    fn data() -> MetaDataset {
        let est = (0..12)
            .map(|i| {
                let t = 0.1 + 0.05 * ((i * 7 % 5) as f64 - 2.0);
                EffectEstimate::new(i.to_string(), (i / 2).to_string(), t, 0.05 + 0.01 * i as f64)
            })
            .collect();
        MetaDataset::new(est, ModeratorSchema::empty(), "t").unwrap()
    }

    #[test]
    fn weights_round_trip_through_log_ratios() {
        let spec = ModelSpec::new(true, true, BiasKind::WeightFn05To10);
        let t = ModelTarget::new(spec, &data(), PriorConfig::default()).unwrap();
        let p = ParamPoint {
            mu: -0.016,
            tau: 0.066,
            omega: Some(vec![1.0, 0.739, 0.415]),
            slope: 0.0,
        };
        let x = t.to_unconstrained(&p).unwrap();
        let back = t.param_point(&x);
        assert!((back.mu - p.mu).abs() < 1e-15);
        assert!((back.tau - p.tau).abs() < 1e-15);
        let w = back.omega.unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.739).abs() < 1e-14 && (w[2] - 0.415).abs() < 1e-14);
    }

    #[test]
    fn weight_prior_integrates_to_one() {
        // two intervals: ω₂ ~ Uniform(0, 1), so ∫ exp(log prior) dx = 1
        let spec = ModelSpec::new(false, false, BiasKind::WeightFn05);
        let t = ModelTarget::new(spec, &data(), PriorConfig::default()).unwrap();
        let r = crate::quadrature::integrate(|x| t.log_prior(&[x]).exp(), -60.0, 60.0, 1e-12, 0.0, 400);
        assert!((r.value - 1.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn tau_prior_integrates_to_one() {
        let spec = ModelSpec::new(false, true, BiasKind::None);
        let t = ModelTarget::new(spec, &data(), PriorConfig::default()).unwrap();
        let r = crate::quadrature::integrate(|x| t.log_prior(&[x]).exp(), -40.0, 60.0, 1e-12, 0.0, 400);
        assert!((r.value - 1.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn three_interval_prior_is_normalised() {
        let spec = ModelSpec::new(false, false, BiasKind::WeightFn05To10);
        let t = ModelTarget::new(spec, &data(), PriorConfig::default()).unwrap();
        let r = crate::quadrature::integrate(
            |a| {
                crate::quadrature::integrate(|b| t.log_prior(&[a, b]).exp(), -40.0, 40.0, 1e-11, 0.0, 200).value
            },
            -40.0,
            40.0,
            1e-10,
            0.0,
            200,
        );
        assert!((r.value - 1.0).abs() < 1e-8, "{}", r.value);
    }

    #[test]
    fn mode_of_effect_only_model_is_near_weighted_mean() {
        let spec = ModelSpec::new(true, false, BiasKind::None);
        let d = data();
        let t = ModelTarget::new(spec, &d, PriorConfig::default()).unwrap();
        let m = t.find_mode().unwrap();
        // conjugate posterior: precision Σw + 1/4, mean Σwθ / precision
        let w: Vec<f64> = d.ses().iter().map(|s| 1.0 / (s * s)).collect();
        let prec: f64 = w.iter().sum::<f64>() + 0.25;
        let mean = w.iter().zip(d.thetas()).map(|(w, t)| w * t).sum::<f64>() / prec;
        assert!((m.x[0] - mean).abs() < 1e-8, "{} vs {}", m.x[0], mean);
        assert!((m.precision[(0, 0)] / prec - 1.0).abs() < 1e-4);
    }
}
