//! Synthetic meta-analytic datasets with known truth.
//!
//! Study effects `u ~ N(0, τ_b²)`, estimate effects `w ~ N(0, τ_w²)`,
//! standard errors uniform on `se_range`, and
//! `θ ~ N(μ + x'β + u + w, σ²)`. With a weight function, each proposed
//! estimate is kept with probability `ω(p)` and proposals continue until
//! every study has its target count.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dataset::{EffectEstimate, MetaDataset, ModeratorEntry, ModeratorKind, ModeratorSchema};
use crate::ensemble::WeightFunction;
use crate::error::{Error, Result};
use crate::stats::two_sided_p;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignLevel {
    /// One value per study, shared by its estimates.
    Study,
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum ModeratorDesign {
    Normal { mean: f64, sd: f64, level: DesignLevel },
    Binary { p: f64, level: DesignLevel },
}

impl ModeratorDesign {
    fn kind(&self) -> ModeratorKind {
        match self {
            ModeratorDesign::Normal { .. } => ModeratorKind::Continuous,
            ModeratorDesign::Binary { .. } => ModeratorKind::Binary,
        }
    }

    fn level(&self) -> DesignLevel {
        match *self {
            ModeratorDesign::Normal { level, .. } | ModeratorDesign::Binary { level, .. } => level,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        Ok(match *self {
            ModeratorDesign::Normal { mean, sd, .. } => {
                mean + sd * rng.sample::<f64, _>(StandardNormal)
            }
            ModeratorDesign::Binary { p, .. } => {
                let b = Bernoulli::new(p)
                    .map_err(|_| Error::Validation(format!("binary moderator probability {p} outside [0, 1]")))?;
                f64::from(u8::from(b.sample(rng)))
            }
        })
    }
}

const DEFAULT_DESIGN: ModeratorDesign = ModeratorDesign::Normal {
    mean: 0.0,
    sd: 1.0,
    level: DesignLevel::Estimate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mu_true: f64,
    pub tau_between: f64,
    pub tau_within: f64,
    pub weightfn: Option<WeightFunction>,
    pub n_studies: usize,
    /// Inclusive range of retained estimates per study.
    pub estimates_per_study: [usize; 2],
    pub se_range: [f64; 2],
    /// True moderator coefficients. Moderators without an entry in
    /// `design` are standard normal at the estimate level.
    #[serde(default)]
    pub beta_true: BTreeMap<String, f64>,
    /// Moderator distributions; names here without a coefficient are pure
    /// noise columns.
    #[serde(default)]
    pub design: BTreeMap<String, ModeratorDesign>,
    pub seed: u64,
    /// Proposal budget as a multiple of the target estimate count.
    #[serde(default = "default_budget")]
    pub budget_factor: f64,
}

fn default_budget() -> f64 {
    1000.0
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mu_true: 0.0,
            tau_between: 0.0,
            tau_within: 0.0,
            weightfn: None,
            n_studies: 50,
            estimates_per_study: [1, 1],
            se_range: [0.005, 0.3],
            beta_true: BTreeMap::new(),
            design: BTreeMap::new(),
            seed: 0,
            budget_factor: default_budget(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_studies == 0 {
            return bad("n_studies must be at least 1".into());
        }
        let [lo, hi] = self.estimates_per_study;
        if lo == 0 || lo > hi {
            return bad(format!("estimates_per_study [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        let [a, b] = self.se_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return bad(format!("se_range [{a}, {b}] must satisfy 0 < lo <= hi"));
        }
        if !(self.tau_between >= 0.0 && self.tau_within >= 0.0) {
            return bad("heterogeneity must be non-negative".into());
        }
        if !self.mu_true.is_finite() || self.beta_true.values().any(|b| !b.is_finite()) {
            return bad("mu_true and beta_true must be finite".into());
        }
        if !(self.budget_factor >= 1.0) {
            return bad(format!("budget_factor {} must be >= 1", self.budget_factor));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    fn moderators(&self) -> Vec<(String, ModeratorDesign)> {
        let mut names: Vec<&String> = self.design.keys().chain(self.beta_true.keys()).collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .map(|n| (n.clone(), self.design.get(n).copied().unwrap_or(DEFAULT_DESIGN)))
            .collect()
    }
}

/// Proposal bookkeeping per weight-function interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub proposed: u64,
    pub proposed_by_interval: Vec<u64>,
    pub retained_by_interval: Vec<u64>,
}

pub fn generate(config: &SimConfig) -> Result<MetaDataset> {
    generate_with_stats(config).map(|(d, _)| d)
}

pub fn generate_with_stats(config: &SimConfig) -> Result<(MetaDataset, SimStats)> {
    config.validate()?;
    let mut rng = crate::seed::stream(config.seed, "simulate", 0);
    let moderators = config.moderators();
    let schema = ModeratorSchema::new(
        moderators.iter().map(|(n, d)| ModeratorEntry::new(n.clone(), d.kind())).collect(),
    )?;
    let se_dist = Uniform::new_inclusive(config.se_range[0], config.se_range[1])
        .map_err(|e| Error::Validation(e.to_string()))?;
    let u_dist = Normal::new(0.0, config.tau_between).map_err(|e| Error::Validation(e.to_string()))?;
    let w_dist = Normal::new(0.0, config.tau_within).map_err(|e| Error::Validation(e.to_string()))?;
    let [k_lo, k_hi] = config.estimates_per_study;

    let counts: Vec<usize> = (0..config.n_studies).map(|_| rng.random_range(k_lo..=k_hi)).collect();
    let target: usize = counts.iter().sum();
    let budget = (config.budget_factor * target as f64).ceil() as u64;
    let n_int = config.weightfn.as_ref().map_or(1, |w| w.n_intervals());
    let mut stats = SimStats {
        proposed: 0,
        proposed_by_interval: vec![0; n_int],
        retained_by_interval: vec![0; n_int],
    };

    let mut estimates = Vec::with_capacity(target);
    for (r, &k) in counts.iter().enumerate() {
        let study = format!("s{:05}", r + 1);
        let u = u_dist.sample(&mut rng);
        let study_x: Vec<Option<f64>> = moderators
            .iter()
            .map(|(_, d)| match d.level() {
                DesignLevel::Study => d.draw(&mut rng).map(Some),
                DesignLevel::Estimate => Ok(None),
            })
            .collect::<Result<_>>()?;
        let mut kept = 0;
        while kept < k {
            if stats.proposed >= budget {
                return Err(Error::Budget { proposals: stats.proposed, retained: estimates.len(), target });
            }
            stats.proposed += 1;
            let mut x = Vec::with_capacity(moderators.len());
            for ((_, d), sx) in moderators.iter().zip(&study_x) {
                x.push(match sx {
                    Some(v) => *v,
                    None => d.draw(&mut rng)?,
                });
            }
            let xb: f64 = moderators
                .iter()
                .zip(&x)
                .map(|((n, _), v)| config.beta_true.get(n).copied().unwrap_or(0.0) * v)
                .sum();
            let se = se_dist.sample(&mut rng);
            let mean = config.mu_true + xb + u + w_dist.sample(&mut rng);
            let theta = mean + se * rng.sample::<f64, _>(StandardNormal);
            let keep = match &config.weightfn {
                None => {
                    stats.proposed_by_interval[0] += 1;
                    true
                }
                Some(wf) => {
                    let p = two_sided_p(theta / se);
                    let j = wf.interval_of(p);
                    stats.proposed_by_interval[j] += 1;
                    let keep = rng.random::<f64>() < wf.omegas()[j];
                    stats.retained_by_interval[j] += u64::from(keep);
                    keep
                }
            };
            if !keep {
                continue;
            }
            if config.weightfn.is_none() {
                stats.retained_by_interval[0] += 1;
            }
            kept += 1;
            let id = format!("e{:06}", estimates.len() + 1);
            let mut e = EffectEstimate::new(id, study.clone(), theta, se);
            for ((n, _), v) in moderators.iter().zip(&x) {
                e = e.with_moderator(n.clone(), *v);
            }
            estimates.push(e);
        }
    }
    let data = MetaDataset::new(estimates, schema, format!("simulated (seed {})", config.seed))?;
    Ok((data, stats))
}
