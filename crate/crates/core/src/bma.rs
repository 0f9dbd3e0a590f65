//! Moderator screening by Bayesian model averaging over all candidate
//! subsets of a linear regression of θ.
//!
//! Every model holds the intercept and the forced regressors. Evidence
//! uses Zellner's g-prior with `g = max(n, K²)` (K = forced + candidate
//! regressors), for which the Bayes factor against the intercept-only model
//! depends on the data only through R²:
//!
//! ```text
//! log BF = (n − 1 − p)/2 · ln(1 + g) − (n − 1)/2 · ln(1 + g(1 − R²))
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use std::collections::BTreeMap;
use std::io::Write;

use crate::dataset::{MetaDataset, ModeratorKind, COL_SE};
use crate::error::{Error, Result};
use crate::linalg::collinear_columns;

/// Exhaustive enumeration is limited to 2^25 models.
pub const MAX_CANDIDATES: usize = 25;
pub const DEFAULT_THRESHOLD: f64 = 0.1;
const CHUNK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelPrior {
    Uniform,
    /// Beta-binomial prior on the number of included candidates.
    BetaBinomial { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaConfig {
    pub model_prior: ModelPrior,
    /// Weight observations by 1/se² (weighted centering, then √w scaling).
    pub precision_weighted: bool,
    /// Overrides `max(n, K²)`.
    pub g: Option<f64>,
}

impl Default for BmaConfig {
    fn default() -> Self {
        Self { model_prior: ModelPrior::Uniform, precision_weighted: false, g: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaScreenResult {
    /// Candidates in input order.
    pub candidates: Vec<String>,
    pub forced: Vec<String>,
    pub pips: BTreeMap<String, f64>,
    /// Forced regressors, then candidates at or above the threshold, in
    /// input order.
    pub included: Vec<String>,
    /// Model-averaged coefficients on the original scale (zero in models
    /// that exclude the moderator).
    pub posterior_mean_beta: BTreeMap<String, f64>,
    pub n_models_evaluated: u64,
    pub threshold: f64,
    pub g: f64,
}

impl BmaScreenResult {
    /// Re-applies a different inclusion threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut out = self.clone();
        out.threshold = threshold;
        out.included = included_set(&self.forced, &self.candidates, &self.pips, threshold);
        out
    }
}

fn included_set(forced: &[String], candidates: &[String], pips: &BTreeMap<String, f64>, t: f64) -> Vec<String> {
    forced
        .iter()
        .cloned()
        .chain(candidates.iter().filter(|c| pips[*c] >= t).cloned())
        .collect()
}

/// Bayes factor of a model against the intercept-only model.
pub fn g_prior_log_bf(n: usize, p: usize, r2: f64, g: f64) -> f64 {
    let n1 = n as f64 - 1.0;
    0.5 * (n1 - p as f64) * g.ln_1p() - 0.5 * n1 * (g * (1.0 - r2)).ln_1p()
}

struct Prepared {
    gram: DMatrix<f64>,
    zy: DVector<f64>,
    yy: f64,
    scale: Vec<f64>,
}

/// Centres y and every column, standardises continuous columns.
fn prepare(data: &MetaDataset, names: &[String], weighted: bool) -> Result<Prepared> {
    let n = data.len();
    let y = data.thetas();
    let w: Vec<f64> = if weighted {
        data.ses().iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; n]
    };
    let sw: f64 = w.iter().sum();
    let wmean = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = wmean(&y);
    let yc: Vec<f64> = y.iter().zip(&w).map(|(v, wi)| (v - ym) * wi.sqrt()).collect();

    let mut z = DMatrix::zeros(n, names.len());
    let mut scale = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let col = data.column(name)?;
        let m = wmean(&col);
        let s = match data.column_kind(name) {
            Some(ModeratorKind::Binary) => 1.0,
            _ => {
                let var = col.iter().zip(&w).map(|(v, wi)| wi * (v - m).powi(2)).sum::<f64>() / sw
                    * n as f64
                    / (n as f64 - 1.0);
                var.sqrt()
            }
        };
        for i in 0..n {
            z[(i, j)] = (col[i] - m) / s * w[i].sqrt();
        }
        scale.push(s);
    }
    let ycv = DVector::from_vec(yc);
    Ok(Prepared { gram: z.transpose() * &z, zy: z.transpose() * &ycv, yy: ycv.norm_squared(), scale })
}

#[derive(Clone)]
struct Acc {
    max: f64,
    sum: f64,
    incl: Vec<f64>,
    beta: Vec<f64>,
}

impl Acc {
    fn empty(k: usize, p: usize) -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0, incl: vec![0.0; k], beta: vec![0.0; p] }
    }

    /// Merges `other` into `self`, rescaling both to the larger maximum.
    fn merge(&mut self, other: &Acc) {
        let m = self.max.max(other.max);
        if m == f64::NEG_INFINITY {
            return;
        }
        let (a, b) = ((self.max - m).exp(), (other.max - m).exp());
        let a = if a.is_nan() { 0.0 } else { a };
        let b = if b.is_nan() { 0.0 } else { b };
        self.sum = self.sum * a + other.sum * b;
        for (x, y) in self.incl.iter_mut().zip(&other.incl) {
            *x = *x * a + y * b;
        }
        for (x, y) in self.beta.iter_mut().zip(&other.beta) {
            *x = *x * a + y * b;
        }
        self.max = m;
    }
}

pub fn bma_screen(
    data: &MetaDataset,
    candidates: &[String],
    forced: &[String],
    threshold: f64,
    config: &BmaConfig,
) -> Result<BmaScreenResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold {threshold} must lie in (0, 1)")));
    }
    if candidates.len() > MAX_CANDIDATES {
        return Err(Error::EnumerationBound { candidates: candidates.len(), max: MAX_CANDIDATES });
    }
    let mut all: Vec<String> = forced.to_vec();
    all.extend(candidates.iter().cloned());
    for (i, a) in all.iter().enumerate() {
        if all[..i].contains(a) {
            return Err(Error::Validation(format!("`{a}` is listed twice among forced and candidate regressors")));
        }
    }
    let n = data.len();
    if n < all.len() + 3 {
        return Err(Error::InsufficientData(format!(
            "{n} estimates are too few for {} regressors plus an intercept",
            all.len()
        )));
    }
    // collinearity on the raw design with intercept
    let mut x = DMatrix::from_element(n, all.len() + 1, 1.0);
    for (j, name) in all.iter().enumerate() {
        x.set_column(j + 1, &DVector::from_vec(data.column(name)?));
    }
    let mut labels = vec!["intercept".to_string()];
    labels.extend(all.iter().cloned());
    if let Some(bad) = collinear_columns(&x, &labels) {
        return Err(Error::RankDeficient(bad));
    }

    let prep = prepare(data, &all, config.precision_weighted)?;
    if !(prep.yy > 0.0) {
        return Err(Error::Validation("theta has no variation to explain".into()));
    }
    let nf = forced.len();
    let k = candidates.len();
    let p_all = all.len();
    let g = config.g.unwrap_or_else(|| (n as f64).max((p_all * p_all) as f64));
    let shrink = g / (1.0 + g);
    let log_prior = |size: usize| match config.model_prior {
        ModelPrior::Uniform => 0.0,
        ModelPrior::BetaBinomial { a, b } => ln_beta(a + size as f64, b + (k - size) as f64) - ln_beta(a, b),
    };

    let n_models = 1u64 << k;
    let n_chunks = n_models.div_ceil(CHUNK);
    let chunk_accs: Vec<Acc> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_models);
            let mut models = Vec::with_capacity((hi - lo) as usize);
            let mut idx = Vec::with_capacity(p_all);
            for mask in lo..hi {
                idx.clear();
                idx.extend(0..nf);
                idx.extend((0..k).filter(|j| mask >> j & 1 == 1).map(|j| nf + j));
                let (r2, b) = if idx.is_empty() {
                    (0.0, DVector::zeros(0))
                } else {
                    let a = DMatrix::from_fn(idx.len(), idx.len(), |i, j| prep.gram[(idx[i], idx[j])]);
                    let rhs = DVector::from_fn(idx.len(), |i, _| prep.zy[idx[i]]);
                    let b = a.cholesky().expect("full-rank design").solve(&rhs);
                    ((b.dot(&rhs) / prep.yy).clamp(0.0, 1.0), b)
                };
                let size = idx.len() - nf;
                let l = g_prior_log_bf(n, idx.len(), r2, g) + log_prior(size);
                models.push((mask, l, idx.clone(), b));
            }
            let mut acc = Acc::empty(k, p_all);
            acc.max = models.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
            for (mask, l, idx, b) in &models {
                let w = (l - acc.max).exp();
                acc.sum += w;
                for j in 0..k {
                    if mask >> j & 1 == 1 {
                        acc.incl[j] += w;
                    }
                }
                for (pos, &col) in idx.iter().enumerate() {
                    acc.beta[col] += w * shrink * b[pos];
                }
            }
            acc
        })
        .collect();
    let mut total = Acc::empty(k, p_all);
    for a in &chunk_accs {
        total.merge(a);
    }

    let mut pips = BTreeMap::new();
    for f in forced {
        pips.insert(f.clone(), 1.0);
    }
    for (j, c) in candidates.iter().enumerate() {
        pips.insert(c.clone(), (total.incl[j] / total.sum).clamp(0.0, 1.0));
    }
    let posterior_mean_beta = all
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), total.beta[j] / total.sum / prep.scale[j]))
        .collect();
    Ok(BmaScreenResult {
        candidates: candidates.to_vec(),
        forced: forced.to_vec(),
        included: included_set(forced, candidates, &pips, threshold),
        pips,
        posterior_mean_beta,
        n_models_evaluated: n_models,
        threshold,
        g,
    })
}

/// Default forced regressor: the standard error.
pub fn default_forced() -> Vec<String> {
    vec![COL_SE.to_string()]
}

/// CSV with one row per regressor: forced first, then candidates.
pub fn write_screen_csv<W: Write>(result: &BmaScreenResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["moderator", "pip", "included", "forced", "posterior_mean"])?;
    let yes_no = |b: bool| if b { "yes" } else { "no" };
    for name in result.forced.iter().chain(&result.candidates) {
        let forced = result.forced.contains(name);
        w.write_record([
            name.as_str(),
            &format!("{:?}", result.pips[name]),
            yes_no(result.included.contains(name)),
            yes_no(forced),
            &format!("{:?}", result.posterior_mean_beta[name]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EffectEstimate, ModeratorEntry, ModeratorSchema};

    fn data(n: usize) -> MetaDataset {
        let schema = ModeratorSchema::new(vec![
            ModeratorEntry::new("a", ModeratorKind::Continuous),
            ModeratorEntry::new("b", ModeratorKind::Binary),
        ])
        .unwrap();
        let est = (0..n)
            .map(|i| {
                let a = ((i * 37) % 11) as f64 / 11.0;
                let b = (i % 2) as f64;
                let t = 0.5 * a + 0.01 * (((i * 13) % 7) as f64 - 3.0);
                EffectEstimate::new(i.to_string(), i.to_string(), t, 0.1 + 0.01 * (i % 5) as f64)
                    .with_moderator("a", a)
                    .with_moderator("b", b)
            })
            .collect();
        MetaDataset::new(est, schema, "t").unwrap()
    }

    #[test]
    fn zero_candidates_is_one_model() {
        let r = bma_screen(&data(30), &[], &default_forced(), 0.1, &BmaConfig::default()).unwrap();
        assert_eq!(r.n_models_evaluated, 1);
        assert_eq!(r.pips["se"], 1.0);
        assert_eq!(r.included, vec!["se".to_string()]);
    }

    #[test]
    fn threshold_and_bound_validation() {
        let d = data(30);
        assert!(bma_screen(&d, &[], &[], 1.0, &BmaConfig::default()).is_err());
        let many: Vec<String> = (0..26).map(|i| format!("m{i}")).collect();
        assert!(matches!(
            bma_screen(&d, &many, &[], 0.1, &BmaConfig::default()),
            Err(Error::EnumerationBound { candidates: 26, max: 25 })
        ));
    }

    #[test]
    fn signal_moderator_dominates() {
        let r = bma_screen(&data(60), &["a".into(), "b".into()], &default_forced(), 0.1, &BmaConfig::default())
            .unwrap();
        assert!(r.pips["a"] > 0.99);
        assert!(r.pips["b"] < r.pips["a"]);
        assert!((r.posterior_mean_beta["a"] - 0.5).abs() < 0.05);
        assert_eq!(r.n_models_evaluated, 4);
    }

    #[test]
    fn with_threshold_never_grows_included_when_raised() {
        let r = bma_screen(&data(60), &["a".into(), "b".into()], &[], 0.1, &BmaConfig::default()).unwrap();
        let mut prev = r.with_threshold(0.01).included.len();
        for t in [0.05, 0.2, 0.5, 0.9, 0.99] {
            let n = r.with_threshold(t).included.len();
            assert!(n <= prev);
            prev = n;
        }
    }
}
