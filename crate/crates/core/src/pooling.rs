//! Unrestricted weighted least squares pooling with study-clustered
//! inference, plus funnel-plot data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::MetaDataset;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub mu_hat: f64,
    /// Conventional WLS standard error `s / sqrt(Σw)` with `s²` the
    /// weighted residual mean square on `n - 1` degrees of freedom.
    pub se_naive: f64,
    /// Study-clustered sandwich standard error with a `G / (G - 1)`
    /// small-sample factor.
    pub se_cluster: f64,
    /// Two-sided p-value of `mu_hat / se_cluster` against `t(G - 1)`.
    pub p_value_cluster: f64,
    pub weights: Vec<f64>,
    pub n_estimates: usize,
    pub n_studies: usize,
}

/// Precision-weighted mean of theta (weights `1/se²`) from a weighted
/// regression on a constant.
pub fn uwls(data: &MetaDataset) -> Result<PooledEstimate> {
    data.require_poolable()?;
    let n_studies = data.n_studies();
    if n_studies < 2 {
        return Err(Error::ClusterInference(format!(
            "need at least 2 studies for clustered standard errors, got {n_studies}"
        )));
    }
    let thetas = data.thetas();
    let weights: Vec<f64> = data.ses().iter().map(|s| 1.0 / (s * s)).collect();
    let sum_w: f64 = weights.iter().sum();
    let mu_hat = weights.iter().zip(&thetas).map(|(w, t)| w * t).sum::<f64>() / sum_w;

    let n = thetas.len();
    let resid: Vec<f64> = thetas.iter().map(|t| t - mu_hat).collect();
    let rss: f64 = weights.iter().zip(&resid).map(|(w, e)| w * e * e).sum();
    let se_naive = (rss / (n - 1) as f64 / sum_w).sqrt();

    // Sandwich with a scalar bread: (Σw)^-1 [Σ_g (Σ_{q∈g} w_q e_q)²] (Σw)^-1.
    let mut scores = vec![0.0; n_studies];
    for ((g, w), e) in data.study_index().into_iter().zip(&weights).zip(&resid) {
        scores[g] += w * e;
    }
    let meat: f64 = scores.iter().map(|s| s * s).sum();
    let g = n_studies as f64;
    let se_cluster = (g / (g - 1.0) * meat).sqrt() / sum_w;

    let p_value_cluster = if se_cluster > 0.0 {
        stats::two_sided_p_t(mu_hat / se_cluster, g - 1.0)
    } else if mu_hat == 0.0 {
        1.0
    } else {
        0.0
    };

    Ok(PooledEstimate {
        mu_hat,
        se_naive,
        se_cluster,
        p_value_cluster,
        weights,
        n_estimates: n,
        n_studies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelKind {
    Point,
    BandLow,
    BandHigh,
}

impl FunnelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FunnelKind::Point => "point",
            FunnelKind::BandLow => "band_low",
            FunnelKind::BandHigh => "band_high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub kind: FunnelKind,
    pub theta: f64,
    pub se: f64,
}

/// Number of se grid points for the pseudo-confidence band.
pub const FUNNEL_GRID_POINTS: usize = 101;

const Z_95: f64 = 1.96;

/// Scatter points followed by the `mu ± 1.96 se` band over a grid from
/// se = 0 to the largest observed se.
pub fn funnel_data(data: &MetaDataset, mu: f64) -> Result<Vec<FunnelRow>> {
    if !mu.is_finite() {
        return Err(Error::Validation(format!("funnel centre {mu} is not finite")));
    }
    let mut rows: Vec<FunnelRow> = data
        .estimates()
        .iter()
        .map(|e| FunnelRow {
            kind: FunnelKind::Point,
            theta: e.theta,
            se: e.se,
        })
        .collect();
    let max_se = data.ses().into_iter().fold(0.0, f64::max);
    let steps = (FUNNEL_GRID_POINTS - 1) as f64;
    for kind in [FunnelKind::BandLow, FunnelKind::BandHigh] {
        let sign = if kind == FunnelKind::BandLow { -1.0 } else { 1.0 };
        for i in 0..FUNNEL_GRID_POINTS {
            let se = max_se * i as f64 / steps;
            rows.push(FunnelRow {
                kind,
                theta: mu + sign * Z_95 * se,
                se,
            });
        }
    }
    Ok(rows)
}

pub fn write_funnel_csv<W: Write>(rows: &[FunnelRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "theta", "se"])?;
    for r in rows {
        w.write_record([r.kind.as_str(), &format!("{:?}", r.theta), &format!("{:?}", r.se)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EffectEstimate, ModeratorSchema};

    fn data(rows: &[(&str, f64, f64)]) -> MetaDataset {
        let est = rows
            .iter()
            .enumerate()
            .map(|(i, &(s, t, se))| EffectEstimate::new(i.to_string(), s, t, se))
            .collect();
        MetaDataset::new(est, ModeratorSchema::empty(), "t").unwrap()
    }

    #[test]
    fn constant_effects() {
        let p = uwls(&data(&[("a", -0.02, 0.1), ("b", -0.02, 0.1)])).unwrap();
        assert!((p.mu_hat + 0.02).abs() < 1e-15);
        assert_eq!(p.se_cluster, 0.0);
        assert_eq!(p.p_value_cluster, 0.0);
    }

    #[test]
    fn three_unit_variance_studies() {
        let p = uwls(&data(&[("a", 1.0, 1.0), ("b", 2.0, 1.0), ("c", 3.0, 1.0)])).unwrap();
        assert!((p.mu_hat - 2.0).abs() < 1e-15);
        assert!((p.se_naive.powi(2) - 1.0 / 3.0).abs() < 1e-15);
        // scores ±1, 0 → meat 2, factor 3/2, bread 1/9
        assert!((p.se_cluster.powi(2) - 3.0 / 9.0).abs() < 1e-15);
        assert_eq!(p.weights, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn unequal_weights() {
        let p = uwls(&data(&[("a", 1.0, 1.0), ("b", 3.0, 1.0 / 3f64.sqrt())])).unwrap();
        assert!((p.mu_hat - 2.5).abs() < 1e-14);
    }

    #[test]
    fn single_study_is_rejected() {
        let r = uwls(&data(&[("a", 1.0, 1.0), ("a", 2.0, 1.0)]));
        assert!(matches!(r, Err(Error::ClusterInference(_))));
    }

    #[test]
    fn funnel_band_geometry() {
        let d = data(&[("a", 0.1, 0.5), ("b", -0.3, 1.0)]);
        let rows = funnel_data(&d, 0.0).unwrap();
        let points = rows.iter().filter(|r| r.kind == FunnelKind::Point).count();
        assert_eq!(points, 2);
        let at_one: Vec<_> = rows
            .iter()
            .filter(|r| r.kind != FunnelKind::Point && r.se == 1.0)
            .collect();
        assert_eq!(at_one.len(), 2);
        assert!(at_one.iter().any(|r| r.theta == -1.96));
        assert!(at_one.iter().any(|r| r.theta == 1.96));
        assert!(FUNNEL_GRID_POINTS >= 50);
    }

    #[test]
    fn funnel_apex() {
        let d = data(&[("a", 0.1, 0.5), ("b", -0.3, 1.0)]);
        let rows = funnel_data(&d, -0.019).unwrap();
        for r in rows.iter().filter(|r| r.kind != FunnelKind::Point && r.se == 0.0) {
            assert_eq!(r.theta, -0.019);
        }
        assert!(funnel_data(&d, f64::NAN).is_err());
    }
}
