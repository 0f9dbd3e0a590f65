use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step function of relative publication probability over two-sided
/// p-value intervals `[0, c1], (c1, c2], …, (c_{J-1}, 1]`, normalised so
/// the most significant interval has weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    cutpoints: Vec<f64>,
    omegas: Vec<f64>,
}

impl WeightFunction {
    pub fn new(cutpoints: Vec<f64>, omegas: Vec<f64>) -> Result<Self> {
        if cutpoints.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::Domain(format!("cutpoints {cutpoints:?} must lie in (0, 1)")));
        }
        if cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "cutpoints {cutpoints:?} must be strictly ascending"
            )));
        }
        if omegas.len() != cutpoints.len() + 1 {
            return Err(Error::Domain(format!(
                "{} cutpoints need {} weights, got {}",
                cutpoints.len(),
                cutpoints.len() + 1,
                omegas.len()
            )));
        }
        if omegas[0] != 1.0 {
            return Err(Error::Domain(format!(
                "the most significant interval must have weight 1, got {}",
                omegas[0]
            )));
        }
        if omegas.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Domain(format!("weights {omegas:?} must lie in (0, 1]")));
        }
        Ok(Self { cutpoints, omegas })
    }

    /// All weights equal to one: no selection.
    pub fn uniform(cutpoints: Vec<f64>) -> Result<Self> {
        let n = cutpoints.len() + 1;
        Self::new(cutpoints, vec![1.0; n])
    }

    pub fn cutpoints(&self) -> &[f64] {
        &self.cutpoints
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn n_intervals(&self) -> usize {
        self.omegas.len()
    }

    /// Interval containing `p`; a p-value equal to a cutpoint belongs to
    /// the more significant side.
    pub fn interval_of(&self, p: f64) -> usize {
        interval_index(&self.cutpoints, p)
    }

    pub fn omega_at(&self, p: f64) -> f64 {
        self.omegas[self.interval_of(p)]
    }
}

pub(crate) fn interval_index(cutpoints: &[f64], p: f64) -> usize {
    cutpoints.iter().take_while(|&&c| p > c).count()
}
