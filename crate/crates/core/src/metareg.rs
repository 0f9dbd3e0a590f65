//! Three-level random-effects meta-regression by REML.
//!
//! `θ_qr = x_qr'β + u_r + w_qr + ε_qr` with study effects
//! `u_r ~ N(0, τ_b²)`, estimate effects `w_qr ~ N(0, τ_w²)` and known
//! sampling variances. Each study block `V_r = D_r + τ_b² 11'` with
//! `D_r = diag(τ_w² + σ²)` is inverted in closed form, so one likelihood
//! evaluation costs O(n k²).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::dataset::MetaDataset;
use crate::error::{Error, Result};
use crate::linalg::collinear_columns;
use crate::optim::{minimize, MinimizeOptions};
use crate::stats::two_sided_p;

pub const INTERCEPT: &str = "intercept";

/// Starting exponents `a` of the multi-start grid `(10^a, 10^a)`.
const START_EXPONENTS: [f64; 5] = [-6.0, -4.75, -3.5, -2.25, -1.0];
/// Interior optima must beat the best boundary fit by more than this to be
/// preferred.
const BOUNDARY_TOL: f64 = 1e-9;
const LOG_VAR_BOUNDS: (f64, f64) = (-40.0, 5.0);

/// Intercept plus moderator columns, aligned to the estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn build(data: &MetaDataset, moderators: &[String]) -> Result<Self> {
        let n = data.len();
        let mut columns = vec![INTERCEPT.to_string()];
        let mut values = DMatrix::from_element(n, moderators.len() + 1, 1.0);
        for (j, name) in moderators.iter().enumerate() {
            if columns.contains(name) {
                return Err(Error::RankDeficient(vec![name.clone(), name.clone()]));
            }
            let col = data.column(name)?;
            values.set_column(j + 1, &DVector::from_vec(col));
            columns.push(name.clone());
        }
        if let Some(bad) = collinear_columns(&values, &columns) {
            return Err(Error::RankDeficient(bad));
        }
        Ok(Self { columns, values })
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemlFit {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    /// Row-major `k × k` covariance `(X'V⁻¹X)⁻¹`.
    pub beta_cov: Vec<Vec<f64>>,
    pub tau2_between: f64,
    pub tau2_within: f64,
    pub log_restricted_likelihood: f64,
    pub n_obs: usize,
    pub n_studies: usize,
    /// Which candidate won: "interior", "tau2_between = 0", "tau2_within = 0"
    /// or "both zero".
    pub solution: String,
    pub trace: Vec<String>,
}

impl RemlFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|i| self.beta_cov[i][i].sqrt()).collect()
    }
}

/// Sufficient statistics of the GLS problem at fixed variance components.
struct Gls {
    xtvx: DMatrix<f64>,
    xtvy: DVector<f64>,
    ytvy: f64,
    log_det_v: f64,
}

/// The data regrouped by study.
struct Problem {
    blocks: Vec<Vec<usize>>,
    x: DMatrix<f64>,
    y: Vec<f64>,
    var: Vec<f64>,
    columns: Vec<String>,
}

impl Problem {
    fn new(data: &MetaDataset, moderators: &[String]) -> Result<Self> {
        let design = DesignMatrix::build(data, moderators)?;
        let index = data.study_index();
        let n_studies = index.iter().copied().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); n_studies];
        for (i, &s) in index.iter().enumerate() {
            blocks[s].push(i);
        }
        Ok(Self {
            blocks,
            x: design.values,
            y: data.thetas(),
            var: data.ses().iter().map(|s| s * s).collect(),
            columns: design.columns,
        })
    }

    fn k(&self) -> usize {
        self.x.ncols()
    }

    fn gls(&self, tb2: f64, tw2: f64) -> Gls {
        let k = self.k();
        let mut xtvx = DMatrix::zeros(k, k);
        let mut xtvy = DVector::zeros(k);
        let mut ytvy = 0.0;
        let mut log_det_v = 0.0;
        let mut ax = DVector::zeros(k);
        for block in &self.blocks {
            // V⁻¹ = D⁻¹ − c D⁻¹11'D⁻¹ with c = τ_b² / (1 + τ_b² Σ 1/d)
            ax.fill(0.0);
            let mut ay = 0.0;
            let mut s = 0.0;
            for &i in block {
                let d = tw2 + self.var[i];
                let a = 1.0 / d;
                log_det_v += d.ln();
                s += a;
                let xi = self.x.row(i);
                for p in 0..k {
                    let axp = a * xi[p];
                    ax[p] += axp;
                    xtvy[p] += axp * self.y[i];
                    for q in 0..=p {
                        xtvx[(p, q)] += axp * xi[q];
                    }
                }
                ay += a * self.y[i];
                ytvy += a * self.y[i] * self.y[i];
            }
            let c = tb2 / (1.0 + tb2 * s);
            log_det_v += (1.0 + tb2 * s).ln();
            for p in 0..k {
                xtvy[p] -= c * ax[p] * ay;
                for q in 0..=p {
                    xtvx[(p, q)] -= c * ax[p] * ax[q];
                }
            }
            ytvy -= c * ay * ay;
        }
        for p in 0..k {
            for q in 0..p {
                xtvx[(q, p)] = xtvx[(p, q)];
            }
        }
        Gls { xtvx, xtvy, ytvy, log_det_v }
    }

    /// Restricted log-likelihood with the GLS estimate of β and its
    /// covariance.
    fn evaluate(&self, tb2: f64, tw2: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let g = self.gls(tb2, tw2);
        let chol = g.xtvx.clone().cholesky()?;
        let beta = chol.solve(&g.xtvy);
        let log_det_xtvx = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = g.ytvy - beta.dot(&g.xtvy);
        let n = self.y.len() as f64;
        let ll = -0.5 * (g.log_det_v + log_det_xtvx + quad)
            - 0.5 * (n - self.k() as f64) * (2.0 * std::f64::consts::PI).ln();
        Some((ll, beta, chol.inverse()))
    }

    fn restricted_ll(&self, tb2: f64, tw2: f64) -> f64 {
        self.evaluate(tb2, tw2).map_or(f64::NEG_INFINITY, |r| r.0)
    }
}

fn check_sizes(data: &MetaDataset, k: usize) -> Result<()> {
    if data.len() <= k + 2 {
        return Err(Error::InsufficientData(format!(
            "{} estimates cannot support {k} coefficients and two variance components",
            data.len()
        )));
    }
    if data.n_studies() < 2 {
        return Err(Error::InsufficientData("at least 2 studies are required".into()));
    }
    Ok(())
}

fn build_fit(p: &Problem, data: &MetaDataset, tb2: f64, tw2: f64, solution: &str, trace: Vec<String>) -> Result<RemlFit> {
    let (ll, beta, cov) = p.evaluate(tb2, tw2).ok_or_else(|| Error::NonConvergence {
        message: format!("X'V^-1 X is singular at tau2 = ({tb2}, {tw2})"),
        trace: trace.clone(),
    })?;
    let k = p.k();
    let sym = |i: usize, j: usize| 0.5 * (cov[(i, j)] + cov[(j, i)]);
    Ok(RemlFit {
        columns: p.columns.clone(),
        beta: beta.iter().copied().collect(),
        beta_cov: (0..k).map(|i| (0..k).map(|j| sym(i, j)).collect()).collect(),
        tau2_between: tb2,
        tau2_within: tw2,
        log_restricted_likelihood: ll,
        n_obs: data.len(),
        n_studies: data.n_studies(),
        solution: solution.to_string(),
        trace,
    })
}

/// GLS fit at fixed variance components. With both at zero this is
/// inverse-variance weighted least squares.
pub fn gls_at(data: &MetaDataset, moderators: &[String], tau2_between: f64, tau2_within: f64) -> Result<RemlFit> {
    if !(tau2_between >= 0.0 && tau2_within >= 0.0) {
        return Err(Error::Domain("variance components must be non-negative".into()));
    }
    let p = Problem::new(data, moderators)?;
    build_fit(&p, data, tau2_between, tau2_within, "fixed", Vec::new())
}

/// Restricted log-likelihood at given variance components.
pub fn restricted_log_likelihood(
    data: &MetaDataset,
    moderators: &[String],
    tau2_between: f64,
    tau2_within: f64,
) -> Result<f64> {
    gls_at(data, moderators, tau2_between, tau2_within).map(|f| f.log_restricted_likelihood)
}

/// Best 1-D fit of one log-variance with the other component fixed.
fn optimise_one(f: impl Fn(f64) -> f64, opts: &MinimizeOptions, trace: &mut Vec<String>, label: &str) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for a in START_EXPONENTS {
        let m = minimize(|x: &[f64]| -f(x[0]), &[a * std::f64::consts::LN_10], opts);
        trace.push(format!("{label} start 1e{a}: log tau2 = {:.6}, ll = {:.10}", m.x[0], -m.f));
        if -m.f > best.1 {
            best = (m.x[0], -m.f);
        }
    }
    best
}

/// REML fit over `(τ_b², τ_w²) ≥ 0`: quasi-Newton on log variances from
/// five starts, compared against the three boundary solutions.
pub fn reml_fit(data: &MetaDataset, moderators: &[String]) -> Result<RemlFit> {
    let p = Problem::new(data, moderators)?;
    check_sizes(data, p.k())?;
    let opts = MinimizeOptions {
        lower: LOG_VAR_BOUNDS.0,
        upper: LOG_VAR_BOUNDS.1,
        max_iter: 500,
        ..Default::default()
    };
    let mut trace = Vec::new();
    let ll = |lb: f64, lw: f64| p.restricted_ll(lb.exp(), lw.exp());

    let mut interior = (0.0, 0.0, f64::NEG_INFINITY);
    for a in START_EXPONENTS {
        let x0 = a * std::f64::consts::LN_10;
        let m = minimize(|x: &[f64]| -ll(x[0], x[1]), &[x0, x0], &opts);
        trace.push(format!(
            "start (1e{a}, 1e{a}): log tau2 = ({:.6}, {:.6}), ll = {:.10}, converged = {}",
            m.x[0], m.x[1], -m.f, m.converged
        ));
        if -m.f > interior.2 {
            interior = (m.x[0].exp(), m.x[1].exp(), -m.f);
        }
    }

    let zero = p.restricted_ll(0.0, 0.0);
    let (lw, ll_w) = optimise_one(|lw| p.restricted_ll(0.0, lw.exp()), &opts, &mut trace, "tau2_between = 0");
    let (lb, ll_b) = optimise_one(|lb| p.restricted_ll(lb.exp(), 0.0), &opts, &mut trace, "tau2_within = 0");
    let candidates = [
        (0.0, 0.0, zero, "both zero"),
        (0.0, lw.exp(), ll_w, "tau2_between = 0"),
        (lb.exp(), 0.0, ll_b, "tau2_within = 0"),
    ];
    // among near-ties keep the candidate with more components at zero
    let top = candidates.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let zeros = |c: &(f64, f64, f64, &str)| usize::from(c.0 == 0.0) + usize::from(c.1 == 0.0);
    let best = *candidates
        .iter()
        .filter(|c| c.2 >= top - BOUNDARY_TOL)
        .min_by_key(|c| std::cmp::Reverse(zeros(c)))
        .expect("at least one candidate");
    let (tb2, tw2, solution) = if interior.2 > best.2 + BOUNDARY_TOL {
        (interior.0, interior.1, "interior")
    } else {
        (best.0, best.1, best.3)
    };
    if !(interior.2.is_finite() || best.2.is_finite()) {
        return Err(Error::NonConvergence {
            message: "restricted likelihood is not finite at any start".into(),
            trace,
        });
    }
    trace.push(format!("selected {solution}: tau2 = ({tb2:e}, {tw2:e})"));
    build_fit(&p, data, tb2, tw2, solution, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub stars: String,
}

/// `***` below 0.01, `**` below 0.05, `*` below 0.10.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

pub fn coefficient_table(fit: &RemlFit) -> Vec<CoefficientRow> {
    fit.columns
        .iter()
        .zip(fit.beta.iter().zip(fit.se()))
        .map(|(name, (&estimate, se))| {
            let z = estimate / se;
            let p = two_sided_p(z);
            CoefficientRow { name: name.clone(), estimate, se, z, p, stars: stars(p).to_string() }
        })
        .collect()
}

pub fn write_coefficients_csv<W: Write>(rows: &[CoefficientRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "estimate", "se", "z", "p", "stars"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:?}", r.estimate),
            format!("{:?}", r.se),
            format!("{:?}", r.z),
            format!("{:?}", r.p),
            r.stars.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dense `V` for one variance-component pair; used by tests and small
/// problems only.
pub fn dense_covariance(data: &MetaDataset, tau2_between: f64, tau2_within: f64) -> DMatrix<f64> {
    let idx = data.study_index();
    let ses = data.ses();
    DMatrix::from_fn(data.len(), data.len(), |i, j| {
        let mut v = if idx[i] == idx[j] { tau2_between } else { 0.0 };
        if i == j {
            v += tau2_within + ses[i] * ses[i];
        }
        v
    })
}
