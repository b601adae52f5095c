//! Second-level inference over the population mean `mu_g` and standard
//! deviation `sigma_g` of each model parameter.
//!
//! With each cell summarized as `N(mu_k, sigma_k^2)`, integrating out the
//! individual parameters gives, per dimension,
//!
//! ```text
//! p(mu_g, sigma_g | data) ∝ prod_k N(mu_k; mu_g, sigma_k^2 + sigma_g^2) p(mu_g) p(sigma_g)
//! ```
//!
//! with a wide Gaussian prior on `mu_g` and a uniform prior on `sigma_g`.
//! Dimensions are independent, so each is sampled as its own 2-D chain.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cell::GaussianSummary;
use crate::error::{Error, Result};
use crate::mcmc::{self, Diagnostics, McmcConfig};
use crate::seed::{self, Key};
use crate::stats;

pub const PRIOR_MEAN_VARIANCE: f64 = 1e4;
/// The uniform `sigma_g` prior extends to this multiple of the spread of `mu_k`.
pub const SIGMA_UPPER_MULTIPLE: f64 = 10.0;
pub const SIGMA_UPPER_FLOOR: f64 = 1e-6;
/// Second-level sampling needs at least this many cells.
pub const MIN_POPULATION_CELLS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationPrior {
    /// Variance of the zero-mean Gaussian prior on each `mu_g`.
    pub mean_variance: f64,
    /// Upper bound of the uniform prior on each `sigma_g`.
    pub sigma_upper: Vec<f64>,
}

impl PopulationPrior {
    /// Data-scaled prior for a (sub-)sample of cell summaries.
    pub fn from_summaries(summaries: &[GaussianSummary]) -> Result<Self> {
        let dim = check_summaries(summaries)?;
        let sigma_upper = (0..dim)
            .map(|d| {
                let (mus, _) = dimension_columns(summaries, d);
                let sd = stats::std_dev(&mus);
                let u = SIGMA_UPPER_MULTIPLE * sd;
                if u.is_finite() && u > SIGMA_UPPER_FLOOR {
                    u
                } else {
                    SIGMA_UPPER_FLOOR
                }
            })
            .collect();
        Ok(PopulationPrior {
            mean_variance: PRIOR_MEAN_VARIANCE,
            sigma_upper,
        })
    }

    fn log_density_dim(&self, d: usize, mu_g: f64, sigma_g: f64) -> f64 {
        let upper = self.sigma_upper[d];
        if !(0.0..=upper).contains(&sigma_g) {
            return f64::NEG_INFINITY;
        }
        let v = self.mean_variance;
        -0.5 * (2.0 * PI * v).ln() - mu_g * mu_g / (2.0 * v) - upper.ln()
    }
}

fn check_summaries(summaries: &[GaussianSummary]) -> Result<usize> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InsufficientData("no cell summaries".into()))?;
    let dim = first.mu.len();
    if summaries.iter().any(|s| s.mu.len() != dim || s.var.len() != dim) {
        return Err(Error::InsufficientData(
            "cell summaries have inconsistent dimensions".into(),
        ));
    }
    Ok(dim)
}

/// Means and variances of dimension `d` in a canonical order, so that every
/// downstream sum is exactly invariant to the order of the cells.
fn dimension_columns(summaries: &[GaussianSummary], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, f64)> = summaries.iter().map(|s| (s.mu[d], s.var[d])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.into_iter().unzip()
}

/// Log likelihood of one dimension, `sum_k ln N(mu_k; mu_g, var_k + sigma_g^2)`.
#[inline]
fn log_likelihood_dim(mu_g: f64, sigma_g: f64, mus: &[f64], vars: &[f64]) -> f64 {
    let s2 = sigma_g * sigma_g;
    let mut acc = 0.0;
    for (m, v) in mus.iter().zip(vars) {
        let total = v + s2;
        let r = m - mu_g;
        acc -= 0.5 * (2.0 * PI * total).ln() + r * r / (2.0 * total);
    }
    acc
}

/// Unnormalized log posterior of `(mu_g, sigma_g)` given cell summaries.
pub fn log_population_posterior(
    mu_g: &[f64],
    sigma_g: &[f64],
    summaries: &[GaussianSummary],
    prior: &PopulationPrior,
) -> Result<f64> {
    let dim = check_summaries(summaries)?;
    if mu_g.len() != dim || sigma_g.len() != dim || prior.sigma_upper.len() != dim {
        return Err(Error::Domain(format!(
            "population parameters must have {dim} dimensions"
        )));
    }
    let mut total = 0.0;
    for d in 0..dim {
        let lp = prior.log_density_dim(d, mu_g[d], sigma_g[d]);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let (mus, vars) = dimension_columns(summaries, d);
        total += lp + log_likelihood_dim(mu_g[d], sigma_g[d], &mus, &vars);
    }
    Ok(total)
}

/// Posterior summaries of the population parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationPosterior {
    /// Posterior mean of `mu_g` per dimension.
    pub mu_g: Vec<f64>,
    /// Posterior mean of `sigma_g` per dimension.
    pub sigma_g: Vec<f64>,
    pub mu_g_sd: Vec<f64>,
    pub sigma_g_sd: Vec<f64>,
    /// Retained draws `[mu_g..., sigma_g...]`; empty when not kept.
    pub samples: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl PopulationPosterior {
    pub fn dim(&self) -> usize {
        self.mu_g.len()
    }

    /// Drop the draws, keeping the summaries.
    pub fn without_samples(mut self) -> Self {
        self.samples = Vec::new();
        self
    }
}

/// Random-walk Metropolis over `(mu_g, sigma_g)`, one chain per parameter
/// dimension, with reflection at `sigma_g = 0`.
pub fn sample_population_posterior(
    summaries: &[GaussianSummary],
    prior: &PopulationPrior,
    cfg: &McmcConfig,
) -> Result<PopulationPosterior> {
    let dim = check_summaries(summaries)?;
    if summaries.len() < MIN_POPULATION_CELLS {
        return Err(Error::InsufficientData(format!(
            "{} cells; population inference needs at least {MIN_POPULATION_CELLS}",
            summaries.len()
        )));
    }
    if prior.sigma_upper.len() != dim {
        return Err(Error::Domain("prior dimension mismatch".into()));
    }
    cfg.validate()?;

    let k = summaries.len() as f64;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(2 * dim);
    let mut post = PopulationPosterior {
        mu_g: Vec::with_capacity(dim),
        sigma_g: Vec::with_capacity(dim),
        mu_g_sd: Vec::with_capacity(dim),
        sigma_g_sd: Vec::with_capacity(dim),
        samples: Vec::new(),
        diagnostics: Diagnostics {
            acceptance_rate: 0.0,
            ess: vec![0.0; 2 * dim],
            converged: true,
        },
    };
    let mut sigma_columns = Vec::with_capacity(dim);
    for d in 0..dim {
        let (mus, vars) = dimension_columns(summaries, d);
        let upper = prior.sigma_upper[d];
        let spread = stats::std_dev(&mus);
        let mean_var = stats::mean(&vars);
        let start = [stats::mean(&mus), spread.clamp(1e-3 * upper, 0.5 * upper)];
        let scale_mu = ((spread * spread + mean_var) / k).sqrt().max(1e-3 * upper);
        let scale_sigma = (spread / (2.0 * k).sqrt()).max(1e-3 * upper);
        let mut rng = seed::stream(cfg.seed, &[Key::Tag("population"), Key::Int(d as u64)]);
        let chain = mcmc::random_walk_metropolis(
            |x| {
                let lp = prior.log_density_dim(d, x[0], x[1]);
                if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    lp + log_likelihood_dim(x[0], x[1], &mus, &vars)
                }
            },
            &start,
            &[1.68 * scale_mu, 1.68 * scale_sigma],
            &[false, true],
            cfg,
            &mut rng,
        )?;
        let mu_col = chain.column(0);
        let sigma_col = chain.column(1);
        post.mu_g.push(stats::mean(&mu_col));
        post.mu_g_sd.push(stats::std_dev(&mu_col));
        post.sigma_g.push(stats::mean(&sigma_col));
        post.sigma_g_sd.push(stats::std_dev(&sigma_col));
        post.diagnostics.acceptance_rate += chain.diagnostics.acceptance_rate / dim as f64;
        post.diagnostics.ess[d] = chain.diagnostics.ess[0];
        post.diagnostics.ess[dim + d] = chain.diagnostics.ess[1];
        post.diagnostics.converged &= chain.diagnostics.converged;
        columns.push(mu_col);
        sigma_columns.push(sigma_col);
    }
    columns.extend(sigma_columns);
    let n = columns[0].len();
    post.samples = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    if post.mu_g.iter().chain(&post.sigma_g).any(|v| !v.is_finite()) {
        return Err(Error::Sampler("non-finite population estimate".into()));
    }
    Ok(post)
}

/// Plain sub-sample distribution: mean and (K-1)-denominator standard
/// deviation of per-cell point estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsdSummary {
    pub m_g: Vec<f64>,
    pub s_g: Vec<f64>,
}

pub fn ssd(estimates: &[Vec<f64>]) -> Result<SsdSummary> {
    if estimates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "SSD needs at least 2 cells, got {}",
            estimates.len()
        )));
    }
    let dim = estimates[0].len();
    let mut m_g = Vec::with_capacity(dim);
    let mut s_g = Vec::with_capacity(dim);
    for d in 0..dim {
        let col: Vec<f64> = estimates.iter().map(|e| e[d]).collect();
        m_g.push(stats::mean(&col));
        s_g.push(stats::std_dev(&col));
    }
    Ok(SsdSummary { m_g, s_g })
}

/// Pearson correlation matrix of the per-cell means across cells. Rows and
/// columns of zero-variance dimensions are `None`.
pub fn parameter_correlations(summaries: &[GaussianSummary]) -> Result<Vec<Vec<Option<f64>>>> {
    let dim = check_summaries(summaries)?;
    if dim < 2 {
        return Err(Error::InsufficientData(
            "correlations need at least two parameters".into(),
        ));
    }
    if summaries.len() < 3 {
        return Err(Error::InsufficientData(
            "correlations need at least three cells".into(),
        ));
    }
    let cols: Vec<Vec<f64>> = (0..dim)
        .map(|d| summaries.iter().map(|s| s.mu[d]).collect())
        .collect();
    let degenerate: Vec<bool> = cols
        .iter()
        .map(|c| {
            let v = stats::variance(c);
            v.is_nan() || v <= 0.0
        })
        .collect();
    let mut out = vec![vec![None; dim]; dim];
    for i in 0..dim {
        for j in i..dim {
            if degenerate[i] || degenerate[j] {
                continue;
            }
            let r = if i == j { Some(1.0) } else { stats::pearson(&cols[i], &cols[j]) };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summ(mu: &[f64], var: &[f64]) -> Vec<GaussianSummary> {
        mu.iter()
            .zip(var)
            .map(|(m, v)| GaussianSummary { mu: vec![*m], var: vec![*v] })
            .collect()
    }

    #[test]
    fn single_cell_reduces_to_gaussian() {
        let s = summ(&[0.3], &[0.04]);
        let prior = PopulationPrior { mean_variance: 1e4, sigma_upper: vec![1.0] };
        let lp = log_population_posterior(&[0.1], &[0.0], &s, &prior).unwrap();
        let expected = -0.5 * (2.0 * PI * 0.04).ln() - 0.04 / (2.0 * 0.04) // (0.3-0.1)^2 = 0.04
            - 0.5 * (2.0 * PI * 1e4).ln()
            - 0.01 / 2e4;
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_cell_variance_maximized_at_mean() {
        let s = summ(&[1.0, 2.0, 4.5], &[0.0, 0.0, 0.0]);
        let prior = PopulationPrior { mean_variance: 1e12, sigma_upper: vec![10.0] };
        let f = |m: f64| log_population_posterior(&[m], &[0.7], &s, &prior).unwrap();
        let mean = 2.5;
        assert!(f(mean) > f(mean + 1e-4) && f(mean) > f(mean - 1e-4));
    }

    #[test]
    fn outside_prior_support_is_neg_infinity() {
        let s = summ(&[1.0, 2.0], &[0.1, 0.1]);
        let prior = PopulationPrior { mean_variance: 1e4, sigma_upper: vec![1.0] };
        assert_eq!(log_population_posterior(&[1.0], &[1.5], &s, &prior).unwrap(), f64::NEG_INFINITY);
        assert_eq!(log_population_posterior(&[1.0], &[-0.1], &s, &prior).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_upper_bound_scales_with_spread() {
        let s = summ(&[1.0, 2.0, 3.0], &[0.1; 3]);
        let p = PopulationPrior::from_summaries(&s).unwrap();
        assert!((p.sigma_upper[0] - 10.0).abs() < 1e-12);
        let s = summ(&[1.0, 1.0, 1.0], &[0.1; 3]);
        assert_eq!(PopulationPrior::from_summaries(&s).unwrap().sigma_upper[0], SIGMA_UPPER_FLOOR);
    }

    #[test]
    fn identical_cells_concentrate_sigma_near_zero() {
        let s = summ(&[-0.01; 3], &[2.5e-7; 3]);
        let prior = PopulationPrior::from_summaries(&s).unwrap();
        let cfg = McmcConfig { n_steps: 6000, burn_in: 2000, thin: 4, seed: 1, adapt_window: 50 };
        let post = sample_population_posterior(&s, &prior, &cfg).unwrap();
        assert!(post.sigma_g[0] < 2.5e-7f64.sqrt());
        assert!(post.samples.iter().all(|x| x[1] >= 0.0));
    }

    #[test]
    fn too_few_cells_for_sampling() {
        let s = summ(&[1.0, 2.0], &[0.1; 2]);
        let prior = PopulationPrior::from_summaries(&s).unwrap();
        assert!(sample_population_posterior(&s, &prior, &McmcConfig::default()).is_err());
    }

    #[test]
    fn ssd_examples() {
        let r = ssd(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(r.m_g, vec![2.0]);
        assert_eq!(r.s_g, vec![1.0]);
        let r = ssd(&[vec![4.0], vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(r.s_g, vec![0.0]);
        assert!(ssd(&[vec![1.0]]).is_err());
    }

    #[test]
    fn correlation_of_linearly_dependent_params() {
        let s: Vec<GaussianSummary> = [0.1, 0.5, -0.3, 0.9]
            .iter()
            .map(|x| GaussianSummary { mu: vec![*x, 3.0 * x, 7.0], var: vec![1.0; 3] })
            .collect();
        let c = parameter_correlations(&s).unwrap();
        assert!((c[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(c[0][0], Some(1.0));
        assert_eq!(c[2][2], None);
        assert_eq!(c[0][2], None);
        assert_eq!(c[1][0], c[0][1]);
    }

    #[test]
    fn correlations_need_two_params_and_three_cells() {
        assert!(parameter_correlations(&summ(&[1.0, 2.0, 3.0], &[1.0; 3])).is_err());
        let two: Vec<GaussianSummary> = (0..2)
            .map(|i| GaussianSummary { mu: vec![i as f64, 1.0], var: vec![1.0; 2] })
            .collect();
        assert!(parameter_correlations(&two).is_err());
    }
}
