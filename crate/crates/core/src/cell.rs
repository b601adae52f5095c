//! First-level inference: per-cell parameter posteriors with the noise
//! scale integrated out, summarized as independent Gaussians.
//!
//! With additive Gaussian noise of unknown variance and a `1/sigma^2`
//! prior on that variance, the marginal likelihood of a parameter vector
//! depends on the data only through the residual sum of squares:
//! `p(B | theta) ∝ SSR(theta)^(-n/2)`.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CapacityTrace, Dataset};
use crate::error::{Error, Result};
use crate::mcmc::{self, Diagnostics, McmcConfig};
use crate::models::{self, ModelSpec};
use crate::seed::{self, Key};
use crate::stats;

/// Residual sums of squares are floored here so exact fits stay finite.
pub const SSR_FLOOR: f64 = 1e-300;
/// Minimum retained draws for a Gaussian summary.
pub const MIN_SUMMARY_DRAWS: usize = 100;
/// Summary variances are floored here.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Log marginal likelihood of `theta`, up to a theta-independent constant:
/// `-(n/2) ln SSR(theta)`. Returns `-inf` outside the parameter domain.
pub fn log_marginal_likelihood(spec: ModelSpec, theta: &[f64], trace: &CapacityTrace) -> Result<f64> {
    if trace.normalization != Some(spec.required_normalization()) {
        return Err(Error::NormalizationMismatch {
            expected: spec.required_normalization(),
            found: trace.normalization,
        });
    }
    if trace.n_points() < spec.min_points() {
        return Err(Error::InsufficientData(format!(
            "cell `{}` has {} points; {spec} needs {}",
            trace.cell_id,
            trace.n_points(),
            spec.min_points()
        )));
    }
    Ok(log_marginal_unchecked(spec, theta, &trace.times, &trace.capacities_pct))
}

#[inline]
fn log_marginal_unchecked(spec: ModelSpec, theta: &[f64], times: &[f64], values: &[f64]) -> f64 {
    let ssr = spec.ssr(theta, times, values);
    if !ssr.is_finite() {
        return f64::NEG_INFINITY;
    }
    -0.5 * times.len() as f64 * ssr.max(SSR_FLOOR).ln()
}

/// Gaussian approximation of one cell's posterior plus the draws behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPosterior {
    pub cell_id: String,
    pub model: ModelSpec,
    /// Posterior mean per parameter.
    pub mu: Vec<f64>,
    /// Posterior marginal variance per parameter.
    pub var: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    /// Whether the least-squares start point converged.
    pub start_converged: bool,
}

impl CellPosterior {
    pub fn summary(&self) -> GaussianSummary {
        GaussianSummary {
            mu: self.mu.clone(),
            var: self.var.clone(),
        }
    }
}

/// Per-dimension mean and variance of a cell's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Random-walk Metropolis over one cell's parameters, started from the
/// least-squares fit. Deterministic in `(cfg.seed, cell_id, data)`.
pub fn sample_cell_posterior(spec: ModelSpec, trace: &CapacityTrace, cfg: &McmcConfig) -> Result<CellPosterior> {
    cfg.validate()?;
    let fit = models::least_squares_fit(spec, trace)?;
    let start = fit.params.to_vec();
    let dim = spec.param_count();
    let optimal = 2.38 / (dim as f64).sqrt();
    let scales: Vec<f64> = match &fit.approx_std {
        Some(sd) => sd.iter().map(|s| optimal * s).collect(),
        None => start.iter().map(|v| 1e-3 * v.abs().max(1e-3)).collect(),
    };
    let mut rng = seed::stream(cfg.seed, &[Key::Tag("cell"), Key::Tag(&trace.cell_id)]);
    let (times, values) = (&trace.times, &trace.capacities_pct);
    let chain = mcmc::random_walk_metropolis(
        |theta| log_marginal_unchecked(spec, theta, times, values),
        &start,
        &scales,
        &vec![false; dim],
        cfg,
        &mut rng,
    )?;
    let GaussianSummary { mu, var } = summarize_draws(&chain.draws, MIN_SUMMARY_DRAWS)?;
    Ok(CellPosterior {
        cell_id: trace.cell_id.clone(),
        model: spec,
        mu,
        var,
        samples: chain.draws,
        diagnostics: chain.diagnostics,
        start_converged: fit.converged,
    })
}

/// Sample mean and unbiased variance of a posterior's retained draws.
pub fn summarize_gaussian(posterior: &CellPosterior) -> Result<GaussianSummary> {
    summarize_draws(&posterior.samples, MIN_SUMMARY_DRAWS)
}

/// Elementwise mean and unbiased variance of `draws`, variances floored at
/// [`VARIANCE_FLOOR`].
pub fn summarize_draws(draws: &[Vec<f64>], min_draws: usize) -> Result<GaussianSummary> {
    if draws.len() < min_draws.max(2) {
        return Err(Error::InsufficientData(format!(
            "{} draws; at least {} required for a Gaussian summary",
            draws.len(),
            min_draws.max(2)
        )));
    }
    let dim = draws[0].len();
    let mut mu = Vec::with_capacity(dim);
    let mut var = Vec::with_capacity(dim);
    for d in 0..dim {
        let col: Vec<f64> = draws.iter().map(|x| x[d]).collect();
        mu.push(stats::mean(&col));
        let v = stats::variance(&col);
        if v.is_nan() || v < VARIANCE_FLOOR {
            warn!("posterior variance {v} in dimension {d} floored at {VARIANCE_FLOOR}");
            var.push(VARIANCE_FLOOR);
        } else {
            var.push(v);
        }
    }
    Ok(GaussianSummary { mu, var })
}

/// On-disk cache of first-level posteriors, one JSON file per key.
#[derive(Debug, Clone)]
pub struct PosteriorCache {
    dir: PathBuf,
}

impl PosteriorCache {
    /// Environment variable naming the default cache directory.
    pub const ENV_VAR: &'static str = "CELLVAR_CACHE_DIR";

    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(PosteriorCache { dir })
    }

    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(Self::ENV_VAR) {
            Some(d) if !d.is_empty() => Self::new(PathBuf::from(d)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key(dataset_hash: &str, spec: ModelSpec, cfg: &McmcConfig, cell_id: &str) -> String {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        for part in [dataset_hash, spec.name(), cell_id] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        for v in [cfg.n_steps, cfg.burn_in, cfg.thin, cfg.adapt_window] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(cfg.seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, dataset_hash: &str, spec: ModelSpec, cfg: &McmcConfig, cell_id: &str) -> Option<CellPosterior> {
        let path = self.path(&Self::key(dataset_hash, spec, cfg, cell_id));
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, dataset_hash: &str, spec: ModelSpec, cfg: &McmcConfig, posterior: &CellPosterior) -> Result<()> {
        let path = self.path(&Self::key(dataset_hash, spec, cfg, &posterior.cell_id));
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let text = serde_json::to_string(posterior)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// First-level posteriors for every cell in `dataset`, in dataset order.
/// Cells are sampled in parallel; each owns its seed-derived stream.
pub fn fit_cells(
    dataset: &Dataset,
    spec: ModelSpec,
    cfg: &McmcConfig,
    cache: Option<&PosteriorCache>,
) -> Result<Vec<CellPosterior>> {
    let expected = spec.required_normalization();
    if dataset.normalization() != Some(expected) {
        return Err(Error::NormalizationMismatch {
            expected,
            found: dataset.normalization(),
        });
    }
    let hash = cache.map(|_| dataset.content_hash());
    dataset
        .traces
        .par_iter()
        .map(|trace| {
            if let (Some(cache), Some(hash)) = (cache, &hash) {
                if let Some(p) = cache.get(hash, spec, cfg, &trace.cell_id) {
                    return Ok(p);
                }
                let p = sample_cell_posterior(spec, trace, cfg)?;
                cache.put(hash, spec, cfg, &p)?;
                Ok(p)
            } else {
                sample_cell_posterior(spec, trace, cfg)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Normalization;

    fn linear_trace(n: usize, noise: &[f64]) -> CapacityTrace {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 20.0).collect();
        let vals = times
            .iter()
            .enumerate()
            .map(|(i, t)| 100.0 - 0.01 * t + noise[i % noise.len()])
            .collect();
        CapacityTrace::from_percent("x", times, vals, Normalization::InitialCapacity).unwrap()
    }

    #[test]
    fn likelihood_ratio_of_scaled_ssr() {
        // residuals scale by 2 => SSR scales by 4
        let tr = linear_trace(10, &[0.0]);
        let t = &tr.times;
        let y1: Vec<f64> = t.iter().enumerate().map(|(i, t)| 100.0 - 0.01 * t + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let y2: Vec<f64> = t.iter().enumerate().map(|(i, t)| 100.0 - 0.01 * t + if i % 2 == 0 { 0.2 } else { -0.2 }).collect();
        let a = CapacityTrace::from_percent("a", t.clone(), y1, Normalization::InitialCapacity).unwrap();
        let b = CapacityTrace::from_percent("b", t.clone(), y2, Normalization::InitialCapacity).unwrap();
        let la = log_marginal_likelihood(ModelSpec::Linear1, &[-0.01], &a).unwrap();
        let lb = log_marginal_likelihood(ModelSpec::Linear1, &[-0.01], &b).unwrap();
        assert!((lb - la + 5.0 * 4f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn exact_fit_hits_floor() {
        let tr = linear_trace(10, &[0.0]);
        let l = log_marginal_likelihood(ModelSpec::Linear1, &[-0.01], &tr).unwrap();
        assert!(l.is_finite() && l > 1000.0);
    }

    #[test]
    fn invalid_theta_is_neg_infinity() {
        let tr = CapacityTrace::from_percent(
            "x",
            (0..6).map(f64::from).collect(),
            vec![100.0; 6],
            Normalization::InitialCapacity,
        )
        .unwrap();
        let l = log_marginal_likelihood(ModelSpec::LinExp, &[0.0, 10.0, -1.0], &tr).unwrap();
        assert_eq!(l, f64::NEG_INFINITY);
    }

    #[test]
    fn summary_arithmetic_and_floor() {
        let draws = vec![vec![1.0], vec![2.0], vec![3.0]];
        let s = summarize_draws(&draws, 1).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert_eq!(s.var, vec![1.0]);

        let flat = vec![vec![4.0]; 150];
        let s = summarize_draws(&flat, MIN_SUMMARY_DRAWS).unwrap();
        assert_eq!(s.mu, vec![4.0]);
        assert_eq!(s.var, vec![VARIANCE_FLOOR]);

        assert!(summarize_draws(&flat[..50], MIN_SUMMARY_DRAWS).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let noise = [0.1, -0.05, 0.02, -0.12, 0.07];
        let tr = linear_trace(40, &noise);
        let cfg = McmcConfig { n_steps: 4000, burn_in: 1000, thin: 2, seed: 3, adapt_window: 50 };
        let a = sample_cell_posterior(ModelSpec::Linear1, &tr, &cfg).unwrap();
        let b = sample_cell_posterior(ModelSpec::Linear1, &tr, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_cell_posterior(ModelSpec::Linear1, &tr, &cfg.with_seed(4)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = PosteriorCache::new(dir.path()).unwrap();
        let tr = linear_trace(30, &[0.1, -0.2, 0.05]);
        let cfg = McmcConfig { n_steps: 3000, burn_in: 500, thin: 2, seed: 1, adapt_window: 50 };
        let p = sample_cell_posterior(ModelSpec::Linear1, &tr, &cfg).unwrap();
        cache.put("h", ModelSpec::Linear1, &cfg, &p).unwrap();
        assert_eq!(cache.get("h", ModelSpec::Linear1, &cfg, "x"), Some(p));
        assert_eq!(cache.get("h", ModelSpec::Linear1, &cfg.with_seed(2), "x"), None);
    }
}
