//! Sub-sampling study: how the dispersion of the population spread
//! estimate shrinks with the number of cells, and how many cells are needed
//! before it settles onto a log-linear decay.
//!
//! For every sub-sample size `N` and repeat `r`, `N` cells are drawn with
//! replacement, the second-level posterior is sampled from their cached
//! first-level summaries, and the SSD baseline is computed alongside. The
//! standard deviation of the `sigma_g` estimates across repeats gives one
//! point of the study curve per `N`.
//!
//! Each repeat owns a stream of cell draws; the sub-sample of size `N` is
//! the first `N` draws of that stream. Sampler seeds are derived from
//! `(master_seed, N, r)`. Jobs run in parallel and are reduced in key
//! order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{self, CellPosterior, GaussianSummary, PosteriorCache};
use crate::dataset::{Dataset, MIN_STUDY_CELLS};
use crate::error::{Error, Result};
use crate::mcmc::McmcConfig;
use crate::models::ModelSpec;
use crate::population::{self, PopulationPosterior, PopulationPrior, SsdSummary};
use crate::seed::{self, Key};
use crate::stats;

pub const SCHEMA_VERSION: u32 = 1;
/// Smallest allowed sub-sample, and the gap kept below the full sample.
pub const SUBSAMPLE_MARGIN: usize = 3;
/// A study aborts if more than this fraction of repeats fail at any size.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.05;
/// Fewest points the stability line may be fitted to.
pub const MIN_TAIL_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_repeats: usize,
    pub subsample_min: usize,
    /// Defaults to `K - 3`.
    pub subsample_max: Option<usize>,
    pub alpha: f64,
    pub master_seed: u64,
    pub tail_fraction: f64,
    /// Second-level chain settings; the seed is replaced per repeat.
    pub population_mcmc: McmcConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_repeats: 200,
            subsample_min: SUBSAMPLE_MARGIN,
            subsample_max: None,
            alpha: 0.10,
            master_seed: 0,
            tail_fraction: 0.5,
            population_mcmc: McmcConfig {
                n_steps: 6_000,
                burn_in: 2_000,
                thin: 4,
                seed: 0,
                adapt_window: 50,
            },
        }
    }
}

impl StudyConfig {
    /// Validate against a dataset of `k` cells and return `(min, max)`.
    pub fn resolve_range(&self, k: usize) -> Result<(usize, usize)> {
        if k < MIN_STUDY_CELLS {
            return Err(Error::TooFewCells {
                found: k,
                required: MIN_STUDY_CELLS,
            });
        }
        let upper = k - SUBSAMPLE_MARGIN;
        let max = self.subsample_max.unwrap_or(upper);
        let min = self.subsample_min;
        if !(SUBSAMPLE_MARGIN <= min && min <= max && max <= upper) {
            return Err(Error::Config(format!(
                "sub-sample range [{min}, {max}] must satisfy 3 <= min <= max <= K - 3 = {upper}"
            )));
        }
        self.check_thresholds()?;
        Ok((min, max))
    }

    fn check_thresholds(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "tail fraction {} must lie in (0, 1]",
                self.tail_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::Config("n_repeats must be positive".into()));
        }
        self.population_mcmc.validate()
    }
}

/// Draw `n` cell ids uniformly with replacement.
pub fn draw_subsample<R: Rng + ?Sized>(cell_ids: &[String], n: usize, rng: &mut R) -> Result<Vec<String>> {
    if n < SUBSAMPLE_MARGIN {
        return Err(Error::Config(format!("sub-sample size {n} is below 3")));
    }
    if cell_ids.is_empty() {
        return Err(Error::InsufficientData("no cells to draw from".into()));
    }
    Ok((0..n)
        .map(|_| cell_ids[rng.random_range(0..cell_ids.len())].clone())
        .collect())
}

/// Index stream of repeat `r`: its first `N` entries form the size-`N` sub-sample.
fn repeat_draws(master: u64, repeat: usize, k: usize, len: usize) -> Vec<usize> {
    let mut rng = seed::stream(master, &[Key::Tag("subsample"), Key::Int(repeat as u64)]);
    (0..len).map(|_| rng.random_range(0..k)).collect()
}

fn mlb_seed(master: u64, n: usize, repeat: usize) -> u64 {
    seed::derive_u64(master, &[Key::Tag("mlb"), Key::Int(n as u64), Key::Int(repeat as u64)])
}

/// Second-level MLB fit and SSD baseline for one sub-sample.
#[derive(Debug, Clone)]
struct RepeatFit {
    mlb: PopulationPosterior,
    ssd: SsdSummary,
}

fn fit_subsample(summaries: &[GaussianSummary], pop_cfg: &McmcConfig) -> Result<RepeatFit> {
    let prior = PopulationPrior::from_summaries(summaries)?;
    let mlb = population::sample_population_posterior(summaries, &prior, pop_cfg)?.without_samples();
    let mus: Vec<Vec<f64>> = summaries.iter().map(|s| s.mu.clone()).collect();
    let ssd = population::ssd(&mus)?;
    Ok(RepeatFit { mlb, ssd })
}

/// One sub-sample size's aggregate for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub n_valid: usize,
    pub n_not_converged: usize,
    pub mlb_std_sigma_g: f64,
    pub mlb_std_mu_g: f64,
    pub mlb_mean_sigma_g: f64,
    pub mlb_mean_mu_g: f64,
    pub ssd_std_s_g: f64,
    pub ssd_std_m_g: f64,
    pub ssd_mean_s_g: f64,
    pub ssd_mean_m_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCurve {
    pub param: String,
    pub points: Vec<CurvePoint>,
}

impl ParamCurve {
    pub fn sizes(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.n).collect()
    }

    pub fn mlb_std(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mlb_std_sigma_g).collect()
    }

    pub fn ssd_std(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.ssd_std_s_g).collect()
    }

    pub fn at(&self, n: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.n == n)
    }
}

/// Log-linear fit `ln y = a N + b` of the tail of a dispersion curve and
/// the sub-sample size at which the curve settles within the band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityFit {
    pub a: f64,
    pub b: f64,
    pub fit_region: Vec<usize>,
    /// `None` when the curve never settles (not reached).
    pub required_n: Option<usize>,
    pub converged: bool,
}

impl StabilityFit {
    pub fn line(&self, n: usize) -> f64 {
        (self.a * n as f64 + self.b).exp()
    }
}

/// Fit the stability line over the largest `tail_fraction` of sizes and
/// find the smallest `N` from which every observed value stays at or below
/// `(1 + alpha)` times the line.
pub fn fit_stability(sizes: &[usize], stds: &[f64], alpha: f64, tail_fraction: f64) -> Result<StabilityFit> {
    if sizes.len() != stds.len() {
        return Err(Error::InsufficientData("sizes and values differ in length".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InsufficientData("sub-sample sizes must be increasing".into()));
    }
    let tail_len = ((tail_fraction * sizes.len() as f64).ceil() as usize).min(sizes.len());
    if tail_len < MIN_TAIL_POINTS {
        return Err(Error::InsufficientData(format!(
            "{tail_len} points in the tail region; at least {MIN_TAIL_POINTS} required"
        )));
    }
    let start = sizes.len() - tail_len;
    let fit_region = sizes[start..].to_vec();
    let unconverged = |a: f64, b: f64| StabilityFit {
        a,
        b,
        fit_region: fit_region.clone(),
        required_n: None,
        converged: false,
    };
    if stds[start..].iter().any(|y| !(y.is_finite() && *y > 0.0)) {
        return Ok(unconverged(f64::NAN, f64::NAN));
    }
    let xs: Vec<f64> = fit_region.iter().map(|n| *n as f64).collect();
    let ys: Vec<f64> = stds[start..].iter().map(|y| y.ln()).collect();
    let Some((a, b)) = stats::linear_regression(&xs, &ys) else {
        return Ok(unconverged(f64::NAN, f64::NAN));
    };
    if a >= 0.0 {
        return Ok(unconverged(a, b));
    }
    let within = |i: usize| stds[i] <= (1.0 + alpha) * (a * sizes[i] as f64 + b).exp();
    let required_n = match (0..sizes.len()).rev().find(|i| !within(*i)) {
        None => Some(sizes[0]),
        Some(last_bad) if last_bad + 1 < sizes.len() => Some(sizes[last_bad + 1]),
        Some(_) => None,
    };
    Ok(StabilityFit {
        a,
        b,
        fit_region,
        required_n,
        converged: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStability {
    pub param: String,
    /// Fit of the MLB dispersion curve; decides the required cell count.
    pub mlb: StabilityFit,
    /// Same fit applied to the SSD curve, for comparison.
    pub ssd: StabilityFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummaryRecord {
    pub cell_id: String,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub converged: bool,
}

/// Population fit on every cell of the dataset, without resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullSampleFit {
    pub mlb: PopulationPosterior,
    pub ssd: SsdSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software_version: String,
    pub master_seed: u64,
    pub study: StudyConfig,
    pub cell_mcmc: McmcConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub schema_version: u32,
    pub dataset: String,
    pub model: ModelSpec,
    pub k: usize,
    pub subsample_min: usize,
    pub subsample_max: usize,
    pub curves: Vec<ParamCurve>,
    pub stability: Vec<ParamStability>,
    /// Largest per-parameter requirement; `None` if any parameter never settles.
    pub required_n_model: Option<usize>,
    pub correlations: Option<Vec<Vec<Option<f64>>>>,
    pub full_sample: FullSampleFit,
    pub cells: Vec<CellSummaryRecord>,
    pub excluded_repeats: usize,
    pub provenance: Provenance,
}

impl StudyResult {
    pub fn curve(&self, param: &str) -> Option<&ParamCurve> {
        self.curves.iter().find(|c| c.param == param)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Run the full study: first-level posteriors for every cell (cached when a
/// cache is given), then the sub-sampling experiment.
pub fn run_study(
    dataset: &Dataset,
    spec: ModelSpec,
    study_cfg: &StudyConfig,
    cell_cfg: &McmcConfig,
    cache: Option<&PosteriorCache>,
) -> Result<StudyResult> {
    study_cfg.resolve_range(dataset.k())?;
    let posteriors = cell::fit_cells(dataset, spec, cell_cfg, cache)?;
    run_study_with_posteriors(&dataset.name, spec, &posteriors, study_cfg, cell_cfg)
}

/// The sub-sampling experiment on precomputed first-level posteriors.
pub fn run_study_with_posteriors(
    dataset_name: &str,
    spec: ModelSpec,
    posteriors: &[CellPosterior],
    study_cfg: &StudyConfig,
    cell_cfg: &McmcConfig,
) -> Result<StudyResult> {
    let k = posteriors.len();
    let (n_min, n_max) = study_cfg.resolve_range(k)?;
    let summaries: Vec<GaussianSummary> = posteriors.iter().map(CellPosterior::summary).collect();
    let dim = spec.param_count();
    let names = spec.param_names();
    let master = study_cfg.master_seed;

    let streams: Vec<Vec<usize>> = (0..study_cfg.n_repeats)
        .into_par_iter()
        .map(|r| repeat_draws(master, r, k, n_max))
        .collect();
    let jobs: Vec<(usize, usize)> = (n_min..=n_max)
        .flat_map(|n| (0..study_cfg.n_repeats).map(move |r| (n, r)))
        .collect();
    let fits: Vec<Option<RepeatFit>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let sub: Vec<GaussianSummary> = streams[r][..n].iter().map(|&i| summaries[i].clone()).collect();
            let cfg = study_cfg.population_mcmc.with_seed(mlb_seed(master, n, r));
            match fit_subsample(&sub, &cfg) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("repeat {r} at N={n} excluded: {e}");
                    None
                }
            }
        })
        .collect();

    let mut curves: Vec<ParamCurve> = names
        .iter()
        .map(|p| ParamCurve {
            param: p.to_string(),
            points: Vec::new(),
        })
        .collect();
    let mut excluded_total = 0;
    for (chunk_idx, chunk) in fits.chunks(study_cfg.n_repeats).enumerate() {
        let n = n_min + chunk_idx;
        let valid: Vec<&RepeatFit> = chunk.iter().flatten().collect();
        let excluded = chunk.len() - valid.len();
        excluded_total += excluded;
        if excluded as f64 > MAX_EXCLUDED_FRACTION * chunk.len() as f64 {
            return Err(Error::StudyAborted(format!(
                "{excluded} of {} repeats failed at N={n}",
                chunk.len()
            )));
        }
        let not_converged = valid.iter().filter(|f| !f.mlb.diagnostics.converged).count();
        for (d, curve) in curves.iter_mut().enumerate() {
            let col = |f: fn(&RepeatFit, usize) -> f64| -> Vec<f64> { valid.iter().map(|v| f(v, d)).collect() };
            let mlb_sigma = col(|v, d| v.mlb.sigma_g[d]);
            let mlb_mu = col(|v, d| v.mlb.mu_g[d]);
            let ssd_s = col(|v, d| v.ssd.s_g[d]);
            let ssd_m = col(|v, d| v.ssd.m_g[d]);
            curve.points.push(CurvePoint {
                n,
                n_valid: valid.len(),
                n_not_converged: not_converged,
                mlb_std_sigma_g: spread(&mlb_sigma),
                mlb_std_mu_g: spread(&mlb_mu),
                mlb_mean_sigma_g: stats::mean(&mlb_sigma),
                mlb_mean_mu_g: stats::mean(&mlb_mu),
                ssd_std_s_g: spread(&ssd_s),
                ssd_std_m_g: spread(&ssd_m),
                ssd_mean_s_g: stats::mean(&ssd_s),
                ssd_mean_m_g: stats::mean(&ssd_m),
            });
        }
    }

    let mut stability = Vec::with_capacity(dim);
    for curve in &curves {
        let sizes = curve.sizes();
        stability.push(ParamStability {
            param: curve.param.clone(),
            mlb: fit_stability(&sizes, &curve.mlb_std(), study_cfg.alpha, study_cfg.tail_fraction)?,
            ssd: fit_stability(&sizes, &curve.ssd_std(), study_cfg.alpha, study_cfg.tail_fraction)?,
        });
    }
    let required_n_model = stability
        .iter()
        .map(|s| s.mlb.required_n)
        .collect::<Option<Vec<usize>>>()
        .and_then(|v| v.into_iter().max());

    let correlations = if dim >= 2 {
        Some(population::parameter_correlations(&summaries)?)
    } else {
        None
    };
    let full_cfg = study_cfg
        .population_mcmc
        .with_seed(seed::derive_u64(master, &[Key::Tag("full-sample")]));
    let full = fit_subsample(&summaries, &full_cfg)?;

    Ok(StudyResult {
        schema_version: SCHEMA_VERSION,
        dataset: dataset_name.to_string(),
        model: spec,
        k,
        subsample_min: n_min,
        subsample_max: n_max,
        curves,
        stability,
        required_n_model,
        correlations,
        full_sample: FullSampleFit {
            mlb: full.mlb,
            ssd: full.ssd,
        },
        cells: posteriors
            .iter()
            .map(|p| CellSummaryRecord {
                cell_id: p.cell_id.clone(),
                mu: p.mu.clone(),
                var: p.var.clone(),
                converged: p.diagnostics.converged,
            })
            .collect(),
        excluded_repeats: excluded_total,
        provenance: Provenance {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: master,
            study: study_cfg.clone(),
            cell_mcmc: *cell_cfg,
        },
    })
}

/// Standard deviation across repeats; zero with fewer than two values.
fn spread(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        stats::std_dev(xs)
    }
}

/// Population estimates from one nested sequence of sub-samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleDrawRow {
    pub n: usize,
    pub mu_g: Vec<f64>,
    pub mu_g_sd: Vec<f64>,
    pub sigma_g: Vec<f64>,
    pub sigma_g_sd: Vec<f64>,
    pub m_g: Vec<f64>,
    pub s_g: Vec<f64>,
}

/// One repeat per sub-sample size with nested sub-samples (size `N + 1`
/// adds one draw to size `N`). Uses the streams and seeds of repeat 0 of
/// [`run_study_with_posteriors`].
pub fn single_draw_trace(
    spec: ModelSpec,
    posteriors: &[CellPosterior],
    study_cfg: &StudyConfig,
) -> Result<Vec<SingleDrawRow>> {
    let k = posteriors.len();
    let (n_min, n_max) = study_cfg.resolve_range(k)?;
    debug_assert!(posteriors.iter().all(|p| p.model == spec));
    let summaries: Vec<GaussianSummary> = posteriors.iter().map(CellPosterior::summary).collect();
    let draws = repeat_draws(study_cfg.master_seed, 0, k, n_max);
    (n_min..=n_max)
        .into_par_iter()
        .map(|n| {
            let sub: Vec<GaussianSummary> = draws[..n].iter().map(|&i| summaries[i].clone()).collect();
            let cfg = study_cfg.population_mcmc.with_seed(mlb_seed(study_cfg.master_seed, n, 0));
            let fit = fit_subsample(&sub, &cfg)?;
            Ok(SingleDrawRow {
                n,
                mu_g: fit.mlb.mu_g,
                mu_g_sd: fit.mlb.mu_g_sd,
                sigma_g: fit.mlb.sigma_g,
                sigma_g_sd: fit.mlb.sigma_g_sd,
                m_g: fit.ssd.m_g,
                s_g: fit.ssd.s_g,
            })
        })
        .collect()
}
