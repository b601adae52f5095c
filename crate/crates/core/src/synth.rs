//! Synthetic datasets drawn from a known Gaussian population of model
//! parameters, used as ground truth for end-to-end checks.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, CapacityTrace, Dataset};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::seed::{self, Key};

const MAX_TAU_REDRAWS: usize = 1000;

/// Generating population and measurement setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTruth {
    pub model: ModelSpec,
    pub mu_star: Vec<f64>,
    /// Population standard deviations.
    pub sigma_star: Vec<f64>,
    /// Parameter correlation matrix; identity when absent.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Measurement noise standard deviation, percent capacity.
    pub noise: f64,
    pub k: usize,
    pub times: Vec<f64>,
    pub seed: u64,
    /// Ampere-hours corresponding to 100 %.
    pub nominal_capacity: f64,
}

/// `n` equally spaced checkups on `[0, t_max]`.
pub fn uniform_grid(n: usize, t_max: f64) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
}

impl PopulationTruth {
    /// Default population for a model: 40 cells, 50 checkups over 1000
    /// time units, 0.1 % noise.
    pub fn default_for(model: ModelSpec) -> Self {
        let (mu_star, sigma_star) = match model {
            ModelSpec::Linear1 => (vec![-0.01], vec![0.002]),
            ModelSpec::Linear2 => (vec![99.7, -0.01], vec![0.3, 0.002]),
            ModelSpec::LinExp => (vec![-0.005, 800.0, 100.0], vec![0.001, 40.0, 10.0]),
        };
        PopulationTruth {
            model,
            mu_star,
            sigma_star,
            correlation: None,
            noise: 0.1,
            k: 40,
            times: uniform_grid(50, 1000.0),
            seed: 0,
            nominal_capacity: 1.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.model.param_count();
        let bad = |m: String| Err(Error::Truth(m));
        if self.mu_star.len() != p || self.sigma_star.len() != p {
            return bad(format!("{} needs {p} population means and deviations", self.model));
        }
        if self.mu_star.iter().any(|v| !v.is_finite()) {
            return bad("population means must be finite".into());
        }
        if self.sigma_star.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("population deviations must be finite and non-negative".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        if self.k == 0 {
            return bad("cell count must be positive".into());
        }
        if self.times.len() < self.model.min_points() {
            return bad(format!("time grid needs at least {} points", self.model.min_points()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) || self.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return bad("time grid must be non-negative and strictly increasing".into());
        }
        if !(self.nominal_capacity > 0.0 && self.nominal_capacity.is_finite()) {
            return bad("nominal capacity must be positive".into());
        }
        if let Some(c) = &self.correlation {
            correlation_factor(c, p)?;
        }
        Ok(())
    }
}

/// Validate a correlation matrix and return `L` with `L L^T = C`.
fn correlation_factor(c: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    if c.len() != p || c.iter().any(|row| row.len() != p) {
        return Err(Error::Truth(format!("correlation must be {p}x{p}")));
    }
    for i in 0..p {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::Truth("correlation diagonal must be 1".into()));
        }
        for j in 0..p {
            if (c[i][j] - c[j][i]).abs() > 1e-12 || c[i][j].abs() > 1.0 {
                return Err(Error::Truth("correlation must be symmetric with entries in [-1, 1]".into()));
            }
        }
    }
    let m = DMatrix::from_fn(p, p, |i, j| c[i][j]);
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|l| *l < -1e-10) {
        return Err(Error::Truth("correlation must be positive semi-definite".into()));
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_l)
}

/// Hidden parameters of one generated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub cell_id: String,
    pub theta: Vec<f64>,
}

/// A generated dataset with the truths it was drawn from.
#[derive(Debug, Clone)]
pub struct Synthetic {
    /// Raw traces (ampere-hours), not yet normalized.
    pub dataset: Dataset,
    pub cells: Vec<CellTruth>,
}

impl Synthetic {
    /// The dataset normalized as the generating model requires.
    pub fn normalized(&self, model: ModelSpec) -> Result<Dataset> {
        dataset::normalize(&self.dataset, model.required_normalization())
    }
}

/// Draw `K` cells from the population, evaluate the model on the time grid
/// and add i.i.d. Gaussian noise. LinExp draws with `tau <= 0` are redrawn.
pub fn generate(truth: &PopulationTruth) -> Result<Synthetic> {
    truth.validate()?;
    let p = truth.model.param_count();
    let factor = match &truth.correlation {
        Some(c) => correlation_factor(c, p)?,
        None => DMatrix::identity(p, p),
    };
    let mut rng = seed::stream(truth.seed, &[Key::Tag("synth")]);
    let width = truth.k.to_string().len().max(3);
    let mut traces = Vec::with_capacity(truth.k);
    let mut cells = Vec::with_capacity(truth.k);
    for i in 0..truth.k {
        let theta = draw_theta(truth, &factor, &mut rng)?;
        let cell_id = format!("cell{:0width$}", i + 1);
        let caps = truth
            .times
            .iter()
            .map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let pct = truth.model.eval_unchecked(&theta, *t) + truth.noise * e;
                pct / 100.0 * truth.nominal_capacity
            })
            .collect::<Vec<_>>();
        if caps.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Truth(format!(
                "cell {cell_id} reached non-positive capacity; shorten the time grid"
            )));
        }
        traces.push(CapacityTrace::from_raw(cell_id.clone(), truth.times.clone(), caps)?);
        cells.push(CellTruth { cell_id, theta });
    }
    Ok(Synthetic {
        dataset: Dataset {
            name: format!("synthetic-{}", truth.model),
            traces,
            nominal_capacity: Some(truth.nominal_capacity),
            time_unit: "efc".into(),
        },
        cells,
    })
}

fn draw_theta<R: Rng>(truth: &PopulationTruth, factor: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let p = truth.model.param_count();
    for _ in 0..MAX_TAU_REDRAWS {
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let theta: Vec<f64> = (0..p)
            .map(|i| {
                let corr: f64 = (0..p).map(|j| factor[(i, j)] * z[j]).sum();
                truth.mu_star[i] + truth.sigma_star[i] * corr
            })
            .collect();
        if truth.model.is_valid(&theta) {
            return Ok(theta);
        }
    }
    Err(Error::Truth(format!(
        "{MAX_TAU_REDRAWS} consecutive draws had tau <= 0; use a narrower tau population"
    )))
}

/// Sidecar describing the truth behind a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub schema_version: u32,
    pub truth: PopulationTruth,
    pub cells: Vec<CellTruth>,
}

impl TruthSidecar {
    pub fn new(truth: &PopulationTruth, synthetic: &Synthetic) -> Self {
        TruthSidecar {
            schema_version: 1,
            truth: truth.clone(),
            cells: synthetic.cells.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
