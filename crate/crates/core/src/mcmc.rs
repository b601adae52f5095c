//! Random-walk Metropolis with Gaussian proposals.
//!
//! Proposals start diagonal with the caller's scales. They adapt during
//! burn-in only: a global factor is steered toward a 20-40% acceptance rate
//! each adaptation window, and the proposal shape is re-estimated from the
//! burn-in covariance at the half and three-quarter marks. After burn-in the
//! kernel is fixed.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Chains with fewer effective draws than this in any dimension are
/// reported as not converged.
pub const MIN_ESS: f64 = 100.0;

const TARGET_LOW: f64 = 0.20;
const TARGET_HIGH: f64 = 0.40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_steps: 20_000,
            burn_in: 5_000,
            thin: 10,
            seed: 0,
            adapt_window: 50,
        }
    }
}

impl McmcConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        McmcConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_steps {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_steps ({})",
                self.burn_in, self.n_steps
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adapt_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.n_steps - self.burn_in) / self.thin
    }
}

/// Convergence and efficiency summary of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    pub ess: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Chain {
    /// Retained draws, one row per draw.
    pub draws: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl Chain {
    pub fn column(&self, dim: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[dim]).collect()
    }
}

/// Sample from `log_density` starting at `start`.
///
/// `reflect` marks coordinates constrained to be non-negative; their
/// proposals are reflected at zero, which keeps the kernel symmetric.
pub fn random_walk_metropolis<F, R>(
    mut log_density: F,
    start: &[f64],
    scales: &[f64],
    reflect: &[bool],
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<Chain>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let dim = start.len();
    assert_eq!(scales.len(), dim);
    assert_eq!(reflect.len(), dim);

    let mut current = start.to_vec();
    let mut current_lp = log_density(&current);
    if !current_lp.is_finite() {
        return Err(Error::Sampler(format!(
            "log density at the starting point is {current_lp}"
        )));
    }

    let initial: Vec<f64> = scales
        .iter()
        .map(|s| if s.is_finite() && *s > 0.0 { *s } else { 1e-6 })
        .collect();
    // lower-triangular factor, row-major
    let mut shape = vec![0.0; dim * dim];
    for d in 0..dim {
        shape[d * dim + d] = initial[d];
    }
    let mut z = vec![0.0; dim];
    let mut factor = 1.0;
    let mut window_accepts = 0usize;
    let mut window_len = 0usize;
    let mut burn_draws: Vec<Vec<f64>> = Vec::new();
    let reshape_at = [cfg.burn_in / 2, cfg.burn_in * 3 / 4];

    let mut proposal = vec![0.0; dim];
    let mut draws = Vec::with_capacity(cfg.retained());
    let mut accepted_after_burn = 0usize;

    for step in 0..cfg.n_steps {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        for d in 0..dim {
            let step: f64 = (0..=d).map(|j| shape[d * dim + j] * z[j]).sum();
            let mut x = current[d] + factor * step;
            if reflect[d] {
                x = x.abs();
            }
            proposal[d] = x;
        }
        let lp = log_density(&proposal);
        let accept = if lp.is_nan() {
            false
        } else if lp >= current_lp {
            true
        } else {
            let u: f64 = rng.random();
            u.ln() < lp - current_lp
        };
        if accept {
            current.copy_from_slice(&proposal);
            current_lp = lp;
        }

        if step < cfg.burn_in {
            window_len += 1;
            window_accepts += accept as usize;
            if step >= cfg.burn_in / 4 {
                burn_draws.push(current.clone());
            }
            if window_len == cfg.adapt_window {
                let rate = window_accepts as f64 / window_len as f64;
                if window_accepts == 0 {
                    factor *= 0.5;
                } else if !(TARGET_LOW..=TARGET_HIGH).contains(&rate) {
                    factor *= (2.0 * (rate - 0.3)).exp();
                }
                factor = factor.clamp(1e-8, 1e8);
                window_len = 0;
                window_accepts = 0;
            }
            if reshape_at.contains(&(step + 1)) && burn_draws.len() > 10 * dim {
                reshape(&mut shape, &mut factor, &burn_draws, &initial);
                burn_draws.clear();
            }
        } else {
            accepted_after_burn += accept as usize;
            if (step - cfg.burn_in) % cfg.thin == cfg.thin - 1 {
                draws.push(current.clone());
            }
        }
    }

    let post = cfg.n_steps - cfg.burn_in;
    let acceptance_rate = accepted_after_burn as f64 / post as f64;
    let ess: Vec<f64> = (0..dim)
        .map(|d| {
            let col: Vec<f64> = draws.iter().map(|x: &Vec<f64>| x[d]).collect();
            stats::effective_sample_size(&col)
        })
        .collect();
    let converged = ess.iter().all(|e| *e >= MIN_ESS);
    Ok(Chain {
        draws,
        diagnostics: Diagnostics {
            acceptance_rate,
            ess,
            converged,
        },
    })
}

/// Replace the proposal shape with the Cholesky factor of the burn-in
/// covariance scaled by the optimal random-walk factor, resetting the global
/// factor. Falls back to per-dimension standard deviations when the
/// covariance is degenerate.
fn reshape(shape: &mut [f64], factor: &mut f64, draws: &[Vec<f64>], initial: &[f64]) {
    let dim = initial.len();
    let optimal2 = 2.38 * 2.38 / dim as f64;
    let n = draws.len() as f64;
    let means: Vec<f64> = (0..dim)
        .map(|d| draws.iter().map(|x| x[d]).sum::<f64>() / n)
        .collect();
    let cov = DMatrix::from_fn(dim, dim, |i, j| {
        draws.iter().map(|x| (x[i] - means[i]) * (x[j] - means[j])).sum::<f64>() / (n - 1.0)
    });
    let sds: Vec<f64> = (0..dim).map(|d| cov[(d, d)].sqrt()).collect();
    let usable = |d: usize| {
        sds[d].is_finite() && sds[d] > initial[d] * 1e-6 && sds[d] < initial[d] * 1e6
    };

    if (0..dim).all(usable) {
        if let Some(chol) = (cov * optimal2).cholesky() {
            let l = chol.l();
            for i in 0..dim {
                for j in 0..dim {
                    shape[i * dim + j] = if j <= i { l[(i, j)] } else { 0.0 };
                }
            }
            *factor = 1.0;
            return;
        }
    }
    let mut updated = false;
    for d in 0..dim {
        if sds[d].is_finite() && sds[d] > 0.0 {
            for j in 0..dim {
                shape[d * dim + j] = 0.0;
            }
            shape[d * dim + d] = (optimal2.sqrt() * sds[d]).clamp(initial[d] * 1e-6, initial[d] * 1e6);
            updated = true;
        }
    }
    if updated {
        *factor = 1.0;
    }
}
