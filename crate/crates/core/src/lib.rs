//! Estimating how many battery cells must be tested to characterise
//! cell-to-cell variability in capacity fade.
//!
//! The pipeline has two inference levels. Each cell's capacity trace is
//! fitted with an empirical fade model ([`models`]) by MCMC with the noise
//! scale marginalized out ([`cell`]); the resulting Gaussian summaries feed
//! an analytic random-effects posterior over the population mean and spread
//! ([`population`]). A bootstrap sub-sampling study ([`study`]) then tracks
//! how the spread estimate stabilizes as more cells are included.
//!
//! [`synth`] generates datasets from known populations for validation.

pub mod cell;
pub mod dataset;
pub mod error;
pub mod mcmc;
pub mod models;
pub mod population;
pub mod report;
pub mod seed;
pub mod stats;
pub mod study;
pub mod synth;

pub use cell::{CellPosterior, GaussianSummary, PosteriorCache};
pub use dataset::{CapacityTrace, Dataset, IngestConfig, KneeParams, Normalization};
pub use error::{Error, Result};
pub use mcmc::McmcConfig;
pub use models::{ModelSpec, ParamVector};
pub use population::{PopulationPosterior, PopulationPrior, SsdSummary};
pub use study::{StabilityFit, StudyConfig, StudyResult};
pub use synth::PopulationTruth;
