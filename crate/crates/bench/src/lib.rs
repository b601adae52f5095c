//! Fixtures shared by the benchmarks in `benches/`.

use cellvar::{CellPosterior, Dataset, McmcConfig, ModelSpec, PopulationTruth};

/// Default synthetic population for `model`, with `k` cells, normalized.
pub fn dataset(model: ModelSpec, k: usize) -> Dataset {
    let mut truth = PopulationTruth::default_for(model);
    truth.k = k;
    cellvar::synth::generate(&truth)
        .and_then(|s| s.normalized(model))
        .expect("default synthetic population is valid")
}

/// First-level posteriors for [`dataset`] with default chain settings.
pub fn posteriors(model: ModelSpec, k: usize) -> Vec<CellPosterior> {
    cellvar::cell::fit_cells(&dataset(model, k), model, &McmcConfig::default(), None)
        .expect("default synthetic cells fit")
}
