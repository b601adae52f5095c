//! Required cell counts for the three models on the default synthetic
//! populations, one line per master seed.
//!
//! ```text
//! cargo run --release --example required_n_sweep -- [repeats] [seed,seed,...]
//! ```

use cellvar::{cell, study, synth, McmcConfig, ModelSpec, PopulationTruth, StudyConfig};

fn main() -> cellvar::Result<()> {
    let mut args = std::env::args().skip(1);
    let repeats: usize = args.next().map_or(200, |s| s.parse().expect("repeats"));
    let seeds: Vec<u64> = args
        .next()
        .map_or_else(|| vec![0, 1, 2, 3, 4], |s| s.split(',').map(|v| v.parse().expect("seed")).collect());

    for seed in seeds {
        let mut line = format!("seed {seed}:");
        for model in ModelSpec::ALL {
            let truth = PopulationTruth { seed, ..PopulationTruth::default_for(model) };
            let data = synth::generate(&truth)?.normalized(model)?;
            let cell_cfg = McmcConfig::default().with_seed(seed);
            let posteriors = cell::fit_cells(&data, model, &cell_cfg, None)?;
            let cfg = StudyConfig { n_repeats: repeats, master_seed: seed, ..Default::default() };
            let result = study::run_study_with_posteriors(&data.name, model, &posteriors, &cfg, &cell_cfg)?;
            let per: Vec<String> = result
                .stability
                .iter()
                .map(|s| format!("{}={}", s.param, s.mlb.required_n.map_or("-".into(), |n| n.to_string())))
                .collect();
            let n = result.required_n_model.map_or("not-reached".into(), |n| n.to_string());
            line += &format!("  {model}={n} [{}]", per.join(" "));
        }
        println!("{line}");
    }
    Ok(())
}
