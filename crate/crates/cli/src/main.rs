//! `cellvar`: fit capacity-fade populations and size cell-ageing tests.

mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cellvar::dataset::{self, IngestConfig, KneeParams};
use cellvar::study::{self, StudyConfig};
use cellvar::synth::{self, PopulationTruth, TruthSidecar};
use cellvar::{cell, report, CellPosterior, McmcConfig, ModelSpec, PosteriorCache};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manifest::{RunManifest, MANIFEST_SCHEMA};

#[derive(Debug, Parser)]
#[command(name = "cellvar", version, about = "Cell-to-cell capacity-fade variability and required test sample sizes")]
struct Cli {
    /// Cap on worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit first-level (per-cell) posteriors.
    Fit(FitArgs),
    /// Run the sub-sampling study and report the required cell count.
    Study(StudyArgs),
    /// Generate a synthetic dataset from a known population.
    Synth(SynthArgs),
    /// Keep only the data before each cell's knee.
    Truncate(TruncateArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// Long-form CSV with one row per measurement.
    #[arg(long)]
    data: PathBuf,
    /// Flat key = value ingestion config (column names, time unit, nominal capacity).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cell_column: Option<String>,
    #[arg(long)]
    time_column: Option<String>,
    #[arg(long)]
    capacity_column: Option<String>,
    #[arg(long)]
    time_unit: Option<String>,
    /// Nominal cell capacity in Ah (needed by linear2).
    #[arg(long)]
    nominal_capacity: Option<f64>,
}

impl DataArgs {
    fn ingest_config(&self, min_points: usize) -> Result<IngestConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let c = IngestConfig::from_kv_file(p)?;
                IngestConfig {
                    min_points: c.min_points.max(min_points),
                    ..c
                }
            }
            None => IngestConfig {
                min_points,
                ..IngestConfig::default()
            },
        };
        if let Some(v) = &self.cell_column {
            cfg.cell_column = v.clone();
        }
        if let Some(v) = &self.time_column {
            cfg.time_column = v.clone();
        }
        if let Some(v) = &self.capacity_column {
            cfg.capacity_column = v.clone();
        }
        if let Some(v) = &self.time_unit {
            cfg.time_unit = v.clone();
        }
        if self.nominal_capacity.is_some() {
            cfg.nominal_capacity = self.nominal_capacity;
        }
        Ok(cfg)
    }

    fn input_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        manifest::hash_inputs(&self.data, &mut out)?;
        if let Some(c) = &self.config {
            manifest::hash_inputs(c, &mut out)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct ChainArgs {
    /// Total MCMC steps per cell.
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 5_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 50)]
    adapt_window: usize,
}

impl ChainArgs {
    fn config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            n_steps: self.steps,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            adapt_window: self.adapt_window,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitArgs {
    /// linear1, linear2 or linexp.
    #[arg(long)]
    model: ModelSpec,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    chain: ChainArgs,
    /// Ignore the posterior cache even if the cache environment variable is set.
    #[arg(long)]
    no_cache: bool,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct StudyArgs {
    #[arg(long)]
    model: ModelSpec,
    #[command(flatten)]
    data: DataArgs,
    /// Master seed for all derived streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repeats per sub-sample size.
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    /// Width of the acceptance band above the stability line.
    #[arg(long, default_value_t = 0.10)]
    alpha: f64,
    /// Fraction of the largest sub-sample sizes used for the stability line.
    #[arg(long, default_value_t = 0.5)]
    tail_fraction: f64,
    #[arg(long, default_value_t = 3)]
    min_size: usize,
    /// Largest sub-sample size (default K - 3).
    #[arg(long)]
    max_size: Option<usize>,
    #[command(flatten)]
    chain: ChainArgs,
    /// Second-level MCMC steps per repeat.
    #[arg(long, default_value_t = 6_000)]
    pop_steps: usize,
    #[arg(long, default_value_t = 2_000)]
    pop_burn_in: usize,
    #[arg(long, default_value_t = 4)]
    pop_thin: usize,
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    model: ModelSpec,
    /// Number of cells.
    #[arg(long, default_value_t = 40)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Population means, comma separated (default depends on the model).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mu_star: Option<Vec<f64>>,
    /// Population standard deviations, comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma_star: Option<Vec<f64>>,
    /// Correlation matrix, rows separated by `;`, entries by `,`.
    #[arg(long, allow_hyphen_values = true)]
    correlation: Option<String>,
    /// Measurement noise standard deviation, percent capacity.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Checkups per cell.
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 1000.0)]
    t_max: f64,
    /// Ah corresponding to 100 %.
    #[arg(long, default_value_t = 1.1)]
    nominal_capacity: f64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TruncateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory of LinExp posterior records from `fit --model linexp`;
    /// fitted on the fly when absent.
    #[arg(long)]
    posteriors: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    chain: ChainArgs,
    /// Cells left with fewer points are dropped.
    #[arg(long, default_value_t = 4)]
    min_points: usize,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct ReplayArgs {
    /// Manifest file, or a directory containing one.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the re-run.
    #[arg(long)]
    out: PathBuf,
}

/// Per-command outcome folded into the manifest.
struct Outcome {
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": {
                    "message": e.to_string(),
                    "chain": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli, args: &[String]) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring thread pool")?;
    }
    if let Command::Replay(r) = &cli.command {
        return replay(r, cli.threads);
    }
    let started = manifest::now_unix();
    let (name, out, outcome) = match &cli.command {
        Command::Fit(a) => ("fit", &a.out, cmd_fit(a)?),
        Command::Study(a) => ("study", &a.out, cmd_study(a)?),
        Command::Synth(a) => ("synth", &a.out, cmd_synth(a)?),
        Command::Truncate(a) => ("truncate", &a.out, cmd_truncate(a)?),
        Command::Replay(_) => unreachable!(),
    };
    RunManifest {
        schema_version: MANIFEST_SCHEMA,
        command: name.to_string(),
        args: strip_out(args),
        resolved_config: outcome.config,
        input_hashes: outcome.inputs,
        master_seed: outcome.seed,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix: started,
        finished_at_unix: manifest::now_unix(),
    }
    .write(out)
}

/// Drop `--out <dir>` / `--out=<dir>` and `--threads` so a manifest can be
/// replayed into another directory with any thread count.
fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" || a == "--threads" {
            skip = true;
        } else if !(a.starts_with("--out=") || a.starts_with("--threads=")) {
            out.push(a.clone());
        }
    }
    out
}

fn replay(r: &ReplayArgs, threads: Option<usize>) -> Result<()> {
    let m = RunManifest::read(&r.manifest)?;
    for (path, hash) in &m.input_hashes {
        let now = manifest::hash_file(Path::new(path))
            .with_context(|| format!("input {path} recorded in the manifest is unavailable"))?;
        if &now != hash {
            bail!("input {path} changed since the manifest was written");
        }
    }
    let exe = std::env::current_exe().context("locating executable")?;
    let mut cmd = std::process::Command::new(exe);
    if let Some(n) = threads {
        cmd.arg("--threads").arg(n.to_string());
    }
    let status = cmd
        .args(&m.args)
        .arg("--out")
        .arg(&r.out)
        .status()
        .context("spawning replay")?;
    if !status.success() {
        bail!("replayed command failed with {status}");
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(data: &DataArgs, model: ModelSpec) -> Result<cellvar::Dataset> {
    let cfg = data.ingest_config(model.min_points())?;
    let raw = dataset::ingest_csv(&data.data, &cfg)?;
    Ok(dataset::normalize(&raw, model.required_normalization())?)
}

fn cache(no_cache: bool) -> Result<Option<PosteriorCache>> {
    if no_cache {
        Ok(None)
    } else {
        Ok(PosteriorCache::from_env()?)
    }
}

fn safe_file_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_posteriors(dir: &Path, posteriors: &[CellPosterior]) -> Result<()> {
    let pdir = dir.join("posteriors");
    create_dir(&pdir)?;
    for p in posteriors {
        let path = pdir.join(format!("{}.json", safe_file_name(&p.cell_id)));
        std::fs::write(&path, serde_json::to_string_pretty(p)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn report_convergence(model: ModelSpec, ds: &cellvar::Dataset, posteriors: &[CellPosterior]) {
    let bad: Vec<&str> = posteriors
        .iter()
        .filter(|p| !p.diagnostics.converged || !p.start_converged)
        .map(|p| p.cell_id.as_str())
        .collect();
    if !bad.is_empty() {
        eprintln!(
            "warning: {} of {} cells did not converge: {}",
            bad.len(),
            posteriors.len(),
            bad.join(", ")
        );
    }
    if model != ModelSpec::LinExp {
        return;
    }
    // a knee cutoff past the last checkup means the record shows no knee
    let knee_free = posteriors
        .iter()
        .filter(|p| {
            let cutoff = KneeParams { t_f: p.mu[1], tau: p.mu[2] }.cutoff();
            ds.trace(&p.cell_id).is_some_and(|t| cutoff >= t.last_time())
        })
        .count();
    if !bad.is_empty() || knee_free > 0 {
        eprintln!(
            "warning: LinExp fitted to data without a knee may not converge ({knee_free} cells show no knee)"
        );
    }
}

fn cmd_fit(a: &FitArgs) -> Result<Outcome> {
    let ds = load(&a.data, a.model)?;
    let cfg = a.chain.config(a.seed);
    cfg.validate()?;
    let posteriors = cell::fit_cells(&ds, a.model, &cfg, cache(a.no_cache)?.as_ref())?;
    create_dir(&a.out)?;
    write_posteriors(&a.out, &posteriors)?;
    report::write_cell_table(&posteriors, create_file(&a.out.join("summary.csv"))?)?;
    report_convergence(a.model, &ds, &posteriors);
    println!("fitted {} cells with {}", posteriors.len(), a.model);
    Ok(Outcome {
        config: serde_json::json!({ "args": a, "ingest": a.data.ingest_config(a.model.min_points())?, "mcmc": cfg }),
        inputs: a.data.input_hashes()?,
        seed: a.seed,
    })
}

fn cmd_study(a: &StudyArgs) -> Result<Outcome> {
    let ds = load(&a.data, a.model)?;
    let cell_cfg = a.chain.config(a.seed);
    cell_cfg.validate()?;
    let study_cfg = StudyConfig {
        n_repeats: a.repeats,
        subsample_min: a.min_size,
        subsample_max: a.max_size,
        alpha: a.alpha,
        master_seed: a.seed,
        tail_fraction: a.tail_fraction,
        population_mcmc: McmcConfig {
            n_steps: a.pop_steps,
            burn_in: a.pop_burn_in,
            thin: a.pop_thin,
            seed: 0,
            adapt_window: a.chain.adapt_window,
        },
    };
    study_cfg.resolve_range(ds.k())?;
    let posteriors = cell::fit_cells(&ds, a.model, &cell_cfg, cache(a.no_cache)?.as_ref())?;
    report_convergence(a.model, &ds, &posteriors);
    let result = study::run_study_with_posteriors(&ds.name, a.model, &posteriors, &study_cfg, &cell_cfg)?;
    let single = study::single_draw_trace(a.model, &posteriors, &study_cfg)?;
    report::write_study_outputs(&result, &single, &a.out)?;
    report::write_cell_table(&posteriors, create_file(&a.out.join("cells.csv"))?)?;
    for s in &result.stability {
        println!(
            "{}: required_N={} (slope {:.4}, converged {})",
            s.param,
            s.mlb.required_n.map_or("not-reached".into(), |n| n.to_string()),
            s.mlb.a,
            s.mlb.converged
        );
    }
    println!(
        "required_N={}",
        result.required_n_model.map_or("not-reached".into(), |n| n.to_string())
    );
    Ok(Outcome {
        config: serde_json::json!({
            "args": a,
            "ingest": a.data.ingest_config(a.model.min_points())?,
            "cell_mcmc": cell_cfg,
            "study": study_cfg,
        }),
        inputs: a.data.input_hashes()?,
        seed: a.seed,
    })
}

fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad correlation entry `{v}`")))
                .collect()
        })
        .collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let mut truth = PopulationTruth::default_for(a.model);
    if let Some(m) = &a.mu_star {
        truth.mu_star = m.clone();
    }
    if let Some(s) = &a.sigma_star {
        truth.sigma_star = s.clone();
    }
    if let Some(c) = &a.correlation {
        truth.correlation = Some(parse_matrix(c)?);
    }
    truth.noise = a.noise;
    truth.k = a.k;
    truth.times = synth::uniform_grid(a.points, a.t_max);
    truth.seed = a.seed;
    truth.nominal_capacity = a.nominal_capacity;
    let syn = synth::generate(&truth)?;
    create_dir(&a.out)?;
    syn.dataset.write_csv_file(a.out.join("dataset.csv"))?;
    TruthSidecar::new(&truth, &syn).write(a.out.join("truth.json"))?;
    println!("wrote {} cells to {}", syn.cells.len(), a.out.join("dataset.csv").display());
    Ok(Outcome {
        config: serde_json::json!({ "args": a, "truth": truth }),
        inputs: BTreeMap::new(),
        seed: a.seed,
    })
}

fn read_knees(dir: &Path) -> Result<HashMap<String, KneeParams>> {
    let mut out = HashMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.extension().and_then(|x| x.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let p: CellPosterior = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if p.model != ModelSpec::LinExp {
            bail!("{} holds a {} posterior; knee fits need linexp", path.display(), p.model);
        }
        out.insert(p.cell_id.clone(), KneeParams { t_f: p.mu[1], tau: p.mu[2] });
    }
    Ok(out)
}

fn cmd_truncate(a: &TruncateArgs) -> Result<Outcome> {
    let model = ModelSpec::LinExp;
    let raw = dataset::ingest_csv(&a.data.data, &a.data.ingest_config(model.min_points())?)?;
    let cfg = a.chain.config(a.seed);
    let mut inputs = a.data.input_hashes()?;
    let knees = match &a.posteriors {
        Some(dir) => {
            manifest::hash_inputs(dir, &mut inputs)?;
            read_knees(dir)?
        }
        None => {
            cfg.validate()?;
            let ds = dataset::normalize(&raw, model.required_normalization())?;
            cell::fit_cells(&ds, model, &cfg, None)?
                .into_iter()
                .map(|p| (p.cell_id, KneeParams { t_f: p.mu[1], tau: p.mu[2] }))
                .collect()
        }
    };
    let truncated = dataset::truncate_pre_knee(&raw, &knees, a.min_points)?;
    for id in &truncated.dropped {
        eprintln!("warning: cell {id} dropped by pre-knee truncation");
    }
    create_dir(&a.out)?;
    truncated.dataset.write_csv_file(a.out.join("pre_knee.csv"))?;
    println!(
        "kept {} of {} cells",
        truncated.dataset.k(),
        raw.k()
    );
    Ok(Outcome {
        config: serde_json::json!({ "args": a, "mcmc": cfg }),
        inputs,
        seed: a.seed,
    })
}
