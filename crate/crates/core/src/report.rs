//! Flat CSV tables for plotting study results.
//!
//! | file              | contents                                         |
//! |-------------------|--------------------------------------------------|
//! | `curve.csv`       | dispersion of population estimates vs. `N`       |
//! | `single_draw.csv` | one nested sub-sample sequence with 1-sigma bands |
//! | `required_n.csv`  | required cell count per parameter and model      |
//! | `histogram.csv`   | per-cell estimates vs. fitted population density |
//! | `cells.csv`       | first-level summaries per cell                   |

use std::io::Write;
use std::path::Path;

use crate::cell::CellPosterior;
use crate::error::{Error, Result};
use crate::study::{SingleDrawRow, StudyResult};

pub const HISTOGRAM_BINS: usize = 12;

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn ser(e: impl std::fmt::Display) -> Error {
    Error::Serialization(e.to_string())
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "not-reached".to_string(), |n| n.to_string())
}

pub fn write_curve<W: Write>(result: &StudyResult, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record([
        "param",
        "n",
        "n_valid",
        "n_not_converged",
        "mlb_std_sigma_g",
        "ssd_std_s_g",
        "mlb_std_mu_g",
        "ssd_std_m_g",
        "mlb_mean_sigma_g",
        "ssd_mean_s_g",
        "mlb_mean_mu_g",
        "ssd_mean_m_g",
        "stable_line",
        "band_upper",
    ])
    .map_err(ser)?;
    let alpha = result.provenance.study.alpha;
    for (curve, stab) in result.curves.iter().zip(&result.stability) {
        for p in &curve.points {
            let line = if stab.mlb.converged { stab.mlb.line(p.n) } else { f64::NAN };
            w.write_record([
                curve.param.clone(),
                p.n.to_string(),
                p.n_valid.to_string(),
                p.n_not_converged.to_string(),
                fmt(p.mlb_std_sigma_g),
                fmt(p.ssd_std_s_g),
                fmt(p.mlb_std_mu_g),
                fmt(p.ssd_std_m_g),
                fmt(p.mlb_mean_sigma_g),
                fmt(p.ssd_mean_s_g),
                fmt(p.mlb_mean_mu_g),
                fmt(p.ssd_mean_m_g),
                fmt(line),
                fmt((1.0 + alpha) * line),
            ])
            .map_err(ser)?;
        }
    }
    w.flush().map_err(ser)
}

pub fn write_single_draw<W: Write>(result: &StudyResult, rows: &[SingleDrawRow], w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["param", "n", "mu_g", "mu_g_sd", "sigma_g", "sigma_g_sd", "m_g", "s_g"])
        .map_err(ser)?;
    for (d, param) in result.model.param_names().iter().enumerate() {
        for r in rows {
            w.write_record([
                param.to_string(),
                r.n.to_string(),
                fmt(r.mu_g[d]),
                fmt(r.mu_g_sd[d]),
                fmt(r.sigma_g[d]),
                fmt(r.sigma_g_sd[d]),
                fmt(r.m_g[d]),
                fmt(r.s_g[d]),
            ])
            .map_err(ser)?;
        }
    }
    w.flush().map_err(ser)
}

pub fn write_required_n<W: Write>(result: &StudyResult, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["model", "param_count", "param", "required_n", "slope", "intercept", "converged"])
        .map_err(ser)?;
    let model = result.model.name();
    let count = result.model.param_count().to_string();
    for s in &result.stability {
        w.write_record([
            model.to_string(),
            count.clone(),
            s.param.clone(),
            opt(s.mlb.required_n),
            fmt(s.mlb.a),
            fmt(s.mlb.b),
            s.mlb.converged.to_string(),
        ])
        .map_err(ser)?;
    }
    w.write_record([
        model.to_string(),
        count,
        "model".to_string(),
        opt(result.required_n_model),
        String::new(),
        String::new(),
        result.stability.iter().all(|s| s.mlb.converged).to_string(),
    ])
    .map_err(ser)?;
    w.flush().map_err(ser)
}

/// Histogram of per-cell posterior means against the full-sample
/// population density `N(mu_g, sigma_g^2)` evaluated at bin centres.
pub fn write_histogram<W: Write>(result: &StudyResult, w: W) -> Result<()> {
    let mut w = writer(w);
    w.write_record(["param", "bin_lo", "bin_hi", "count", "sample_density", "population_density"])
        .map_err(ser)?;
    let k = result.cells.len() as f64;
    for (d, param) in result.model.param_names().iter().enumerate() {
        let values: Vec<f64> = result.cells.iter().map(|c| c.mu[d]).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
        let mut counts = [0usize; HISTOGRAM_BINS];
        for v in &values {
            let i = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[i] += 1;
        }
        let mu = result.full_sample.mlb.mu_g[d];
        let sigma = result.full_sample.mlb.sigma_g[d];
        for (i, c) in counts.iter().enumerate() {
            let a = lo + i as f64 * width;
            let centre = a + 0.5 * width;
            let density = if sigma > 0.0 {
                (-0.5 * ((centre - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            } else {
                f64::NAN
            };
            w.write_record([
                param.to_string(),
                fmt(a),
                fmt(a + width),
                c.to_string(),
                fmt(*c as f64 / (k * width)),
                fmt(density),
            ])
            .map_err(ser)?;
        }
    }
    w.flush().map_err(ser)
}

/// One row per cell: posterior means and variances plus diagnostics.
pub fn write_cell_table<W: Write>(posteriors: &[CellPosterior], w: W) -> Result<()> {
    let mut w = writer(w);
    let Some(first) = posteriors.first() else {
        return w.flush().map_err(ser);
    };
    let names = first.model.param_names();
    let mut header = vec!["cell_id".to_string()];
    for n in names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_var"));
    }
    header.extend(["acceptance_rate", "min_ess", "converged", "start_converged"].map(String::from));
    w.write_record(&header).map_err(ser)?;
    for p in posteriors {
        let mut row = vec![p.cell_id.clone()];
        for d in 0..names.len() {
            row.push(fmt(p.mu[d]));
            row.push(fmt(p.var[d]));
        }
        let min_ess = p.diagnostics.ess.iter().copied().fold(f64::INFINITY, f64::min);
        row.push(fmt(p.diagnostics.acceptance_rate));
        row.push(fmt(min_ess));
        row.push(p.diagnostics.converged.to_string());
        row.push(p.start_converged.to_string());
        w.write_record(&row).map_err(ser)?;
    }
    w.flush().map_err(ser)
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Write `study.json` and every figure table into `dir`.
pub fn write_study_outputs(result: &StudyResult, single: &[SingleDrawRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("study.json");
    std::fs::write(&json_path, result.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    write_curve(result, create(dir, "curve.csv")?)?;
    write_single_draw(result, single, create(dir, "single_draw.csv")?)?;
    write_required_n(result, create(dir, "required_n.csv")?)?;
    write_histogram(result, create(dir, "histogram.csv")?)?;
    Ok(())
}
