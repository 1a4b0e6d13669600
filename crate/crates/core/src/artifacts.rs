//! Fit directories: a fitted model persisted as CSV and JSON files that can
//! be loaded back into a [`FitResult`].
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! reloaded fit reproduces the in-memory draws exactly and fixed-seed runs
//! produce byte-identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auto_order::SearchResult;
use crate::diagnostics::summarize;
use crate::error::{Error, Result};
use crate::inference::{column_quantile, posterior_fit, posterior_residuals};
use crate::model::ModelSpec;
use crate::nuts::{DrawsMatrix, FitResult, SamplerConfig, SamplerReport};
use crate::series::{acf, pacf, TimeSeries};

pub const MODEL_FILE: &str = "model.json";
pub const DRAWS_FILE: &str = "draws.csv";
pub const UNCONSTRAINED_FILE: &str = "unconstrained.csv";
pub const LOGLIK_FILE: &str = "loglik.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_TEXT_FILE: &str = "summary.txt";
pub const SUMMARY_CSV_FILE: &str = "summary.csv";
pub const FITTED_FILE: &str = "fitted.csv";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const PLOT_SERIES_FILE: &str = "plot_series.csv";
pub const PLOT_ACF_FILE: &str = "plot_acf.csv";
pub const SEARCH_TRACE_FILE: &str = "search_trace.csv";

/// Lags shown in the residual correlogram.
const PLOT_LAGS: usize = 24;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    spec: ModelSpec,
    series: TimeSeries,
    config: SamplerConfig,
    names: Vec<String>,
    chains: usize,
    iterations: usize,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_table<W: Write>(w: W, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `chain,iter,<columns>` rows for a chain-major matrix.
fn write_draw_table<W: Write>(w: W, columns: &[String], rows: &[Vec<f64>], iterations: usize) -> Result<()> {
    let header: Vec<String> = ["chain".to_string(), "iter".to_string()]
        .into_iter()
        .chain(columns.iter().cloned())
        .collect();
    let body = rows.iter().enumerate().map(|(i, row)| {
        let mut rec = vec![(i / iterations + 1).to_string(), (i % iterations + 1).to_string()];
        rec.extend(row.iter().map(|v| num(*v)));
        rec
    });
    write_table(w, &header, body)
}

/// Writes the constrained draws as `chain,iter,<parameters>`.
pub fn write_draws_csv<W: Write>(w: W, draws: &DrawsMatrix) -> Result<()> {
    write_draw_table(w, &draws.names, &draws.constrained, draws.iterations.max(1))
}

fn quantile_rows(matrix: &[Vec<f64>]) -> Vec<Vec<String>> {
    let mean: Vec<f64> = {
        let cols = matrix.first().map_or(0, Vec::len);
        (0..cols)
            .map(|t| matrix.iter().map(|r| r[t]).sum::<f64>() / matrix.len() as f64)
            .collect()
    };
    let q = |p| column_quantile(matrix, p);
    let (q5, q50, q95) = (q(0.05), q(0.5), q(0.95));
    (0..mean.len())
        .map(|t| vec![(t + 1).to_string(), num(mean[t]), num(q5[t]), num(q50[t]), num(q95[t])])
        .collect()
}

/// Saves every artifact of a fit into `dir`, creating it if needed.
pub fn save_fit(fit: &FitResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d = &fit.draws;
    let model = fit.model()?;
    let meta = ModelFile {
        spec: fit.spec.clone(),
        series: fit.series.clone(),
        config: fit.config.clone(),
        names: d.names.clone(),
        chains: d.chains,
        iterations: d.iterations,
    };
    let mut w = create(dir, MODEL_FILE)?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    writeln!(w)?;
    w.flush()?;

    let iters = d.iterations.max(1);
    write_draws_csv(create(dir, DRAWS_FILE)?, d)?;
    let with_lp: Vec<Vec<f64>> = d
        .unconstrained
        .iter()
        .zip(&d.lp)
        .map(|(u, lp)| std::iter::once(*lp).chain(u.iter().copied()).collect())
        .collect();
    let mut lp_names = vec!["lp__".to_string()];
    lp_names.extend(d.names.iter().cloned());
    write_draw_table(create(dir, UNCONSTRAINED_FILE)?, &lp_names, &with_lp, iters)?;
    let n_obs = d.log_lik.first().map_or(0, Vec::len);
    let ll_names: Vec<String> = (1..=n_obs).map(|i| format!("log_lik[{i}]")).collect();
    write_draw_table(create(dir, LOGLIK_FILE)?, &ll_names, &d.log_lik, iters)?;

    let mut w = create(dir, REPORT_FILE)?;
    serde_json::to_writer_pretty(&mut w, &fit.report)?;
    writeln!(w)?;
    w.flush()?;

    let summary = summarize(fit);
    summary.write_csv(create(dir, SUMMARY_CSV_FILE)?)?;
    let mut w = create(dir, SUMMARY_TEXT_FILE)?;
    write!(w, "{model}\n{summary}\n{}\n", fit.footer())?;
    w.flush()?;

    let qheader: Vec<String> = ["t", "mean", "q5", "q50", "q95"].iter().map(|s| s.to_string()).collect();
    let fitted = posterior_fit(fit)?;
    let residuals = posterior_residuals(fit)?;
    write_table(create(dir, FITTED_FILE)?, &qheader, quantile_rows(&fitted).into_iter())?;
    write_table(create(dir, RESIDUALS_FILE)?, &qheader, quantile_rows(&residuals).into_iter())?;
    write_plot_data(fit, dir, &column_quantile(&fitted, 0.5), &column_quantile(&residuals, 0.5))
}

/// Series and correlogram data behind the standard diagnostic plots. Fitted
/// values and residuals live on the conditioned (differenced) scale, so they
/// are aligned to the last `n_eff` observations.
fn write_plot_data(fit: &FitResult, dir: &Path, fitted: &[f64], residuals: &[f64]) -> Result<()> {
    let y = fit.series.values();
    let offset = y.len() - residuals.len();
    let header: Vec<String> = ["t", "y", "fitted_median", "residual_median"].iter().map(|s| s.to_string()).collect();
    let rows = y.iter().enumerate().map(|(t, v)| {
        let aligned = |xs: &[f64]| if t >= offset { num(xs[t - offset]) } else { String::new() };
        vec![(t + 1).to_string(), num(*v), aligned(fitted), aligned(residuals)]
    });
    write_table(create(dir, PLOT_SERIES_FILE)?, &header, rows)?;

    let lags = PLOT_LAGS.min(residuals.len().saturating_sub(1));
    let header: Vec<String> = ["lag", "acf", "pacf", "bound"].iter().map(|s| s.to_string()).collect();
    let bound = 2.0 / (residuals.len() as f64).sqrt();
    let rows: Vec<Vec<String>> = match (acf(residuals, lags), pacf(residuals, lags)) {
        (Ok(a), Ok(p)) => (1..=lags)
            .map(|k| vec![k.to_string(), num(a[k]), num(p[k]), num(bound)])
            .collect(),
        _ => Vec::new(),
    };
    write_table(create(dir, PLOT_ACF_FILE)?, &header, rows.into_iter())
}

/// Saves the candidate log of an order search.
pub fn save_search_trace(search: &SearchResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    search.write_csv(create(dir, SEARCH_TRACE_FILE)?)
}

/// Reads a `chain,iter,...` table, checking the header and row count.
fn read_draw_table(path: &Path, expect: &[String], rows: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() != expect.len() + 2 || header[2..] != *expect {
        return Err(Error::Parse(format!(
            "{}: unexpected columns {:?}",
            path.display(),
            &header[2.min(header.len())..]
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::BadRow { row: i + 2, message: format!("{}: {e}", path.display()) })?;
        out.push(vals);
    }
    if out.len() != rows {
        return Err(Error::Parse(format!("{}: {} rows, expected {rows}", path.display(), out.len())));
    }
    Ok(out)
}

/// Loads a fit directory written by [`save_fit`].
pub fn load_fit(dir: &Path) -> Result<FitResult> {
    let meta: ModelFile = serde_json::from_reader(File::open(dir.join(MODEL_FILE))?)?;
    let report: SamplerReport = serde_json::from_reader(File::open(dir.join(REPORT_FILE))?)?;
    let rows = meta.chains * meta.iterations;
    let constrained = read_draw_table(&dir.join(DRAWS_FILE), &meta.names, rows)?;
    let mut lp_names = vec!["lp__".to_string()];
    lp_names.extend(meta.names.iter().cloned());
    let with_lp = read_draw_table(&dir.join(UNCONSTRAINED_FILE), &lp_names, rows)?;
    let lp = with_lp.iter().map(|r| r[0]).collect();
    let unconstrained = with_lp.into_iter().map(|r| r[1..].to_vec()).collect();
    let fit = FitResult {
        spec: meta.spec,
        series: meta.series,
        config: meta.config,
        draws: DrawsMatrix {
            names: meta.names,
            chains: meta.chains,
            iterations: meta.iterations,
            constrained,
            unconstrained,
            log_lik: Vec::new(),
            lp,
        },
        report,
    };
    let n_obs = fit.model()?.n_effective();
    let ll_names: Vec<String> = (1..=n_obs).map(|i| format!("log_lik[{i}]")).collect();
    let log_lik = read_draw_table(&dir.join(LOGLIK_FILE), &ll_names, rows)?;
    Ok(FitResult { draws: DrawsMatrix { log_lik, ..fit.draws }, ..fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, SarimaOrder};
    use crate::nuts::{chain_rng, sample};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ar1_fit(seed: u64) -> FitResult {
        let mut rng = chain_rng(7, 3);
        let mut y = vec![0.0; 80];
        for t in 1..80 {
            y[t] = 0.5 * y[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let model = Model::new(ModelSpec::sarima(SarimaOrder::arima(1, 0, 0)), TimeSeries::new(y, 1).unwrap()).unwrap();
        let cfg = SamplerConfig::default().with_iter(200).with_chains(2).with_seed(seed);
        sample(&model, &cfg).unwrap()
    }

    #[test]
    fn fit_directory_round_trips() {
        let fit = ar1_fit(1);
        let dir = tempfile::tempdir().unwrap();
        save_fit(&fit, dir.path()).unwrap();
        for f in [
            MODEL_FILE,
            DRAWS_FILE,
            UNCONSTRAINED_FILE,
            LOGLIK_FILE,
            REPORT_FILE,
            SUMMARY_TEXT_FILE,
            SUMMARY_CSV_FILE,
            FITTED_FILE,
            RESIDUALS_FILE,
            PLOT_SERIES_FILE,
            PLOT_ACF_FILE,
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let back = load_fit(dir.path()).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_fit(&ar1_fit(5), a.path()).unwrap();
        save_fit(&ar1_fit(5), b.path()).unwrap();
        for f in [DRAWS_FILE, SUMMARY_CSV_FILE, SUMMARY_TEXT_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn draws_csv_layout() {
        let fit = ar1_fit(2);
        let mut buf = Vec::new();
        write_draws_csv(&mut buf, &fit.draws).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "chain,iter,mu0,sigma0,ar[1]");
        assert!(lines.next().unwrap().starts_with("1,1,"));
        assert!(text.lines().last().unwrap().starts_with("2,100,"));
    }

    #[test]
    fn summary_text_has_header_and_footer() {
        let dir = tempfile::tempdir().unwrap();
        save_fit(&ar1_fit(3), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(SUMMARY_TEXT_FILE)).unwrap();
        assert!(text.starts_with("y ~ Sarima(1,0,0)(0,0,0)[1]"), "{text}");
        assert!(text.contains("Samples were drawn using sampling(NUTS)"));
    }

    #[test]
    fn tampered_directory_is_rejected() {
        let fit = ar1_fit(4);
        let dir = tempfile::tempdir().unwrap();
        save_fit(&fit, dir.path()).unwrap();
        let path = dir.path().join(DRAWS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        fs::write(&path, truncated).unwrap();
        assert!(matches!(load_fit(dir.path()), Err(Error::Parse(_))));
        assert!(load_fit(&dir.path().join("missing")).is_err());
    }
}
