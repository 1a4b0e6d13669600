//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tracing::info;
use tsbayes::artifacts::{load_fit, save_fit, save_search_trace};
use tsbayes::auto_order::auto_sarima;
use tsbayes::diagnostics::summarize;
use tsbayes::inference::posterior_predict;
use tsbayes::model::{Model, ModelSpec};
use tsbayes::nuts::{sample, FitResult};
use tsbayes::selection::{aic, aicc, bayes_factor, bayes_factor_line, bic, loo_compare, psis_loo, waic};
use tsbayes::series::{load_csv, Column};

use crate::config::{read_regressors, threads_from_env, RunConfig, SamplerOverrides};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Loo,
    Waic,
    Bic,
    Bf,
}

/// Prints the summary block and the divergence warning, then saves the fit.
fn finish_fit(fit: &FitResult, out: &Path) -> Result<(), CliError> {
    let model = fit.model()?;
    println!("{model}\n{}\n{}", summarize(fit), fit.footer());
    let div = fit.report.total_divergences();
    if div > 0 {
        eprintln!(
            "WARNING: {div} divergent transitions after warmup; results may be biased. Try a larger --adapt-delta."
        );
    }
    save_fit(fit, out)?;
    info!("artifacts written to {}", out.display());
    Ok(())
}

pub fn fit(config: &Path, flags: &SamplerOverrides, out: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, base) = RunConfig::load(config)?;
    let y = cfg.series(&base)?;
    let spec = cfg.model_spec(&base, &y)?;
    let sampler = cfg.sampler.resolve(flags, threads_from_env()?)?;
    let out = out
        .or_else(|| cfg.output.as_ref().map(|o| base.join(o)))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `output` in the config".into()))?;
    let model = Model::new(spec, y)?;
    let fit = sample(&model, &sampler)?;
    finish_fit(&fit, &out)
}

pub struct AutoArgs {
    pub data: PathBuf,
    pub column: Column,
    pub frequency: usize,
    pub header: bool,
    pub out: PathBuf,
    pub trace: bool,
}

pub fn auto(args: &AutoArgs, flags: &SamplerOverrides) -> Result<(), CliError> {
    if !args.data.is_file() {
        return Err(CliError::Usage(format!("data file {} does not exist", args.data.display())));
    }
    let y = load_csv(&args.data, &args.column, args.frequency, args.header)?;
    let sampler = crate::config::SamplerBlock::default().resolve(flags, threads_from_env()?)?;
    let result = auto_sarima(&y, args.frequency, &sampler)?;
    finish_fit(&result.fit, &args.out)?;
    save_search_trace(&result.search, &args.out)?;
    if args.trace {
        result.search.write_csv(std::io::stdout().lock())?;
    }
    Ok(())
}

pub struct ForecastArgs {
    pub fit_dir: PathBuf,
    pub horizon: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub draws: bool,
    pub future_xreg: Option<PathBuf>,
}

pub fn forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let fit = load_dir(&args.fit_dir)?;
    let future = match (&args.future_xreg, &fit.spec) {
        (Some(path), ModelSpec::Sarima(s)) => {
            let labels = s.xreg.as_ref().map(|x| x.matrix.labels().to_vec()).unwrap_or_default();
            Some(read_regressors(path, &labels)?)
        }
        (Some(_), _) => return Err(CliError::Usage("--future-xreg applies to SARIMA fits only".into())),
        (None, _) => None,
    };
    let seed = args.seed.unwrap_or(fit.config.seed);
    let pred = posterior_predict(&fit, args.horizon, seed, future.as_ref())?;
    std::fs::create_dir_all(&args.out).map_err(tsbayes::Error::from)?;
    pred.save_summary_csv(&args.out.join("forecast.csv"))?;
    if args.draws {
        pred.save_draws_csv(&args.out.join("forecast_draws.csv"))?;
    }
    println!("{:>4} {:>12} {:>12} {:>12} {:>12}", "h", "mean", "q5", "q50", "q95");
    for r in pred.summary() {
        println!("{:>4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}", r.horizon, r.mean, r.q5, r.q50, r.q95);
    }
    Ok(())
}

fn load_dir(dir: &Path) -> Result<FitResult, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("fit directory {} does not exist", dir.display())));
    }
    Ok(load_fit(dir)?)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Renders the comparison for `method`; the caller prints it.
pub fn compare(dirs: &[PathBuf], method: Method) -> Result<String, CliError> {
    if method == Method::Bf && dirs.len() != 2 {
        return Err(CliError::Usage(format!("--method bf needs exactly two fits, got {}", dirs.len())));
    }
    if dirs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two fit directories".into()));
    }
    let fits = dirs.iter().map(|d| load_dir(d)).collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = dirs.iter().map(|d| dir_name(d)).collect();
    let n_eff = |f: &FitResult| f.draws.log_lik.first().map_or(0, Vec::len);
    let mut out = String::new();
    match method {
        Method::Loo => {
            let loos = fits.iter().map(psis_loo).collect::<Result<Vec<_>, _>>()?;
            let pairs: Vec<(&str, _)> = names.iter().map(String::as_str).zip(&loos).collect();
            write!(out, "{}", loo_compare(&pairs)?).ok();
        }
        Method::Waic => {
            check_same_length(&fits, &names, n_eff)?;
            let ws = fits.iter().map(waic).collect::<Result<Vec<_>, _>>()?;
            let mut order: Vec<usize> = (0..ws.len()).collect();
            order.sort_by(|&a, &b| ws[b].elpd_waic.total_cmp(&ws[a].elpd_waic));
            let best = &ws[order[0]];
            let width = names.iter().map(String::len).max().unwrap_or(0).max(5);
            writeln!(
                out,
                "{:w$} {:>10} {:>8} {:>10} {:>8} {:>8} {:>10}",
                "model", "elpd_diff", "se_diff", "elpd_waic", "se", "p_waic", "waic",
                w = width
            )
            .ok();
            for i in order {
                let diff: Vec<f64> = ws[i].pointwise_elpd.iter().zip(&best.pointwise_elpd).map(|(a, b)| a - b).collect();
                let n = diff.len() as f64;
                let mean = diff.iter().sum::<f64>() / n;
                let se = (n * diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let w = &ws[i];
                writeln!(
                    out,
                    "{:w$} {:>10.1} {:>8.1} {:>10.1} {:>8.1} {:>8.1} {:>10.1}",
                    names[i],
                    n * mean,
                    se,
                    w.elpd_waic,
                    w.se_elpd_waic,
                    w.p_waic,
                    w.waic,
                    w = width
                )
                .ok();
            }
        }
        Method::Bic => {
            check_same_length(&fits, &names, n_eff)?;
            let mut rows = fits
                .iter()
                .zip(&names)
                .map(|(f, n)| Ok((n.as_str(), aic(f)?, aicc(f)?, bic(f)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            rows.sort_by(|a, b| a.3.total_cmp(&b.3));
            let width = names.iter().map(String::len).max().unwrap_or(0).max(5);
            writeln!(out, "{:w$} {:>12} {:>12} {:>12}", "model", "aic", "aicc", "bic", w = width).ok();
            for (n, a, c, b) in rows {
                writeln!(out, "{n:width$} {a:>12.3} {c:>12.3} {b:>12.3}").ok();
            }
        }
        Method::Bf => {
            let lbf = bayes_factor(&fits[0], &fits[1], true)?;
            writeln!(out, "{}", bayes_factor_line(&names[0], &names[1], lbf)).ok();
        }
    }
    Ok(out)
}

fn check_same_length(fits: &[FitResult], names: &[String], n_eff: impl Fn(&FitResult) -> usize) -> Result<(), CliError> {
    let n = n_eff(&fits[0]);
    if let Some((f, name)) = fits.iter().zip(names).find(|(f, _)| n_eff(f) != n) {
        return Err(tsbayes::Error::Incomparable(format!(
            "`{name}` has {} observations, `{}` has {n}",
            n_eff(f),
            names[0]
        ))
        .into());
    }
    Ok(())
}
