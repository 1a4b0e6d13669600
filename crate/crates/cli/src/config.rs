//! JSON run configuration for `tsbayes fit`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tsbayes::model::{Innovation, ModelSpec, SarimaOrder, SarimaSpec, Xreg};
use tsbayes::nuts::SamplerConfig;
use tsbayes::series::{load_csv, Column, RegressorMatrix, TimeSeries};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Prior overrides such as `"ar[1] ~ normal(0, 0.5)"`.
    #[serde(default)]
    pub priors: Vec<String>,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV path, relative to the config file.
    pub path: PathBuf,
    #[serde(default = "default_column")]
    pub column: Column,
    #[serde(default = "default_frequency")]
    pub frequency: usize,
    #[serde(default = "default_true")]
    pub header: bool,
}

fn default_column() -> Column {
    Column::Index(0)
}

fn default_frequency() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Sarima {
        /// `[p, d, q]`.
        order: [usize; 3],
        /// `[P, D, Q]`.
        #[serde(default)]
        seasonal: [usize; 3],
        /// Seasonal period; defaults to the data frequency.
        #[serde(default)]
        period: Option<usize>,
        /// Number of Fourier harmonics used as regressors.
        #[serde(default)]
        fourier: Option<usize>,
        #[serde(default)]
        xreg: Option<XregConfig>,
    },
    Garch {
        arch: usize,
        #[serde(default)]
        garch: usize,
        #[serde(default = "default_innovation")]
        innovation: Innovation,
    },
}

fn default_innovation() -> Innovation {
    Innovation::Normal
}

/// Named regressor columns read from a CSV with a header row.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XregConfig {
    pub path: PathBuf,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub chains: Option<usize>,
    pub iter: Option<usize>,
    pub warmup: Option<usize>,
    pub adapt_delta: Option<f64>,
    pub max_treedepth: Option<usize>,
    pub seed: Option<u64>,
}

/// Command-line overrides of the sampler block.
#[derive(Debug, Clone, Default)]
pub struct SamplerOverrides {
    pub chains: Option<usize>,
    pub iter: Option<usize>,
    pub warmup: Option<usize>,
    pub adapt_delta: Option<f64>,
    pub seed: Option<u64>,
}

impl SamplerBlock {
    /// Merges file values, flag overrides and `TSBAYES_THREADS`. Warmup
    /// defaults to half of `iter`.
    pub fn resolve(&self, flags: &SamplerOverrides, threads: Option<usize>) -> Result<SamplerConfig, CliError> {
        let base = SamplerConfig::default();
        let iter = flags.iter.or(self.iter).unwrap_or(base.iter);
        let cfg = SamplerConfig {
            chains: flags.chains.or(self.chains).unwrap_or(base.chains),
            iter,
            warmup: flags.warmup.or(self.warmup).unwrap_or(iter / 2),
            adapt_delta: flags.adapt_delta.or(self.adapt_delta).unwrap_or(base.adapt_delta),
            max_treedepth: self.max_treedepth.unwrap_or(base.max_treedepth),
            seed: flags.seed.or(self.seed).unwrap_or(base.seed),
            threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads `TSBAYES_THREADS`; unset means no cap.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("TSBAYES_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("TSBAYES_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn series(&self, base: &Path) -> Result<TimeSeries, CliError> {
        let path = base.join(&self.data.path);
        if !path.is_file() {
            return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
        }
        Ok(load_csv(&path, &self.data.column, self.data.frequency, self.data.header)?)
    }

    /// Builds the model spec with prior overrides applied.
    pub fn model_spec(&self, base: &Path, y: &TimeSeries) -> Result<ModelSpec, CliError> {
        let spec = match &self.model {
            ModelConfig::Sarima { order, seasonal, period, fourier, xreg } => {
                let s = period.unwrap_or(self.data.frequency);
                let order = SarimaOrder::new(order[0], order[1], order[2], seasonal[0], seasonal[1], seasonal[2], s);
                let xreg = match (fourier, xreg) {
                    (Some(_), Some(_)) => {
                        return Err(CliError::Usage("use either `fourier` or `xreg`, not both".into()))
                    }
                    (Some(k), None) => Some(Xreg::fourier(y.len(), s, *k)?),
                    (None, Some(x)) => Some(Xreg::matrix(read_regressors(&base.join(&x.path), &x.columns)?)),
                    (None, None) => None,
                };
                ModelSpec::Sarima(SarimaSpec::new(order, xreg))
            }
            ModelConfig::Garch { arch, garch, innovation } => ModelSpec::garch(*arch, *garch, *innovation),
        };
        let priors = spec.priors().expect("time-series specs carry priors").apply_overrides(&self.priors)?;
        Ok(spec.with_priors(priors)?)
    }
}

/// Reads named numeric columns from a CSV with a header row.
pub fn read_regressors(path: &Path, columns: &[String]) -> Result<RegressorMatrix, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("regressor file {} does not exist", path.display())));
    }
    let cols = columns
        .iter()
        .map(|c| load_csv(path, &Column::Name(c.clone()), 1, true).map(|ts| ts.values().to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RegressorMatrix::new(cols, columns.to_vec())?)
}
