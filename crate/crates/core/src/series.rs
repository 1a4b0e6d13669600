//! Univariate series containers, differencing, Fourier regressors and
//! sample autocorrelations.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An observed univariate series with its seasonal period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    frequency: usize,
    start_index: i64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, frequency: usize) -> Result<Self> {
        Self::with_start(values, frequency, 1)
    }

    pub fn with_start(values: Vec<f64>, frequency: usize, start_index: i64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("a series needs at least one value".into()));
        }
        if frequency == 0 {
            return Err(Error::Domain("frequency must be at least 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at position {i}")));
        }
        Ok(Self {
            values,
            frequency,
            start_index,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frequency(&self) -> usize {
        self.frequency
    }

    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Unbiased sample variance; zero for a single observation.
    pub fn variance(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
    }
}

/// Regressors aligned with a series, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorMatrix {
    columns: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl RegressorMatrix {
    pub fn new(columns: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if columns.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} columns but {} labels",
                columns.len(),
                labels.len()
            )));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Dimension("regressor columns differ in length".into()));
            }
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("regressor entries must be finite".into()));
        }
        Ok(Self { columns, labels })
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    /// Applies the same seasonal and ordinary differencing to every column.
    pub fn difference(&self, d: usize, seasonal_d: usize, s: usize) -> Result<Self> {
        let columns = self
            .columns
            .iter()
            .map(|c| difference_values(c, d, seasonal_d, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            columns,
            labels: self.labels.clone(),
        })
    }
}

fn lag_difference(x: &[f64], lag: usize) -> Vec<f64> {
    x.iter().skip(lag).zip(x).map(|(a, b)| a - b).collect()
}

fn difference_stages(d: usize, seasonal_d: usize, s: usize) -> Vec<usize> {
    std::iter::repeat(s)
        .take(seasonal_d)
        .chain(std::iter::repeat(1).take(d))
        .collect()
}

pub(crate) fn difference_values(
    x: &[f64],
    d: usize,
    seasonal_d: usize,
    s: usize,
) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::Domain("seasonal period must be positive".into()));
    }
    let lost = d + seasonal_d * s;
    if lost >= x.len() {
        return Err(Error::Dimension(format!(
            "cannot take d={d}, D={seasonal_d} (s={s}) differences of {} values",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    for lag in difference_stages(d, seasonal_d, s) {
        out = lag_difference(&out, lag);
    }
    Ok(out)
}

/// Returns `(1-B)^d (1-B^s)^D y`. Seasonal differences are applied first.
pub fn difference(y: &TimeSeries, d: usize, seasonal_d: usize, s: usize) -> Result<TimeSeries> {
    let values = difference_values(&y.values, d, seasonal_d, s)?;
    Ok(TimeSeries {
        values,
        frequency: y.frequency,
        start_index: y.start_index + (d + seasonal_d * s) as i64,
    })
}

pub(crate) fn undifference_values(
    dy: &[f64],
    d: usize,
    seasonal_d: usize,
    s: usize,
    head: &[f64],
) -> Result<Vec<f64>> {
    let lost = d + seasonal_d * s;
    if head.len() != lost {
        return Err(Error::Dimension(format!(
            "undifferencing needs {lost} head values, got {}",
            head.len()
        )));
    }
    let stages = difference_stages(d, seasonal_d, s);
    // Head seen at the input of every stage.
    let mut heads = Vec::with_capacity(stages.len());
    let mut h = head.to_vec();
    for &lag in &stages {
        let next = lag_difference(&h, lag);
        heads.push(h);
        h = next;
    }
    let mut out = dy.to_vec();
    for (&lag, stage_head) in stages.iter().zip(&heads).rev() {
        let mut x = stage_head[..lag].to_vec();
        x.reserve(out.len());
        for (t, v) in out.iter().enumerate() {
            let prev = x[t];
            x.push(v + prev);
        }
        out = x;
    }
    out[..lost].copy_from_slice(head);
    Ok(out)
}

/// Inverts [`difference`]: `head` holds the `d + D*s` original-scale values
/// preceding the first differenced value. The result starts with `head`.
pub fn undifference(
    dy: &TimeSeries,
    d: usize,
    seasonal_d: usize,
    s: usize,
    head: &[f64],
) -> Result<TimeSeries> {
    let values = undifference_values(&dy.values, d, seasonal_d, s, head)?;
    Ok(TimeSeries {
        values,
        frequency: dy.frequency,
        start_index: dy.start_index - head.len() as i64,
    })
}

/// Fourier regressors `sin(2πkt/s), cos(2πkt/s)` for `k = 1..=k_max` and
/// `t = 1..=n`.
pub fn fourier_terms(n: usize, s: usize, k_max: usize) -> Result<RegressorMatrix> {
    fourier_terms_from(1, n, s, k_max)
}

/// Fourier regressors for `t = first..first + n`, continuing the phase used
/// in-sample.
pub fn fourier_terms_from(first: usize, n: usize, s: usize, k_max: usize) -> Result<RegressorMatrix> {
    if n == 0 || s == 0 || k_max == 0 {
        return Err(Error::Domain("n, s and K must be positive".into()));
    }
    if 2 * k_max > s {
        return Err(Error::Domain(format!(
            "2K = {} exceeds the seasonal period {s}",
            2 * k_max
        )));
    }
    let mut columns = Vec::with_capacity(2 * k_max);
    let mut labels = Vec::with_capacity(2 * k_max);
    for k in 1..=k_max {
        let angle = |t: usize| 2.0 * PI * (k * t) as f64 / s as f64;
        columns.push((first..first + n).map(|t| angle(t).sin()).collect());
        columns.push((first..first + n).map(|t| angle(t).cos()).collect());
        labels.push(format!("S{k}-{s}"));
        labels.push(format!("C{k}-{s}"));
    }
    RegressorMatrix::new(columns, labels)
}

/// Sample autocorrelations for lags `0..=max_lag`, biased (denominator n).
pub fn acf(y: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = y.len();
    if max_lag >= n {
        return Err(Error::Dimension(format!(
            "max_lag {max_lag} must be below the series length {n}"
        )));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let c0: f64 = centered.iter().map(|v| v * v).sum();
    if c0 <= 0.0 || !c0.is_finite() {
        return Err(Error::UndefinedCorrelation(
            "series has zero variance".into(),
        ));
    }
    Ok((0..=max_lag)
        .map(|k| {
            let ck: f64 = centered[k..]
                .iter()
                .zip(&centered)
                .map(|(a, b)| a * b)
                .sum();
            ck / c0
        })
        .collect())
}

/// Partial autocorrelations via Durbin–Levinson, indexed by lag like
/// [`acf`] (entry 0 is 1).
pub fn pacf(y: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let rho = acf(y, max_lag)?;
    let mut out = vec![1.0; max_lag + 1];
    let mut phi: Vec<f64> = Vec::with_capacity(max_lag);
    for k in 1..=max_lag {
        let phikk = if k == 1 {
            rho[1]
        } else {
            let num = rho[k] - (1..k).map(|j| phi[j - 1] * rho[k - j]).sum::<f64>();
            let den = 1.0 - (1..k).map(|j| phi[j - 1] * rho[j]).sum::<f64>();
            num / den
        };
        let prev = phi.clone();
        for j in 1..k {
            phi[j - 1] = prev[j - 1] - phikk * prev[k - j - 1];
        }
        phi.push(phikk);
        out[k] = phikk;
    }
    Ok(out)
}

/// Column selector for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

/// Reads one numeric column of a CSV file. Rows are numbered from 1 in
/// error messages, counting the header line when present.
pub fn load_csv(
    path: impl AsRef<Path>,
    column: &Column,
    frequency: usize,
    has_header: bool,
) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let idx = match column {
        Column::Index(i) => *i,
        Column::Name(name) => {
            if !has_header {
                return Err(Error::Parse(format!(
                    "column `{name}` selected by name but the file has no header"
                )));
            }
            reader
                .headers()?
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("no column named `{name}` in {}", path.display())))?
        }
    };
    let offset = usize::from(has_header) + 1;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + offset;
        let field = record.get(idx).ok_or_else(|| Error::BadRow {
            row,
            message: format!("missing column {idx}"),
        })?;
        let v: f64 = field.parse().map_err(|_| Error::BadRow {
            row,
            message: format!("`{field}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::BadRow {
                row,
                message: format!("`{field}` is not finite"),
            });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::Parse(format!("{} contains no data rows", path.display())));
    }
    TimeSeries::new(values, frequency)
}
