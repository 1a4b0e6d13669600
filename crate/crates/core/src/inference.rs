//! Posterior fitted values, residuals and predictive simulation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::model::{expand_seasonal, Innovation, Model, ModelSpec, SarimaSpec};
use crate::nuts::{chain_rng, FitResult};
use crate::series::{difference_values, fourier_terms_from, undifference_values, RegressorMatrix};

/// Fitted values per retained draw (draws x n_eff): conditional means on the
/// differenced scale for SARIMA, conditional standard deviations for GARCH.
pub fn posterior_fit(fit: &FitResult) -> Result<Vec<Vec<f64>>> {
    let model = fit.model()?;
    Ok(fit
        .draws
        .unconstrained
        .par_iter()
        .map(|u| model.log_posterior_detail(u).fitted)
        .collect())
}

/// Residuals per retained draw (draws x n_eff): `z_t - fitted_t` for SARIMA,
/// standardized errors for GARCH.
pub fn posterior_residuals(fit: &FitResult) -> Result<Vec<Vec<f64>>> {
    let model = fit.model()?;
    Ok(fit
        .draws
        .unconstrained
        .par_iter()
        .map(|u| model.log_posterior_detail(u).residuals)
        .collect())
}

/// Column-wise type-7 quantile of a draws x time matrix.
pub fn column_quantile(matrix: &[Vec<f64>], p: f64) -> Vec<f64> {
    let cols = matrix.first().map_or(0, Vec::len);
    (0..cols)
        .map(|t| {
            let mut col: Vec<f64> = matrix.iter().map(|row| row[t]).collect();
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub horizon: usize,
    pub mean: f64,
    pub q5: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Simulated future observations on the original scale (draws x horizon).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub horizon: usize,
    pub draws: Vec<Vec<f64>>,
}

impl PredictiveDraws {
    pub fn summary(&self) -> Vec<ForecastRow> {
        (0..self.horizon)
            .map(|h| {
                let mut col: Vec<f64> = self.draws.iter().map(|row| row[h]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.sort_by(f64::total_cmp);
                ForecastRow {
                    horizon: h + 1,
                    mean,
                    q5: quantile_sorted(&col, 0.05),
                    q50: quantile_sorted(&col, 0.5),
                    q95: quantile_sorted(&col, 0.95),
                }
            })
            .collect()
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.summary() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_summary_csv(&self, path: &Path) -> Result<()> {
        self.write_summary_csv(std::fs::File::create(path)?)
    }

    /// Full matrix, one row per draw.
    pub fn save_draws_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record((1..=self.horizon).map(|h| format!("h{h}")))?;
        for row in &self.draws {
            out.write_record(row.iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples `h` steps of the posterior predictive distribution. Models with
/// user-supplied regressors need `future_xreg` with `h` rows; Fourier
/// regressors are extended automatically.
pub fn posterior_predict(
    fit: &FitResult,
    h: usize,
    seed: u64,
    future_xreg: Option<&RegressorMatrix>,
) -> Result<PredictiveDraws> {
    if h == 0 {
        return Err(Error::Domain("forecast horizon must be at least 1".into()));
    }
    let model = fit.model()?;
    let plan = match model.spec() {
        ModelSpec::Sarima(spec) => Plan::Sarima(SarimaPlan::new(&model, spec, h, future_xreg)?),
        ModelSpec::Garch(g) => Plan::Garch {
            arch: g.arch,
            garch: g.garch,
            student: g.innovation == Innovation::StudentT,
        },
        ModelSpec::NormalMean(m) => Plan::NormalMean { sigma: m.sigma },
        ModelSpec::Gaussian(_) => {
            return Err(Error::InvalidModel("a data-free target has no predictive distribution".into()))
        }
    };
    let draws = fit
        .draws
        .unconstrained
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = chain_rng(seed, i);
            plan.simulate(&model, u, h, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictiveDraws { horizon: h, draws })
}

enum Plan {
    Sarima(SarimaPlan),
    Garch { arch: usize, garch: usize, student: bool },
    NormalMean { sigma: f64 },
}

struct SarimaPlan {
    /// Differenced future regressor rows.
    future_rows: Vec<Vec<f64>>,
    head: Vec<f64>,
}

impl SarimaPlan {
    fn new(model: &Model, spec: &SarimaSpec, h: usize, future_xreg: Option<&RegressorMatrix>) -> Result<Self> {
        let o = &spec.order;
        let y = model.series().values();
        let n = y.len();
        let future_rows = match &spec.xreg {
            None => Vec::new(),
            Some(x) => {
                let future = match (x.fourier_k, future_xreg) {
                    (_, Some(f)) => f.clone(),
                    (Some(k), None) => fourier_terms_from(n + 1, h, o.s, k)?,
                    (None, None) => {
                        return Err(Error::MissingRegressors(format!(
                            "{} regressor columns need {h} future rows",
                            x.matrix.ncols()
                        )))
                    }
                };
                if future.nrows() < h || future.ncols() != x.matrix.ncols() {
                    return Err(Error::MissingRegressors(format!(
                        "expected {h} rows and {} columns, got {} x {}",
                        x.matrix.ncols(),
                        future.nrows(),
                        future.ncols()
                    )));
                }
                let cols: Vec<Vec<f64>> = (0..x.matrix.ncols())
                    .map(|j| {
                        let mut col = x.matrix.column(j).to_vec();
                        col.extend_from_slice(&future.column(j)[..h]);
                        difference_values(&col, o.d, o.sd, o.s).map(|d| d[d.len() - h..].to_vec())
                    })
                    .collect::<Result<_>>()?;
                (0..h).map(|t| cols.iter().map(|c| c[t]).collect()).collect()
            }
        };
        Ok(Self {
            future_rows,
            head: y[n - o.lost()..].to_vec(),
        })
    }
}

impl Plan {
    fn simulate(&self, model: &Model, u: &[f64], h: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let detail = model.log_posterior_detail(u);
        let x = &detail.constrained;
        match self {
            Plan::NormalMean { sigma } => Ok((0..h)
                .map(|_| x[0] + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()),
            Plan::Sarima(plan) => {
                let ModelSpec::Sarima(spec) = model.spec() else { unreachable!() };
                let o = &spec.order;
                let (mu0, sigma0) = (x[0], x[1]);
                let mut at = 2;
                let mut take = |k: usize| {
                    let v = x[at..at + k].to_vec();
                    at += k;
                    v
                };
                let (ar, ma, sar, sma) = (take(o.p), take(o.q), take(o.sp), take(o.sq));
                let breg = take(spec.n_reg());
                let ar_poly = expand_seasonal(&ar, &sar, o.s);
                let ma_poly = expand_seasonal(&ma, &sma, o.s);
                let dot = |row: &[f64]| row.iter().zip(&breg).map(|(a, b)| a * b).sum::<f64>();

                // regression-free history z' and errors
                let z = model.conditioned();
                let rows = model.regressor_rows();
                let mut zp: Vec<f64> = if breg.is_empty() {
                    z.to_vec()
                } else {
                    z.iter().zip(rows).map(|(v, r)| v - dot(r)).collect()
                };
                let mut eps = detail.residuals;
                let n = zp.len();
                let mut future = Vec::with_capacity(h);
                for step in 0..h {
                    let t = n + step;
                    let mut mu = mu0;
                    for &(lag, c) in &ar_poly {
                        if lag <= t {
                            mu += c * zp[t - lag];
                        }
                    }
                    for &(lag, c) in &ma_poly {
                        if lag <= t {
                            mu -= c * eps[t - lag];
                        }
                    }
                    let e = sigma0 * rng.sample::<f64, _>(StandardNormal);
                    zp.push(mu + e);
                    eps.push(e);
                    let reg = if breg.is_empty() { 0.0 } else { dot(&plan.future_rows[step]) };
                    future.push(mu + e + reg);
                }
                let full = undifference_values(&future, o.d, o.sd, o.s, &plan.head)?;
                Ok(full[plan.head.len()..].to_vec())
            }
            Plan::Garch { arch, garch, student } => {
                let (mu0, omega) = (x[0], x[1]);
                let alpha = &x[2..2 + arch];
                let beta = &x[2 + arch..2 + arch + garch];
                let t_dist = if *student {
                    let v = x[2 + arch + garch];
                    Some((StudentT::new(v).map_err(|e| Error::Domain(e.to_string()))?, ((v - 2.0) / v).sqrt()))
                } else {
                    None
                };
                let mut s2: Vec<f64> = detail.fitted.iter().map(|s| s * s).collect();
                let mut e2: Vec<f64> = detail
                    .residuals
                    .iter()
                    .zip(&detail.fitted)
                    .map(|(r, s)| (r * s).powi(2))
                    .collect();
                let pre = model.presample_variance();
                let mut out = Vec::with_capacity(h);
                for _ in 0..h {
                    let t = s2.len();
                    let mut var = omega;
                    for (i, a) in alpha.iter().enumerate() {
                        var += a * if t > i { e2[t - i - 1] } else { pre };
                    }
                    for (j, b) in beta.iter().enumerate() {
                        var += b * if t > j { s2[t - j - 1] } else { pre };
                    }
                    let eta = match &t_dist {
                        Some((dist, scale)) => dist.sample(rng) * scale,
                        None => rng.sample(StandardNormal),
                    };
                    let e = var.sqrt() * eta;
                    s2.push(var);
                    e2.push(e * e);
                    out.push(mu0 + e);
                }
                Ok(out)
            }
        }
    }
}
