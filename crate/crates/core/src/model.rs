//! Model specifications, parameter layout, domain transforms and the
//! log posterior of SARIMA, dynamic regression and GARCH models.
//!
//! The SARIMA likelihood is conditional (CSS style): pre-sample differenced
//! values and errors are zero. GARCH starts its variance recursion from the
//! sample variance of the series. Student-t GARCH innovations use the
//! analytic marginal over the latent inverse-gamma scale mixing variable,
//! a scaled t with variance `sigma_t^2`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::autodiff::{Objective, Real};
use crate::error::{Error, Result};
use crate::priors::{default_priors, normal_lpdf, Domain, ParamKind, ParamName, PriorSet, PriorSpec};
use crate::series::{difference_values, fourier_terms, RegressorMatrix, TimeSeries};

/// Differenced regressor values below this fraction of the column's scale
/// are treated as rounding residue.
const CANCELLATION_TOL: f64 = 1e-9;

/// Orders of a multiplicative seasonal ARIMA model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SarimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    #[serde(rename = "P")]
    pub sp: usize,
    #[serde(rename = "D")]
    pub sd: usize,
    #[serde(rename = "Q")]
    pub sq: usize,
    pub s: usize,
}

impl SarimaOrder {
    pub fn new(p: usize, d: usize, q: usize, sp: usize, sd: usize, sq: usize, s: usize) -> Self {
        Self { p, d, q, sp, sd, sq, s }
    }

    pub fn arima(p: usize, d: usize, q: usize) -> Self {
        Self::new(p, d, q, 0, 0, 0, 1)
    }

    /// Observations lost to differencing.
    pub fn lost(&self) -> usize {
        self.d + self.sd * self.s
    }

    pub fn is_seasonal(&self) -> bool {
        self.sp + self.sd + self.sq > 0
    }
}

impl fmt::Display for SarimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Sarima({},{},{})({},{},{})[{}]",
            self.p, self.d, self.q, self.sp, self.sd, self.sq, self.s
        )
    }
}

/// Regressors of a dynamic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Xreg {
    pub matrix: RegressorMatrix,
    /// Set when the columns are Fourier terms, which can be extended into
    /// the future without user input.
    pub fourier_k: Option<usize>,
}

impl Xreg {
    pub fn fourier(n: usize, s: usize, k: usize) -> Result<Self> {
        Ok(Self {
            matrix: fourier_terms(n, s, k)?,
            fourier_k: Some(k),
        })
    }

    pub fn matrix(matrix: RegressorMatrix) -> Self {
        Self {
            matrix,
            fourier_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarimaSpec {
    pub order: SarimaOrder,
    pub xreg: Option<Xreg>,
    pub priors: PriorSet,
}

impl SarimaSpec {
    /// Spec with default priors.
    pub fn new(order: SarimaOrder, xreg: Option<Xreg>) -> Self {
        let layout = sarima_layout(&order, xreg.as_ref().map_or(0, |x| x.matrix.ncols()));
        Self {
            order,
            xreg,
            priors: default_priors(&layout),
        }
    }

    pub fn n_reg(&self) -> usize {
        self.xreg.as_ref().map_or(0, |x| x.matrix.ncols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Innovation {
    Normal,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchSpec {
    /// ARCH order (lags of squared errors), at least 1.
    pub arch: usize,
    /// GARCH order (lags of the conditional variance).
    pub garch: usize,
    pub innovation: Innovation,
    pub priors: PriorSet,
}

impl GarchSpec {
    pub fn new(arch: usize, garch: usize, innovation: Innovation) -> Self {
        let layout = garch_layout(arch, garch, innovation);
        Self {
            arch,
            garch,
            innovation,
            priors: default_priors(&layout),
        }
    }
}

/// Independent Gaussian target with no data, used to verify the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Normal observations with known `sigma` and a normal prior on the mean,
/// a conjugate model with closed-form posterior, LOO and evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMeanSpec {
    pub sigma: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Sarima(SarimaSpec),
    Garch(GarchSpec),
    Gaussian(GaussianTarget),
    NormalMean(NormalMeanSpec),
}

/// One slot of the unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub domain: Domain,
}

pub fn sarima_layout(order: &SarimaOrder, n_reg: usize) -> Vec<ParamName> {
    let mut out = vec![ParamName::scalar(ParamKind::Mu0), ParamName::scalar(ParamKind::Sigma0)];
    for (kind, n) in [
        (ParamKind::Ar, order.p),
        (ParamKind::Ma, order.q),
        (ParamKind::Sar, order.sp),
        (ParamKind::Sma, order.sq),
        (ParamKind::Breg, n_reg),
    ] {
        out.extend((1..=n).map(|i| ParamName::indexed(kind, i)));
    }
    out
}

pub fn garch_layout(arch: usize, garch: usize, innovation: Innovation) -> Vec<ParamName> {
    let mut out = vec![ParamName::scalar(ParamKind::Mu0), ParamName::scalar(ParamKind::Sigma0)];
    out.extend((1..=arch).map(|i| ParamName::indexed(ParamKind::Arch, i)));
    out.extend((1..=garch).map(|i| ParamName::indexed(ParamKind::Garch, i)));
    if innovation == Innovation::StudentT {
        out.push(ParamName::scalar(ParamKind::Dfv));
    }
    out
}

impl ModelSpec {
    pub fn sarima(order: SarimaOrder) -> Self {
        ModelSpec::Sarima(SarimaSpec::new(order, None))
    }

    pub fn garch(arch: usize, garch: usize, innovation: Innovation) -> Self {
        ModelSpec::Garch(GarchSpec::new(arch, garch, innovation))
    }

    pub fn priors(&self) -> Option<&PriorSet> {
        match self {
            ModelSpec::Sarima(s) => Some(&s.priors),
            ModelSpec::Garch(g) => Some(&g.priors),
            ModelSpec::Gaussian(_) | ModelSpec::NormalMean(_) => None,
        }
    }

    /// Replaces the prior set after checking it covers this model's layout.
    pub fn with_priors(mut self, priors: PriorSet) -> Result<Self> {
        let expected: Vec<String> = self.layout().into_iter().map(|p| p.name).collect();
        let got: Vec<String> = priors.entries().iter().map(|e| e.name.clone()).collect();
        if expected != got {
            return Err(Error::InvalidModel(format!(
                "prior set covers {got:?} but the model has {expected:?}"
            )));
        }
        match &mut self {
            ModelSpec::Sarima(s) => s.priors = priors,
            ModelSpec::Garch(g) => g.priors = priors,
            _ => return Err(Error::InvalidModel("test targets have fixed priors".into())),
        }
        Ok(self)
    }

    /// Applies `name ~ family(...)` overrides.
    pub fn set_prior(self, selector: &str, prior: PriorSpec) -> Result<Self> {
        let priors = self
            .priors()
            .ok_or_else(|| Error::InvalidModel("test targets have fixed priors".into()))?
            .set_prior(selector, prior)?;
        self.with_priors(priors)
    }

    pub fn param_names(&self) -> Vec<ParamName> {
        match self {
            ModelSpec::Sarima(s) => sarima_layout(&s.order, s.n_reg()),
            ModelSpec::Garch(g) => garch_layout(g.arch, g.garch, g.innovation),
            ModelSpec::NormalMean(_) => vec![ParamName::scalar(ParamKind::Mu0)],
            ModelSpec::Gaussian(_) => Vec::new(),
        }
    }

    /// Ordered `(name, domain)` slots of the parameter vector.
    pub fn layout(&self) -> Vec<ParamInfo> {
        match self {
            ModelSpec::Gaussian(g) => (1..=g.mean.len())
                .map(|i| ParamInfo {
                    name: format!("x[{i}]"),
                    domain: Domain::Real,
                })
                .collect(),
            _ => self
                .param_names()
                .into_iter()
                .map(|p| ParamInfo {
                    name: p.to_string(),
                    domain: p.kind.domain(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Gaussian(g) => g.mean.len(),
            _ => self.param_names().len(),
        }
    }

    /// Model header, e.g. `Sarima(1,1,1)(1,1,1)[12]` or `Sarima(1,1,1).reg[4]`.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Sarima(s) => {
                let o = &s.order;
                match s.n_reg() {
                    0 => o.to_string(),
                    k if !o.is_seasonal() => format!("Sarima({},{},{}).reg[{k}]", o.p, o.d, o.q),
                    k => format!("{o}.reg[{k}]"),
                }
            }
            ModelSpec::Garch(g) => match g.innovation {
                Innovation::Normal => format!("garch({},{})", g.arch, g.garch),
                Innovation::StudentT => format!("garch({},{}).t", g.arch, g.garch),
            },
            ModelSpec::Gaussian(g) => format!("gaussian[{}]", g.mean.len()),
            ModelSpec::NormalMean(_) => "normal_mean".to_string(),
        }
    }

    /// Observations the likelihood conditions on.
    pub fn n_effective(&self, n: usize) -> Result<usize> {
        match self {
            ModelSpec::Sarima(s) => n.checked_sub(s.order.lost()).filter(|&m| m > 0).ok_or_else(|| {
                Error::Dimension(format!(
                    "{} differences leave no observations out of {n}",
                    s.order.lost()
                ))
            }),
            ModelSpec::Gaussian(_) => Ok(0),
            _ => Ok(n),
        }
    }
}

/// Maps an unconstrained value onto `domain`; returns the value and the log
/// absolute Jacobian.
pub fn constrain_one<T: Real>(u: T, domain: Domain) -> (T, T) {
    match domain {
        Domain::Real => (u, T::zero()),
        Domain::Positive => (u.exp(), u),
        Domain::AboveTwo => (u.exp() + 2.0, u),
        Domain::Pm1 => {
            // ln(1 - tanh(u)^2) = ln 4 - 2|u| - 2 ln(1 + exp(-2|u|))
            let a = if u.value() >= 0.0 { u } else { -u };
            let jac = -(a * 2.0) - ((-(a * 2.0)).exp().ln_1p() * 2.0) + 4f64.ln();
            (u.tanh(), jac)
        }
        Domain::Unit => {
            // ln s(u) + ln(1 - s(u)) = -|u| - 2 ln(1 + exp(-|u|))
            let a = if u.value() >= 0.0 { u } else { -u };
            let jac = -a - (-a).exp().ln_1p() * 2.0;
            (u.logistic(), jac)
        }
    }
}

/// Inverse of [`constrain_one`].
pub fn unconstrain_one(x: f64, domain: Domain) -> f64 {
    match domain {
        Domain::Real => x,
        Domain::Positive => x.ln(),
        Domain::AboveTwo => (x - 2.0).ln(),
        Domain::Pm1 => x.atanh(),
        Domain::Unit => (x / (1.0 - x)).ln(),
    }
}

/// Constrained values and the summed log Jacobian.
pub fn constrain<T: Real>(layout: &[ParamInfo], u: &[T]) -> (Vec<T>, T) {
    let mut jac = T::zero();
    let values = layout
        .iter()
        .zip(u)
        .map(|(info, &v)| {
            let (x, j) = constrain_one(v, info.domain);
            jac += j;
            x
        })
        .collect();
    (values, jac)
}

pub fn unconstrain(layout: &[ParamInfo], x: &[f64]) -> Vec<f64> {
    layout
        .iter()
        .zip(x)
        .map(|(info, &v)| unconstrain_one(v, info.domain))
        .collect()
}

/// Log posterior at an unconstrained point, with per-observation detail.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPosteriorResult {
    pub log_posterior: f64,
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_jacobian: f64,
    pub pointwise_loglik: Vec<f64>,
    /// Conditional means (SARIMA, differenced scale, regression included)
    /// or conditional standard deviations (GARCH).
    pub fitted: Vec<f64>,
    /// `z_t - fitted_t` for SARIMA; standardized errors for GARCH.
    pub residuals: Vec<f64>,
    pub constrained: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Parts<T> {
    pub log_lik: T,
    pub log_prior: T,
    pub log_jacobian: T,
}

#[derive(Debug, Default)]
pub(crate) struct Trace {
    pub pointwise: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Nonzero coefficients of `1 - (1 - sum a_i B^i)(1 - sum A_j B^{sj})`
/// as `(lag, coefficient)` pairs.
pub(crate) fn expand_seasonal<T: Real>(regular: &[T], seasonal: &[T], s: usize) -> Vec<(usize, T)> {
    let mut out: Vec<(usize, T)> = Vec::with_capacity(regular.len() + seasonal.len() * (1 + regular.len()));
    let mut push = |lag: usize, c: T| {
        if let Some(slot) = out.iter_mut().find(|(l, _)| *l == lag) {
            slot.1 += c;
        } else {
            out.push((lag, c));
        }
    };
    for (i, &a) in regular.iter().enumerate() {
        push(i + 1, a);
    }
    for (j, &sa) in seasonal.iter().enumerate() {
        push(s * (j + 1), sa);
        for (i, &a) in regular.iter().enumerate() {
            push(i + 1 + s * (j + 1), -(a * sa));
        }
    }
    out
}

/// Zeroes differenced values that are pure rounding residue relative to the
/// original column, e.g. seasonal Fourier terms under seasonal differencing.
/// Returns true when the whole column vanishes.
fn drop_cancellation(diffed: &mut [f64], original: &[f64]) -> bool {
    let scale = original.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = CANCELLATION_TOL * scale;
    for v in diffed.iter_mut() {
        if v.abs() <= tol {
            *v = 0.0;
        }
    }
    scale > 0.0 && diffed.iter().all(|v| *v == 0.0)
}

/// A model bound to its data, with differencing precomputed.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    y: TimeSeries,
    layout: Vec<ParamInfo>,
    /// Differenced series (SARIMA) or the raw series.
    z: Vec<f64>,
    /// Differenced regressors, one row per observation of `z`.
    xd: Vec<Vec<f64>>,
    presample_var: f64,
}

impl Model {
    pub fn new(spec: ModelSpec, y: TimeSeries) -> Result<Self> {
        let layout = spec.layout();
        let n = y.len();
        let mut z = y.values().to_vec();
        let mut xd = Vec::new();
        match &spec {
            ModelSpec::Sarima(s) => {
                let o = &s.order;
                if o.s == 0 {
                    return Err(Error::InvalidModel("seasonal period must be positive".into()));
                }
                z = difference_values(y.values(), o.d, o.sd, o.s)?;
                if let Some(x) = &s.xreg {
                    if x.matrix.nrows() != n {
                        return Err(Error::Dimension(format!(
                            "{} regressor rows for {n} observations",
                            x.matrix.nrows()
                        )));
                    }
                    let dm = x.matrix.difference(o.d, o.sd, o.s)?;
                    let mut cols: Vec<Vec<f64>> = dm.columns().to_vec();
                    for (j, col) in cols.iter_mut().enumerate() {
                        if drop_cancellation(col, x.matrix.column(j)) {
                            warn!(
                                "regressor `{}` vanishes after differencing; its coefficient is informed by the prior only",
                                x.matrix.labels()[j]
                            );
                        }
                    }
                    xd = (0..z.len()).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
                }
                check_priors(&s.priors, &layout)?;
            }
            ModelSpec::Garch(g) => {
                if g.arch == 0 {
                    return Err(Error::InvalidModel("GARCH needs an ARCH order of at least 1".into()));
                }
                check_priors(&g.priors, &layout)?;
            }
            ModelSpec::Gaussian(g) => {
                if g.mean.len() != g.sd.len() || g.sd.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidModel("gaussian target needs positive sds".into()));
                }
            }
            ModelSpec::NormalMean(m) => {
                if !(m.sigma > 0.0 && m.prior_sd > 0.0) {
                    return Err(Error::InvalidModel("normal-mean scales must be positive".into()));
                }
            }
        }
        let presample_var = {
            let v = y.variance();
            if v > 0.0 {
                v
            } else {
                1.0
            }
        };
        Ok(Self {
            spec,
            y,
            layout,
            z,
            xd,
            presample_var,
        })
    }

    /// Data-free Gaussian target; the series is a placeholder.
    pub fn gaussian(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        Self::new(
            ModelSpec::Gaussian(GaussianTarget { mean, sd }),
            TimeSeries::new(vec![0.0], 1)?,
        )
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn series(&self) -> &TimeSeries {
        &self.y
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Differenced series the likelihood conditions on.
    pub fn conditioned(&self) -> &[f64] {
        &self.z
    }

    pub fn n_effective(&self) -> usize {
        match self.spec {
            ModelSpec::Gaussian(_) => 0,
            _ => self.z.len(),
        }
    }

    pub fn label(&self) -> String {
        self.spec.label()
    }

    /// Pre-sample variance used to start the GARCH recursion.
    pub fn presample_variance(&self) -> f64 {
        self.presample_var
    }

    pub(crate) fn regressor_rows(&self) -> &[Vec<f64>] {
        &self.xd
    }

    pub(crate) fn evaluate<T: Real>(&self, u: &[T], mut trace: Option<&mut Trace>) -> Parts<T> {
        let (x, log_jacobian) = constrain(&self.layout, u);
        let (log_lik, log_prior) = match &self.spec {
            ModelSpec::Sarima(s) => (self.sarima_loglik(s, &x, trace.as_deref_mut()), s.priors.log_prior(&x)),
            ModelSpec::Garch(g) => (self.garch_loglik(g, &x, trace.as_deref_mut()), g.priors.log_prior(&x)),
            ModelSpec::Gaussian(g) => {
                let lp = x
                    .iter()
                    .zip(g.mean.iter().zip(&g.sd))
                    .fold(T::zero(), |acc, (&v, (&m, &s))| acc + normal_lpdf(v, m, s));
                (T::zero(), lp)
            }
            ModelSpec::NormalMean(m) => {
                let mut ll = T::zero();
                for &obs in &self.z {
                    let l = normal_lpdf(T::cst(obs) - x[0], 0.0, m.sigma);
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.pointwise.push(l.value());
                        tr.fitted.push(x[0].value());
                        tr.residuals.push(obs - x[0].value());
                    }
                    ll += l;
                }
                (ll, normal_lpdf(x[0], m.prior_mean, m.prior_sd))
            }
        };
        Parts {
            log_lik,
            log_prior,
            log_jacobian,
        }
    }

    fn sarima_loglik<T: Real>(&self, spec: &SarimaSpec, x: &[T], mut trace: Option<&mut Trace>) -> T {
        let o = &spec.order;
        let mu0 = x[0];
        let sigma0 = x[1];
        let mut at = 2;
        let mut take = |k: usize| {
            let v = &x[at..at + k];
            at += k;
            v
        };
        let ar = take(o.p);
        let ma = take(o.q);
        let sar = take(o.sp);
        let sma = take(o.sq);
        let breg = take(spec.n_reg());
        let ar_poly = expand_seasonal(ar, sar, o.s);
        let ma_poly = expand_seasonal(ma, sma, o.s);

        let n = self.z.len();
        let reg: Vec<T> = if breg.is_empty() {
            Vec::new()
        } else {
            self.xd
                .iter()
                .map(|row| row.iter().zip(breg).fold(T::zero(), |acc, (&xv, &b)| acc + b * xv))
                .collect()
        };
        let zt: Vec<T> = if reg.is_empty() {
            self.z.iter().map(|&v| T::cst(v)).collect()
        } else {
            self.z.iter().zip(&reg).map(|(&v, &r)| T::cst(v) - r).collect()
        };
        let mut eps: Vec<T> = Vec::with_capacity(n);
        let log_norm = T::cst(0.5 * (2.0 * PI).ln()) + sigma0.ln();
        let inv_sigma = T::cst(1.0) / sigma0;
        let mut ll = T::zero();
        for t in 0..n {
            let mut mu = mu0;
            for &(lag, c) in &ar_poly {
                if lag <= t {
                    mu += c * zt[t - lag];
                }
            }
            for &(lag, c) in &ma_poly {
                if lag <= t {
                    mu -= c * eps[t - lag];
                }
            }
            let e = zt[t] - mu;
            let l = -((e * inv_sigma).square() * 0.5) - log_norm;
            if let Some(tr) = trace.as_deref_mut() {
                let fitted = if reg.is_empty() { mu } else { mu + reg[t] };
                tr.pointwise.push(l.value());
                tr.fitted.push(fitted.value());
                tr.residuals.push(e.value());
            }
            eps.push(e);
            ll += l;
        }
        ll
    }

    fn garch_loglik<T: Real>(&self, spec: &GarchSpec, x: &[T], mut trace: Option<&mut Trace>) -> T {
        let mu0 = x[0];
        let omega = x[1];
        let alpha = &x[2..2 + spec.arch];
        let beta = &x[2 + spec.arch..2 + spec.arch + spec.garch];
        let df = (spec.innovation == Innovation::StudentT).then(|| x[2 + spec.arch + spec.garch]);
        let pre = T::cst(self.presample_var);
        let n = self.z.len();
        let mut e2: Vec<T> = Vec::with_capacity(n);
        let mut s2: Vec<T> = Vec::with_capacity(n);
        let t_norm = df.map(|v| {
            ((v + 1.0) * 0.5).ln_gamma() - (v * 0.5).ln_gamma() - (v * PI).ln() * 0.5
        });
        let mut ll = T::zero();
        for t in 0..n {
            let mut var = omega;
            for (i, &a) in alpha.iter().enumerate() {
                var += a * if t > i { e2[t - i - 1] } else { pre };
            }
            for (j, &b) in beta.iter().enumerate() {
                var += b * if t > j { s2[t - j - 1] } else { pre };
            }
            let e = T::cst(self.z[t]) - mu0;
            let esq = e.square();
            let l = match df {
                None => -(var.ln() + esq / var + (2.0 * PI).ln()) * 0.5,
                Some(v) => {
                    // scale^2 = var (v-2)/v, so e^2 / (v scale^2) = e^2 / (var (v-2))
                    let scale2 = var * (v - 2.0) / v;
                    t_norm.unwrap() - scale2.ln() * 0.5
                        - (esq / (var * (v - 2.0))).ln_1p() * ((v + 1.0) * 0.5)
                }
            };
            if let Some(tr) = trace.as_deref_mut() {
                let sd = var.value().sqrt();
                tr.pointwise.push(l.value());
                tr.fitted.push(sd);
                tr.residuals.push(e.value() / sd);
            }
            e2.push(esq);
            s2.push(var);
            ll += l;
        }
        ll
    }

    /// Log posterior on the unconstrained scale.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        let p = self.evaluate(u, None);
        p.log_lik + p.log_prior + p.log_jacobian
    }

    /// Log posterior with its decomposition and per-observation terms.
    pub fn log_posterior_detail(&self, u: &[f64]) -> LogPosteriorResult {
        let mut tr = Trace::default();
        let p = self.evaluate(u, Some(&mut tr));
        let (constrained, _) = constrain(&self.layout, u);
        LogPosteriorResult {
            log_posterior: p.log_lik + p.log_prior + p.log_jacobian,
            log_likelihood: p.log_lik,
            log_prior: p.log_prior,
            log_jacobian: p.log_jacobian,
            pointwise_loglik: tr.pointwise,
            fitted: tr.fitted,
            residuals: tr.residuals,
            constrained,
        }
    }

    pub fn constrain(&self, u: &[f64]) -> Vec<f64> {
        constrain(&self.layout, u).0
    }

    pub fn unconstrain(&self, x: &[f64]) -> Vec<f64> {
        unconstrain(&self.layout, x)
    }

    /// Objective over the unconstrained vector returning only the log
    /// likelihood (flat priors, no Jacobian).
    pub fn log_likelihood_objective(&self) -> LogLikelihood<'_> {
        LogLikelihood(self)
    }
}

fn check_priors(priors: &PriorSet, layout: &[ParamInfo]) -> Result<()> {
    let got: Vec<&str> = priors.entries().iter().map(|e| e.name.as_str()).collect();
    let want: Vec<&str> = layout.iter().map(|p| p.name.as_str()).collect();
    if got != want {
        return Err(Error::InvalidModel(format!(
            "priors cover {got:?} but the model has {want:?}"
        )));
    }
    Ok(())
}

impl Objective for Model {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn eval<T: Real>(&self, x: &[T]) -> T {
        let p = self.evaluate(x, None);
        p.log_lik + p.log_prior + p.log_jacobian
    }
}

pub struct LogLikelihood<'a>(&'a Model);

impl Objective for LogLikelihood<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval<T: Real>(&self, x: &[T]) -> T {
        self.0.evaluate(x, None).log_lik
    }
}

impl fmt::Display for Model {
    /// The model declaration block: header, observation counts and priors.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "y ~ {}", self.label())?;
        writeln!(f, "{} observations and 1 dimension", self.y.len())?;
        if let ModelSpec::Sarima(s) = &self.spec {
            writeln!(f, "Differences: {} seasonal Differences: {}", s.order.d, s.order.sd)?;
        }
        writeln!(f, "Current observations: {}", self.n_effective())?;
        let Some(priors) = self.spec.priors() else {
            return Ok(());
        };
        writeln!(f)?;
        writeln!(f, "Priors:")?;
        let mut last: Option<Option<&str>> = None;
        for e in priors.entries() {
            let group = match e.kind {
                ParamKind::Mu0 => Some("Intercept:"),
                ParamKind::Sigma0 => Some("Scale Parameter:"),
                ParamKind::Sar | ParamKind::Sma => Some("Seasonal Parameters:"),
                ParamKind::Breg => Some("Regression Parameters:"),
                ParamKind::Dfv => Some("Degrees of freedom:"),
                _ => None,
            };
            if last != Some(group) {
                if last.is_some() {
                    writeln!(f)?;
                }
                if let Some(h) = group {
                    writeln!(f, "{h}")?;
                }
                last = Some(group);
            }
            writeln!(f, "{}", e.line())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, gradient};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

    fn ts(v: &[f64]) -> TimeSeries {
        TimeSeries::new(v.to_vec(), 1).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn u_for(model: &Model, x: &[f64]) -> Vec<f64> {
        model.unconstrain(x)
    }

    #[test]
    fn effective_observations() {
        let spec = ModelSpec::sarima(SarimaOrder::new(1, 1, 1, 1, 1, 1, 12));
        assert_eq!(spec.n_effective(373).unwrap(), 360);
        let spec = ModelSpec::sarima(SarimaOrder::new(1, 1, 1, 0, 0, 0, 12));
        assert_eq!(spec.n_effective(373).unwrap(), 372);
        assert_eq!(ModelSpec::garch(1, 1, Innovation::Normal).n_effective(100).unwrap(), 100);
        assert!(ModelSpec::sarima(SarimaOrder::new(0, 1, 0, 0, 1, 0, 12)).n_effective(13).is_err());
    }

    #[test]
    fn layouts() {
        let spec = ModelSpec::sarima(SarimaOrder::arima(0, 1, 0));
        let names: Vec<String> = spec.layout().into_iter().map(|p| p.name).collect();
        assert_eq!(names, ["mu0", "sigma0"]);
        let g = ModelSpec::garch(1, 1, Innovation::StudentT);
        let layout = g.layout();
        assert_eq!(
            layout.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(),
            ["mu0", "sigma0", "arch[1]", "garch[1]", "dfv"]
        );
        assert_eq!(layout[2].domain, Domain::Unit);
        assert_eq!(layout[3].domain, Domain::Unit);
        assert_eq!(layout[4].domain, Domain::AboveTwo);
        let priors = g.priors().unwrap();
        assert!(priors.get_prior("arch").is_ok());
        let s = SarimaSpec::new(SarimaOrder::new(2, 1, 1, 1, 1, 1, 12), Some(Xreg::fourier(40, 12, 2).unwrap()));
        assert_eq!(s.priors.len(), 2 + 2 + 1 + 1 + 1 + 4);
    }

    #[test]
    fn labels() {
        assert_eq!(
            ModelSpec::sarima(SarimaOrder::new(1, 1, 1, 1, 1, 1, 12)).label(),
            "Sarima(1,1,1)(1,1,1)[12]"
        );
        assert_eq!(ModelSpec::sarima(SarimaOrder::arima(1, 0, 0)).label(), "Sarima(1,0,0)(0,0,0)[1]");
        let reg = ModelSpec::Sarima(SarimaSpec::new(
            SarimaOrder::new(1, 1, 1, 0, 0, 0, 12),
            Some(Xreg::fourier(373, 12, 2).unwrap()),
        ));
        assert_eq!(reg.label(), "Sarima(1,1,1).reg[4]");
    }

    #[test]
    fn transforms_at_zero() {
        let (x, j) = constrain_one(0.0, Domain::Pm1);
        assert_eq!((x, j), (0.0, 0.0));
        let (x, j) = constrain_one(0.0, Domain::Positive);
        assert_eq!((x, j), (1.0, 0.0));
        let (x, _) = constrain_one(0.0, Domain::AboveTwo);
        assert_eq!(x, 3.0);
    }

    #[test]
    fn jacobians_match_direct_formulas() {
        for u in [-3.0, -0.4, 0.0, 0.7, 5.0] {
            let (_, j) = constrain_one(u, Domain::Pm1);
            assert_abs_diff_eq!(j, (1.0 - u.tanh().powi(2)).ln(), epsilon = 1e-10);
            let (s, j) = constrain_one(u, Domain::Unit);
            assert_abs_diff_eq!(j, (s * (1.0 - s)).ln(), epsilon = 1e-10);
        }
        // stays finite far out where 1 - tanh^2 underflows
        assert!(constrain_one(400.0, Domain::Pm1).1.is_finite());
    }

    #[test]
    fn round_trip_random_vectors() {
        let spec = ModelSpec::garch(2, 1, Innovation::StudentT);
        let layout = spec.layout();
        let sarima = ModelSpec::sarima(SarimaOrder::new(2, 0, 1, 1, 0, 1, 4)).layout();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            for lay in [&layout, &sarima] {
                let u: Vec<f64> = (0..lay.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (x, _) = constrain(lay, &u);
                let back = unconstrain(lay, &x);
                for (a, b) in back.iter().zip(&u) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn white_noise_model_is_iid_normal() {
        let y = noise(40, 1);
        let model = Model::new(ModelSpec::sarima(SarimaOrder::arima(0, 0, 0)), ts(&y)).unwrap();
        let u = u_for(&model, &[0.3, 1.7]);
        let r = model.log_posterior_detail(&u);
        let expected: f64 = y
            .iter()
            .map(|v| -0.5 * (2.0 * PI).ln() - 1.7f64.ln() - 0.5 * ((v - 0.3) / 1.7).powi(2))
            .sum();
        assert_abs_diff_eq!(r.log_likelihood, expected, epsilon = 1e-10);
    }

    #[test]
    fn ar1_matches_hand_recursion() {
        let y = [0.1, -0.2, 0.3, 0.0, 0.1];
        let model = Model::new(ModelSpec::sarima(SarimaOrder::arima(1, 0, 0)), ts(&y)).unwrap();
        let r = model.log_posterior_detail(&u_for(&model, &[0.0, 1.0, 0.5]));
        // conditional Gaussian: e_1 = y_1, e_t = y_t - 0.5 y_{t-1}
        let mut ll = 0.0;
        let mut prev = 0.0;
        for &v in &y {
            let e: f64 = v - 0.5 * prev;
            ll += -0.5 * (2.0 * PI).ln() - 0.5 * e * e;
            prev = v;
        }
        assert_abs_diff_eq!(r.log_likelihood, ll, epsilon = 1e-12);
    }

    fn brute_force_poly(phi: &[f64], sphi: &[f64], s: usize) -> Vec<f64> {
        // coefficients c of (1 - sum phi B^i)(1 - sum sphi B^{sj}), c[0] = 1
        let mut a = vec![0.0; phi.len() + 1];
        a[0] = 1.0;
        for (i, v) in phi.iter().enumerate() {
            a[i + 1] = -v;
        }
        let mut b = vec![0.0; s * sphi.len() + 1];
        b[0] = 1.0;
        for (j, v) in sphi.iter().enumerate() {
            b[s * (j + 1)] = -v;
        }
        let mut c = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, w) in b.iter().enumerate() {
                c[i + j] += x * w;
            }
        }
        c
    }

    #[test]
    fn seasonal_ar_expansion_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in 0..=2 {
            for sp in 0..=2 {
                for s in [4usize, 12] {
                    let phi: Vec<f64> = (0..p).map(|_| rng.random_range(-0.9..0.9)).collect();
                    let sphi: Vec<f64> = (0..sp).map(|_| rng.random_range(-0.9..0.9)).collect();
                    let c = brute_force_poly(&phi, &sphi, s);
                    let sparse = expand_seasonal(&phi, &sphi, s);
                    let mut dense = vec![0.0; c.len()];
                    for (lag, v) in sparse {
                        dense[lag] += v;
                    }
                    for k in 1..c.len() {
                        assert_abs_diff_eq!(dense[k], -c[k], epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn seasonal_ar_recursion_uses_expanded_lags() {
        let y = noise(30, 2);
        let spec = ModelSpec::sarima(SarimaOrder::new(1, 0, 0, 1, 0, 0, 4));
        let model = Model::new(spec, TimeSeries::new(y.clone(), 4).unwrap()).unwrap();
        let (phi, sphi) = (0.4, -0.3);
        let r = model.log_posterior_detail(&u_for(&model, &[0.0, 1.0, phi, sphi]));
        for t in 0..y.len() {
            let lag = |k: usize| if t >= k { y[t - k] } else { 0.0 };
            let mu = phi * lag(1) + sphi * lag(4) - phi * sphi * lag(5);
            assert_abs_diff_eq!(r.fitted[t], mu, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_series_is_fitted_exactly() {
        // z_t = mu0 + 0.6 z_{t-1} - 0.2 z_{t-2} with zero pre-sample values
        let (mu0, a1, a2) = (0.5, 0.6, -0.2);
        let mut z = vec![0.0f64; 25];
        for t in 0..z.len() {
            let l1 = if t >= 1 { z[t - 1] } else { 0.0 };
            let l2 = if t >= 2 { z[t - 2] } else { 0.0 };
            z[t] = mu0 + a1 * l1 + a2 * l2;
        }
        let model = Model::new(ModelSpec::sarima(SarimaOrder::arima(2, 0, 1)), ts(&z)).unwrap();
        let r = model.log_posterior_detail(&u_for(&model, &[mu0, 0.1, a1, a2, 0.3]));
        for (f, v) in r.fitted.iter().zip(&z) {
            assert_abs_diff_eq!(f, v, epsilon = 1e-12);
        }
        assert!(r.residuals.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn decomposition_is_exact() {
        let y = noise(60, 3);
        let spec = ModelSpec::Sarima(SarimaSpec::new(
            SarimaOrder::new(1, 1, 1, 1, 0, 1, 12),
            Some(Xreg::fourier(60, 12, 2).unwrap()),
        ));
        let model = Model::new(spec, TimeSeries::new(y, 12).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let r = model.log_posterior_detail(&u);
            let sum: f64 = r.pointwise_loglik.iter().sum();
            assert_abs_diff_eq!(r.log_likelihood, sum, epsilon = 1e-10);
            assert_abs_diff_eq!(
                r.log_posterior,
                sum + r.log_prior + r.log_jacobian,
                epsilon = 1e-10
            );
            assert_eq!(r.pointwise_loglik.len(), 59);
            assert_eq!(model.log_posterior(&u), r.log_posterior);
        }
    }

    fn garch_hand(y: &[f64], mu: f64, omega: f64, a: f64, b: f64) -> (f64, Vec<f64>) {
        let n = y.len() as f64;
        let m = y.iter().sum::<f64>() / n;
        let pre = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        let (mut e2_prev, mut s2_prev) = (pre, pre);
        let mut ll = 0.0;
        let mut s2s = Vec::new();
        for &v in y {
            let s2 = omega + a * e2_prev + b * s2_prev;
            let e = v - mu;
            ll += -0.5 * ((2.0 * PI).ln() + s2.ln() + e * e / s2);
            e2_prev = e * e;
            s2_prev = s2;
            s2s.push(s2);
        }
        (ll, s2s)
    }

    #[test]
    fn garch11_matches_hand_recursion() {
        let y = [0.3, -0.5, 1.2, 0.1, -0.8];
        let model = Model::new(ModelSpec::garch(1, 1, Innovation::Normal), ts(&y)).unwrap();
        let r = model.log_posterior_detail(&u_for(&model, &[0.1, 0.2, 0.3, 0.4]));
        let (ll, s2) = garch_hand(&y, 0.1, 0.2, 0.3, 0.4);
        assert_abs_diff_eq!(r.log_likelihood, ll, epsilon = 1e-12);
        for (sd, v) in r.fitted.iter().zip(&s2) {
            assert_abs_diff_eq!(*sd, v.sqrt(), epsilon = 1e-12);
            assert!(sd * sd >= 0.2);
        }
    }

    #[test]
    fn arch_free_garch_is_iid_normal() {
        let y = noise(30, 8);
        let model = Model::new(ModelSpec::garch(1, 1, Innovation::Normal), ts(&y)).unwrap();
        let r = model.log_posterior_detail(&[0.2, 1.1f64.ln(), -60.0, -60.0]);
        let sd = 1.1f64.sqrt();
        let expected: f64 = y
            .iter()
            .map(|v| -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * ((v - 0.2) / sd).powi(2))
            .sum();
        assert_abs_diff_eq!(r.log_likelihood, expected, epsilon = 1e-9);
    }

    #[test]
    fn student_t_garch_approaches_normal() {
        let y = noise(30, 9);
        let t_model = Model::new(ModelSpec::garch(1, 1, Innovation::StudentT), ts(&y)).unwrap();
        let n_model = Model::new(ModelSpec::garch(1, 1, Innovation::Normal), ts(&y)).unwrap();
        let x = [0.1, 0.3, 0.2, 0.5];
        let rt = t_model.log_posterior_detail(&t_model.unconstrain(&[x[0], x[1], x[2], x[3], 1e6]));
        let rn = n_model.log_posterior_detail(&n_model.unconstrain(&x));
        for (a, b) in rt.pointwise_loglik.iter().zip(&rn.pointwise_loglik) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn student_t_marginal_matches_scale_mixture() {
        // y | lambda ~ N(0, (v-2)/v sigma^2 lambda), lambda ~ IG(v/2, v/2)
        let y = [0.0, 2.5];
        let v = 5.0;
        let model = Model::new(ModelSpec::garch(1, 0, Innovation::StudentT), ts(&y)).unwrap();
        let omega = 0.8;
        let u = model.unconstrain(&[0.0, omega, 1e-12, v]);
        let r = model.log_posterior_detail(&u);
        let var = omega + 1e-12 * model.presample_variance();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = GammaDist::new(v / 2.0, 2.0 / v).unwrap();
        let draws = 100_000;
        for (t, &obs) in y.iter().enumerate() {
            let vals: Vec<f64> = (0..draws)
                .map(|_| {
                    let lambda = 1.0 / g.sample(&mut rng);
                    let s2 = (v - 2.0) / v * var * lambda;
                    (-0.5 * obs * obs / s2).exp() / (2.0 * PI * s2).sqrt()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / draws as f64;
            let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
            let se = sd / (draws as f64).sqrt();
            let exact = r.pointwise_loglik[t].exp();
            assert!((exact - mean).abs() < 3.0 * se, "t={t}: {exact} vs {mean} ± {se}");
        }
    }

    #[test]
    fn gradient_at_sample_mean_has_no_likelihood_term() {
        let y = noise(50, 10);
        let model = Model::new(ModelSpec::sarima(SarimaOrder::arima(0, 0, 0)), ts(&y)).unwrap();
        let mean = y.iter().sum::<f64>() / 50.0;
        let u = model.unconstrain(&[mean, 1.0]);
        let g = gradient(&model.log_likelihood_objective(), &u);
        assert!(g.gradient[0].abs() < 1e-10);
        let full = gradient(&model, &u);
        let prior = PriorSpec::student_t(0.0, 2.5, 6.0).unwrap();
        let h = 1e-6;
        let fd = (prior.log_density(mean + h) - prior.log_density(mean - h)) / (2.0 * h);
        assert_abs_diff_eq!(full.gradient[0], fd, epsilon = 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let y = noise(80, 11);
        let sarima = Model::new(ModelSpec::sarima(SarimaOrder::arima(1, 0, 1)), ts(&y)).unwrap();
        let garch = Model::new(ModelSpec::garch(1, 1, Innovation::Normal), ts(&y)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for model in [&sarima, &garch] {
            for _ in 0..5 {
                let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let err = finite_diff_check(model, &u, 1e-6);
                assert!(err < 1e-6, "{}: {err}", model.label());
            }
        }
    }

    #[test]
    fn model_print_block() {
        let y = TimeSeries::new(noise(373, 1), 12).unwrap();
        let spec = ModelSpec::sarima(SarimaOrder::new(1, 1, 1, 1, 1, 1, 12));
        let model = Model::new(spec, y).unwrap();
        let text = model.to_string();
        assert!(text.starts_with("y ~ Sarima(1,1,1)(1,1,1)[12]\n373 observations and 1 dimension\n"));
        assert!(text.contains("Differences: 1 seasonal Differences: 1\nCurrent observations: 360\n"));
        assert!(text.contains("Intercept:\nmu0 ~ t (loc = 0 ,scl = 2.5 ,df = 6 )\n"));
        assert!(text.contains("Scale Parameter:\nsigma0 ~ half_t (loc = 0 ,scl = 1 ,df = 7 )\n"));
        assert!(text.contains("ar[ 1 ] ~ normal (mu = 0 , sd = 0.5 )\nma[ 1 ] ~ normal (mu = 0 , sd = 0.5 )\n"));
        assert!(text.contains("Seasonal Parameters:\nsar[ 1 ] ~ normal (mu = 0 , sd = 0.5 )\n"));
    }

    #[test]
    fn bad_models_rejected() {
        let y = ts(&noise(10, 1));
        let xreg = Xreg::fourier(9, 4, 1).unwrap();
        let spec = ModelSpec::Sarima(SarimaSpec::new(SarimaOrder::arima(0, 0, 0), Some(xreg)));
        assert!(matches!(Model::new(spec, y.clone()), Err(Error::Dimension(_))));
        let spec = ModelSpec::garch(0, 1, Innovation::Normal);
        assert!(Model::new(spec, y).is_err());
    }

    proptest! {
        #[test]
        fn garch_variance_bounded_below(
            omega in 0.01f64..2.0, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..50,
        ) {
            let y = noise(40, seed);
            let model = Model::new(ModelSpec::garch(1, 1, Innovation::Normal), ts(&y)).unwrap();
            let u = model.unconstrain(&[0.0, omega, a.clamp(1e-9, 1.0 - 1e-9), b.clamp(1e-9, 1.0 - 1e-9)]);
            let r = model.log_posterior_detail(&u);
            for sd in r.fitted {
                prop_assert!(sd * sd >= omega * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn seasonal_fourier_terms_vanish_under_seasonal_difference() {
        let n = 48;
        let y = TimeSeries::new((0..n).map(|t| (t as f64 * 0.37).sin()).collect(), 12).unwrap();
        let spec = ModelSpec::Sarima(SarimaSpec::new(
            SarimaOrder::new(0, 0, 0, 0, 1, 0, 12),
            Some(Xreg::fourier(n, 12, 1).unwrap()),
        ));
        let model = Model::new(spec, y).unwrap();
        assert!(model.regressor_rows().iter().flatten().all(|v| *v == 0.0));
        let mut col = vec![1e-15, 0.5, -2e-14];
        assert!(!drop_cancellation(&mut col, &[1.0, -1.0]));
        assert_eq!(col, vec![0.0, 0.5, 0.0]);
    }
}
