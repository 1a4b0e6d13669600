//! Automatic SARIMA order selection: difference orders by variance
//! heuristics, a stepwise BIC search over fast conditional fits, then a full
//! Bayesian fit of the winner with default priors.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::autodiff::{gradient, Objective};
use crate::error::{Error, Result};
use crate::model::{expand_seasonal, Model, ModelSpec, SarimaOrder};
use crate::nuts::{sample, FitResult, SamplerConfig};
use crate::series::{difference_values, TimeSeries};

const SEASONAL_STRENGTH: f64 = 0.64;
const VARIANCE_DROP: f64 = 0.9;
const MAX_D: usize = 2;
const MAX_PQ: usize = 5;
const MAX_SEASONAL_PQ: usize = 2;
const MAX_STEPS: usize = 100;
const MAX_STEP: f64 = 1.0;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Centered moving average of width `s` (a 2 x s average for even `s`);
/// `None` near the ends.
fn moving_average(y: &[f64], s: usize) -> Vec<Option<f64>> {
    let n = y.len();
    let half = s / 2;
    (0..n)
        .map(|t| {
            if t < half || t + half >= n {
                return None;
            }
            if s % 2 == 1 {
                Some(y[t - half..=t + half].iter().sum::<f64>() / s as f64)
            } else {
                let inner: f64 = y[t - half + 1..t + half].iter().sum();
                Some((inner + 0.5 * (y[t - half] + y[t + half])) / s as f64)
            }
        })
        .collect()
}

/// Strength of the seasonal component in `[0, 1]` from a classical additive
/// decomposition: `1 - var(remainder) / var(detrended)`.
pub fn seasonal_strength(y: &[f64], s: usize) -> f64 {
    if s < 2 || y.len() < 2 * s + 1 {
        return 0.0;
    }
    let trend = moving_average(y, s);
    let detrended: Vec<(usize, f64)> = trend
        .iter()
        .enumerate()
        .filter_map(|(t, m)| m.map(|m| (t, y[t] - m)))
        .collect();
    let mut sums = vec![0.0; s];
    let mut counts = vec![0usize; s];
    for &(t, v) in &detrended {
        sums[t % s] += v;
        counts[t % s] += 1;
    }
    let raw: Vec<f64> = sums.iter().zip(&counts).map(|(a, c)| a / *c as f64).collect();
    let centre = mean(&raw);
    let seasonal: Vec<f64> = raw.iter().map(|v| v - centre).collect();
    let d: Vec<f64> = detrended.iter().map(|(_, v)| *v).collect();
    let r: Vec<f64> = detrended.iter().map(|(t, v)| v - seasonal[t % s]).collect();
    let vd = var(&d);
    if !(vd > 0.0) {
        return 0.0;
    }
    (1.0 - var(&r) / vd).max(0.0)
}

/// Chooses `(d, D)`: one seasonal difference when the seasonal strength
/// exceeds 0.64, then ordinary differences while each cuts the variance by
/// more than 10%.
pub fn select_differences(y: &TimeSeries, s: usize) -> Result<(usize, usize)> {
    let v = y.values();
    if s > 1 && v.len() <= 3 * s {
        return Err(Error::SeriesTooShort(format!(
            "{} observations for seasonal period {s}; need more than {}",
            v.len(),
            3 * s
        )));
    }
    if v.len() < 8 {
        return Err(Error::SeriesTooShort(format!("{} observations", v.len())));
    }
    let seasonal_d = usize::from(s > 1 && seasonal_strength(v, s) > SEASONAL_STRENGTH);
    let mut current = difference_values(v, 0, seasonal_d, s.max(1))?;
    let mut d = 0;
    while d < MAX_D && current.len() > 4 {
        let next = difference_values(&current, 1, 0, 1)?;
        if var(&next) < VARIANCE_DROP * var(&current) {
            current = next;
            d += 1;
        } else {
            break;
        }
    }
    Ok((d, seasonal_d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssFit {
    pub loglik: f64,
    pub bic: f64,
    pub converged: bool,
    /// Constrained estimates in layout order.
    pub estimate: Vec<f64>,
    pub iterations: usize,
}

impl CssFit {
    /// BIC for ranking; unconverged or non-stationary/non-invertible fits rank last.
    pub fn score(&self) -> f64 {
        if self.converged { self.bic } else { f64::INFINITY }
    }
}

struct NegLogLik<'a>(&'a Model);

impl Objective for NegLogLik<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval<T: crate::autodiff::Real>(&self, x: &[T]) -> T {
        -self.0.log_likelihood_objective().eval(x)
    }
}

struct BfgsOutcome {
    x: Vec<f64>,
    f: f64,
    converged: bool,
    iterations: usize,
}

/// Quasi-Newton minimization with a backtracking Armijo line search.
fn bfgs<F: Objective>(f: &F, x0: Vec<f64>, max_iter: usize) -> BfgsOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut g = gradient(f, &x);
    if !g.is_finite() {
        return BfgsOutcome { x, f: f64::INFINITY, converged: false, iterations: 0 };
    }
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for it in 0..max_iter {
        let gnorm = g.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < 1e-6 * (1.0 + g.value.abs()) {
            return BfgsOutcome { x, f: g.value, converged: true, iterations: it };
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i][j] * g.gradient[j]).sum::<f64>()).collect();
        let mut slope: f64 = dir.iter().zip(&g.gradient).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            // lost descent: restart from steepest descent
            for (i, row) in h.iter_mut().enumerate() {
                row.iter_mut().enumerate().for_each(|(j, v)| *v = f64::from(u8::from(i == j)));
            }
            dir = g.gradient.iter().map(|v| -v).collect();
            slope = -g.gradient.iter().map(|v| v * v).sum::<f64>();
        }
        // bounded steps keep saturating transforms (tanh, logistic) from
        // jumping onto flat plateaus
        let longest = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if longest > MAX_STEP { MAX_STEP / longest } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let gt = gradient(f, &trial);
            if gt.is_finite() && gt.value <= g.value + 1e-4 * step * slope {
                accepted = Some((trial, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, gn)) = accepted else {
            let converged = gnorm < 1e-3 * (1.0 + g.value.abs());
            return BfgsOutcome { x, f: g.value, converged, iterations: it };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.gradient.iter().zip(&g.gradient).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let rel_change = (g.value - gn.value).abs() / (1.0 + g.value.abs());
        x = xn;
        g = gn;
        if rel_change < 1e-12 {
            return BfgsOutcome { x, f: g.value, converged: true, iterations: it + 1 };
        }
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * yv[j]).sum()).collect();
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
    }
    BfgsOutcome { x, f: g.value, converged: false, iterations: max_iter }
}

/// True when all roots of `1 - sum c_i B^i` lie outside the unit circle,
/// via the step-down (inverse Durbin-Levinson) recursion.
pub fn is_stable(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&r) = a.last() {
        if !(r.abs() < 1.0) {
            return false;
        }
        let k = a.len();
        let scale = 1.0 - r * r;
        a = (0..k - 1).map(|i| (a[i] + r * a[k - 2 - i]) / scale).collect();
    }
    true
}

fn dense(sparse: &[(usize, f64)]) -> Vec<f64> {
    let len = sparse.iter().map(|(l, _)| *l).max().unwrap_or(0);
    let mut out = vec![0.0; len];
    for &(lag, c) in sparse {
        out[lag - 1] += c;
    }
    out
}

/// Conditional maximum likelihood fit with flat priors, used to rank orders.
pub fn css_fit(y: &TimeSeries, order: SarimaOrder) -> Result<CssFit> {
    let model = Model::new(ModelSpec::sarima(order), y.clone())?;
    let z = model.conditioned();
    let k = model.dim();
    if z.len() <= k + 2 {
        return Err(Error::SeriesTooShort(format!(
            "{} conditioned observations for {k} parameters",
            z.len()
        )));
    }
    let sd = var(z).sqrt();
    let mut start = vec![0.0; k];
    start[0] = mean(z);
    start[1] = if sd > 0.0 { sd.ln() } else { 0.0 };
    let out = bfgs(&NegLogLik(&model), start, 500);
    let loglik = -out.f;
    let estimate = model.constrain(&out.x);
    let (p, q, sp) = (order.p, order.q, order.sp);
    let ar = expand_seasonal(&estimate[2..2 + p], &estimate[2 + p + q..2 + p + q + sp], order.s);
    let ma = expand_seasonal(&estimate[2 + p..2 + p + q], &estimate[2 + p + q + sp..k], order.s);
    let converged = out.converged && loglik.is_finite() && is_stable(&dense(&ar)) && is_stable(&dense(&ma));
    Ok(CssFit {
        loglik,
        bic: k as f64 * (z.len() as f64).ln() - 2.0 * loglik,
        converged,
        estimate,
        iterations: out.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCandidate {
    pub order: SarimaOrder,
    pub bic: f64,
    pub converged: bool,
}

/// One evaluated candidate in search order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub step: usize,
    pub p: usize,
    pub d: usize,
    pub q: usize,
    #[serde(rename = "P")]
    pub sp: usize,
    #[serde(rename = "D")]
    pub sd: usize,
    #[serde(rename = "Q")]
    pub sq: usize,
    pub bic: f64,
    pub converged: bool,
    /// BIC of the incumbent after this step's moves.
    pub incumbent_bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: OrderCandidate,
    pub log: Vec<SearchStep>,
    /// BIC of the incumbent after each step, starting with the best seed.
    pub incumbent_path: Vec<f64>,
}

impl SearchResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.log {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn within_caps(o: &SarimaOrder) -> bool {
    o.p <= MAX_PQ && o.q <= MAX_PQ && o.sp <= MAX_SEASONAL_PQ && o.sq <= MAX_SEASONAL_PQ
}

fn neighbors(o: &SarimaOrder) -> Vec<SarimaOrder> {
    let shift = |v: usize, by: i64| -> Option<usize> { usize::try_from(v as i64 + by).ok() };
    let mut moves: Vec<(i64, i64, i64, i64)> = Vec::new();
    for by in [-1, 1] {
        moves.extend([(by, 0, 0, 0), (0, by, 0, 0), (by, by, 0, 0)]);
        if o.s > 1 {
            moves.extend([(0, 0, by, 0), (0, 0, 0, by), (0, 0, by, by)]);
        }
    }
    moves
        .into_iter()
        .filter_map(|(dp, dq, dsp, dsq)| {
            Some(SarimaOrder {
                p: shift(o.p, dp)?,
                q: shift(o.q, dq)?,
                sp: shift(o.sp, dsp)?,
                sq: shift(o.sq, dsq)?,
                ..*o
            })
        })
        .filter(within_caps)
        .collect()
}

fn candidate(y: &TimeSeries, order: SarimaOrder) -> OrderCandidate {
    match css_fit(y, order) {
        Ok(f) => OrderCandidate { order, bic: f.bic, converged: f.converged && f.bic.is_finite() },
        Err(e) => {
            debug!("skipping {order}: {e}");
            OrderCandidate { order, bic: f64::INFINITY, converged: false }
        }
    }
}

/// Stepwise BIC search at fixed differences. Neighbors of the incumbent are
/// fitted in parallel; the move is chosen sequentially in a fixed order.
pub fn stepwise_search(y: &TimeSeries, d: usize, seasonal_d: usize, s: usize) -> SearchResult {
    let seasonal = s > 1;
    let seeds: Vec<(usize, usize, usize, usize)> = if seasonal {
        vec![(2, 2, 1, 1), (0, 0, 0, 0), (1, 0, 1, 0), (0, 1, 0, 1)]
    } else {
        vec![(2, 2, 0, 0), (0, 0, 0, 0), (1, 0, 0, 0), (0, 1, 0, 0)]
    };
    let mut cache: HashMap<SarimaOrder, OrderCandidate> = HashMap::new();
    let mut log = Vec::new();
    let mut evaluate = |orders: &[SarimaOrder], step: usize, log: &mut Vec<SearchStep>| -> Vec<OrderCandidate> {
        let mut fresh: Vec<SarimaOrder> = Vec::new();
        for o in orders {
            if !cache.contains_key(o) && !fresh.contains(o) {
                fresh.push(*o);
            }
        }
        let fitted: Vec<OrderCandidate> = fresh.par_iter().map(|&o| candidate(y, o)).collect();
        for c in fitted {
            let o = c.order;
            log.push(SearchStep {
                step,
                p: o.p,
                d: o.d,
                q: o.q,
                sp: o.sp,
                sd: o.sd,
                sq: o.sq,
                bic: c.bic,
                converged: c.converged,
                incumbent_bic: f64::NAN,
            });
            cache.insert(o, c);
        }
        orders.iter().map(|o| cache[o].clone()).collect()
    };
    let score = |c: &OrderCandidate| if c.converged { c.bic } else { f64::INFINITY };

    let seeds: Vec<SarimaOrder> = seeds
        .into_iter()
        .map(|(p, q, sp, sq)| SarimaOrder::new(p, d, q, sp, seasonal_d, sq, s.max(1)))
        .collect();
    let mut best: Option<OrderCandidate> = None;
    for c in evaluate(&seeds, 0, &mut log) {
        if best.as_ref().is_none_or(|b| score(&c) < score(b)) {
            best = Some(c);
        }
    }
    let mut best = best.expect("at least one seed");
    log.iter_mut().for_each(|r| r.incumbent_bic = score(&best));
    let mut path = vec![score(&best)];
    for step in 1..=MAX_STEPS {
        let start = log.len();
        let mut improved = None;
        for c in evaluate(&neighbors(&best.order), step, &mut log) {
            let bar = improved.as_ref().map_or(score(&best), score);
            if score(&c) < bar {
                improved = Some(c);
            }
        }
        let moved = improved.is_some();
        if let Some(c) = improved {
            best = c;
        }
        log[start..].iter_mut().for_each(|r| r.incumbent_bic = score(&best));
        if !moved {
            break;
        }
        path.push(score(&best));
    }
    if !best.converged {
        let fallback = SarimaOrder::new(0, d, 0, 0, seasonal_d, 0, s.max(1));
        info!("no candidate converged; falling back to {fallback}");
        best = OrderCandidate { order: fallback, bic: f64::INFINITY, converged: false };
    }
    SearchResult { best, log, incumbent_path: path }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoResult {
    pub fit: FitResult,
    pub search: SearchResult,
    pub differences: (usize, usize),
}

/// Chooses differences, runs the stepwise search and fits the winner with
/// default priors.
pub fn auto_sarima(y: &TimeSeries, s: usize, cfg: &SamplerConfig) -> Result<AutoResult> {
    let (d, seasonal_d) = select_differences(y, s)?;
    let search = stepwise_search(y, d, seasonal_d, s);
    info!("selected {}", search.best.order);
    let model = Model::new(ModelSpec::sarima(search.best.order), y.clone())?;
    let fit = sample(&model, cfg)?;
    Ok(AutoResult { fit, search, differences: (d, seasonal_d) })
}
