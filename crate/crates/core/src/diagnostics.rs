//! Convergence diagnostics and the posterior summary table.
//!
//! R-hat and ESS are the classic split-chain versions (no rank
//! normalization). ESS uses Geyer's initial monotone sequence on the
//! multi-chain autocorrelation estimate.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::Result;
use crate::nuts::{split_chains, FitResult};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Splits every chain into its first and second half (dropping the middle
/// draw of odd-length chains).
fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [&c[..half], &c[c.len() - half..]]
        })
        .collect()
}

fn usable(chains: &[Vec<f64>]) -> bool {
    !chains.is_empty() && chains.iter().all(|c| c.len() >= 4 && c.len() == chains[0].len())
}

/// Split potential scale reduction factor. NaN for constant or too short
/// chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if !usable(chains) {
        return f64::NAN;
    }
    let halves = split_halves(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| sample_var(h)).sum::<f64>() / halves.len() as f64;
    let b = n * sample_var(&means);
    if !(w > 0.0) {
        warn!("split R-hat undefined for constant chains");
        return f64::NAN;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size of split chains. Antithetic chains may exceed the
/// draw count; the estimate is capped at `N log10 N`.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    if !usable(chains) {
        return f64::NAN;
    }
    let halves = split_halves(chains);
    let m = halves.len();
    let n = halves[0].len();
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let mean_acov = |lag: usize| -> f64 {
        halves
            .iter()
            .zip(&means)
            .map(|(h, &mu)| autocov(h, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let mean_var = mean_acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        warn!("ESS undefined for constant chains");
        return f64::NAN;
    }
    let rho = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n + 2];
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[0] = even;
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    let cap = total * total.log10();
    if tau > 0.0 {
        (total / tau).min(cap)
    } else {
        cap
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile.
pub fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    #[serde(rename = "q2.5")]
    pub q2_5: f64,
    #[serde(rename = "q97.5")]
    pub q97_5: f64,
    pub ess: f64,
    pub rhat: f64,
}

impl SummaryRow {
    pub fn from_chains(name: &str, chains: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = chains.concat();
        let mut sorted = all.clone();
        sorted.sort_by(f64::total_cmp);
        let ess = ess(chains);
        let sd = if all.len() > 1 { sample_var(&all).sqrt() } else { f64::NAN };
        Self {
            name: name.to_string(),
            mean: mean(&all),
            se: sd / ess.sqrt(),
            q2_5: quantile_sorted(&sorted, 0.025),
            q97_5: quantile_sorted(&sorted, 0.975),
            ess,
            rhat: split_rhat(chains),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// One row per parameter in layout order, then a `loglik` row.
pub fn summarize(fit: &FitResult) -> Summary {
    let d = &fit.draws;
    let mut rows: Vec<SummaryRow> = (0..d.n_params())
        .map(|j| SummaryRow::from_chains(&d.names[j], &d.by_chain(j)))
        .collect();
    rows.push(SummaryRow::from_chains("loglik", &split_chains(&d.loglik_totals(), d.chains)));
    Summary { rows }
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        writeln!(
            f,
            "{:w$} {:>10} {:>8} {:>10} {:>10} {:>9} {:>7}",
            "",
            "mean",
            "se",
            "2.5%",
            "97.5%",
            "ess",
            "Rhat",
            w = width
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:w$} {:>10.4} {:>8.4} {:>10.4} {:>10.4} {:>9.3} {:>7.4}",
                r.name,
                r.mean,
                r.se,
                r.q2_5,
                r.q97_5,
                r.ess,
                r.rhat,
                w = width
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::nuts::{chain_rng, sample, SamplerConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = chain_rng(seed, 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = chain_rng(seed, 1);
        let mut x = Vec::with_capacity(n);
        let mut prev: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 - rho * rho).sqrt();
        for _ in 0..n {
            prev = rho * prev + rng.sample::<f64, _>(StandardNormal);
            x.push(prev);
        }
        x
    }

    #[test]
    fn rhat_formula_on_small_example() {
        // two chains, split into four halves of length 2 via 4-draw chains
        let chains = vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 2.0, 5.0, 3.0]];
        let halves = [[1.0, 2.0], [3.0, 4.0], [2.0, 2.0], [5.0, 3.0]];
        let n = 2.0;
        let means: Vec<f64> = halves.iter().map(|h| (h[0] + h[1]) / 2.0).collect();
        let vars: Vec<f64> = halves.iter().map(|h| (h[0] - h[1]).powi(2) / 2.0).collect();
        let w = vars.iter().sum::<f64>() / 4.0;
        let gm = means.iter().sum::<f64>() / 4.0;
        let b = n * means.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / 3.0;
        let expected = (((n - 1.0) / n * w + b / n) / w).sqrt();
        assert!((split_rhat(&chains) - expected).abs() < 1e-12);
    }

    #[test]
    fn rhat_near_one_for_stationary_chains() {
        // split R-hat can dip just below 1 when the half-chain means agree
        let x = iid(2000, 1);
        let r = split_rhat(&[x.clone(), x]);
        assert!((0.999..=1.01).contains(&r), "{r}");
        let r = split_rhat(&[iid(4000, 2)]);
        assert!(r < 1.01);
    }

    #[test]
    fn rhat_large_for_shifted_chains() {
        let a: Vec<f64> = iid(500, 3).iter().map(|v| v * 1e-3).collect();
        let b: Vec<f64> = iid(500, 4).iter().map(|v| 10.0 + v * 1e-3).collect();
        assert!(split_rhat(&[a, b]) > 1.2);
    }

    #[test]
    fn constant_chains_give_nan() {
        let c = vec![vec![2.0; 100], vec![2.0; 100]];
        assert!(split_rhat(&c).is_nan());
        assert!(ess(&c).is_nan());
    }

    #[test]
    fn ess_iid() {
        let e = ess(&[iid(4000, 5)]);
        assert!((3000.0..=5000.0).contains(&e), "{e}");
    }

    #[test]
    fn ess_ar1() {
        let e = ess(&[ar1(4000, 0.9, 6)]);
        let target = 4000.0 * 0.1 / 1.9;
        assert!(e > target / 1.5 && e < target * 1.5, "{e} vs {target}");
    }

    #[test]
    fn ess_antithetic_exceeds_draws() {
        let z = iid(2000, 7);
        let x: Vec<f64> = z.iter().flat_map(|v| [*v, -*v]).collect();
        let e = ess(&[x]);
        assert!(e > 4000.0, "{e}");
    }

    #[test]
    fn quantiles_type7() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&v, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn summary_rows_and_consistency() {
        let model = Model::gaussian(vec![1.0, -1.0], vec![1.0, 0.5]).unwrap();
        let cfg = SamplerConfig::default().with_iter(600).with_seed(1);
        let fit = sample(&model, &cfg).unwrap();
        let s = summarize(&fit);
        let names: Vec<&str> = s.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["x[1]", "x[2]", "loglik"]);
        for r in &s.rows[..2] {
            let col = fit.extract(&r.name).unwrap();
            let sd = sample_var(&col).sqrt();
            assert!((r.se - sd / r.ess.sqrt()).abs() < 1e-12);
            assert!(r.q2_5 <= r.q97_5);
            assert!(r.rhat > 0.99);
        }
        let text = s.to_string();
        assert!(text.lines().next().unwrap().contains("mean"));
        assert!(text.lines().last().unwrap().starts_with("loglik"));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let csv_text = String::from_utf8(buf).unwrap();
        assert!(csv_text.starts_with("name,mean,se,q2.5,q97.5,ess,rhat\n"));
    }

    #[test]
    fn summary_with_single_draw() {
        let model = Model::gaussian(vec![0.0], vec![1.0]).unwrap();
        let cfg = SamplerConfig { chains: 1, iter: 30, warmup: 29, ..SamplerConfig::default() };
        let fit = sample(&model, &cfg).unwrap();
        let s = summarize(&fit);
        let x = fit.extract("x[1]").unwrap()[0];
        assert_eq!(s.rows[0].mean, x);
        assert!(s.rows[0].ess.is_nan() && s.rows[0].rhat.is_nan());
    }

    #[test]
    fn constant_parameter_summary() {
        let row = SummaryRow::from_chains("c", &[vec![3.0; 50]]);
        assert_eq!((row.mean, row.q2_5, row.q97_5), (3.0, 3.0, 3.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn affine_invariance(a in 0.1f64..10.0, b in -100.0f64..100.0, seed in 0u64..1000) {
            let chains = vec![ar1(200, 0.5, seed), ar1(200, 0.5, seed + 1)];
            let moved: Vec<Vec<f64>> =
                chains.iter().map(|c| c.iter().map(|x| a * x + b).collect()).collect();
            prop_assert!((split_rhat(&chains) - split_rhat(&moved)).abs() < 1e-10);
            let (e0, e1) = (ess(&chains), ess(&moved));
            prop_assert!((e0 - e1).abs() < 1e-8 * e0);
            let flipped: Vec<Vec<f64>> =
                chains.iter().map(|c| c.iter().map(|x| -a * x + b).collect()).collect();
            prop_assert!((split_rhat(&chains) - split_rhat(&flipped)).abs() < 1e-10);
        }
    }
}
