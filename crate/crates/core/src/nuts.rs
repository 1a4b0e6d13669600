//! No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
//! step size adaptation and windowed diagonal metric estimation.
//!
//! The transition, tree building and warmup schedule follow the reference
//! implementation used by Stan, so fits behave like the ones users know.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::autodiff::gradient;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::series::TimeSeries;

const MAX_DELTA_H: f64 = 1000.0;
const INIT_RADIUS: f64 = 2.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iter: usize,
    pub warmup: usize,
    pub adapt_delta: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    /// Cap on concurrently running chains; `None` runs all chains at once.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iter: 2000,
            warmup: 1000,
            adapt_delta: 0.8,
            max_treedepth: 10,
            seed: 0,
            threads: None,
        }
    }
}

impl SamplerConfig {
    /// Sets `iter` and the default warmup of half of it.
    pub fn with_iter(mut self, iter: usize) -> Self {
        self.iter = iter;
        self.warmup = iter / 2;
        self
    }

    pub fn with_chains(mut self, chains: usize) -> Self {
        self.chains = chains;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if self.warmup >= self.iter {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iter ({})",
                self.warmup, self.iter
            )));
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return Err(Error::Config("adapt_delta must lie in (0, 1)".into()));
        }
        if self.max_treedepth == 0 {
            return Err(Error::Config("max_treedepth must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn post_warmup(&self) -> usize {
        self.iter - self.warmup
    }
}

/// Post-warmup draws, rows in chain-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsMatrix {
    pub names: Vec<String>,
    pub chains: usize,
    pub iterations: usize,
    pub constrained: Vec<Vec<f64>>,
    pub unconstrained: Vec<Vec<f64>>,
    /// Per-draw pointwise log likelihood, one column per conditioned observation.
    pub log_lik: Vec<Vec<f64>>,
    /// Unconstrained log posterior of each draw.
    pub lp: Vec<f64>,
}

impl DrawsMatrix {
    pub fn n_draws(&self) -> usize {
        self.constrained.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        let wanted: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        self.names
            .iter()
            .position(|n| *n == wanted)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// All draws of parameter `j`, chain-major.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.constrained.iter().map(|row| row[j]).collect()
    }

    /// Draws of parameter `j` split by chain.
    pub fn by_chain(&self, j: usize) -> Vec<Vec<f64>> {
        split_chains(&self.column(j), self.chains)
    }

    /// Total log likelihood of each draw.
    pub fn loglik_totals(&self) -> Vec<f64> {
        self.log_lik.iter().map(|row| row.iter().sum()).collect()
    }
}

pub(crate) fn split_chains(v: &[f64], chains: usize) -> Vec<Vec<f64>> {
    let per = v.len() / chains.max(1);
    v.chunks(per.max(1)).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    /// Post-warmup divergent transitions per chain.
    pub divergences: Vec<usize>,
    /// Post-warmup transitions that stopped at the maximum tree depth.
    pub max_treedepth_hits: Vec<usize>,
    pub step_size: Vec<f64>,
    pub inv_metric: Vec<Vec<f64>>,
    pub mean_accept_stat: Vec<f64>,
    pub mean_treedepth: Vec<f64>,
    pub n_leapfrog: Vec<usize>,
}

impl SamplerReport {
    pub fn total_divergences(&self) -> usize {
        self.divergences.iter().sum()
    }
}

/// Draws plus everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub series: TimeSeries,
    pub config: SamplerConfig,
    pub draws: DrawsMatrix,
    pub report: SamplerReport,
}

impl FitResult {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.spec.clone(), self.series.clone())
    }

    pub fn extract(&self, name: &str) -> Result<Vec<f64>> {
        extract(self, name)
    }

    /// Footer printed under summaries.
    pub fn footer(&self) -> String {
        format!(
            "Samples were drawn using sampling(NUTS). For each parameter, ess is the effective sample size, \
             and Rhat is the potential scale reduction factor on split chains (at convergence, Rhat = 1).\n\
             {} chains, {} iterations, {} warmup, {} divergent transitions",
            self.config.chains,
            self.config.iter,
            self.config.warmup,
            self.report.total_divergences()
        )
    }
}

/// Flattened post-warmup draws of one parameter, chain-major.
pub fn extract(fit: &FitResult, name: &str) -> Result<Vec<f64>> {
    Ok(fit.draws.column(fit.draws.index_of(name)?))
}

/// Builds the model for `spec` and `y` and samples it.
pub fn fit(spec: ModelSpec, y: TimeSeries, cfg: &SamplerConfig) -> Result<FitResult> {
    let model = Model::new(spec, y)?;
    sample(&model, cfg)
}

pub fn sample(model: &Model, cfg: &SamplerConfig) -> Result<FitResult> {
    cfg.validate()?;
    if !matches!(model.spec(), ModelSpec::Gaussian(_)) && model.n_effective() < model.dim() {
        return Err(Error::SeriesTooShort(format!(
            "{} observations for {} parameters",
            model.n_effective(),
            model.dim()
        )));
    }
    let threads = cfg.threads.unwrap_or(cfg.chains).min(cfg.chains);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outputs: Vec<Result<ChainOutput>> =
        pool.install(|| (0..cfg.chains).into_par_iter().map(|c| run_chain(model, cfg, c)).collect());

    let mut draws = DrawsMatrix {
        names: model.layout().iter().map(|p| p.name.clone()).collect(),
        chains: cfg.chains,
        iterations: cfg.post_warmup(),
        constrained: Vec::new(),
        unconstrained: Vec::new(),
        log_lik: Vec::new(),
        lp: Vec::new(),
    };
    let mut report = SamplerReport {
        divergences: Vec::new(),
        max_treedepth_hits: Vec::new(),
        step_size: Vec::new(),
        inv_metric: Vec::new(),
        mean_accept_stat: Vec::new(),
        mean_treedepth: Vec::new(),
        n_leapfrog: Vec::new(),
    };
    for out in outputs {
        let out = out?;
        draws.constrained.extend(out.constrained);
        draws.unconstrained.extend(out.unconstrained);
        draws.log_lik.extend(out.log_lik);
        draws.lp.extend(out.lp);
        report.divergences.push(out.divergences);
        report.max_treedepth_hits.push(out.treedepth_hits);
        report.step_size.push(out.step_size);
        report.inv_metric.push(out.inv_metric);
        report.mean_accept_stat.push(out.accept_sum / cfg.post_warmup() as f64);
        report.mean_treedepth.push(out.depth_sum as f64 / cfg.post_warmup() as f64);
        report.n_leapfrog.push(out.n_leapfrog);
    }
    if report.total_divergences() > 0 {
        warn!(
            "{} divergent transitions after warmup in {}",
            report.total_divergences(),
            model.label()
        );
    }
    if matches!(model.spec(), ModelSpec::Garch(_)) {
        warn_if_explosive(&draws);
    }
    Ok(FitResult {
        spec: model.spec().clone(),
        series: model.series().clone(),
        config: cfg.clone(),
        draws,
        report,
    })
}

/// Posterior median of the GARCH persistence sum(arch) + sum(garch).
pub fn garch_persistence(draws: &DrawsMatrix) -> f64 {
    let cols: Vec<usize> = draws
        .names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("arch[") || n.starts_with("garch["))
        .map(|(i, _)| i)
        .collect();
    let mut sums: Vec<f64> = draws.constrained.iter().map(|row| cols.iter().map(|&c| row[c]).sum()).collect();
    sums.sort_by(f64::total_cmp);
    crate::diagnostics::quantile_sorted(&sums, 0.5)
}

fn warn_if_explosive(draws: &DrawsMatrix) {
    let persistence = garch_persistence(draws);
    if persistence >= 1.0 {
        warn!("posterior median of sum(arch) + sum(garch) is {persistence:.3} >= 1; the variance process is not stationary");
    }
}

struct ChainOutput {
    constrained: Vec<Vec<f64>>,
    unconstrained: Vec<Vec<f64>>,
    log_lik: Vec<Vec<f64>>,
    lp: Vec<f64>,
    divergences: usize,
    treedepth_hits: usize,
    step_size: f64,
    inv_metric: Vec<f64>,
    accept_sum: f64,
    depth_sum: usize,
    n_leapfrog: usize,
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn run_chain(model: &Model, cfg: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = chain_rng(cfg.seed, chain);
    let mut z = initial_point(model, &mut rng)?;
    let mut nuts = Nuts::new(model, vec![1.0; model.dim()], 1.0, cfg.max_treedepth);
    nuts.init_stepsize(&mut z, &mut rng);
    let mut stepsize = DualAveraging::new(cfg.adapt_delta, nuts.eps);
    let mut windows = MetricWindows::new(cfg.warmup, model.dim());

    let keep = cfg.post_warmup();
    let mut out = ChainOutput {
        constrained: Vec::with_capacity(keep),
        unconstrained: Vec::with_capacity(keep),
        log_lik: Vec::with_capacity(keep),
        lp: Vec::with_capacity(keep),
        divergences: 0,
        treedepth_hits: 0,
        step_size: 0.0,
        inv_metric: Vec::new(),
        accept_sum: 0.0,
        depth_sum: 0,
        n_leapfrog: 0,
    };
    for it in 0..cfg.iter {
        let info = nuts.transition(&mut z, &mut rng);
        if it < cfg.warmup {
            nuts.eps = stepsize.learn(info.accept_stat);
            if windows.learn(&mut nuts.inv_metric, &z.q) {
                nuts.init_stepsize(&mut z, &mut rng);
                stepsize.set_mu(nuts.eps);
                stepsize.restart();
            }
            if it + 1 == cfg.warmup {
                nuts.eps = stepsize.complete();
                debug!(chain, step_size = nuts.eps, "warmup finished");
            }
            continue;
        }
        out.divergences += usize::from(info.divergent);
        out.treedepth_hits += usize::from(info.depth >= cfg.max_treedepth);
        out.accept_sum += info.accept_stat;
        out.depth_sum += info.depth;
        out.n_leapfrog += info.n_leapfrog;
        let detail = model.log_posterior_detail(&z.q);
        out.constrained.push(detail.constrained);
        out.log_lik.push(detail.pointwise_loglik);
        out.unconstrained.push(z.q.clone());
        out.lp.push(z.lp);
    }
    out.step_size = nuts.eps;
    out.inv_metric = nuts.inv_metric;
    Ok(out)
}

fn initial_point(model: &Model, rng: &mut ChaCha8Rng) -> Result<Point> {
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..model.dim())
            .map(|_| rng.random_range(-INIT_RADIUS..INIT_RADIUS))
            .collect();
        let z = Point::new(model, q);
        if z.lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            return Ok(z);
        }
    }
    Err(Error::Init {
        model: model.label(),
        attempts: INIT_ATTEMPTS,
    })
}

/// Position, momentum and the log density with its gradient at the position.
#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub lp: f64,
    pub grad: Vec<f64>,
}

impl Point {
    pub fn new(model: &Model, q: Vec<f64>) -> Self {
        let p = vec![0.0; q.len()];
        let mut z = Self {
            q,
            p,
            lp: 0.0,
            grad: Vec::new(),
        };
        z.update(model);
        z
    }

    fn update(&mut self, model: &Model) {
        let g = gradient(model, &self.q);
        self.lp = if g.is_finite() { g.value } else { f64::NEG_INFINITY };
        self.grad = g.gradient;
    }
}

pub(crate) fn hamiltonian(z: &Point, inv_metric: &[f64]) -> f64 {
    let kinetic: f64 = z.p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum();
    let h = -z.lp + 0.5 * kinetic;
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

pub(crate) fn leapfrog(model: &Model, z: &mut Point, eps: f64, inv_metric: &[f64]) {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += eps * m * p;
    }
    z.update(model);
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionInfo {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub divergent: bool,
}

/// Momentum-side bookkeeping of one end of a subtree.
struct Edge {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

pub(crate) struct Nuts<'a> {
    model: &'a Model,
    pub inv_metric: Vec<f64>,
    pub eps: f64,
    max_depth: usize,
    // per-transition state
    h0: f64,
    sign: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<'a> Nuts<'a> {
    pub fn new(model: &'a Model, inv_metric: Vec<f64>, eps: f64, max_depth: usize) -> Self {
        Self {
            model,
            inv_metric,
            eps,
            max_depth,
            h0: 0.0,
            sign: 1.0,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        }
    }

    fn sample_momentum(&self, z: &mut Point, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance probability of 0.8.
    pub fn init_stepsize(&mut self, z: &mut Point, rng: &mut ChaCha8Rng) {
        if self.eps == 0.0 || self.eps > 1e7 {
            return;
        }
        let start = z.clone();
        let trial = |eps: f64, z: &mut Point, rng: &mut ChaCha8Rng| {
            *z = start.clone();
            self.sample_momentum(z, rng);
            let h0 = hamiltonian(z, &self.inv_metric);
            leapfrog(self.model, z, eps, &self.inv_metric);
            h0 - hamiltonian(z, &self.inv_metric)
        };
        let threshold = 0.8f64.ln();
        let mut eps = self.eps;
        let direction = if trial(eps, z, rng) > threshold { 1 } else { -1 };
        loop {
            let delta = trial(eps, z, rng);
            if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
                break;
            }
            eps = if direction == 1 { eps * 2.0 } else { eps * 0.5 };
            if eps > 1e7 || eps == 0.0 {
                break;
            }
        }
        *z = start;
        self.eps = eps;
    }

    pub fn transition(&mut self, z: &mut Point, rng: &mut ChaCha8Rng) -> TransitionInfo {
        self.sample_momentum(z, rng);
        self.h0 = hamiltonian(z, &self.inv_metric);
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp = self.p_sharp(&z.p);
        let mut fwd_fwd = Edge { p: z.p.clone(), p_sharp: p_sharp.clone() };
        let mut fwd_bck = Edge { p: z.p.clone(), p_sharp: p_sharp.clone() };
        let mut bck_fwd = Edge { p: z.p.clone(), p_sharp: p_sharp.clone() };
        let mut bck_bck = Edge { p: z.p.clone(), p_sharp };

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let dim = z.q.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                let mut cur = z_fwd.clone();
                rho_bck.clone_from(&rho);
                bck_fwd = Edge { p: fwd_fwd.p.clone(), p_sharp: fwd_fwd.p_sharp.clone() };
                self.sign = 1.0;
                let ok = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut fwd_bck,
                    &mut fwd_fwd,
                    &mut rho_fwd,
                    &mut lsw_subtree,
                    rng,
                );
                z_fwd = cur;
                ok
            } else {
                let mut cur = z_bck.clone();
                rho_fwd.clone_from(&rho);
                fwd_bck = Edge { p: bck_bck.p.clone(), p_sharp: bck_bck.p_sharp.clone() };
                self.sign = -1.0;
                let ok = self.build_tree(
                    depth,
                    &mut cur,
                    &mut z_propose,
                    &mut bck_fwd,
                    &mut bck_bck,
                    &mut rho_bck,
                    &mut lsw_subtree,
                    rng,
                );
                z_bck = cur;
                ok
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&bck_bck.p_sharp, &fwd_fwd.p_sharp, &rho);
            let rho_ext = add(&rho_bck, &fwd_bck.p);
            persist &= no_u_turn(&bck_bck.p_sharp, &fwd_bck.p_sharp, &rho_ext);
            let rho_ext = add(&rho_fwd, &bck_fwd.p);
            persist &= no_u_turn(&bck_fwd.p_sharp, &fwd_fwd.p_sharp, &rho_ext);
            if !persist {
                break;
            }
        }

        let n_leapfrog = self.n_leapfrog;
        *z = z_sample;
        TransitionInfo {
            accept_stat: if n_leapfrog > 0 { self.sum_metro_prob / n_leapfrog as f64 } else { 0.0 },
            n_leapfrog,
            depth,
            divergent: self.divergent,
        }
    }

    /// Extends the trajectory by `2^depth` leapfrog steps from `z`.
    /// `beg` is the end adjacent to the existing trajectory.
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        beg: &mut Edge,
        end: &mut Edge,
        rho: &mut Vec<f64>,
        log_sum_weight: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.model, z, self.sign * self.eps, &self.inv_metric);
            self.n_leapfrog += 1;
            let h = hamiltonian(z, &self.inv_metric);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            let p_sharp = self.p_sharp(&z.p);
            *beg = Edge { p: z.p.clone(), p_sharp: p_sharp.clone() };
            *end = Edge { p: z.p.clone(), p_sharp };
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut init_end = Edge { p: vec![0.0; dim], p_sharp: vec![0.0; dim] };
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, z, z_propose, beg, &mut init_end, &mut rho_init, &mut lsw_init, rng) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut final_beg = Edge { p: vec![0.0; dim], p_sharp: vec![0.0; dim] };
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut final_beg,
            end,
            &mut rho_final,
            &mut lsw_final,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(&beg.p_sharp, &end.p_sharp, &rho_subtree);
        let rho_ext = add(&rho_init, &final_beg.p);
        persist &= no_u_turn(&beg.p_sharp, &final_beg.p_sharp, &rho_ext);
        let rho_ext = add(&rho_final, &init_end.p);
        persist &= no_u_turn(&init_end.p_sharp, &end.p_sharp, &rho_ext);
        persist
    }
}

/// Nesterov dual averaging of the log step size.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    delta: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(delta: f64, eps: f64) -> Self {
        Self {
            delta,
            mu: (10.0 * eps).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn set_mu(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
    }

    pub fn restart(&mut self) {
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn complete(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows that
/// estimate the metric, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub(crate) struct MetricWindows {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
    welford: Welford,
}

impl MetricWindows {
    pub fn new(num_warmup: usize, dim: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75, 50, 25);
        let enabled = num_warmup >= 20;
        if enabled && init_buffer + base_window + term_buffer > num_warmup {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
            base_window = num_warmup - (init_buffer + term_buffer);
        }
        Self {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size: base_window,
            next_window: init_buffer + base_window - 1,
            counter: 0,
            enabled,
            welford: Welford::new(dim),
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter + self.term_buffer < self.num_warmup
            && self.counter != self.num_warmup
    }

    fn window_end(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Feeds one warmup draw; returns true when `inv_metric` was updated.
    pub fn learn(&mut self, inv_metric: &mut [f64], q: &[f64]) -> bool {
        if !self.enabled {
            return false;
        }
        if self.in_window() {
            self.welford.add(q);
        }
        if self.window_end() {
            self.compute_next_window();
            let n = self.welford.n as f64;
            for (m, v) in inv_metric.iter_mut().zip(self.welford.variance()) {
                *m = (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0));
            }
            self.welford.restart();
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}

#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn restart(&mut self) {
        *self = Self::new(self.mean.len());
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n as f64;
            *s += delta * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let denom = (self.n as f64 - 1.0).max(1.0);
        self.m2.iter().map(|s| s / denom).collect()
    }
}
