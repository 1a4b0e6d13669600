//! Prior families, parameter domains and the default prior assignment.
//!
//! Every prior is restricted to the domain of the parameter it is attached
//! to and renormalized there, so `normal(0, 0.5)` on an AR coefficient is
//! a normal truncated to `[-1, 1]`.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{self as dist, ContinuousCDF};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Support of a parameter on the constrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Positive,
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Pm1,
    /// `(2, inf)`, degrees of freedom with a finite variance.
    AboveTwo,
}

impl Domain {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Domain::Real => (f64::NEG_INFINITY, f64::INFINITY),
            Domain::Positive => (0.0, f64::INFINITY),
            Domain::Unit => (0.0, 1.0),
            Domain::Pm1 => (-1.0, 1.0),
            Domain::AboveTwo => (2.0, f64::INFINITY),
        }
    }

    pub fn contains(self, x: f64) -> bool {
        let (lo, hi) = self.bounds();
        x >= lo && x <= hi
    }
}

/// A univariate prior family with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSpec {
    Normal { mu: f64, sd: f64 },
    StudentT { loc: f64, scale: f64, df: f64 },
    Cauchy { loc: f64, scale: f64 },
    /// Shape and rate.
    Gamma { shape: f64, rate: f64 },
    /// Shape and scale.
    InverseGamma { shape: f64, scale: f64 },
    Uniform { lower: f64, upper: f64 },
    Beta { a: f64, b: f64 },
    /// Beta mapped affinely onto `[-1, 1]` by `x = 2*theta - 1`.
    BetaPm1 { a: f64, b: f64 },
    HalfNormal { mu: f64, sd: f64 },
    HalfT { loc: f64, scale: f64, df: f64 },
    HalfCauchy { loc: f64, scale: f64 },
    ChiSquare { df: f64 },
    Exponential { rate: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPrior(format!("{name} must be positive and finite, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPrior(format!("{name} must be finite, got {v}")))
    }
}

impl PriorSpec {
    pub fn normal(mu: f64, sd: f64) -> Result<Self> {
        Self::Normal { mu, sd }.validated()
    }
    pub fn student_t(loc: f64, scale: f64, df: f64) -> Result<Self> {
        Self::StudentT { loc, scale, df }.validated()
    }
    pub fn cauchy(loc: f64, scale: f64) -> Result<Self> {
        Self::Cauchy { loc, scale }.validated()
    }
    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        Self::Gamma { shape, rate }.validated()
    }
    pub fn inverse_gamma(shape: f64, scale: f64) -> Result<Self> {
        Self::InverseGamma { shape, scale }.validated()
    }
    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        Self::Uniform { lower, upper }.validated()
    }
    pub fn beta(a: f64, b: f64) -> Result<Self> {
        Self::Beta { a, b }.validated()
    }
    pub fn beta_on_pm1(a: f64, b: f64) -> Result<Self> {
        Self::BetaPm1 { a, b }.validated()
    }
    pub fn half_normal(mu: f64, sd: f64) -> Result<Self> {
        Self::HalfNormal { mu, sd }.validated()
    }
    pub fn half_t(loc: f64, scale: f64, df: f64) -> Result<Self> {
        Self::HalfT { loc, scale, df }.validated()
    }
    pub fn half_cauchy(loc: f64, scale: f64) -> Result<Self> {
        Self::HalfCauchy { loc, scale }.validated()
    }
    pub fn chi_square(df: f64) -> Result<Self> {
        Self::ChiSquare { df }.validated()
    }
    pub fn exponential(rate: f64) -> Result<Self> {
        Self::Exponential { rate }.validated()
    }

    /// Checks hyperparameters; every constructor goes through here.
    pub fn validated(self) -> Result<Self> {
        use PriorSpec::*;
        match self {
            Normal { mu, sd } | HalfNormal { mu, sd } => {
                finite("location", mu)?;
                positive("sd", sd)?;
            }
            StudentT { loc, scale, df } | HalfT { loc, scale, df } => {
                finite("location", loc)?;
                positive("scale", scale)?;
                positive("df", df)?;
            }
            Cauchy { loc, scale } | HalfCauchy { loc, scale } => {
                finite("location", loc)?;
                positive("scale", scale)?;
            }
            Gamma { shape, rate } => {
                positive("shape", shape)?;
                positive("rate", rate)?;
            }
            InverseGamma { shape, scale } => {
                positive("shape", shape)?;
                positive("scale", scale)?;
            }
            Uniform { lower, upper } => {
                finite("lower", lower)?;
                finite("upper", upper)?;
                if lower >= upper {
                    return Err(Error::InvalidPrior(format!(
                        "uniform needs lower < upper, got {lower} >= {upper}"
                    )));
                }
            }
            Beta { a, b } | BetaPm1 { a, b } => {
                positive("shape1", a)?;
                positive("shape2", b)?;
            }
            ChiSquare { df } => positive("df", df)?,
            Exponential { rate } => positive("rate", rate)?,
        }
        Ok(self)
    }

    /// Family name used in the textual prior syntax.
    pub fn family_name(&self) -> &'static str {
        use PriorSpec::*;
        match self {
            Normal { .. } => "normal",
            StudentT { .. } => "student_t",
            Cauchy { .. } => "cauchy",
            Gamma { .. } => "gamma",
            InverseGamma { .. } => "inverse_gamma",
            Uniform { .. } => "uniform",
            Beta { .. } => "beta",
            BetaPm1 { .. } => "beta_on_pm1",
            HalfNormal { .. } => "half_normal",
            HalfT { .. } => "half_t",
            HalfCauchy { .. } => "half_cauchy",
            ChiSquare { .. } => "chi_square",
            Exponential { .. } => "exponential",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        use PriorSpec::*;
        match *self {
            Normal { mu, sd } | HalfNormal { mu, sd } => vec![mu, sd],
            StudentT { loc, scale, df } | HalfT { loc, scale, df } => vec![loc, scale, df],
            Cauchy { loc, scale } | HalfCauchy { loc, scale } => vec![loc, scale],
            Gamma { shape, rate } => vec![shape, rate],
            InverseGamma { shape, scale } => vec![shape, scale],
            Uniform { lower, upper } => vec![lower, upper],
            Beta { a, b } | BetaPm1 { a, b } => vec![a, b],
            ChiSquare { df } => vec![df],
            Exponential { rate } => vec![rate],
        }
    }

    /// Support of the family itself.
    pub fn support(&self) -> (f64, f64) {
        use PriorSpec::*;
        match *self {
            Normal { .. } | StudentT { .. } | Cauchy { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Gamma { .. }
            | InverseGamma { .. }
            | HalfNormal { .. }
            | HalfT { .. }
            | HalfCauchy { .. }
            | ChiSquare { .. }
            | Exponential { .. } => (0.0, f64::INFINITY),
            Uniform { lower, upper } => (lower, upper),
            Beta { .. } => (0.0, 1.0),
            BetaPm1 { .. } => (-1.0, 1.0),
        }
    }

    /// Natural-log density; `-inf` outside the support.
    pub fn log_density<T: Real>(&self, x: T) -> T {
        use PriorSpec::*;
        let xv = x.value();
        let (lo, hi) = self.support();
        if !(xv >= lo && xv <= hi) {
            return T::cst(f64::NEG_INFINITY);
        }
        match *self {
            Normal { mu, sd } => normal_lpdf(x, mu, sd),
            StudentT { loc, scale, df } => student_t_lpdf(x, loc, scale, df),
            Cauchy { loc, scale } => cauchy_lpdf(x, loc, scale),
            Gamma { shape, rate } => gamma_lpdf(x, shape, rate),
            InverseGamma { shape, scale } => {
                x.ln() * -(shape + 1.0) - T::cst(scale) / x
                    + (shape * scale.ln() - ln_gamma(shape))
            }
            Uniform { lower, upper } => T::cst(-(upper - lower).ln()),
            Beta { a, b } => beta_lpdf(x, a, b),
            BetaPm1 { a, b } => beta_lpdf((x + 1.0) * 0.5, a, b) - LN_2,
            HalfNormal { mu, sd } => normal_lpdf(x, mu, sd) - self.half_log_mass(),
            HalfT { loc, scale, df } => student_t_lpdf(x, loc, scale, df) - self.half_log_mass(),
            HalfCauchy { loc, scale } => cauchy_lpdf(x, loc, scale) - self.half_log_mass(),
            ChiSquare { df } => gamma_lpdf(x, df / 2.0, 0.5),
            Exponential { rate } => x * -rate + rate.ln(),
        }
    }

    fn half_log_mass(&self) -> f64 {
        use PriorSpec::*;
        let base = match *self {
            HalfNormal { mu, sd } => PriorSpec::Normal { mu, sd },
            HalfT { loc, scale, df } => PriorSpec::StudentT { loc, scale, df },
            HalfCauchy { loc, scale } => PriorSpec::Cauchy { loc, scale },
            _ => return 0.0,
        };
        (1.0 - base.cdf(0.0)).ln()
    }

    /// Cumulative distribution function.
    pub fn cdf(&self, x: f64) -> f64 {
        use PriorSpec::*;
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match *self {
            Normal { mu, sd } => dist::Normal::new(mu, sd).unwrap().cdf(x),
            StudentT { loc, scale, df } => dist::StudentsT::new(loc, scale, df).unwrap().cdf(x),
            Cauchy { loc, scale } => dist::Cauchy::new(loc, scale).unwrap().cdf(x),
            Gamma { shape, rate } => dist::Gamma::new(shape, rate).unwrap().cdf(x),
            InverseGamma { shape, scale } => dist::InverseGamma::new(shape, scale).unwrap().cdf(x),
            Uniform { lower, upper } => dist::Uniform::new(lower, upper).unwrap().cdf(x),
            Beta { a, b } => dist::Beta::new(a, b).unwrap().cdf(x),
            BetaPm1 { a, b } => dist::Beta::new(a, b).unwrap().cdf((x + 1.0) / 2.0),
            HalfNormal { mu, sd } => half_cdf(dist::Normal::new(mu, sd).unwrap(), x),
            HalfT { loc, scale, df } => half_cdf(dist::StudentsT::new(loc, scale, df).unwrap(), x),
            HalfCauchy { loc, scale } => half_cdf(dist::Cauchy::new(loc, scale).unwrap(), x),
            ChiSquare { df } => dist::ChiSquared::new(df).unwrap().cdf(x),
            Exponential { rate } => dist::Exp::new(rate).unwrap().cdf(x),
        }
    }

    /// Probability mass the family puts on `domain`.
    pub fn mass_on(&self, domain: Domain) -> f64 {
        let (lo, hi) = domain.bounds();
        self.cdf(hi) - self.cdf(lo)
    }

    /// Display in the printed model layout, e.g. `normal (mu = 0 , sd = 0.5 )`.
    pub fn pretty(&self) -> String {
        use PriorSpec::*;
        let two = |name: &str, k1: &str, v1: f64, k2: &str, v2: f64| {
            format!("{name} ({k1} = {v1} , {k2} = {v2} )")
        };
        let three = |name: &str, loc: f64, scale: f64, df: f64| {
            format!("{name} (loc = {loc} ,scl = {scale} ,df = {df} )")
        };
        match *self {
            Normal { mu, sd } => two("normal", "mu", mu, "sd", sd),
            StudentT { loc, scale, df } => three("t", loc, scale, df),
            Cauchy { loc, scale } => two("cauchy", "loc", loc, "scl", scale),
            Gamma { shape, rate } => two("gamma", "form", shape, "rate", rate),
            InverseGamma { shape, scale } => two("inv_gamma", "form", shape, "scl", scale),
            Uniform { lower, upper } => two("uniform", "lower", lower, "upper", upper),
            Beta { a, b } | BetaPm1 { a, b } => two("beta", "form1", a, "form2", b),
            HalfNormal { mu, sd } => two("half_normal", "mu", mu, "sd", sd),
            HalfT { loc, scale, df } => three("half_t", loc, scale, df),
            HalfCauchy { loc, scale } => two("half_cauchy", "loc", loc, "scl", scale),
            ChiSquare { df } => format!("chi_square (df = {df} )"),
            Exponential { rate } => format!("exponential (rate = {rate} )"),
        }
    }
}

fn half_cdf<D: ContinuousCDF<f64, f64>>(d: D, x: f64) -> f64 {
    let below = d.cdf(0.0);
    (d.cdf(x) - below) / (1.0 - below)
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn normal_lpdf<T: Real>(x: T, mu: f64, sd: f64) -> T {
    let z = (x - mu) / sd;
    z.square() * -0.5 - (LN_SQRT_2PI + sd.ln())
}

fn student_t_lpdf<T: Real>(x: T, loc: f64, scale: f64, df: f64) -> T {
    let z = (x - loc) / scale;
    let norm = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * PI).ln() - scale.ln();
    (z.square() / df).ln_1p() * (-(df + 1.0) / 2.0) + norm
}

fn cauchy_lpdf<T: Real>(x: T, loc: f64, scale: f64) -> T {
    let z = (x - loc) / scale;
    -z.square().ln_1p() - (PI * scale).ln()
}

fn gamma_lpdf<T: Real>(x: T, shape: f64, rate: f64) -> T {
    x.ln() * (shape - 1.0) - x * rate + (shape * rate.ln() - ln_gamma(shape))
}

fn beta_lpdf<T: Real>(x: T, a: f64, b: f64) -> T {
    x.ln() * (a - 1.0) + (-x + 1.0).ln() * (b - 1.0) - ln_beta(a, b)
}

impl fmt::Display for PriorSpec {
    /// Textual syntax: `family(p1, p2[, p3])`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params().iter().map(|p| p.to_string()).collect();
        write!(f, "{}({})", self.family_name(), params.join(", "))
    }
}

impl FromStr for PriorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let open = s
            .find('(')
            .ok_or_else(|| Error::Parse(format!("expected `family(params)`, got `{s}`")))?;
        if !s.ends_with(')') {
            return Err(Error::Parse(format!("missing `)` in `{s}`")));
        }
        let name = s[..open].trim().to_ascii_lowercase();
        let inner = &s[open + 1..s.len() - 1];
        let args: Vec<f64> = if inner.trim().is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad prior parameter `{}` in `{s}`", a.trim())))
                })
                .collect::<Result<_>>()?
        };
        let want = |n: &[usize]| -> Result<()> {
            if n.contains(&args.len()) {
                Ok(())
            } else {
                Err(Error::Parse(format!(
                    "{name} takes {n:?} parameters, got {}",
                    args.len()
                )))
            }
        };
        let a = |i: usize| args[i];
        match name.as_str() {
            "normal" => {
                want(&[2])?;
                Self::normal(a(0), a(1))
            }
            "student_t" | "t" => {
                want(&[3])?;
                Self::student_t(a(0), a(1), a(2))
            }
            "cauchy" => {
                want(&[2])?;
                Self::cauchy(a(0), a(1))
            }
            "gamma" => {
                want(&[2])?;
                Self::gamma(a(0), a(1))
            }
            "inverse_gamma" | "inv_gamma" => {
                want(&[2])?;
                Self::inverse_gamma(a(0), a(1))
            }
            "uniform" => {
                want(&[2])?;
                Self::uniform(a(0), a(1))
            }
            "beta" => {
                want(&[2])?;
                Self::beta(a(0), a(1))
            }
            "beta_on_pm1" => {
                want(&[2])?;
                Self::beta_on_pm1(a(0), a(1))
            }
            "half_normal" => {
                want(&[1, 2])?;
                if args.len() == 1 {
                    Self::half_normal(0.0, a(0))
                } else {
                    Self::half_normal(a(0), a(1))
                }
            }
            "half_t" => {
                want(&[2, 3])?;
                if args.len() == 2 {
                    Self::half_t(0.0, a(0), a(1))
                } else {
                    Self::half_t(a(0), a(1), a(2))
                }
            }
            "half_cauchy" => {
                want(&[1, 2])?;
                if args.len() == 1 {
                    Self::half_cauchy(0.0, a(0))
                } else {
                    Self::half_cauchy(a(0), a(1))
                }
            }
            "chi_square" => {
                want(&[1])?;
                Self::chi_square(a(0))
            }
            "exponential" => {
                want(&[1])?;
                Self::exponential(a(0))
            }
            other => Err(Error::Parse(format!("unknown prior family `{other}`"))),
        }
    }
}

impl Serialize for PriorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PriorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Role of a model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Mu0,
    Sigma0,
    Ar,
    Ma,
    Sar,
    Sma,
    Breg,
    Arch,
    Garch,
    Dfv,
}

impl ParamKind {
    pub const ALL: [ParamKind; 10] = [
        ParamKind::Mu0,
        ParamKind::Sigma0,
        ParamKind::Ar,
        ParamKind::Ma,
        ParamKind::Sar,
        ParamKind::Sma,
        ParamKind::Breg,
        ParamKind::Arch,
        ParamKind::Garch,
        ParamKind::Dfv,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamKind::Mu0 => "mu0",
            ParamKind::Sigma0 => "sigma0",
            ParamKind::Ar => "ar",
            ParamKind::Ma => "ma",
            ParamKind::Sar => "sar",
            ParamKind::Sma => "sma",
            ParamKind::Breg => "breg",
            ParamKind::Arch => "arch",
            ParamKind::Garch => "garch",
            ParamKind::Dfv => "dfv",
        }
    }

    pub fn is_vector(self) -> bool {
        !matches!(self, ParamKind::Mu0 | ParamKind::Sigma0 | ParamKind::Dfv)
    }

    pub fn domain(self) -> Domain {
        match self {
            ParamKind::Mu0 | ParamKind::Breg => Domain::Real,
            ParamKind::Sigma0 => Domain::Positive,
            ParamKind::Ar | ParamKind::Ma | ParamKind::Sar | ParamKind::Sma => Domain::Pm1,
            ParamKind::Arch | ParamKind::Garch => Domain::Unit,
            ParamKind::Dfv => Domain::AboveTwo,
        }
    }

    /// Families a user may assign to this kind of parameter.
    pub fn allowed_families(self) -> &'static [&'static str] {
        match self {
            ParamKind::Mu0 | ParamKind::Breg => {
                &["normal", "student_t", "cauchy", "gamma", "uniform", "beta"]
            }
            ParamKind::Sigma0 => &[
                "gamma",
                "inverse_gamma",
                "half_normal",
                "chi_square",
                "half_t",
                "half_cauchy",
            ],
            ParamKind::Ar | ParamKind::Ma | ParamKind::Sar | ParamKind::Sma => {
                &["uniform", "normal", "beta_on_pm1"]
            }
            ParamKind::Arch | ParamKind::Garch => &["normal", "uniform", "beta"],
            ParamKind::Dfv => &["normal", "inverse_gamma", "exponential", "gamma"],
        }
    }
}

/// A parameter name such as `mu0` or `ar[2]` (indices start at 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamName {
    pub kind: ParamKind,
    pub index: usize,
}

impl ParamName {
    pub fn scalar(kind: ParamKind) -> Self {
        Self { kind, index: 0 }
    }

    pub fn indexed(kind: ParamKind, index: usize) -> Self {
        Self { kind, index }
    }

    /// Name in the printed model layout, `ar[ 1 ]`.
    pub fn pretty(&self) -> String {
        if self.kind.is_vector() {
            format!("{}[ {} ]", self.kind.label(), self.index)
        } else {
            self.kind.label().to_string()
        }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_vector() {
            write!(f, "{}[{}]", self.kind.label(), self.index)
        } else {
            f.write_str(self.kind.label())
        }
    }
}

fn kind_from_label(label: &str) -> Option<ParamKind> {
    ParamKind::ALL.into_iter().find(|k| k.label() == label)
}

/// Selector accepted by [`PriorSet::set_prior`]: one parameter or a whole group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelector {
    One(ParamName),
    Group(ParamKind),
}

impl FromStr for ParamSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(open) = compact.find('[') {
            let label = &compact[..open];
            let kind = kind_from_label(label)
                .filter(|k| k.is_vector())
                .ok_or_else(|| Error::UnknownParameter(s.trim().to_string()))?;
            let index: usize = compact[open + 1..]
                .strip_suffix(']')
                .and_then(|i| i.parse().ok())
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::UnknownParameter(s.trim().to_string()))?;
            Ok(ParamSelector::One(ParamName::indexed(kind, index)))
        } else {
            let kind = kind_from_label(&compact)
                .ok_or_else(|| Error::UnknownParameter(s.trim().to_string()))?;
            if kind.is_vector() {
                Ok(ParamSelector::Group(kind))
            } else {
                Ok(ParamSelector::One(ParamName::scalar(kind)))
            }
        }
    }
}

/// One parameter's prior, with the log of its mass on the parameter's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub index: usize,
    pub prior: PriorSpec,
    #[serde(skip)]
    log_mass: f64,
}

impl PriorEntry {
    pub fn param(&self) -> ParamName {
        ParamName {
            kind: self.kind,
            index: self.index,
        }
    }

    /// `ar[ 1 ] ~ normal (mu = 0 , sd = 0.5 )`
    pub fn line(&self) -> String {
        format!("{} ~ {}", self.param().pretty(), self.prior.pretty())
    }

    pub fn log_density<T: Real>(&self, x: T) -> T {
        self.prior.log_density(x) - self.log_mass
    }
}

/// Priors for every parameter of a model, in parameter-layout order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorSet {
    entries: Vec<PriorEntry>,
}

impl<'de> Deserialize<'de> for PriorSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            entries: Vec<PriorEntry>,
        }
        let raw = Raw::deserialize(d)?;
        let mut entries = Vec::with_capacity(raw.entries.len());
        for e in raw.entries {
            let log_mass = checked_log_mass(&e.param(), e.prior).map_err(serde::de::Error::custom)?;
            entries.push(PriorEntry { log_mass, ..e });
        }
        Ok(PriorSet { entries })
    }
}

fn checked_log_mass(param: &ParamName, prior: PriorSpec) -> Result<f64> {
    let reject = |reason: String| Error::PriorDomain {
        parameter: param.to_string(),
        prior: prior.to_string(),
        reason,
    };
    if !param.kind.allowed_families().contains(&prior.family_name()) {
        return Err(reject(format!(
            "{} parameters accept {}",
            param.kind.label(),
            param.kind.allowed_families().join(", ")
        )));
    }
    let mass = prior.mass_on(param.kind.domain());
    if !(mass > 0.0) {
        return Err(reject("the prior puts no mass on the parameter's domain".into()));
    }
    Ok(mass.ln())
}

impl PriorSet {
    /// Builds a set from `(parameter, prior)` pairs, validating each.
    pub fn new(pairs: impl IntoIterator<Item = (ParamName, PriorSpec)>) -> Result<Self> {
        let entries = pairs
            .into_iter()
            .map(|(param, prior)| {
                let log_mass = checked_log_mass(&param, prior)?;
                Ok(PriorEntry {
                    name: param.to_string(),
                    kind: param.kind,
                    index: param.index,
                    prior,
                    log_mass,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &ParamName) -> Option<&PriorEntry> {
        self.entries.iter().find(|e| e.param() == *name)
    }

    /// Returns a copy with `selector`'s parameters assigned `prior`.
    ///
    /// A plain `beta` prior on a `[-1, 1]` coefficient is read as the beta
    /// mapped onto `[-1, 1]`.
    pub fn set_prior(&self, selector: &str, prior: PriorSpec) -> Result<Self> {
        let sel: ParamSelector = selector.parse()?;
        let mut out = self.clone();
        let mut hit = false;
        for e in &mut out.entries {
            let matches = match sel {
                ParamSelector::One(p) => e.param() == p,
                ParamSelector::Group(k) => e.kind == k,
            };
            if !matches {
                continue;
            }
            let prior = match prior {
                PriorSpec::Beta { a, b } if e.kind.domain() == Domain::Pm1 => PriorSpec::BetaPm1 { a, b },
                other => other,
            };
            e.log_mass = checked_log_mass(&e.param(), prior)?;
            e.prior = prior;
            hit = true;
        }
        if !hit {
            return Err(Error::UnknownParameter(selector.trim().to_string()));
        }
        Ok(out)
    }

    /// Printed prior lines for a parameter or group.
    pub fn get_prior(&self, selector: &str) -> Result<Vec<String>> {
        let sel: ParamSelector = selector.parse()?;
        let lines: Vec<String> = self
            .entries
            .iter()
            .filter(|e| match sel {
                ParamSelector::One(p) => e.param() == p,
                ParamSelector::Group(k) => e.kind == k,
            })
            .map(PriorEntry::line)
            .collect();
        if lines.is_empty() {
            return Err(Error::UnknownParameter(selector.trim().to_string()));
        }
        Ok(lines)
    }

    /// Sum of log prior densities at constrained values given in entry order.
    pub fn log_prior<T: Real>(&self, constrained: &[T]) -> T {
        self.entries
            .iter()
            .zip(constrained)
            .fold(T::zero(), |acc, (e, &x)| acc + e.log_density(x))
    }

    /// Parses `name ~ family(p1, p2[, p3])` lines and applies them in order.
    pub fn apply_overrides<S: AsRef<str>>(&self, lines: &[S]) -> Result<Self> {
        let mut out = self.clone();
        for line in lines {
            let (name, prior) = parse_prior_line(line.as_ref())?;
            out = out.set_prior(&name, prior)?;
        }
        Ok(out)
    }
}

/// Splits `ar ~ beta(2, 2)` into its selector and prior.
pub fn parse_prior_line(line: &str) -> Result<(String, PriorSpec)> {
    let (name, prior) = line
        .split_once('~')
        .ok_or_else(|| Error::Parse(format!("expected `name ~ family(...)`, got `{line}`")))?;
    Ok((name.trim().to_string(), prior.parse()?))
}

/// Default weakly informative priors for a parameter layout.
pub fn default_priors(layout: &[ParamName]) -> PriorSet {
    let pairs = layout.iter().map(|p| {
        let prior = match p.kind {
            ParamKind::Mu0 | ParamKind::Breg => PriorSpec::StudentT {
                loc: 0.0,
                scale: 2.5,
                df: 6.0,
            },
            ParamKind::Sigma0 => PriorSpec::HalfT {
                loc: 0.0,
                scale: 1.0,
                df: 7.0,
            },
            ParamKind::Ar
            | ParamKind::Ma
            | ParamKind::Sar
            | ParamKind::Sma
            | ParamKind::Arch
            | ParamKind::Garch => PriorSpec::Normal { mu: 0.0, sd: 0.5 },
            ParamKind::Dfv => PriorSpec::Gamma {
                shape: 2.0,
                rate: 0.1,
            },
        };
        (*p, prior)
    });
    PriorSet::new(pairs).expect("default priors are valid for their parameters")
}
