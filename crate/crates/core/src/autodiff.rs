//! Forward-mode differentiation with batched dual numbers.
//!
//! Model code is written once against [`Real`] and evaluated either with
//! `f64` (plain value) or with [`Dual<N>`], which carries `N` tangent
//! directions per pass. A gradient of a `P`-dimensional function costs
//! `ceil(P / N)` passes.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use statrs::function::gamma::{digamma, ln_gamma};

/// Scalar arithmetic shared by values and duals.
pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn ln_gamma(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    /// `1 / (1 + exp(-x))`
    fn logistic(self) -> Self {
        let one = Self::cst(1.0);
        one / ((-self).exp() + 1.0)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn ln_gamma(self) -> Self {
        ln_gamma(self)
    }
}

/// A value with `N` tangent components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; N] }
    }

    /// Seeds tangent slot `slot` with 1.
    pub fn variable(re: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Self { re, eps }
    }

    #[inline]
    fn chain(self, re: f64, dfdx: f64) -> Self {
        let mut eps = self.eps;
        for e in &mut eps {
            *e *= dfdx;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let re = self.re / rhs.re;
        let inv = 1.0 / rhs.re;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in &mut self.eps {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re *= rhs;
        for e in &mut self.eps {
            *e *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(mut self, rhs: f64) -> Self {
        self.re /= rhs;
        for e in &mut self.eps {
            *e /= rhs;
        }
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re)
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), 1.0 / (1.0 + self.re))
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.chain(r, 0.5 / r)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn powi(self, n: i32) -> Self {
        self.chain(self.re.powi(n), f64::from(n) * self.re.powi(n - 1))
    }
    fn ln_gamma(self) -> Self {
        self.chain(ln_gamma(self.re), digamma(self.re))
    }
}

/// A scalar function of a real vector that can be evaluated generically.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn eval<T: Real>(&self, x: &[T]) -> T;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl GradientResult {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

fn gradient_chunked<F: Objective + ?Sized, const N: usize>(f: &F, x: &[f64]) -> GradientResult {
    let p = x.len();
    let mut gradient = vec![0.0; p];
    let mut value = f64::NAN;
    let mut start = 0;
    let mut point: Vec<Dual<N>> = x.iter().map(|&v| Dual::constant(v)).collect();
    while start < p {
        let end = (start + N).min(p);
        for (i, d) in point.iter_mut().enumerate() {
            *d = if (start..end).contains(&i) {
                Dual::variable(x[i], i - start)
            } else {
                Dual::constant(x[i])
            };
        }
        let out = f.eval(&point);
        if start == 0 {
            value = out.re;
        }
        gradient[start..end].copy_from_slice(&out.eps[..end - start]);
        start = end;
    }
    if p == 0 {
        value = f.eval::<f64>(x);
    }
    GradientResult { value, gradient }
}

/// Value and exact gradient of `f` at `x`.
pub fn gradient<F: Objective + ?Sized>(f: &F, x: &[f64]) -> GradientResult {
    match x.len() {
        0..=4 => gradient_chunked::<F, 4>(f, x),
        5..=8 => gradient_chunked::<F, 8>(f, x),
        _ => gradient_chunked::<F, 16>(f, x),
    }
}

/// Central-difference gradient with step `h`.
pub fn finite_diff_gradient<F: Objective + ?Sized>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f.eval::<f64>(&work);
            work[i] = x[i] - h;
            let down = f.eval::<f64>(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|ad - fd| / (|ad| + |fd| + 1e-12)` over coordinates.
pub fn finite_diff_check<F: Objective + ?Sized>(f: &F, x: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    let ad = gradient(f, x).gradient;
    let fd = finite_diff_gradient(f, x, h);
    ad.iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / (a.abs() + b.abs() + 1e-12))
        .fold(0.0, f64::max)
}
