//! Regularized incomplete gamma machinery on the complex plane.
//!
//! Everything here is built from three primitives, chosen per argument to
//! avoid catastrophic cancellation:
//!
//! * `sb_series`:  S(a,z) = sum_n z^n / Gamma(a+n+1), entire, all terms of one
//!   sign for Re z >= 0.  P(a,z) = z^a e^-z S(a,z).
//! * `ta_series`:  T(a,z) = sum_n (-z)^n / (n! (a+n)), entire, all terms of one
//!   sign for Re z <= 0.  P(a,z) = z^a T(a,z) / Gamma(a).
//! * `upper_cf`:   modified-Lentz continued fraction for the upper function,
//!   Q(a,z) = e^-z z^a / Gamma(a) * cf(a,z), effective for large |z| away
//!   from the negative real axis.

use crate::error::{Error, Result};
use num_complex::Complex64;
use statrs::function::gamma::ln_gamma;

pub(crate) const REL_TOL: f64 = 2e-15;
const MAX_TERMS: usize = 20_000;

/// Geometric tail bound: with observed ratio `rho < 1/2`, the remainder after
/// the current term `t` is below `|t| rho / (1 - rho)`.  The absolute floor
/// scales with the largest term seen so far: once terms have cancelled, digits
/// below `eps * peak` are unrecoverable, so there is no point summing past
/// that.  A fixed absolute floor would truncate sums whose value is simply
/// small (e.g. `S(a, z)` at large `a` is of size `1/Gamma(a+1)`) with a huge
/// relative error.
#[inline]
pub(crate) fn tail_converged(term: f64, ratio: f64, partial: f64, peak: f64) -> bool {
    let floor = (f64::EPSILON * peak).max(f64::MIN_POSITIVE);
    ratio < 0.5 && term * ratio / (1.0 - ratio) < floor.max(REL_TOL * partial.abs())
}

/// S(a,z) = sum_n z^n / Gamma(a+n+1).
pub(crate) fn sb_series(a: f64, z: Complex64) -> Result<Complex64> {
    let mut term = Complex64::new((-ln_gamma(a + 1.0)).exp(), 0.0);
    let mut sum = term;
    let mut peak = term.norm();
    for n in 0..MAX_TERMS {
        let prev = term.norm();
        term *= z / (a + n as f64 + 1.0);
        sum += term;
        peak = peak.max(term.norm());
        let ratio = if prev > 0.0 { term.norm() / prev } else { 1.0 };
        if tail_converged(term.norm(), ratio, sum.norm(), peak) {
            return Ok(sum);
        }
    }
    Err(Error::SeriesDivergence(format!(
        "incomplete gamma power series at a={a}, |z|={}",
        z.norm()
    )))
}

/// T(a,z) = sum_n (-z)^n / (n! (a+n)), returned as `(mantissa, ln_scale)` with
/// value = mantissa * exp(ln_scale); the scale absorbs growth ~ e^|z|.
pub(crate) fn ta_series_scaled(a: f64, z: Complex64) -> Result<(Complex64, f64)> {
    let mut ln_scale = 0.0f64;
    let mut term = Complex64::new(1.0, 0.0); // (-z)^n / n!
    let mut sum = Complex64::new(1.0 / a, 0.0);
    let mut prev_add = sum.norm();
    let mut peak = prev_add;
    for n in 0..MAX_TERMS {
        let nf = n as f64;
        term *= -z / (nf + 1.0);
        let add = term / (a + nf + 1.0);
        sum += add;
        peak = peak.max(add.norm());
        let ratio = if prev_add > 0.0 { add.norm() / prev_add } else { 1.0 };
        prev_add = add.norm();
        if term.norm() > 1e250 {
            term *= 1e-250;
            sum *= 1e-250;
            prev_add *= 1e-250;
            peak *= 1e-250;
            ln_scale += 250.0 * std::f64::consts::LN_10;
        }
        if n > 2 && tail_converged(add.norm(), ratio, sum.norm(), peak) {
            return Ok((sum, ln_scale));
        }
    }
    Err(Error::SeriesDivergence(format!(
        "alternating incomplete gamma series at a={a}, |z|={}",
        z.norm()
    )))
}

/// `ln Gamma(a+1) - [(a + 1/2) ln a - a + ln sqrt(2 pi)]`, the Stirling
/// remainder.  Entering exponents additively, it needs absolute (not
/// relative) accuracy, which the direct difference delivers for small `a` and
/// the asymptotic series for large.
fn stirlerr(a: f64) -> f64 {
    if a < 15.0 {
        return ln_gamma(a + 1.0) - (a + 0.5) * a.ln() + a
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let i2 = 1.0 / (a * a);
    // next omitted term is below 3e-16 at a = 15
    (1.0 / 12.0
        - (1.0 / 360.0 - (1.0 / 1260.0 - (1.0 / 1680.0 - i2 / 1188.0) * i2) * i2) * i2)
        / a
}

/// Deviance `a ln(a/x) + x - a >= 0` without the cancellation that the
/// literal expression suffers at `x ~ a`.
fn bd0(a: f64, x: f64) -> f64 {
    if (a - x).abs() < 0.1 * (a + x) {
        let v = (a - x) / (a + x);
        let mut s = (a - x) * v; // (a-x)^2/(a+x)
        let mut ej = 2.0 * a * v * v * v;
        let mut j = 1.0f64;
        loop {
            let s1 = s + ej / (2.0 * j + 1.0);
            if s1 == s {
                return s1;
            }
            s = s1;
            ej *= v * v;
            j += 1.0;
        }
    }
    a * (a / x).ln() + x - a
}

/// Poisson point kernel `x^a e^-x / Gamma(a+1)` for `a > 0`, `x >= 0`.
///
/// Exact exponents of size ~a cancel inside `bd0`/`stirlerr` analytically, so
/// the result keeps near-eps relative accuracy even where the naive
/// `exp(a ln x - x - ln Gamma(a+1))` loses `|exponent| * eps`.
pub(crate) fn poisson_kernel(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if a < 10.0 {
        return (a * x.ln() - x - ln_gamma(a + 1.0)).exp();
    }
    (-stirlerr(a) - bd0(a, x)).exp() / (2.0 * std::f64::consts::PI * a).sqrt()
}

/// Regularized lower incomplete gamma P(a, x) on the real axis.  Unlike the
/// complex routine this never forms `x^a` or `Gamma(a)` alone, so it stays
/// accurate (and finite) for arbitrarily large `a`.
pub(crate) fn reg_lower_real(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::invalid(format!("gamma shape must be positive, got {a}")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x < a + 1.0 {
        // P = kernel * (1 + x/(a+1) + x^2/((a+1)(a+2)) + ...)
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        for k in 1..MAX_TERMS {
            term *= x / (a + k as f64);
            sum += term;
            let r = x / (a + k as f64 + 1.0);
            if term * r / (1.0 - r) < 1e-16 * sum {
                return Ok(poisson_kernel(a, x) * sum);
            }
        }
        return Err(Error::SeriesDivergence(format!(
            "lower gamma series at a={a}, x={x}"
        )));
    }
    // right of the mean: Q = kernel * a * cf, and P = 1 - Q costs at most
    // one digit since Q < 0.6 here
    let cf = upper_cf(a, Complex64::new(x, 0.0))?;
    Ok((1.0 - poisson_kernel(a, x) * a * cf.re).clamp(0.0, 1.0))
}

/// Continued-fraction factor for the upper function:
/// Gamma(a,z) = e^-z z^a * cf(a,z).
pub(crate) fn upper_cf(a: f64, z: Complex64) -> Result<Complex64> {
    let tiny = Complex64::new(1e-300, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let mut b = z + (1.0 - a);
    let mut c = Complex64::new(1e300, 0.0);
    let mut d = b;
    if d.norm() < 1e-300 {
        d = tiny;
    }
    d = one / d;
    let mut f = d;
    for i in 1..MAX_TERMS {
        let ai = -(i as f64) * (i as f64 - a);
        b += Complex64::new(2.0, 0.0);
        d = b + ai * d;
        if d.norm() < 1e-300 {
            d = tiny;
        }
        c = b + ai / c;
        if c.norm() < 1e-300 {
            c = tiny;
        }
        d = one / d;
        let delta = c * d;
        f *= delta;
        if (delta - one).norm() < 1e-15 {
            return Ok(f);
        }
    }
    Err(Error::SeriesDivergence(format!(
        "upper incomplete gamma continued fraction at a={a}, z={z}"
    )))
}

/// Regularized lower incomplete gamma P(a,z), principal branch of z^a,
/// single-valued continuation off the positive axis.
pub(crate) fn reg_lower(a: f64, z: Complex64) -> Result<Complex64> {
    if z.norm() == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let za = (a * z.ln()).exp();
    // series cancellation exponent: |z| - |Re z|
    let kappa = z.norm() - z.re.abs();
    if z.norm() <= a + 8.0 && kappa <= 14.0 {
        if z.re >= 0.0 {
            let s = sb_series(a, z)?;
            return Ok(za * (-z).exp() * s);
        }
        let (t, ln_scale) = ta_series_scaled(a, z)?;
        return Ok(za * t * (ln_scale - ln_gamma(a)).exp());
    }
    if z.arg().abs() <= 2.6 {
        let cf = upper_cf(a, z)?;
        let q = za * (-z).exp() * cf * (-ln_gamma(a)).exp();
        return Ok(Complex64::new(1.0, 0.0) - q);
    }
    let (t, ln_scale) = ta_series_scaled(a, z)?;
    Ok(za * t * (ln_scale - ln_gamma(a)).exp())
}
