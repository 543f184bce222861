//! Bessel J by Miller's downward recurrence, batched over an order ladder.
//!
//! The noncentral CDF continued to negative noncentrality needs
//! 0F1(b; -s) = Gamma(b) s^-((b-1)/2) J_{b-1}(2 sqrt s) for a whole ladder of
//! orders b = a+1, a+2, ...; the naive alternating series loses ~e^(2 sqrt s)
//! digits, while one downward pass is uniformly stable and serves every order
//! at once.  The huge Gamma prefactors are cancelled multiplicatively against
//! powers of sqrt(s), never through exp/ln round trips: exponent arithmetic on
//! logs of size ~500 caps relative accuracy near 1e-13, which the contour
//! kernels sitting on top of these values cannot afford.

use crate::error::{Error, Result};
use statrs::function::gamma::ln_gamma;

pub(crate) struct ScaledLadder {
    /// `J_{nu0 + j}(z)` up to one common factor.
    pub mantissas: Vec<f64>,
    /// Normalization sum in mantissa units; the common factor is
    /// `(z/2)^mu / norm` with `mu` the fractional part of `nu0`.
    pub norm: f64,
}

/// `J_{nu0 + j}(z)` for `j = 0..count` as a commonly scaled ladder;
/// real `z > 0`, `nu0 >= 0`.
pub(crate) fn bessel_j_ladder_scaled(nu0: f64, count: usize, z: f64) -> Result<ScaledLadder> {
    assert!(z > 0.0 && nu0 >= 0.0 && count >= 1);
    if !z.is_finite() {
        return Err(Error::invalid(format!("Bessel argument {z} not finite")));
    }
    let mu = nu0 - nu0.floor(); // fractional part shared by the whole ladder
    let top_needed = nu0 + count as f64;
    // start far enough above both the largest order and the turning point
    // nu ~ z where J only begins to decay
    let start = (top_needed.max(2.0 * z) + 30.0 + 3.0 * top_needed.max(z).sqrt()).ceil() as usize;
    let n_steps = start + 2;
    let mut f = vec![0.0f64; n_steps + 1];
    f[n_steps] = 0.0;
    f[n_steps - 1] = 1e-290;
    for j in (0..n_steps - 1).rev() {
        let nu = mu + (j + 1) as f64;
        f[j] = (2.0 * nu / z) * f[j + 1] - f[j + 2];
        if f[j].abs() > 1e260 {
            // linear homogeneous recurrence: rescaling every computed entry
            // keeps the array consistent up to one global factor
            for v in f[j..].iter_mut() {
                *v *= 1e-260;
            }
        }
    }
    // normalization: sum_k c_k J_{mu+2k}(z) = (z/2)^mu with
    // c_0 = Gamma(mu+1) (the mu -> 0 limit of mu Gamma(mu)) and, for k >= 1,
    // c_k = (mu+2k) Gamma(mu+k) / k!
    let mut c = (ln_gamma(mu + 1.0)).exp();
    let mut s = c * f[0];
    let mut k = 0usize;
    loop {
        let kf = k as f64;
        let ratio = if k == 0 {
            mu + 2.0
        } else {
            (mu + 2.0 * kf + 2.0) * (mu + kf) / ((mu + 2.0 * kf) * (kf + 1.0))
        };
        c *= ratio;
        k += 1;
        let idx = 2 * k;
        if idx >= f.len() {
            break;
        }
        s += c * f[idx];
    }
    if s == 0.0 || !s.is_finite() {
        return Err(Error::SeriesDivergence(format!(
            "Bessel normalization failed at nu0={nu0}, z={z}"
        )));
    }
    let base = (nu0 - mu).round() as usize;
    Ok(ScaledLadder {
        mantissas: f[base..base + count].to_vec(),
        norm: s,
    })
}

/// `J_{nu0 + j}(z)` for `j = 0..count`, plain values.
#[cfg(test)]
pub(crate) fn bessel_j_ladder(nu0: f64, count: usize, z: f64) -> Result<Vec<f64>> {
    let l = bessel_j_ladder_scaled(nu0, count, z)?;
    let mu = nu0 - nu0.floor();
    let c = (z / 2.0).powf(mu) / l.norm;
    Ok(l.mantissas.iter().map(|m| m * c).collect())
}

/// 0F1(b; w) for real w < 0 through the J ladder: entries for
/// b = b0 + j, j = 0..count.
///
/// With hz = sqrt(s) = sqrt(-w), the prefactor reduces against the ladder
/// scale to `Gamma(b0+j) hz^-(base+j)` (base = floor(b0-1)), which is carried
/// by one multiply-and-divide per rung; prefactor and mantissa stay
/// individually inside f64 range on every rung whose mantissa has not
/// underflowed, because their product is the bounded value 0F1.
pub(crate) fn hyp0f1_neg_ladder(b0: f64, count: usize, w: f64) -> Result<Vec<f64>> {
    assert!(w < 0.0 && b0 > 0.0);
    let s = -w;
    let hz = s.sqrt();
    let nu0 = b0 - 1.0;
    let ladder = bessel_j_ladder_scaled(nu0, count, 2.0 * hz)?;
    let peak = ladder.mantissas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mu = nu0 - nu0.floor();
    let base = (nu0 - mu).round() as usize;
    // fac_j = Gamma(b0+j) hz^-(base+j), grown from Gamma(mu+1) one order at a
    // time so it is never split into a separately overflowing pair
    let mut fac = (ln_gamma(mu + 1.0)).exp();
    for i in 0..base {
        fac *= (mu + 1.0 + i as f64) / hz;
    }
    let mut out = Vec::with_capacity(count);
    let mut dead = false; // mantissa underflow is one-way along the ladder
    for (j, m) in ladder.mantissas.iter().enumerate() {
        let b = b0 + j as f64;
        dead = dead || m.abs() < peak * 1e-250;
        if dead {
            // the shared scale cannot span this far above the turning point;
            // up here the direct series is first-term dominated anyway
            out.push(series_0f1(b, w));
            continue;
        }
        out.push(fac * (m / ladder.norm));
        fac *= b / hz;
    }
    Ok(out)
}

/// Direct power series; only sound where it is first-term dominated.
fn series_0f1(b: f64, w: f64) -> f64 {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for n in 0..10_000 {
        let nf = n as f64;
        term *= w / ((b + nf) * (nf + 1.0));
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-280) {
            break;
        }
    }
    sum
}
