//! Quadrature rules used by the series and integral CDF routes.
//!
//! Nodes and weights come from the Golub-Welsch eigenvalue construction on
//! the symmetric recurrence (Jacobi) matrix of the orthogonal polynomial
//! family, so a single code path serves Gauss-Legendre and Gauss-Jacobi.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

/// One-dimensional rule: paired nodes and weights.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Affine image of the rule on `(lo, hi)`; weights scale with the interval.
    pub fn mapped_to(&self, lo: f64, hi: f64) -> Rule {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        Rule {
            nodes: self.nodes.iter().map(|t| mid + half * t).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

fn golub_welsch(diag: &[f64], offdiag: &[f64], mu0: f64) -> Rule {
    let n = diag.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (i, d) in diag.iter().enumerate() {
        m[(i, i)] = *d;
    }
    for (i, e) in offdiag.iter().enumerate() {
        m[(i, i + 1)] = *e;
        m[(i + 1, i)] = *e;
    }
    let eig = m.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss-Legendre rule on `(-1, 1)`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Gauss-Jacobi rule for the weight `(1-x)^a (1+x)^b` on `(-1, 1)`.
///
/// Requires `a > -1`, `b > -1`.
pub fn gauss_jacobi(n: usize, a: f64, b: f64) -> Result<Rule> {
    if !(a > -1.0 && b > -1.0) {
        return Err(Error::BetaDomain(format!(
            "Jacobi weight exponents must exceed -1, got ({a}, {b})"
        )));
    }
    assert!(n >= 1);
    let ab = a + b;
    let mut diag = Vec::with_capacity(n);
    let mut offdiag = Vec::with_capacity(n.saturating_sub(1));
    diag.push((b - a) / (ab + 2.0));
    for k in 1..n {
        let k = k as f64;
        let den = (2.0 * k + ab) * (2.0 * k + ab + 2.0);
        diag.push(if a == b { 0.0 } else { (b * b - a * a) / den });
        let beta_k = if k == 1.0 {
            4.0 * (a + 1.0) * (b + 1.0) / ((ab + 2.0) * (ab + 2.0) * (ab + 3.0))
        } else {
            4.0 * k * (k + a) * (k + b) * (k + ab)
                / ((2.0 * k + ab).powi(2) * (2.0 * k + ab + 1.0) * (2.0 * k + ab - 1.0))
        };
        offdiag.push(beta_k.sqrt());
    }
    let mu0 = ((ab + 1.0) * std::f64::consts::LN_2 + ln_beta(a + 1.0, b + 1.0)).exp();
    Ok(golub_welsch(&diag, &offdiag, mu0))
}

/// Nodes and weights for `int_0^oo h(y) y^(alpha-1) dy` truncated at `y_cut`.
///
/// The `y^(alpha-1)` factor sits in the weights (exactly on the leading
/// segment, where it may be singular), so `h` must carry the exponential decay
/// of the true integrand. `y_cut` should cover that decay.
pub fn power_weighted_nodes(alpha: f64, y_cut: f64, panel_order: usize) -> Result<Rule> {
    assert!(alpha > 0.0 && y_cut > 2.0);
    // Leading segment (0, 2): Jacobi weight (1+t)^(alpha-1), y = 1 + t.
    let lead = gauss_jacobi(panel_order, 0.0, alpha - 1.0)?;
    let mut nodes: Vec<f64> = lead.nodes.iter().map(|t| 1.0 + t).collect();
    let mut weights = lead.weights.clone();
    // Remaining panels: plain Gauss-Legendre with the power folded in.
    let base = gauss_legendre(panel_order);
    let mut lo = 2.0;
    while lo < y_cut {
        let hi = (lo + 3.0).min(y_cut);
        let panel = base.mapped_to(lo, hi);
        for (y, w) in panel.iter() {
            nodes.push(y);
            weights.push(w * y.powf(alpha - 1.0));
        }
        lo = hi;
    }
    Ok(Rule { nodes, weights })
}

/// Cut point after which `y^(m-1) e^-y / Gamma(m)` holds less than ~1e-16 mass.
pub fn gamma_tail_cut(order: f64) -> f64 {
    let m = order.max(1.0);
    m + 12.0 * m.sqrt() + 35.0
}

/// Deterministic pairwise summation; bit-stable regardless of chunking above.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::gamma;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(8);
        // degree up to 15 is exact
        for k in 0..=7 {
            let exact = 2.0 / (2.0 * k as f64 + 1.0);
            let got: f64 = rule.iter().map(|(x, w)| w * x.powi(2 * k)).sum();
            assert!((got - exact).abs() < 1e-13, "k={k} got={got} exact={exact}");
        }
        let odd: f64 = rule.iter().map(|(x, w)| w * x.powi(3)).sum();
        assert!(odd.abs() < 1e-14);
    }

    #[test]
    fn jacobi_matches_beta_moments() {
        // weight (1-x)^a (1+x)^b: int x^0 = 2^(a+b+1) B(a+1,b+1)
        for &(a, b) in &[(0.5, -0.3), (1.7, 0.0), (-0.5, -0.5), (0.0, 2.25)] {
            let rule = gauss_jacobi(12, a, b).unwrap();
            let mass: f64 = rule.weights.iter().sum();
            let exact = ((a + b + 1.0) * std::f64::consts::LN_2 + ln_beta(a + 1.0, b + 1.0)).exp();
            assert!(
                (mass - exact).abs() < 1e-12 * exact,
                "(a,b)=({a},{b}) mass={mass} exact={exact}"
            );
            // first moment: int x w(x) dx = mass * (b-a)/(a+b+2)
            let m1: f64 = rule.iter().map(|(x, w)| w * x).sum();
            let exact1 = exact * (b - a) / (a + b + 2.0);
            assert!((m1 - exact1).abs() < 1e-12 * exact.max(1.0));
        }
    }

    #[test]
    fn jacobi_zero_exponents_reduce_to_legendre() {
        let gj = gauss_jacobi(9, 0.0, 0.0).unwrap();
        let gl = gauss_legendre(9);
        for i in 0..9 {
            assert!((gj.nodes[i] - gl.nodes[i]).abs() < 1e-12);
            assert!((gj.weights[i] - gl.weights[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_rejects_bad_exponents() {
        assert!(gauss_jacobi(4, -1.0, 0.0).is_err());
        assert!(gauss_jacobi(4, 0.0, -1.2).is_err());
    }

    #[test]
    fn power_weighted_nodes_reproduce_gamma_function() {
        // int_0^oo e^-y y^(alpha-1) dy = Gamma(alpha), including alpha < 1
        for &alpha in &[0.6, 1.0, 1.75, 3.2] {
            let rule = power_weighted_nodes(alpha, gamma_tail_cut(alpha), 24).unwrap();
            let got: f64 = rule.iter().map(|(y, w)| w * (-y).exp()).sum();
            let exact = gamma(alpha);
            assert!(
                (got - exact).abs() < 1e-12 * exact,
                "alpha={alpha} got={got} exact={exact}"
            );
        }
        // moments against shifted orders: int y^n e^-y y^(alpha-1) = Gamma(alpha+n)
        let alpha = 0.8;
        let n_max = 18;
        let rule = power_weighted_nodes(alpha, gamma_tail_cut(alpha + n_max as f64), 24).unwrap();
        for n in 0..=n_max {
            let got: f64 = rule.iter().map(|(y, w)| w * y.powi(n) * (-y).exp()).sum();
            let exact = gamma(alpha + n as f64);
            assert!(
                ((got - exact) / exact).abs() < 1e-11,
                "n={n} got={got} exact={exact}"
            );
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_smooth_data() {
        let xs: Vec<f64> = (0..1001).map(|i| ((i as f64) * 0.37).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }
}
