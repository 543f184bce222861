//! CDF routes for correlation matrices of the form `R = W^-2 + a a^T`.
//!
//! Everything here reduces the p-variate probability to one outer integral
//! against a gamma weight, of either a shell series in order-shifted CDF
//! factors (one factor per coordinate) or, when the noncentrality has rank
//! one, a double integral with an angular weight.  Three parameter regimes
//! share the machinery: all loading squares below one (direct factors),
//! imaginary loadings or one square above one (determinant-scaled factors
//! with signed shell weights), and the boundary case of one square exactly
//! one, where the affected factor degenerates to a step and truncates the
//! outer integral instead.

use crate::error::{Error, Result};
use crate::matrix::{
    one_factor_decompose, transformed_noncentrality, CorrelationModel, NoncentralityModel,
    OneFactorDecomposition, Regime,
};
use crate::quad::{
    gamma_tail_cut, gauss_jacobi, gauss_legendre, pairwise_sum, power_weighted_nodes, Rule,
};
use crate::special::{
    gamma_pdf, gstar_order_ladder, gstar_reduced, hyp0f1_real, noncentral_gamma_cdf,
    noncentral_gamma_pdf, reg_gamma_table,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;

/// Series truncation cap; shells still undecayed here are treated as
/// divergent rather than silently truncated.
pub const SHELL_CAP: usize = 60;

const COMP_ENTRY_CAP: usize = 200_000;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("shape parameter must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_lengths(x: &[f64], of: &OneFactorDecomposition) -> Result<()> {
    if x.len() != of.dim() {
        return Err(Error::invalid(format!(
            "threshold vector length {} does not match dimension {}",
            x.len(),
            of.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("thresholds must be finite"));
    }
    Ok(())
}

/// Rebuilds the correlation matrix `W^-2 + a a^T` encoded by a decomposition.
/// Diagonal entries are exactly 1 by construction, including at a limit index.
fn correlation_from(of: &OneFactorDecomposition) -> Result<CorrelationModel> {
    let p = of.dim();
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let r = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            sign * of.a[i] * of.a[j]
        }
    });
    CorrelationModel::new(r)
}

/// Coefficient of `prod_j s_j^(n_j)` in `(s^T D s)^n / n!` where `2n` is the
/// total degree.  Closed forms cover p <= 3; higher dimensions enumerate the
/// upper-triangle exponent matrices directly.
pub fn quadratic_form_coeff(d: &DMatrix<f64>, n: &[usize]) -> Result<f64> {
    let p = n.len();
    if d.nrows() != p || d.ncols() != p {
        return Err(Error::invalid(format!(
            "coefficient matrix is {}x{} but the exponent tuple has length {p}",
            d.nrows(),
            d.ncols()
        )));
    }
    let total: usize = n.iter().sum();
    if total % 2 != 0 {
        return Err(Error::invalid(format!(
            "total degree {total} is odd; only even degrees occur in the expansion"
        )));
    }
    let dstar = |i: usize, j: usize| if i == j { d[(i, i)] } else { 2.0 * d[(i, j)] };
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    match p {
        0 => Ok(1.0),
        1 => {
            let half = n[0] / 2;
            Ok(d[(0, 0)].powi(half as i32) / fact(half))
        }
        2 => {
            let (n1, n2) = (n[0], n[1]);
            let mut sum = 0.0;
            for n12 in 0..=n1.min(n2) {
                if (n1 - n12) % 2 != 0 || (n2 - n12) % 2 != 0 {
                    continue;
                }
                let n11 = (n1 - n12) / 2;
                let n22 = (n2 - n12) / 2;
                sum += dstar(0, 0).powi(n11 as i32) / fact(n11)
                    * dstar(1, 1).powi(n22 as i32) / fact(n22)
                    * dstar(0, 1).powi(n12 as i32) / fact(n12);
            }
            Ok(sum)
        }
        3 => {
            let (n1, n2, n3) = (n[0], n[1], n[2]);
            let mut sum = 0.0;
            for n11 in 0..=n1 / 2 {
                for n22 in 0..=n2 / 2 {
                    for n33 in 0..=n3 / 2 {
                        // off-diagonal exponents are forced by the degree
                        // constraints once the diagonal ones are chosen
                        let off = |ni: usize, nj: usize, nk: usize, nii: usize, njj: usize, nkk: usize| -> Option<usize> {
                            let s = (ni + nj) as i64 - nk as i64;
                            if s % 2 != 0 {
                                return None;
                            }
                            let v = s / 2 - (nii + njj) as i64 + nkk as i64;
                            usize::try_from(v).ok()
                        };
                        let (Some(n12), Some(n13), Some(n23)) = (
                            off(n1, n2, n3, n11, n22, n33),
                            off(n1, n3, n2, n11, n33, n22),
                            off(n2, n3, n1, n22, n33, n11),
                        ) else {
                            continue;
                        };
                        if 2 * n11 + n12 + n13 != n1 || 2 * n22 + n12 + n23 != n2 {
                            continue;
                        }
                        sum += dstar(0, 0).powi(n11 as i32) / fact(n11)
                            * dstar(1, 1).powi(n22 as i32) / fact(n22)
                            * dstar(2, 2).powi(n33 as i32) / fact(n33)
                            * dstar(0, 1).powi(n12 as i32) / fact(n12)
                            * dstar(0, 2).powi(n13 as i32) / fact(n13)
                            * dstar(1, 2).powi(n23 as i32) / fact(n23);
                    }
                }
            }
            Ok(sum)
        }
        _ => {
            // enumerate exponents over the strict upper triangle; diagonals
            // absorb whatever even remainder each coordinate has left
            let pairs: Vec<(usize, usize)> =
                (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
            let mut sum = 0.0;
            let mut rem: Vec<i64> = n.iter().map(|v| *v as i64).collect();
            fn rec(
                pairs: &[(usize, usize)],
                idx: usize,
                rem: &mut Vec<i64>,
                acc: f64,
                dstar: &dyn Fn(usize, usize) -> f64,
                fact: &dyn Fn(usize) -> f64,
                sum: &mut f64,
            ) {
                if idx == pairs.len() {
                    let mut term = acc;
                    for (j, r) in rem.iter().enumerate() {
                        if r % 2 != 0 {
                            return;
                        }
                        let njj = (r / 2) as usize;
                        term *= dstar(j, j).powi(njj as i32) / fact(njj);
                    }
                    *sum += term;
                    return;
                }
                let (i, j) = pairs[idx];
                let cap = rem[i].min(rem[j]).max(0);
                for nij in 0..=cap as usize {
                    let w = if nij == 0 {
                        acc
                    } else {
                        acc * dstar(i, j).powi(nij as i32) / fact(nij)
                    };
                    rem[i] -= nij as i64;
                    rem[j] -= nij as i64;
                    rec(pairs, idx + 1, rem, w, dstar, fact, sum);
                    rem[i] += nij as i64;
                    rem[j] += nij as i64;
                }
            }
            rec(&pairs, 0, &mut rem, 1.0, &dstar, &fact, &mut sum);
            Ok(sum)
        }
    }
}

/// Shell-indexed expansion coefficients: `shells[n]` lists the compositions
/// of `2n` with their weights, loading powers already folded in.  The weight
/// attached to a composition is the full multiplier of the product of
/// order-shifted factors, so evaluation never touches the loadings again.
struct ShellTable {
    shells: Vec<Vec<(Vec<u16>, f64)>>,
}

/// Incremental build of `(s^T C s)^n / n!` in composition space, where
/// `C_ij = dstar_ij a_i a_j` carries the loadings (and the sign of an
/// imaginary column, since each power contributes one factor of `i^2`).
fn folded_shells_general(
    d: &DMatrix<f64>,
    of: &OneFactorDecomposition,
    n_shells: usize,
) -> Result<ShellTable> {
    let p = of.dim();
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let mut c = Vec::new();
    for i in 0..p {
        for j in i..p {
            let dstar = if i == j { d[(i, i)] } else { 2.0 * d[(i, j)] };
            let w = sign * dstar * of.a[i] * of.a[j];
            if w != 0.0 {
                c.push((i, j, w));
            }
        }
    }
    let mut shells: Vec<Vec<(Vec<u16>, f64)>> = Vec::with_capacity(n_shells + 1);
    shells.push(vec![(vec![0u16; p], 1.0)]);
    let mut total = 1usize;
    for n in 1..=n_shells {
        let mut next: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
        for (comp, w) in &shells[n - 1] {
            for (i, j, cij) in &c {
                let mut key = comp.clone();
                key[*i] += 1;
                key[*j] += 1;
                *next.entry(key).or_insert(0.0) += w * cij / n as f64;
            }
        }
        total += next.len();
        if total > COMP_ENTRY_CAP {
            return Err(Error::invalid(format!(
                "coefficient table exceeds {COMP_ENTRY_CAP} entries at shell {n}"
            )));
        }
        shells.push(next.into_iter().collect());
    }
    Ok(ShellTable { shells })
}

fn for_each_composition(total: usize, parts: usize, f: &mut impl FnMut(&[u16])) {
    fn rec(buf: &mut Vec<u16>, left: usize, parts_left: usize, f: &mut impl FnMut(&[u16])) {
        if parts_left == 1 {
            buf.push(left as u16);
            f(buf);
            buf.pop();
            return;
        }
        for v in 0..=left {
            buf.push(v as u16);
            rec(buf, left - v, parts_left - 1, f);
            buf.pop();
        }
    }
    let mut buf = Vec::with_capacity(parts);
    rec(&mut buf, total, parts, f);
}

/// Rank-one shells: weight `(2n)!/n! prod_j v_j^(n_j)/n_j!` over the
/// compositions of `2n`, `v_j = a_j d_j`, with the imaginary-column sign
/// folded per shell.
fn folded_shells_rank_one(
    v: &[f64],
    imaginary: bool,
    n_shells: usize,
) -> Result<ShellTable> {
    let p = v.len();
    let top = 2 * n_shells;
    let mut pw = vec![vec![0.0f64; top + 1]; p];
    for (j, vj) in v.iter().enumerate() {
        pw[j][0] = 1.0;
        for m in 0..top {
            pw[j][m + 1] = pw[j][m] * vj / (m as f64 + 1.0);
        }
    }
    let mut shells = Vec::with_capacity(n_shells + 1);
    let mut c2n = 1.0f64; // (2n)!/n!
    let mut total = 0usize;
    for n in 0..=n_shells {
        let sign = if imaginary && n % 2 == 1 { -1.0 } else { 1.0 };
        let mut shell = Vec::new();
        for_each_composition(2 * n, p, &mut |comp| {
            let mut w = sign * c2n;
            for (j, m) in comp.iter().enumerate() {
                w *= pw[j][*m as usize];
            }
            if w != 0.0 {
                shell.push((comp.to_vec(), w));
            }
        });
        total += shell.len();
        if total > COMP_ENTRY_CAP {
            return Err(Error::invalid(format!(
                "coefficient table exceeds {COMP_ENTRY_CAP} entries at shell {n}"
            )));
        }
        shells.push(shell);
        let nf = n as f64;
        c2n *= (2.0 * nf + 2.0) * (2.0 * nf + 1.0) / (nf + 1.0);
    }
    Ok(ShellTable { shells })
}

/// Shell count from the coefficient envelope `s^n / n!`: the factor products
/// are O(1), so once the envelope is below 1e-18 further shells cannot move
/// the result.
fn shell_count(scale: f64) -> Result<usize> {
    let mut env = 1.0f64;
    for n in 0..SHELL_CAP {
        if env < 1e-18 {
            return Ok((n + 2).min(SHELL_CAP));
        }
        env *= scale / (n as f64 + 1.0);
    }
    if env < 1e-6 {
        Ok(SHELL_CAP)
    } else {
        Err(Error::SeriesDivergence(format!(
            "shell envelope scale {scale:.3} leaves mass beyond the {SHELL_CAP}-shell cap"
        )))
    }
}

/// Envelope when the outer integral stops at `cut`: relative to the leading
/// shell, order `n` carries at most `scale^n/n!` from the coefficients times
/// the truncated-moment decay `prod_i cut/(alpha+i)` (clamped at 1), which
/// dies superfactorially however large the coefficient scale is.
fn shell_count_truncated(scale: f64, alpha: f64, cut: f64) -> Result<usize> {
    let mut env = 1.0f64;
    let mut mom = 1.0f64;
    for n in 0..SHELL_CAP {
        if env * mom < 1e-18 {
            return Ok((n + 2).min(SHELL_CAP));
        }
        env *= scale / (n as f64 + 1.0);
        mom = (mom * cut / (alpha + n as f64 + 1.0)).min(1.0);
    }
    if env * mom < 1e-8 {
        Ok(SHELL_CAP)
    } else {
        Err(Error::SeriesDivergence(format!(
            "truncated shell envelope still at {:.3e} at the {SHELL_CAP}-shell cap",
            env * mom
        )))
    }
}

/// Order-shifted noncentral CDF stack `G(alpha+n; x, u)` for `n < count` at
/// one fixed `(x, u)`.
///
/// Moderate arguments ride the shared gstar ladder (one 0F1 ladder for the
/// whole stack).  Large `u` or `x` would overflow the `e^u` split, so there
/// the stack falls back to an explicit Poisson mixture over a window that is
/// clipped to where the central CDF table is nonzero; every quantity in that
/// path lies in [0, 1].
fn cdf_orders(alpha: f64, x: f64, u: f64, count: usize) -> Result<Vec<f64>> {
    debug_assert!(x > 0.0);
    if u < 0.0 {
        if u < -600.0 {
            return Err(Error::invalid("noncentrality too negative for f64 range"));
        }
        let ln_c = -u + alpha * x.ln();
        if ln_c > 700.0 {
            return Err(Error::invalid("order stack exceeds floating range"));
        }
        let lad = gstar_order_ladder(alpha, x, x * u, count)?;
        let c = ln_c.exp();
        return Ok(lad.iter().map(|v| c * v).collect());
    }
    if u <= 600.0 && x <= 600.0 && x * u <= 100_000.0 {
        let lad = gstar_order_ladder(alpha, x, x * u, count)?;
        let c = (-u).exp() * x.powf(alpha);
        return Ok(lad.iter().map(|v| c * v).collect());
    }
    // Poisson window, clipped against the decay of P(alpha + i, x)
    let m_poisson = (u + 12.0 * u.sqrt() + 60.0).ceil() as usize;
    let m_support = (x + 14.0 * x.sqrt() + 80.0 - alpha).ceil().max(8.0) as usize;
    let m_hi = m_poisson.min(m_support);
    let m_lo = ((u - 12.0 * u.sqrt() - 60.0).floor().max(0.0)) as usize;
    if m_lo > m_hi {
        // the Poisson mass sits entirely past the CDF support
        return Ok(vec![0.0; count]);
    }
    if m_hi > 3_000_000 {
        return Err(Error::invalid("noncentrality window too large"));
    }
    let table = reg_gamma_table(alpha, x, count + m_hi + 1)?;
    let ln_u = u.ln();
    let mut weights = Vec::with_capacity(m_hi - m_lo + 1);
    if u <= 600.0 {
        let mut w = (-u).exp();
        for m in 0..=m_hi {
            if m >= m_lo {
                weights.push(w);
            }
            w *= u / (m as f64 + 1.0);
        }
    } else {
        for m in m_lo..=m_hi {
            let ln_w = m as f64 * ln_u - u - ln_gamma(m as f64 + 1.0);
            weights.push(if ln_w < -745.0 { 0.0 } else { ln_w.exp() });
        }
    }
    let mut out = vec![0.0f64; count];
    for (n, slot) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, w) in weights.iter().enumerate() {
            s += w * table[n + m_lo + k];
        }
        *slot = s;
    }
    Ok(out)
}

/// Which factor representation a series evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesForm {
    /// Pick per regime: direct factors below one, scaled otherwise.
    Auto,
    /// Plain CDF factors; requires real loadings with all squares below one.
    Direct,
    /// Determinant-scaled factors with signed shell weights; valid in every
    /// non-limit regime.
    Scaled,
}

struct SeriesProblem<'a> {
    x: &'a [f64],
    alpha: f64,
    of: &'a OneFactorDecomposition,
    shells: &'a ShellTable,
    /// First term of each noncentrality argument, `d_jj w_j^-2`.
    u0: Vec<f64>,
    ln_pref: f64,
    scaled: bool,
    y_hi: f64,
    /// Limit regime: this factor is a step absorbed into `y_hi`.
    skip: Option<usize>,
}

fn series_integral(pr: &SeriesProblem, panel_order: usize) -> Result<f64> {
    let p = pr.x.len();
    let n_shells = pr.shells.shells.len() - 1;
    let count = pr
        .shells
        .shells
        .iter()
        .flat_map(|s| s.iter().flat_map(|(c, _)| c.iter().map(|v| *v as usize)))
        .max()
        .unwrap_or(0)
        + 1;
    let rule = power_weighted_nodes(pr.alpha, pr.y_hi, panel_order)?;
    let nn = rule.len();
    let beta = pr.of.beta;
    // per-shell node contributions, summed pairwise for determinism
    let mut per_shell = vec![vec![0.0f64; nn]; n_shells + 1];
    let lg = ln_gamma(pr.alpha).exp();
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(p);
    for (node, (y, wq)) in rule.iter().enumerate() {
        vecs.clear();
        for j in 0..p {
            if pr.skip == Some(j) {
                vecs.push(vec![1.0; count]);
                continue;
            }
            let u = pr.u0[j] + pr.of.b_sq(j) / if pr.scaled { beta } else { 1.0 } * y;
            let xt = pr.of.w2[j] * pr.x[j];
            if pr.scaled {
                vecs.push(gstar_order_ladder(pr.alpha, xt, xt * u, count)?);
            } else {
                vecs.push(cdf_orders(pr.alpha, xt, u, count)?);
            }
        }
        // t_n = e^-y y^n / Gamma(alpha+n) (the y^(alpha-1) lives in wq),
        // with beta^-n folded into the chain for the scaled form
        let mut t = (-y).exp() / lg;
        for (n, shell) in pr.shells.shells.iter().enumerate() {
            let mut s = 0.0;
            for (comp, w) in shell {
                let mut prod = *w;
                for (j, m) in comp.iter().enumerate() {
                    prod *= vecs[j][*m as usize];
                }
                s += prod;
            }
            per_shell[n][node] = wq * t * s;
            t *= y / (pr.alpha + n as f64) / if pr.scaled { beta } else { 1.0 };
        }
    }
    let shell_integrals: Vec<f64> = per_shell.iter().map(|row| pairwise_sum(row)).collect();
    let total = pairwise_sum(&shell_integrals);
    // shells must have decayed by the cap, otherwise the truncation is not
    // trustworthy no matter how small the tail looks pointwise
    let tail = shell_integrals[n_shells].abs().max(
        shell_integrals[n_shells.saturating_sub(1)].abs(),
    );
    if tail > 1e-9 * total.abs().max(1e-280) && n_shells >= SHELL_CAP {
        return Err(Error::SeriesDivergence(format!(
            "shell contributions still at {tail:.3e} of {total:.3e} at the cap"
        )));
    }
    Ok(pr.ln_pref.exp() * total)
}

/// Runs an evaluation at two quadrature resolutions and escalates once if
/// they disagree beyond `tol`.
fn with_quadrature_check(tol: f64, mut f: impl FnMut(usize) -> Result<f64>) -> Result<f64> {
    let tol = tol.max(1e-13);
    let coarse = f(16)?;
    let fine = f(24)?;
    if (coarse - fine).abs() <= tol * fine.abs().max(1.0) {
        return Ok(fine);
    }
    let finest = f(36)?;
    if (fine - finest).abs() <= tol * finest.abs().max(1.0) {
        return Ok(finest);
    }
    Err(Error::QuadratureFailure(format!(
        "refinement stalled: {coarse:.12e} / {fine:.12e} / {finest:.12e}"
    )))
}

fn resolve_form(of: &OneFactorDecomposition, form: SeriesForm) -> Result<bool> {
    let above = matches!(of.regime, Regime::OneAboveOne(_));
    match form {
        SeriesForm::Auto => Ok(of.imaginary || above),
        SeriesForm::Scaled => Ok(true),
        SeriesForm::Direct => {
            if of.imaginary {
                Err(Error::invalid(
                    "direct factors diverge for imaginary loadings; use the scaled form",
                ))
            } else if above {
                Err(Error::invalid(
                    "direct factors require all loading squares below one",
                ))
            } else {
                Ok(false)
            }
        }
    }
}

/// CDF via the shell series, with the factor representation pinned.
///
/// `Auto` uses direct factors for real below-one loadings and scaled factors
/// otherwise; the two forms are algebraically equal wherever both apply,
/// which the tests exercise directly.
pub fn cdf_series_with(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    nc: &NoncentralityModel,
    tol: f64,
    form: SeriesForm,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    if nc.dim != of.dim() {
        return Err(Error::invalid("noncentrality dimension mismatch"));
    }
    if matches!(of.regime, Regime::LimitEqualsOne(_)) {
        return Err(Error::invalid(
            "a loading square at one needs the truncated-integral route",
        ));
    }
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    if p == 1 {
        return noncentral_gamma_cdf(alpha, x[0], nc.delta[(0, 0)]);
    }
    let scaled = resolve_form(of, form)?;
    let model = correlation_from(of)?;
    let (d, _) = transformed_noncentrality(&model, nc)?;
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    // a^T D a and the coefficient envelope share the folded magnitudes
    let mut ada = 0.0;
    let mut envelope = 0.0;
    for i in 0..p {
        for j in i..p {
            let dstar = if i == j { d[(i, i)] } else { 2.0 * d[(i, j)] };
            ada += sign * dstar * of.a[i] * of.a[j];
            envelope += (dstar * of.a[i] * of.a[j]).abs();
        }
    }
    if scaled {
        envelope /= of.beta.abs();
    }
    let n_shells = shell_count(envelope)?;
    let shells = folded_shells_general(&d, of, n_shells)?;
    let u0: Vec<f64> = (0..p).map(|j| d[(j, j)] / of.w2[j]).collect();
    let mut ln_pref = -ada;
    let mut y_hi = gamma_tail_cut(alpha + n_shells as f64);
    if scaled {
        ln_pref -= u0.iter().sum::<f64>();
        let ln_xt: f64 = (0..p).map(|j| (of.w2[j] * x[j]).abs().ln()).sum();
        ln_pref += alpha * (ln_xt - of.beta.abs().ln());
        if !of.imaginary && matches!(of.regime, Regime::AllBelowOne) {
            // scaled factors grow like e^(y/beta) here; stretch the cut so
            // the product with e^-y still decays to the tail target
            y_hi *= of.beta / (of.beta - 1.0) * 1.2;
        }
        if ln_pref > 600.0 {
            return Err(Error::invalid(
                "scaled-form prefactor exceeds floating range for this noncentrality",
            ));
        }
    }
    let pr = SeriesProblem { x, alpha, of, shells: &shells, u0, ln_pref, scaled, y_hi, skip: None };
    with_quadrature_check(tol, |order| series_integral(&pr, order))
}

/// CDF of the p-variate law through the shell series over compositions,
/// general noncentrality.
pub fn cdf_series(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    nc: &NoncentralityModel,
    tol: f64,
) -> Result<f64> {
    cdf_series_with(x, alpha, of, nc, tol, SeriesForm::Auto)
}

/// Rank-one shell series: composition weights factor through `a_j d_j`, so
/// no coefficient table is needed.
pub fn cdf_rank_one_series(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    delta: &[f64],
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    if delta.len() != of.dim() {
        return Err(Error::invalid("noncentrality factor length mismatch"));
    }
    if matches!(of.regime, Regime::LimitEqualsOne(_)) {
        return Err(Error::invalid(
            "a loading square at one needs the truncated-integral route",
        ));
    }
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    if p == 1 {
        return noncentral_gamma_cdf(alpha, x[0], delta[0] * delta[0]);
    }
    let scaled = resolve_form(of, SeriesForm::Auto)?;
    let model = correlation_from(of)?;
    let dv = &model.r_inv * DVector::from_column_slice(delta);
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let ad: f64 = (0..p).map(|j| of.a[j] * dv[j]).sum();
    let v: Vec<f64> = (0..p).map(|j| of.a[j] * dv[j]).collect();
    let sigma: f64 = v.iter().map(|t| t.abs()).sum();
    let mut envelope = sigma * sigma;
    if scaled {
        envelope /= of.beta.abs();
    }
    let n_shells = shell_count(envelope)?;
    let shells = folded_shells_rank_one(&v, of.imaginary, n_shells)?;
    let u0: Vec<f64> = (0..p).map(|j| dv[j] * dv[j] / of.w2[j]).collect();
    let mut ln_pref = -sign * ad * ad;
    let mut y_hi = gamma_tail_cut(alpha + n_shells as f64);
    if scaled {
        ln_pref -= u0.iter().sum::<f64>();
        let ln_xt: f64 = (0..p).map(|j| (of.w2[j] * x[j]).abs().ln()).sum();
        ln_pref += alpha * (ln_xt - of.beta.abs().ln());
        if !of.imaginary && matches!(of.regime, Regime::AllBelowOne) {
            y_hi *= of.beta / (of.beta - 1.0) * 1.2;
        }
        if ln_pref > 600.0 {
            return Err(Error::invalid(
                "scaled-form prefactor exceeds floating range for this noncentrality",
            ));
        }
    }
    let pr = SeriesProblem { x, alpha, of, shells: &shells, u0, ln_pref, scaled, y_hi, skip: None };
    with_quadrature_check(tol, |order| series_integral(&pr, order))
}

/// Angular weight normalization `1 / B(1/2, alpha - 1/2)`, demanding
/// `alpha > 1/2`.
fn angular_norm(alpha: f64) -> Result<f64> {
    if alpha <= 0.5 {
        return Err(Error::BetaDomain(format!(
            "the angular weight needs shape > 1/2, got {alpha}"
        )));
    }
    Ok((ln_gamma(alpha) - ln_gamma(0.5) - ln_gamma(alpha - 0.5)).exp())
}

/// Cosine rule for the angular integral: nodes are `cos(phi)` with the
/// `(sin phi)^(2 alpha - 2)` weight folded in, already normalized to mass 1.
fn cosine_rule(alpha: f64, n: usize) -> Result<Rule> {
    if alpha == 1.0 {
        // the weight is flat in phi itself there
        let gl = gauss_legendre(n).mapped_to(0.0, std::f64::consts::PI);
        return Ok(Rule {
            nodes: gl.nodes.iter().map(|phi| phi.cos()).collect(),
            weights: gl.weights.iter().map(|w| w / std::f64::consts::PI).collect(),
        });
    }
    let norm = angular_norm(alpha)?;
    let rule = gauss_jacobi(n, alpha - 1.5, alpha - 1.5)?;
    Ok(Rule {
        nodes: rule.nodes,
        weights: rule.weights.iter().map(|w| w * norm).collect(),
    })
}

/// Rank-one CDF by the double integral with an angular weight.
///
/// Real below-one loadings integrate plain CDF factors of the original
/// noncentrality vector; the other regimes use determinant-scaled factors of
/// the transformed vector, whose angular term is pure imaginary, and the
/// angular symmetry returns a real value.
pub fn cdf_rank_one_integral(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    delta: &[f64],
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    if delta.len() != of.dim() {
        return Err(Error::invalid("noncentrality factor length mismatch"));
    }
    if matches!(of.regime, Regime::LimitEqualsOne(_)) {
        return Err(Error::invalid(
            "a loading square at one needs the truncated-integral route",
        ));
    }
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    if p == 1 {
        return noncentral_gamma_cdf(alpha, x[0], delta[0] * delta[0]);
    }
    let scaled = of.imaginary || matches!(of.regime, Regime::OneAboveOne(_));
    if !scaled {
        let y_hi = gamma_tail_cut(alpha);
        let eval = |order: usize| -> Result<f64> {
            let yr = sqrt_scale_rule(alpha, y_hi, 3 * order)?;
            let cr = cosine_rule(alpha, 2 * order)?;
            let lg = ln_gamma(alpha).exp();
            let mut acc = Vec::with_capacity(yr.len());
            for (y, wy) in yr.iter() {
                let sy = y.sqrt();
                let mut inner = 0.0;
                for (c, wc) in cr.iter() {
                    let mut prod = 1.0;
                    for j in 0..p {
                        let arg = delta[j] * delta[j] * of.w2[j]
                            + of.b_sq(j) * y
                            + 2.0 * of.a[j] * of.w2[j] * delta[j] * sy * c;
                        prod *= noncentral_gamma_cdf(alpha, of.w2[j] * x[j], arg)?;
                    }
                    inner += wc * prod;
                }
                acc.push(wy * (-y).exp() / lg * inner);
            }
            Ok(pairwise_sum(&acc))
        };
        return with_quadrature_check(tol, eval);
    }
    // scaled angular form: transformed vector, imaginary cross term
    let model = correlation_from(of)?;
    let dv = &model.r_inv * DVector::from_column_slice(delta);
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let ad: f64 = (0..p).map(|j| of.a[j] * dv[j]).sum();
    let u0: Vec<f64> = (0..p).map(|j| dv[j] * dv[j] / of.w2[j]).collect();
    let beta = of.beta;
    let eta: Vec<f64> = (0..p).map(|j| of.a[j] * dv[j] / beta.abs().sqrt()).collect();
    let ln_xt: f64 = (0..p).map(|j| (of.w2[j] * x[j]).abs().ln()).sum();
    let ln_pref = -sign * ad * ad - u0.iter().sum::<f64>()
        + alpha * (ln_xt - beta.abs().ln());
    if ln_pref > 600.0 {
        return Err(Error::invalid(
            "scaled-form prefactor exceeds floating range for this noncentrality",
        ));
    }
    let y_hi = gamma_tail_cut(alpha);
    let eval = |order: usize| -> Result<f64> {
        let yr = sqrt_scale_rule(alpha, y_hi, 3 * order)?;
        let cr = cosine_rule(alpha, 2 * order)?;
        let lg = ln_gamma(alpha).exp();
        let mut acc = Vec::with_capacity(yr.len());
        for (y, wy) in yr.iter() {
            let sy = y.sqrt();
            let mut inner = Complex64::new(0.0, 0.0);
            for (c, wc) in cr.iter() {
                let mut prod = Complex64::new(1.0, 0.0);
                for j in 0..p {
                    let xt = Complex64::new(of.w2[j] * x[j], 0.0);
                    let arg = Complex64::new(
                        u0[j] + of.b_sq(j) / beta * y,
                        2.0 * eta[j] * sy * c,
                    );
                    prod *= gstar_reduced(alpha, xt, xt * arg)?;
                }
                inner += wc * prod;
            }
            acc.push(wy * (-y).exp() / lg * inner.re);
        }
        Ok(pairwise_sum(&acc))
    };
    let raw = with_quadrature_check(tol, eval)?;
    Ok(ln_pref.exp() * raw)
}

/// Exponent scale `|w_k^2| x_k` of the intrinsic cross-shell cancellation in
/// the scaled forms when one loading square exceeds one; the series answer
/// loses roughly `e^T eps` in absolute terms, so route selection prefers a
/// contour evaluation once this is large.
pub fn scaled_series_exponent(of: &OneFactorDecomposition, x: &[f64]) -> f64 {
    match of.regime {
        Regime::OneAboveOne(k) if k < x.len() => (of.w2[k] * x[k]).abs(),
        _ => 0.0,
    }
}

/// Truncated-integral CDF for the boundary regime (one loading square at
/// one): the affected factor degenerates to a step that caps the outer
/// integral at `x_k`, while its compositions keep contributing weights.
pub fn cdf_limit_case(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    nc: &NoncentralityModel,
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    let Regime::LimitEqualsOne(k) = of.regime else {
        return Err(Error::invalid("decomposition is not in the boundary regime"));
    };
    if nc.dim != of.dim() {
        return Err(Error::invalid("noncentrality dimension mismatch"));
    }
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    let model = correlation_from(of)?;
    let (d, _) = transformed_noncentrality(&model, nc)?;
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let mut ada = 0.0;
    let mut envelope = 0.0;
    for i in 0..p {
        for j in i..p {
            let dstar = if i == j { d[(i, i)] } else { 2.0 * d[(i, j)] };
            ada += sign * dstar * of.a[i] * of.a[j];
            envelope += (dstar * of.a[i] * of.a[j]).abs();
        }
    }
    let n_shells = shell_count_truncated(envelope, alpha, x[k])?;
    let shells = folded_shells_general(&d, of, n_shells)?;
    let u0: Vec<f64> = (0..p)
        .map(|j| if j == k { 0.0 } else { d[(j, j)] / of.w2[j] })
        .collect();
    let y_hi = gamma_tail_cut(alpha + n_shells as f64).min(x[k]);
    let pr = SeriesProblem {
        x,
        alpha,
        of,
        shells: &shells,
        u0,
        ln_pref: -ada,
        scaled: false,
        y_hi,
        skip: Some(k),
    };
    if y_hi < 2.5 {
        // power_weighted_nodes needs room; small cuts use a single scaled
        // Jacobi segment instead of the panel chain
        let eval = |order: usize| series_integral_small_cut(&pr, order);
        return with_quadrature_check(tol, eval);
    }
    with_quadrature_check(tol, |order| series_integral(&pr, order))
}

/// Series integral over `(0, y_hi)` with `y_hi` too small for the panel
/// rule: one Jacobi segment carries the `y^(alpha-1)` weight exactly.
fn series_integral_small_cut(pr: &SeriesProblem, order: usize) -> Result<f64> {
    let rule = power_rule_upto(pr.alpha, pr.y_hi, order)?;
    let p = pr.x.len();
    let count = pr
        .shells
        .shells
        .iter()
        .flat_map(|s| s.iter().flat_map(|(c, _)| c.iter().map(|v| *v as usize)))
        .max()
        .unwrap_or(0)
        + 1;
    let n_shells = pr.shells.shells.len() - 1;
    let mut per_shell = vec![vec![0.0f64; rule.len()]; n_shells + 1];
    let lg = ln_gamma(pr.alpha).exp();
    for (node, (y, wq)) in rule.iter().enumerate() {
        let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(p);
        for j in 0..p {
            if pr.skip == Some(j) {
                vecs.push(vec![1.0; count]);
                continue;
            }
            let u = pr.u0[j] + pr.of.b_sq(j) * y;
            vecs.push(cdf_orders(pr.alpha, pr.of.w2[j] * pr.x[j], u, count)?);
        }
        let mut t = (-y).exp() / lg;
        for (n, shell) in pr.shells.shells.iter().enumerate() {
            let mut s = 0.0;
            for (comp, w) in shell {
                let mut prod = *w;
                for (j, m) in comp.iter().enumerate() {
                    prod *= vecs[j][*m as usize];
                }
                s += prod;
            }
            per_shell[n][node] = wq * t * s;
            t *= y / (pr.alpha + n as f64);
        }
    }
    let shell_integrals: Vec<f64> = per_shell.iter().map(|row| pairwise_sum(row)).collect();
    Ok(pr.ln_pref.exp() * pairwise_sum(&shell_integrals))
}

/// Rank-one boundary-regime series: coefficient products keep the `k`-th
/// component (its loading is exactly one) while the factor product skips it.
pub fn cdf_limit_rank_one(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    delta: &[f64],
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    if delta.len() != of.dim() {
        return Err(Error::invalid("noncentrality factor length mismatch"));
    }
    let Regime::LimitEqualsOne(k) = of.regime else {
        return Err(Error::invalid("decomposition is not in the boundary regime"));
    };
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    let model = correlation_from(of)?;
    let dv = &model.r_inv * DVector::from_column_slice(delta);
    let sign = if of.imaginary { -1.0 } else { 1.0 };
    let ad: f64 = (0..p).map(|j| of.a[j] * dv[j]).sum();
    let v: Vec<f64> = (0..p).map(|j| of.a[j] * dv[j]).collect();
    let sigma: f64 = v.iter().map(|t| t.abs()).sum();
    let n_shells = shell_count_truncated(sigma * sigma, alpha, x[k])?;
    let shells = folded_shells_rank_one(&v, of.imaginary, n_shells)?;
    let u0: Vec<f64> = (0..p)
        .map(|j| if j == k { 0.0 } else { dv[j] * dv[j] / of.w2[j] })
        .collect();
    let y_hi = gamma_tail_cut(alpha + n_shells as f64).min(x[k]);
    let pr = SeriesProblem {
        x,
        alpha,
        of,
        shells: &shells,
        u0,
        ln_pref: -sign * ad * ad,
        scaled: false,
        y_hi,
        skip: Some(k),
    };
    if y_hi < 2.5 {
        return with_quadrature_check(tol, |order| series_integral_small_cut(&pr, order));
    }
    with_quadrature_check(tol, |order| series_integral(&pr, order))
}

/// `int_0^cut h(y) y^(alpha-1) dy` nodes for any positive cut: small cuts
/// get one Jacobi segment, larger ones the panel chain.
fn power_rule_upto(alpha: f64, cut: f64, order: usize) -> Result<Rule> {
    if cut <= 0.0 {
        return Ok(Rule { nodes: vec![], weights: vec![] });
    }
    if cut > 4.0 {
        return power_weighted_nodes(alpha, cut, order);
    }
    let base = gauss_jacobi(order, 0.0, alpha - 1.0)?;
    let half = 0.5 * cut;
    let scale = half.powf(alpha);
    Ok(Rule {
        nodes: base.nodes.iter().map(|t| half * (1.0 + t)).collect(),
        weights: base.weights.iter().map(|w| w * scale).collect(),
    })
}

/// Same integral under the substitution `y = v^2`: the angular routes carry
/// `sqrt(y)` in their arguments, which is analytic in `v` but ruins
/// convergence of any rule built directly in `y`.  Weight in `v` is
/// `v^(2 alpha - 1)`, one Jacobi segment on `(0, sqrt(cut))`.
fn sqrt_scale_rule(alpha: f64, cut: f64, order: usize) -> Result<Rule> {
    if cut <= 0.0 {
        return Ok(Rule { nodes: vec![], weights: vec![] });
    }
    let base = gauss_jacobi(order, 0.0, 2.0 * alpha - 1.0)?;
    let half = 0.5 * cut.sqrt();
    let scale = 2.0 * half.powf(2.0 * alpha);
    Ok(Rule {
        nodes: base.nodes.iter().map(|t| (half * (1.0 + t)).powi(2)).collect(),
        weights: base.weights.iter().map(|w| w * scale).collect(),
    })
}

/// Rank-one boundary-regime CDF as a double integral over the region where
/// the degenerate factor's step is 1.
///
/// The region cases reduce to two shapes: the full angle with `y` up to
/// `y_+(phi)`, or (when `delta_k^2 >= x_k`) an angular sliver beside
/// `phi = 0` or `pi` between `y_-` and `y_+`.  The sliver is parametrized by
/// `sin(phi) = sin(phi_1) sin(theta)`, which absorbs the square-root
/// endpoint of `y_+-` and leaves smooth functions of `cos(theta)` under a
/// Jacobi weight.
pub fn cdf_limit_integral(
    x: &[f64],
    alpha: f64,
    of: &OneFactorDecomposition,
    delta: &[f64],
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(x, of)?;
    if delta.len() != of.dim() {
        return Err(Error::invalid("noncentrality factor length mismatch"));
    }
    let Regime::LimitEqualsOne(k) = of.regime else {
        return Err(Error::invalid("decomposition is not in the boundary regime"));
    };
    if of.imaginary {
        return Err(Error::invalid(
            "imaginary loadings use the series route in the boundary regime",
        ));
    }
    if x.iter().any(|v| *v <= 0.0) {
        return Ok(0.0);
    }
    let p = of.dim();
    let dk = delta[k];
    let lg = ln_gamma(alpha).exp();
    let factor_product = |y: f64, c: f64| -> Result<f64> {
        let sy = y.sqrt();
        let mut prod = 1.0;
        for j in 0..p {
            if j == k {
                continue;
            }
            let arg = delta[j] * delta[j] * of.w2[j]
                + of.b_sq(j) * y
                + 2.0 * of.a[j] * of.w2[j] * delta[j] * sy * c;
            prod *= noncentral_gamma_cdf(alpha, of.w2[j] * x[j], arg)?;
        }
        Ok(prod)
    };
    let tail = gamma_tail_cut(alpha);
    if dk * dk < x[k] {
        // full angle, y from 0 to the outer root
        let eval = |order: usize| -> Result<f64> {
            let cr = cosine_rule(alpha, 2 * order)?;
            let mut acc = Vec::with_capacity(cr.len());
            for (c, wc) in cr.iter() {
                let root = (x[k] - dk * dk * (1.0 - c * c)).max(0.0).sqrt();
                let y_up = (root - dk * c).powi(2);
                let yr = sqrt_scale_rule(alpha, y_up.min(tail), 2 * order)?;
                let mut inner = Vec::with_capacity(yr.len());
                for (y, wy) in yr.iter() {
                    inner.push(wy * (-y).exp() / lg * factor_product(y, c)?);
                }
                acc.push(wc * pairwise_sum(&inner));
            }
            Ok(pairwise_sum(&acc))
        };
        return with_quadrature_check(tol, eval);
    }
    // angular sliver: s1 = sin(phi_1), cos(phi) = -sgn(delta_k) g(c)
    let norm = angular_norm(alpha)?;
    let s1 = (x[k].sqrt() / dk.abs()).min(1.0);
    let sgn = dk.signum();
    let eval = |order: usize| -> Result<f64> {
        let tr = gauss_jacobi(2 * order, alpha - 1.5, 0.0)?;
        let const_pref = 2.0f64.powf(-(alpha - 0.5)) * norm * s1.powf(2.0 * alpha - 1.0);
        let mut acc = Vec::with_capacity(tr.len());
        for (t, wt) in tr.iter() {
            let c = 0.5 * (1.0 + t);
            let g = (1.0 - s1 * s1 * (1.0 - c * c)).sqrt();
            let cos_phi = -sgn * g;
            let y_plus = dk * dk * (g + s1 * c).powi(2);
            let y_minus = dk * dk * (g - s1 * c).powi(2);
            let mut piece = 0.0;
            for (cut, si) in [(y_plus, 1.0), (y_minus, -1.0)] {
                let yr = sqrt_scale_rule(alpha, cut.min(tail), 2 * order)?;
                let mut inner = Vec::with_capacity(yr.len());
                for (y, wy) in yr.iter() {
                    inner.push(wy * (-y).exp() / lg * factor_product(y, cos_phi)?);
                }
                piece += si * pairwise_sum(&inner);
            }
            acc.push(wt * const_pref * c * (1.0 + c).powf(alpha - 1.5) / g * piece);
        }
        Ok(pairwise_sum(&acc))
    };
    with_quadrature_check(tol, eval)
}

/// Embedded 3x3 correlation matrix for the conditional construction: the
/// pair `(1, 2)` keeps correlation `(r + d1 d2)` before standardization and
/// the third coordinate is loaded with `delta`.
fn embedded_correlation(r: f64, delta: (f64, f64)) -> DMatrix<f64> {
    let (d1, d2) = delta;
    let s1 = (1.0 + d1 * d1).sqrt();
    let s2 = (1.0 + d2 * d2).sqrt();
    DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0,
            (r + d1 * d2) / (s1 * s2),
            d1 / s1,
            (r + d1 * d2) / (s1 * s2),
            1.0,
            d2 / s2,
            d1 / s1,
            d2 / s2,
            1.0,
        ],
    )
}

/// Bivariate CDF with noncentrality `x3 delta delta^T`, computed by
/// conditioning a central trivariate law on its third coordinate.
///
/// The embedding carries `delta` into a third column of the correlation
/// matrix; dividing the joint integrand by the third marginal density turns
/// the outer integral into the conditional CDF.  `delta = (0, 0)` makes the
/// third coordinate independent and short-circuits to the central bivariate
/// series; a single zero component leaves a vanishing correlation, which has
/// no factor structure, and is reported as such.
pub fn cdf_bivariate_conditional(
    x1: f64,
    x2: f64,
    alpha: f64,
    r: f64,
    x3: f64,
    delta: (f64, f64),
    tol: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if !(r.abs() < 1.0) {
        return Err(Error::invalid(format!("correlation must satisfy |r| < 1, got {r}")));
    }
    if !(x3 > 0.0 && x3.is_finite()) {
        return Err(Error::invalid("the conditioning value must be positive"));
    }
    if x1 <= 0.0 || x2 <= 0.0 {
        return Ok(0.0);
    }
    let (d1, d2) = delta;
    if d1 == 0.0 && d2 == 0.0 {
        let model = CorrelationModel::new(DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]))?;
        let of = one_factor_decompose(&model, 1e-9)?;
        return cdf_series(&[x1, x2], alpha, &of, &NoncentralityModel::zero(2), tol);
    }
    let model = CorrelationModel::new(embedded_correlation(r, delta))?;
    if !model.is_positive_definite() {
        return Err(Error::BadMatrix(
            "embedded correlation matrix is not positive definite".into(),
        ));
    }
    let of = one_factor_decompose(&model, 1e-12)?;
    if matches!(of.regime, Regime::LimitEqualsOne(_)) {
        return Err(Error::invalid(
            "embedded correlation sits on the regime boundary; perturb the inputs",
        ));
    }
    let xs = [x1 / (1.0 + d1 * d1), x2 / (1.0 + d2 * d2), x3];
    let dens = gamma_pdf(alpha, x3);
    let scaled = of.imaginary || matches!(of.regime, Regime::OneAboveOne(_));
    let lg = ln_gamma(alpha).exp();
    let value = if !scaled {
        let y_hi = gamma_tail_cut(alpha);
        with_quadrature_check(tol, |order| {
            let yr = power_weighted_nodes(alpha, y_hi, order)?;
            let mut acc = Vec::with_capacity(yr.len());
            for (y, wy) in yr.iter() {
                let g1 = noncentral_gamma_cdf(alpha, of.w2[0] * xs[0], of.b_sq(0) * y)?;
                let g2 = noncentral_gamma_cdf(alpha, of.w2[1] * xs[1], of.b_sq(1) * y)?;
                let f3 = of.w2[2] * noncentral_gamma_pdf(alpha, of.w2[2] * xs[2], of.b_sq(2) * y)?;
                acc.push(wy * (-y).exp() / lg * g1 * g2 * f3);
            }
            Ok(pairwise_sum(&acc))
        })?
    } else {
        let beta = of.beta;
        let xt: Vec<f64> = (0..3).map(|j| of.w2[j] * xs[j]).collect();
        // bracket (xt1 xt2 xt3 / beta)^alpha / x3 is positive in both scaled
        // regimes; the remaining reduced factors are assembled per node
        let ln_c = alpha * (xt.iter().map(|v| v.abs().ln()).sum::<f64>() - beta.abs().ln())
            - x3.ln();
        if xt[2] < -600.0 {
            return Err(Error::invalid("scaled conditional factor exceeds floating range"));
        }
        let raw = with_quadrature_check(tol, |order| {
            let yr = power_weighted_nodes(alpha, gamma_tail_cut(alpha), order)?;
            let mut acc = Vec::with_capacity(yr.len());
            for (y, wy) in yr.iter() {
                let mut prod = (-y).exp() / lg;
                for j in 0..2 {
                    let xc = Complex64::new(xt[j], 0.0);
                    let u = Complex64::new(of.b_sq(j) / beta * y, 0.0);
                    prod *= gstar_reduced(alpha, xc, xc * u)?.re;
                }
                let u3 = of.b_sq(2) / beta * y;
                prod *= (-xt[2]).exp() * hyp0f1_real(alpha, xt[2] * u3)? / lg;
                acc.push(wy * prod);
            }
            Ok(pairwise_sum(&acc))
        })?;
        ln_c.exp() * raw
    };
    Ok(value / dens)
}

/// Bivariate CDF with noncentrality `x3 delta delta^T` as an explicit
/// series in the inverse-correlation couplings of the embedded matrix.
///
/// Shells are indexed by total coupling degree; each term pairs a
/// density factor in the conditioning coordinate with two central CDF
/// factors at shifted orders.  Coefficients are assembled in log space and
/// chained within the inner sum, so transiently huge gamma factors never
/// materialize.
pub fn cdf_bivariate_expansion(
    x1: f64,
    x2: f64,
    alpha: f64,
    r: f64,
    x3: f64,
    delta: (f64, f64),
    n_max: usize,
) -> Result<f64> {
    check_alpha(alpha)?;
    if !(r.abs() < 1.0) {
        return Err(Error::invalid(format!("correlation must satisfy |r| < 1, got {r}")));
    }
    if !(x3 > 0.0 && x3.is_finite()) {
        return Err(Error::invalid("the conditioning value must be positive"));
    }
    if x1 <= 0.0 || x2 <= 0.0 {
        return Ok(0.0);
    }
    let (d1, d2) = delta;
    let model = CorrelationModel::new(embedded_correlation(r, delta))?;
    if !model.is_positive_definite() {
        return Err(Error::BadMatrix(
            "embedded correlation matrix is not positive definite".into(),
        ));
    }
    let rinv = &model.r_inv;
    let rii = [rinv[(0, 0)], rinv[(1, 1)], rinv[(2, 2)]];
    let q12 = rinv[(0, 1)] / (rii[0] * rii[1]).sqrt();
    let q13 = rinv[(0, 2)] / (rii[0] * rii[2]).sqrt();
    let q23 = rinv[(1, 2)] / (rii[1] * rii[2]).sqrt();
    let det_q = 1.0 / (model.det * rii[0] * rii[1] * rii[2]);
    let z = [
        rii[0] * x1 / (1.0 + d1 * d1),
        rii[1] * x2 / (1.0 + d2 * d2),
        rii[2] * x3,
    ];
    let m_cap = n_max / 2 + 1;
    let p1 = reg_gamma_table(alpha, z[0], m_cap + 1)?;
    let p2 = reg_gamma_table(alpha, z[1], m_cap + 1)?;
    // |q| pairs: exponent of q23 follows m1, q13 follows m2, q12 follows m3
    let lq = [q23.abs().ln(), q13.abs().ln(), q12.abs().ln()];
    let sq = [q23.signum(), q13.signum(), q12.signum()];
    let ln_z3 = z[2].ln();
    let lg_alpha = ln_gamma(alpha);
    let mut shells = vec![0.0f64];
    let mut shell_abs = vec![0.0f64];
    // leading shell: no coupling powers
    let lead = rii[2] * gamma_pdf(alpha, z[2]) * p1[0] * p2[0];
    shells[0] = lead;
    shell_abs[0] = lead.abs();
    let mut accum = lead;
    let mut small_streak = 0usize;
    let mut n = 2usize;
    while n <= n_max {
        let m_total = n / 2;
        let eps = n - 2 * m_total;
        let sign_n = if n % 2 == 0 { 1.0 } else { -1.0 };
        let mut shell_sum = 0.0;
        let mut shell_mag = 0.0;
        let free = m_total - eps;
        for m1 in 0..=free {
            for m2 in 0..=(free - m1) {
                let m3 = free - m1 - m2;
                let e = [2 * m1 + eps, 2 * m2 + eps, 2 * m3 + eps];
                // a vanishing coupling kills every term that would raise it
                if e.iter().zip(&lq).any(|(ek, l)| *ek > 0 && l.is_infinite()) {
                    continue;
                }
                let nu = alpha + (m_total - m3) as f64;
                let mut ln_base = ln_gamma(alpha + m_total as f64) - lg_alpha - ln_gamma(nu)
                    + (nu - 1.0) * ln_z3
                    - z[2]
                    + rii[2].ln()
                    + eps as f64 * std::f64::consts::LN_2
                    - ln_gamma(m1 as f64 + 1.0)
                    - ln_gamma(m2 as f64 + 1.0)
                    - ln_gamma(m3 as f64 + 1.0);
                for (ek, l) in e.iter().zip(&lq) {
                    if *ek > 0 {
                        ln_base += *ek as f64 * l;
                    }
                }
                if ln_base > 600.0 {
                    return Err(Error::SeriesDivergence(
                        "expansion terms exceed floating range".into(),
                    ));
                }
                let sgn_q = if eps == 1 { sq[0] * sq[1] * sq[2] } else { 1.0 };
                let mut inner = ln_base.exp();
                let mut inner_sum = inner;
                let m_min = m1.min(m2).min(m3);
                for m in 0..m_min {
                    let mf = m as f64;
                    inner *= 4.0 * (m1 as f64 - mf) * (m2 as f64 - mf) * (m3 as f64 - mf)
                        / ((alpha + (m_total - m) as f64 - 1.0)
                            * (2.0 * mf + 1.0 + eps as f64)
                            * (2.0 * mf + 2.0 + eps as f64));
                    inner_sum += inner;
                }
                let term = sign_n * sgn_q * inner_sum * p1[m_total - m1] * p2[m_total - m2];
                shell_sum += term;
                shell_mag += term.abs();
            }
        }
        shells.push(shell_sum);
        shell_abs.push(shell_mag);
        accum += shell_sum;
        if shell_mag < 1e-15 * accum.abs().max(1e-280) {
            small_streak += 1;
            if small_streak >= 2 {
                break;
            }
        } else {
            small_streak = 0;
        }
        n += 1;
    }
    if n > n_max && shell_abs.last().copied().unwrap_or(0.0) > 1e-9 * accum.abs().max(1e-280) {
        return Err(Error::SeriesDivergence(format!(
            "coupling shells still at {:.3e} of {accum:.3e} at degree {n_max}",
            shell_abs.last().unwrap()
        )));
    }
    Ok(det_q.powf(alpha) / gamma_pdf(alpha, x3) * pairwise_sum(&shells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::gamma_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(p: usize, off: &[f64]) -> CorrelationModel {
        let mut m = DMatrix::identity(p, p);
        let mut it = off.iter();
        for i in 0..p {
            for j in i + 1..p {
                let v = *it.next().unwrap();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        CorrelationModel::new(m).unwrap()
    }

    fn decomp(p: usize, off: &[f64]) -> OneFactorDecomposition {
        one_factor_decompose(&corr(p, off), 1e-9).unwrap()
    }

    #[test]
    fn independence_factorizes() {
        let of = decomp(2, &[0.0]);
        let got = cdf_series(&[1.0, 1.0], 1.0, &of, &NoncentralityModel::zero(2), 1e-12).unwrap();
        let want = (1.0 - (-1.0f64).exp()).powi(2);
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    // both references below were computed from the Gaussian-box identity at
    // shape 1/2 (squared correlated normals) and, for the first, confirmed
    // by a 40-digit quadrature of the mixture integral; the two external
    // evaluations agreed to 8e-12
    #[test]
    fn equicorrelated_pins() {
        let of = decomp(3, &[0.5, 0.5, 0.5]);
        let zero = NoncentralityModel::zero(3);
        let x = [1.0, 1.5, 2.0];
        let got = cdf_series(&x, 0.5, &of, &zero, 1e-10).unwrap();
        assert!((got - 0.766416793225473733).abs() < 1e-8, "alpha=1/2: {got}");
        let got = cdf_series(&x, 1.5, &of, &zero, 1e-10).unwrap();
        assert!((got - 0.246613556223388261).abs() < 1e-9, "alpha=3/2: {got}");
    }

    #[test]
    fn scaled_regimes_match_gaussian_boxes() {
        // one loading square above one (1.2 at index 0)
        let of = decomp(3, &[0.9, 0.8, 0.6]);
        assert!(matches!(of.regime, Regime::OneAboveOne(0)));
        let got =
            cdf_series(&[1.0, 1.5, 0.8], 0.5, &of, &NoncentralityModel::zero(3), 1e-9).unwrap();
        assert!((got - 0.721962037807509).abs() < 2e-8, "one above: {got}");

        // imaginary loadings
        let of = decomp(3, &[-0.30, -0.20, -0.24]);
        assert!(of.imaginary);
        let got =
            cdf_series(&[0.9, 1.1, 0.7], 0.5, &of, &NoncentralityModel::zero(3), 1e-9).unwrap();
        assert!((got - 0.5550050774158072).abs() < 2e-8, "imaginary: {got}");
    }

    #[test]
    fn noncentral_rank_one_matches_gaussian_box() {
        let of = decomp(2, &[0.3]);
        let delta = [0.5, 0.7];
        let got = cdf_rank_one_series(&[2.0, 2.0], 0.5, &of, &delta, 1e-9).unwrap();
        assert!((got - 0.7713284979206741).abs() < 2e-8, "series: {got}");
        let nc = NoncentralityModel::from_rank_one(DVector::from_column_slice(&delta));
        let got2 = cdf_series(&[2.0, 2.0], 0.5, &of, &nc, 1e-9).unwrap();
        assert!((got - got2).abs() < 2e-13, "general table drifted: {got} vs {got2}");
    }

    #[test]
    fn direct_and_scaled_forms_agree() {
        let of = decomp(3, &[0.48, 0.56, 0.42]);
        let nc = NoncentralityModel::from_matrix(DMatrix::from_row_slice(
            3,
            3,
            &[0.50, 0.20, 0.10, 0.20, 0.40, 0.15, 0.10, 0.15, 0.30],
        ))
        .unwrap();
        let x = [1.4, 2.0, 1.1];
        let a = cdf_series_with(&x, 1.2, &of, &nc, 1e-11, SeriesForm::Direct).unwrap();
        let b = cdf_series_with(&x, 1.2, &of, &nc, 1e-11, SeriesForm::Scaled).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn form_restrictions_are_enforced() {
        let above = decomp(3, &[0.9, 0.8, 0.6]);
        let imag = decomp(3, &[-0.30, -0.20, -0.24]);
        let zero = NoncentralityModel::zero(3);
        let x = [1.0, 1.0, 1.0];
        assert!(cdf_series_with(&x, 1.0, &above, &zero, 1e-9, SeriesForm::Direct).is_err());
        assert!(cdf_series_with(&x, 1.0, &imag, &zero, 1e-9, SeriesForm::Direct).is_err());
        let limit = OneFactorDecomposition::from_loadings(vec![1.0, 0.7, 0.5], false, 1e-9).unwrap();
        assert!(cdf_series(&x, 1.0, &limit, &zero, 1e-9).is_err());
        assert!(cdf_limit_case(&x, 1.0, &above, &zero, 1e-9).is_err());
    }

    #[test]
    fn series_matches_angular_integral() {
        // real below-one loadings, plain factors on both sides
        let of = decomp(2, &[0.3]);
        let delta = [0.5, 0.7];
        let a = cdf_rank_one_series(&[2.0, 2.0], 1.0, &of, &delta, 1e-10).unwrap();
        let b = cdf_rank_one_integral(&[2.0, 2.0], 1.0, &of, &delta, 1e-10).unwrap();
        assert!((a - b).abs() < 1e-8, "below one: {a} vs {b}");

        // one square above one, determinant-scaled factors
        let of = decomp(3, &[0.9, 0.8, 0.6]);
        let delta = [0.2, 0.3, 0.1];
        let x = [1.0, 1.5, 0.8];
        let a = cdf_rank_one_series(&x, 1.0, &of, &delta, 1e-10).unwrap();
        let b = cdf_rank_one_integral(&x, 1.0, &of, &delta, 1e-10).unwrap();
        assert!((a - b).abs() < 1e-7, "one above: {a} vs {b}");

        // imaginary loadings
        let of = decomp(3, &[-0.30, -0.20, -0.24]);
        let delta = [0.4, 0.2, 0.3];
        let x = [0.9, 1.1, 0.7];
        let a = cdf_rank_one_series(&x, 1.0, &of, &delta, 1e-10).unwrap();
        let b = cdf_rank_one_integral(&x, 1.0, &of, &delta, 1e-10).unwrap();
        assert!((a - b).abs() < 1e-7, "imaginary: {a} vs {b}");
    }

    #[test]
    fn vanishing_noncentrality_collapses_to_central() {
        let of = decomp(3, &[0.48, 0.56, 0.42]);
        let x = [1.4, 2.0, 1.1];
        let central = cdf_series(&x, 1.0, &of, &NoncentralityModel::zero(3), 1e-11).unwrap();
        let viaseries = cdf_rank_one_series(&x, 1.0, &of, &[0.0; 3], 1e-11).unwrap();
        assert!((central - viaseries).abs() < 1e-13);
        let tiny = cdf_rank_one_series(&x, 1.0, &of, &[1e-9; 3], 1e-11).unwrap();
        assert!((central - tiny).abs() < 1e-7);
    }

    #[test]
    fn univariate_reduces_to_noncentral_cdf() {
        let of = OneFactorDecomposition::from_loadings(vec![0.0], false, 1e-9).unwrap();
        let nc = NoncentralityModel::from_rank_one(DVector::from_column_slice(&[0.7]));
        let got = cdf_series(&[2.5], 1.2, &of, &nc, 1e-10).unwrap();
        let want = noncentral_gamma_cdf(1.2, 2.5, 0.49).unwrap();
        assert!((got - want).abs() < 1e-14);
        let got = cdf_rank_one_integral(&[2.5], 1.2, &of, &[0.7], 1e-10).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn marginal_and_monotonicity() {
        let of = decomp(3, &[0.48, 0.56, 0.42]);
        let nc = NoncentralityModel::from_rank_one(DVector::from_column_slice(&[0.6, 0.3, 0.5]));
        // saturating the other coordinates leaves the first marginal, whose
        // noncentrality is the matching diagonal entry of the original matrix
        let got = cdf_series(&[1.7, 60.0, 60.0], 1.0, &of, &nc, 1e-10).unwrap();
        let want = noncentral_gamma_cdf(1.0, 1.7, 0.36).unwrap();
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        let lo = cdf_series(&[1.0, 2.0, 1.5], 1.0, &of, &nc, 1e-10).unwrap();
        let hi = cdf_series(&[1.3, 2.0, 1.5], 1.0, &of, &nc, 1e-10).unwrap();
        assert!(lo < hi && lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn boundary_regime_matches_gaussian_boxes() {
        let of = OneFactorDecomposition::from_loadings(vec![1.0, 0.7, 0.5], false, 1e-9).unwrap();
        assert!(matches!(of.regime, Regime::LimitEqualsOne(0)));
        let x = [1.2, 0.9, 1.4];
        let got = cdf_limit_case(&x, 0.5, &of, &NoncentralityModel::zero(3), 1e-9).unwrap();
        assert!((got - 0.7052815905710038).abs() < 2e-8, "central: {got}");
        let got = cdf_limit_rank_one(&x, 0.5, &of, &[0.4, 0.3, 0.2], 1e-9).unwrap();
        assert!((got - 0.6486899233383313).abs() < 2e-8, "rank one: {got}");
    }

    #[test]
    fn boundary_routes_agree() {
        let of = OneFactorDecomposition::from_loadings(vec![1.0, 0.7, 0.5], false, 1e-9).unwrap();
        let x = [1.2, 0.9, 1.4];
        for delta in [[0.4, 0.3, 0.2], [0.0, 0.3, 0.2], [-0.5, 0.2, 0.4]] {
            let a = cdf_limit_rank_one(&x, 1.0, &of, &delta, 1e-10).unwrap();
            let b = cdf_limit_integral(&x, 1.0, &of, &delta, 1e-10).unwrap();
            assert!((a - b).abs() < 1e-8, "delta {delta:?}: {a} vs {b}");
        }
        // step threshold inside the noncentrality peak: the angular region
        // degenerates to a sliver
        let a = cdf_limit_rank_one(&x, 1.0, &of, &[1.5, 0.3, 0.2], 1e-10).unwrap();
        let b = cdf_limit_integral(&x, 1.0, &of, &[1.5, 0.3, 0.2], 1e-10).unwrap();
        assert!((a - b).abs() < 1e-8, "sliver: {a} vs {b}");
        // central special case agrees with the general-noncentrality route
        let c = cdf_limit_case(&x, 1.0, &of, &NoncentralityModel::zero(3), 1e-10).unwrap();
        let d = cdf_limit_rank_one(&x, 1.0, &of, &[0.0; 3], 1e-10).unwrap();
        assert!((c - d).abs() < 1e-12);
    }

    #[test]
    fn conditional_construction_matches_rank_one() {
        // below-one embedding
        let of = decomp(2, &[0.3]);
        let x3 = 1.3f64;
        let s = x3.sqrt();
        let a = cdf_bivariate_conditional(2.0, 2.0, 1.0, 0.3, x3, (0.5, 0.7), 1e-10).unwrap();
        let b = cdf_rank_one_series(&[2.0, 2.0], 1.0, &of, &[0.5 * s, 0.7 * s], 1e-10).unwrap();
        assert!((a - b).abs() < 1e-7, "below one: {a} vs {b}");

        // embedding with a loading square above one
        let of = decomp(2, &[0.8]);
        let a = cdf_bivariate_conditional(1.5, 1.2, 1.0, 0.8, x3, (0.9, 0.2), 1e-10).unwrap();
        let b = cdf_rank_one_series(&[1.5, 1.2], 1.0, &of, &[0.9 * s, 0.2 * s], 1e-10).unwrap();
        assert!((a - b).abs() < 1e-7, "above one: {a} vs {b}");

        // embedding with imaginary loadings
        let of = decomp(2, &[-0.3]);
        let a = cdf_bivariate_conditional(1.5, 1.2, 1.0, -0.3, x3, (0.4, 0.5), 1e-10).unwrap();
        let b = cdf_rank_one_series(&[1.5, 1.2], 1.0, &of, &[0.4 * s, 0.5 * s], 1e-10).unwrap();
        assert!((a - b).abs() < 1e-7, "imaginary: {a} vs {b}");
    }

    #[test]
    fn conditional_rejects_partial_zero_loading() {
        let err = cdf_bivariate_conditional(1.5, 1.2, 1.0, 0.3, 1.0, (0.4, 0.0), 1e-9);
        assert!(matches!(err, Err(Error::NotOneFactor(_))), "{err:?}");
    }

    #[test]
    fn coupling_expansion_matches_conditional() {
        for (x1, x2, alpha, r, x3, d) in [
            (2.0, 2.0, 1.0, 0.3, 1.3, (0.5, 0.7)),
            (1.5, 1.2, 1.5, -0.3, 1.3, (0.4, 0.5)),
            (1.0, 2.5, 0.8, 0.5, 0.7, (0.3, 0.2)),
        ] {
            let a = cdf_bivariate_conditional(x1, x2, alpha, r, x3, d, 1e-10).unwrap();
            let b = cdf_bivariate_expansion(x1, x2, alpha, r, x3, d, 120).unwrap();
            assert!((a - b).abs() < 1e-6, "r={r} d={d:?}: {a} vs {b}");
        }
    }

    #[test]
    fn coupling_expansion_decouples_at_identity() {
        let got = cdf_bivariate_expansion(1.4, 2.2, 1.3, 0.0, 1.0, (0.0, 0.0), 40).unwrap();
        let want = gamma_cdf(1.3, 1.4) * gamma_cdf(1.3, 2.2);
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    #[test]
    fn coupling_expansion_truncation_is_stable() {
        let a = cdf_bivariate_expansion(2.0, 2.0, 1.0, 0.3, 1.3, (0.5, 0.7), 60).unwrap();
        let b = cdf_bivariate_expansion(2.0, 2.0, 1.0, 0.3, 1.3, (0.5, 0.7), 120).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn quadratic_form_coeff_matches_brute_force() {
        // expand (s^T D s)^n literally and read off one monomial
        fn brute(d: &DMatrix<f64>, n: &[usize]) -> f64 {
            let p = n.len();
            let total: usize = n.iter().sum();
            let deg = total / 2;
            let mut sum = 0.0;
            let mut idx = vec![0usize; deg];
            loop {
                let mut w = 1.0;
                let mut pows = vec![0usize; p];
                for t in &idx {
                    let (i, j) = (t / p, t % p);
                    w *= d[(i, j)];
                    pows[i] += 1;
                    pows[j] += 1;
                }
                if pows == n {
                    sum += w;
                }
                let mut k = 0;
                loop {
                    if k == deg {
                        let fact: f64 = (1..=deg).map(|v| v as f64).product();
                        return sum / fact;
                    }
                    idx[k] += 1;
                    if idx[k] < p * p {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
            }
        }
        let d3 = DMatrix::from_row_slice(
            3,
            3,
            &[0.7, 0.3, -0.2, 0.3, 1.1, 0.4, -0.2, 0.4, 0.9],
        );
        for n in [[2usize, 2, 2], [4, 0, 2], [1, 2, 1], [3, 3, 0]] {
            let got = quadratic_form_coeff(&d3, &n).unwrap();
            let want = brute(&d3, &n);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{n:?}: {got} vs {want}");
        }
        let d2 = DMatrix::from_row_slice(2, 2, &[0.9, -0.35, -0.35, 0.6]);
        for n in [[3usize, 1], [2, 2], [0, 4]] {
            let got = quadratic_form_coeff(&d2, &n).unwrap();
            let want = brute(&d2, &n);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{n:?}: {got} vs {want}");
        }
        let d4 = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.8, 0.2, -0.1, 0.3, 0.2, 1.0, 0.25, -0.15, -0.1, 0.25, 0.7, 0.1, 0.3, -0.15,
                0.1, 1.2,
            ],
        );
        for n in [[2usize, 1, 1, 2], [1, 1, 1, 1], [2, 0, 0, 2]] {
            let got = quadratic_form_coeff(&d4, &n).unwrap();
            let want = brute(&d4, &n);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{n:?}: {got} vs {want}");
        }
        assert!(quadratic_form_coeff(&d3, &[1, 1, 1]).is_err());
    }

    #[test]
    fn order_stack_matches_direct_evaluation() {
        for &(alpha, x, u) in &[
            (1.3, 2.5, 0.7),
            (0.5, 8.0, 30.0),
            (2.0, 700.0, 5.0),
            (1.0, 3.0, 800.0),
            (1.7, 900.0, 850.0),
            (0.8, 12.0, 0.0),
        ] {
            let stack = cdf_orders(alpha, x, u, 13).unwrap();
            for n in 0..13 {
                let direct = noncentral_gamma_cdf(alpha + n as f64, x, u).unwrap();
                assert!(
                    (stack[n] - direct).abs() < 1e-12,
                    "alpha={alpha} x={x} u={u} n={n}: {} vs {direct}",
                    stack[n]
                );
            }
        }
    }

    #[test]
    fn scaled_exponent_reports_the_cancellation_scale() {
        let of = decomp(3, &[0.9, 0.8, 0.6]);
        let t = scaled_series_exponent(&of, &[1.0, 1.5, 0.8]);
        assert!((t - 5.0).abs() < 1e-9, "{t}"); // w^2 = -5 at the index above one
        let of = decomp(3, &[0.48, 0.56, 0.42]);
        assert_eq!(scaled_series_exponent(&of, &[1.0, 1.5, 0.8]), 0.0);
    }

    // Laplace-transform identities behind the factorizations: the closed
    // matrix form against the diagonalized groupings, across the regimes.
    #[test]
    fn transform_factorizations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let configs: Vec<OneFactorDecomposition> = vec![
            OneFactorDecomposition::from_loadings(vec![0.8, 0.6, 0.7], false, 1e-9).unwrap(),
            OneFactorDecomposition::from_loadings(vec![0.7, -0.5, 0.6, 0.3], false, 1e-9).unwrap(),
            OneFactorDecomposition::from_loadings(vec![0.5, 0.6, 0.4], true, 1e-9).unwrap(),
            decomp(3, &[0.9, 0.8, 0.6]),
        ];
        for iter in 0..200 {
            let of = &configs[iter % configs.len()];
            let p = of.dim();
            let sign = if of.imaginary { -1.0 } else { 1.0 };
            let r = DMatrix::from_fn(p, p, |i, j| {
                if i == j { 1.0 } else { sign * of.a[i] * of.a[j] }
            });
            let r_inv = r.clone().try_inverse().unwrap();
            let mut t = DVector::from_fn(p, |_, _| rng.gen_range(0.05..2.5));
            if let Regime::OneAboveOne(k) = of.regime {
                t[k] = 1.0 / (of.a_sq(k) - 1.0) + rng.gen_range(0.1..2.0);
            }
            let v = DMatrix::from_fn(p, 2, |_, _| rng.gen_range(-0.8..0.8));
            let big_delta = &v * v.transpose();
            let delta_vec = DVector::from_fn(p, |_, _| rng.gen_range(-0.9..0.9));

            // everything in logs: the exponent groupings cancel across huge
            // ranges when the inverse correlation is badly conditioned, so
            // tolerances carry the summed magnitudes
            let ln_lhs = |dm: &DMatrix<f64>| -> f64 {
                let m = DMatrix::identity(p, p) + &r * DMatrix::from_diagonal(&t);
                let det = m.determinant();
                let sol = m.lu().solve(dm).unwrap();
                let tr: f64 = (0..p).map(|j| t[j] * sol[(j, j)]).sum();
                -1.5 * det.ln() - tr
            };
            let close = |a: f64, b: f64, scale: f64, tag: &str| {
                assert!(
                    (a - b).abs() < 1e-10 * (1.0 + scale),
                    "iter {iter} {tag}: {a} vs {b} (scale {scale:.1})"
                );
            };
            let winv2: Vec<f64> = (0..p).map(|j| 1.0 - of.a_sq(j)).collect();
            let z: Vec<f64> = (0..p).map(|j| 1.0 / (1.0 + winv2[j] * t[j])).collect();
            let u: Vec<f64> = z.iter().map(|zj| 1.0 - zj).collect();
            let one_bub = 1.0 + (0..p).map(|j| of.b_sq(j) * u[j]).sum::<f64>();
            let q = z.iter().product::<f64>() / one_bub;
            assert!(q > 0.0, "grouping ratio must stay positive, got {q}");

            // closed form vs the grouping in the original noncentrality
            let l = ln_lhs(&big_delta);
            let e1: f64 = (0..p).map(|j| big_delta[(j, j)] * of.w2[j] * u[j]).sum();
            let c: Vec<f64> = (0..p).map(|j| of.a[j] * of.w2[j] * u[j]).collect();
            let mut cdc = 0.0;
            for i in 0..p {
                for j in 0..p {
                    cdc += c[i] * big_delta[(i, j)] * c[j];
                }
            }
            let rhs = 1.5 * q.ln() - e1 + sign * cdc / one_bub;
            close(l, rhs, e1.abs() + (cdc / one_bub).abs(), "grouping A");

            // grouping in the transformed noncentrality
            let d = &r_inv * &big_delta * &r_inv;
            let mut ada = 0.0;
            let mut azdza = 0.0;
            for i in 0..p {
                for j in 0..p {
                    ada += of.a[i] * d[(i, j)] * of.a[j];
                    azdza += of.a[i] * z[i] * d[(i, j)] * z[j] * of.a[j];
                }
            }
            let e2: f64 = (0..p).map(|j| d[(j, j)] * winv2[j] * u[j]).sum();
            let rhs = -sign * ada + 1.5 * q.ln() - e2 + sign * azdza / one_bub;
            close(l, rhs, ada.abs() + e2.abs() + (azdza / one_bub).abs(), "grouping B");

            // rank-one groupings
            let dd = &delta_vec * delta_vec.transpose();
            let l = ln_lhs(&dd);
            let e3: f64 = (0..p).map(|j| delta_vec[j] * delta_vec[j] * of.w2[j] * u[j]).sum();
            let s: f64 = (0..p).map(|j| of.a[j] * of.w2[j] * u[j] * delta_vec[j]).sum();
            let rhs = 1.5 * q.ln() - e3 + sign * s * s / one_bub;
            close(l, rhs, e3.abs() + (s * s / one_bub).abs(), "grouping C");

            let dvec = &r_inv * &delta_vec;
            let ad: f64 = (0..p).map(|j| of.a[j] * dvec[j]).sum();
            let azd: f64 = (0..p).map(|j| of.a[j] * z[j] * dvec[j]).sum();
            let e4: f64 = (0..p).map(|j| dvec[j] * dvec[j] * winv2[j] * u[j]).sum();
            let rhs = -sign * ad * ad + 1.5 * q.ln() - e4 + sign * azd * azd / one_bub;
            close(l, rhs, ad * ad + e4.abs() + (azd * azd / one_bub).abs(), "grouping D");

            // determinant split of the mixed term
            if of.beta.is_finite() {
                let bzb: f64 = (0..p).map(|j| of.b_sq(j) * z[j]).sum();
                let split = of.beta * (1.0 - bzb / of.beta);
                assert!(
                    (one_bub - split).abs() < 1e-12 * one_bub.abs().max(1.0),
                    "iter {iter}: {one_bub} vs {split}"
                );
            }
        }
    }
}
