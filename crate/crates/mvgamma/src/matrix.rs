//! Correlation and noncentrality structure shared by both CDF routes:
//! cached spectra and inverses, the one-factor decomposition, the scaled
//! operator pair (B, D) for the angular route, and the small complex-matrix
//! helpers (bordered split, branch-correct log-determinants) its integrands
//! are built from.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Largest supported dimension; dense direct methods stay optimal here.
pub const DIM_CAP: usize = 16;

const SYM_TOL: f64 = 1e-12;

fn check_square_symmetric(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    let p = m.nrows();
    if p == 0 || m.ncols() != p {
        return Err(Error::BadMatrix(format!(
            "{what} matrix must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if p > DIM_CAP {
        return Err(Error::BadMatrix(format!(
            "{what} dimension {p} exceeds the supported cap {DIM_CAP}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadMatrix(format!("{what} matrix has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..p {
        for j in (i + 1)..p {
            if (m[(i, j)] - m[(j, i)]).abs() > SYM_TOL * scale {
                return Err(Error::BadMatrix(format!(
                    "{what} matrix asymmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(p)
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// A non-singular symmetric matrix with its inverse and spectrum cached.
///
/// Despite the name this accepts any symmetric non-singular matrix; whether
/// the diagonal is actually unit can be queried with [`is_correlation`]
/// (`CorrelationModel::is_correlation`), and routines that need positive
/// definiteness check `lambda_min` themselves.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    pub dim: usize,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    pub det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl CorrelationModel {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        let dim = check_square_symmetric(&r, "correlation")?;
        let eig = r.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let abs_max = lambda_min.abs().max(lambda_max.abs());
        let abs_min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if abs_min <= 1e-12 * abs_max {
            return Err(Error::BadMatrix(format!(
                "matrix is singular to working precision (|lambda| down to {abs_min:.3e})"
            )));
        }
        let det = eig.eigenvalues.iter().product();
        // V diag(1/lambda) V^T keeps the inverse exactly symmetric
        let inv_l = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|l| 1.0 / l));
        let r_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_l) * eig.eigenvectors.transpose();
        let residual = (&r_inv * &r - DMatrix::<f64>::identity(dim, dim)).amax();
        let cond = abs_max / abs_min;
        if residual > 1e-10 * cond.max(1.0) {
            return Err(Error::BadMatrix(format!(
                "inverse residual {residual:.3e} too large (condition ~ {cond:.3e})"
            )));
        }
        Ok(Self { dim, r, r_inv, det, lambda_min, lambda_max })
    }

    /// True when every diagonal entry is 1 to working precision.
    pub fn is_correlation(&self) -> bool {
        (0..self.dim).all(|j| (self.r[(j, j)] - 1.0).abs() <= 1e-12)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.lambda_min > 0.0
    }
}

/// Splits a covariance into correlation and per-coordinate variances,
/// `sigma = S R S` with `S = diag(sqrt(sigma_jj))`.  CDF arguments transform
/// as `x_j -> x_j / sigma_jj` and the noncentrality as `S^-1 Delta S^-1`.
pub fn standardize(sigma: &DMatrix<f64>) -> Result<(CorrelationModel, Vec<f64>)> {
    let p = check_square_symmetric(sigma, "covariance")?;
    let mut var = Vec::with_capacity(p);
    for j in 0..p {
        let v = sigma[(j, j)];
        if v <= 0.0 {
            return Err(Error::BadMatrix(format!("covariance diagonal entry {j} is {v}, must be positive")));
        }
        var.push(v);
    }
    let r = DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (var[i] * var[j]).sqrt());
    Ok((CorrelationModel::new(r)?, var))
}

/// Noncentrality matrix with its rank and, when rank <= 1, the factor
/// `delta` with `Delta = delta delta^T`.
#[derive(Debug, Clone)]
pub struct NoncentralityModel {
    pub dim: usize,
    pub delta: DMatrix<f64>,
    pub rank: usize,
    pub rank1: Option<DVector<f64>>,
}

impl NoncentralityModel {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            delta: DMatrix::zeros(dim, dim),
            rank: 0,
            rank1: Some(DVector::zeros(dim)),
        }
    }

    pub fn from_rank_one(delta: DVector<f64>) -> Self {
        let dim = delta.len();
        let m = &delta * delta.transpose();
        let rank = if delta.iter().all(|v| *v == 0.0) { 0 } else { 1 };
        Self { dim, delta: m, rank, rank1: Some(delta) }
    }

    pub fn from_matrix(delta: DMatrix<f64>) -> Result<Self> {
        let dim = check_square_symmetric(&delta, "noncentrality")?;
        let eig = delta.clone().symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let scale = top.max(1.0);
        if eig.eigenvalues.iter().any(|l| *l < -1e-10 * scale) {
            return Err(Error::BadMatrix(
                "noncentrality matrix must be positive semi-definite".into(),
            ));
        }
        let rank = eig.eigenvalues.iter().filter(|l| **l > 1e-10 * scale).count();
        let rank1 = if rank == 0 {
            Some(DVector::zeros(dim))
        } else if rank == 1 {
            let k = (0..dim)
                .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
                .unwrap();
            let mut d = eig.eigenvectors.column(k) * eig.eigenvalues[k].sqrt();
            // deterministic orientation; delta delta^T is sign-blind
            let lead = (0..dim).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap();
            if d[lead] < 0.0 {
                d = -d;
            }
            Some(d)
        } else {
            None
        };
        if let Some(d) = &rank1 {
            let residual = (&delta - d * d.transpose()).amax();
            if residual > 1e-10 * scale {
                return Err(Error::BadMatrix(format!(
                    "rank-1 factor residual {residual:.3e} inconsistent with detected rank"
                )));
            }
        }
        Ok(Self { dim, delta, rank, rank1 })
    }
}

/// `D = R^-1 Delta R^-1`, plus the factor `d = R^-1 delta` when the
/// noncentrality is (at most) rank one, so that `D = d d^T`.
pub fn transformed_noncentrality(
    model: &CorrelationModel,
    nc: &NoncentralityModel,
) -> Result<(DMatrix<f64>, Option<DVector<f64>>)> {
    if nc.dim != model.dim {
        return Err(Error::BadMatrix(format!(
            "noncentrality dimension {} does not match correlation dimension {}",
            nc.dim, model.dim
        )));
    }
    let d = &model.r_inv * &nc.delta * &model.r_inv;
    let factor = nc.rank1.as_ref().map(|v| &model.r_inv * v);
    Ok((d, factor))
}

/// Regime of the one-factor decomposition, keyed by `max a_j^2` against 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    AllBelowOne,
    /// Exactly one `a_k^2 > 1`; that coordinate has `w_k^2 < 0`.
    OneAboveOne(usize),
    /// Exactly one `a_k^2 = 1` within tolerance; `w_k^2` diverges and the
    /// truncated-integral formulas take over.
    LimitEqualsOne(usize),
}

/// `R = W^-2 + a a^T` with diagonal `W`, `w_j^-2 = 1 - a_j^2`.
///
/// The loading column is real or pure imaginary as a whole (mixed entries
/// cannot produce a real `a a^T`): `a` stores real magnitudes and
/// `imaginary` the parity, so the signed square is `a_sq(j) = -a[j]^2` when
/// the flag is set.  At the limit index `w2` holds infinity; the limit-case
/// formulas never consume it.
#[derive(Debug, Clone)]
pub struct OneFactorDecomposition {
    pub a: Vec<f64>,
    pub imaginary: bool,
    pub w2: Vec<f64>,
    /// `det(WRW) = 1 + sum_j b_j^2`; negative in the OneAboveOne regime,
    /// infinite at a limit case.
    pub beta: f64,
    pub regime: Regime,
}

impl OneFactorDecomposition {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Signed square `a_j^2` (negative for an imaginary column).
    pub fn a_sq(&self, j: usize) -> f64 {
        let s = self.a[j] * self.a[j];
        if self.imaginary {
            -s
        } else {
            s
        }
    }

    /// `b_j^2 = w_j^2 a_j^2`, always real.
    pub fn b_sq(&self, j: usize) -> f64 {
        self.w2[j] * self.a_sq(j)
    }

    /// Builds the decomposition from a loading column directly (any p).
    pub fn from_loadings(a: Vec<f64>, imaginary: bool, tol: f64) -> Result<Self> {
        if a.is_empty() || a.len() > DIM_CAP {
            return Err(Error::BadMatrix(format!(
                "loading column length {} outside 1..={DIM_CAP}",
                a.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadMatrix("loadings must be finite".into()));
        }
        let sq: Vec<f64> = a.iter().map(|v| if imaginary { -v * v } else { v * v }).collect();
        let p = a.len();
        let mut limit = None;
        let mut above = None;
        for j in 0..p {
            let s = sq[j];
            if (s - 1.0).abs() <= tol {
                if limit.is_some() {
                    return Err(Error::NotOneFactor(
                        "more than one loading square at the limit value 1".into(),
                    ));
                }
                limit = Some(j);
            } else if s > 1.0 {
                if above.is_some() {
                    return Err(Error::NotOneFactor(
                        "more than one loading square above 1".into(),
                    ));
                }
                above = Some(j);
            }
        }
        if limit.is_some() && above.is_some() {
            return Err(Error::NotOneFactor(
                "loading squares both at and above the limit value 1".into(),
            ));
        }
        let regime = match (limit, above) {
            (Some(k), _) => Regime::LimitEqualsOne(k),
            (None, Some(k)) => Regime::OneAboveOne(k),
            _ => Regime::AllBelowOne,
        };
        let mut a = a;
        if let Regime::LimitEqualsOne(k) = regime {
            // keep a_k = +1 in the limit; the sign of the whole column is free
            if a[k] < 0.0 {
                for v in &mut a {
                    *v = -*v;
                }
            }
        }
        let w2: Vec<f64> = (0..p)
            .map(|j| {
                if matches!(regime, Regime::LimitEqualsOne(k) if k == j) {
                    f64::INFINITY
                } else {
                    1.0 / (1.0 - sq[j])
                }
            })
            .collect();
        let beta = if matches!(regime, Regime::LimitEqualsOne(_)) {
            f64::INFINITY
        } else {
            1.0 + (0..p).map(|j| w2[j] * sq[j]).sum::<f64>()
        };
        Ok(Self { a, imaginary, w2, beta, regime })
    }

    /// Max-norm error of `R - (W^-2 + a a^T)`; diverges only if the caller
    /// passes a model inconsistent with the loadings.
    pub fn reconstruction_error(&self, model: &CorrelationModel) -> f64 {
        let p = self.dim();
        let mut err = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                let aa = if self.imaginary { -self.a[i] * self.a[j] } else { self.a[i] * self.a[j] };
                let want = if i == j {
                    let winv2 = if self.w2[i].is_infinite() { 0.0 } else { 1.0 / self.w2[i] };
                    winv2 + aa
                } else {
                    aa
                };
                err = err.max((model.r[(i, j)] - want).abs());
            }
        }
        err
    }
}

/// Detects the one-factor structure of a correlation matrix.
///
/// Closed forms exist for p <= 3 (`a_i^2 = r_ij r_ik / r_jk` up to signs);
/// beyond that the caller must supply loadings via
/// [`OneFactorDecomposition::from_loadings`].  `tol` controls the
/// limit-regime classification `|a_k^2 - 1| <= tol`.
pub fn one_factor_decompose(model: &CorrelationModel, tol: f64) -> Result<OneFactorDecomposition> {
    if !model.is_correlation() {
        return Err(Error::BadMatrix(
            "one-factor decomposition is defined for unit-diagonal matrices; standardize first".into(),
        ));
    }
    let r = &model.r;
    let (a, imaginary) = match model.dim {
        1 => (vec![0.0], false),
        2 => {
            let r12 = r[(0, 1)];
            if 1.0 - r12.abs() <= tol {
                return Err(Error::NotOneFactor(
                    "bivariate correlation at the singular boundary |r| = 1".into(),
                ));
            }
            let m = r12.abs().sqrt();
            (vec![m, r12.signum() * m], false)
        }
        3 => {
            let (r12, r13, r23) = (r[(0, 1)], r[(0, 2)], r[(1, 2)]);
            if r12 * r13 * r23 == 0.0 {
                return Err(Error::NotOneFactor(
                    "a vanishing correlation leaves no one-factor representation for p = 3".into(),
                ));
            }
            let a1_sq = r12 * r13 / r23;
            if a1_sq > 0.0 {
                let a1 = a1_sq.sqrt();
                (vec![a1, r12 / a1, r13 / a1], false)
            } else {
                // whole column pure imaginary: a_j = i m_j, a_i a_j = -m_i m_j
                let m1 = (-a1_sq).sqrt();
                (vec![m1, -r12 / m1, -r13 / m1], true)
            }
        }
        p => {
            return Err(Error::NotOneFactor(format!(
                "closed-form detection covers p <= 3, got p = {p}; supply loadings directly"
            )));
        }
    };
    let of = OneFactorDecomposition::from_loadings(a, imaginary, tol)?;
    let err = of.reconstruction_error(model);
    if err > 1e-9 {
        return Err(Error::InconsistentSigns(format!(
            "reconstruction error {err:.3e} under every admissible sign assignment"
        )));
    }
    Ok(of)
}

/// Scale choice for the angular route's operators.
#[derive(Debug, Clone)]
pub enum Scaling {
    /// One common weight `nu = (1/lambda_min + 1/lambda_max) / 2`, which
    /// guarantees `|B| = (lambda_max - lambda_min)/(lambda_max + lambda_min) < 1`.
    Isotropic,
    /// `w_j^2 = (Sigma^-1)_jj`, making `W^-1 Sigma^-1 W^-1` a correlation
    /// matrix; `|B|` may reach or exceed 1.
    Natural,
    Custom(Vec<f64>),
}

/// The pair `B = (W Sigma W)^-1 - I`, `D = W^-1 Sigma^-1 Delta Sigma^-1 W^-1`
/// with the scalars every angular integrand needs alongside them.
#[derive(Debug, Clone)]
pub struct ScaledOperators {
    pub w2: Vec<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Spectral norm of B (B is symmetric, so the largest |eigenvalue|).
    pub norm_b: f64,
    /// `ln det(W Sigma W)`, for the `|W Sigma W|^-alpha` prefactor.
    pub ln_det_wsw: f64,
    /// `tr(Delta Sigma^-1)`, for the `etr(-Delta Sigma^-1)` prefactor.
    pub tr_delta_sigma_inv: f64,
}

pub fn build_scaled_operators(
    sigma: &CorrelationModel,
    nc: &NoncentralityModel,
    scaling: &Scaling,
) -> Result<ScaledOperators> {
    let p = sigma.dim;
    if nc.dim != p {
        return Err(Error::BadMatrix(format!(
            "noncentrality dimension {} does not match covariance dimension {p}",
            nc.dim
        )));
    }
    if !sigma.is_positive_definite() {
        return Err(Error::BadMatrix(
            "scaled operators need a positive definite covariance".into(),
        ));
    }
    let w2: Vec<f64> = match scaling {
        Scaling::Isotropic => {
            let nu = 0.5 * (1.0 / sigma.lambda_min + 1.0 / sigma.lambda_max);
            vec![nu; p]
        }
        Scaling::Natural => (0..p).map(|j| sigma.r_inv[(j, j)]).collect(),
        Scaling::Custom(w) => {
            if w.len() != p || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::BadMatrix(
                    "custom scale weights must be positive, finite, and of matching length".into(),
                ));
            }
            w.clone()
        }
    };
    let winv = DMatrix::from_diagonal(&DVector::from_iterator(p, w2.iter().map(|v| 1.0 / v.sqrt())));
    let b = &winv * &sigma.r_inv * &winv - DMatrix::<f64>::identity(p, p);
    let d = &winv * &sigma.r_inv * &nc.delta * &sigma.r_inv * &winv;
    let norm_b = sym_eigenvalues(&b).iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let ln_det_wsw = sigma.det.ln() + w2.iter().map(|v| v.ln()).sum::<f64>();
    let tr_delta_sigma_inv = (&sigma.r_inv * &nc.delta).trace();
    Ok(ScaledOperators { w2, b, d, norm_b, ln_det_wsw, tr_delta_sigma_inv })
}

// ---------------------------------------------------------------------------
// Hermitian (complex Wishart) counterparts.

fn check_hermitian(m: &DMatrix<Complex64>, what: &str) -> Result<usize> {
    let p = m.nrows();
    if p == 0 || m.ncols() != p {
        return Err(Error::BadMatrix(format!("{what} matrix must be square and non-empty")));
    }
    if p > DIM_CAP {
        return Err(Error::BadMatrix(format!(
            "{what} dimension {p} exceeds the supported cap {DIM_CAP}"
        )));
    }
    if m.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::BadMatrix(format!("{what} matrix has non-finite entries")));
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.norm())).max(1.0);
    for i in 0..p {
        for j in i..p {
            if (m[(i, j)] - m[(j, i)].conj()).norm() > SYM_TOL * scale {
                return Err(Error::BadMatrix(format!("{what} matrix not Hermitian at ({i},{j})")));
            }
        }
    }
    Ok(p)
}

/// Eigenvalues of a Hermitian matrix, ascending, via the real symmetric
/// embedding `[[X, -Y], [Y, X]]` of `H = X + iY` (each eigenvalue doubled).
pub fn hermitian_eigenvalues(h: &DMatrix<Complex64>) -> Result<Vec<f64>> {
    let p = check_hermitian(h, "hermitian")?;
    let e = DMatrix::from_fn(2 * p, 2 * p, |i, j| {
        let (bi, bj) = (i / p, j / p);
        let v = h[(i % p, j % p)];
        match (bi, bj) {
            (0, 0) | (1, 1) => v.re,
            (0, 1) => -v.im,
            _ => v.im,
        }
    });
    let ev = sym_eigenvalues(&e);
    Ok(ev.into_iter().step_by(2).collect())
}

/// Hermitian positive definite covariance with cached inverse and spectrum.
#[derive(Debug, Clone)]
pub struct HermitianModel {
    pub dim: usize,
    pub sigma: DMatrix<Complex64>,
    pub sigma_inv: DMatrix<Complex64>,
    pub ln_det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl HermitianModel {
    pub fn new(sigma: DMatrix<Complex64>) -> Result<Self> {
        let dim = check_hermitian(&sigma, "covariance")?;
        let ev = hermitian_eigenvalues(&sigma)?;
        let lambda_min = ev[0];
        let lambda_max = ev[dim - 1];
        if lambda_min <= 1e-12 * lambda_max.abs().max(1.0) {
            return Err(Error::BadMatrix(format!(
                "hermitian covariance must be positive definite (lambda_min = {lambda_min:.3e})"
            )));
        }
        let lu = sigma.clone().lu();
        let sigma_inv = lu
            .solve(&DMatrix::<Complex64>::identity(dim, dim))
            .ok_or_else(|| Error::BadMatrix("hermitian covariance is singular".into()))?;
        let ln_det = ev.iter().map(|l| l.ln()).sum();
        Ok(Self { dim, sigma, sigma_inv, ln_det, lambda_min, lambda_max })
    }
}

/// Complex counterpart of [`ScaledOperators`]; B and D are Hermitian, the
/// scale weights stay real.
#[derive(Debug, Clone)]
pub struct ScaledOperatorsC {
    pub w2: Vec<f64>,
    pub b: DMatrix<Complex64>,
    pub d: DMatrix<Complex64>,
    pub norm_b: f64,
    pub ln_det_wsw: f64,
    pub tr_delta_sigma_inv: f64,
}

pub fn build_scaled_operators_hermitian(
    sigma: &HermitianModel,
    delta: &DMatrix<Complex64>,
    scaling: &Scaling,
) -> Result<ScaledOperatorsC> {
    let p = sigma.dim;
    if check_hermitian(delta, "noncentrality")? != p {
        return Err(Error::BadMatrix("noncentrality dimension mismatch".into()));
    }
    let w2: Vec<f64> = match scaling {
        Scaling::Isotropic => {
            let nu = 0.5 * (1.0 / sigma.lambda_min + 1.0 / sigma.lambda_max);
            vec![nu; p]
        }
        Scaling::Natural => (0..p).map(|j| sigma.sigma_inv[(j, j)].re).collect(),
        Scaling::Custom(w) => {
            if w.len() != p || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::BadMatrix(
                    "custom scale weights must be positive, finite, and of matching length".into(),
                ));
            }
            w.clone()
        }
    };
    if w2.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::BadMatrix("natural scaling produced a non-positive weight".into()));
    }
    let winv = DMatrix::from_diagonal(&DVector::from_iterator(
        p,
        w2.iter().map(|v| Complex64::new(1.0 / v.sqrt(), 0.0)),
    ));
    let b = &winv * &sigma.sigma_inv * &winv - DMatrix::<Complex64>::identity(p, p);
    let d = &winv * &sigma.sigma_inv * delta * &sigma.sigma_inv * &winv;
    let norm_b = hermitian_eigenvalues(&b)?.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let ln_det_wsw = sigma.ln_det + w2.iter().map(|v| v.ln()).sum::<f64>();
    let tr_delta_sigma_inv = (&sigma.sigma_inv * delta).trace().re;
    Ok(ScaledOperatorsC { w2, b, d, norm_b, ln_det_wsw, tr_delta_sigma_inv })
}

// ---------------------------------------------------------------------------
// Bordered reduction and branch-correct determinant powers.

/// Partition of a bordered matrix `M = [[App, b], [row, c]]` together with
/// `y0 = row App^-1 b - c`, the unique value such that adding `y` to the
/// corner makes `M` singular exactly at `y = y0`.
///
/// The lower row is read literally, which covers both conventions at once:
/// for symmetric data it is `b^T`, for Hermitian data it is already `b^*`.
#[derive(Debug, Clone)]
pub struct SchurSplit {
    pub leading: DMatrix<Complex64>,
    pub border: DVector<Complex64>,
    pub corner: Complex64,
    pub y0: Complex64,
}

pub fn schur_split(m: &DMatrix<Complex64>) -> Result<SchurSplit> {
    let p = m.nrows();
    if p < 2 || m.ncols() != p {
        return Err(Error::BadMatrix("bordered split needs a square matrix of dimension >= 2".into()));
    }
    let k = p - 1;
    let leading = m.view((0, 0), (k, k)).into_owned();
    let border = m.view((0, k), (k, 1)).column(0).into_owned();
    let corner = m[(k, k)];
    let lu = leading.clone().lu();
    let sol = lu
        .solve(&border)
        .ok_or_else(|| Error::BadMatrix("leading block of the bordered split is singular".into()))?;
    let row = m.view((k, 0), (1, k));
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..k {
        acc += row[(0, j)] * sol[j];
    }
    Ok(SchurSplit { leading, border, corner, y0: acc - corner })
}

/// Eigenvalues of a small complex matrix: closed forms for dim <= 3,
/// Schur iteration above.
pub fn complex_eigenvalues_small(m: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let p = m.nrows();
    if p == 0 || m.ncols() != p {
        return Err(Error::BadMatrix("eigenvalues need a square non-empty matrix".into()));
    }
    match p {
        1 => Ok(vec![m[(0, 0)]]),
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let s = (tr * tr - 4.0 * det).sqrt();
            Ok(vec![0.5 * (tr + s), 0.5 * (tr - s)])
        }
        3 => {
            let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
            let c1 = m[(0, 0)] * m[(1, 1)] + m[(0, 0)] * m[(2, 2)] + m[(1, 1)] * m[(2, 2)]
                - m[(0, 1)] * m[(1, 0)]
                - m[(0, 2)] * m[(2, 0)]
                - m[(1, 2)] * m[(2, 1)];
            let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
            let mut roots = solve_monic_cubic(-tr, c1, -det);
            // one Newton step per root recovers the digits Cardano loses
            for z in &mut roots {
                for _ in 0..2 {
                    let f = ((*z - tr) * *z + c1) * *z - det;
                    let df = (3.0 * *z - 2.0 * tr) * *z + c1;
                    if df.norm() > 0.0 {
                        *z -= f / df;
                    }
                }
            }
            Ok(roots)
        }
        _ => {
            let schur = m
                .clone()
                .try_schur(1e-14, 10_000)
                .ok_or_else(|| Error::BadMatrix("Schur iteration did not converge".into()))?;
            let t = schur.unpack().1;
            Ok((0..p).map(|j| t[(j, j)]).collect())
        }
    }
}

/// Roots of `z^3 + a z^2 + b z + c` by the complex Cardano formula.
fn solve_monic_cubic(a: Complex64, b: Complex64, c: Complex64) -> Vec<Complex64> {
    let third = 1.0 / 3.0;
    let p = b - a * a * third;
    let q = a * a * a * (2.0 / 27.0) - a * b * third + c;
    let s = (0.25 * q * q + p * p * p / 27.0).sqrt();
    let u3 = {
        let c1 = -0.5 * q + s;
        let c2 = -0.5 * q - s;
        if c1.norm() >= c2.norm() {
            c1
        } else {
            c2
        }
    };
    if u3.norm() == 0.0 {
        return vec![-a * third; 3];
    }
    let u = u3.cbrt();
    let v = -p / (3.0 * u);
    let w = Complex64::new(-0.5, 0.5 * 3.0f64.sqrt());
    (0..3)
        .map(|k| {
            let wk = w.powu(k);
            u * wk + v * wk.conj() - a * third
        })
        .collect()
}

/// Branch-correct `ln det(I + M)` under the contraction condition: the sum of
/// principal `ln(1 + lambda_i)` over the eigenvalues of `M`, which equals the
/// trace-log series whenever every `|lambda_i| < 1`.  Principal-branch
/// `det(I + M)` alone would pick the wrong sheet once the argument sum leaves
/// `(-pi, pi]`.
pub fn ln_det_one_plus(m: &DMatrix<Complex64>) -> Result<Complex64> {
    let mut acc = Complex64::new(0.0, 0.0);
    for lam in complex_eigenvalues_small(m)? {
        if lam.norm() >= 1.0 {
            return Err(Error::BadMatrix(format!(
                "eigenvalue {lam} outside the unit disk; the binomial branch is undefined"
            )));
        }
        acc += (Complex64::new(1.0, 0.0) + lam).ln();
    }
    Ok(acc)
}

/// `tr(A^-1 D)` by LU solve; errors on singular `A`.
pub fn trace_solve(a: &DMatrix<Complex64>, d: &DMatrix<Complex64>) -> Result<Complex64> {
    let lu = a.clone().lu();
    let x = lu
        .solve(d)
        .ok_or_else(|| Error::BadMatrix("singular matrix in trace solve".into()))?;
    Ok(x.trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cmat(rows: usize, entries: &[(f64, f64)]) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(
            rows,
            entries.len() / rows,
            &entries.iter().map(|(re, im)| Complex64::new(*re, *im)).collect::<Vec<_>>(),
        )
    }

    fn equi_correlation(p: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn correlation_model_caches_spectrum_and_inverse() {
        // eigenvalues of the equicorrelated 3x3 with rho = 1/2: {2, 1/2, 1/2}
        let m = CorrelationModel::new(equi_correlation(3, 0.5)).unwrap();
        assert!((m.lambda_max - 2.0).abs() < 1e-12);
        assert!((m.lambda_min - 0.5).abs() < 1e-12);
        assert!((m.det - 0.5).abs() < 1e-12);
        let resid = (&m.r_inv * &m.r - DMatrix::<f64>::identity(3, 3)).amax();
        assert!(resid < 1e-13, "inverse residual {resid}");
        assert!(m.is_correlation() && m.is_positive_definite());
    }

    #[test]
    fn correlation_model_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
        assert!(matches!(CorrelationModel::new(asym), Err(Error::BadMatrix(_))));
        let singular = equi_correlation(2, 1.0);
        assert!(matches!(CorrelationModel::new(singular), Err(Error::BadMatrix(_))));
    }

    #[test]
    fn standardize_recovers_unit_diagonal() {
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 0.25]);
        let (r, var) = standardize(&sigma).unwrap();
        assert!(r.is_correlation());
        assert_eq!(var, vec![4.0, 0.25]);
        assert!((r.r[(0, 1)] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn noncentrality_rank_detection() {
        let z = NoncentralityModel::zero(3);
        assert_eq!(z.rank, 0);

        let d = DVector::from_row_slice(&[0.5, -0.3, 0.0]);
        let nc = NoncentralityModel::from_matrix(&d * d.transpose()).unwrap();
        assert_eq!(nc.rank, 1);
        let got = nc.rank1.unwrap();
        // orientation convention: largest-|entry| component positive
        assert!((got[0] - 0.5).abs() < 1e-12 && (got[1] + 0.3).abs() < 1e-12);

        let full = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let nc2 = NoncentralityModel::from_matrix(full).unwrap();
        assert_eq!(nc2.rank, 2);
        assert!(nc2.rank1.is_none());

        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(NoncentralityModel::from_matrix(indef).is_err());
    }

    #[test]
    fn transformed_noncentrality_matches_direct_product() {
        let model = CorrelationModel::new(equi_correlation(3, 0.4)).unwrap();
        let delta = DVector::from_row_slice(&[0.7, 0.2, -0.5]);
        let nc = NoncentralityModel::from_rank_one(delta.clone());
        let (d, f) = transformed_noncentrality(&model, &nc).unwrap();
        let want = &model.r_inv * &delta * delta.transpose() * &model.r_inv;
        assert!((d.clone() - want).amax() < 1e-12);
        let f = f.unwrap();
        assert!((&f * f.transpose() - d).amax() < 1e-12);
    }

    #[test]
    fn one_factor_bivariate_cases() {
        for &r in &[0.6, -0.6, 0.0] {
            let model = CorrelationModel::new(equi_correlation(2, r)).unwrap();
            let of = one_factor_decompose(&model, 1e-9).unwrap();
            assert_eq!(of.regime, Regime::AllBelowOne);
            assert!(!of.imaginary);
            assert!(of.reconstruction_error(&model) < 1e-14);
            assert!((of.a[0] * of.a[1] - r).abs() < 1e-14);
        }
    }

    #[test]
    fn one_factor_equicorrelated_below_one() {
        let model = CorrelationModel::new(equi_correlation(3, 0.5)).unwrap();
        let of = one_factor_decompose(&model, 1e-9).unwrap();
        assert_eq!(of.regime, Regime::AllBelowOne);
        for j in 0..3 {
            assert!((of.a_sq(j) - 0.5).abs() < 1e-14);
            assert!((of.w2[j] - 2.0).abs() < 1e-13);
        }
        // beta doubles as the determinant of WRW
        let want_beta = of.w2.iter().product::<f64>() * model.det;
        assert!((of.beta - want_beta).abs() < 1e-10 * want_beta.abs());
    }

    #[test]
    fn one_factor_one_above_regime() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, 0.8, 0.9, 1.0, 0.6, 0.8, 0.6, 1.0]);
        let model = CorrelationModel::new(r).unwrap();
        let of = one_factor_decompose(&model, 1e-9).unwrap();
        assert_eq!(of.regime, Regime::OneAboveOne(0));
        assert!((of.a_sq(0) - 1.2).abs() < 1e-12);
        assert!(of.w2[0] < 0.0 && of.w2[1] > 0.0 && of.w2[2] > 0.0);
        assert!(of.reconstruction_error(&model) < 1e-13);
        assert!(of.beta < 0.0);
        let want_beta = of.w2.iter().product::<f64>() * model.det;
        assert!((of.beta - want_beta).abs() < 1e-10 * want_beta.abs());
    }

    #[test]
    fn one_factor_imaginary_column() {
        // r12 r13 / r23 < 0 forces a pure imaginary loading column
        let r = DMatrix::from_row_slice(3, 3, &[1.0, -0.3, 0.2, -0.3, 1.0, 0.24, 0.2, 0.24, 1.0]);
        let model = CorrelationModel::new(r).unwrap();
        let of = one_factor_decompose(&model, 1e-9).unwrap();
        assert!(of.imaginary);
        assert_eq!(of.regime, Regime::AllBelowOne);
        let want = [-0.25, -0.36, -0.16];
        for j in 0..3 {
            assert!((of.a_sq(j) - want[j]).abs() < 1e-13, "a_sq({j}) = {}", of.a_sq(j));
            assert!(of.w2[j] > 0.0 && of.w2[j] < 1.0, "w2 shrinks below 1 for imaginary loadings");
        }
        assert!(of.reconstruction_error(&model) < 1e-13);
        let want_beta = of.w2.iter().product::<f64>() * model.det;
        assert!((of.beta - want_beta).abs() < 1e-10 * want_beta.abs());
    }

    #[test]
    fn one_factor_limit_regime_flips_sign_to_plus_one() {
        // loadings (-1, -0.7, -0.5) after the a1 > 0 convention would put the
        // limit entry at -1; the column flip must land it at +1
        let a = [1.0f64, 0.7, 0.5];
        let r = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { a[i] * a[j] });
        let model = CorrelationModel::new(r).unwrap();
        let of = one_factor_decompose(&model, 1e-9).unwrap();
        assert_eq!(of.regime, Regime::LimitEqualsOne(0));
        assert!((of.a[0] - 1.0).abs() < 1e-12);
        assert!(of.w2[0].is_infinite() && of.beta.is_infinite());
        assert!(of.reconstruction_error(&model) < 1e-12);
    }

    #[test]
    fn one_factor_rejects_vanishing_correlation() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.5, 0.5, 1.0]);
        let model = CorrelationModel::new(r).unwrap();
        assert!(matches!(one_factor_decompose(&model, 1e-9), Err(Error::NotOneFactor(_))));
    }

    #[test]
    fn one_factor_roundtrip_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0f_ac_70);
        for trial in 0..10_000 {
            let imaginary = rng.gen_bool(0.25);
            let a: Vec<f64> = (0..3)
                .map(|_| {
                    let hi: f64 = if imaginary { 0.95 } else { 1.15 };
                    let m = rng.gen_range(0.05..hi);
                    if rng.gen_bool(0.5) {
                        -m
                    } else {
                        m
                    }
                })
                .collect();
            // at most one above-one loading is representable
            let above = a.iter().filter(|v| v.abs() > 1.0).count();
            if above > 1 || a.iter().any(|v| (v.abs() - 1.0).abs() < 1e-6) {
                continue;
            }
            let aa = |i: usize, j: usize| if imaginary { -a[i] * a[j] } else { a[i] * a[j] };
            let r = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { aa(i, j) });
            let model = match CorrelationModel::new(r) {
                Ok(m) => m,
                Err(_) => continue, // near-singular draws are not the target here
            };
            let of = one_factor_decompose(&model, 1e-9).unwrap();
            let err = of.reconstruction_error(&model);
            assert!(err < 1e-10, "trial {trial}: reconstruction error {err}");
            assert_eq!(of.imaginary, imaginary, "trial {trial}");
        }
    }

    #[test]
    fn scaled_operators_identity_and_p2_natural() {
        let id = CorrelationModel::new(DMatrix::identity(3, 3)).unwrap();
        let ops = build_scaled_operators(&id, &NoncentralityModel::zero(3), &Scaling::Isotropic).unwrap();
        assert_eq!(ops.w2, vec![1.0; 3]);
        assert!(ops.b.amax() < 1e-14 && ops.norm_b < 1e-14);
        assert!(ops.ln_det_wsw.abs() < 1e-14 && ops.tr_delta_sigma_inv == 0.0);

        let rho = 0.55;
        let m = CorrelationModel::new(equi_correlation(2, rho)).unwrap();
        let ops = build_scaled_operators(&m, &NoncentralityModel::zero(2), &Scaling::Natural).unwrap();
        // natural weights are the inverse-diagonal, and B picks up -rho off-diagonal
        assert!((ops.w2[0] - 1.0 / (1.0 - rho * rho)).abs() < 1e-12);
        assert!((ops.b[(0, 1)] + rho).abs() < 1e-12);
        assert!(ops.b[(0, 0)].abs() < 1e-12);
        assert!((ops.norm_b - rho).abs() < 1e-12);
    }

    #[test]
    fn isotropic_norm_matches_extremal_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let g = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &g * g.transpose() + DMatrix::<f64>::identity(3, 3) * 0.5;
            let (model, _) = standardize(&spd).unwrap();
            let ops =
                build_scaled_operators(&model, &NoncentralityModel::zero(3), &Scaling::Isotropic).unwrap();
            let want = (model.lambda_max - model.lambda_min) / (model.lambda_max + model.lambda_min);
            assert!((ops.norm_b - want).abs() < 1e-10, "{} vs {want}", ops.norm_b);
            assert!(ops.norm_b < 1.0);
        }
    }

    #[test]
    fn schur_split_determinant_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let p = 4;
            let b = DMatrix::from_fn(p, p, |_, _| {
                Complex64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))
            });
            let b = (&b + b.transpose()).map(|v| 0.5 * v); // symmetric border data
            let r = 1.2;
            let ys: Vec<Complex64> = (0..p)
                .map(|_| Complex64::from_polar(r, rng.gen_range(-3.1..3.1)))
                .collect();
            // bordered input: Y added on the leading diagonal only
            let mut m = b.clone();
            for j in 0..p - 1 {
                m[(j, j)] += ys[j];
            }
            let split = schur_split(&m).unwrap();
            let mut full = b.clone();
            for j in 0..p {
                full[(j, j)] += ys[j];
            }
            let det_full = full.lu().determinant();
            let det_lead = split.leading.clone().lu().determinant();
            let want = det_lead * (ys[p - 1] - split.y0);
            assert!(
                (det_full - want).norm() < 1e-10 * det_full.norm(),
                "trial {trial}: {det_full} vs {want}"
            );
            assert!(split.y0.norm() < r, "trial {trial}: |y0| = {}", split.y0.norm());
        }
    }

    #[test]
    fn complex_eigenvalues_reproduce_trace_and_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 1..=4usize {
            for _ in 0..40 {
                let m = DMatrix::from_fn(p, p, |_, _| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                let ev = complex_eigenvalues_small(&m).unwrap();
                let tr: Complex64 = ev.iter().sum();
                let det: Complex64 = ev.iter().product();
                assert!((tr - m.trace()).norm() < 1e-10 * (1.0 + tr.norm()));
                let det_lu = m.clone().lu().determinant();
                assert!((det - det_lu).norm() < 1e-10 * (1.0 + det_lu.norm()));
            }
        }
    }

    #[test]
    fn ln_det_branch_tracks_trace_log_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = DMatrix::from_fn(3, 3, |_, _| {
                Complex64::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25))
            });
            let got = ln_det_one_plus(&m).unwrap();
            // tr-log series converges fast at spectral radius < ~0.5
            let mut powk = m.clone();
            let mut want = Complex64::new(0.0, 0.0);
            for k in 1..200 {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                want += sign / k as f64 * powk.trace();
                powk = &powk * &m;
            }
            assert!((got - want).norm() < 1e-12 * (1.0 + want.norm()), "{got} vs {want}");
        }
    }

    #[test]
    fn ln_det_rejects_expansion_outside_disk() {
        let m = cmat(1, &[(1.5, 0.0)]);
        assert!(ln_det_one_plus(&m).is_err());
    }

    #[test]
    fn hermitian_eigenvalues_known_case() {
        // [[2, 1-i], [1+i, 3]] has eigenvalues 1 and 4
        let h = cmat(2, &[(2.0, 0.0), (1.0, -1.0), (1.0, 1.0), (3.0, 0.0)]);
        let ev = hermitian_eigenvalues(&h).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hermitian_model_and_operators() {
        let sigma = cmat(2, &[(2.0, 0.0), (0.4, -0.3), (0.4, 0.3), (1.0, 0.0)]);
        let model = HermitianModel::new(sigma.clone()).unwrap();
        let resid = (&model.sigma_inv * &sigma - DMatrix::<Complex64>::identity(2, 2))
            .iter()
            .fold(0.0f64, |s, v| s.max(v.norm()));
        assert!(resid < 1e-13);
        let ev = hermitian_eigenvalues(&sigma).unwrap();
        assert!((model.ln_det - ev.iter().map(|l| l.ln()).sum::<f64>()).abs() < 1e-12);

        let delta = DMatrix::<Complex64>::zeros(2, 2);
        let ops = build_scaled_operators_hermitian(&model, &delta, &Scaling::Isotropic).unwrap();
        assert!(ops.norm_b < 1.0);
        // B must stay Hermitian under either scaling
        let ops_n = build_scaled_operators_hermitian(&model, &delta, &Scaling::Natural).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((ops_n.b[(i, j)] - ops_n.b[(j, i)].conj()).norm() < 1e-13);
            }
        }
        for j in 0..2 {
            assert!(ops_n.b[(j, j)].norm() < 1e-13, "natural scaling zeroes the B diagonal");
        }
    }

    #[test]
    fn trace_solve_matches_explicit_inverse() {
        let a = cmat(2, &[(1.4, 0.1), (0.2, -0.6), (-0.3, 0.2), (2.0, 0.4)]);
        let d = cmat(2, &[(0.5, 0.0), (0.1, 0.2), (0.1, -0.2), (0.8, 0.0)]);
        let inv = a.clone().lu().solve(&DMatrix::<Complex64>::identity(2, 2)).unwrap();
        let want = (&inv * &d).trace();
        let got = trace_solve(&a, &d).unwrap();
        assert!((got - want).norm() < 1e-13);
    }
}
