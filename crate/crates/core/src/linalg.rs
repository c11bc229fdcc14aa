//! Dense complex linear algebra used throughout the crate.
//!
//! Matrices are plain `nalgebra` dynamic matrices. Decompositions (SVD,
//! Hermitian eigendecomposition, Cholesky) come from `nalgebra`; the
//! Sylvester solver, whitening and the latent real/complex reshaping are
//! built on top of them here.

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

/// Relative reconstruction tolerance expected of [`svd`].
pub const TOL_SVD: f64 = 1e-10;
/// Relative residual tolerance expected of [`solve_sylvester`].
pub const TOL_SYLVESTER: f64 = 1e-9;
/// Tolerance on the whitened sample covariance.
pub const TOL_WHITEN: f64 = 1e-8;
/// Relative eigenvalue floor applied during whitening.
pub const WHITEN_EIG_FLOOR: f64 = 1e-10;

const SVD_MAX_ITERS: usize = 10_000;

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Packs a real latent into a complex one: the first half becomes the real
/// parts, the second half the imaginary parts. Odd lengths are zero-padded.
pub fn real_to_complex(s: &[f64]) -> CVec {
    let half = s.len().div_ceil(2);
    CVec::from_fn(half, |i, _| {
        let im = s.get(i + half).copied().unwrap_or(0.0);
        c64(s[i], im)
    })
}

/// Inverse of [`real_to_complex`]: real parts followed by imaginary parts.
pub fn complex_to_real(z: &CVec) -> Vec<f64> {
    z.iter()
        .map(|c| c.re)
        .chain(z.iter().map(|c| c.im))
        .collect()
}

/// Column-wise [`real_to_complex`].
pub fn real_to_complex_cols(s: &RMat) -> CMat {
    let half = s.nrows().div_ceil(2);
    CMat::from_fn(half, s.ncols(), |i, j| {
        let im = if i + half < s.nrows() {
            s[(i + half, j)]
        } else {
            0.0
        };
        c64(s[(i, j)], im)
    })
}

/// Column-wise [`complex_to_real`], optionally dropping a trailing pad row.
pub fn complex_to_real_cols(z: &CMat, real_rows: usize) -> RMat {
    let n = z.nrows();
    debug_assert!(real_rows <= 2 * n);
    RMat::from_fn(real_rows, z.ncols(), |i, j| {
        if i < n {
            z[(i, j)].re
        } else {
            z[(i - n, j)].im
        }
    })
}

pub fn fro_norm2(m: &CMat) -> f64 {
    m.iter().map(|c| c.norm_sqr()).sum()
}

/// `trace(X^H X)`, the total power of a precoder.
pub fn power(m: &CMat) -> f64 {
    fro_norm2(m)
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

pub fn is_hermitian(m: &CMat, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = fro_norm2(m).sqrt().max(f64::MIN_POSITIVE);
    (m - m.adjoint()).norm() <= rel_tol * scale
}

/// Symmetrizes `m` as `(m + m^H) / 2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * c64(0.5, 0.0)
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMat,
    /// Singular values, nonincreasing.
    pub sigma: RVec,
    pub v: CMat,
}

impl Svd {
    pub fn reconstruct(&self) -> CMat {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.adjoint()
    }
}

/// Thin SVD `A = U diag(sigma) V^H` with singular values sorted nonincreasing.
pub fn svd(a: &CMat) -> Result<Svd> {
    if !is_finite(a) {
        return Err(Error::NonFinite("svd input"));
    }
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Ok(Svd {
            u: CMat::zeros(a.nrows(), 0),
            sigma: RVec::zeros(0),
            v: CMat::zeros(a.ncols(), 0),
        });
    }
    let dec = SVD::try_new(a.clone(), true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::NoConvergence("svd"))?;
    let u = dec.u.expect("u requested");
    let v_t = dec.v_t.expect("v requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let sigma = RVec::from_fn(k, |i, _| dec.singular_values[order[i]]);
    let u = CMat::from_fn(a.nrows(), k, |r, c| u[(r, order[c])]);
    let v = CMat::from_fn(a.ncols(), k, |r, c| v_t[(order[c], r)].conj());
    Ok(Svd { u, sigma, v })
}

/// Largest singular value.
pub fn spectral_norm(a: &CMat) -> Result<f64> {
    Ok(svd(a)?.sigma.iter().copied().fold(0.0, f64::max))
}

/// Eigendecomposition of a Hermitian matrix: `(eigenvalues, eigenvectors)`.
pub fn hermitian_eig(m: &CMat) -> Result<(RVec, CMat)> {
    if !is_finite(m) {
        return Err(Error::NonFinite("hermitian eigendecomposition input"));
    }
    let eig = SymmetricEigen::try_new(hermitian_part(m), f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::NoConvergence("hermitian eigendecomposition"))?;
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// Solves `A X + X B = C` for Hermitian `A` (m×m) and `B` (n×n).
///
/// Bartels–Stewart with both Schur forms taken as the (diagonal) Hermitian
/// eigendecompositions `A = Ua La Ua^H`, `B = Ub Lb Ub^H`; the transformed
/// system is then diagonal: `Y_ij = (Ua^H C Ub)_ij / (la_i + lb_j)`.
pub fn solve_sylvester(a: &CMat, b: &CMat, c: &CMat) -> Result<CMat> {
    let (m, n) = (a.nrows(), b.nrows());
    if !a.is_square() || !b.is_square() {
        return Err(Error::dims(
            "solve_sylvester",
            "square A and B",
            format!(
                "A {}x{}, B {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            ),
        ));
    }
    if c.shape() != (m, n) {
        return Err(Error::dims(
            "solve_sylvester",
            format!("C {m}x{n}"),
            format!("C {}x{}", c.nrows(), c.ncols()),
        ));
    }
    if !is_hermitian(a, 1e-10) {
        return Err(Error::NotHermitian("Sylvester coefficient A"));
    }
    if !is_hermitian(b, 1e-10) {
        return Err(Error::NotHermitian("Sylvester coefficient B"));
    }
    let (la, ua) = hermitian_eig(a)?;
    let (lb, ub) = hermitian_eig(b)?;

    let scale = la.amax() + lb.amax();
    let mut min_gap = f64::INFINITY;
    for x in la.iter() {
        for y in lb.iter() {
            min_gap = min_gap.min((x + y).abs());
        }
    }
    if m > 0 && n > 0 && (min_gap <= 1e3 * f64::EPSILON * scale || min_gap == 0.0) {
        return Err(Error::SingularSpectrum { min_gap, scale });
    }

    let mut y = ua.adjoint() * c * &ub;
    for j in 0..n {
        for i in 0..m {
            y[(i, j)] /= la[i] + lb[j];
        }
    }
    Ok(ua * y * ub.adjoint())
}

/// Solves `M X = B` for Hermitian positive-definite `M`.
///
/// When the Cholesky factorization fails or is numerically singular, a ridge
/// `eps·mean(diag M)·I` is added and the solve retried; the returned flag
/// reports whether that fallback was needed.
pub fn solve_hpd(m: &CMat, b: &CMat, ridge_eps: f64) -> Result<(CMat, bool)> {
    let herm = hermitian_part(m);
    if let Some(x) = cholesky_if_well_posed(&herm).map(|ch| ch.solve(b)) {
        return Ok((x, false));
    }
    let n = herm.nrows();
    let mean_diag = (0..n).map(|i| herm[(i, i)].re).sum::<f64>() / n.max(1) as f64;
    let ridge = ridge_eps * mean_diag.abs().max(1e-300);
    let mut reg = herm;
    for i in 0..n {
        reg[(i, i)] += c64(ridge, 0.0);
    }
    let ch = Cholesky::new(reg).ok_or(Error::NoConvergence("ridge Cholesky"))?;
    Ok((ch.solve(b), true))
}

fn cholesky_if_well_posed(m: &CMat) -> Option<Cholesky<C64, nalgebra::Dyn>> {
    let ch = Cholesky::new(m.clone())?;
    let l = ch.l_dirty();
    let diag: Vec<f64> = (0..m.nrows()).map(|i| l[(i, i)].re).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if diag.is_empty() || min * min > 1e-13 * max * max {
        Some(ch)
    } else {
        None
    }
}

/// Mean-removal plus symmetric whitening transform fitted on a data matrix
/// whose columns are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening<T: nalgebra::Scalar> {
    pub mean: DVector<T>,
    pub w: DMatrix<T>,
    /// Set when at least one covariance eigenvalue hit the floor.
    pub floored: bool,
}

impl<T> Whitening<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    pub fn apply(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        &self.w * centered
    }

    pub fn identity(dim: usize) -> Self {
        Whitening {
            mean: DVector::zeros(dim),
            w: DMatrix::identity(dim, dim),
            floored: false,
        }
    }
}

/// Fits a [`Whitening`] on `s` (d×N) and returns it with the whitened data.
///
/// The sample covariance uses the `1/N` normalization, so the output
/// satisfies `S_white S_white^H / N = I` whenever no eigenvalue was floored.
pub fn whiten<T>(s: &DMatrix<T>) -> Result<(Whitening<T>, DMatrix<T>)>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let (d, n) = s.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: n,
        });
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("whitening input"));
    }
    let inv_n = T::from_real(1.0 / n as f64);
    let mut mean = DVector::<T>::zeros(d);
    for col in s.column_iter() {
        mean += col;
    }
    mean *= inv_n;
    let mut centered = s.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &centered * centered.adjoint() * inv_n;
    cov = (&cov + cov.adjoint()) * T::from_real(0.5);
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::NoConvergence("whitening eigendecomposition"))?;
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = if lmax > 0.0 {
        WHITEN_EIG_FLOOR * lmax
    } else {
        WHITEN_EIG_FLOOR
    };
    let mut floored = false;
    let mut scaled = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let l = if l < floor {
            floored = true;
            floor
        } else {
            l
        };
        scaled.column_mut(j).scale_mut(1.0 / l.sqrt());
    }
    if floored {
        log::warn!("whitening: covariance is rank deficient, eigenvalue floor applied");
    }
    let w = scaled * eig.eigenvectors.adjoint();
    let white = &w * &centered;
    Ok((Whitening { mean, w, floored }, white))
}
