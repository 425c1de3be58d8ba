//! Small complex Hermitian helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
pub use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `(m + m^H) / 2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

pub fn trace_re(m: &CMat) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest entry of `m - m^H`, relative to the largest entry of `m`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let d = m - m.adjoint();
    d.iter().map(|z| z.norm()).fold(0.0, f64::max) / scale
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
///
/// The input is normalised to unit Frobenius norm first so convergence does
/// not depend on the physical scale (noise powers are ~1e-12 W).
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    let scale = frobenius(m);
    if scale == 0.0 {
        return (vec![0.0; n], identity(n));
    }
    let eig = SymmetricEigen::new(hermitian_part(m).unscale(scale));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i] * scale).collect();
    let mut vectors = CMat::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// `U diag(values) U^H`.
pub fn from_eig(values: &[f64], vectors: &CMat) -> CMat {
    let n = vectors.nrows();
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    let out = scaled * vectors.adjoint();
    debug_assert_eq!(out.nrows(), n);
    hermitian_part(&out)
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    eigh(m).0.first().copied().unwrap_or(0.0)
}

/// Cholesky factor of a Hermitian positive definite matrix, `None` if not PD.
pub fn cholesky(m: &CMat) -> Option<Cholesky<C64, Dyn>> {
    Cholesky::new(hermitian_part(m))
}

pub fn logdet_chol(ch: &Cholesky<C64, Dyn>) -> f64 {
    ch.l_dirty().diagonal().iter().map(|z| z.re.ln()).sum::<f64>() * 2.0
}

/// `h^H X^{-1} h` for Hermitian positive definite `X`.
pub fn quad_inv(ch: &Cholesky<C64, Dyn>, h: &CVec) -> f64 {
    let y = ch.solve(h);
    h.dotc(&y).re
}

pub fn inverse_hpd(ch: &Cholesky<C64, Dyn>) -> CMat {
    hermitian_part(&ch.inverse())
}

pub fn outer(h: &CVec) -> CMat {
    h * h.adjoint()
}
