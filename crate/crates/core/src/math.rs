//! Small numeric helpers that work without `std`.

use nalgebra::{DMatrix, SMatrix};

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned
/// bit-for-bit.
pub fn wrap_angle(a: f64) -> f64 {
    use core::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * round(a / two_pi);
    if w <= -PI {
        w += two_pi;
    } else if w > PI {
        w -= two_pi;
    }
    w
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    sqrt(m.iter().map(|v| v * v).sum())
}

pub fn is_finite_slice(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest real part over the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn wrap_keeps_in_range_values_exact() {
        for a in [0.0, 0.3, -3.0, PI, -PI + 1e-12] {
            assert_eq!(wrap_angle(a).to_bits(), a.to_bits());
        }
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-9);
    }

    #[test]
    fn abscissa_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(alloc::vec![-1.0, -3.0, 0.5]));
        assert!((spectral_abscissa(&m) - 0.5).abs() < 1e-12);
    }
}
