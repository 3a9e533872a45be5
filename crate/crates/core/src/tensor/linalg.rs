//! Dense linear algebra for small symmetric positive-definite matrices
//! (the 9x9 covariance blocks of the region mutual information term).

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

use super::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<S: Scalar>(a: &ArrayView2<S>) -> Result<Array2<S>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<S>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= S::zero() {
                    return Err(Error::Numerics(format!(
                        "matrix not positive definite (pivot {} = {sum})",
                        i
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// log(det A) from a Cholesky factor of A.
pub fn logdet_from_cholesky<S: Scalar>(l: &Array2<S>) -> S {
    let two = S::one() + S::one();
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<S>() * two
}

/// A^-1 from a Cholesky factor of A (forward/back substitution per column).
pub fn inverse_from_cholesky<S: Scalar>(l: &Array2<S>) -> Array2<S> {
    let n = l.nrows();
    let mut inv = Array2::<S>::zeros((n, n));
    let mut y = vec![S::zero(); n];
    for col in 0..n {
        // L y = e_col
        for i in 0..n {
            let mut sum = if i == col { S::one() } else { S::zero() };
            for k in 0..i {
                sum -= l[[i, k]] * y[k];
            }
            y[i] = sum / l[[i, i]];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l[[k, i]] * inv[[k, col]];
            }
            inv[[i, col]] = sum / l[[i, i]];
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_logdet_inverse_roundtrip() {
        // A = B B^T + I, guaranteed SPD.
        let b = array![[1.0, 2.0, 0.5], [0.0, 1.5, -1.0], [0.3, 0.0, 2.0]];
        let a = b.dot(&b.t()) + Array2::<f64>::eye(3);
        let l = cholesky(&a.view()).unwrap();
        let rebuilt = l.dot(&l.t());
        let diff = (&rebuilt - &a).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);

        let inv = inverse_from_cholesky(&l);
        let ident = a.dot(&inv);
        let diff = (&ident - &Array2::<f64>::eye(3))
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);

        // det via LU-free expansion for a 3x3.
        let det = a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
            - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
            + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]]);
        assert!((logdet_from_cholesky(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        assert!(cholesky(&a.view()).is_err());
    }
}
