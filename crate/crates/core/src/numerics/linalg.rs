//! Small dense linear algebra helpers (f64 only).

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower-triangular factor L with A = L·Lᵀ.
pub fn cholesky(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension(format!(
            "cholesky needs square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut l = Tensor::<f64>::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for p in 0..j {
                s -= l.at(i, p) * l.at(j, p);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Conditioning(format!(
                        "matrix not positive definite at pivot {i} (value {s})"
                    )));
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve A X = B for SPD A via Cholesky. B is n×m; returns X (n×m).
pub fn solve_spd(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let l = cholesky(a)?;
    let n = a.rows();
    let m = b.cols();
    if b.rows() != n {
        return Err(Error::Dimension(format!(
            "solve_spd: A is {n}x{n}, B is {:?}",
            b.shape()
        )));
    }
    let mut x = b.clone();
    // forward substitution: L y = b
    for col in 0..m {
        for i in 0..n {
            let mut s = x.at(i, col);
            for p in 0..i {
                s -= l.at(i, p) * x.at(p, col);
            }
            x.set(i, col, s / l.at(i, i));
        }
        // back substitution: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x.at(i, col);
            for p in i + 1..n {
                s -= l.at(p, i) * x.at(p, col);
            }
            x.set(i, col, s / l.at(i, i));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::matmul;
    use crate::rng::SplitMix64;

    #[test]
    fn solves_random_spd_system() {
        let mut rng = SplitMix64::new(17);
        let n = 12;
        let m = Tensor::<f64>::fill_with(vec![n, n], || rng.next_normal());
        // A = MᵀM + I is SPD
        let mut a = matmul(&m.transpose(), &m).unwrap();
        for i in 0..n {
            let v = a.at(i, i) + 1.0;
            a.set(i, i, v);
        }
        let x_true = Tensor::<f64>::fill_with(vec![n, 3], || rng.next_normal());
        let b = matmul(&a, &x_true).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        for (u, v) in x.data().iter().zip(x_true.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = Tensor::<f64>::zeros(vec![3, 3]);
        assert!(cholesky(&a).is_err());
    }
}
