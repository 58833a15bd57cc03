//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel is a pure function; the `*_vjp` companion maps an upstream
//! gradient to input gradients using only values saved from the forward pass.
//! All kernels are deterministic for identical inputs and dtype.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// C = A(m×k) · B(k×n).
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims: {k} vs {k2}"
        )));
    }
    let mut c = Tensor::zeros(vec![m, n]);
    F::gemm(m, k, n, F::ONE, a.data(), b.data(), F::ZERO, c.data_mut());
    Ok(c)
}

/// Gradients of matmul: dA = dC·Bᵀ, dB = Aᵀ·dC.
pub fn matmul_vjp<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad_c: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let da = matmul(grad_c, &b.transpose()).expect("matmul_vjp shapes");
    let db = matmul(&a.transpose(), grad_c).expect("matmul_vjp shapes");
    (da, db)
}

/// Accumulating gemm: C += A·B (used by hand-written backward passes).
pub fn matmul_acc<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, c: &mut Tensor<F>) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    debug_assert_eq!(c.shape(), &[m, n]);
    F::gemm(m, k, n, F::ONE, a.data(), b.data(), F::ONE, c.data_mut());
}

/// Row-wise causal softmax of a T×T score matrix after scaling.
///
/// Row j is a distribution over columns i ≤ j; columns above the diagonal are
/// exactly zero. Row-max subtraction keeps the exponentials bounded.
pub fn softmax_causal<F: Scalar>(scores: &Tensor<F>, scale: F) -> Result<Tensor<F>> {
    if scores.shape().len() != 2 || scores.rows() != scores.cols() {
        return Err(Error::Dimension(format!(
            "softmax_causal needs a square matrix, got {:?}",
            scores.shape()
        )));
    }
    let t = scores.rows();
    let mut out = Tensor::zeros(vec![t, t]);
    for j in 0..t {
        let row = scores.row(j);
        let mut max = row[0] * scale;
        for i in 1..=j {
            max = max.maximum(row[i] * scale);
        }
        let mut sum = F::ZERO;
        let orow = out.row_mut(j);
        for i in 0..=j {
            let e = (row[i] * scale - max).exp();
            orow[i] = e;
            sum += e;
        }
        for v in orow[..=j].iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Gradient of [`softmax_causal`] w.r.t. the raw scores.
/// `probs` is the forward output.
pub fn softmax_causal_vjp<F: Scalar>(probs: &Tensor<F>, grad: &Tensor<F>, scale: F) -> Tensor<F> {
    let t = probs.rows();
    let mut out = Tensor::zeros(vec![t, t]);
    for j in 0..t {
        let p = probs.row(j);
        let g = grad.row(j);
        let mut dot = F::ZERO;
        for i in 0..=j {
            dot += p[i] * g[i];
        }
        let o = out.row_mut(j);
        for i in 0..=j {
            o[i] = p[i] * (g[i] - dot) * scale;
        }
    }
    out
}

/// Softmax over a plain slice (single row, no mask). Used on the decode path
/// where attention runs over gathered live cache entries.
pub fn softmax_row<F: Scalar>(scores: &mut [F], scale: F) {
    assert!(!scores.is_empty());
    let mut max = scores[0] * scale;
    for &s in scores.iter().skip(1) {
        max = max.maximum(s * scale);
    }
    let mut sum = F::ZERO;
    for s in scores.iter_mut() {
        *s = (*s * scale - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
}

/// y = x / sqrt(mean(x²) + eps) ⊙ gamma on a single vector.
pub fn rmsnorm<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    if x.is_empty() {
        return Err(Error::Dimension("rmsnorm on zero-length vector".into()));
    }
    if x.shape() != gamma.shape() {
        return Err(Error::Dimension(format!(
            "rmsnorm: x {:?} vs gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    let d = x.len();
    let mut ms = F::ZERO;
    for &v in x.data() {
        ms += v * v;
    }
    let inv = F::ONE / (ms / F::from_f64(d as f64) + eps).sqrt();
    let data = x
        .data()
        .iter()
        .zip(gamma.data())
        .map(|(&xv, &g)| xv * inv * g)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Row-wise rmsnorm of a T×D matrix with a shared D-length gain.
pub fn rmsnorm_rows<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let (t, d) = (x.rows(), x.cols());
    if gamma.len() != d || d == 0 {
        return Err(Error::Dimension(format!(
            "rmsnorm_rows: x {:?} vs gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![t, d]);
    for j in 0..t {
        let row = x.row(j);
        let mut ms = F::ZERO;
        for &v in row {
            ms += v * v;
        }
        let inv = F::ONE / (ms / F::from_f64(d as f64) + eps).sqrt();
        let o = out.row_mut(j);
        for i in 0..d {
            o[i] = row[i] * inv * gamma.data()[i];
        }
    }
    Ok(out)
}

/// Gradients of [`rmsnorm_rows`] w.r.t. x and gamma.
pub fn rmsnorm_rows_vjp<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    eps: F,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (t, d) = (x.rows(), x.cols());
    let df = F::from_f64(d as f64);
    let mut dx = Tensor::zeros(vec![t, d]);
    let mut dgamma = Tensor::zeros(vec![d]);
    for j in 0..t {
        let row = x.row(j);
        let g = grad.row(j);
        let mut ms = F::ZERO;
        for &v in row {
            ms += v * v;
        }
        let inv = F::ONE / (ms / df + eps).sqrt();
        // gy = grad ⊙ gamma; dx_i = inv·gy_i − x_i · inv³/d · Σ_k gy_k x_k
        let mut dot = F::ZERO;
        for i in 0..d {
            dot += g[i] * gamma.data()[i] * row[i];
        }
        let coef = inv * inv * inv / df * dot;
        let o = dx.row_mut(j);
        for i in 0..d {
            o[i] = g[i] * gamma.data()[i] * inv - row[i] * coef;
            dgamma.data_mut()[i] += g[i] * row[i] * inv;
        }
    }
    (dx, dgamma)
}

/// Rotary embedding: pairwise 2-D rotations of a D-length vector (D even)
/// with angle `position · theta_base^(−2i/D)` for pair i.
pub fn rope<F: Scalar>(vec: &Tensor<F>, position: i64, theta_base: f64) -> Result<Tensor<F>> {
    let d = vec.len();
    if d % 2 != 0 {
        return Err(Error::Dimension(format!("rope needs even dim, got {d}")));
    }
    let mut out = vec.clone();
    rope_in_place(out.data_mut(), position, theta_base);
    Ok(out)
}

/// In-place rotation of one head vector.
pub fn rope_in_place<F: Scalar>(v: &mut [F], position: i64, theta_base: f64) {
    let d = v.len();
    debug_assert_eq!(d % 2, 0);
    for i in 0..d / 2 {
        let freq = theta_base.powf(-2.0 * i as f64 / d as f64);
        let angle = F::from_f64(position as f64 * freq);
        let (s, c) = (angle.sin(), angle.cos());
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Gradient of [`rope`]: rotations are orthogonal, so the vjp is the inverse
/// rotation applied to the upstream gradient.
pub fn rope_vjp<F: Scalar>(grad: &Tensor<F>, position: i64, theta_base: f64) -> Tensor<F> {
    let mut out = grad.clone();
    rope_in_place(out.data_mut(), -position, theta_base);
    out
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

/// silu(x) = x · sigmoid(x), elementwise.
pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_vjp<F: Scalar>(x: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (F::ONE - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("silu_vjp shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU with the tanh approximation 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub fn gelu_scalar<F: Scalar>(v: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (v + a * v * v * v);
    half * v * (F::ONE + inner.tanh())
}

pub fn gelu_vjp<F: Scalar>(x: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let inner = c * (v + a * v * v * v);
            let t = inner.tanh();
            let sech2 = F::ONE - t * t;
            let dinner = c * (F::ONE + three * a * v * v);
            g * (half * (F::ONE + t) + half * v * sech2 * dinner)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu_vjp shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_matrix(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor<f64> {
        Tensor::fill_with(vec![r, c], || rng.next_normal())
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(11);
        let a = rand_matrix(&mut rng, 7, 5);
        let b = rand_matrix(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        // brute-force triple loop oracle
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-14, "({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_causal_uniform() {
        let z = Tensor::<f64>::zeros(vec![3, 3]);
        let p = softmax_causal(&z, 1.0).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                if i <= j {
                    assert!((p.at(j, i) - 1.0 / (j as f64 + 1.0)).abs() < 1e-15);
                } else {
                    assert_eq!(p.at(j, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_causal_closed_form() {
        let mut z = Tensor::<f64>::zeros(vec![2, 2]);
        z.set(1, 0, 0.0);
        z.set(1, 1, 3.0f64.ln());
        let p = softmax_causal(&z, 1.0).unwrap();
        assert!((p.at(1, 0) - 0.25).abs() < 1e-14);
        assert!((p.at(1, 1) - 0.75).abs() < 1e-14);
    }

    #[test]
    fn softmax_causal_rows_normalized() {
        let mut rng = SplitMix64::new(5);
        let z = rand_matrix(&mut rng, 16, 16);
        let p = softmax_causal(&z, 0.25).unwrap();
        for j in 0..16 {
            let s: f64 = p.row(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {j} sums to {s}");
            for i in j + 1..16 {
                assert_eq!(p.at(j, i), 0.0);
            }
        }
    }

    #[test]
    fn softmax_causal_rejects_non_square() {
        let z = Tensor::<f64>::zeros(vec![3, 4]);
        assert!(softmax_causal(&z, 1.0).is_err());
    }

    #[test]
    fn rmsnorm_ones() {
        let x = Tensor::<f64>::vector(vec![1.0; 4]);
        let g = Tensor::<f64>::vector(vec![1.0; 4]);
        let y = rmsnorm(&x, &g, 1e-12).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_scale_invariance() {
        let x = Tensor::<f64>::vector(vec![2.0; 4]);
        let g = Tensor::<f64>::vector(vec![1.0; 4]);
        let y = rmsnorm(&x, &g, 1e-12).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_unit_rms() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor::<f64>::fill_with(vec![32], || rng.next_normal());
        let g = Tensor::<f64>::vector(vec![1.0; 32]);
        let y = rmsnorm(&x, &g, 1e-15).unwrap();
        let ms: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 32.0;
        assert!((ms - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rmsnorm_empty_rejected() {
        let x = Tensor::<f64>::vector(vec![]);
        let g = Tensor::<f64>::vector(vec![]);
        assert!(rmsnorm(&x, &g, 1e-6).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let v = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let r = rope(&v, 0, 10_000.0).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = SplitMix64::new(8);
        let v = Tensor::<f64>::fill_with(vec![16], || rng.next_normal());
        let r = rope(&v, 37, 10_000.0).unwrap();
        assert!((r.norm() - v.norm()).abs() < 1e-12);
    }

    #[test]
    fn rope_inverse_rotation() {
        let mut rng = SplitMix64::new(9);
        let v = Tensor::<f64>::fill_with(vec![8], || rng.next_normal());
        let r = rope(&v, 23, 10_000.0).unwrap();
        let back = rope(&r, -23, 10_000.0).unwrap();
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_odd_dim_rejected() {
        let v = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]);
        assert!(rope(&v, 1, 10_000.0).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let z = Tensor::<f64>::vector(vec![0.0]);
        assert_eq!(gelu(&z).data()[0], 0.0);
        assert_eq!(silu(&z).data()[0], 0.0);
    }

    #[test]
    fn silu_closed_form() {
        let x = Tensor::<f64>::vector(vec![10.0]);
        let y = silu(&x).data()[0];
        assert!((y - 9.999546).abs() < 1e-5, "silu(10) = {y}");
        // definition: x * sigmoid(x)
        assert!((y - 10.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn gelu_matches_erf_oracle() {
        // high-precision erf via its Maclaurin/continued expansion is overkill;
        // numerically integrate the Gaussian CDF with Simpson's rule instead.
        let phi = |x: f64| {
            // standard normal CDF via adaptive Simpson on [0, |x|]
            let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let n = 4000;
            let a = 0.0;
            let b = x.abs();
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let t = a + i as f64 * h;
                s += f(t) * if i % 2 == 0 { 2.0 } else { 4.0 };
            }
            let half = s * h / 3.0;
            if x >= 0.0 {
                0.5 + half
            } else {
                0.5 - half
            }
        };
        let mut x = -5.0;
        while x <= 5.0 {
            let exact = x * phi(x);
            let approx = gelu(&Tensor::<f64>::vector(vec![x])).data()[0];
            assert!(
                (exact - approx).abs() < 1e-3,
                "gelu({x}): {approx} vs erf oracle {exact}"
            );
            x += 0.125;
        }
    }
}
