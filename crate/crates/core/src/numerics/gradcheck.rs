//! Finite-difference validation of analytic gradients.
//!
//! Compares a kernel's vjp against central finite differences of the scalar
//! objective ⟨u, f(x)⟩ for a fixed random upstream u. f64 only; the step size
//! 1e-5 balances truncation against round-off.

use crate::error::{Error, Result};
use crate::numerics::kernels as k;
use crate::numerics::tensor::Tensor;
use crate::rng::SplitMix64;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub kernel: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Check an arbitrary differentiable function against finite differences.
///
/// `forward` maps the inputs to one output tensor; `vjp` maps (inputs,
/// upstream) to one gradient per input, each matching its input's shape.
pub fn grad_check_fn(
    name: &str,
    forward: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    vjp: &dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = forward(inputs)?;
    let mut rng = SplitMix64::new(seed);
    let upstream = Tensor::<f64>::fill_with(out.shape().to_vec(), || rng.next_normal());

    let analytic = vjp(inputs, &upstream);
    if analytic.len() != inputs.len() {
        return Err(Error::Dimension(format!(
            "vjp returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    for (g, x) in analytic.iter().zip(inputs) {
        if g.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "vjp gradient shape {:?} vs input {:?}",
                g.shape(),
                x.shape()
            )));
        }
    }

    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let y = forward(xs)?;
        Ok(y
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let fp = objective(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let fm = objective(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    Ok(GradCheckReport {
        kernel: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Check a registered kernel by name against finite differences.
///
/// Registered kernels: `matmul` (2 inputs), `softmax_causal`, `rmsnorm`
/// (x and gamma), `rope`, `silu`, `gelu`. Unknown names are an
/// [`Error::UnsupportedKernel`].
pub fn grad_check(kernel: &str, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{kernel} expects {n} inputs, got {}",
                inputs.len()
            )))
        }
    };
    match kernel {
        "matmul" => {
            need(2)?;
            grad_check_fn(
                kernel,
                &|xs| k::matmul(&xs[0], &xs[1]),
                &|xs, g| {
                    let (da, db) = k::matmul_vjp(&xs[0], &xs[1], g);
                    vec![da, db]
                },
                inputs,
                tolerance,
                0x6d61,
            )
        }
        "softmax_causal" => {
            need(1)?;
            let scale = 1.0;
            grad_check_fn(
                kernel,
                &|xs| k::softmax_causal(&xs[0], scale),
                &|xs, g| {
                    let p = k::softmax_causal(&xs[0], scale).expect("checked");
                    vec![k::softmax_causal_vjp(&p, g, scale)]
                },
                inputs,
                tolerance,
                0x736d,
            )
        }
        "rmsnorm" => {
            need(2)?;
            let eps = 1e-6;
            grad_check_fn(
                kernel,
                &|xs| {
                    let row = Tensor::new(vec![1, xs[0].len()], xs[0].data().to_vec())?;
                    let y = k::rmsnorm_rows(&row, &xs[1], eps)?;
                    Tensor::new(vec![xs[0].len()], y.into_data())
                },
                &|xs, g| {
                    let row = Tensor::new(vec![1, xs[0].len()], xs[0].data().to_vec()).unwrap();
                    let grow = Tensor::new(vec![1, g.len()], g.data().to_vec()).unwrap();
                    let (dx, dg) = k::rmsnorm_rows_vjp(&row, &xs[1], eps, &grow);
                    vec![
                        Tensor::new(vec![xs[0].len()], dx.into_data()).unwrap(),
                        dg,
                    ]
                },
                inputs,
                tolerance,
                0x726d,
            )
        }
        "rope" => {
            need(1)?;
            let (position, theta) = (7i64, 10_000.0);
            grad_check_fn(
                kernel,
                &|xs| k::rope(&xs[0], position, theta),
                &|_, g| vec![k::rope_vjp(g, position, theta)],
                inputs,
                tolerance,
                0x726f,
            )
        }
        "silu" => {
            need(1)?;
            grad_check_fn(
                kernel,
                &|xs| Ok(k::silu(&xs[0])),
                &|xs, g| vec![k::silu_vjp(&xs[0], g)],
                inputs,
                tolerance,
                0x7369,
            )
        }
        "gelu" => {
            need(1)?;
            grad_check_fn(
                kernel,
                &|xs| Ok(k::gelu(&xs[0])),
                &|xs, g| vec![k::gelu_vjp(&xs[0], g)],
                inputs,
                tolerance,
                0x6765,
            )
        }
        other => Err(Error::UnsupportedKernel(other.to_string())),
    }
}
