//! Teacher training: masked next-token cross-entropy, hand-written backward
//! pass composed from the kernel vjps, and Adam.

use crate::error::{Error, Result};
use crate::harness::tasks::{training_example, TaskMix};
use crate::model::forward::NORM_EPS;
use crate::model::weights::{init_weights, Weights};
use crate::model::{ModelConfig, Token};
use crate::numerics::kernels::{
    matmul, matmul_acc, rmsnorm_rows, rmsnorm_rows_vjp, rope_in_place, silu, silu_vjp,
    softmax_causal, softmax_causal_vjp,
};
use crate::numerics::{Scalar, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-decay floor; set equal to `lr` for a flat schedule.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainHyper {
    /// Cosine-annealed learning rate at `step` of `self.steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.lr == self.lr_min {
            return self.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

fn add_cols<F: Scalar>(dst: &mut Tensor<F>, start: usize, src: &Tensor<F>) {
    let w = src.cols();
    for r in 0..src.rows() {
        let drow = &mut dst.row_mut(r)[start..start + w];
        for (d, &s) in drow.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

use crate::model::forward::{extract_cols, write_cols};

/// Mean cross-entropy over masked positions. `mask[t]` marks positions whose
/// next token (`tokens[t+1]`) contributes to the loss; the gradient w.r.t.
/// the logits is returned alongside.
fn masked_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    tokens: &[Token],
    mask: &[bool],
) -> Result<(f64, Tensor<F>)> {
    let t_len = tokens.len();
    if mask.len() != t_len {
        return Err(Error::Dimension("mask length != token length".into()));
    }
    if mask[t_len - 1] {
        return Err(Error::Dimension("last position has no next token".into()));
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::Dimension("empty loss mask".into()));
    }
    let v = logits.cols();
    let inv_n = F::from_f64(1.0 / n_masked as f64);
    let mut grad = Tensor::zeros(vec![t_len, v]);
    let mut loss = 0.0f64;
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let target = tokens[t + 1] as usize;
        let row = logits.row(t);
        let mut max = row[0];
        for &x in &row[1..] {
            max = max.maximum(x);
        }
        let mut sum = F::ZERO;
        let g = grad.row_mut(t);
        for i in 0..v {
            let e = (row[i] - max).exp();
            g[i] = e;
            sum += e;
        }
        let p_target = (g[target] / sum).to_f64();
        loss -= p_target.ln() / n_masked as f64;
        for (i, gi) in g.iter_mut().enumerate() {
            let p = *gi / sum;
            *gi = (p - if i == target { F::ONE } else { F::ZERO }) * inv_n;
        }
    }
    Ok((loss, grad))
}

struct LayerCtx<F: Scalar> {
    h_in: Tensor<F>,
    xn: Tensor<F>,
    q: Tensor<F>, // post-RoPE
    k: Tensor<F>, // post-RoPE
    v: Tensor<F>,
    p: Vec<Tensor<F>>, // per query head
    o: Tensor<F>,
    h_mid: Tensor<F>,
    yn: Tensor<F>,
    gate: Tensor<F>,
    up: Tensor<F>,
    silu_gate: Tensor<F>,
}

/// Forward with saved intermediates plus full backward; returns the masked
/// cross-entropy and a gradient for every parameter tensor.
pub fn loss_and_grads<F: Scalar>(
    weights: &Weights<F>,
    tokens: &[Token],
    mask: &[bool],
) -> Result<(f64, Weights<F>)> {
    let cfg = &weights.config;
    let t_len = tokens.len();
    if t_len > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence length {t_len} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    let eps = F::from_f64(NORM_EPS);
    let scale = F::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let d = cfg.head_dim;

    // ---- forward, saving what the backward pass needs ----
    let mut x = Tensor::<F>::zeros(vec![t_len, cfg.hidden_dim]);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab {
            return Err(Error::Vocabulary(format!("token id {tok} out of range")));
        }
        x.row_mut(t).copy_from_slice(weights.embedding.row(tok as usize));
    }
    let mut ctxs: Vec<LayerCtx<F>> = Vec::with_capacity(cfg.layers);
    for layer in &weights.layers {
        let h_in = x.clone();
        let xn = rmsnorm_rows(&h_in, &layer.attn_norm, eps)?;
        let mut q = matmul(&xn, &layer.w_q)?;
        let mut k = matmul(&xn, &layer.w_k)?;
        let v = matmul(&xn, &layer.w_v)?;
        for r in 0..t_len {
            for h in 0..cfg.query_heads {
                rope_in_place(&mut q.row_mut(r)[h * d..(h + 1) * d], r as i64, cfg.theta_base);
            }
            for h in 0..cfg.kv_heads {
                rope_in_place(&mut k.row_mut(r)[h * d..(h + 1) * d], r as i64, cfg.theta_base);
            }
        }
        let mut o = Tensor::zeros(vec![t_len, cfg.query_heads * d]);
        let mut p_heads = Vec::with_capacity(cfg.query_heads);
        for qh in 0..cfg.query_heads {
            let kvh = cfg.kv_head_of(qh);
            let q_h = extract_cols(&q, qh * d, d);
            let k_h = extract_cols(&k, kvh * d, d);
            let v_h = extract_cols(&v, kvh * d, d);
            let s = matmul(&q_h, &k_h.transpose())?;
            let p = softmax_causal(&s, scale)?;
            let o_h = matmul(&p, &v_h)?;
            write_cols(&mut o, qh * d, &o_h);
            p_heads.push(p);
        }
        let h_mid = h_in.add_tensor(&matmul(&o, &layer.w_o)?)?;
        let yn = rmsnorm_rows(&h_mid, &layer.ffn_norm, eps)?;
        let gate = matmul(&yn, &layer.w_gate)?;
        let up = matmul(&yn, &layer.w_up)?;
        let silu_gate = silu(&gate);
        let mut act = silu_gate.clone();
        for (a, &u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = *a * u;
        }
        x = h_mid.add_tensor(&matmul(&act, &layer.w_down)?)?;
        ctxs.push(LayerCtx {
            h_in,
            xn,
            q,
            k,
            v,
            p: p_heads,
            o,
            h_mid,
            yn,
            gate,
            up,
            silu_gate,
        });
    }
    let x_last = x;
    let fin = rmsnorm_rows(&x_last, &weights.final_norm, eps)?;
    let logits = matmul(&fin, &weights.lm_head)?;
    let (loss, d_logits) = masked_cross_entropy(&logits, tokens, mask)?;

    // ---- backward ----
    let mut grads = Weights::<F>::zeros_like(cfg);
    matmul_acc(&fin.transpose(), &d_logits, &mut grads.lm_head);
    let d_fin = matmul(&d_logits, &weights.lm_head.transpose())?;
    let (mut d_x, d_final_norm) = rmsnorm_rows_vjp(&x_last, &weights.final_norm, eps, &d_fin);
    grads.final_norm.add_assign_tensor(&d_final_norm);

    for (li, layer) in weights.layers.iter().enumerate().rev() {
        let ctx = &ctxs[li];
        let g = &mut grads.layers[li];

        // FFN block: x = h_mid + (silu(gate) ⊙ up)·W_down
        let mut act = ctx.silu_gate.clone();
        for (a, &u) in act.data_mut().iter_mut().zip(ctx.up.data()) {
            *a = *a * u;
        }
        matmul_acc(&act.transpose(), &d_x, &mut g.w_down);
        let d_act = matmul(&d_x, &layer.w_down.transpose())?;
        let mut d_silu_gate = d_act.clone();
        for (a, &u) in d_silu_gate.data_mut().iter_mut().zip(ctx.up.data()) {
            *a = *a * u;
        }
        let mut d_up = d_act;
        for (a, &s) in d_up.data_mut().iter_mut().zip(ctx.silu_gate.data()) {
            *a = *a * s;
        }
        let d_gate = silu_vjp(&ctx.gate, &d_silu_gate);
        matmul_acc(&ctx.yn.transpose(), &d_gate, &mut g.w_gate);
        matmul_acc(&ctx.yn.transpose(), &d_up, &mut g.w_up);
        let mut d_yn = matmul(&d_gate, &layer.w_gate.transpose())?;
        matmul_acc(&d_up, &layer.w_up.transpose(), &mut d_yn);
        let (d_h_mid_norm, d_ffn_norm) = rmsnorm_rows_vjp(&ctx.h_mid, &layer.ffn_norm, eps, &d_yn);
        g.ffn_norm.add_assign_tensor(&d_ffn_norm);
        let mut d_h_mid = d_x; // residual path
        d_h_mid.add_assign_tensor(&d_h_mid_norm);

        // attention block: h_mid = h_in + o·W_O
        matmul_acc(&ctx.o.transpose(), &d_h_mid, &mut g.w_o);
        let d_o = matmul(&d_h_mid, &layer.w_o.transpose())?;
        let mut d_q = Tensor::zeros(vec![t_len, cfg.query_heads * d]);
        let mut d_k = Tensor::zeros(vec![t_len, cfg.kv_heads * d]);
        let mut d_v = Tensor::zeros(vec![t_len, cfg.kv_heads * d]);
        for qh in 0..cfg.query_heads {
            let kvh = cfg.kv_head_of(qh);
            let p = &ctx.p[qh];
            let d_o_h = extract_cols(&d_o, qh * d, d);
            let q_h = extract_cols(&ctx.q, qh * d, d);
            let k_h = extract_cols(&ctx.k, kvh * d, d);
            let v_h = extract_cols(&ctx.v, kvh * d, d);
            let d_p = matmul(&d_o_h, &v_h.transpose())?;
            let d_v_h = matmul(&p.transpose(), &d_o_h)?;
            add_cols(&mut d_v, kvh * d, &d_v_h);
            let d_s = softmax_causal_vjp(p, &d_p, scale);
            let d_q_h = matmul(&d_s, &k_h)?;
            add_cols(&mut d_q, qh * d, &d_q_h);
            let d_k_h = matmul(&d_s.transpose(), &q_h)?;
            add_cols(&mut d_k, kvh * d, &d_k_h);
        }
        // undo RoPE on the gradients (inverse rotation)
        for r in 0..t_len {
            for h in 0..cfg.query_heads {
                rope_in_place(&mut d_q.row_mut(r)[h * d..(h + 1) * d], -(r as i64), cfg.theta_base);
            }
            for h in 0..cfg.kv_heads {
                rope_in_place(&mut d_k.row_mut(r)[h * d..(h + 1) * d], -(r as i64), cfg.theta_base);
            }
        }
        matmul_acc(&ctx.xn.transpose(), &d_q, &mut g.w_q);
        matmul_acc(&ctx.xn.transpose(), &d_k, &mut g.w_k);
        matmul_acc(&ctx.xn.transpose(), &d_v, &mut g.w_v);
        let mut d_xn = matmul(&d_q, &layer.w_q.transpose())?;
        matmul_acc(&d_k, &layer.w_k.transpose(), &mut d_xn);
        matmul_acc(&d_v, &layer.w_v.transpose(), &mut d_xn);
        let (d_h_in_norm, d_attn_norm) = rmsnorm_rows_vjp(&ctx.h_in, &layer.attn_norm, eps, &d_xn);
        g.attn_norm.add_assign_tensor(&d_attn_norm);
        d_x = d_h_mid;
        d_x.add_assign_tensor(&d_h_in_norm);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let src = d_x.row(t).to_vec();
        let dst = grads.embedding.row_mut(tok as usize);
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }

    Ok((loss, grads))
}

/// Adam optimizer state over the full weight set.
pub struct Adam {
    m: Weights<f32>,
    v: Weights<f32>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(config: &ModelConfig, hyper: &TrainHyper) -> Self {
        Self {
            m: Weights::zeros_like(config),
            v: Weights::zeros_like(config),
            t: 0,
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.adam_eps,
        }
    }

    pub fn step(&mut self, weights: &mut Weights<f32>, grads: &Weights<f32>) {
        let lr = self.lr;
        self.step_with_lr(weights, grads, lr);
    }

    /// One update with an externally scheduled learning rate.
    pub fn step_with_lr(&mut self, weights: &mut Weights<f32>, grads: &Weights<f32>, lr: f64) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = (1.0 - self.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(self.t as i32)) as f32;
        let lr = lr as f32;
        let eps = self.eps as f32;
        let mut wt = weights.tensors_mut();
        let mut mt = self.m.tensors_mut();
        let mut vt = self.v.tensors_mut();
        let gt = grads.tensors();
        for i in 0..wt.len() {
            let w = wt[i].data_mut();
            let m = mt[i].data_mut();
            let v = vt[i].data_mut();
            let g = gt[i].data();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Train the toy teacher on the synthetic task mix with Adam and masked
/// cross-entropy. Deterministic given (config.seed, hyper.seed).
pub fn train_teacher(
    config: &ModelConfig,
    mix: &TaskMix,
    hyper: &TrainHyper,
) -> Result<(Weights<f32>, Vec<f64>)> {
    let mut weights = init_weights::<f32>(config)?;
    let mut adam = Adam::new(config, hyper);
    let mut rng = SplitMix64::new(hyper.seed).derive(TRAIN_STREAM);
    let mut curve = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut total = Weights::<f32>::zeros_like(config);
        let mut loss_sum = 0.0;
        for _ in 0..hyper.batch_size {
            let task = mix.sample(config, &mut rng)?;
            let (tokens, mask) = training_example(&task);
            let (loss, grads) = loss_and_grads(&weights, &tokens, &mask)?;
            loss_sum += loss;
            for (t, gsrc) in total.tensors_mut().into_iter().zip(grads.tensors()) {
                t.add_assign_tensor(gsrc);
            }
        }
        let avg_loss = loss_sum / hyper.batch_size as f64;
        if !avg_loss.is_finite() {
            return Err(Error::Training { step });
        }
        let inv_b = 1.0 / hyper.batch_size as f32;
        for t in total.tensors_mut() {
            for x in t.data_mut() {
                *x *= inv_b;
            }
        }
        adam.step_with_lr(&mut weights, &total, hyper.lr_at(step));
        curve.push(avg_loss);
    }
    weights.check_finite()?;
    Ok((weights, curve))
}

const TRAIN_STREAM: u64 = 0x7261_696e;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check_fn;

    #[test]
    fn untrained_loss_is_near_uniform_entropy() {
        let cfg = ModelConfig::toy(0);
        let w = init_weights::<f64>(&cfg).unwrap();
        let mix = TaskMix::copy_only(8..=24);
        let mut rng = SplitMix64::new(1);
        let mut total = 0.0;
        let n = 16;
        for _ in 0..n {
            let task = mix.sample(&cfg, &mut rng).unwrap();
            let (tokens, mask) = training_example(&task);
            let (loss, _) = loss_and_grads(&w, &tokens, &mask).unwrap();
            total += loss;
        }
        let avg = total / n as f64;
        let want = (cfg.vocab as f64).ln();
        assert!((avg - want).abs() < 0.05, "loss {avg} vs ln V {want}");
    }

    #[test]
    fn full_loss_gradient_passes_finite_differences() {
        // every parameter of a tiny-config teacher on a length-8 sequence
        let cfg = ModelConfig::tiny(5);
        let w = init_weights::<f64>(&cfg).unwrap();
        let tokens: Vec<Token> = vec![6, 1, 2, 3, 7, 1, 2, 3];
        let mask = vec![false, false, false, false, true, true, true, false];

        let names = Weights::<f64>::tensor_names(&cfg);
        let base: Vec<Tensor<f64>> = w.tensors().into_iter().cloned().collect();
        let rebuild = |xs: &[Tensor<f64>]| -> Weights<f64> {
            let mut w2 = Weights::<f64>::zeros_like(&cfg);
            for (dst, src) in w2.tensors_mut().into_iter().zip(xs) {
                *dst = src.clone();
            }
            w2
        };
        let forward = |xs: &[Tensor<f64>]| -> crate::error::Result<Tensor<f64>> {
            let w2 = rebuild(xs);
            let (loss, _) = loss_and_grads(&w2, &tokens, &mask)?;
            Tensor::new(vec![1], vec![loss])
        };
        let vjp = |xs: &[Tensor<f64>], g: &Tensor<f64>| -> Vec<Tensor<f64>> {
            let w2 = rebuild(xs);
            let (_, grads) = loss_and_grads(&w2, &tokens, &mask).unwrap();
            let s = g.data()[0];
            grads.tensors().into_iter().map(|t| t.scale(s)).collect()
        };
        let report = grad_check_fn("teacher_loss", &forward, &vjp, &base, 1e-4, 0xfeed).unwrap();
        assert!(
            report.passed,
            "teacher loss grad check: max rel err {} over {} tensors ({names:?})",
            report.max_rel_err,
            base.len()
        );
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ModelConfig::toy(3);
        let mix = TaskMix::copy_only(4..=10);
        let hyper = TrainHyper {
            steps: 30,
            batch_size: 4,
            seed: 11,
            ..TrainHyper::default()
        };
        let (_, curve) = train_teacher(&cfg, &mix, &hyper).unwrap();
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }
}
