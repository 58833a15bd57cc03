//! Forward passes: full-sequence, cached prefill, and single-token decode.
//!
//! The full pass materializes the causal attention matrices; the cached paths
//! attend over whatever entries the [`PagedKvCache`] currently holds, so
//! evicted entries are invisible. Keys enter the cache post-RoPE at their
//! original absolute positions and are never re-rotated.

use crate::error::{Error, Result};
use crate::kvcache::PagedKvCache;
use crate::model::{Token, Weights};
use crate::numerics::kernels::{
    matmul, rmsnorm_rows, rope_in_place, silu, softmax_causal, softmax_row,
};
use crate::numerics::{Scalar, Tensor};

/// What the forward pass should record.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    /// Per-layer input hidden states (the residual entering the layer,
    /// before the attention RMSNorm).
    pub hidden: bool,
    /// Per-layer, per-query-head attention matrices.
    pub attn: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        hidden: false,
        attn: false,
    };
    pub const HIDDEN: Capture = Capture {
        hidden: true,
        attn: false,
    };
    pub const ALL: Capture = Capture {
        hidden: true,
        attn: true,
    };
}

/// Captured intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Scalar> {
    /// Per layer: T×D_h residual entering the layer. Present iff requested.
    pub hidden: Option<Vec<Tensor<F>>>,
    /// Per layer, per query head: T×T attention. Present iff requested.
    pub attn: Option<Vec<Vec<Tensor<F>>>>,
    /// T×V logits.
    pub logits: Tensor<F>,
}

fn embed<F: Scalar>(weights: &Weights<F>, tokens: &[Token]) -> Result<Tensor<F>> {
    let cfg = &weights.config;
    let dh = cfg.hidden_dim;
    let mut x = Tensor::zeros(vec![tokens.len(), dh]);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab {
            return Err(Error::Vocabulary(format!(
                "token id {tok} out of range (vocab {})",
                cfg.vocab
            )));
        }
        x.row_mut(t).copy_from_slice(weights.embedding.row(tok as usize));
    }
    Ok(x)
}

/// Copy a column band [start, start+width) of a matrix into a new matrix.
pub(crate) fn extract_cols<F: Scalar>(m: &Tensor<F>, start: usize, width: usize) -> Tensor<F> {
    let t = m.rows();
    let mut out = Tensor::zeros(vec![t, width]);
    for r in 0..t {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

pub(crate) fn write_cols<F: Scalar>(dst: &mut Tensor<F>, start: usize, src: &Tensor<F>) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

/// Apply RoPE to each head band of a T×(n_heads·D) projection, row r at
/// absolute position `start + r`.
fn rope_heads<F: Scalar>(m: &mut Tensor<F>, n_heads: usize, head_dim: usize, start: usize, theta: f64) {
    for r in 0..m.rows() {
        let pos = (start + r) as i64;
        let row = m.row_mut(r);
        for h in 0..n_heads {
            rope_in_place(&mut row[h * head_dim..(h + 1) * head_dim], pos, theta);
        }
    }
}

fn rmsnorm_vec<F: Scalar>(x: &[F], gamma: &Tensor<F>, eps: F) -> Vec<F> {
    let d = x.len();
    let mut ms = F::ZERO;
    for &v in x {
        ms += v * v;
    }
    let inv = F::ONE / (ms / F::from_f64(d as f64) + eps).sqrt();
    x.iter()
        .zip(gamma.data())
        .map(|(&v, &g)| v * inv * g)
        .collect()
}

fn vec_mat<F: Scalar>(x: &[F], w: &Tensor<F>) -> Vec<F> {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), k);
    let mut out = vec![F::ZERO; n];
    F::gemm(1, k, n, F::ONE, x, w.data(), F::ZERO, &mut out);
    out
}

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Causal attention over the full sequence, with optional trace capture.
pub fn forward_full<F: Scalar>(
    weights: &Weights<F>,
    tokens: &[Token],
    capture: Capture,
) -> Result<ForwardTrace<F>> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence length {} exceeds max {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let eps = F::from_f64(NORM_EPS);
    let scale = F::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let d = cfg.head_dim;

    let mut x = embed(weights, tokens)?;
    let mut hidden = capture.hidden.then(Vec::new);
    let mut attn = capture.attn.then(Vec::new);

    for layer in &weights.layers {
        if let Some(h) = hidden.as_mut() {
            h.push(x.clone());
        }
        let xn = rmsnorm_rows(&x, &layer.attn_norm, eps)?;
        let mut q = matmul(&xn, &layer.w_q)?;
        let mut k = matmul(&xn, &layer.w_k)?;
        let v = matmul(&xn, &layer.w_v)?;
        rope_heads(&mut q, cfg.query_heads, d, 0, cfg.theta_base);
        rope_heads(&mut k, cfg.kv_heads, d, 0, cfg.theta_base);

        let mut o = Tensor::zeros(vec![tokens.len(), cfg.query_heads * d]);
        let mut layer_attn = capture.attn.then(Vec::new);
        for qh in 0..cfg.query_heads {
            let kvh = cfg.kv_head_of(qh);
            let q_h = extract_cols(&q, qh * d, d);
            let k_h = extract_cols(&k, kvh * d, d);
            let v_h = extract_cols(&v, kvh * d, d);
            let scores = matmul(&q_h, &k_h.transpose())?;
            let p = softmax_causal(&scores, scale)?;
            let o_h = matmul(&p, &v_h)?;
            write_cols(&mut o, qh * d, &o_h);
            if let Some(a) = layer_attn.as_mut() {
                a.push(p);
            }
        }
        if let (Some(a), Some(la)) = (attn.as_mut(), layer_attn) {
            a.push(la);
        }
        let attn_out = matmul(&o, &layer.w_o)?;
        x.add_assign_tensor(&attn_out);

        let yn = rmsnorm_rows(&x, &layer.ffn_norm, eps)?;
        let gate = matmul(&yn, &layer.w_gate)?;
        let up = matmul(&yn, &layer.w_up)?;
        let mut act = silu(&gate);
        for (a, &u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = *a * u;
        }
        let ffn_out = matmul(&act, &layer.w_down)?;
        x.add_assign_tensor(&ffn_out);
    }

    let final_norm = rmsnorm_rows(&x, &weights.final_norm, eps)?;
    let logits = matmul(&final_norm, &weights.lm_head)?;
    logits.check_finite("forward_full logits")?;
    Ok(ForwardTrace {
        hidden,
        attn,
        logits,
    })
}

/// Output of one cached step.
#[derive(Debug, Clone)]
pub struct DecodeOutput<F: Scalar> {
    /// Logits for the processed token (length V).
    pub logits: Vec<F>,
    /// Residual entering each layer (length L, each D_h) — the hidden state
    /// the surrogate scores this position with.
    pub hidden: Vec<Vec<F>>,
}

/// Process one token at absolute position `position` against the cache,
/// appending one KV entry per (layer, kv-head). Attention runs over the
/// entries currently live in the cache, including the new ones.
pub fn step_with_cache<F: Scalar>(
    weights: &Weights<F>,
    token: Token,
    position: usize,
    cache: &mut PagedKvCache<F>,
) -> Result<DecodeOutput<F>> {
    let cfg = &weights.config;
    if token as usize >= cfg.vocab {
        return Err(Error::Vocabulary(format!(
            "token id {token} out of range (vocab {})",
            cfg.vocab
        )));
    }
    if position >= cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "position {position} exceeds max sequence length {}",
            cfg.max_seq_len
        )));
    }
    let eps = F::from_f64(NORM_EPS);
    let scale = F::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let d = cfg.head_dim;

    let mut h: Vec<F> = weights.embedding.row(token as usize).to_vec();
    let mut hidden = Vec::with_capacity(cfg.layers);

    for (li, layer) in weights.layers.iter().enumerate() {
        hidden.push(h.clone());
        let xn = rmsnorm_vec(&h, &layer.attn_norm, eps);
        let mut q = vec_mat(&xn, &layer.w_q);
        let mut k = vec_mat(&xn, &layer.w_k);
        let v = vec_mat(&xn, &layer.w_v);
        for qh in 0..cfg.query_heads {
            rope_in_place(&mut q[qh * d..(qh + 1) * d], position as i64, cfg.theta_base);
        }
        for kvh in 0..cfg.kv_heads {
            rope_in_place(&mut k[kvh * d..(kvh + 1) * d], position as i64, cfg.theta_base);
        }
        for kvh in 0..cfg.kv_heads {
            cache.append(
                li,
                kvh,
                position,
                k[kvh * d..(kvh + 1) * d].to_vec(),
                v[kvh * d..(kvh + 1) * d].to_vec(),
            )?;
        }

        let mut o = vec![F::ZERO; cfg.query_heads * d];
        for kvh in 0..cfg.kv_heads {
            let (_, keys, values) = cache.gather(li, kvh);
            let n = keys.rows();
            for g in 0..cfg.group_size() {
                let qh = kvh * cfg.group_size() + g;
                let qv = &q[qh * d..(qh + 1) * d];
                let mut scores = vec![F::ZERO; n];
                for i in 0..n {
                    let krow = keys.row(i);
                    let mut s = F::ZERO;
                    for (a, b) in qv.iter().zip(krow) {
                        s += *a * *b;
                    }
                    scores[i] = s;
                }
                softmax_row(&mut scores, scale);
                let out = &mut o[qh * d..(qh + 1) * d];
                for i in 0..n {
                    let vrow = values.row(i);
                    let a = scores[i];
                    for (os, &vv) in out.iter_mut().zip(vrow) {
                        *os += a * vv;
                    }
                }
            }
        }
        let attn_out = vec_mat(&o, &layer.w_o);
        for (hv, a) in h.iter_mut().zip(&attn_out) {
            *hv += *a;
        }

        let yn = rmsnorm_vec(&h, &layer.ffn_norm, eps);
        let gate = vec_mat(&yn, &layer.w_gate);
        let up = vec_mat(&yn, &layer.w_up);
        let act: Vec<F> = gate
            .iter()
            .zip(&up)
            .map(|(&g, &u)| {
                let s = F::ONE / (F::ONE + (-g).exp());
                g * s * u
            })
            .collect();
        let ffn_out = vec_mat(&act, &layer.w_down);
        for (hv, f) in h.iter_mut().zip(&ffn_out) {
            *hv += *f;
        }
    }

    let fin = rmsnorm_vec(&h, &weights.final_norm, eps);
    let logits = vec_mat(&fin, &weights.lm_head);
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("decode logits"));
    }
    Ok(DecodeOutput { logits, hidden })
}

/// Prefill the cache with a whole prompt. The cache ends up holding one
/// (k, v) entry per (layer, kv-head, position); pruning happens afterwards.
/// Returns the last-position logits and a trace over all prompt positions.
pub fn prefill<F: Scalar>(
    weights: &Weights<F>,
    tokens: &[Token],
    cache: &mut PagedKvCache<F>,
    capture: Capture,
) -> Result<(Vec<F>, ForwardTrace<F>)> {
    if tokens.is_empty() {
        return Err(Error::Dimension("empty prompt".into()));
    }
    let cfg = &weights.config;
    let start = cache.tokens_seen();
    if start + tokens.len() > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "prefill of {} tokens at offset {start} exceeds max {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let mut hidden = capture
        .hidden
        .then(|| vec![Tensor::<F>::zeros(vec![tokens.len(), cfg.hidden_dim]); cfg.layers]);
    let mut logits = Tensor::zeros(vec![tokens.len(), cfg.vocab]);
    let mut last = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        let out = step_with_cache(weights, tok, start + i, cache)?;
        if let Some(h) = hidden.as_mut() {
            for (l, hl) in out.hidden.iter().enumerate() {
                h[l].row_mut(i).copy_from_slice(hl);
            }
        }
        logits.row_mut(i).copy_from_slice(&out.logits);
        last = out.logits;
    }
    Ok((
        last,
        ForwardTrace {
            hidden,
            attn: None,
            logits,
        },
    ))
}

/// Single-token decode against a non-empty cache.
pub fn decode_step<F: Scalar>(
    weights: &Weights<F>,
    token: Token,
    cache: &mut PagedKvCache<F>,
) -> Result<DecodeOutput<F>> {
    if cache.is_empty() {
        return Err(Error::Validation("decode_step on an empty cache".into()));
    }
    let position = cache.tokens_seen();
    step_with_cache(weights, token, position, cache)
}

impl<F: Scalar> PagedKvCache<F> {
    /// Tokens processed through this cache so far (appended entries per
    /// head; every model step appends exactly one entry to every head).
    pub fn tokens_seen(&self) -> usize {
        self.appended_count(0, 0) as usize
    }
}

/// Greedy argmax with deterministic tie-breaking toward the lowest token id.
pub fn argmax<F: Scalar>(logits: &[F]) -> Token {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as Token
}
