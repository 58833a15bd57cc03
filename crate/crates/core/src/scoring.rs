//! Repeat-prompt importance oracles.
//!
//! The context is replayed after a [REPEAT] marker and each cached position is
//! scored by how much attention the replay pays it. The plain score is the max
//! attention weight over replay queries and the head's query group; the "+"
//! variant rescales each weight by the position's residual-stream contribution
//! norm before the max.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, MAGIC_SCORES};
use crate::error::{Error, Result};
use crate::model::{forward_full, Capture, ForwardTrace, ModelConfig, Token, Weights};
use crate::numerics::kernels::{matmul, rmsnorm_rows};
use crate::numerics::{Scalar, Tensor};

/// Default clamp for log-scores; below every threshold in practical use, so
/// clamping never flips a keep/evict decision.
pub const DEFAULT_LOG_FLOOR: f64 = -20.0;

/// `[BOS] ⟨prompt⟩ [REPEAT] ⟨prompt⟩` with the two copies' index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedPrompt {
    pub tokens: Vec<Token>,
    pub span_original: Range<usize>,
    pub span_repeat: Range<usize>,
}

pub fn build_extended_prompt(config: &ModelConfig, prompt: &[Token]) -> Result<ExtendedPrompt> {
    if prompt.is_empty() {
        return Err(Error::Dimension("empty prompt".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| config.is_reserved(t)) {
        return Err(Error::Vocabulary(format!(
            "reserved token {bad} not allowed in a scored prompt"
        )));
    }
    let n = prompt.len();
    let mut tokens = Vec::with_capacity(2 * n + 2);
    tokens.push(config.bos());
    tokens.extend_from_slice(prompt);
    tokens.push(config.repeat_token());
    tokens.extend_from_slice(prompt);
    Ok(ExtendedPrompt {
        tokens,
        span_original: 1..n + 1,
        span_repeat: n + 2..2 * n + 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Kvzip,
    KvzipPlus,
    SurrogateLog,
}

/// Importance scores indexed by (layer, kv-head, position). Position 0 is
/// BOS; positions `1..=prompt_len` are the context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub kind: ScoreKind,
    pub layers: usize,
    pub kv_heads: usize,
    pub positions: usize,
    values: Vec<f64>,
}

impl ScoreTensor {
    pub fn zeros(kind: ScoreKind, layers: usize, kv_heads: usize, positions: usize) -> Self {
        Self {
            kind,
            layers,
            kv_heads,
            positions,
            values: vec![0.0; layers * kv_heads * positions],
        }
    }

    fn index(&self, layer: usize, head: usize, position: usize) -> usize {
        debug_assert!(layer < self.layers && head < self.kv_heads && position < self.positions);
        (layer * self.kv_heads + head) * self.positions + position
    }

    pub fn at(&self, layer: usize, head: usize, position: usize) -> f64 {
        self.values[self.index(layer, head, position)]
    }

    pub fn set(&mut self, layer: usize, head: usize, position: usize, value: f64) {
        let i = self.index(layer, head, position);
        self.values[i] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Elementwise `ln`, clamped below at `floor`.
    pub fn to_log(&self, floor: f64) -> Result<ScoreTensor> {
        if !(floor.is_finite() && floor < 0.0) {
            return Err(Error::Validation(format!(
                "log floor must be finite and negative, got {floor}"
            )));
        }
        let values = self.values.iter().map(|&s| s.ln().max(floor)).collect();
        Ok(ScoreTensor {
            kind: ScoreKind::SurrogateLog,
            layers: self.layers,
            kv_heads: self.kv_heads,
            positions: self.positions,
            values,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,position,score\n");
        for l in 0..self.layers {
            for h in 0..self.kv_heads {
                for p in 0..self.positions {
                    writeln!(out, "{l},{h},{p},{}", self.at(l, h, p)).expect("string write");
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            kind: &'a ScoreKind,
            layers: usize,
            kv_heads: usize,
            positions: usize,
        }
        let meta = serde_json::to_string(&Meta {
            kind: &self.kind,
            layers: self.layers,
            kv_heads: self.kv_heads,
            positions: self.positions,
        })?;
        let mut c = Container::new(MAGIC_SCORES, meta);
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        c.push(
            "scores",
            Tensor::new(vec![self.layers, self.kv_heads, self.positions], data)?,
        );
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<ScoreTensor> {
        #[derive(Deserialize)]
        struct Meta {
            kind: ScoreKind,
            layers: usize,
            kv_heads: usize,
            positions: usize,
        }
        let c = Container::load(path, MAGIC_SCORES)?;
        let meta: Meta = serde_json::from_str(&c.meta_json)
            .map_err(|e| Error::Format(format!("bad score metadata: {e}")))?;
        let t = c.tensor("scores")?;
        if t.shape() != [meta.layers, meta.kv_heads, meta.positions] {
            return Err(Error::Validation(format!(
                "score tensor shape {:?} disagrees with metadata",
                t.shape()
            )));
        }
        Ok(ScoreTensor {
            kind: meta.kind,
            layers: meta.layers,
            kv_heads: meta.kv_heads,
            positions: meta.positions,
            values: t.data().iter().map(|&v| v as f64).collect(),
        })
    }
}

fn check_extended_len(config: &ModelConfig, ext: &ExtendedPrompt) -> Result<()> {
    if ext.tokens.len() > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "extended prompt of {} tokens exceeds max {}",
            ext.tokens.len(),
            config.max_seq_len
        )));
    }
    Ok(())
}

fn scored_positions(ext: &ExtendedPrompt) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(0).chain(ext.span_original.clone())
}

/// Max replay attention per (layer, kv-head, position), from a captured trace.
pub fn kvzip_from_trace<F: Scalar>(
    config: &ModelConfig,
    ext: &ExtendedPrompt,
    trace: &ForwardTrace<F>,
) -> Result<ScoreTensor> {
    let attn = trace
        .attn
        .as_ref()
        .ok_or_else(|| Error::MissingTrace("attention matrices required for scoring".into()))?;
    let n = ext.span_original.len();
    let g = config.group_size();
    let mut scores = ScoreTensor::zeros(ScoreKind::Kvzip, config.layers, config.kv_heads, n + 1);
    for (l, layer_attn) in attn.iter().enumerate() {
        for h in 0..config.kv_heads {
            for i in scored_positions(ext) {
                let mut best = 0.0f64;
                for q in h * g..(h + 1) * g {
                    let a = &layer_attn[q];
                    for j in ext.span_repeat.clone() {
                        best = best.max(a.at(j, i).to_f64());
                    }
                }
                scores.set(l, h, i, best);
            }
        }
    }
    Ok(scores)
}

/// Replay attention rescaled by residual contribution, per (layer, kv-head,
/// position): max over replay rows j and the group's query heads q of
/// `a_ji · ‖W_O-slice(q)·v_i‖ / ‖h_j‖`, with h the layer-input residual.
pub fn kvzip_plus_from_trace<F: Scalar>(
    weights: &Weights<F>,
    ext: &ExtendedPrompt,
    trace: &ForwardTrace<F>,
) -> Result<ScoreTensor> {
    let config = &weights.config;
    let attn = trace
        .attn
        .as_ref()
        .ok_or_else(|| Error::MissingTrace("attention matrices required for scoring".into()))?;
    let hidden = trace
        .hidden
        .as_ref()
        .ok_or_else(|| Error::MissingTrace("hidden states required for scoring".into()))?;
    let n = ext.span_original.len();
    let d = config.head_dim;
    let g = config.group_size();
    let eps = F::from_f64(crate::model::NORM_EPS);
    let mut scores =
        ScoreTensor::zeros(ScoreKind::KvzipPlus, config.layers, config.kv_heads, n + 1);
    for (l, layer) in weights.layers.iter().enumerate() {
        let h_in = &hidden[l];
        // ‖h_j‖ over the replay rows
        let h_norm: Vec<f64> = (0..h_in.rows())
            .map(|j| h_in.row(j).iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt())
            .collect();
        // values and their W_O-slice projections, per query head
        let xn = rmsnorm_rows(h_in, &layer.attn_norm, eps)?;
        let v = matmul(&xn, &layer.w_v)?;
        // contribution norm ‖W_O^{(q)} v_i‖ per (q, i)
        let mut contrib = vec![vec![0.0f64; h_in.rows()]; config.query_heads];
        for q in 0..config.query_heads {
            let kvh = config.kv_head_of(q);
            for i in 0..h_in.rows() {
                let vrow = &v.row(i)[kvh * d..(kvh + 1) * d];
                let mut norm2 = 0.0f64;
                for c in 0..config.hidden_dim {
                    let mut acc = 0.0f64;
                    for (p, &vv) in vrow.iter().enumerate() {
                        acc += vv.to_f64() * layer.w_o.at(q * d + p, c).to_f64();
                    }
                    norm2 += acc * acc;
                }
                contrib[q][i] = norm2.sqrt();
            }
        }
        for h in 0..config.kv_heads {
            for i in scored_positions(ext) {
                let mut best = 0.0f64;
                for q in h * g..(h + 1) * g {
                    let a = &attn[l][q];
                    for j in ext.span_repeat.clone() {
                        let s = a.at(j, i).to_f64() * contrib[q][i] / h_norm[j];
                        best = best.max(s);
                    }
                }
                scores.set(l, h, i, best);
            }
        }
    }
    Ok(scores)
}

pub fn kvzip_scores<F: Scalar>(weights: &Weights<F>, prompt: &[Token]) -> Result<ScoreTensor> {
    let ext = build_extended_prompt(&weights.config, prompt)?;
    check_extended_len(&weights.config, &ext)?;
    let trace = forward_full(weights, &ext.tokens, Capture::ALL)?;
    kvzip_from_trace(&weights.config, &ext, &trace)
}

pub fn kvzip_plus_scores<F: Scalar>(weights: &Weights<F>, prompt: &[Token]) -> Result<ScoreTensor> {
    let (scores, _, _) = kvzip_plus_scored_trace(weights, prompt)?;
    Ok(scores)
}

/// KVzip+ scores together with the extended prompt and its trace, for callers
/// that also need the hidden states (surrogate dataset generation).
pub fn kvzip_plus_scored_trace<F: Scalar>(
    weights: &Weights<F>,
    prompt: &[Token],
) -> Result<(ScoreTensor, ExtendedPrompt, ForwardTrace<F>)> {
    let ext = build_extended_prompt(&weights.config, prompt)?;
    check_extended_len(&weights.config, &ext)?;
    let trace = forward_full(weights, &ext.tokens, Capture::ALL)?;
    let scores = kvzip_plus_from_trace(weights, &ext, &trace)?;
    Ok((scores, ext, trace))
}
