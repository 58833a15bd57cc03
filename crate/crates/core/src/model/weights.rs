//! Teacher parameters and deterministic initialization.

use crate::error::Result;
use crate::model::ModelConfig;
use crate::numerics::{Scalar, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct LayerWeights<F: Scalar> {
    pub attn_norm: Tensor<F>, // D_h
    pub w_q: Tensor<F>,       // D_h × H_Q·D
    pub w_k: Tensor<F>,       // D_h × H·D
    pub w_v: Tensor<F>,       // D_h × H·D
    pub w_o: Tensor<F>,       // H_Q·D × D_h
    pub ffn_norm: Tensor<F>,  // D_h
    pub w_gate: Tensor<F>,    // D_h × D_int
    pub w_up: Tensor<F>,      // D_h × D_int
    pub w_down: Tensor<F>,    // D_int × D_h
}

#[derive(Debug, Clone)]
pub struct Weights<F: Scalar> {
    pub config: ModelConfig,
    pub embedding: Tensor<F>, // V × D_h
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Tensor<F>, // D_h
    pub lm_head: Tensor<F>,    // D_h × V
}

pub const INIT_STD: f64 = 0.02;

/// Deterministic scaled-normal initialization: std 0.02 everywhere, with the
/// output projections (W_O, W_down) additionally scaled by 1/sqrt(2L).
/// RMSNorm gains start at one.
pub fn init_weights<F: Scalar>(config: &ModelConfig) -> Result<Weights<F>> {
    config.validate()?;
    let root = SplitMix64::new(config.seed);
    let mut stream = 0u64;
    let mut normal = |shape: Vec<usize>, std: f64| {
        let mut rng = root.derive(stream);
        stream += 1;
        Tensor::fill_with(shape, || F::from_f64(rng.next_normal() * std))
    };
    let out_scale = INIT_STD / (2.0 * config.layers as f64).sqrt();
    let (dh, d) = (config.hidden_dim, config.head_dim);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            attn_norm: Tensor::vector(vec![F::ONE; dh]),
            w_q: normal(vec![dh, config.query_heads * d], INIT_STD),
            w_k: normal(vec![dh, config.kv_heads * d], INIT_STD),
            w_v: normal(vec![dh, config.kv_heads * d], INIT_STD),
            w_o: normal(vec![config.query_heads * d, dh], out_scale),
            ffn_norm: Tensor::vector(vec![F::ONE; dh]),
            w_gate: normal(vec![dh, config.ffn_dim], INIT_STD),
            w_up: normal(vec![dh, config.ffn_dim], INIT_STD),
            w_down: normal(vec![config.ffn_dim, dh], out_scale),
        })
        .collect();
    Ok(Weights {
        embedding: normal(vec![config.vocab, dh], INIT_STD),
        layers,
        final_norm: Tensor::vector(vec![F::ONE; dh]),
        lm_head: normal(vec![dh, config.vocab], INIT_STD),
        config: config.clone(),
    })
}

impl<F: Scalar> Weights<F> {
    /// All parameter tensors in a fixed, documented order. The checkpoint
    /// payload order and the optimizer state both follow this order.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for l in 0..config.layers {
            for t in [
                "attn_norm", "w_q", "w_k", "w_v", "w_o", "ffn_norm", "w_gate", "w_up", "w_down",
            ] {
                names.push(format!("layer{l}.{t}"));
            }
        }
        names.push("final_norm".to_string());
        names.push("lm_head".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out: Vec<&Tensor<F>> = vec![&self.embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ffn_norm, &l.w_gate, &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Zero-valued weights with the same shapes (gradient/optimizer buffers).
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let (dh, d) = (config.hidden_dim, config.head_dim);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::zeros(vec![dh]),
                w_q: Tensor::zeros(vec![dh, config.query_heads * d]),
                w_k: Tensor::zeros(vec![dh, config.kv_heads * d]),
                w_v: Tensor::zeros(vec![dh, config.kv_heads * d]),
                w_o: Tensor::zeros(vec![config.query_heads * d, dh]),
                ffn_norm: Tensor::zeros(vec![dh]),
                w_gate: Tensor::zeros(vec![dh, config.ffn_dim]),
                w_up: Tensor::zeros(vec![dh, config.ffn_dim]),
                w_down: Tensor::zeros(vec![config.ffn_dim, dh]),
            })
            .collect();
        Self {
            embedding: Tensor::zeros(vec![config.vocab, dh]),
            layers,
            final_norm: Tensor::zeros(vec![dh]),
            lm_head: Tensor::zeros(vec![dh, config.vocab]),
            config: config.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                attn_norm: l.attn_norm.cast(),
                w_q: l.w_q.cast(),
                w_k: l.w_k.cast(),
                w_v: l.w_v.cast(),
                w_o: l.w_o.cast(),
                ffn_norm: l.ffn_norm.cast(),
                w_gate: l.w_gate.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect();
        Weights {
            embedding: self.embedding.cast(),
            layers,
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
            config: self.config.clone(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            t.check_finite("weights")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let c = ModelConfig::toy(1234);
        let a: Weights<f32> = init_weights(&c).unwrap();
        let b: Weights<f32> = init_weights(&c).unwrap();
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let c = ModelConfig::toy(0);
        let w: Weights<f32> = init_weights(&c).unwrap();
        assert_eq!(w.param_count(), c.param_count());
        let c = ModelConfig::tiny(0);
        let w: Weights<f64> = init_weights(&c).unwrap();
        assert_eq!(w.param_count(), c.param_count());
    }

    #[test]
    fn init_std_close_to_nominal() {
        let c = ModelConfig::toy(7);
        let w: Weights<f64> = init_weights(&c).unwrap();
        for t in [&w.layers[0].w_q, &w.layers[0].w_gate, &w.embedding, &w.lm_head] {
            let n = t.len() as f64;
            let mean: f64 = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            assert!(
                (std - INIT_STD).abs() < 0.1 * INIT_STD,
                "sample std {std} too far from {INIT_STD}"
            );
        }
    }

    #[test]
    fn output_projections_are_downscaled() {
        let c = ModelConfig::toy(7);
        let w: Weights<f64> = init_weights(&c).unwrap();
        let n = w.layers[0].w_o.len() as f64;
        let std = (w.layers[0].w_o.data().iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let want = INIT_STD / (2.0 * c.layers as f64).sqrt();
        assert!((std - want).abs() < 0.1 * want, "w_o std {std} vs {want}");
    }

    #[test]
    fn tensor_names_align_with_tensors() {
        let c = ModelConfig::toy(0);
        let w: Weights<f32> = init_weights(&c).unwrap();
        assert_eq!(Weights::<f32>::tensor_names(&c).len(), w.tensors().len());
    }
}
