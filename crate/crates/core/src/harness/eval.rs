//! End-to-end evaluation: prefill, compress, greedily decode against the
//! pruned cache, score against the target, and collect compression stats.

use serde::Serialize;

use crate::error::Result;
use crate::harness::tasks::{Metric, Task, TaskKind};
use crate::kvcache::{PagedKvCache, DEFAULT_BLOCK_SIZE};
use crate::model::{argmax, decode_step, prefill, Capture, Token, Weights};
use crate::numerics::Scalar;
use crate::policies::{
    compression_report, decode_update, prefill_compress, seed_buffer_from_prefill,
    DecodeScoreBuffer, Policy,
};
use crate::surrogate::Surrogate;

#[derive(Debug, Clone, Serialize)]
pub struct TaskRecord {
    pub kind: TaskKind,
    pub seed: u64,
    pub accuracy: f64,
    pub removed_fraction: f64,
    pub compression_factor: f64,
    pub live_bytes: u64,
    pub resident_bytes: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub policy: String,
    pub n_tasks: usize,
    pub accuracy: f64,
    pub removed_fraction_mean: f64,
    pub removed_fraction_std: f64,
    pub per_task: Vec<TaskRecord>,
}

fn score_metric(metric: Metric, generated: &[Token], target: &[Token]) -> f64 {
    match metric {
        Metric::TokenAccuracy => {
            let hits = generated
                .iter()
                .zip(target)
                .filter(|(a, b)| a == b)
                .count();
            hits as f64 / target.len() as f64
        }
        Metric::ExactMatch => {
            if generated.len() == target.len() && generated == target {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Run one task under a policy. Deterministic given (weights, policy, task).
pub fn evaluate_task<F: Scalar>(
    weights: &Weights<F>,
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    task: &Task,
) -> Result<TaskRecord> {
    let cfg = &weights.config;
    let mut cache =
        PagedKvCache::<F>::new(cfg.layers, cfg.kv_heads, cfg.head_dim, DEFAULT_BLOCK_SIZE);
    let (mut last_logits, trace) = prefill(weights, &task.prompt, &mut cache, Capture::HIDDEN)?;
    prefill_compress(policy, surrogate, weights, &task.prompt, &trace, &mut cache)?;
    let mut buffer = DecodeScoreBuffer::new(cfg.layers, cfg.kv_heads, policy.window());
    seed_buffer_from_prefill(policy, surrogate, weights, &trace, task.prompt.len(), &mut buffer)?;

    // One decode step against the compressed cache, with the online scoring
    // and eviction pass applied to the newly appended position.
    let step = |tok: Token,
                    cache: &mut PagedKvCache<F>,
                    buffer: &mut DecodeScoreBuffer|
     -> Result<Vec<F>> {
        let out = decode_step(weights, tok, cache)?;
        let position = cache.tokens_seen() - 1;
        let hidden: Vec<Vec<f64>> = out
            .hidden
            .iter()
            .map(|h| h.iter().map(|&v| v.to_f64()).collect())
            .collect();
        let sets = decode_update(policy, surrogate, buffer, position, &hidden)?;
        for l in 0..cfg.layers {
            for h in 0..cfg.kv_heads {
                let set = &sets[l * cfg.kv_heads + h];
                if !set.is_empty() {
                    cache.evict(l, h, set);
                }
            }
        }
        Ok(out.logits)
    };

    // The query arrives only after compression: teacher-force it.
    let mut truncated = false;
    for &tok in &task.query {
        if cache.tokens_seen() >= cfg.max_seq_len {
            truncated = true;
            break;
        }
        last_logits = step(tok, &mut cache, &mut buffer)?;
    }

    let mut generated: Vec<Token> = Vec::with_capacity(task.target.len());
    if !truncated {
        for i in 0..task.target.len() {
            let tok = argmax(&last_logits);
            generated.push(tok);
            if i + 1 == task.target.len() {
                break;
            }
            if cache.tokens_seen() >= cfg.max_seq_len {
                truncated = true;
                break;
            }
            last_logits = step(tok, &mut cache, &mut buffer)?;
        }
    }
    let stats = compression_report(&cache)?;
    Ok(TaskRecord {
        kind: task.kind,
        seed: task.seed,
        accuracy: score_metric(task.metric, &generated, &task.target),
        removed_fraction: stats.removed_fraction,
        compression_factor: stats.compression_factor,
        live_bytes: stats.live_bytes,
        resident_bytes: stats.resident_bytes,
        truncated,
    })
}

/// Evaluate a policy on a task list, aggregating in task order.
pub fn evaluate<F: Scalar>(
    weights: &Weights<F>,
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    tasks: &[Task],
) -> Result<EvalResult> {
    policy.validate()?;
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        per_task.push(evaluate_task(weights, policy, surrogate, task)?);
    }
    let n = per_task.len().max(1) as f64;
    let accuracy = per_task.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let mean = per_task.iter().map(|r| r.removed_fraction).sum::<f64>() / n;
    let var = per_task
        .iter()
        .map(|r| (r.removed_fraction - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(EvalResult {
        policy: policy.descriptor(),
        n_tasks: per_task.len(),
        accuracy,
        removed_fraction_mean: mean,
        removed_fraction_std: var.sqrt(),
        per_task,
    })
}
