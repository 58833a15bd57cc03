//! Synthetic tasks: copy (context reconstruction) and key-value lookup
//! (retrieval). Tasks double as teacher training data and evaluation probes.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Token};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    KvLookup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of target positions where the greedy token matches.
    TokenAccuracy,
    /// 1.0 iff the full target is reproduced.
    ExactMatch,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub seed: u64,
    /// Context tokens: prefilled, then compressed by the policy under test.
    pub prompt: Vec<Token>,
    /// Instruction/question tokens, teacher-forced after compression so that
    /// pruning decisions are made before the query is known.
    pub query: Vec<Token>,
    pub target: Vec<Token>,
    pub metric: Metric,
}

/// Context `[BOS] d₁..dₙ`, query `[REPEAT]`, target `d₁..dₙ`.
pub fn gen_copy_task(config: &ModelConfig, seed: u64, data_len: usize) -> Result<Task> {
    if data_len == 0 || data_len > (config.max_seq_len - 2) / 2 {
        return Err(Error::Capacity(format!(
            "copy data_len {data_len} out of range for T_max {}",
            config.max_seq_len
        )));
    }
    let mut rng = SplitMix64::new(seed).derive(0xc0);
    let data: Vec<Token> = (0..data_len)
        .map(|_| rng.below(config.data_alphabet()) as Token)
        .collect();
    let mut prompt = Vec::with_capacity(data_len + 1);
    prompt.push(config.bos());
    prompt.extend_from_slice(&data);
    Ok(Task {
        kind: TaskKind::Copy,
        seed,
        prompt,
        query: vec![config.repeat_token()],
        target: data,
        metric: Metric::TokenAccuracy,
    })
}

/// Context `[BOS] k₁ v₁ ... kₙ vₙ`, query `[Q] k_j [A]`, target `v_j`;
/// keys distinct.
pub fn gen_kv_lookup_task(config: &ModelConfig, seed: u64, n_pairs: usize) -> Result<Task> {
    if n_pairs == 0 || 4 * n_pairs + 4 > config.max_seq_len {
        return Err(Error::Capacity(format!(
            "kv_lookup n_pairs {n_pairs} out of range for T_max {}",
            config.max_seq_len
        )));
    }
    if n_pairs > config.data_alphabet() {
        return Err(Error::Capacity(format!(
            "cannot draw {n_pairs} distinct keys from alphabet of {}",
            config.data_alphabet()
        )));
    }
    let mut rng = SplitMix64::new(seed).derive(0xa1);
    let mut keys = rng.sample_distinct(config.data_alphabet(), n_pairs);
    rng.shuffle(&mut keys);
    let values: Vec<Token> = (0..n_pairs)
        .map(|_| rng.below(config.data_alphabet()) as Token)
        .collect();
    let query = rng.below(n_pairs);
    let mut prompt = Vec::with_capacity(2 * n_pairs + 1);
    prompt.push(config.bos());
    for (k, v) in keys.iter().zip(&values) {
        prompt.push(*k as Token);
        prompt.push(*v);
    }
    Ok(Task {
        kind: TaskKind::KvLookup,
        seed,
        prompt,
        query: vec![
            config.query_token(),
            keys[query] as Token,
            config.answer_token(),
        ],
        target: vec![values[query]],
        metric: Metric::ExactMatch,
    })
}

/// Training view of a task: the concatenated token sequence and a mask over
/// positions whose next-token prediction is a target token. Only the target
/// span contributes to the loss.
pub fn training_example(task: &Task) -> (Vec<Token>, Vec<bool>) {
    let pq = task.prompt.len() + task.query.len();
    let t = task.target.len();
    let mut tokens = Vec::with_capacity(pq + t);
    tokens.extend_from_slice(&task.prompt);
    tokens.extend_from_slice(&task.query);
    tokens.extend_from_slice(&task.target);
    let mut mask = vec![false; pq + t];
    for m in mask.iter_mut().take(pq + t - 1).skip(pq - 1) {
        *m = true;
    }
    (tokens, mask)
}

/// Weighted mixture of task generators for teacher training.
#[derive(Debug, Clone)]
pub struct TaskMix {
    pub copy_weight: f64,
    pub kv_lookup_weight: f64,
    pub copy_len: RangeInclusive<usize>,
    pub pairs: RangeInclusive<usize>,
}

impl TaskMix {
    pub fn copy_only(copy_len: RangeInclusive<usize>) -> Self {
        Self {
            copy_weight: 1.0,
            kv_lookup_weight: 0.0,
            copy_len,
            pairs: 2..=2,
        }
    }

    /// Default training mix: mostly reconstruction, some retrieval.
    pub fn default_mix() -> Self {
        Self {
            copy_weight: 0.7,
            kv_lookup_weight: 0.3,
            copy_len: 4..=40,
            pairs: 2..=12,
        }
    }

    pub fn sample(&self, config: &ModelConfig, rng: &mut SplitMix64) -> Result<Task> {
        let total = self.copy_weight + self.kv_lookup_weight;
        let pick = rng.next_f64() * total;
        let seed = rng.next_u64();
        if pick < self.copy_weight {
            let span = self.copy_len.end() - self.copy_len.start() + 1;
            let len = self.copy_len.start() + rng.below(span);
            gen_copy_task(config, seed, len)
        } else {
            let span = self.pairs.end() - self.pairs.start() + 1;
            let n = self.pairs.start() + rng.below(span);
            gen_kv_lookup_task(config, seed, n)
        }
    }
}
