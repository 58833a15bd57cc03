//! Criterion benches for the hot paths: prefill, oracle scoring, and cache
//! append/evict churn.

use std::collections::HashSet;

use criterion::{criterion_group, criterion_main, Criterion};

use kvzap_core::kvcache::{PagedKvCache, DEFAULT_BLOCK_SIZE};
use kvzap_core::model::{init_weights, prefill, Capture, ModelConfig, Token, Weights};
use kvzap_core::rng::SplitMix64;
use kvzap_core::scoring::kvzip_plus_scores;

fn toy_weights() -> Weights<f32> {
    init_weights(&ModelConfig::toy(0)).unwrap()
}

fn random_prompt(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Token> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.below(cfg.data_alphabet()) as Token).collect()
}

fn bench_prefill(c: &mut Criterion) {
    let w = toy_weights();
    let cfg = w.config.clone();
    let prompt = random_prompt(&cfg, 128, 1);
    c.bench_function("prefill_128", |b| {
        b.iter(|| {
            let mut cache =
                PagedKvCache::<f32>::new(cfg.layers, cfg.kv_heads, cfg.head_dim, DEFAULT_BLOCK_SIZE);
            prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap()
        })
    });
}

fn bench_scoring(c: &mut Criterion) {
    let w = toy_weights();
    let cfg = w.config.clone();
    let prompt = random_prompt(&cfg, 64, 2);
    c.bench_function("kvzip_plus_64", |b| {
        b.iter(|| kvzip_plus_scores(&w, &prompt).unwrap())
    });
}

fn bench_cache_churn(c: &mut Criterion) {
    c.bench_function("cache_append_evict_1k", |b| {
        b.iter(|| {
            let mut cache = PagedKvCache::<f32>::new(2, 2, 16, DEFAULT_BLOCK_SIZE);
            for p in 0..1000usize {
                for l in 0..2 {
                    for h in 0..2 {
                        cache.append(l, h, p, vec![0.0; 16], vec![0.0; 16]).unwrap();
                    }
                }
                if p % 64 == 63 {
                    let dead: HashSet<usize> = (p - 63..p - 31).collect();
                    for l in 0..2 {
                        for h in 0..2 {
                            cache.evict(l, h, &dead);
                        }
                    }
                }
            }
            cache.stats().unwrap()
        })
    });
}

criterion_group!(benches, bench_prefill, bench_scoring, bench_cache_churn);
criterion_main!(benches);
