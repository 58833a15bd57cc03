//! Eviction policies: turn importance scores into keep/evict decisions at
//! prefill time and, for the threshold policy, during decoding via a
//! sliding-window score buffer.
//!
//! Position 0 (the attention sink) and the most recent `window` positions are
//! never evicted. Everything else is fair game, policy permitting.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CacheStats, PagedKvCache};
use crate::model::{ForwardTrace, Token, Weights};
use crate::numerics::{Scalar, Tensor};
use crate::rng::SplitMix64;
use crate::scoring::{kvzip_plus_scores, kvzip_scores, ScoreTensor};
use crate::surrogate::Surrogate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Kvzip,
    KvzipPlus,
}

/// Eviction policy configuration. The threshold and top-k variants score
/// positions with a surrogate passed alongside.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Full,
    Random { ratio: f64, seed: u64 },
    WindowOnly { window: usize },
    TopKPerHead { ratio: f64, window: usize },
    TopKPerLayer { ratio: f64, window: usize },
    KvzipBudget { ratio: f64, scorer: ScorerKind },
    Kvzap { tau: f64, window: usize },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        let ratio = match self {
            Policy::Random { ratio, .. }
            | Policy::TopKPerHead { ratio, .. }
            | Policy::TopKPerLayer { ratio, .. }
            | Policy::KvzipBudget { ratio, .. } => Some(*ratio),
            _ => None,
        };
        if let Some(r) = ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("ratio must be in [0,1), got {r}")));
            }
        }
        if let Policy::Kvzap { tau, .. } = self {
            if !tau.is_finite() {
                return Err(Error::Config(format!("tau must be finite, got {tau}")));
            }
        }
        Ok(())
    }

    /// Whether the policy needs a surrogate attached.
    pub fn needs_surrogate(&self) -> bool {
        matches!(
            self,
            Policy::TopKPerHead { .. } | Policy::TopKPerLayer { .. } | Policy::Kvzap { .. }
        )
    }

    pub fn window(&self) -> usize {
        match self {
            Policy::WindowOnly { window }
            | Policy::TopKPerHead { window, .. }
            | Policy::TopKPerLayer { window, .. }
            | Policy::Kvzap { window, .. } => *window,
            _ => 0,
        }
    }

    /// Short label for CSV rows.
    pub fn descriptor(&self) -> String {
        match self {
            Policy::Full => "full".into(),
            Policy::Random { .. } => "random".into(),
            Policy::WindowOnly { .. } => "window_only".into(),
            Policy::TopKPerHead { .. } => "topk_per_head".into(),
            Policy::TopKPerLayer { .. } => "topk_per_layer".into(),
            Policy::KvzipBudget { .. } => "kvzip_budget".into(),
            Policy::Kvzap { .. } => "kvzap".into(),
        }
    }
}

/// Serialized run-config form. The kvzap variant references its surrogate
/// checkpoint by path; the loader resolves it.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicyConfig {
    Full,
    Random { ratio: f64, seed: u64 },
    WindowOnly { window: usize },
    TopkPerHead { ratio: f64, window: usize, surrogate: String },
    TopkPerLayer { ratio: f64, window: usize, surrogate: String },
    KvzipBudget { ratio: f64, scorer: ScorerKind },
    Kvzap { tau: f64, window: usize, surrogate: String },
}

// Serde ignores `deny_unknown_fields` on internally tagged enums, so unknown
// keys are rejected by hand: strip the tag, then parse the remainder through
// per-variant bodies that do enforce it.
impl<'de> Deserialize<'de> for PolicyConfig {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as _;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Empty {}
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RandomBody {
            ratio: f64,
            seed: u64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct WindowBody {
            window: usize,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct TopkBody {
            ratio: f64,
            window: usize,
            surrogate: String,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct BudgetBody {
            ratio: f64,
            scorer: ScorerKind,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct KvzapBody {
            tau: f64,
            window: usize,
            surrogate: String,
        }

        let mut value = serde_json::Value::deserialize(deserializer)?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| D::Error::custom("policy config must be a JSON object"))?;
        let tag = map
            .remove("policy")
            .ok_or_else(|| D::Error::missing_field("policy"))?;
        let tag = tag
            .as_str()
            .ok_or_else(|| D::Error::custom("`policy` must be a string"))?
            .to_owned();
        let body = serde_json::Value::Object(std::mem::take(map));
        let cfg = match tag.as_str() {
            "full" => {
                serde_json::from_value::<Empty>(body).map_err(D::Error::custom)?;
                PolicyConfig::Full
            }
            "random" => {
                let b: RandomBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::Random { ratio: b.ratio, seed: b.seed }
            }
            "window_only" => {
                let b: WindowBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::WindowOnly { window: b.window }
            }
            "topk_per_head" => {
                let b: TopkBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::TopkPerHead {
                    ratio: b.ratio,
                    window: b.window,
                    surrogate: b.surrogate,
                }
            }
            "topk_per_layer" => {
                let b: TopkBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::TopkPerLayer {
                    ratio: b.ratio,
                    window: b.window,
                    surrogate: b.surrogate,
                }
            }
            "kvzip_budget" => {
                let b: BudgetBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::KvzipBudget { ratio: b.ratio, scorer: b.scorer }
            }
            "kvzap" => {
                let b: KvzapBody = serde_json::from_value(body).map_err(D::Error::custom)?;
                PolicyConfig::Kvzap {
                    tau: b.tau,
                    window: b.window,
                    surrogate: b.surrogate,
                }
            }
            other => {
                return Err(D::Error::unknown_variant(
                    other,
                    &[
                        "full",
                        "random",
                        "window_only",
                        "topk_per_head",
                        "topk_per_layer",
                        "kvzip_budget",
                        "kvzap",
                    ],
                ))
            }
        };
        Ok(cfg)
    }
}

impl PolicyConfig {
    pub fn to_policy(&self) -> Policy {
        match *self {
            PolicyConfig::Full => Policy::Full,
            PolicyConfig::Random { ratio, seed } => Policy::Random { ratio, seed },
            PolicyConfig::WindowOnly { window } => Policy::WindowOnly { window },
            PolicyConfig::TopkPerHead { ratio, window, .. } => {
                Policy::TopKPerHead { ratio, window }
            }
            PolicyConfig::TopkPerLayer { ratio, window, .. } => {
                Policy::TopKPerLayer { ratio, window }
            }
            PolicyConfig::KvzipBudget { ratio, scorer } => Policy::KvzipBudget { ratio, scorer },
            PolicyConfig::Kvzap { tau, window, .. } => Policy::Kvzap { tau, window },
        }
    }

    pub fn surrogate_path(&self) -> Option<&str> {
        match self {
            PolicyConfig::TopkPerHead { surrogate, .. }
            | PolicyConfig::TopkPerLayer { surrogate, .. }
            | PolicyConfig::Kvzap { surrogate, .. } => Some(surrogate),
            _ => None,
        }
    }
}

/// Positions that are never evicted at prefill: BOS plus the trailing window.
fn forced_keep(n: usize, window: usize) -> HashSet<usize> {
    let mut keep: HashSet<usize> = (n.saturating_sub(window)..n).collect();
    keep.insert(0);
    keep
}

fn eligible(n: usize, window: usize) -> Vec<usize> {
    (1..n.saturating_sub(window)).collect()
}

/// Sort candidates best-first: higher score wins; ties keep the later
/// position; remaining ties resolve by head index for determinism.
fn rank_desc(cands: &mut [(usize, usize, f64)]) {
    cands.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite scores")
            .then(b.1.cmp(&a.1))
            .then(b.0.cmp(&a.0))
    });
}

fn check_surrogate<F: Scalar>(weights: &Weights<F>, surrogate: &Surrogate) -> Result<()> {
    let cfg = &weights.config;
    if surrogate.n_layers() != cfg.layers
        || surrogate.hidden_dim != cfg.hidden_dim
        || surrogate.kv_heads != cfg.kv_heads
    {
        return Err(Error::Validation(format!(
            "surrogate shape (L={}, D_h={}, H={}) does not match model (L={}, D_h={}, H={})",
            surrogate.n_layers(),
            surrogate.hidden_dim,
            surrogate.kv_heads,
            cfg.layers,
            cfg.hidden_dim,
            cfg.kv_heads
        )));
    }
    Ok(())
}

/// Per-layer T×H surrogate log-score predictions from a captured trace.
pub fn surrogate_predictions<F: Scalar>(
    surrogate: &Surrogate,
    trace: &ForwardTrace<F>,
    n: usize,
) -> Result<Vec<Tensor<f64>>> {
    let hidden = trace
        .hidden
        .as_ref()
        .ok_or_else(|| Error::MissingTrace("policy requires hidden states in the trace".into()))?;
    let mut preds = Vec::with_capacity(hidden.len());
    for (l, h) in hidden.iter().enumerate() {
        if h.rows() != n {
            return Err(Error::Validation(format!(
                "trace covers {} positions, prompt has {n}",
                h.rows()
            )));
        }
        preds.push(surrogate.predict_batch(l, &h.to_f64())?);
    }
    Ok(preds)
}

fn require_surrogate<'a>(surrogate: Option<&'a Surrogate>, policy: &Policy) -> Result<&'a Surrogate> {
    surrogate.ok_or_else(|| {
        Error::Config(format!(
            "policy '{}' requires a surrogate",
            policy.descriptor()
        ))
    })
}

/// Apply a policy to a freshly prefilled cache. `trace` must carry hidden
/// states for the surrogate-backed policies.
pub fn prefill_compress<F: Scalar>(
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    weights: &Weights<F>,
    prompt: &[Token],
    trace: &ForwardTrace<F>,
    cache: &mut PagedKvCache<F>,
) -> Result<CacheStats> {
    policy.validate()?;
    let cfg = &weights.config;
    let n = prompt.len();
    let heads = cfg.kv_heads;
    let mut evict: Vec<HashSet<usize>> = vec![HashSet::new(); cfg.layers * heads];

    match policy {
        Policy::Full => {}
        Policy::Random { ratio, seed } => {
            let elig = eligible(n, 0);
            let count = (ratio * elig.len() as f64).round() as usize;
            for l in 0..cfg.layers {
                for h in 0..heads {
                    let mut rng = SplitMix64::new(*seed).derive((l * heads + h) as u64);
                    for i in rng.sample_distinct(elig.len(), count.min(elig.len())) {
                        evict[l * heads + h].insert(elig[i]);
                    }
                }
            }
        }
        Policy::WindowOnly { window } => {
            let elig = eligible(n, *window);
            for set in &mut evict {
                set.extend(elig.iter().copied());
            }
        }
        Policy::TopKPerHead { ratio, window } => {
            let surr = require_surrogate(surrogate, policy)?;
            check_surrogate(weights, surr)?;
            let preds = surrogate_predictions(surr, trace, n)?;
            let forced = forced_keep(n, *window);
            let target = ((1.0 - ratio) * n as f64).ceil() as usize;
            let extra = target.saturating_sub(forced.len());
            for l in 0..cfg.layers {
                for h in 0..heads {
                    let mut cands: Vec<(usize, usize, f64)> = eligible(n, *window)
                        .into_iter()
                        .map(|p| (h, p, preds[l].at(p, h)))
                        .collect();
                    rank_desc(&mut cands);
                    for &(_, p, _) in cands.iter().skip(extra) {
                        evict[l * heads + h].insert(p);
                    }
                }
            }
        }
        Policy::TopKPerLayer { ratio, window } => {
            let surr = require_surrogate(surrogate, policy)?;
            check_surrogate(weights, surr)?;
            let preds = surrogate_predictions(surr, trace, n)?;
            let forced = forced_keep(n, *window);
            let target = ((1.0 - ratio) * (n * heads) as f64).ceil() as usize;
            let extra = target.saturating_sub(forced.len() * heads);
            for l in 0..cfg.layers {
                let mut cands: Vec<(usize, usize, f64)> = Vec::new();
                for h in 0..heads {
                    for p in eligible(n, *window) {
                        cands.push((h, p, preds[l].at(p, h)));
                    }
                }
                rank_desc(&mut cands);
                for &(h, p, _) in cands.iter().skip(extra) {
                    evict[l * heads + h].insert(p);
                }
            }
        }
        Policy::KvzipBudget { ratio, scorer } => {
            // score the contiguous data span after BOS; scaffolding tokens
            // (everything from the first reserved token on) are force-kept
            let data_end = (1..n)
                .find(|&i| cfg.is_reserved(prompt[i]))
                .unwrap_or(n);
            if data_end > 1 {
                let data = &prompt[1..data_end];
                let scores: ScoreTensor = match scorer {
                    ScorerKind::Kvzip => kvzip_scores(weights, data)?,
                    ScorerKind::KvzipPlus => kvzip_plus_scores(weights, data)?,
                };
                // global pool over layers, heads and scored positions
                let mut cands: Vec<(usize, usize, f64)> = Vec::new();
                for l in 0..cfg.layers {
                    for h in 0..heads {
                        for p in 1..data_end {
                            cands.push((l * heads + h, p, scores.at(l, h, p)));
                        }
                    }
                }
                let target = ((1.0 - ratio) * cands.len() as f64).ceil() as usize;
                rank_desc(&mut cands);
                for &(slot, p, _) in cands.iter().skip(target) {
                    evict[slot].insert(p);
                }
            }
        }
        Policy::Kvzap { tau, window } => {
            let surr = require_surrogate(surrogate, policy)?;
            check_surrogate(weights, surr)?;
            let preds = surrogate_predictions(surr, trace, n)?;
            for l in 0..cfg.layers {
                for h in 0..heads {
                    for p in eligible(n, *window) {
                        if preds[l].at(p, h) < *tau {
                            evict[l * heads + h].insert(p);
                        }
                    }
                }
            }
        }
    }

    for l in 0..cfg.layers {
        for h in 0..heads {
            let set = &evict[l * heads + h];
            if !set.is_empty() {
                cache.evict(l, h, set);
            }
        }
    }
    cache.stats()
}

/// Per-(layer, head) ring of the last `window` positions' scores, consulted
/// when a position exits the sliding window during decoding.
#[derive(Debug, Clone)]
pub struct DecodeScoreBuffer {
    layers: usize,
    heads: usize,
    window: usize,
    rings: Vec<VecDeque<(usize, f64)>>,
}

impl DecodeScoreBuffer {
    pub fn new(layers: usize, heads: usize, window: usize) -> Self {
        Self {
            layers,
            heads,
            window,
            rings: vec![VecDeque::new(); layers * heads],
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self, layer: usize, head: usize) -> usize {
        self.rings[layer * self.heads + head].len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.iter().all(|r| r.is_empty())
    }

    /// Push a scored position; returns the entry expelled from the window,
    /// if any.
    fn push(&mut self, layer: usize, head: usize, position: usize, score: f64) -> Option<(usize, f64)> {
        let ring = &mut self.rings[layer * self.heads + head];
        ring.push_back((position, score));
        if ring.len() > self.window {
            ring.pop_front()
        } else {
            None
        }
    }
}

/// Fill the buffer with the trailing `window` prefill positions so they become
/// evictable as decoding pushes them out of the window. Only the threshold
/// and window-only policies carry decode-time state.
pub fn seed_buffer_from_prefill<F: Scalar>(
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    weights: &Weights<F>,
    trace: &ForwardTrace<F>,
    prompt_len: usize,
    buffer: &mut DecodeScoreBuffer,
) -> Result<()> {
    let start = prompt_len.saturating_sub(buffer.window);
    match policy {
        Policy::Kvzap { .. } => {
            let surr = require_surrogate(surrogate, policy)?;
            let preds = surrogate_predictions(surr, trace, prompt_len)?;
            for l in 0..buffer.layers {
                for h in 0..buffer.heads {
                    for p in start..prompt_len {
                        let expelled = buffer.push(l, h, p, preds[l].at(p, h));
                        debug_assert!(expelled.is_none());
                    }
                }
            }
        }
        Policy::WindowOnly { .. } => {
            let _ = weights;
            for l in 0..buffer.layers {
                for h in 0..buffer.heads {
                    for p in start..prompt_len {
                        buffer.push(l, h, p, 0.0);
                    }
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Score the newly decoded position and return, per (layer, head), the
/// positions to evict: entries expelled from the window whose buffered score
/// falls below tau (threshold policy) or unconditionally (window-only).
/// Static policies return empty sets.
pub fn decode_update(
    policy: &Policy,
    surrogate: Option<&Surrogate>,
    buffer: &mut DecodeScoreBuffer,
    new_position: usize,
    hidden: &[Vec<f64>],
) -> Result<Vec<HashSet<usize>>> {
    let mut out = vec![HashSet::new(); buffer.layers * buffer.heads];
    match policy {
        Policy::Kvzap { tau, .. } => {
            let surr = require_surrogate(surrogate, policy)?;
            if hidden.len() != buffer.layers {
                return Err(Error::Validation(format!(
                    "hidden states cover {} layers, buffer expects {}",
                    hidden.len(),
                    buffer.layers
                )));
            }
            for l in 0..buffer.layers {
                let scores = surr.predict(l, &hidden[l]);
                for h in 0..buffer.heads {
                    if let Some((p, s)) = buffer.push(l, h, new_position, scores[h]) {
                        if p != 0 && s < *tau {
                            out[l * buffer.heads + h].insert(p);
                        }
                    }
                }
            }
        }
        Policy::WindowOnly { .. } => {
            for l in 0..buffer.layers {
                for h in 0..buffer.heads {
                    if let Some((p, _)) = buffer.push(l, h, new_position, 0.0) {
                        if p != 0 {
                            out[l * buffer.heads + h].insert(p);
                        }
                    }
                }
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Accounting snapshot; the aggregate removed fraction is the
/// appended-weighted mean over heads by construction.
pub fn compression_report<F: Scalar>(cache: &PagedKvCache<F>) -> Result<CacheStats> {
    cache.stats()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::DEFAULT_BLOCK_SIZE;
    use crate::model::{init_weights, prefill, Capture, ModelConfig};
    use crate::surrogate::{LayerParams, SurrogateKind};

    fn tiny_weights(seed: u64) -> Weights<f64> {
        init_weights(&ModelConfig::tiny(seed)).unwrap()
    }

    fn new_cache(cfg: &ModelConfig) -> PagedKvCache<f64> {
        PagedKvCache::new(cfg.layers, cfg.kv_heads, cfg.head_dim, DEFAULT_BLOCK_SIZE)
    }

    fn random_prompt(rng: &mut SplitMix64, cfg: &ModelConfig, n: usize) -> Vec<Token> {
        let mut p = vec![cfg.bos()];
        p.extend((1..n).map(|_| rng.below(cfg.data_alphabet()) as Token));
        p
    }

    /// Linear surrogate with random weights; predictions vary by position.
    fn random_surrogate(cfg: &ModelConfig, seed: u64) -> Surrogate {
        let mut rng = SplitMix64::new(seed);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::Linear {
                w: Tensor::fill_with(vec![cfg.hidden_dim, cfg.kv_heads], || rng.next_normal()),
                b: (0..cfg.kv_heads).map(|_| rng.next_normal()).collect(),
            })
            .collect();
        Surrogate {
            kind: SurrogateKind::Linear,
            hidden_dim: cfg.hidden_dim,
            kv_heads: cfg.kv_heads,
            layers,
        }
    }

    #[test]
    fn tau_below_floor_evicts_nothing() {
        let w = tiny_weights(1);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 2);
        let mut rng = SplitMix64::new(3);
        let prompt = random_prompt(&mut rng, &cfg, 20);
        let mut cache = new_cache(&cfg);
        let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
        let policy = Policy::Kvzap { tau: -1e6, window: 4 };
        let stats = prefill_compress(&policy, Some(&surr), &w, &prompt, &trace, &mut cache).unwrap();
        assert_eq!(stats.removed_fraction, 0.0);
    }

    #[test]
    fn huge_tau_leaves_only_window_and_bos() {
        let w = tiny_weights(1);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 2);
        let mut rng = SplitMix64::new(4);
        let n = 24;
        let window = 8;
        let prompt = random_prompt(&mut rng, &cfg, n);
        let mut cache = new_cache(&cfg);
        let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
        let policy = Policy::Kvzap { tau: 1e9, window };
        let stats = prefill_compress(&policy, Some(&surr), &w, &prompt, &trace, &mut cache).unwrap();
        let expected = (n - window - 1) as f64 / n as f64;
        assert!((stats.removed_fraction - expected).abs() < 1e-12);
        for l in 0..cfg.layers {
            for h in 0..cfg.kv_heads {
                let live = cache.live_positions(l, h);
                assert_eq!(live[0], 0);
                assert_eq!(live[1..], (n - window..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn topk_tie_breaks_toward_later_position() {
        let mut cands = vec![(0, 1, 1.0), (0, 2, 2.0), (0, 3, 2.0), (0, 4, 3.0)];
        rank_desc(&mut cands);
        let kept: Vec<usize> = cands.iter().take(2).map(|c| c.1).collect();
        assert_eq!(kept, vec![4, 3], "later position wins the tie");
    }

    #[test]
    fn topk_keeps_half_of_simple_ramp() {
        // scores [1,2,3,4] at ratio 0.5, w=0 keep the positions of {3,4}
        let mut cands = vec![(0, 0, 1.0), (0, 1, 2.0), (0, 2, 3.0), (0, 3, 4.0)];
        rank_desc(&mut cands);
        let kept: HashSet<usize> = cands.iter().take(2).map(|c| c.1).collect();
        assert_eq!(kept, HashSet::from([2, 3]));
    }

    #[test]
    fn kvzip_budget_matches_global_sort_oracle() {
        let w = tiny_weights(7);
        let cfg = w.config.clone();
        let mut rng = SplitMix64::new(8);
        let prompt = random_prompt(&mut rng, &cfg, 10);
        let mut cache = new_cache(&cfg);
        let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::NONE).unwrap();
        let ratio = 0.4;
        let policy = Policy::KvzipBudget { ratio, scorer: ScorerKind::Kvzip };
        prefill_compress(&policy, None, &w, &prompt, &trace, &mut cache).unwrap();

        // oracle: flatten all (layer, head, position) scores, sort, keep top
        let scores = kvzip_scores(&w, &prompt[1..]).unwrap();
        let mut pool: Vec<(usize, usize, usize, f64)> = Vec::new();
        for l in 0..cfg.layers {
            for h in 0..cfg.kv_heads {
                for p in 1..prompt.len() {
                    pool.push((l, h, p, scores.at(l, h, p)));
                }
            }
        }
        pool.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap()
                .then(b.2.cmp(&a.2))
                .then((b.0, b.1).cmp(&(a.0, a.1)))
        });
        let keep_n = ((1.0 - ratio) * pool.len() as f64).ceil() as usize;
        let mut want: Vec<HashSet<usize>> = vec![HashSet::from([0]); cfg.layers * cfg.kv_heads];
        for &(l, h, p, _) in pool.iter().take(keep_n) {
            want[l * cfg.kv_heads + h].insert(p);
        }
        for l in 0..cfg.layers {
            for h in 0..cfg.kv_heads {
                let live: HashSet<usize> = cache.live_positions(l, h).into_iter().collect();
                assert_eq!(live, want[l * cfg.kv_heads + h], "({l},{h})");
            }
        }
    }

    #[test]
    fn threshold_monotonicity() {
        let w = tiny_weights(11);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 12);
        let mut rng = SplitMix64::new(13);
        let prompt = random_prompt(&mut rng, &cfg, 14);
        let mut kept_sets: Vec<Vec<HashSet<usize>>> = Vec::new();
        let mut fractions = Vec::new();
        for tau in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let mut cache = new_cache(&cfg);
            let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
            let policy = Policy::Kvzap { tau, window: 3 };
            let stats =
                prefill_compress(&policy, Some(&surr), &w, &prompt, &trace, &mut cache).unwrap();
            fractions.push(stats.removed_fraction);
            let mut sets = Vec::new();
            for l in 0..cfg.layers {
                for h in 0..cfg.kv_heads {
                    sets.push(cache.live_positions(l, h).into_iter().collect::<HashSet<_>>());
                }
            }
            kept_sets.push(sets);
        }
        for i in 1..fractions.len() {
            assert!(fractions[i] >= fractions[i - 1], "fraction not monotone");
            for (hi, lo) in kept_sets[i].iter().zip(&kept_sets[i - 1]) {
                assert!(hi.is_subset(lo), "kept set grew with a higher tau");
            }
        }
    }

    #[test]
    fn window_and_bos_survive_every_policy() {
        let w = tiny_weights(17);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 18);
        let mut rng = SplitMix64::new(19);
        let n = 16;
        let window = 4;
        let prompt = random_prompt(&mut rng, &cfg, n);
        let policies = [
            Policy::WindowOnly { window },
            Policy::TopKPerHead { ratio: 0.8, window },
            Policy::TopKPerLayer { ratio: 0.8, window },
            Policy::Kvzap { tau: 1e9, window },
        ];
        for policy in &policies {
            let mut cache = new_cache(&cfg);
            let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
            prefill_compress(policy, Some(&surr), &w, &prompt, &trace, &mut cache).unwrap();
            for l in 0..cfg.layers {
                for h in 0..cfg.kv_heads {
                    let live: HashSet<usize> = cache.live_positions(l, h).into_iter().collect();
                    assert!(live.contains(&0), "{policy:?}: BOS evicted");
                    for p in n - window..n {
                        assert!(live.contains(&p), "{policy:?}: window position {p} evicted");
                    }
                }
            }
        }
    }

    #[test]
    fn kvzap_without_surrogate_is_config_error() {
        let w = tiny_weights(1);
        let cfg = w.config.clone();
        let mut rng = SplitMix64::new(2);
        let prompt = random_prompt(&mut rng, &cfg, 8);
        let mut cache = new_cache(&cfg);
        let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
        let policy = Policy::Kvzap { tau: -2.0, window: 2 };
        assert!(matches!(
            prefill_compress(&policy, None, &w, &prompt, &trace, &mut cache),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kvzap_without_hidden_trace_is_missing_trace() {
        let w = tiny_weights(1);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 2);
        let mut rng = SplitMix64::new(3);
        let prompt = random_prompt(&mut rng, &cfg, 8);
        let mut cache = new_cache(&cfg);
        let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::NONE).unwrap();
        let policy = Policy::Kvzap { tau: -2.0, window: 2 };
        assert!(matches!(
            prefill_compress(&policy, Some(&surr), &w, &prompt, &trace, &mut cache),
            Err(Error::MissingTrace(_))
        ));
    }

    #[test]
    fn first_window_decode_steps_evict_nothing() {
        let cfg = ModelConfig::tiny(0);
        let surr = random_surrogate(&cfg, 1);
        let policy = Policy::Kvzap { tau: 1e9, window: 5 };
        let mut buffer = DecodeScoreBuffer::new(cfg.layers, cfg.kv_heads, 5);
        let hidden = vec![vec![0.1; cfg.hidden_dim]; cfg.layers];
        for pos in 0..5 {
            let sets = decode_update(&policy, Some(&surr), &mut buffer, pos, &hidden).unwrap();
            assert!(sets.iter().all(|s| s.is_empty()), "eviction before window filled");
        }
        let sets = decode_update(&policy, Some(&surr), &mut buffer, 5, &hidden).unwrap();
        assert!(sets.iter().all(|s| s == &HashSet::from([0usize])) || sets.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn decode_matches_offline_replay_oracle() {
        use crate::model::decode_step;
        let w = tiny_weights(23);
        let cfg = w.config.clone();
        let surr = random_surrogate(&cfg, 24);
        for seed in 0..5u64 {
            let mut rng = SplitMix64::new(100 + seed);
            let n = 6 + rng.below(8);
            let steps = 5 + rng.below(10);
            let window = rng.below(4);
            let tau = -0.5 + rng.next_normal();
            let prompt = random_prompt(&mut rng, &cfg, n);
            let policy = Policy::Kvzap { tau, window };

            let mut cache = new_cache(&cfg);
            let (_, trace) = prefill(&w, &prompt, &mut cache, Capture::HIDDEN).unwrap();
            // record the score every position enters with
            let preds = surrogate_predictions(&surr, &trace, n).unwrap();
            let mut entry_scores: Vec<Vec<f64>> =
                (0..cfg.layers * cfg.kv_heads).map(|_| Vec::new()).collect();
            for l in 0..cfg.layers {
                for h in 0..cfg.kv_heads {
                    for p in 0..n {
                        entry_scores[l * cfg.kv_heads + h].push(preds[l].at(p, h));
                    }
                }
            }
            prefill_compress(&policy, Some(&surr), &w, &prompt, &trace, &mut cache).unwrap();
            let mut buffer = DecodeScoreBuffer::new(cfg.layers, cfg.kv_heads, window);
            seed_buffer_from_prefill(&policy, Some(&surr), &w, &trace, n, &mut buffer).unwrap();
            for _ in 0..steps {
                let tok = rng.below(cfg.data_alphabet()) as Token;
                let out = decode_step(&w, tok, &mut cache).unwrap();
                let pos = cache.tokens_seen() - 1;
                let hidden: Vec<Vec<f64>> = out.hidden.clone();
                for l in 0..cfg.layers {
                    let s = surr.predict(l, &hidden[l]);
                    for h in 0..cfg.kv_heads {
                        entry_scores[l * cfg.kv_heads + h].push(s[h]);
                    }
                }
                let sets = decode_update(&policy, Some(&surr), &mut buffer, pos, &hidden).unwrap();
                for l in 0..cfg.layers {
                    for h in 0..cfg.kv_heads {
                        let set = &sets[l * cfg.kv_heads + h];
                        if !set.is_empty() {
                            cache.evict(l, h, set);
                        }
                    }
                }
            }
            // offline oracle over the recorded entry scores
            let total = n + steps;
            for l in 0..cfg.layers {
                for h in 0..cfg.kv_heads {
                    let scores = &entry_scores[l * cfg.kv_heads + h];
                    let want: HashSet<usize> = (0..total)
                        .filter(|&p| p == 0 || p >= total - window || scores[p] >= tau)
                        .collect();
                    let live: HashSet<usize> = cache.live_positions(l, h).into_iter().collect();
                    assert_eq!(live, want, "seed {seed} ({l},{h})");
                }
            }
        }
    }

    #[test]
    fn report_maps_fractions_to_published_factors() {
        // Published rows pair a two-decimal fraction with a one-decimal
        // factor; the unrounded fractions below are consistent with both.
        for (evict_n, rounded_fraction, factor) in
            [(718u64, 0.72f64, 3.5f64), (670, 0.67, 3.0), (630, 0.63, 2.7)]
        {
            let mut cache = PagedKvCache::<f64>::new(1, 1, 4, DEFAULT_BLOCK_SIZE);
            for p in 0..1000 {
                cache
                    .append(0, 0, p, vec![0.0; 4], vec![0.0; 4])
                    .unwrap();
            }
            cache.evict(0, 0, &(0..evict_n as usize).collect());
            let stats = compression_report(&cache).unwrap();
            assert_eq!(
                (stats.removed_fraction * 100.0).round() / 100.0,
                rounded_fraction
            );
            assert!(
                (stats.compression_factor - factor).abs() < 0.05,
                "{} -> {} (want {factor})",
                stats.removed_fraction,
                stats.compression_factor
            );
        }
    }

    #[test]
    fn aggregate_fraction_is_appended_weighted() {
        let mut cache = PagedKvCache::<f64>::new(1, 2, 4, DEFAULT_BLOCK_SIZE);
        for p in 0..10 {
            cache.append(0, 0, p, vec![0.0; 4], vec![0.0; 4]).unwrap();
            cache.append(0, 1, p, vec![0.0; 4], vec![0.0; 4]).unwrap();
        }
        cache.evict(0, 0, &(0..10).collect()); // fraction 1 on head 0
        let stats = compression_report(&cache).unwrap();
        assert_eq!(stats.removed_fraction, 0.5);
        assert_eq!(stats.compression_factor, 2.0);
    }

    #[test]
    fn policy_config_json_round_trip() {
        let json = r#"{"policy":"kvzap","tau":-4.0,"window":128,"surrogate":"path"}"#;
        let cfg: PolicyConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            cfg,
            PolicyConfig::Kvzap {
                tau: -4.0,
                window: 128,
                surrogate: "path".into()
            }
        );
        assert_eq!(cfg.to_policy(), Policy::Kvzap { tau: -4.0, window: 128 });
        assert_eq!(cfg.surrogate_path(), Some("path"));
        let back = serde_json::to_string(&cfg).unwrap();
        let again: PolicyConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(again, cfg);
        // unknown keys rejected
        assert!(serde_json::from_str::<PolicyConfig>(
            r#"{"policy":"full","bogus":1}"#
        )
        .is_err());
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(Policy::Random { ratio: 1.0, seed: 0 }.validate().is_err());
        assert!(Policy::Random { ratio: -0.1, seed: 0 }.validate().is_err());
        assert!(Policy::Kvzap { tau: f64::NAN, window: 4 }.validate().is_err());
    }
}
