//! Score predictors distilled from the repeat-prompt oracle.
//!
//! A per-layer surrogate maps a hidden state h ∈ R^{D_h} to H per-kv-head
//! log-scores. Training pairs come from extended-prompt runs; the linear
//! variant is fit in closed form (ridge), the MLP variant (one hidden layer
//! of width D_h/8, GELU) with Adam on MSE.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, MAGIC_DATASET, MAGIC_SURROGATE};
use crate::error::{Error, Result};
use crate::model::{Token, Weights};
use crate::numerics::kernels::{gelu, gelu_vjp, matmul};
use crate::numerics::linalg::solve_spd;
use crate::numerics::{Scalar, Tensor};
use crate::rng::SplitMix64;
use crate::scoring::{kvzip_plus_scored_trace, DEFAULT_LOG_FLOOR};

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub train_seeds: Vec<u64>,
    pub val_seeds: Vec<u64>,
    pub tokens_per_prompt: usize,
    pub positions_per_prompt: usize,
    pub log_floor: f64,
}

/// Per-layer (hidden state, log-score) pairs, split by prompt so no prompt
/// contributes to both sides.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub layers: usize,
    pub hidden_dim: usize,
    pub kv_heads: usize,
    /// Per layer: N_train × D_h.
    pub train_x: Vec<Tensor<f64>>,
    /// Per layer: N_train × H.
    pub train_y: Vec<Tensor<f64>>,
    pub val_x: Vec<Tensor<f64>>,
    pub val_y: Vec<Tensor<f64>>,
    pub meta: DatasetMeta,
}

const DATASET_STREAM: u64 = 0xda7a;

fn prompt_for_seed(seed: u64, alphabet: usize, len: usize) -> Vec<Token> {
    let mut rng = SplitMix64::new(seed).derive(DATASET_STREAM);
    (0..len).map(|_| rng.below(alphabet) as Token).collect()
}

/// Run the oracle over one prompt per seed and collect (h, log s⁺) rows at
/// randomly sampled context positions. Deterministic given the seeds.
pub fn generate_dataset<F: Scalar>(
    weights: &Weights<F>,
    train_seeds: &[u64],
    val_seeds: &[u64],
    tokens_per_prompt: usize,
    positions_per_prompt: usize,
) -> Result<PairDataset> {
    let cfg = &weights.config;
    if positions_per_prompt > tokens_per_prompt {
        return Err(Error::Sampling(format!(
            "cannot sample {positions_per_prompt} positions from a {tokens_per_prompt}-token prompt"
        )));
    }
    if train_seeds.iter().any(|s| val_seeds.contains(s)) {
        return Err(Error::Validation(
            "train and validation prompt seeds overlap".into(),
        ));
    }
    let collect = |seeds: &[u64]| -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
        let n = seeds.len() * positions_per_prompt;
        let mut xs = vec![Tensor::<f64>::zeros(vec![n, cfg.hidden_dim]); cfg.layers];
        let mut ys = vec![Tensor::<f64>::zeros(vec![n, cfg.kv_heads]); cfg.layers];
        for (pi, &seed) in seeds.iter().enumerate() {
            let prompt = prompt_for_seed(seed, cfg.data_alphabet(), tokens_per_prompt);
            let (scores, _ext, trace) = kvzip_plus_scored_trace(weights, &prompt)?;
            let logs = scores.to_log(DEFAULT_LOG_FLOOR)?;
            let hidden = trace.hidden.as_ref().expect("trace captured hidden");
            let mut rng = SplitMix64::new(seed).derive(DATASET_STREAM ^ 0x505);
            let picks = rng.sample_distinct(tokens_per_prompt, positions_per_prompt);
            for (ri, &p) in picks.iter().enumerate() {
                let pos = p + 1; // extended-prompt index of context token p
                let row = pi * positions_per_prompt + ri;
                for l in 0..cfg.layers {
                    for (dst, &src) in xs[l].row_mut(row).iter_mut().zip(hidden[l].row(pos)) {
                        *dst = src.to_f64();
                    }
                    for h in 0..cfg.kv_heads {
                        ys[l].set(row, h, logs.at(l, h, pos));
                    }
                }
            }
        }
        Ok((xs, ys))
    };
    let (train_x, train_y) = collect(train_seeds)?;
    let (val_x, val_y) = collect(val_seeds)?;
    Ok(PairDataset {
        layers: cfg.layers,
        hidden_dim: cfg.hidden_dim,
        kv_heads: cfg.kv_heads,
        train_x,
        train_y,
        val_x,
        val_y,
        meta: DatasetMeta {
            train_seeds: train_seeds.to_vec(),
            val_seeds: val_seeds.to_vec(),
            tokens_per_prompt,
            positions_per_prompt,
            log_floor: DEFAULT_LOG_FLOOR,
        },
    })
}

impl PairDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            layers: usize,
            hidden_dim: usize,
            kv_heads: usize,
            provenance: &'a DatasetMeta,
        }
        let meta = serde_json::to_string(&Meta {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            kv_heads: self.kv_heads,
            provenance: &self.meta,
        })?;
        let mut c = Container::new(MAGIC_DATASET, meta);
        for l in 0..self.layers {
            c.push(&format!("layer{l}.train_x"), self.train_x[l].to_f32());
            c.push(&format!("layer{l}.train_y"), self.train_y[l].to_f32());
            c.push(&format!("layer{l}.val_x"), self.val_x[l].to_f32());
            c.push(&format!("layer{l}.val_y"), self.val_y[l].to_f32());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<PairDataset> {
        #[derive(Deserialize)]
        struct Meta {
            layers: usize,
            hidden_dim: usize,
            kv_heads: usize,
            provenance: DatasetMeta,
        }
        let c = Container::load(path, MAGIC_DATASET)?;
        let meta: Meta = serde_json::from_str(&c.meta_json)
            .map_err(|e| Error::Format(format!("bad dataset metadata: {e}")))?;
        let mut out = PairDataset {
            layers: meta.layers,
            hidden_dim: meta.hidden_dim,
            kv_heads: meta.kv_heads,
            train_x: Vec::new(),
            train_y: Vec::new(),
            val_x: Vec::new(),
            val_y: Vec::new(),
            meta: meta.provenance,
        };
        for l in 0..out.layers {
            out.train_x.push(c.tensor(&format!("layer{l}.train_x"))?.to_f64());
            out.train_y.push(c.tensor(&format!("layer{l}.train_y"))?.to_f64());
            out.val_x.push(c.tensor(&format!("layer{l}.val_x"))?.to_f64());
            out.val_y.push(c.tensor(&format!("layer{l}.val_y"))?.to_f64());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Linear,
    Mlp,
}

/// One layer's predictor parameters.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Linear {
        /// D_h × H.
        w: Tensor<f64>,
        b: Vec<f64>,
    },
    Mlp {
        /// D_h × hidden.
        w1: Tensor<f64>,
        b1: Vec<f64>,
        /// hidden × H.
        w2: Tensor<f64>,
        b2: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub kind: SurrogateKind,
    pub hidden_dim: usize,
    pub kv_heads: usize,
    pub layers: Vec<LayerParams>,
}

impl Surrogate {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Log-score per kv-head for one hidden state.
    pub fn predict(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.hidden_dim);
        match &self.layers[layer] {
            LayerParams::Linear { w, b } => {
                let mut out = b.clone();
                for (r, &hv) in h.iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(w.row(r)) {
                        *o += hv * wv;
                    }
                }
                out
            }
            LayerParams::Mlp { w1, b1, w2, b2 } => {
                let mut z = b1.clone();
                for (r, &hv) in h.iter().enumerate() {
                    for (o, &wv) in z.iter_mut().zip(w1.row(r)) {
                        *o += hv * wv;
                    }
                }
                let a: Vec<f64> = z
                    .iter()
                    .map(|&v| crate::numerics::kernels::gelu_scalar(v))
                    .collect();
                let mut out = b2.clone();
                for (r, &av) in a.iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(w2.row(r)) {
                        *o += av * wv;
                    }
                }
                out
            }
        }
    }

    /// Batched prediction: T×D_h → T×H.
    pub fn predict_batch(&self, layer: usize, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match &self.layers[layer] {
            LayerParams::Linear { w, b } => {
                let mut p = matmul(x, w)?;
                for r in 0..p.rows() {
                    for (v, &bv) in p.row_mut(r).iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                Ok(p)
            }
            LayerParams::Mlp { w1, b1, w2, b2 } => {
                let mut z = matmul(x, w1)?;
                for r in 0..z.rows() {
                    for (v, &bv) in z.row_mut(r).iter_mut().zip(b1) {
                        *v += bv;
                    }
                }
                let a = gelu(&z);
                let mut p = matmul(&a, w2)?;
                for r in 0..p.rows() {
                    for (v, &bv) in p.row_mut(r).iter_mut().zip(b2) {
                        *v += bv;
                    }
                }
                Ok(p)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Meta {
            kind: SurrogateKind,
            layers: usize,
            hidden_dim: usize,
            kv_heads: usize,
        }
        let meta = serde_json::to_string(&Meta {
            kind: self.kind,
            layers: self.layers.len(),
            hidden_dim: self.hidden_dim,
            kv_heads: self.kv_heads,
        })?;
        let mut c = Container::new(MAGIC_SURROGATE, meta);
        for (l, p) in self.layers.iter().enumerate() {
            match p {
                LayerParams::Linear { w, b } => {
                    c.push(&format!("layer{l}.w"), w.to_f32());
                    c.push(
                        &format!("layer{l}.b"),
                        Tensor::new(vec![b.len()], b.iter().map(|&v| v as f32).collect())?,
                    );
                }
                LayerParams::Mlp { w1, b1, w2, b2 } => {
                    c.push(&format!("layer{l}.w1"), w1.to_f32());
                    c.push(
                        &format!("layer{l}.b1"),
                        Tensor::new(vec![b1.len()], b1.iter().map(|&v| v as f32).collect())?,
                    );
                    c.push(&format!("layer{l}.w2"), w2.to_f32());
                    c.push(
                        &format!("layer{l}.b2"),
                        Tensor::new(vec![b2.len()], b2.iter().map(|&v| v as f32).collect())?,
                    );
                }
            }
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Surrogate> {
        #[derive(Deserialize)]
        struct Meta {
            kind: SurrogateKind,
            layers: usize,
            hidden_dim: usize,
            kv_heads: usize,
        }
        let c = Container::load(path, MAGIC_SURROGATE)?;
        let meta: Meta = serde_json::from_str(&c.meta_json)
            .map_err(|e| Error::Format(format!("bad surrogate metadata: {e}")))?;
        let vec64 = |t: &Tensor<f32>| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
        let mut layers = Vec::with_capacity(meta.layers);
        for l in 0..meta.layers {
            let p = match meta.kind {
                SurrogateKind::Linear => LayerParams::Linear {
                    w: c.tensor(&format!("layer{l}.w"))?.to_f64(),
                    b: vec64(c.tensor(&format!("layer{l}.b"))?),
                },
                SurrogateKind::Mlp => LayerParams::Mlp {
                    w1: c.tensor(&format!("layer{l}.w1"))?.to_f64(),
                    b1: vec64(c.tensor(&format!("layer{l}.b1"))?),
                    w2: c.tensor(&format!("layer{l}.w2"))?.to_f64(),
                    b2: vec64(c.tensor(&format!("layer{l}.b2"))?),
                },
            };
            p.check(meta.hidden_dim, meta.kv_heads)?;
            layers.push(p);
        }
        Ok(Surrogate {
            kind: meta.kind,
            hidden_dim: meta.hidden_dim,
            kv_heads: meta.kv_heads,
            layers,
        })
    }
}

impl LayerParams {
    fn check(&self, hidden_dim: usize, kv_heads: usize) -> Result<()> {
        let ok = match self {
            LayerParams::Linear { w, b } => {
                w.shape() == [hidden_dim, kv_heads] && b.len() == kv_heads
            }
            LayerParams::Mlp { w1, b1, w2, b2 } => {
                w1.rows() == hidden_dim
                    && w1.cols() == b1.len()
                    && w2.rows() == b1.len()
                    && w2.shape()[1] == kv_heads
                    && b2.len() == kv_heads
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("surrogate parameter shape mismatch".into()))
        }
    }
}

fn column_means(x: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = vec![0.0; d];
    for r in 0..n {
        for (mv, &v) in m.iter_mut().zip(x.row(r)) {
            *mv += v;
        }
    }
    for mv in &mut m {
        *mv /= n as f64;
    }
    m
}

fn center(x: &Tensor<f64>, means: &[f64]) -> Tensor<f64> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(means) {
            *v -= m;
        }
    }
    out
}

/// Closed-form ridge regression on mean-centered features, per layer.
pub fn train_linear(dataset: &PairDataset, ridge_lambda: f64) -> Result<Surrogate> {
    if ridge_lambda < 0.0 {
        return Err(Error::Config(format!(
            "ridge lambda must be non-negative, got {ridge_lambda}"
        )));
    }
    let mut layers = Vec::with_capacity(dataset.layers);
    for l in 0..dataset.layers {
        let x = &dataset.train_x[l];
        let y = &dataset.train_y[l];
        if x.rows() == 0 {
            return Err(Error::Validation("empty training split".into()));
        }
        let x_mean = column_means(x);
        let y_mean = column_means(y);
        let xc = center(x, &x_mean);
        let yc = center(y, &y_mean);
        let mut a = matmul(&xc.transpose(), &xc)?;
        for i in 0..a.rows() {
            let v = a.at(i, i) + ridge_lambda;
            a.set(i, i, v);
        }
        let rhs = matmul(&xc.transpose(), &yc)?;
        let w = solve_spd(&a, &rhs)?;
        // b = ȳ − x̄ᵀW
        let mut b = y_mean.clone();
        for (h, bv) in b.iter_mut().enumerate() {
            for (r, &xm) in x_mean.iter().enumerate() {
                *bv -= xm * w.at(r, h);
            }
        }
        layers.push(LayerParams::Linear { w, b });
    }
    Ok(Surrogate {
        kind: SurrogateKind::Linear,
        hidden_dim: dataset.hidden_dim,
        kv_heads: dataset.kv_heads,
        layers,
    })
}

#[derive(Debug, Clone)]
pub struct MlpHyper {
    /// Hidden width; defaults to D_h/8 when `None`.
    pub hidden: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self {
            hidden: None,
            lr: 1e-3,
            batch: 256,
            max_epochs: 200,
            patience: 5,
            seed: 0,
        }
    }
}

/// MSE loss and parameter gradients of one MLP layer on a batch. Exposed so
/// the gradients can be finite-difference checked.
pub fn mlp_loss_and_grads(
    params: &LayerParams,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
) -> Result<(f64, LayerParams)> {
    let LayerParams::Mlp { w1, b1, w2, b2 } = params else {
        return Err(Error::Validation("mlp_loss_and_grads on linear params".into()));
    };
    let n = x.rows();
    let h = y.cols();
    let mut z = matmul(x, w1)?;
    for r in 0..n {
        for (v, &bv) in z.row_mut(r).iter_mut().zip(b1) {
            *v += bv;
        }
    }
    let a = gelu(&z);
    let mut p = matmul(&a, w2)?;
    for r in 0..n {
        for (v, &bv) in p.row_mut(r).iter_mut().zip(b2) {
            *v += bv;
        }
    }
    let denom = (n * h) as f64;
    let mut loss = 0.0;
    let mut dp = Tensor::<f64>::zeros(vec![n, h]);
    for r in 0..n {
        for c in 0..h {
            let e = p.at(r, c) - y.at(r, c);
            loss += e * e;
            dp.set(r, c, 2.0 * e / denom);
        }
    }
    loss /= denom;
    let dw2 = matmul(&a.transpose(), &dp)?;
    let db2: Vec<f64> = (0..h).map(|c| (0..n).map(|r| dp.at(r, c)).sum()).collect();
    let da = matmul(&dp, &w2.transpose())?;
    let dz = gelu_vjp(&z, &da);
    let dw1 = matmul(&x.transpose(), &dz)?;
    let db1: Vec<f64> = (0..dz.cols())
        .map(|c| (0..n).map(|r| dz.at(r, c)).sum())
        .collect();
    Ok((
        loss,
        LayerParams::Mlp {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}

fn val_mse(params: &LayerParams, surr_dims: (usize, usize), x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let tmp = Surrogate {
        kind: SurrogateKind::Mlp,
        hidden_dim: surr_dims.0,
        kv_heads: surr_dims.1,
        layers: vec![params.clone()],
    };
    let p = tmp.predict_batch(0, x)?;
    let mut s = 0.0;
    for (a, b) in p.data().iter().zip(y.data()) {
        s += (a - b) * (a - b);
    }
    Ok(s / p.data().len() as f64)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Train one MLP per layer with Adam on MSE, early-stopping on validation MSE.
pub fn train_mlp(dataset: &PairDataset, hyper: &MlpHyper) -> Result<Surrogate> {
    let dh = dataset.hidden_dim;
    let hid = hyper.hidden.unwrap_or_else(|| (dh / 8).max(1));
    let heads = dataset.kv_heads;
    let mut layers = Vec::with_capacity(dataset.layers);
    for l in 0..dataset.layers {
        let x = &dataset.train_x[l];
        let y = &dataset.train_y[l];
        let n = x.rows();
        if n == 0 {
            return Err(Error::Validation("empty training split".into()));
        }
        let mut rng = SplitMix64::new(hyper.seed).derive(0x31 + l as u64);
        let s1 = 1.0 / (dh as f64).sqrt();
        let s2 = 1.0 / (hid as f64).sqrt();
        let mut params = LayerParams::Mlp {
            w1: Tensor::fill_with(vec![dh, hid], || rng.next_normal() * s1),
            b1: vec![0.0; hid],
            w2: Tensor::fill_with(vec![hid, heads], || rng.next_normal() * s2),
            b2: vec![0.0; heads],
        };
        let mut adam = [
            AdamState::new(dh * hid),
            AdamState::new(hid),
            AdamState::new(hid * heads),
            AdamState::new(heads),
        ];
        let mut best = params.clone();
        let mut best_mse = val_mse(&params, (dh, heads), &dataset.val_x[l], &dataset.val_y[l])?;
        let mut stale = 0usize;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..hyper.max_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(hyper.batch.max(1)) {
                let mut bx = Tensor::<f64>::zeros(vec![chunk.len(), dh]);
                let mut by = Tensor::<f64>::zeros(vec![chunk.len(), heads]);
                for (i, &r) in chunk.iter().enumerate() {
                    bx.row_mut(i).copy_from_slice(x.row(r));
                    by.row_mut(i).copy_from_slice(y.row(r));
                }
                let (loss, grads) = mlp_loss_and_grads(&params, &bx, &by)?;
                if !loss.is_finite() {
                    return Err(Error::Training { step: epoch });
                }
                let (LayerParams::Mlp { w1, b1, w2, b2 }, LayerParams::Mlp { w1: g1, b1: gb1, w2: g2, b2: gb2 }) =
                    (&mut params, &grads)
                else {
                    unreachable!()
                };
                adam[0].step(w1.data_mut(), g1.data(), hyper.lr);
                adam[1].step(b1, gb1, hyper.lr);
                adam[2].step(w2.data_mut(), g2.data(), hyper.lr);
                adam[3].step(b2, gb2, hyper.lr);
            }
            let mse = val_mse(&params, (dh, heads), &dataset.val_x[l], &dataset.val_y[l])?;
            if mse < best_mse - 1e-12 {
                best_mse = mse;
                best = params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= hyper.patience {
                    break;
                }
            }
        }
        layers.push(best);
    }
    Ok(Surrogate {
        kind: SurrogateKind::Mlp,
        hidden_dim: dh,
        kv_heads: heads,
        layers,
    })
}

/// Squared Pearson correlation; 0 when either side has zero variance.
pub fn pearson_r2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov * cov) / (va * vb)
}

#[derive(Debug, Clone, Serialize)]
pub struct R2Report {
    /// (layer, head, r²) over validation rows.
    pub per_head: Vec<(usize, usize, f64)>,
    /// Mean over all H·L heads.
    pub mean: f64,
}

impl R2Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,r2\n");
        for &(l, h, r2) in &self.per_head {
            writeln!(out, "{l},{h},{r2}").expect("string write");
        }
        out
    }
}

/// Per-head squared Pearson correlation on the validation split, pooled over
/// rows, plus the mean over all heads.
pub fn evaluate_r2(surrogate: &Surrogate, dataset: &PairDataset) -> Result<R2Report> {
    if dataset.val_x.iter().any(|x| x.rows() == 0) {
        return Err(Error::Validation("empty validation split".into()));
    }
    let mut per_head = Vec::new();
    let mut total = 0.0;
    for l in 0..dataset.layers {
        let p = surrogate.predict_batch(l, &dataset.val_x[l])?;
        let y = &dataset.val_y[l];
        for h in 0..dataset.kv_heads {
            let pc: Vec<f64> = (0..p.rows()).map(|r| p.at(r, h)).collect();
            let yc: Vec<f64> = (0..y.rows()).map(|r| y.at(r, h)).collect();
            let r2 = pearson_r2(&pc, &yc);
            total += r2;
            per_head.push((l, h, r2));
        }
    }
    let mean = total / per_head.len() as f64;
    Ok(R2Report { per_head, mean })
}
