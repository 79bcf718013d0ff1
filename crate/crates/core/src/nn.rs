//! Network building blocks on top of the tensor engine: linear layers,
//! layer norm, multi-head attention, transformer blocks, Adam, and the
//! named-parameter registry used by checkpoints and EMA.

use crate::tensor::{Gradients, Tensor};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

pub type Rng = ChaCha12Rng;

/// Independent deterministic stream for a (seed, purpose, index) triple.
pub fn stream(seed: u64, purpose: &str, index: u64) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x1000_0000_01b3);
    for b in purpose.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    h = (h ^ index).wrapping_mul(0x1000_0000_01b3);
    Rng::seed_from_u64(h)
}

pub fn normal(rng: &mut Rng) -> f64 {
    // Box-Muller; consumes two uniforms per call.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn trunc_normal(rng: &mut Rng, stddev: f64) -> f64 {
    loop {
        let x = normal(rng);
        if x.abs() <= 2.0 {
            return x * stddev;
        }
    }
}

#[derive(Clone, Copy)]
pub enum Init {
    /// Uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)): fan-in variance scaling,
    /// scale 1, uniform distribution.
    FanInUniform,
    /// Xavier/Glorot uniform over (fan_in + fan_out).
    XavierUniform,
    TruncNormal(f64),
    Zeros,
}

pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, init: Init) -> Vec<f64> {
    let n = rows * cols;
    match init {
        Init::FanInUniform => {
            let bound = (3.0 / rows as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        Init::XavierUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        Init::TruncNormal(s) => (0..n).map(|_| trunc_normal(rng, s)).collect(),
        Init::Zeros => vec![0.0; n],
    }
}

/// Ordered list of (name, leaf tensor) pairs. Order is the registration
/// order and is part of the checkpoint contract.
#[derive(Default, Clone)]
pub struct ParamList(pub Vec<(String, Tensor)>);

impl ParamList {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.0.push((name.into(), t.clone()));
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamList) {
        for (name, t) in &other.0 {
            self.0.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.0.iter().map(|(_, t)| t.len()).sum()
    }
}

pub trait HasParams {
    fn collect(&self, prefix: &str, out: &mut ParamList);

    fn params(&self) -> ParamList {
        let mut out = ParamList::default();
        self.collect("", out.by_ref());
        out
    }
}

impl ParamList {
    fn by_ref(&mut self) -> &mut ParamList {
        self
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut Rng, input: usize, output: usize, init: Init) -> Linear {
        Linear {
            weight: Tensor::leaf(&[input, output], init_matrix(rng, input, output, init)),
            bias: Some(Tensor::leaf(&[output], vec![0.0; output])),
        }
    }

    pub fn new_no_bias(rng: &mut Rng, input: usize, output: usize, init: Init) -> Linear {
        Linear {
            weight: Tensor::leaf(&[input, output], init_matrix(rng, input, output, init)),
            bias: None,
        }
    }

    /// x[N,in] -> [N,out]
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_row_vec(b),
            None => y,
        }
    }
}

impl HasParams for Linear {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            out.push(join(prefix, "bias"), b);
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::leaf(&[dim], vec![1.0; dim]),
            beta: Tensor::leaf(&[dim], vec![0.0; dim]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl HasParams for LayerNorm {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push(join(prefix, "gamma"), &self.gamma);
        out.push(join(prefix, "beta"), &self.beta);
    }
}

pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, init: Init) -> MultiHeadAttention {
        assert_eq!(dim % heads, 0, "embed dim {} not divisible by heads {}", dim, heads);
        MultiHeadAttention {
            heads,
            wq: Linear::new(rng, dim, dim, init),
            wk: Linear::new(rng, dim, dim, init),
            wv: Linear::new(rng, dim, dim, init),
            wo: Linear::new(rng, dim, dim, init),
        }
    }

    /// query[Nq,D] attends over kv[Nk,D].
    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Tensor {
        let d = query.cols();
        let dh = d / self.heads;
        let q = self.wq.forward(query);
        let k = self.wk.forward(kv);
        let v = self.wv.forward(kv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let scores = qh.matmul(&kh.transpose2d()).scale(scale);
            let attn = scores.softmax_rows();
            head_outs.push(attn.matmul(&vh));
        }
        self.wo.forward(&Tensor::concat_cols(&head_outs))
    }
}

impl HasParams for MultiHeadAttention {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.wq.collect(&join(prefix, "wq"), out);
        self.wk.collect(&join(prefix, "wk"), out);
        self.wv.collect(&join(prefix, "wv"), out);
        self.wo.collect(&join(prefix, "wo"), out);
    }
}

pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(rng: &mut Rng, dim: usize, hidden: usize, init: Init) -> FeedForward {
        FeedForward {
            fc1: Linear::new(rng, dim, hidden, init),
            fc2: Linear::new(rng, hidden, dim, init),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }
}

impl HasParams for FeedForward {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm transformer block; with `cross` the attention keys/values come
/// from a second input instead of the block input.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, hidden: usize, init: Init) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads, init),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, hidden, init),
        }
    }

    pub fn forward_self(&self, x: &Tensor) -> Tensor {
        let normed = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&normed, &normed));
        x.add(&self.ffn.forward(&self.ln2.forward(&x)))
    }

    pub fn forward_cross(&self, x: &Tensor, kv: &Tensor) -> Tensor {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x), kv));
        x.add(&self.ffn.forward(&self.ln2.forward(&x)))
    }
}

impl HasParams for TransformerBlock {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.ffn.collect(&join(prefix, "ffn"), out);
    }
}

/// Inverted-dropout; identity when `p == 0` or rng is None (eval mode).
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut Rng>) -> Tensor {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            x.mul(&Tensor::from_vec(x.shape(), mask))
        }
        _ => x.clone(),
    }
}

#[derive(Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with per-name state; state maps survive checkpointing.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// Global gradient-norm clip; no clipping when infinite.
    pub max_grad_norm: f64,
    /// Linear learning-rate ramp over the first steps (0 disables).
    pub warmup_steps: u64,
    pub state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            max_grad_norm: f64::INFINITY,
            warmup_steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamList, grads: &Gradients) {
        self.t += 1;
        let t = self.t as f64;
        let lr_t = if self.warmup_steps > 0 && self.t <= self.warmup_steps {
            self.lr * self.t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        };
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let clip = if self.max_grad_norm.is_finite() {
            let mut sq = 0.0;
            for (_, p) in params.iter() {
                if let Some(g) = grads.get(p) {
                    sq += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.max_grad_norm {
                self.max_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        for (name, p) in params.iter() {
            let Some(g) = grads.get(p) else { continue };
            let g = g.data();
            let entry = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            assert_eq!(entry.m.len(), p.len(), "adam state shape changed for {name}");
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, lr_t, self.eps);
            let (m, v) = (&mut entry.m, &mut entry.v);
            p.set_data(|pd| {
                for i in 0..pd.len() {
                    let gi = g[i] * clip;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }
}

/// Exponential moving average of a parameter list, stored by name.
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Vec<f64>>,
}

impl Ema {
    pub fn new(decay: f64, params: &ParamList) -> Ema {
        let shadow = params
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        Ema { decay, shadow }
    }

    pub fn update(&mut self, params: &ParamList) {
        for (name, p) in params.iter() {
            let s = self.shadow.get_mut(name).expect("ema entry missing");
            let d = p.data();
            for i in 0..s.len() {
                s[i] = self.decay * s[i] + (1.0 - self.decay) * d[i];
            }
        }
    }

    /// Copies the shadow values into the given parameters.
    pub fn apply_to(&self, params: &ParamList) {
        for (name, p) in params.iter() {
            if let Some(s) = self.shadow.get(name) {
                p.assign(s);
            }
        }
    }
}
