//! Bidirectional masked-token transformer over flattened tri-plane index
//! sequences: masked-NLL training with a cosine ratio schedule, iterative
//! confidence decoding (most confident tokens kept each step, the rest
//! re-masked), and discrete / continuous / image conditioning.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{dropout, normal, stream, Adam, Ema, HasParams, Init, LayerNorm, Linear, ParamList, Rng, TransformerBlock};
use crate::sample::{ConditionSpec, ObjectSample};
use crate::stage1::Stage1Model;
use crate::tensor::{backward, no_grad, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Flattened latent token sequence; `mask_id` (= K) marks unknown slots.
/// Layout: row-major cells per plane, planes concatenated xy, xz, yz.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

/// Position of cell (plane, i, j) in the flattened sequence.
pub fn grid_position(n_z: usize, plane: usize, i: usize, j: usize) -> usize {
    plane * n_z * n_z + i * n_z + j
}

/// Latent-grid indices (already plane-major) -> sequence.
pub fn flatten(indices: &[usize], n_z: usize) -> TokenSequence {
    assert_eq!(indices.len(), 3 * n_z * n_z);
    TokenSequence { tokens: indices.to_vec() }
}

/// Sequence -> latent-grid indices; MASK tokens are an error.
pub fn unflatten(seq: &TokenSequence, n_z: usize, mask_id: usize) -> Result<Vec<usize>> {
    if seq.tokens.len() != 3 * n_z * n_z {
        return Err(Error::Shape(format!(
            "sequence length {} does not match 3*{n_z}^2",
            seq.tokens.len()
        )));
    }
    if let Some(pos) = seq.tokens.iter().position(|&t| t == mask_id) {
        return Err(Error::Shape(format!("MASK token at position {pos} cannot be decoded")));
    }
    Ok(seq.tokens.clone())
}

/// Cosine masking schedule: number of tokens still masked after each step,
/// strictly decreasing from `len` to 0 across `steps` steps.
pub fn masked_counts(len: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && len >= steps, "need len >= steps >= 1");
    let mut counts = Vec::with_capacity(steps + 1);
    counts.push(len);
    for t in 1..=steps {
        let ratio = (std::f64::consts::PI * t as f64 / (2.0 * steps as f64)).cos();
        let raw = (ratio * len as f64).floor() as usize;
        let prev = *counts.last().unwrap();
        let c = raw.min(prev.saturating_sub(1)).max(steps - t);
        counts.push(c);
    }
    *counts.last_mut().unwrap() = 0;
    counts
}

/// Masks ceil(ratio * len) uniformly chosen positions; ratio must be in
/// (0, 1].
pub fn mask_tokens(
    seq: &TokenSequence,
    ratio: f64,
    mask_id: usize,
    rng: &mut Rng,
) -> Result<(TokenSequence, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0,1]")));
    }
    let len = seq.tokens.len();
    let n = ((ratio * len as f64).ceil() as usize).clamp(1, len);
    let positions = choose_without_replacement(len, n, rng);
    let mut masked = seq.clone();
    for &p in &positions {
        masked.tokens[p] = mask_id;
    }
    Ok((masked, positions))
}

fn choose_without_replacement(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let mut picked = idx[..n].to_vec();
    picked.sort_unstable();
    picked
}

/// Sine/cosine positional embedding of the object scale, degree frequencies
/// per axis: 3 * degree * 2 values.
pub fn scale_embedding(scale: [f64; 3], degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * degree * 2);
    for &s in &scale {
        for k in 0..degree {
            let f = (1u64 << k) as f64;
            out.push((f * s).sin());
            out.push((f * s).cos());
        }
    }
    out
}

/// How a trained latent sampler consumes conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionLayout {
    /// Unconditional.
    None,
    /// Vocabulary grows by `cardinality`; one extra token is appended to
    /// the sequence (ids K+1 .. K+cardinality).
    Discrete { cardinality: usize },
    /// A projected vector is concatenated to every token's word embedding.
    Continuous { input_dim: usize },
}

#[derive(Clone, Debug)]
pub struct Stage2Dims {
    pub seq_len: usize,
    pub vocab_k: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub cond_proj_dim: usize,
    pub condition: ConditionLayout,
}

impl Stage2Dims {
    pub fn from_config(cfg: &PipelineConfig, condition: ConditionLayout) -> Stage2Dims {
        Stage2Dims {
            seq_len: cfg.sequence_len(),
            vocab_k: cfg.codebook_size,
            layers: cfg.stage2_layers,
            heads: cfg.stage2_heads,
            embed: cfg.stage2_embed,
            hidden: cfg.stage2_hidden,
            dropout: cfg.stage2_dropout,
            label_smoothing: cfg.label_smoothing,
            cond_proj_dim: cfg.cond_proj_dim,
            condition,
        }
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_k
    }

    /// Token-table size: K codebook ids + MASK + optional condition ids.
    pub fn vocab_total(&self) -> usize {
        self.vocab_k
            + 1
            + match self.condition {
                ConditionLayout::Discrete { cardinality } => cardinality,
                _ => 0,
            }
    }

    /// Input sequence length seen by the transformer.
    pub fn seq_total(&self) -> usize {
        self.seq_len + matches!(self.condition, ConditionLayout::Discrete { .. }) as usize
    }

    fn word_dim(&self) -> usize {
        match self.condition {
            ConditionLayout::Continuous { .. } => self.embed - self.cond_proj_dim,
            _ => self.embed,
        }
    }
}

/// Conditioning payload after `encode_condition`.
pub enum PreparedCondition {
    None,
    ExtraToken(usize),
    Vector(Tensor), // [1, input_dim]
}

pub struct Stage2Model {
    pub dims: Stage2Dims,
    word_embed: Tensor, // [vocab_total, word_dim]
    pos_embed: Tensor,  // [seq_total, embed]
    cond_proj: Option<Linear>,
    blocks: Vec<TransformerBlock>,
    out_norm: LayerNorm,
    head: Linear, // embed -> K
}

impl Stage2Model {
    pub fn new(seed: u64, dims: Stage2Dims) -> Stage2Model {
        let mut rng = stream(seed, "stage2", 0);
        let init = Init::TruncNormal(0.02);
        let word_dim = dims.word_dim();
        let word_embed = Tensor::leaf(
            &[dims.vocab_total(), word_dim],
            (0..dims.vocab_total() * word_dim)
                .map(|_| 0.02 * normal(&mut rng))
                .collect(),
        );
        let pos_embed = Tensor::leaf(
            &[dims.seq_total(), dims.embed],
            (0..dims.seq_total() * dims.embed)
                .map(|_| 0.02 * normal(&mut rng))
                .collect(),
        );
        let cond_proj = match dims.condition {
            ConditionLayout::Continuous { input_dim } => {
                Some(Linear::new(&mut rng, input_dim, dims.cond_proj_dim, init))
            }
            _ => None,
        };
        Stage2Model {
            blocks: (0..dims.layers)
                .map(|_| TransformerBlock::new(&mut rng, dims.embed, dims.heads, dims.hidden, init))
                .collect(),
            out_norm: LayerNorm::new(dims.embed),
            head: Linear::new(&mut rng, dims.embed, dims.vocab_k, init),
            word_embed,
            pos_embed,
            cond_proj,
            dims,
        }
    }

    /// Validates a runtime condition against the trained layout and
    /// prepares it for the forward pass.
    pub fn encode_condition(&self, spec: &ConditionSpec) -> Result<PreparedCondition> {
        spec.validate()?;
        match (&self.dims.condition, spec) {
            (ConditionLayout::None, ConditionSpec::None) => Ok(PreparedCondition::None),
            (ConditionLayout::Discrete { cardinality }, ConditionSpec::Discrete { value }) => {
                if value >= cardinality {
                    return Err(Error::Config(format!(
                        "discrete condition {value} outside vocabulary of {cardinality}"
                    )));
                }
                Ok(PreparedCondition::ExtraToken(self.dims.vocab_k + 1 + value))
            }
            (ConditionLayout::Continuous { input_dim }, ConditionSpec::Continuous { vector }) => {
                if vector.len() != *input_dim {
                    return Err(Error::Config(format!(
                        "continuous condition dim {} but model expects {input_dim}",
                        vector.len()
                    )));
                }
                Ok(PreparedCondition::Vector(Tensor::from_vec(&[1, vector.len()], vector.clone())))
            }
            (layout, _) => Err(Error::Config(format!(
                "condition does not match trained layout {layout:?}"
            ))),
        }
    }

    /// Logits [seq_len, K] for a (possibly masked) sequence with optional
    /// conditioning. `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        tokens: &[usize],
        cond: &PreparedCondition,
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        if tokens.len() != self.dims.seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} but model expects {}",
                tokens.len(),
                self.dims.seq_len
            )));
        }
        let mut ids = tokens.to_vec();
        match (cond, &self.dims.condition) {
            (PreparedCondition::ExtraToken(id), ConditionLayout::Discrete { .. }) => {
                ids.push(*id);
            }
            (PreparedCondition::None, ConditionLayout::None) => {}
            (PreparedCondition::Vector(_), ConditionLayout::Continuous { .. }) => {}
            _ => return Err(Error::Config("condition/layout mismatch in forward".into())),
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.dims.vocab_total()) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        let mut x = self.word_embed.gather_rows(&ids);
        if let PreparedCondition::Vector(v) = cond {
            let proj = self
                .cond_proj
                .as_ref()
                .expect("continuous layout has a projection")
                .forward(v); // [1, proj_dim]
            let tiled = proj.reshape(&[self.dims.cond_proj_dim]).broadcast_rows(ids.len());
            x = Tensor::concat_cols(&[x, tiled]);
        }
        x = x.add(&self.pos_embed);
        if let Some(r) = rng.as_deref_mut() {
            x = dropout(&x, self.dims.dropout, Some(r));
        }
        for b in &self.blocks {
            x = b.forward_self(&x);
        }
        let h = self.out_norm.forward(&x);
        Ok(self.head.forward(&h).slice_rows(0, self.dims.seq_len))
    }
}

impl HasParams for Stage2Model {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        let p = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        out.push(p("word_embed"), &self.word_embed);
        out.push(p("pos_embed"), &self.pos_embed);
        if let Some(c) = &self.cond_proj {
            c.collect(&p("cond_proj"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&p(&format!("blocks.{i}")), out);
        }
        self.out_norm.collect(&p("out_norm"), out);
        self.head.collect(&p("head"), out);
    }
}

/// Label-smoothed cross entropy over masked positions only; mean per masked
/// token. Returns zero when no position is masked.
pub fn masked_nll(
    logits: &Tensor,
    targets: &[usize],
    masked_positions: &[usize],
    label_smoothing: f64,
    vocab_k: usize,
) -> Tensor {
    if masked_positions.is_empty() {
        return Tensor::scalar(0.0);
    }
    let logp = logits.log_softmax_rows();
    let rows = logp.gather_rows(masked_positions); // [M, K]
    let m = masked_positions.len();
    let mut weights = vec![label_smoothing / vocab_k as f64; m * vocab_k];
    for (r, &pos) in masked_positions.iter().enumerate() {
        weights[r * vocab_k + targets[pos]] += 1.0 - label_smoothing;
    }
    rows.mul(&Tensor::from_vec(&[m, vocab_k], weights))
        .sum_all()
        .scale(-1.0 / m as f64)
}

pub struct Stage2Trainer {
    pub model: Stage2Model,
    pub opt: Adam,
    pub ema: Ema,
    pub step: u64,
    pub seed: u64,
}

impl Stage2Trainer {
    pub fn new(model: Stage2Model, lr: f64, beta1: f64, beta2: f64, ema_decay: f64, seed: u64) -> Stage2Trainer {
        let ema = Ema::new(ema_decay, &model.params());
        Stage2Trainer {
            opt: Adam::new(lr, beta1, beta2),
            ema,
            model,
            step: 0,
            seed,
        }
    }

    /// One masked-prediction step over a batch of (sequence, condition)
    /// pairs. Per-example mask ratios follow cos(pi r / 2) with uniform r.
    pub fn train_step(
        &mut self,
        batch: &[(TokenSequence, ConditionSpec)],
    ) -> Result<f64> {
        let mask_id = self.model.dims.mask_id();
        let vocab_k = self.model.dims.vocab_k;
        let mut rng = stream(self.seed, "stage2-step", self.step);
        let mut terms = Vec::with_capacity(batch.len());
        for (seq, cond_spec) in batch {
            if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= vocab_k) {
                return Err(Error::Config(format!(
                    "token id {bad} is not a codebook index (vocabulary mismatch with stage 1)"
                )));
            }
            let r: f64 = rng.gen();
            let ratio = (std::f64::consts::FRAC_PI_2 * r).cos().clamp(f64::MIN_POSITIVE, 1.0);
            let (masked, positions) = mask_tokens(seq, ratio, mask_id, &mut rng)?;
            let cond = self.model.encode_condition(cond_spec)?;
            let logits = self.model.forward(&masked.tokens, &cond, Some(&mut rng))?;
            terms.push(masked_nll(
                &logits,
                &seq.tokens,
                &positions,
                self.model.dims.label_smoothing,
                vocab_k,
            ));
        }
        let mut total = Tensor::scalar(0.0);
        for t in &terms {
            total = total.add(t);
        }
        let loss = total.scale(1.0 / batch.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Other(format!("non-finite stage2 loss at step {}", self.step)));
        }
        let params = self.model.params();
        let grads = backward(&loss);
        self.opt.step(&params, &grads);
        self.ema.update(&params);
        self.step += 1;
        Ok(value)
    }
}

/// Iterative confidence decoding: start all-MASK, commit the most confident
/// sampled tokens each step per the cosine schedule. Confidence is the
/// sampled token's log-probability plus Gumbel noise scaled by a linearly
/// annealed temperature (1 -> 0 across steps).
pub fn sample(
    model: &Stage2Model,
    cond: &PreparedCondition,
    steps: usize,
    seed: u64,
) -> Result<TokenSequence> {
    let len = model.dims.seq_len;
    let start = TokenSequence { tokens: vec![model.dims.mask_id(); len] };
    resample(model, cond, start, steps, seed).map(|(seq, _)| seq)
}

/// Like `sample` but starting from a partially observed sequence; committed
/// tokens are preserved exactly. Returns the sequence and the per-step
/// masked counts.
pub fn resample(
    model: &Stage2Model,
    cond: &PreparedCondition,
    start: TokenSequence,
    steps: usize,
    seed: u64,
) -> Result<(TokenSequence, Vec<usize>)> {
    let mask_id = model.dims.mask_id();
    let len = model.dims.seq_len;
    if start.tokens.len() != len {
        return Err(Error::Shape("resample: wrong sequence length".into()));
    }
    let initial_masked = start.tokens.iter().filter(|&&t| t == mask_id).count();
    if initial_masked == 0 {
        return Ok((start, vec![0]));
    }
    let steps = steps.max(1).min(initial_masked);
    let counts = masked_counts(initial_masked, steps);
    let mut rng = stream(seed, "stage2-sample", 0);
    let mut seq = start;
    let mut trace = vec![initial_masked];
    no_grad(|| -> Result<()> {
        for t in 1..=steps {
            let logits = model.forward(&seq.tokens, cond, None)?;
            let data = logits.data();
            let temp = 1.0 - t as f64 / steps as f64;
            // Sample a candidate at every masked position, score confidence.
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new(); // (pos, token, conf)
            for pos in 0..len {
                if seq.tokens[pos] != mask_id {
                    continue;
                }
                let row = &data[pos * model.dims.vocab_k..(pos + 1) * model.dims.vocab_k];
                let (token, logp) = categorical(row, &mut rng);
                let gumbel = -(-(rng.gen::<f64>().max(1e-300)).ln()).ln();
                candidates.push((pos, token, logp + temp * gumbel));
            }
            // Keep the most confident so that counts[t] remain masked.
            let commit = candidates.len().saturating_sub(counts[t]);
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
            for &(pos, token, _) in candidates.iter().take(commit) {
                seq.tokens[pos] = token;
            }
            trace.push(seq.tokens.iter().filter(|&&x| x == mask_id).count());
        }
        Ok(())
    })?;
    debug_assert!(seq.tokens.iter().all(|&t| t != mask_id));
    Ok((seq, trace))
}

/// Softmax-categorical draw from a logit row; returns (index, log-prob).
fn categorical(logits: &[f64], rng: &mut Rng) -> (usize, f64) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        z += (l - mx).exp();
    }
    let lz = mx + z.ln();
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        acc += (l - lz).exp();
        if u < acc {
            return (i, l - lz);
        }
    }
    (logits.len() - 1, logits[logits.len() - 1] - lz)
}

/// Image-conditioned variation: encode + quantize the source through the
/// stage-1 model, mask `mask_ratio` of the tokens and resample them with
/// the stage-2 sampler. Unmasked tokens are preserved exactly.
pub fn vary(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    cond: &PreparedCondition,
    source: &ObjectSample,
    mask_ratio: f64,
    steps: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} outside [0,1]")));
    }
    let enc = no_grad(|| stage1.encode_sample(source))?;
    let seq = flatten(&enc.indices, stage1.config.latent_grid);
    if mask_ratio == 0.0 {
        return Ok(seq);
    }
    let mut rng = stream(seed, "vary-mask", 0);
    let (masked, _positions) = mask_tokens(&seq, mask_ratio, stage2.dims.mask_id(), &mut rng)?;
    resample(stage2, cond, masked, steps, seed).map(|(s, _)| s)
}

/// Encodes a dataset to token sequences with the (EMA) stage-1 model,
/// paired with per-sample condition payloads for the chosen conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    None,
    Class,
    TimeOfDay,
    Scale,
    Semantic,
}

impl ConditionSource {
    pub fn layout(&self, cfg: &PipelineConfig) -> ConditionLayout {
        match self {
            ConditionSource::None => ConditionLayout::None,
            ConditionSource::Class => ConditionLayout::Discrete { cardinality: cfg.n_classes },
            ConditionSource::TimeOfDay => ConditionLayout::Discrete { cardinality: cfg.n_times },
            ConditionSource::Scale => ConditionLayout::Continuous {
                input_dim: 3 * cfg.scale_embed_degree * 2,
            },
            ConditionSource::Semantic => ConditionLayout::Continuous {
                input_dim: cfg.semantic_channels,
            },
        }
    }

    pub fn spec_for(&self, cfg: &PipelineConfig, sample: &ObjectSample) -> ConditionSpec {
        match self {
            ConditionSource::None => ConditionSpec::None,
            ConditionSource::Class => ConditionSpec::Discrete { value: sample.class_label },
            ConditionSource::TimeOfDay => ConditionSpec::Discrete {
                value: sample.time_of_day.index(),
            },
            ConditionSource::Scale => ConditionSpec::Continuous {
                vector: scale_embedding(sample.scale, cfg.scale_embed_degree),
            },
            ConditionSource::Semantic => {
                // Mean semantic feature over object pixels.
                let mut v = vec![0.0; cfg.semantic_channels];
                if let Some(s) = &sample.semantic {
                    let mut n = 0.0;
                    for px in 0..s.h * s.w {
                        if sample.object_mask.data[px] {
                            for c in 0..s.channels.min(cfg.semantic_channels) {
                                v[c] += s.data[px * s.channels + c];
                            }
                            n += 1.0;
                        }
                    }
                    if n > 0.0 {
                        v.iter_mut().for_each(|x| *x /= n);
                    }
                }
                ConditionSpec::Continuous { vector: v }
            }
        }
    }
}

pub fn tokenize_dataset(
    stage1: &Stage1Model,
    samples: &[ObjectSample],
    source: ConditionSource,
) -> Result<Vec<(TokenSequence, ConditionSpec)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = no_grad(|| stage1.encode_sample(s))?;
        out.push((
            flatten(&enc.indices, stage1.config.latent_grid),
            source.spec_for(&stage1.config, s),
        ));
    }
    Ok(out)
}

pub fn save_stage2(path: &Path, trainer: &Stage2Trainer, config: &PipelineConfig, source: ConditionSource) -> Result<()> {
    let mut tensors = std::collections::BTreeMap::new();
    for (name, t) in trainer.model.params().iter() {
        tensors.insert(format!("param.{name}"), (t.shape().to_vec(), t.to_vec()));
    }
    for (name, shadow) in &trainer.ema.shadow {
        tensors.insert(format!("ema.{name}"), (vec![shadow.len()], shadow.clone()));
    }
    for (name, st) in &trainer.opt.state {
        tensors.insert(format!("adam.m.{name}"), (vec![st.m.len()], st.m.clone()));
        tensors.insert(format!("adam.v.{name}"), (vec![st.v.len()], st.v.clone()));
    }
    let header = CheckpointHeader {
        kind: "stage2".into(),
        config: config.clone(),
        step: trainer.step,
        extra: serde_json::json!({
            "condition_source": source,
            "condition_layout": trainer.model.dims.condition,
            "adam_t": trainer.opt.t,
            "seed": trainer.seed,
        }),
    };
    save_checkpoint(path, &Checkpoint { header, tensors })
}

pub fn load_stage2(path: &Path) -> Result<(Stage2Trainer, PipelineConfig, ConditionSource)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.header.kind != "stage2" {
        return Err(Error::Checkpoint(format!(
            "expected a stage2 checkpoint, found kind '{}'",
            ckpt.header.kind
        )));
    }
    let cfg = ckpt.header.config.clone();
    let source: ConditionSource = serde_json::from_value(ckpt.header.extra["condition_source"].clone())?;
    let layout: ConditionLayout = serde_json::from_value(ckpt.header.extra["condition_layout"].clone())?;
    let seed = ckpt.header.extra["seed"].as_u64().unwrap_or(cfg.seed);
    let model = Stage2Model::new(cfg.seed, Stage2Dims::from_config(&cfg, layout));
    let mut trainer = Stage2Trainer::new(
        model,
        cfg.lr_stage2,
        cfg.stage2_beta1,
        cfg.stage2_beta2,
        cfg.ema_decay,
        seed,
    );
    for (name, t) in trainer.model.params().iter() {
        let (dims, data) = ckpt.tensor(&format!("param.{name}"))?;
        if dims != t.shape() {
            return Err(Error::Checkpoint(format!("tensor 'param.{name}' shape mismatch")));
        }
        t.assign(data);
    }
    for (name, shadow) in trainer.ema.shadow.iter_mut() {
        let (_, data) = ckpt.tensor(&format!("ema.{name}"))?;
        shadow.copy_from_slice(data);
    }
    for (name, p) in trainer.model.params().iter() {
        if let Ok((_, m)) = ckpt.tensor(&format!("adam.m.{name}")) {
            let (_, v) = ckpt.tensor(&format!("adam.v.{name}"))?;
            if m.len() != p.len() {
                return Err(Error::Checkpoint(format!("adam state '{name}' shape mismatch")));
            }
            trainer
                .opt
                .state
                .insert(name.clone(), crate::nn::AdamState { m: m.clone(), v: v.clone() });
        }
    }
    trainer.opt.t = ckpt.header.extra["adam_t"].as_u64().unwrap_or(0);
    trainer.step = ckpt.header.step;
    Ok((trainer, cfg, source))
}

/// The sampler with EMA weights applied (sampling-time model).
pub fn load_stage2_ema(path: &Path) -> Result<(Stage2Model, PipelineConfig, ConditionSource)> {
    let (trainer, cfg, source) = load_stage2(path)?;
    trainer.ema.apply_to(&trainer.model.params());
    Ok((trainer.model, cfg, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dims(seq_len: usize, k: usize, condition: ConditionLayout) -> Stage2Dims {
        Stage2Dims {
            seq_len,
            vocab_k: k,
            layers: 2,
            heads: 4,
            embed: 64,
            hidden: 128,
            dropout: 0.0,
            label_smoothing: 0.1,
            cond_proj_dim: 16,
            condition,
        }
    }

    #[test]
    fn schedule_counts_decrease_strictly_to_zero() {
        for (len, steps) in [(768, 10), (192, 8), (16, 4), (48, 8)] {
            let counts = masked_counts(len, steps);
            assert_eq!(counts[0], len);
            assert_eq!(*counts.last().unwrap(), 0);
            for w in counts.windows(2) {
                assert!(w[1] < w[0], "not strictly decreasing: {counts:?}");
            }
            // Newly committed tokens across steps sum to the length.
            let committed: usize = counts.windows(2).map(|w| w[0] - w[1]).sum();
            assert_eq!(committed, len);
        }
    }

    #[test]
    fn flatten_layout_and_round_trip() {
        let n = 8;
        let mut indices = vec![0usize; 3 * n * n];
        for (i, v) in indices.iter_mut().enumerate() {
            *v = (i * 7) % 512;
        }
        let seq = flatten(&indices, n);
        assert_eq!(seq.tokens.len(), 192);
        // Cell (i=2, j=5, plane=1) lands at N^2 + 2N + 5.
        assert_eq!(grid_position(n, 1, 2, 5), n * n + 2 * n + 5);
        assert_eq!(seq.tokens[grid_position(n, 1, 2, 5)], indices[n * n + 2 * n + 5]);
        let back = unflatten(&seq, n, 512).unwrap();
        assert_eq!(back, indices);

        // MASK token refuses to decode.
        let mut masked = seq.clone();
        masked.tokens[3] = 512;
        assert!(unflatten(&masked, n, 512).is_err());
    }

    #[test]
    fn mask_tokens_counts_and_determinism() {
        let seq = TokenSequence { tokens: (0..768).map(|i| i % 64).collect() };
        let mut rng = stream(1, "t", 0);
        let (m, pos) = mask_tokens(&seq, 0.5, 64, &mut rng).unwrap();
        assert_eq!(pos.len(), 384);
        assert_eq!(m.tokens.iter().filter(|&&t| t == 64).count(), 384);

        let mut rng2 = stream(1, "t", 0);
        let (_, pos2) = mask_tokens(&seq, 0.5, 64, &mut rng2).unwrap();
        assert_eq!(pos, pos2);

        let (all, _) = mask_tokens(&seq, 1.0, 64, &mut rng).unwrap();
        assert!(all.tokens.iter().all(|&t| t == 64));

        assert!(mask_tokens(&seq, 0.0, 64, &mut rng).is_err());
    }

    #[test]
    fn uniform_logits_nll_is_log_k() {
        let k = 32;
        let logits = Tensor::zeros(&[16, k]);
        let targets: Vec<usize> = (0..16).map(|i| i % k).collect();
        let positions: Vec<usize> = (0..8).collect();
        let nll = masked_nll(&logits, &targets, &positions, 0.1, k);
        assert!((nll.item() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_positions_get_zero_logit_gradient() {
        let k = 8;
        let len = 6;
        let logits = Tensor::leaf(
            &[len, k],
            (0..len * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect(),
        );
        let targets: Vec<usize> = (0..len).map(|i| i % k).collect();
        let positions = vec![1, 4];
        let nll = masked_nll(&logits, &targets, &positions, 0.1, k);
        let g = backward(&nll).wrt(&logits).to_vec();
        for pos in 0..len {
            let row = &g[pos * k..(pos + 1) * k];
            let norm: f64 = row.iter().map(|v| v * v).sum();
            if positions.contains(&pos) {
                assert!(norm > 0.0, "masked position {pos} should have gradient");
            } else {
                assert_eq!(norm, 0.0, "unmasked position {pos} leaked gradient");
            }
        }
    }

    fn toy_sequence(len: usize, k: usize) -> TokenSequence {
        TokenSequence { tokens: (0..len).map(|i| (3 * i + 1) % k).collect() }
    }

    #[test]
    fn toy_task_reaches_high_masked_accuracy_and_exact_sampling() {
        let (len, k) = (16, 12);
        let model = Stage2Model::new(0, toy_dims(len, k, ConditionLayout::None));
        let mut tr = Stage2Trainer::new(model, 3e-3, 0.9, 0.96, 0.999, 7);
        let seq = toy_sequence(len, k);
        for _ in 0..400 {
            tr.train_step(&[(seq.clone(), ConditionSpec::None)]).unwrap();
        }
        // Masked-token accuracy: mask half, predict, compare argmax.
        let mut rng = stream(99, "acc", 0);
        let mut correct = 0;
        let mut total = 0;
        for _ in 0..20 {
            let (masked, pos) = mask_tokens(&seq, 0.5, tr.model.dims.mask_id(), &mut rng).unwrap();
            let logits = tr
                .model
                .forward(&masked.tokens, &PreparedCondition::None, None)
                .unwrap();
            let data = logits.data();
            for &p in &pos {
                let row = &data[p * k..(p + 1) * k];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == seq.tokens[p] {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "masked accuracy {acc}");

        // Full sampling reproduces the ground truth exactly.
        let out = sample(&tr.model, &PreparedCondition::None, 4, 5).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn sampling_commits_monotonically_and_fills_sequence() {
        let (len, k) = (16, 12);
        let model = Stage2Model::new(3, toy_dims(len, k, ConditionLayout::None));
        let start = TokenSequence { tokens: vec![model.dims.mask_id(); len] };
        let (seq, trace) = resample(&model, &PreparedCondition::None, start, 5, 11).unwrap();
        assert!(seq.tokens.iter().all(|&t| t < k));
        for w in trace.windows(2) {
            assert!(w[1] < w[0], "masked count must shrink: {trace:?}");
        }
        assert_eq!(*trace.last().unwrap(), 0);

        // T=1 commits everything in one pass.
        let start = TokenSequence { tokens: vec![model.dims.mask_id(); len] };
        let (one, trace1) = resample(&model, &PreparedCondition::None, start, 1, 2).unwrap();
        assert_eq!(trace1, vec![len, 0]);
        assert!(one.tokens.iter().all(|&t| t < k));
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let (len, k) = (16, 12);
        let model = Stage2Model::new(4, toy_dims(len, k, ConditionLayout::None));
        let a = sample(&model, &PreparedCondition::None, 4, 9).unwrap();
        let b = sample(&model, &PreparedCondition::None, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = sample(&model, &PreparedCondition::None, 4, 10).unwrap();
        assert!(a != c || len < 4, "different seeds should usually differ");
    }

    #[test]
    fn discrete_condition_vocabulary_layout() {
        let (len, k) = (16, 32);
        let model = Stage2Model::new(5, toy_dims(len, k, ConditionLayout::Discrete { cardinality: 4 }));
        // Class 2 of 4 appends token id K+1+2 with MASK = K.
        let prepared = model
            .encode_condition(&ConditionSpec::Discrete { value: 2 })
            .unwrap();
        match prepared {
            PreparedCondition::ExtraToken(id) => assert_eq!(id, k + 1 + 2),
            _ => panic!("expected extra token"),
        }
        assert_eq!(model.dims.mask_id(), k);
        assert_eq!(model.dims.vocab_total(), k + 1 + 4);
        assert_eq!(model.dims.seq_total(), len + 1);
        assert!(model
            .encode_condition(&ConditionSpec::Discrete { value: 4 })
            .is_err());
    }

    #[test]
    fn scale_embedding_has_36_components() {
        let e = scale_embedding([4.0, 2.0, 1.5], 6);
        assert_eq!(e.len(), 36);
        // First axis, degree 0: sin(4), cos(4).
        assert!((e[0] - 4.0f64.sin()).abs() < 1e-12);
        assert!((e[1] - 4.0f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn conditional_toy_task_separates_branches() {
        let (len, k) = (16, 12);
        let model = Stage2Model::new(
            6,
            toy_dims(len, k, ConditionLayout::Discrete { cardinality: 2 }),
        );
        let mut tr = Stage2Trainer::new(model, 3e-3, 0.9, 0.96, 0.999, 13);
        let seq_a = TokenSequence { tokens: (0..len).map(|i| (2 * i) % k).collect() };
        let seq_b = TokenSequence { tokens: (0..len).map(|i| (5 * i + 3) % k).collect() };
        for _ in 0..500 {
            tr.train_step(&[
                (seq_a.clone(), ConditionSpec::Discrete { value: 0 }),
                (seq_b.clone(), ConditionSpec::Discrete { value: 1 }),
            ])
            .unwrap();
        }
        let mut rng = stream(15, "cond-acc", 0);
        for (cls, truth) in [(0usize, &seq_a), (1usize, &seq_b)] {
            let cond = tr
                .model
                .encode_condition(&ConditionSpec::Discrete { value: cls })
                .unwrap();
            let mut correct = 0;
            let mut total = 0;
            for _ in 0..10 {
                let (masked, pos) =
                    mask_tokens(truth, 0.5, tr.model.dims.mask_id(), &mut rng).unwrap();
                let logits = tr.model.forward(&masked.tokens, &cond, None).unwrap();
                let data = logits.data();
                for &p in &pos {
                    let row = &data[p * k..(p + 1) * k];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if argmax == truth.tokens[p] {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            let acc = correct as f64 / total as f64;
            assert!(acc >= 0.99, "branch {cls} accuracy {acc}");
        }
        // Changing only the condition token switches the decoded sequence:
        // all-MASK argmax decodes to each branch under its condition.
        let mut decoded = Vec::new();
        for cls in [0usize, 1] {
            let cond = tr
                .model
                .encode_condition(&ConditionSpec::Discrete { value: cls })
                .unwrap();
            let masked = vec![tr.model.dims.mask_id(); len];
            let logits = tr.model.forward(&masked, &cond, None).unwrap();
            let data = logits.data();
            let out: Vec<usize> = (0..len)
                .map(|p| {
                    let row = &data[p * k..(p + 1) * k];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect();
            decoded.push(out);
        }
        assert_eq!(decoded[0], seq_a.tokens);
        assert_eq!(decoded[1], seq_b.tokens);
        assert_ne!(decoded[0], decoded[1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flatten_unflatten_bijection(seed in 0u64..500) {
            let n = 4;
            let mut rng = stream(seed, "prop-flat", 0);
            let indices: Vec<usize> = (0..3 * n * n).map(|_| rng.gen_range(0..64)).collect();
            let seq = flatten(&indices, n);
            let back = unflatten(&seq, n, 64).unwrap();
            prop_assert_eq!(back, indices);
        }
    }
}
