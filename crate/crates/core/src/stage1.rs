//! Stage-1 training: joint optimization of encoder, codebook, decoder and
//! discriminator under masked reconstruction + perceptual + adversarial +
//! VQ + occlusion-aware alpha losses, with optional depth and semantic
//! supervision. The discriminator trains on whitened object images with an
//! exact double-backprop R1 penalty.

use crate::codebook::Codebook;
use crate::config::PipelineConfig;
use crate::decoder::{Decoder, DecoderDims};
use crate::encoder::{Encoder, EncoderDims};
use crate::error::{Error, Result};
use crate::nn::{normal, stream, Adam, Ema, HasParams, Init, Linear, ParamList, Rng};
use crate::pyramid::{PerceptualBackend, PyramidPerceptual};
use crate::renderer::{render, Jitter, RenderOptions, RenderOutput};
use crate::sample::{Mask, ObjectSample, RgbImage};
use crate::tensor::{backward, backward_with, Tensor};
use serde::{Deserialize, Serialize};

/// Per-step loss values; `total` is the weighted sum of the enabled terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rgb: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub vq: f64,
    pub alpha: f64,
    pub depth: Option<f64>,
    pub semantic: Option<f64>,
    pub total: f64,
}

/// StyleGAN2-style conv discriminator over whitened object images:
/// conv + leaky + 2x downsample per channel entry, then a dense head.
pub struct Discriminator {
    convs: Vec<(Tensor, Tensor)>,
    head: Linear,
    pub input_resolution: usize,
}

impl Discriminator {
    pub fn new(seed: u64, input_resolution: usize, channels: &[usize]) -> Discriminator {
        let mut rng = stream(seed, "discriminator", 0);
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 3usize;
        let mut res = input_resolution;
        for &cout in channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push((
                Tensor::leaf(
                    &[cout, cin, 3, 3],
                    (0..cout * cin * 9).map(|_| std * normal(&mut rng)).collect(),
                ),
                Tensor::leaf(&[cout], vec![0.0; cout]),
            ));
            cin = cout;
            assert!(res % 2 == 0, "discriminator resolution underflow");
            res /= 2;
        }
        let head = Linear::new(&mut rng, cin * res * res, 1, Init::XavierUniform);
        Discriminator { convs, head, input_resolution }
    }

    /// x[N, 3, R, R] -> logits [N, 1].
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        let mut h = x.clone();
        for (w, b) in &self.convs {
            h = h.conv2d(w, 1).add_chan_bias(b).leaky_relu(0.2).avg_pool2();
        }
        let s = h.shape().to_vec();
        self.head.forward(&h.reshape(&[n, s[1] * s[2] * s[3]]))
    }
}

impl HasParams for Discriminator {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push(format!("{prefix}.conv.{i}.weight"), w);
            out.push(format!("{prefix}.conv.{i}.bias"), b);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Masked L2 reconstruction plus perceptual distance on pre-masked images.
/// Returns (l2, perceptual); the perceptual term is zero when no backend is
/// given.
pub fn loss_rgb(
    xhat: &Tensor,
    x: &Tensor,
    m: &Tensor,
    perceptual: Option<&dyn PerceptualBackend>,
) -> Result<(Tensor, Tensor)> {
    let s = x.shape().to_vec();
    assert_eq!(xhat.shape(), &s[..], "reconstruction shape mismatch");
    let (h, w) = (s[0], s[1]);
    assert_eq!(m.shape(), [h, w]);
    let mflat = m.reshape(&[h * w]);
    let diff = xhat
        .reshape(&[h * w, 3])
        .sub(&x.reshape(&[h * w, 3]))
        .mul_col_vec(&mflat);
    let l2 = diff.square().mean_all();
    let perc = match perceptual {
        Some(p) => {
            let xm = x.reshape(&[h * w, 3]).mul_col_vec(&mflat).reshape(&[h, w, 3]);
            let xhm = xhat.reshape(&[h * w, 3]).mul_col_vec(&mflat).reshape(&[h, w, 3]);
            p.distance(&xhm, &xm)?
        }
        None => Tensor::scalar(0.0),
    };
    Ok((l2, perc))
}

/// Occlusion-aware density supervision: object pixels pushed to alpha 1,
/// sky/road pixels to 0, all other pixels untouched. Mean over pixels per
/// term.
pub fn loss_alpha(alpha: &Tensor, m: &Tensor, m_skyroad: &Tensor) -> Result<Tensor> {
    let hw = alpha.len();
    assert_eq!(m.len(), hw);
    assert_eq!(m_skyroad.len(), hw);
    let (md, sd) = (m.data(), m_skyroad.data());
    if md.iter().zip(sd.iter()).any(|(&a, &b)| a > 0.0 && b > 0.0) {
        return Err(Error::Shape("object and sky/road masks overlap".into()));
    }
    let a = alpha.reshape(&[hw]);
    let mf = m.reshape(&[hw]);
    let sf = m_skyroad.reshape(&[hw]);
    let obj = a.add_scalar(-1.0).mul(&mf).square().mean_all();
    let sky = a.mul(&sf).square().mean_all();
    Ok(obj.add(&sky))
}

/// Non-saturating generator term: E[softplus(-D(fake))].
pub fn gan_g_term(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean_all()
}

/// Discriminator data term: E[softplus(-D(real))] + E[softplus(D(fake))].
pub fn gan_d_data_term(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    real_logits.neg().softplus().mean_all().add(&fake_logits.softplus().mean_all())
}

/// Exact R1 penalty gamma/2 * E[ ||grad_x D(x)||^2 ] via create-graph
/// backward; the result is differentiable w.r.t. the discriminator weights.
pub fn r1_penalty(disc: &Discriminator, x_real: &Tensor, gamma: f64) -> Tensor {
    let n = x_real.shape()[0] as f64;
    let x = x_real.detach().requires_grad();
    let logits = disc.forward(&x);
    let gx = backward_with(&logits.sum_all(), true).wrt(&x);
    gx.square().sum_all().scale(gamma / 2.0 / n)
}

/// Masked L2 between rendered and reference depth over valid object pixels;
/// zero when the set is empty. Mean over the valid set.
pub fn loss_depth(rendered: &Tensor, target: &Tensor, valid: &Mask, m: &Mask) -> Tensor {
    let hw = rendered.len();
    assert_eq!(target.len(), hw);
    let sel: Vec<f64> = (0..hw)
        .map(|i| if valid.data[i] && m.data[i] { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = sel.iter().sum();
    if count == 0.0 {
        return Tensor::scalar(0.0);
    }
    let w = Tensor::from_vec(&[hw], sel);
    rendered
        .reshape(&[hw])
        .sub(&target.reshape(&[hw]))
        .mul(&w)
        .square()
        .sum_all()
        .scale(1.0 / count)
}

/// Masked L2 between composited semantic features and targets; mean over
/// masked pixels and channels.
pub fn loss_semantic(rendered: &Tensor, target: &Tensor, m: &Mask) -> Result<Tensor> {
    if rendered.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "semantic shapes differ: {:?} vs {:?}",
            rendered.shape(),
            target.shape()
        )));
    }
    let (hw, d) = (rendered.rows(), rendered.cols());
    let sel: Vec<f64> = (0..hw).map(|i| if m.data[i] { 1.0 } else { 0.0 }).collect();
    let count: f64 = sel.iter().sum();
    if count == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    let w = Tensor::from_vec(&[hw], sel);
    Ok(rendered
        .sub(target)
        .mul_col_vec(&w)
        .square()
        .sum_all()
        .scale(1.0 / (count * d as f64)))
}

/// Masked PSNR in dB over object pixels.
pub fn masked_psnr(xhat: &RgbImage, x: &RgbImage, m: &Mask) -> f64 {
    let mut se = 0.0;
    let mut n = 0.0;
    for i in 0..m.data.len() {
        if m.data[i] {
            for c in 0..3 {
                let d = xhat.data[i * 3 + c] - x.data[i * 3 + c];
                se += d * d;
            }
            n += 3.0;
        }
    }
    if n == 0.0 {
        return f64::INFINITY;
    }
    let mse = se / n;
    -10.0 * (mse.max(1e-12)).log10()
}

/// Render-resolution training target: image, object mask and sky/road mask.
/// When the image resolution exceeds the render resolution the image is
/// area-averaged and only fully-covered mask pixels survive, which keeps
/// every loss term exactly independent of occluder pixels.
pub struct RenderTarget {
    pub image: RgbImage,
    pub object_mask: Mask,
    pub skyroad_mask: Mask,
    pub depth: Option<(Tensor, Mask)>,
    pub semantic: Option<Tensor>,
}

pub fn render_target(sample: &ObjectSample, render_resolution: usize) -> RenderTarget {
    let factor = sample.image.h / render_resolution;
    assert!(factor >= 1 && sample.image.h % render_resolution == 0);
    let masked = {
        let mut img = sample.image.clone();
        for i in 0..sample.object_mask.data.len() {
            if !sample.object_mask.data[i] {
                img.data[i * 3..(i + 1) * 3].fill(0.0);
            }
        }
        img
    };
    let image = masked.downsample(factor);
    let full = |fracs: Vec<f64>| -> Mask {
        Mask {
            h: render_resolution,
            w: render_resolution,
            data: fracs.iter().map(|&f| f == 1.0).collect(),
        }
    };
    let object_mask = full(sample.object_mask.downsample_fraction(factor));
    let skyroad_mask = full(sample.skyroad_mask.downsample_fraction(factor));
    let depth = sample.depth.as_ref().map(|d| {
        let hw = render_resolution * render_resolution;
        let mut values = vec![0.0; hw];
        let mut valid = vec![true; hw];
        for y in 0..render_resolution {
            for x in 0..render_resolution {
                let mut acc = 0.0;
                let mut all_valid = true;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = (y * factor + dy) * d.w + x * factor + dx;
                        if d.valid[i] {
                            acc += d.values[i];
                        } else {
                            all_valid = false;
                        }
                    }
                }
                values[y * render_resolution + x] = acc / (factor * factor) as f64;
                valid[y * render_resolution + x] = all_valid;
            }
        }
        (
            Tensor::from_vec(&[hw], values),
            Mask { h: render_resolution, w: render_resolution, data: valid },
        )
    });
    let semantic = sample.semantic.as_ref().map(|s| {
        let hw = render_resolution * render_resolution;
        let mut data = vec![0.0; hw * s.channels];
        let inv = 1.0 / (factor * factor) as f64;
        for y in 0..render_resolution {
            for x in 0..render_resolution {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = ((y * factor + dy) * s.w + x * factor + dx) * s.channels;
                        let dst = (y * render_resolution + x) * s.channels;
                        for c in 0..s.channels {
                            data[dst + c] += s.data[src + c] * inv;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[hw, s.channels], data)
    });
    RenderTarget { image, object_mask, skyroad_mask, depth, semantic }
}

pub struct Stage1Model {
    pub config: PipelineConfig,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub perceptual: Box<dyn PerceptualBackend>,
}

impl Stage1Model {
    pub fn new(config: PipelineConfig) -> Result<Stage1Model> {
        config.validate()?;
        let seed = config.seed;
        let mut cb_rng: Rng = stream(seed, "codebook", 0);
        Ok(Stage1Model {
            encoder: Encoder::new(seed, EncoderDims::from_config(&config)),
            codebook: Codebook::new(
                &mut cb_rng,
                config.codebook_size,
                config.token_dim,
                config.l2_normalize_codes,
            ),
            decoder: Decoder::new(seed, DecoderDims::from_config(&config)),
            discriminator: Discriminator::new(
                seed,
                config.render_resolution,
                &config.disc_channels.clone(),
            ),
            perceptual: Box::new(PyramidPerceptual::new(seed ^ 0x70c0_ffee)),
            config,
        })
    }

    pub fn generator_params(&self) -> ParamList {
        let mut out = ParamList::default();
        self.encoder.collect("encoder", &mut out);
        self.codebook.collect("codebook", &mut out);
        self.decoder.collect("decoder", &mut out);
        out
    }

    pub fn discriminator_params(&self) -> ParamList {
        let mut out = ParamList::default();
        self.discriminator.collect("disc", &mut out);
        out
    }

    pub fn all_params(&self) -> ParamList {
        let mut out = self.generator_params();
        let d = self.discriminator_params();
        out.0.extend(d.0);
        out
    }

    /// Encoder input: non-object pixels whitened (config default) or raw.
    pub fn encoder_input(&self, sample: &ObjectSample) -> RgbImage {
        if self.config.encoder_premask {
            sample.whitened_image()
        } else {
            sample.image.clone()
        }
    }

    /// Encode + quantize one sample into straight-through latents.
    pub fn encode_sample(&self, sample: &ObjectSample) -> Result<EncodedSample> {
        let input = self.encoder_input(sample).to_tensor();
        let e = self.encoder.encode(&input)?;
        let q = self.codebook.quantize(&e.values)?;
        let z_st = self.codebook.straight_through(&q.e_norm, &q.vectors);
        Ok(EncodedSample {
            e_norm: q.e_norm,
            z_vectors: q.vectors,
            z_st,
            indices: q.indices,
        })
    }

    /// Full reconstruction to a render output.
    pub fn reconstruct(&self, sample: &ObjectSample, jitter: Jitter) -> Result<(EncodedSample, RenderOutput)> {
        let enc = self.encode_sample(sample)?;
        let planes = self.decoder.decode(&enc.z_st);
        let opts = RenderOptions {
            jitter,
            ..RenderOptions::from_config(&self.config)
        };
        let cam = sample.camera.with_resolution(self.config.render_resolution);
        let out = render(&self.decoder.field, &planes, &cam, sample.scale, &opts)?;
        Ok((enc, out))
    }
}

pub struct EncodedSample {
    pub e_norm: Tensor,
    pub z_vectors: Tensor,
    pub z_st: Tensor,
    pub indices: Vec<usize>,
}

pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub ema: Ema,
    pub step: u64,
}

impl Stage1Trainer {
    pub fn new(model: Stage1Model) -> Stage1Trainer {
        let cfg = &model.config;
        let mut opt_g = Adam::new(cfg.lr_generator, cfg.adam_beta1, cfg.adam_beta2);
        let mut opt_d = Adam::new(cfg.lr_discriminator, cfg.adam_beta1, cfg.adam_beta2);
        opt_g.max_grad_norm = cfg.grad_clip;
        opt_d.max_grad_norm = cfg.grad_clip;
        opt_g.warmup_steps = cfg.lr_warmup_steps as u64;
        opt_d.warmup_steps = cfg.lr_warmup_steps as u64;
        let ema = Ema::new(cfg.ema_decay, &model.generator_params());
        Stage1Trainer { model, opt_g, opt_d, ema, step: 0 }
    }

    /// Deterministic batch indices for a step.
    pub fn batch_indices(&self, n_samples: usize, step: u64) -> Vec<usize> {
        use rand::Rng as _;
        let mut rng = stream(self.model.config.seed, "stage1-batch", step);
        (0..self.model.config.batch_size.min(n_samples))
            .map(|_| rng.gen_range(0..n_samples))
            .collect()
    }

    /// One alternating GAN step: discriminator on (real, detached fake),
    /// then generator/encoder/codebook on the remaining terms.
    pub fn train_step(&mut self, batch: &[ObjectSample]) -> Result<LossReport> {
        let cfg = self.model.config.clone();
        let res = cfg.render_resolution;
        let hw = res * res;
        let step_seed = hash_step(cfg.seed, self.step);
        let gan_active = cfg.weight_gan > 0.0 && self.step >= cfg.gan_warmup_steps as u64;

        let mut l2_terms = Vec::new();
        let mut perc_terms = Vec::new();
        let mut vq_terms = Vec::new();
        let mut alpha_terms = Vec::new();
        let mut depth_terms = Vec::new();
        let mut sem_terms = Vec::new();
        let mut fake_whitened = Vec::new();
        let mut real_whitened = Vec::new();

        for (bi, sample) in batch.iter().enumerate() {
            let target = render_target(sample, res);
            let jitter = if cfg.train_jitter {
                Jitter::Seeded(step_seed ^ (bi as u64).wrapping_mul(0x9e37_79b9))
            } else {
                Jitter::Midpoint
            };
            let (enc, out) = self.model.reconstruct(sample, jitter)?;

            let m_t = target.object_mask.to_tensor();
            let sky_t = target.skyroad_mask.to_tensor();
            let xhat = out.rgb.reshape(&[res, res, 3]);
            let x = target.image.to_tensor();
            let (l2, perc) = loss_rgb(&xhat, &x, &m_t, Some(self.model.perceptual.as_ref()))?;
            l2_terms.push(l2);
            perc_terms.push(perc);
            vq_terms.push(self.model.codebook.vq_loss(
                &enc.e_norm,
                &enc.z_vectors,
                cfg.commitment_weight,
            ));
            alpha_terms.push(loss_alpha(&out.alpha, &m_t, &sky_t)?);
            if cfg.depth_loss {
                if let Some((dvals, dvalid)) = &target.depth {
                    depth_terms.push(loss_depth(&out.depth, dvals, dvalid, &target.object_mask));
                }
            }
            if cfg.semantic_field {
                let rendered = out.semantic.clone().ok_or_else(|| {
                    Error::Config("semantic_field enabled but renderer returned none".into())
                })?;
                let t = target.semantic.clone().ok_or_else(|| {
                    Error::Config("semantic_field enabled but sample lacks features".into())
                })?;
                sem_terms.push(loss_semantic(&rendered, &t, &target.object_mask)?);
            }
            if gan_active {
                // Whitened fake: rendered rgb + (1 - alpha) white.
                let white = out
                    .alpha
                    .neg()
                    .add_scalar(1.0)
                    .reshape(&[hw])
                    .broadcast_cols(3);
                fake_whitened.push(out.rgb.add(&white));
                // Whitened real at render resolution.
                let mut img = target.image.clone();
                for i in 0..hw {
                    if !target.object_mask.data[i] {
                        img.data[i * 3..(i + 1) * 3].fill(1.0);
                    }
                }
                real_whitened.push(img);
            }
        }

        let nb = batch.len() as f64;
        let mean = |terms: &[Tensor]| -> Tensor {
            let mut acc = Tensor::scalar(0.0);
            for t in terms {
                acc = acc.add(t);
            }
            acc.scale(1.0 / nb)
        };
        let l2 = mean(&l2_terms);
        let perc = mean(&perc_terms);
        let vq = mean(&vq_terms);
        let alpha = mean(&alpha_terms);
        let depth = if depth_terms.is_empty() { None } else { Some(mean(&depth_terms)) };
        let sem = if sem_terms.is_empty() { None } else { Some(mean(&sem_terms)) };

        // Discriminator step on detached fakes.
        let mut gan_d_val = 0.0;
        let mut gan_g = Tensor::scalar(0.0);
        if gan_active {
            let to_nchw = |img: &RgbImage| -> Tensor {
                Tensor::from_vec(&[hw, 3], img.data.clone())
                    .transpose2d()
                    .reshape(&[1, 3, res, res])
            };
            let reals: Vec<Tensor> = real_whitened.iter().map(to_nchw).collect();
            let real_batch = Tensor::concat_rows(
                &reals.iter().map(|t| t.reshape(&[1, 3 * hw])).collect::<Vec<_>>(),
            )
            .reshape(&[batch.len(), 3, res, res]);
            let fakes: Vec<Tensor> = fake_whitened
                .iter()
                .map(|t| t.detach().transpose2d().reshape(&[1, 3 * hw]))
                .collect();
            let fake_batch = Tensor::concat_rows(&fakes).reshape(&[batch.len(), 3, res, res]);
            let d_real = self.model.discriminator.forward(&real_batch);
            let d_fake = self.model.discriminator.forward(&fake_batch);
            let data_term = gan_d_data_term(&d_real, &d_fake);
            let r1 = r1_penalty(&self.model.discriminator, &real_batch, cfg.r1_gamma);
            let d_loss = data_term.add(&r1);
            gan_d_val = d_loss.item();
            if !gan_d_val.is_finite() {
                return Err(Error::Other(format!(
                    "non-finite discriminator loss at step {}",
                    self.step
                )));
            }
            let grads = backward(&d_loss);
            self.opt_d.step(&self.model.discriminator_params(), &grads);

            // Generator term against the updated discriminator.
            let fakes_live: Vec<Tensor> = fake_whitened
                .iter()
                .map(|t| t.transpose2d().reshape(&[1, 3 * hw]))
                .collect();
            let fake_live = Tensor::concat_rows(&fakes_live).reshape(&[batch.len(), 3, res, res]);
            gan_g = gan_g_term(&self.model.discriminator.forward(&fake_live));
        }

        let mut total = Tensor::scalar(0.0);
        for (w, t) in [
            (cfg.weight_rgb, Some(&l2)),
            (cfg.weight_perceptual, Some(&perc)),
            (cfg.weight_vq, Some(&vq)),
            (cfg.weight_alpha, Some(&alpha)),
            (cfg.weight_depth, depth.as_ref()),
            (cfg.weight_semantic, sem.as_ref()),
            (if gan_active { cfg.weight_gan } else { 0.0 }, Some(&gan_g)),
        ] {
            if w != 0.0 {
                if let Some(t) = t {
                    total = total.add(&t.scale(w));
                }
            }
        }

        let report = LossReport {
            rgb: l2.item(),
            perceptual: perc.item(),
            gan_g: gan_g.item(),
            gan_d: gan_d_val,
            vq: vq.item(),
            alpha: alpha.item(),
            depth: depth.as_ref().map(|t| t.item()),
            semantic: sem.as_ref().map(|t| t.item()),
            total: total.item(),
        };
        if !report.total.is_finite() {
            return Err(Error::Other(format!(
                "non-finite loss at step {}: {:?}",
                self.step, report
            )));
        }

        let gparams = self.model.generator_params();
        let grads = backward(&total);
        self.opt_g.step(&gparams, &grads);
        if grads.get(&self.model.codebook.entries).is_some() {
            self.model.codebook.renormalize_entries();
        }
        self.ema.update(&gparams);
        self.step += 1;
        Ok(report)
    }
}

fn hash_step(seed: u64, step: u64) -> u64 {
    let mut x = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{draw_sample, GenOptions};

    fn mask_from(data: Vec<bool>, n: usize) -> Mask {
        Mask { h: n, w: n, data }
    }

    #[test]
    fn loss_rgb_hand_cases() {
        let n = 4;
        let x = Tensor::zeros(&[n, n, 3]);
        // xhat - x = 1 on exactly half the pixels, full mask, no perceptual.
        let mut xhat = vec![0.0; n * n * 3];
        for px in 0..n * n / 2 {
            xhat[px * 3..(px + 1) * 3].fill(1.0);
        }
        let xhat = Tensor::from_vec(&[n, n, 3], xhat);
        let m = Tensor::full(&[n, n], 1.0);
        let (l2, perc) = loss_rgb(&xhat, &x, &m, None).unwrap();
        assert!((l2.item() - 0.5).abs() < 1e-12);
        assert_eq!(perc.item(), 0.0);

        // Identical reconstruction -> 0.
        let (z, _) = loss_rgb(&x, &x, &m, None).unwrap();
        assert_eq!(z.item(), 0.0);

        // Fully occluded mask -> 0 regardless of xhat.
        let m0 = Tensor::zeros(&[n, n]);
        let (z, _) = loss_rgb(&xhat, &x, &m0, None).unwrap();
        assert_eq!(z.item(), 0.0);
    }

    #[test]
    fn loss_alpha_hand_cases() {
        let n = 4; // 16 pixels
        // m covers 4 (25%), skyroad covers 12 (75%).
        let m = Tensor::from_vec(&[n, n], (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect());
        let sky = Tensor::from_vec(&[n, n], (0..16).map(|i| if i >= 4 { 1.0 } else { 0.0 }).collect());
        let ones = Tensor::full(&[16], 1.0);
        assert!((loss_alpha(&ones, &m, &sky).unwrap().item() - 0.75).abs() < 1e-12);
        let zeros = Tensor::zeros(&[16]);
        assert!((loss_alpha(&zeros, &m, &sky).unwrap().item() - 0.25).abs() < 1e-12);

        // Perfect silhouette -> 0.
        let alpha = m.reshape(&[16]);
        assert_eq!(loss_alpha(&alpha, &m, &sky).unwrap().item(), 0.0);

        // Overlapping masks are an error.
        let bad = Tensor::full(&[n, n], 1.0);
        assert!(loss_alpha(&ones, &bad, &sky).is_err());
    }

    #[test]
    fn gan_terms_at_zero_logit() {
        let zeros = Tensor::zeros(&[4, 1]);
        let d = gan_d_data_term(&zeros, &zeros);
        assert!((d.item() - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        let g = gan_g_term(&zeros);
        assert!((g.item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn r1_of_linear_discriminator_is_exact() {
        // D(x) = a * sum(x): grad_x D = a everywhere, so the penalty is
        // gamma/2 * a^2 * pixels.
        struct LinearD(f64);
        let res = 8;
        let a = 0.3;
        // Build a discriminator with a single 1x1-ish behavior by zeroing
        // convs is intricate; instead check the penalty formula directly on
        // a one-conv discriminator with constant weights.
        let d = Discriminator::new(0, res, &[1]);
        // conv: 3->1 channels; set kernel so conv output = a * (sum of
        // center taps) and bias 0; head weight = ones, so D is linear.
        let (w, b) = (&d.convs[0].0, &d.convs[0].1);
        let mut kernel = vec![0.0; 1 * 3 * 9];
        for c in 0..3 {
            kernel[c * 9 + 4] = a; // center tap only
        }
        w.assign(&kernel);
        b.assign(&[0.0]);
        let head_len = d.head.weight.len();
        d.head.weight.assign(&vec![1.0; head_len]);

        // After avg_pool the dense sees (res/2)^2 values; D(x) =
        // sum over pooled a*x = a * sum(x) exactly (pool averages of 4,
        // times 4 pixels each... pooling keeps the total sum scaled by
        // 1/4 * 1 per 2x2 block, head of ones sums them).
        let x = Tensor::full(&[2, 3, res, res], 0.5);
        let pen = r1_penalty(&d, &x, 1.0);
        // grad_x D: each input pixel contributes a * 0.25 (pool) once.
        let per_pixel = a * 0.25;
        let expected = 0.5 * (per_pixel * per_pixel) * (3 * res * res) as f64;
        assert!(
            (pen.item() - expected).abs() < 1e-10,
            "penalty {} vs expected {}",
            pen.item(),
            expected
        );
        let _ = LinearD(a);
    }

    #[test]
    fn r1_gradient_wrt_weights_matches_fd() {
        let res = 4;
        let d = Discriminator::new(3, res, &[2]);
        let x: Vec<f64> = (0..2 * 3 * res * res)
            .map(|i| ((i * 29 % 31) as f64 - 15.0) / 20.0)
            .collect();
        let xt = Tensor::from_vec(&[2, 3, res, res], x);
        let pen = r1_penalty(&d, &xt, 1.0);
        let w = &d.convs[0].0;
        let g = backward(&pen).wrt(w).to_vec();
        let w0 = w.to_vec();
        let h = 1e-5;
        for i in (0..w0.len()).step_by(11) {
            let mut p = w0.clone();
            let mut m = w0.clone();
            p[i] += h;
            m[i] -= h;
            w.assign(&p);
            let fp = r1_penalty(&d, &xt, 1.0).item();
            w.assign(&m);
            let fm = r1_penalty(&d, &xt, 1.0).item();
            w.assign(&w0);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "w[{i}]: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn symmetric_point_data_gradient_is_zero() {
        // Identical real/fake batches with a zero-output discriminator:
        // the data-term gradient vanishes identically.
        let res = 8;
        let d = Discriminator::new(5, res, &[4, 8]);
        let head_len = d.head.weight.len();
        d.head.weight.assign(&vec![0.0; head_len]); // logits are exactly 0
        let x = Tensor::from_vec(
            &[2, 3, res, res],
            (0..2 * 3 * res * res).map(|i| ((i * 13 % 17) as f64) / 17.0).collect(),
        );
        let real = d.forward(&x);
        let fake = d.forward(&x);
        let loss = gan_d_data_term(&real, &fake);
        let grads = backward(&loss);
        let mut params = ParamList::default();
        d.collect("d", &mut params);
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(p) {
                let norm: f64 = g.to_vec().iter().map(|v| v * v).sum();
                assert!(norm < 1e-24, "{name} gradient norm {norm}");
            }
        }
    }

    #[test]
    fn loss_depth_hand_cases() {
        let n = 4;
        let rendered = Tensor::full(&[n * n], 5.0);
        let mut target = vec![5.0; n * n];
        // Offset 2m on 10 valid pixels.
        let mut valid = vec![false; n * n];
        let mut mdata = vec![false; n * n];
        for i in 0..10 {
            target[i] = 3.0;
            valid[i] = true;
            mdata[i] = true;
        }
        let t = Tensor::from_vec(&[n * n], target);
        let v = mask_from(valid, n);
        let m = mask_from(mdata, n);
        assert!((loss_depth(&rendered, &t, &v, &m).item() - 4.0).abs() < 1e-12);

        // Exact match -> 0; empty valid set -> 0.
        let exact = loss_depth(&t, &t, &v, &m);
        assert_eq!(exact.item(), 0.0);
        let none = mask_from(vec![false; n * n], n);
        assert_eq!(loss_depth(&rendered, &t, &none, &m).item(), 0.0);
    }

    #[test]
    fn loss_semantic_hand_cases() {
        let hw = 9;
        let d = 4;
        let a = Tensor::zeros(&[hw, d]);
        // Unit offset in one channel over the mask.
        let mut b = vec![0.0; hw * d];
        for px in 0..hw {
            b[px * d] = 1.0;
        }
        let b = Tensor::from_vec(&[hw, d], b);
        let m = Mask { h: 3, w: 3, data: vec![true; hw] };
        let l = loss_semantic(&b, &a, &m).unwrap();
        assert!((l.item() - 1.0 / d as f64).abs() < 1e-12);
        assert_eq!(loss_semantic(&a, &a, &m).unwrap().item(), 0.0);
        let m0 = Mask { h: 3, w: 3, data: vec![false; hw] };
        assert_eq!(loss_semantic(&b, &a, &m0).unwrap().item(), 0.0);
    }

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk();
        cfg.image_resolution = 32;
        cfg.render_resolution = 16;
        cfg.latent_grid = 4;
        cfg.codebook_size = 32;
        cfg.plane_resolution = 32;
        cfg.plane_channels = 8;
        cfg.samples_uniform = 6;
        cfg.samples_importance = 3;
        cfg.encoder_embed = 32;
        cfg.encoder_hidden = 64;
        cfg.encoder_heads = 4;
        cfg.token_hat_dim = 16;
        cfg.decoder_embed = 32;
        cfg.decoder_hidden = 64;
        cfg.decoder_heads = 4;
        cfg.decoder_blocks = 1;
        cfg.encoder_vit_blocks = 1;
        cfg.encoder_cross_blocks = 1;
        cfg.mapping_layers = 1;
        cfg.style_dim = 16;
        cfg.generator_channels = vec![16, 12, 8];
        cfg.field_hidden = 16;
        cfg.disc_channels = vec![4, 8];
        cfg.batch_size = 1;
        cfg.gan_warmup_steps = 0;
        cfg
    }

    fn tiny_sample(res: usize) -> ObjectSample {
        let opts = GenOptions {
            resolution: res,
            occlusion_prob: 0.0,
            ..GenOptions::new(res)
        };
        draw_sample(77, 0, &opts).unwrap().sample
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut cfg = tiny_config();
        cfg.weight_rgb = 0.0;
        cfg.weight_perceptual = 0.0;
        cfg.weight_gan = 0.0;
        cfg.weight_vq = 0.0;
        cfg.weight_alpha = 0.0;
        cfg.weight_depth = 0.0;
        cfg.weight_semantic = 0.0;
        let model = Stage1Model::new(cfg).unwrap();
        let before: Vec<Vec<f64>> = model.all_params().iter().map(|(_, t)| t.to_vec()).collect();
        let mut tr = Stage1Trainer::new(model);
        let s = tiny_sample(32);
        tr.train_step(&[s]).unwrap();
        let after: Vec<Vec<f64>> = tr.model.all_params().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_bitwise_equal_reports() {
        let run = || -> LossReport {
            let model = Stage1Model::new(tiny_config()).unwrap();
            let mut tr = Stage1Trainer::new(model);
            let s = tiny_sample(32);
            tr.train_step(&[s.clone()]).unwrap();
            tr.train_step(&[s]).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn occluder_pixel_perturbation_changes_no_loss_term() {
        let cfg = tiny_config();
        let model = Stage1Model::new(cfg).unwrap();
        let mut tr = Stage1Trainer::new(model);
        let opts = GenOptions {
            resolution: 32,
            occlusion_prob: 1.0,
            min_visibility: 0.2,
            ..GenOptions::new(32)
        };
        let rendered = draw_sample(31, 2, &opts).unwrap();
        let sample = rendered.sample.clone();
        assert!(rendered.occluder_mask.count() > 0);

        let report_a = tr.train_step(&[sample.clone()]).unwrap();

        // Rebuild an identical trainer (same seeds), perturb occluder
        // pixels only, and compare every term exactly.
        let model2 = Stage1Model::new(tiny_config()).unwrap();
        let mut tr2 = Stage1Trainer::new(model2);
        let mut perturbed = sample;
        for i in 0..rendered.occluder_mask.data.len() {
            if rendered.occluder_mask.data[i] {
                for c in 0..3 {
                    perturbed.image.data[i * 3 + c] =
                        (perturbed.image.data[i * 3 + c] + 0.37).rem_euclid(1.0);
                }
            }
        }
        let report_b = tr2.train_step(&[perturbed]).unwrap();
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn stop_gradient_contract_in_live_graph() {
        let model = Stage1Model::new(tiny_config()).unwrap();
        let s = tiny_sample(32);
        let enc = model.encode_sample(&s).unwrap();
        // First VQ term alone: encoder params get nothing.
        let cells = enc.e_norm.rows() as f64;
        let first = enc
            .z_vectors
            .sub(&enc.e_norm.detach())
            .square()
            .sum_all()
            .scale(1.0 / cells);
        let g1 = backward(&first);
        let enc_params = {
            let mut p = ParamList::default();
            model.encoder.collect("encoder", &mut p);
            p
        };
        for (name, p) in enc_params.iter() {
            assert!(g1.get(p).is_none(), "{name} received gradient from codebook term");
        }
        // Commitment term alone: codebook entries get nothing.
        let commit = enc
            .e_norm
            .sub(&enc.z_vectors.detach())
            .square()
            .sum_all()
            .scale(0.25 / cells);
        let g2 = backward(&commit);
        assert!(g2.get(&model.codebook.entries).is_none());
    }

    #[test]
    fn codebook_rows_stay_unit_norm_after_step() {
        let model = Stage1Model::new(tiny_config()).unwrap();
        let mut tr = Stage1Trainer::new(model);
        let s = tiny_sample(32);
        tr.train_step(&[s]).unwrap();
        let d = tr.model.codebook.dim();
        for row in tr.model.codebook.entries.to_vec().chunks(d) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
