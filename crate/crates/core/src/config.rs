//! Pipeline configuration and the two built-in presets.
//!
//! `paper` mirrors the published architecture (256^2 inputs, 16^2 latent
//! grid, codebook 2048x32, 256^2 tri-planes, 24+16 ray samples); `desk`
//! shrinks every width so the full pipeline trains in minutes on a CPU while
//! exercising identical code paths.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,

    // Core dimensions.
    pub image_resolution: usize,
    pub render_resolution: usize,
    pub latent_grid: usize,
    pub token_dim: usize,
    pub codebook_size: usize,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub samples_uniform: usize,
    pub samples_importance: usize,
    pub density_threshold: f64,
    pub decode_steps: usize,
    pub commitment_weight: f64,
    pub r1_gamma: f64,
    pub scaled_box: bool,
    pub depth_loss: bool,
    pub semantic_field: bool,

    // Encoder widths.
    pub encoder_embed: usize,
    pub encoder_hidden: usize,
    pub encoder_heads: usize,
    pub encoder_vit_blocks: usize,
    pub encoder_cross_blocks: usize,
    /// Non-object pixels are whitened before encoding.
    pub encoder_premask: bool,

    // Decoder widths.
    pub token_hat_dim: usize,
    pub decoder_embed: usize,
    pub decoder_hidden: usize,
    pub decoder_heads: usize,
    pub decoder_blocks: usize,
    pub mapping_layers: usize,
    pub style_dim: usize,
    pub generator_channels: Vec<usize>,
    pub field_hidden: usize,
    pub semantic_channels: usize,

    // Discriminator.
    pub disc_channels: Vec<usize>,

    // Stage-2 transformer.
    pub stage2_layers: usize,
    pub stage2_heads: usize,
    pub stage2_embed: usize,
    pub stage2_hidden: usize,
    pub label_smoothing: f64,
    pub stage2_dropout: f64,
    pub n_classes: usize,
    pub n_times: usize,
    pub cond_proj_dim: usize,
    pub scale_embed_degree: usize,

    // Optimization.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_stage2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub stage2_beta1: f64,
    pub stage2_beta2: f64,
    pub ema_decay: f64,
    pub gan_warmup_steps: usize,
    pub l2_normalize_codes: bool,
    /// Global gradient-norm clip for both optimizers.
    pub grad_clip: f64,
    /// Multiplier on the softplus density output; larger values let
    /// surfaces become opaque in fewer optimizer steps.
    pub density_scale: f64,
    /// Stratified jitter during training; bin midpoints when false.
    pub train_jitter: bool,
    /// Linear lr warmup steps for both stage-1 optimizers.
    pub lr_warmup_steps: usize,

    // Loss weights.
    pub weight_rgb: f64,
    pub weight_perceptual: f64,
    pub weight_gan: f64,
    pub weight_vq: f64,
    pub weight_alpha: f64,
    pub weight_depth: f64,
    pub weight_semantic: f64,

    // Mesh extraction.
    pub mesh_grid_res: usize,
}

impl PipelineConfig {
    /// Small configuration: full pipeline in minutes on CPU.
    pub fn desk() -> PipelineConfig {
        PipelineConfig {
            preset: "desk".into(),
            seed: 0,
            image_resolution: 64,
            render_resolution: 64,
            latent_grid: 8,
            token_dim: 32,
            codebook_size: 512,
            plane_resolution: 64,
            plane_channels: 16,
            samples_uniform: 16,
            samples_importance: 8,
            density_threshold: 10.0,
            decode_steps: 8,
            commitment_weight: 0.25,
            r1_gamma: 1.0,
            scaled_box: true,
            depth_loss: false,
            semantic_field: false,
            encoder_embed: 128,
            encoder_hidden: 512,
            encoder_heads: 8,
            encoder_vit_blocks: 3,
            encoder_cross_blocks: 3,
            encoder_premask: true,
            token_hat_dim: 64,
            decoder_embed: 128,
            decoder_hidden: 512,
            decoder_heads: 8,
            decoder_blocks: 3,
            mapping_layers: 2,
            style_dim: 128,
            generator_channels: vec![128, 64, 32],
            field_hidden: 64,
            semantic_channels: 4,
            disc_channels: vec![16, 32, 64],
            stage2_layers: 4,
            stage2_heads: 8,
            stage2_embed: 128,
            stage2_hidden: 512,
            label_smoothing: 0.1,
            stage2_dropout: 0.1,
            n_classes: 4,
            n_times: 2,
            cond_proj_dim: 32,
            scale_embed_degree: 6,
            batch_size: 2,
            lr_generator: 3e-3,
            lr_discriminator: 3e-3,
            lr_stage2: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            stage2_beta1: 0.9,
            stage2_beta2: 0.96,
            ema_decay: 0.999,
            gan_warmup_steps: 500,
            l2_normalize_codes: true,
            grad_clip: 1.0,
            density_scale: 8.0,
            train_jitter: true,
            lr_warmup_steps: 30,
            weight_rgb: 1.0,
            weight_perceptual: 1.0,
            weight_gan: 1.0,
            weight_vq: 1.0,
            weight_alpha: 1.0,
            weight_depth: 1.0,
            weight_semantic: 1.0,
            mesh_grid_res: 64,
        }
    }

    /// Published architecture values.
    pub fn paper() -> PipelineConfig {
        PipelineConfig {
            preset: "paper".into(),
            seed: 0,
            image_resolution: 256,
            render_resolution: 128,
            latent_grid: 16,
            token_dim: 32,
            codebook_size: 2048,
            plane_resolution: 256,
            plane_channels: 32,
            samples_uniform: 24,
            samples_importance: 16,
            density_threshold: 10.0,
            decode_steps: 10,
            commitment_weight: 0.25,
            r1_gamma: 1.0,
            scaled_box: true,
            depth_loss: false,
            semantic_field: false,
            encoder_embed: 512,
            encoder_hidden: 2048,
            encoder_heads: 8,
            encoder_vit_blocks: 3,
            encoder_cross_blocks: 3,
            encoder_premask: true,
            token_hat_dim: 256,
            decoder_embed: 512,
            decoder_hidden: 2048,
            decoder_heads: 8,
            decoder_blocks: 3,
            mapping_layers: 8,
            style_dim: 512,
            generator_channels: vec![512, 256, 128],
            field_hidden: 64,
            semantic_channels: 64,
            disc_channels: vec![16, 32, 64, 128, 256],
            stage2_layers: 12,
            stage2_heads: 8,
            stage2_embed: 768,
            stage2_hidden: 3072,
            label_smoothing: 0.1,
            stage2_dropout: 0.1,
            n_classes: 4,
            n_times: 2,
            cond_proj_dim: 64,
            scale_embed_degree: 6,
            batch_size: 32,
            lr_generator: 1e-4,
            lr_discriminator: 2e-4,
            lr_stage2: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            stage2_beta1: 0.9,
            stage2_beta2: 0.96,
            ema_decay: 0.999,
            gan_warmup_steps: 500,
            l2_normalize_codes: true,
            grad_clip: 1.0,
            density_scale: 8.0,
            train_jitter: true,
            lr_warmup_steps: 30,
            weight_rgb: 1.0,
            weight_perceptual: 1.0,
            weight_gan: 1.0,
            weight_vq: 1.0,
            weight_alpha: 1.0,
            weight_depth: 1.0,
            weight_semantic: 1.0,
            mesh_grid_res: 128,
        }
    }

    pub fn preset(name: &str) -> Result<PipelineConfig> {
        match name {
            "desk" => Ok(PipelineConfig::desk()),
            "paper" => Ok(PipelineConfig::paper()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Total samples per ray after the importance pass.
    pub fn samples_total(&self) -> usize {
        self.samples_uniform + self.samples_importance
    }

    /// Token sequence length of the flattened latent grid.
    pub fn sequence_len(&self) -> usize {
        3 * self.latent_grid * self.latent_grid
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_resolution", self.image_resolution),
            ("render_resolution", self.render_resolution),
            ("latent_grid", self.latent_grid),
            ("token_dim", self.token_dim),
            ("codebook_size", self.codebook_size),
            ("plane_resolution", self.plane_resolution),
            ("plane_channels", self.plane_channels),
            ("samples_uniform", self.samples_uniform),
            ("decode_steps", self.decode_steps),
            ("batch_size", self.batch_size),
            ("mesh_grid_res", self.mesh_grid_res),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be strictly positive")));
            }
        }
        if self.render_resolution > self.image_resolution {
            return Err(Error::Config(format!(
                "render_resolution {} exceeds image_resolution {}",
                self.render_resolution, self.image_resolution
            )));
        }
        if self.image_resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "image_resolution {} must be divisible by the 16x16 patch size",
                self.image_resolution
            )));
        }
        if self.image_resolution % self.render_resolution != 0 {
            return Err(Error::Config(
                "image_resolution must be a multiple of render_resolution".into(),
            ));
        }
        if self.encoder_embed % self.encoder_heads != 0
            || self.decoder_embed % self.decoder_heads != 0
            || self.stage2_embed % self.stage2_heads != 0
        {
            return Err(Error::Config("embed dims must be divisible by head count".into()));
        }
        let ratio = self.plane_resolution / self.latent_grid;
        if self.plane_resolution % self.latent_grid != 0 || (ratio != 8 && ratio != 16) {
            return Err(Error::Config(format!(
                "plane_resolution / latent_grid must be 8 or 16, got {}/{}",
                self.plane_resolution, self.latent_grid
            )));
        }
        if self.generator_channels.len() != 3 {
            return Err(Error::Config("generator_channels must list 3 upsampling blocks".into()));
        }
        if self.semantic_field && self.semantic_channels == 0 {
            return Err(Error::Config("semantic_field requires semantic_channels > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Applies a JSON object of field overrides on top of this config.
    /// Unknown fields are rejected.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<PipelineConfig> {
        let obj = overrides
            .as_object()
            .ok_or_else(|| Error::Config("override file must hold a JSON object".into()))?;
        let mut merged = serde_json::to_value(self)?;
        let target = merged.as_object_mut().expect("config serializes to object");
        for (k, v) in obj {
            if !target.contains_key(k) {
                return Err(Error::Config(format!("unknown config field '{k}'")));
            }
            target.insert(k.clone(), v.clone());
        }
        let cfg: PipelineConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
