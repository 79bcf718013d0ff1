//! Checkpoint file: magic `GINA`, format version, a JSON header (kind,
//! config, step, optimizer scalars) and a self-describing named-tensor
//! table of f64 values. Loading reproduces parameters bit-exactly.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, ParamList};
use crate::stage1::{Stage1Model, Stage1Trainer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"GINA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: PipelineConfig,
    pub step: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Field-by-field comparison against an expected configuration; the
    /// first differing field is named in the error.
    pub fn validate_config(&self, expected: &PipelineConfig) -> Result<()> {
        let a = serde_json::to_value(&self.header.config)?;
        let b = serde_json::to_value(expected)?;
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        for (key, av) in a {
            if key == "seed" || key == "preset" {
                continue;
            }
            if let Some(bv) = b.get(key) {
                if av != bv {
                    return Err(Error::Checkpoint(format!(
                        "config field '{key}' mismatch: checkpoint has {av}, expected {bv}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&ckpt.header)?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, (dims, data)) in &ckpt.tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {} more)",
                path.display(),
                at,
                n
            )));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} but this build reads {}",
            path.display(),
            version,
            FORMAT_VERSION
        )));
    }
    let hlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut at, hlen)?)?;
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut at, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (dims, data));
    }
    Ok(Checkpoint { header, tensors })
}

fn insert_params(
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
    params: &ParamList,
) {
    for (name, t) in params.iter() {
        tensors.insert(format!("{prefix}.{name}"), (t.shape().to_vec(), t.to_vec()));
    }
}

fn insert_adam(
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
    opt: &Adam,
) {
    for (name, st) in &opt.state {
        tensors.insert(format!("{prefix}.m.{name}"), (vec![st.m.len()], st.m.clone()));
        tensors.insert(format!("{prefix}.v.{name}"), (vec![st.v.len()], st.v.clone()));
    }
}

fn restore_params(ckpt: &Checkpoint, prefix: &str, params: &ParamList) -> Result<()> {
    for (name, t) in params.iter() {
        let key = format!("{prefix}.{name}");
        let (dims, data) = ckpt.tensor(&key)?;
        if dims != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{key}' has shape {:?}, expected {:?}",
                dims,
                t.shape()
            )));
        }
        t.assign(data);
    }
    Ok(())
}

fn restore_adam(ckpt: &Checkpoint, prefix: &str, opt: &mut Adam, params: &ParamList) -> Result<()> {
    opt.state.clear();
    for (name, p) in params.iter() {
        let mk = format!("{prefix}.m.{name}");
        if let Ok((_, m)) = ckpt.tensor(&mk) {
            let (_, v) = ckpt.tensor(&format!("{prefix}.v.{name}"))?;
            if m.len() != p.len() {
                return Err(Error::Checkpoint(format!("optimizer state '{mk}' shape mismatch")));
            }
            opt.state.insert(name.clone(), AdamState { m: m.clone(), v: v.clone() });
        }
    }
    Ok(())
}

/// Serializes a stage-1 trainer: parameters, EMA shadow and both Adam
/// states.
pub fn save_stage1(path: &Path, trainer: &Stage1Trainer) -> Result<()> {
    let mut tensors = BTreeMap::new();
    insert_params(&mut tensors, "param", &trainer.model.all_params());
    for (name, shadow) in &trainer.ema.shadow {
        tensors.insert(format!("ema.{name}"), (vec![shadow.len()], shadow.clone()));
    }
    insert_adam(&mut tensors, "adam_g", &trainer.opt_g);
    insert_adam(&mut tensors, "adam_d", &trainer.opt_d);
    let header = CheckpointHeader {
        kind: "stage1".into(),
        config: trainer.model.config.clone(),
        step: trainer.step,
        extra: serde_json::json!({
            "adam_g_t": trainer.opt_g.t,
            "adam_d_t": trainer.opt_d.t,
        }),
    };
    save_checkpoint(path, &Checkpoint { header, tensors })
}

/// Restores a stage-1 trainer from a checkpoint file.
pub fn load_stage1(path: &Path) -> Result<Stage1Trainer> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.header.kind != "stage1" {
        return Err(Error::Checkpoint(format!(
            "expected a stage1 checkpoint, found kind '{}'",
            ckpt.header.kind
        )));
    }
    let model = Stage1Model::new(ckpt.header.config.clone())?;
    let mut trainer = Stage1Trainer::new(model);
    restore_params(&ckpt, "param", &trainer.model.all_params())?;
    let gparams = trainer.model.generator_params();
    for (name, shadow) in trainer.ema.shadow.iter_mut() {
        let (_, data) = ckpt.tensor(&format!("ema.{name}"))?;
        shadow.copy_from_slice(data);
    }
    restore_adam(&ckpt, "adam_g", &mut trainer.opt_g, &gparams)?;
    restore_adam(&ckpt, "adam_d", &mut trainer.opt_d, &trainer.model.discriminator_params())?;
    trainer.opt_g.t = ckpt.header.extra["adam_g_t"].as_u64().unwrap_or(0);
    trainer.opt_d.t = ckpt.header.extra["adam_d_t"].as_u64().unwrap_or(0);
    trainer.step = ckpt.header.step;
    Ok(trainer)
}

/// Loads only the model with EMA weights applied (for evaluation and
/// sampling).
pub fn load_stage1_ema(path: &Path) -> Result<Stage1Model> {
    let trainer = load_stage1(path)?;
    let gparams = trainer.model.generator_params();
    trainer.ema.apply_to(&gparams);
    Ok(trainer.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{draw_sample, GenOptions};

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

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gina");
        let model = Stage1Model::new(tiny_config()).unwrap();
        let trainer = Stage1Trainer::new(model);
        let before: Vec<(String, Vec<f64>)> = trainer
            .model
            .all_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        save_stage1(&path, &trainer).unwrap();
        let restored = load_stage1(&path).unwrap();
        let after: Vec<(String, Vec<f64>)> = restored
            .model
            .all_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        assert_eq!(before.len(), after.len());
        for ((n1, v1), (n2, v2)) in before.iter().zip(&after) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "tensor {n1} changed across round trip");
        }
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gina");
        let mut cfg = tiny_config();
        cfg.codebook_size = 32;
        let trainer = Stage1Trainer::new(Stage1Model::new(cfg.clone()).unwrap());
        save_stage1(&path, &trainer).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut expected = cfg;
        expected.codebook_size = 2048;
        let err = ckpt.validate_config(&expected).unwrap_err();
        assert!(err.to_string().contains("codebook_size"), "{err}");
    }

    #[test]
    fn version_mismatch_is_fatal_with_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gina");
        let trainer = Stage1Trainer::new(Stage1Model::new(tiny_config()).unwrap());
        save_stage1(&path, &trainer).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = match load_stage1(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("version mismatch must fail"),
        };
        assert!(err.contains("99") && err.contains('1'), "{err}");
    }

    #[test]
    fn truncated_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gina");
        let trainer = Stage1Trainer::new(Stage1Model::new(tiny_config()).unwrap());
        save_stage1(&path, &trainer).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = match load_stage1(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("truncated file must fail"),
        };
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn resume_equals_uninterrupted_training() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.gina");
        let opts = GenOptions {
            resolution: 32,
            occlusion_prob: 0.0,
            ..GenOptions::new(32)
        };
        let sample = draw_sample(55, 0, &opts).unwrap().sample;

        // Two uninterrupted steps.
        let mut straight = Stage1Trainer::new(Stage1Model::new(tiny_config()).unwrap());
        straight.train_step(&[sample.clone()]).unwrap();
        straight.train_step(&[sample.clone()]).unwrap();

        // One step, checkpoint, restore, one more step.
        let mut first = Stage1Trainer::new(Stage1Model::new(tiny_config()).unwrap());
        first.train_step(&[sample.clone()]).unwrap();
        save_stage1(&path, &first).unwrap();
        let mut resumed = load_stage1(&path).unwrap();
        resumed.train_step(&[sample]).unwrap();

        let a = straight.model.all_params();
        let b = resumed.model.all_params();
        for ((n1, t1), (n2, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "divergence in {n1}");
        }
    }
}
