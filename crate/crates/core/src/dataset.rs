//! Dataset directory format: `manifest.json` plus one folder per sample
//! holding `image.png`, `mask.png`, `skyroad.png`, `meta.json` and optional
//! `depth.bin` / `semantic.bin` (two little-endian u32 dims, then f32 values
//! row-major; invalid depth pixels are stored as -1.0).

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::sample::{DepthMap, FeatureMap, Mask, ObjectSample, RgbImage, TimeOfDay};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub samples: Vec<String>,
    #[serde(default)]
    pub metadata: ManifestMetadata,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ManifestMetadata {
    pub image_resolution: usize,
    pub d_sem: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub camera: Camera,
    pub scale: [f64; 3],
    pub class_label: usize,
    pub time_of_day: TimeOfDay,
    pub visibility: f64,
    #[serde(default)]
    pub lighting: f64,
    #[serde(default)]
    pub d_sem: usize,
}

pub struct LoadedDataset {
    pub samples: Vec<ObjectSample>,
    /// (sample id, reason) for records that failed validation.
    pub rejected: Vec<(String, String)>,
    pub manifest: Manifest,
}

fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let c = img.get(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set(y, x, [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]);
        }
    }
    Ok(out)
}

fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.w as u32, mask.h as u32);
    for y in 0..mask.h {
        for x in 0..mask.w {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.get(y, x) { 255 } else { 0 }]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.get_pixel(x as u32, y as u32)[0] >= 128);
        }
    }
    Ok(out)
}

/// Raw binary: u32 rows, u32 cols, then rows*cols little-endian f32.
pub fn write_bin_f32(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), rows * cols);
    let mut bytes = Vec::with_capacity(8 + values.len() * 4);
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_bin_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Dataset(format!("{}: truncated header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes for {}x{}, found {}",
            path.display(),
            expect,
            rows,
            cols,
            bytes.len()
        )));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("{index:06}"))
}

/// Writes one sample folder. The id inside `meta.json` must match the
/// manifest entry.
pub fn save_sample(dir: &Path, sample: &ObjectSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png_rgb(&dir.join("image.png"), &sample.image)?;
    write_png_mask(&dir.join("mask.png"), &sample.object_mask)?;
    write_png_mask(&dir.join("skyroad.png"), &sample.skyroad_mask)?;
    if let Some(d) = &sample.depth {
        let vals: Vec<f32> = d
            .values
            .iter()
            .zip(&d.valid)
            .map(|(&v, &ok)| if ok { v as f32 } else { -1.0 })
            .collect();
        write_bin_f32(&dir.join("depth.bin"), d.h, d.w, &vals)?;
    }
    if let Some(s) = &sample.semantic {
        let vals: Vec<f32> = s.data.iter().map(|&v| v as f32).collect();
        write_bin_f32(&dir.join("semantic.bin"), s.h, s.w * s.channels, &vals)?;
    }
    let meta = SampleMeta {
        id: sample.id.clone(),
        camera: sample.camera.clone(),
        scale: sample.scale,
        class_label: sample.class_label,
        time_of_day: sample.time_of_day,
        visibility: sample.visibility,
        lighting: 0.0,
        d_sem: sample.semantic.as_ref().map(|s| s.channels).unwrap_or(0),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

fn load_sample(dir: &Path) -> Result<ObjectSample> {
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let image = read_png_rgb(&dir.join("image.png"))?;
    let object_mask = read_png_mask(&dir.join("mask.png"))?;
    let skyroad_mask = read_png_mask(&dir.join("skyroad.png"))?;
    let depth_path = dir.join("depth.bin");
    let depth = if depth_path.exists() {
        let (h, w, vals) = read_bin_f32(&depth_path)?;
        let valid: Vec<bool> = vals.iter().map(|&v| v >= 0.0).collect();
        Some(DepthMap {
            h,
            w,
            values: vals.iter().map(|&v| if v >= 0.0 { v as f64 } else { 0.0 }).collect(),
            valid,
        })
    } else {
        None
    };
    let sem_path = dir.join("semantic.bin");
    let semantic = if sem_path.exists() && meta.d_sem > 0 {
        let (h, wc, vals) = read_bin_f32(&sem_path)?;
        if wc % meta.d_sem != 0 {
            return Err(Error::Dataset(format!(
                "{}: semantic width {} not divisible by d_sem {}",
                dir.display(),
                wc,
                meta.d_sem
            )));
        }
        Some(FeatureMap {
            h,
            w: wc / meta.d_sem,
            channels: meta.d_sem,
            data: vals.iter().map(|&v| v as f64).collect(),
        })
    } else {
        None
    };
    let sample = ObjectSample {
        id: meta.id,
        image,
        object_mask,
        skyroad_mask,
        camera: meta.camera,
        scale: meta.scale,
        depth,
        semantic,
        class_label: meta.class_label,
        time_of_day: meta.time_of_day,
        visibility: meta.visibility,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every manifest entry in order. A missing manifest is fatal; a
/// sample that fails validation is skipped and reported in `rejected`.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let manifest_path = root.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Error::Dataset(format!(
            "missing manifest: {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut rejected = Vec::new();
    for name in &manifest.samples {
        let dir = root.join(name);
        match load_sample(&dir) {
            Ok(s) => samples.push(s),
            Err(e) => rejected.push((name.clone(), e.to_string())),
        }
    }
    Ok(LoadedDataset { samples, rejected, manifest })
}

/// Writes samples in order with zero-padded folder names and a manifest.
pub fn save_dataset(root: &Path, samples: &[ObjectSample], metadata: ManifestMetadata) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let dir = sample_dir(root, i);
        save_sample(&dir, s)?;
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = Manifest {
        format_version: 1,
        samples: names,
        metadata,
    };
    fs::write(root.join(MANIFEST_NAME), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;

    fn sample_with_pattern(id: &str, n: usize) -> ObjectSample {
        let mut image = RgbImage::new(n, n);
        let mut object_mask = Mask::new(n, n);
        let mut skyroad_mask = Mask::new(n, n);
        for y in 0..n {
            for x in 0..n {
                image.set(y, x, [
                    (x as f64) / (n - 1) as f64,
                    (y as f64) / (n - 1) as f64,
                    ((x + y) % 7) as f64 / 6.0,
                ]);
                if x >= n / 4 && x < 3 * n / 4 && y >= n / 4 && y < 3 * n / 4 {
                    object_mask.set(y, x, true);
                } else if y < n / 8 {
                    skyroad_mask.set(y, x, true);
                }
            }
        }
        let mut depth = DepthMap::invalid(n, n);
        for i in 0..depth.values.len() {
            if object_mask.data[i] {
                depth.values[i] = 4.0 + (i % 10) as f64 * 0.125;
                depth.valid[i] = true;
            }
        }
        ObjectSample {
            id: id.into(),
            image,
            object_mask,
            skyroad_mask,
            camera: Camera::orbit(0.3, 0.4, 5.0, n, 1.2, 0.7),
            scale: [2.0, 1.0, 1.5],
            depth: Some(depth),
            semantic: None,
            class_label: 1,
            time_of_day: TimeOfDay::Night,
            visibility: 0.9,
        }
    }

    #[test]
    fn missing_manifest_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let err = match load_dataset(dir.path()) {
            Err(e) => e,
            Ok(_) => panic!("missing manifest must fail"),
        };
        assert!(err.to_string().contains("missing manifest"));
    }

    #[test]
    fn empty_manifest_loads_empty_collection() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[], ManifestMetadata::default()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.samples.is_empty());
        assert!(loaded.rejected.is_empty());
    }

    #[test]
    fn three_records_round_trip_in_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let originals = vec![
            sample_with_pattern("a", 16),
            sample_with_pattern("b", 16),
            sample_with_pattern("c", 16),
        ];
        save_dataset(dir.path(), &originals, ManifestMetadata::default()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 3);
        assert!(loaded.rejected.is_empty());
        for (orig, got) in originals.iter().zip(&loaded.samples) {
            assert_eq!(orig.id, got.id);
            // 8-bit PNG quantization is exact for multiples of 1/255; the
            // pattern uses arbitrary values, so images compare at
            // quantization tolerance while masks and meta are exact.
            for (a, b) in orig.image.data.iter().zip(&got.image.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
            assert_eq!(orig.object_mask, got.object_mask);
            assert_eq!(orig.skyroad_mask, got.skyroad_mask);
            assert_eq!(orig.scale, got.scale);
            assert_eq!(orig.class_label, got.class_label);
            assert_eq!(orig.time_of_day, got.time_of_day);
            let (od, gd) = (orig.depth.as_ref().unwrap(), got.depth.as_ref().unwrap());
            assert_eq!(od.valid, gd.valid);
            for (a, b) in od.values.iter().zip(&gd.values) {
                assert!((a - b).abs() < 1e-6); // f32 storage
            }
        }
        // Byte-identical arrays after a save/load/save round trip.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded.samples, ManifestMetadata::default()).unwrap();
        let reloaded = load_dataset(dir2.path()).unwrap();
        for (a, b) in loaded.samples.iter().zip(&reloaded.samples) {
            assert_eq!(a.image.data, b.image.data);
            assert_eq!(a.object_mask.data, b.object_mask.data);
            assert_eq!(
                a.depth.as_ref().unwrap().values,
                b.depth.as_ref().unwrap().values
            );
        }
    }

    #[test]
    fn overlapping_mask_record_is_rejected_others_load() {
        let dir = tempfile::tempdir().unwrap();
        let good = sample_with_pattern("good", 16);
        let mut bad = sample_with_pattern("bad", 16);
        let (y, x) = (8, 8); // inside object region
        bad.skyroad_mask.set(y, x, true);
        assert!(bad.object_mask.get(y, x));
        // Write manually: save_sample does not validate, load does.
        fs::create_dir_all(dir.path()).unwrap();
        save_sample(&sample_dir(dir.path(), 0), &good).unwrap();
        save_sample(&sample_dir(dir.path(), 1), &bad).unwrap();
        let manifest = Manifest {
            format_version: 1,
            samples: vec!["000000".into(), "000001".into()],
            metadata: ManifestMetadata::default(),
        };
        fs::write(
            dir.path().join(MANIFEST_NAME),
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 1);
        assert_eq!(loaded.samples[0].id, "good");
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].0, "000001");
        assert!(loaded.rejected[0].1.contains("overlaps"));
    }
}
