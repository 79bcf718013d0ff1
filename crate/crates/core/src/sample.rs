//! Training-record domain types: images, masks, depth and feature maps,
//! conditioning payloads.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// H x W x 3 image, values in [0,1], row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> RgbImage {
        RgbImage { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = c[0];
        self.data[i + 1] = c[1];
        self.data[i + 2] = c[2];
    }

    /// [H, W, 3] tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.h, self.w, 3], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> RgbImage {
        let s = t.shape();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2], 3);
        RgbImage { h: s[0], w: s[1], data: t.to_vec() }
    }

    /// Area-average downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> RgbImage {
        assert!(factor >= 1 && self.h % factor == 0 && self.w % factor == 0);
        if factor == 1 {
            return self.clone();
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut out = RgbImage::new(oh, ow);
        let inv = 1.0 / (factor * factor) as f64;
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let c = self.get(y * factor + dy, x * factor + dx);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                out.set(y, x, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        out
    }
}

/// H x W binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// [H, W] tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.h, self.w],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Majority-vote downsampling (>= 0.5 coverage). Ties across two masks
    /// are resolved by the caller keeping them disjoint.
    pub fn downsample_fraction(&self, factor: usize) -> Vec<f64> {
        assert!(self.h % factor == 0 && self.w % factor == 0);
        let (oh, ow) = (self.h / factor, self.w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        if self.get(y * factor + dy, x * factor + dx) {
                            acc += 1.0;
                        }
                    }
                }
                out[y * ow + x] = acc * inv;
            }
        }
        out
    }
}

/// Depth in meters with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(h: usize, w: usize) -> DepthMap {
        DepthMap { h, w, values: vec![0.0; h * w], valid: vec![false; h * w] }
    }
}

/// H x W x C feature map (precomputed semantic embeddings).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
}

impl TimeOfDay {
    pub fn index(self) -> usize {
        match self {
            TimeOfDay::Day => 0,
            TimeOfDay::Night => 1,
        }
    }
}

/// One training record: image, masks, camera, object scale and optional
/// supervision channels, plus the condition labels stored in its metadata.
#[derive(Clone, Debug)]
pub struct ObjectSample {
    pub id: String,
    pub image: RgbImage,
    pub object_mask: Mask,
    pub skyroad_mask: Mask,
    pub camera: Camera,
    /// Box extents (s_x, s_y, s_z) in meters, strictly positive.
    pub scale: [f64; 3],
    pub depth: Option<DepthMap>,
    pub semantic: Option<FeatureMap>,
    pub class_label: usize,
    pub time_of_day: TimeOfDay,
    /// Fraction of the occluder-free silhouette left visible.
    pub visibility: f64,
}

impl ObjectSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.h, self.image.w);
        let fail = |reason: String| -> Result<()> {
            Err(Error::InvalidSample { id: self.id.clone(), reason })
        };
        if self.object_mask.h != h || self.object_mask.w != w {
            return fail(format!(
                "object_mask shape {}x{} does not match image {}x{}",
                self.object_mask.h, self.object_mask.w, h, w
            ));
        }
        if self.skyroad_mask.h != h || self.skyroad_mask.w != w {
            return fail(format!(
                "skyroad_mask shape {}x{} does not match image {}x{}",
                self.skyroad_mask.h, self.skyroad_mask.w, h, w
            ));
        }
        if self.object_mask.intersects(&self.skyroad_mask) {
            return fail("object_mask overlaps skyroad_mask".into());
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return fail(format!("non-positive scale {:?}", self.scale));
        }
        if self.image.data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return fail("image values outside [0,1]".into());
        }
        if let Some(d) = &self.depth {
            if d.h != h || d.w != w {
                return fail("depth shape mismatch".into());
            }
            for i in 0..d.values.len() {
                if d.valid[i] && (!d.values[i].is_finite() || d.values[i] < 0.0) {
                    return fail("negative or non-finite valid depth".into());
                }
            }
        }
        if let Some(s) = &self.semantic {
            if s.h != h || s.w != w {
                return fail("semantic shape mismatch".into());
            }
        }
        Ok(())
    }

    /// Object pixels kept, everything else white.
    pub fn whitened_image(&self) -> RgbImage {
        let mut out = self.image.clone();
        for y in 0..out.h {
            for x in 0..out.w {
                if !self.object_mask.get(y, x) {
                    out.set(y, x, [1.0, 1.0, 1.0]);
                }
            }
        }
        out
    }
}

/// Conditioning payload for stage-2 sampling. The enum layout guarantees
/// exactly one payload matching the kind.
#[derive(Clone, Debug)]
pub enum ConditionSpec {
    None,
    Discrete { value: usize },
    Continuous { vector: Vec<f64> },
    Image { source: Box<ObjectSample>, mask_ratio: f64 },
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConditionSpec::Image { mask_ratio, .. } => {
                if !(0.0..=1.0).contains(mask_ratio) {
                    return Err(Error::Config(format!(
                        "mask_ratio {mask_ratio} outside [0,1]"
                    )));
                }
                Ok(())
            }
            ConditionSpec::Continuous { vector } => {
                if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("continuous condition must be finite and non-empty".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;

    pub fn tiny_sample(id: &str, h: usize, w: usize) -> ObjectSample {
        let mut object_mask = Mask::new(h, w);
        object_mask.set(1, 1, true);
        let mut skyroad_mask = Mask::new(h, w);
        skyroad_mask.set(0, 0, true);
        ObjectSample {
            id: id.into(),
            image: RgbImage::new(h, w),
            object_mask,
            skyroad_mask,
            camera: Camera::orbit(0.0, 0.3, 5.0, w, 1.0, 0.6),
            scale: [1.0, 1.0, 1.0],
            depth: None,
            semantic: None,
            class_label: 0,
            time_of_day: TimeOfDay::Day,
            visibility: 1.0,
        }
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let mut s = tiny_sample("s0", 4, 4);
        s.skyroad_mask.set(1, 1, true);
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("overlaps"));
    }

    #[test]
    fn non_positive_scale_rejected() {
        let mut s = tiny_sample("s1", 4, 4);
        s.scale = [1.0, 0.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn downsample_averages_area() {
        let mut img = RgbImage::new(2, 2);
        img.set(0, 0, [1.0, 0.0, 0.0]);
        img.set(0, 1, [0.0, 1.0, 0.0]);
        img.set(1, 0, [0.0, 0.0, 1.0]);
        img.set(1, 1, [1.0, 1.0, 1.0]);
        let d = img.downsample(2);
        assert_eq!(d.get(0, 0), [0.5, 0.5, 0.5]);
    }
}
