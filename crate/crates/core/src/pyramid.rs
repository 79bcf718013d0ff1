//! Fixed seeded random convolutional pyramid: the default perceptual
//! distance for stage-1 training and the default deterministic embedding
//! backend for the metrics suite. Weights are frozen constants drawn once
//! from the seed, so distances and embeddings are reproducible everywhere
//! without pretrained checkpoints.

use crate::error::{Error, Result};
use crate::nn::{normal, stream};
use crate::sample::RgbImage;
use crate::tensor::{no_grad, Tensor};

pub struct ConvPyramid {
    /// Frozen conv weights per level, [Cout, Cin, 3, 3].
    levels: Vec<Tensor>,
}

impl ConvPyramid {
    pub fn new(seed: u64, channels: &[usize]) -> ConvPyramid {
        let mut rng = stream(seed, "conv-pyramid", 0);
        let mut levels = Vec::with_capacity(channels.len());
        let mut cin = 3usize;
        for &cout in channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            levels.push(Tensor::from_vec(
                &[cout, cin, 3, 3],
                (0..cout * cin * 9).map(|_| std * normal(&mut rng)).collect(),
            ));
            cin = cout;
        }
        ConvPyramid { levels }
    }

    /// Default three-level pyramid ending at 64 channels.
    pub fn standard(seed: u64) -> ConvPyramid {
        ConvPyramid::new(seed, &[16, 32, 64])
    }

    pub fn out_channels(&self) -> usize {
        self.levels.last().map(|w| w.shape()[0]).unwrap_or(3)
    }

    fn min_resolution(&self) -> usize {
        1 << self.levels.len()
    }

    /// Per-level feature maps of an [H, W, 3] image tensor; gradients flow
    /// to the image, never to the frozen weights.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("pyramid expects [H,W,3], got {:?}", s)));
        }
        let (h, w) = (s[0], s[1]);
        let m = self.min_resolution();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "pyramid input {}x{} must be divisible by {}",
                h, w, m
            )));
        }
        // HWC -> NCHW
        let mut x = hwc_to_nchw(image);
        let mut out = Vec::with_capacity(self.levels.len());
        for weight in &self.levels {
            x = x.conv2d(weight, 1).leaky_relu(0.2).avg_pool2();
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Mean squared feature distance across all pyramid levels.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = Tensor::scalar(0.0);
        for (x, y) in fa.iter().zip(&fb) {
            total = total.add(&x.sub(y).square().mean_all());
        }
        Ok(total)
    }

    /// Global-average-pooled top-level features: a deterministic fixed-size
    /// image embedding.
    pub fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        no_grad(|| {
            let feats = self.features(&image.to_tensor())?;
            let top = feats.last().expect("pyramid has levels");
            let s = top.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let d = top.data();
            let mut out = vec![0.0; c];
            for ch in 0..c {
                out[ch] = d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
            Ok(out)
        })
    }
}

fn hwc_to_nchw(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    // [H*W, C] -> transpose -> [C, H*W] -> [1, C, H, W]
    image
        .reshape(&[h * w, c])
        .transpose2d()
        .reshape(&[1, c, h, w])
}

/// Pluggable perceptual distance used by the reconstruction loss.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    /// Distance between two [H, W, 3] tensors; differentiable in both.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

pub struct PyramidPerceptual {
    pyramid: ConvPyramid,
}

impl PyramidPerceptual {
    pub fn new(seed: u64) -> PyramidPerceptual {
        PyramidPerceptual { pyramid: ConvPyramid::standard(seed) }
    }
}

impl PerceptualBackend for PyramidPerceptual {
    fn name(&self) -> &str {
        "random-pyramid"
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.pyramid.distance(a, b)
    }
}

/// Deterministic image embedding backend (stand-in for pretrained
/// Inception/CLIP towers; adapters can implement the same trait).
pub trait EmbeddingBackend {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

pub struct PyramidEmbedding {
    pyramid: ConvPyramid,
}

impl PyramidEmbedding {
    pub fn new(seed: u64) -> PyramidEmbedding {
        PyramidEmbedding { pyramid: ConvPyramid::standard(seed) }
    }
}

impl EmbeddingBackend for PyramidEmbedding {
    fn name(&self) -> &str {
        "random-pyramid-gap"
    }

    fn dim(&self) -> usize {
        self.pyramid.out_channels()
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.pyramid.embed(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(n: usize, phase: f64) -> RgbImage {
        let mut img = RgbImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let v = ((x + y) as f64 / (2 * n) as f64 + phase).fract();
                img.set(y, x, [v, 1.0 - v, 0.5 * v]);
            }
        }
        img
    }

    #[test]
    fn distance_is_zero_on_identical_inputs_and_positive_otherwise() {
        let p = PyramidPerceptual::new(0);
        let a = ramp_image(32, 0.0).to_tensor();
        let b = ramp_image(32, 0.3).to_tensor();
        assert_eq!(p.distance(&a, &a).unwrap().item(), 0.0);
        assert!(p.distance(&a, &b).unwrap().item() > 0.0);
    }

    #[test]
    fn embeddings_are_deterministic_and_fixed_dim() {
        let e = PyramidEmbedding::new(7);
        let img = ramp_image(64, 0.2);
        let v1 = e.embed(&img).unwrap();
        let v2 = PyramidEmbedding::new(7).embed(&img).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), e.dim());
        assert_eq!(e.dim(), 64);
        // Different seed, different backend.
        let v3 = PyramidEmbedding::new(8).embed(&img).unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn perceptual_gradient_flows_to_images() {
        let p = PyramidPerceptual::new(1);
        let a = ramp_image(16, 0.0).to_tensor().requires_grad();
        let b = ramp_image(16, 0.4).to_tensor();
        let d = p.distance(&a, &b).unwrap();
        let g = crate::tensor::backward(&d).wrt(&a);
        let norm: f64 = g.to_vec().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }
}
