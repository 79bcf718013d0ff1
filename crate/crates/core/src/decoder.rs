//! 3D-to-2D decoder, first half: a token transformer with CLS over the
//! quantized tri-plane latents, a mapping network from the CLS token to the
//! intermediate latent space, and per-plane style-based generators with
//! weight-modulated convolutions that upsample the latent grid to the
//! tri-plane feature maps.

use crate::config::PipelineConfig;
use crate::nn::{
    normal, stream, HasParams, Init, LayerNorm, Linear, ParamList, Rng, TransformerBlock,
};
use crate::tensor::Tensor;

/// Decoded feature planes, ordered xy, xz, yz: [3, D_H, N_H, N_H].
pub struct TriPlaneFeatures {
    pub planes: Tensor,
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderDims {
    pub latent_grid: usize,
    pub token_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub token_hat_dim: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub generator_channels: Vec<usize>,
    pub plane_channels: usize,
    pub plane_resolution: usize,
    pub field_hidden: usize,
    pub semantic_channels: usize,
    pub density_scale: f64,
}

impl DecoderDims {
    pub fn from_config(cfg: &PipelineConfig) -> DecoderDims {
        DecoderDims {
            latent_grid: cfg.latent_grid,
            token_dim: cfg.token_dim,
            embed: cfg.decoder_embed,
            hidden: cfg.decoder_hidden,
            heads: cfg.decoder_heads,
            blocks: cfg.decoder_blocks,
            token_hat_dim: cfg.token_hat_dim,
            style_dim: cfg.style_dim,
            mapping_layers: cfg.mapping_layers,
            generator_channels: cfg.generator_channels.clone(),
            plane_channels: cfg.plane_channels,
            plane_resolution: cfg.plane_resolution,
            field_hidden: cfg.field_hidden,
            semantic_channels: if cfg.semantic_field { cfg.semantic_channels } else { 0 },
            density_scale: cfg.density_scale,
        }
    }

    pub fn cells(&self) -> usize {
        3 * self.latent_grid * self.latent_grid
    }

    /// True when the stem must upsample (plane/latent ratio 16).
    pub fn stem_upsamples(&self) -> bool {
        self.plane_resolution / self.latent_grid == 16
    }
}

pub struct TokenTransformer {
    in_proj: Linear,
    pos_embed: Tensor, // [cells + 1, embed]
    cls_token: Tensor,
    blocks: Vec<TransformerBlock>,
    out_proj: Linear,
    out_norm: LayerNorm,
}

impl TokenTransformer {
    fn new(rng: &mut Rng, d: &DecoderDims) -> TokenTransformer {
        let cells = d.cells();
        TokenTransformer {
            in_proj: Linear::new(rng, d.token_dim, d.embed, Init::XavierUniform),
            pos_embed: Tensor::leaf(
                &[cells + 1, d.embed],
                (0..(cells + 1) * d.embed).map(|_| 0.02 * normal(rng)).collect(),
            ),
            cls_token: Tensor::leaf(&[1, d.embed], (0..d.embed).map(|_| 0.02 * normal(rng)).collect()),
            blocks: (0..d.blocks)
                .map(|_| TransformerBlock::new(rng, d.embed, d.heads, d.hidden, Init::XavierUniform))
                .collect(),
            out_proj: Linear::new(rng, d.embed, d.token_hat_dim, Init::XavierUniform),
            out_norm: LayerNorm::new(d.token_hat_dim),
        }
    }

    /// z[cells, D_tok] -> (features [cells, D_hat], cls [1, D_hat]).
    pub fn forward(&self, z: &Tensor) -> (Tensor, Tensor) {
        let tokens = self.in_proj.forward(z);
        let mut x = Tensor::concat_rows(&[tokens, self.cls_token.clone()]).add(&self.pos_embed);
        for b in &self.blocks {
            x = b.forward_self(&x);
        }
        let out = self.out_norm.forward(&self.out_proj.forward(&x)).tanh();
        let cells = z.rows();
        (out.slice_rows(0, cells), out.slice_rows(cells, 1))
    }
}

impl HasParams for TokenTransformer {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        let p = |n: &str| format!("{prefix}.{n}");
        self.in_proj.collect(&p("in_proj"), out);
        out.push(p("pos_embed"), &self.pos_embed);
        out.push(p("cls_token"), &self.cls_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&p(&format!("blocks.{i}")), out);
        }
        self.out_proj.collect(&p("out_proj"), out);
        self.out_norm.collect(&p("out_norm"), out);
    }
}

/// Fully-connected stack with leaky-relu mapping the CLS token into the
/// intermediate latent space W.
pub struct MappingNetwork {
    layers: Vec<Linear>,
}

impl MappingNetwork {
    fn new(rng: &mut Rng, input: usize, width: usize, layers: usize) -> MappingNetwork {
        let mut v = Vec::with_capacity(layers);
        for i in 0..layers {
            let inp = if i == 0 { input } else { width };
            v.push(Linear::new(rng, inp, width, Init::XavierUniform));
        }
        MappingNetwork { layers: v }
    }

    /// cls [1, D_hat] -> w [1, style_dim].
    pub fn forward(&self, cls: &Tensor) -> Tensor {
        let mut x = cls.clone();
        for l in &self.layers {
            x = l.forward(&x).leaky_relu(0.2);
        }
        x
    }
}

impl HasParams for MappingNetwork {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Weight-modulated 3x3 convolution: the style vector scales input
/// channels, and (optionally) the output is demodulated so per-sample
/// feature magnitudes stay unit-ish.
pub struct ModulatedConv {
    pub weight: Tensor, // [Cout, Cin, 3, 3]
    pub bias: Tensor,   // [Cout]
    pub affine: Linear, // style -> per-input-channel scale, bias starts at 1
    pub demodulate: bool,
}

impl ModulatedConv {
    fn new(rng: &mut Rng, cin: usize, cout: usize, style_dim: usize, demodulate: bool) -> Self {
        let fan_in = cin * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::leaf(
            &[cout, cin, 3, 3],
            (0..cout * fan_in).map(|_| std * normal(rng)).collect(),
        );
        let affine = Linear::new(rng, style_dim, cin, Init::XavierUniform);
        affine.bias.as_ref().unwrap().assign(&vec![1.0; cin]);
        ModulatedConv {
            weight,
            bias: Tensor::leaf(&[cout], vec![0.0; cout]),
            affine,
            demodulate,
        }
    }

    /// x[N, Cin, H, W], w_style[N, style_dim] -> [N, Cout, H, W].
    pub fn forward(&self, x: &Tensor, w_style: &Tensor) -> Tensor {
        let cout = self.weight.shape()[0];
        let cin = self.weight.shape()[1];
        let style = self.affine.forward(w_style); // [N, Cin]
        let modulated = x.mul_sample_chan(&style);
        let mut y = modulated.conv2d(&self.weight, 1);
        if self.demodulate {
            // d[n,o] = rsqrt( sum_{c,k} (w[o,c,k] * s[n,c])^2 + eps )
            let wsq = self
                .weight
                .square()
                .reshape(&[cout * cin, 9])
                .sum_cols()
                .reshape(&[cout, cin]); // [Cout, Cin]
            let s2 = style.square(); // [N, Cin]
            let den = s2.matmul(&wsq.transpose2d()).add_scalar(1e-8); // [N, Cout]
            let d = den.sqrt_elem().recip();
            y = y.mul_sample_chan(&d);
        }
        y.add_chan_bias(&self.bias)
    }
}

impl HasParams for ModulatedConv {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push(format!("{prefix}.weight"), &self.weight);
        out.push(format!("{prefix}.bias"), &self.bias);
        self.affine.collect(&format!("{prefix}.affine"), out);
    }
}

/// One plane's generator: stem conv at the latent grid (upsampling x2 at
/// the paper ratio), three upsampling blocks of two modulated convs each,
/// and a final projection to the feature channels.
pub struct PlaneGenerator {
    stem: ModulatedConv,
    stem_upsample: bool,
    blocks: Vec<ModulatedConv>,
    to_features: ModulatedConv,
}

impl PlaneGenerator {
    fn new(rng: &mut Rng, d: &DecoderDims) -> PlaneGenerator {
        let ch = &d.generator_channels;
        let mut blocks = Vec::with_capacity(ch.len());
        let mut prev = ch[0];
        for &c in ch {
            blocks.push(ModulatedConv::new(rng, prev, c, d.style_dim, true));
            prev = c;
        }
        PlaneGenerator {
            stem: ModulatedConv::new(rng, d.token_hat_dim, ch[0], d.style_dim, true),
            stem_upsample: d.stem_upsamples(),
            blocks,
            // Demodulated as well: keeps feature magnitudes bounded so the
            // field head cannot saturate early in training.
            to_features: ModulatedConv::new(rng, prev, d.plane_channels, d.style_dim, true),
        }
    }

    /// input [1, D_hat, N_Z, N_Z] -> [1, D_H, N_H, N_H].
    pub fn forward(&self, x: &Tensor, w_style: &Tensor) -> Tensor {
        let mut x = self.stem.forward(x, w_style).leaky_relu(0.2);
        if self.stem_upsample {
            x = x.upsample_bilinear2();
        }
        for b in &self.blocks {
            x = b.forward(&x.upsample_bilinear2(), w_style).leaky_relu(0.2);
        }
        self.to_features.forward(&x, w_style)
    }
}

impl HasParams for PlaneGenerator {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blocks.{i}"), out);
        }
        self.to_features.collect(&format!("{prefix}.to_features"), out);
    }
}

/// Shallow field head: tri-plane feature -> (density, color, optional
/// semantic features). Softplus activations keep gradients smooth.
pub struct FieldMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub semantic_channels: usize,
    pub density_scale: f64,
}

impl FieldMlp {
    fn new(rng: &mut Rng, d: &DecoderDims) -> FieldMlp {
        FieldMlp {
            fc1: Linear::new(rng, d.plane_channels, d.field_hidden, Init::XavierUniform),
            fc2: Linear::new(
                rng,
                d.field_hidden,
                1 + 3 + d.semantic_channels,
                Init::XavierUniform,
            ),
            semantic_channels: d.semantic_channels,
            density_scale: d.density_scale,
        }
    }

    /// features [P, D_H] -> (sigma [P,1] >= 0, rgb [P,3] in [0,1],
    /// optional feat [P, D_sem]).
    pub fn forward(&self, features: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
        let h = self.fc1.forward(features).softplus();
        let out = self.fc2.forward(&h);
        let sigma = out.slice_cols(0, 1).softplus().scale(self.density_scale);
        let rgb = out.slice_cols(1, 3).sigmoid();
        let feat = if self.semantic_channels > 0 {
            Some(out.slice_cols(4, self.semantic_channels).sigmoid())
        } else {
            None
        };
        (sigma, rgb, feat)
    }
}

impl HasParams for FieldMlp {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}

pub struct Decoder {
    pub dims: DecoderDims,
    pub token: TokenTransformer,
    pub mapping: MappingNetwork,
    pub generators: Vec<PlaneGenerator>,
    pub field: FieldMlp,
}

impl Decoder {
    pub fn new(seed: u64, dims: DecoderDims) -> Decoder {
        let mut rng = stream(seed, "decoder", 0);
        Decoder {
            token: TokenTransformer::new(&mut rng, &dims),
            mapping: MappingNetwork::new(&mut rng, dims.token_hat_dim, dims.style_dim, dims.mapping_layers),
            generators: (0..3).map(|_| PlaneGenerator::new(&mut rng, &dims)).collect(),
            field: FieldMlp::new(&mut rng, &dims),
            dims,
        }
    }

    /// Quantized latents [cells, D_tok] -> (z_hat [cells, D_hat], cls).
    pub fn token_transform(&self, z: &Tensor) -> (Tensor, Tensor) {
        assert_eq!(z.rows(), self.dims.cells());
        assert_eq!(z.cols(), self.dims.token_dim);
        self.token.forward(z)
    }

    /// (z_hat, cls) -> tri-plane feature maps.
    pub fn synthesize_planes(&self, z_hat: &Tensor, cls: &Tensor) -> TriPlaneFeatures {
        let n = self.dims.latent_grid;
        let d_hat = self.dims.token_hat_dim;
        let w_style = self.mapping.forward(cls); // [1, style_dim]
        let mut planes = Vec::with_capacity(3);
        for (p, generator) in self.generators.iter().enumerate() {
            // Rows p*N^2 .. (p+1)*N^2 are this plane's cells; to NCHW.
            let cells = z_hat.slice_rows(p * n * n, n * n); // [N^2, D_hat]
            let chw = cells.transpose2d().reshape(&[1, d_hat, n, n]);
            let out = generator.forward(&chw, &w_style); // [1, D_H, N_H, N_H]
            planes.push(out.reshape(&[1, self.dims.plane_channels * self.dims.plane_resolution * self.dims.plane_resolution]));
        }
        let stacked = Tensor::concat_rows(&planes).reshape(&[
            3,
            self.dims.plane_channels,
            self.dims.plane_resolution,
            self.dims.plane_resolution,
        ]);
        TriPlaneFeatures {
            planes: stacked,
            resolution: self.dims.plane_resolution,
            channels: self.dims.plane_channels,
        }
    }

    /// Full decode: latents to feature planes.
    pub fn decode(&self, z: &Tensor) -> TriPlaneFeatures {
        let (z_hat, cls) = self.token_transform(z);
        self.synthesize_planes(&z_hat, &cls)
    }
}

impl HasParams for Decoder {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        let p = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        self.token.collect(&p("token"), out);
        self.mapping.collect(&p("mapping"), out);
        for (i, g) in self.generators.iter().enumerate() {
            g.collect(&p(&format!("plane.{i}")), out);
        }
        self.field.collect(&p("field"), out);
    }
}
