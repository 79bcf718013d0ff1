//! 2D-to-3D encoder: a small ViT over 16x16 image patches followed by
//! cross-attention blocks whose queries are a learnable tri-plane positional
//! grid, producing continuous tri-plane embeddings in (-1, 1).

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{stream, HasParams, Init, LayerNorm, Linear, ParamList, TransformerBlock};
use crate::tensor::Tensor;

pub const PATCH: usize = 16;

/// Continuous tri-plane embedding: rows are cells in plane-major layout
/// (plane p, row i, col j) -> p*N^2 + i*N + j; planes ordered xy, xz, yz.
pub struct TriPlaneEmbedding {
    pub values: Tensor, // [3*N^2, D_tok]
    pub grid: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderDims {
    pub height: usize,
    pub width: usize,
    pub embed: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vit_blocks: usize,
    pub cross_blocks: usize,
    pub latent_grid: usize,
    pub token_dim: usize,
}

impl EncoderDims {
    pub fn from_config(cfg: &PipelineConfig) -> EncoderDims {
        EncoderDims {
            height: cfg.image_resolution,
            width: cfg.image_resolution,
            embed: cfg.encoder_embed,
            hidden: cfg.encoder_hidden,
            heads: cfg.encoder_heads,
            vit_blocks: cfg.encoder_vit_blocks,
            cross_blocks: cfg.encoder_cross_blocks,
            latent_grid: cfg.latent_grid,
            token_dim: cfg.token_dim,
        }
    }

    pub fn patch_count(&self) -> usize {
        (self.height / PATCH) * (self.width / PATCH)
    }

    pub fn query_count(&self) -> usize {
        3 * self.latent_grid * self.latent_grid
    }
}

pub struct Encoder {
    pub dims: EncoderDims,
    patch_proj: Linear,
    pos_embed: Tensor, // [patches + 1, embed], CLS slot last
    cls_token: Tensor, // [1, embed]
    vit: Vec<TransformerBlock>,
    /// Learnable tri-plane positional encoding, plane-major rows.
    pub triplane_query: Tensor, // [3*N^2, embed]
    query_proj: Linear,
    cross: Vec<TransformerBlock>,
    out_proj: Linear,
    out_norm: LayerNorm,
}

impl Encoder {
    pub fn new(seed: u64, dims: EncoderDims) -> Encoder {
        assert_eq!(dims.height % PATCH, 0);
        assert_eq!(dims.width % PATCH, 0);
        let mut rng = stream(seed, "encoder", 0);
        let patches = dims.patch_count();
        let init = Init::XavierUniform;
        let pos = Tensor::leaf(
            &[patches + 1, dims.embed],
            (0..(patches + 1) * dims.embed)
                .map(|_| 0.02 * crate::nn::normal(&mut rng))
                .collect(),
        );
        let cls = Tensor::leaf(
            &[1, dims.embed],
            (0..dims.embed).map(|_| 0.02 * crate::nn::normal(&mut rng)).collect(),
        );
        let query = Tensor::leaf(
            &[dims.query_count(), dims.embed],
            (0..dims.query_count() * dims.embed)
                .map(|_| 0.02 * crate::nn::normal(&mut rng))
                .collect(),
        );
        Encoder {
            patch_proj: Linear::new(&mut rng, PATCH * PATCH * 3, dims.embed, init),
            pos_embed: pos,
            cls_token: cls,
            vit: (0..dims.vit_blocks)
                .map(|_| TransformerBlock::new(&mut rng, dims.embed, dims.heads, dims.hidden, init))
                .collect(),
            triplane_query: query,
            query_proj: Linear::new(&mut rng, dims.embed, dims.embed, init),
            cross: (0..dims.cross_blocks)
                .map(|_| TransformerBlock::new(&mut rng, dims.embed, dims.heads, dims.hidden, init))
                .collect(),
            out_proj: Linear::new(&mut rng, dims.embed, dims.token_dim, init),
            out_norm: LayerNorm::new(dims.token_dim),
            dims,
        }
    }

    /// Splits the image into non-overlapping 16x16 patches, projects each to
    /// the embedding width, appends the CLS token and adds positional
    /// embeddings: [(H/16)(W/16) + 1, D_img].
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("expected [H,W,3] image, got {:?}", s)));
        }
        let (h, w) = (s[0], s[1]);
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by patch size {}",
                h, w, PATCH
            )));
        }
        let (gh, gw) = (h / PATCH, w / PATCH);
        // Gather pixel rows into per-patch groups so gradients flow back to
        // the image.
        let mut pixel_order = Vec::with_capacity(h * w);
        for py in 0..gh {
            for px in 0..gw {
                for iy in 0..PATCH {
                    for ix in 0..PATCH {
                        pixel_order.push((py * PATCH + iy) * w + px * PATCH + ix);
                    }
                }
            }
        }
        let stride = PATCH * PATCH * 3;
        let patches = image
            .reshape(&[h * w, 3])
            .gather_rows(&pixel_order)
            .reshape(&[gh * gw, stride]);
        let tokens = self.patch_proj.forward(&patches);
        let with_cls = Tensor::concat_rows(&[tokens, self.cls_token.clone()]);
        Ok(with_cls.add(&self.pos_embed))
    }

    /// Image -> tri-plane embedding, values strictly inside (-1, 1).
    pub fn encode(&self, image: &Tensor) -> Result<TriPlaneEmbedding> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.dims.height || s[1] != self.dims.width {
            return Err(Error::Shape(format!(
                "encoder expects [{}, {}, 3], got {:?}",
                self.dims.height, self.dims.width, s
            )));
        }
        let mut tokens = self.patchify(image)?;
        for block in &self.vit {
            tokens = block.forward_self(&tokens);
        }
        let mut q = self.query_proj.forward(&self.triplane_query);
        for block in &self.cross {
            q = block.forward_cross(&q, &tokens);
        }
        let out = self.out_norm.forward(&self.out_proj.forward(&q)).tanh();
        Ok(TriPlaneEmbedding { values: out, grid: self.dims.latent_grid })
    }

    pub fn pos_embedding(&self) -> &Tensor {
        &self.pos_embed
    }
}

impl HasParams for Encoder {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        let p = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        self.patch_proj.collect(&p("patch_proj"), out);
        out.push(p("pos_embed"), &self.pos_embed);
        out.push(p("cls_token"), &self.cls_token);
        for (i, b) in self.vit.iter().enumerate() {
            b.collect(&p(&format!("vit.{i}")), out);
        }
        out.push(p("triplane_query"), &self.triplane_query);
        self.query_proj.collect(&p("query_proj"), out);
        for (i, b) in self.cross.iter().enumerate() {
            b.collect(&p(&format!("cross.{i}")), out);
        }
        self.out_proj.collect(&p("out_proj"), out);
        self.out_norm.collect(&p("out_norm"), out);
    }
}
