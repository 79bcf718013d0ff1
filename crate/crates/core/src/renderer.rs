//! Neural volume rendering over tri-plane features: scaled-box field
//! queries, ray-box culling, stratified + importance sampling and
//! transmittance compositing of color, alpha, depth and optional semantic
//! features.
//!
//! Coordinates: the object box is centered at the origin with extents
//! `scale` meters. A world point q maps to p = (q + scale/2) / max(scale),
//! and the field is queried with the normalized scale s_hat =
//! scale / max(scale), so p / s_hat spans [0,1]^3 exactly over the box.
//! With the scaled box disabled, rays intersect the bounding cube of side
//! max(scale) and the query scale is (1,1,1).

use crate::camera::{add3, dot3, scale3, Camera, Vec3};
use crate::config::PipelineConfig;
use crate::decoder::{FieldMlp, TriPlaneFeatures};
use crate::error::{Error, Result};
use crate::sample::RgbImage;
use crate::tensor::{PlanePoints, Tensor};
use std::rc::Rc;

/// Density/color/feature head evaluated on aggregated tri-plane features.
pub trait FieldFn {
    /// `points` are the plane-query coordinates (p / scale, spanning
    /// [0,1]^3 over the object box); learned fields ignore them, analytic
    /// test fields use them directly.
    fn eval(&self, features: &Tensor, points: &[[f64; 3]]) -> (Tensor, Tensor, Option<Tensor>);

    fn semantic_channels(&self) -> usize {
        0
    }
}

impl FieldFn for FieldMlp {
    fn eval(&self, features: &Tensor, _points: &[[f64; 3]]) -> (Tensor, Tensor, Option<Tensor>) {
        self.forward(features)
    }

    fn semantic_channels(&self) -> usize {
        self.semantic_channels
    }
}

/// Queries the tri-plane field at normalized points p in [0,1]^3 under a
/// component-wise query scale: features are bilinear samples of the three
/// planes at the projections of p / scale (clamped to the plane border).
pub fn query_field<F: FieldFn>(
    field: &F,
    planes: &TriPlaneFeatures,
    points: &[[f64; 3]],
    scale: [f64; 3],
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::Render(format!("non-positive query scale {:?}", scale)));
    }
    let scaled: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] / scale[0], p[1] / scale[1], p[2] / scale[2]])
        .collect();
    let pts = Rc::new(PlanePoints::new(&scaled, planes.resolution));
    let features = planes.planes.plane_sample(&pts);
    Ok(field.eval(&features, &scaled))
}

#[derive(Clone, Copy, Debug)]
pub enum Jitter {
    /// Bin midpoints: deterministic, used for evaluation and oracles.
    Midpoint,
    /// Per-(ray,sample) hash-seeded jitter: deterministic for a fixed seed
    /// regardless of evaluation order.
    Seeded(u64),
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub resolution: usize,
    pub samples_uniform: usize,
    pub samples_importance: usize,
    pub scaled_box: bool,
    pub jitter: Jitter,
}

impl RenderOptions {
    pub fn from_config(cfg: &PipelineConfig) -> RenderOptions {
        RenderOptions {
            resolution: cfg.render_resolution,
            samples_uniform: cfg.samples_uniform,
            samples_importance: cfg.samples_importance,
            scaled_box: cfg.scaled_box,
            jitter: Jitter::Midpoint,
        }
    }
}

pub struct RenderOutput {
    pub resolution: usize,
    pub rgb: Tensor,   // [R*R, 3]
    pub alpha: Tensor, // [R*R]
    pub depth: Tensor, // [R*R]
    pub semantic: Option<Tensor>, // [R*R, D_sem]
    /// Compositing weights of the rays that hit the box, [hits, S].
    pub weights: Tensor,
    pub hit_rays: Vec<usize>,
}

impl RenderOutput {
    pub fn rgb_image(&self) -> RgbImage {
        RgbImage {
            h: self.resolution,
            w: self.resolution,
            data: self.rgb.to_vec(),
        }
    }

    /// Composited over a white background (pixels with alpha < 1 blend to
    /// white), the convention used for discriminator inputs and galleries.
    pub fn whitened_image(&self) -> RgbImage {
        let rgb = self.rgb.to_vec();
        let alpha = self.alpha.to_vec();
        let mut data = vec![0.0; rgb.len()];
        for i in 0..alpha.len() {

            for c in 0..3 {
                data[i * 3 + c] = (rgb[i * 3 + c] + (1.0 - alpha[i])).clamp(0.0, 1.0);
            }
        }
        RgbImage { h: self.resolution, w: self.resolution, data }
    }
}

fn hash64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

fn jitter_u(jitter: Jitter, ray: usize, sample: usize, phase: u64) -> f64 {
    match jitter {
        Jitter::Midpoint => 0.5,
        Jitter::Seeded(seed) => {
            let h = hash64(
                seed ^ (ray as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (sample as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
                    ^ phase.wrapping_mul(0x94d0_49bb_1331_11eb),
            );
            (h >> 11) as f64 / (1u64 << 53) as f64
        }
    }
}

fn ray_box_interval(o: Vec3, d: Vec3, half: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 1e-9_f64;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (mut a, mut b) = ((-half[i] - o[i]) * inv, (half[i] - o[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Inverse-CDF draw of `m` extra sample positions from the piecewise-
/// constant distribution of coarse weights over bins.
fn sample_importance(
    bin_edges: &[f64],
    weights: &[f64],
    m: usize,
    jitter: Jitter,
    ray: usize,
) -> Vec<f64> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for &w in weights {
        acc += w.max(0.0) + 1e-5;
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let u = ((k as f64) + jitter_u(jitter, ray, k, 1)) / m as f64 * total;
        // Find the bin with cdf[b] <= u < cdf[b+1].
        let mut lo = 0usize;
        let mut hi = n;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let frac = ((u - cdf[lo]) / (cdf[lo + 1] - cdf[lo])).clamp(0.0, 1.0);
        out.push(bin_edges[lo] + frac * (bin_edges[lo + 1] - bin_edges[lo]));
    }
    out
}

/// Raw (out-of-graph) compositing weights used only to build the
/// importance-sampling distribution.
fn coarse_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; sigma.len()];
    let mut t = 1.0;
    for i in 0..sigma.len() {
        let att = (-sigma[i] * delta[i]).exp();
        w[i] = t * (1.0 - att);
        t *= att;
    }
    w
}

/// Volume-renders the tri-plane field from `camera`. Rays are culled
/// against the (scaled) object box; uniform stratified samples are taken in
/// the intersection, importance samples are drawn from the coarse weight
/// distribution, and the union is composited with w_i = T_i(1-exp(-s_i d_i)).
/// The final segment length is the distance to box exit.
pub fn render<F: FieldFn>(
    field: &F,
    planes: &TriPlaneFeatures,
    camera: &Camera,
    scale: [f64; 3],
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    if scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Render(format!("invalid object scale {:?}", scale)));
    }
    if !camera.position.iter().all(|v| v.is_finite()) || camera.fx == 0.0 || camera.fy == 0.0 {
        return Err(Error::Render("degenerate camera".into()));
    }
    let res = opts.resolution;
    let rays = res * res;
    let s_max = scale[0].max(scale[1]).max(scale[2]);
    let (half, query_scale) = if opts.scaled_box {
        (
            scale3(scale, 0.5),
            [scale[0] / s_max, scale[1] / s_max, scale[2] / s_max],
        )
    } else {
        ([s_max / 2.0; 3], [1.0, 1.0, 1.0])
    };

    // Ray-box culling.
    let mut hit_rays = Vec::new();
    let mut intervals = Vec::new();
    let mut dirs = Vec::new();
    for py in 0..res {
        for px in 0..res {
            let d = camera.ray_dir(px, py);
            if d.iter().any(|v| !v.is_finite()) || dot3(d, d) == 0.0 {
                return Err(Error::Render(format!("degenerate ray at ({px},{py})")));
            }
            if let Some((t0, t1)) = ray_box_interval(camera.position, d, half) {
                hit_rays.push(py * res + px);
                intervals.push((t0, t1));
                dirs.push(d);
            }
        }
    }
    let hits = hit_rays.len();
    let nu = opts.samples_uniform;
    let ni = opts.samples_importance;
    let d_sem = field.semantic_channels();
    if hits == 0 {
        return Ok(RenderOutput {
            resolution: res,
            rgb: Tensor::zeros(&[rays, 3]),
            alpha: Tensor::zeros(&[rays]),
            depth: Tensor::zeros(&[rays]),
            semantic: if d_sem > 0 { Some(Tensor::zeros(&[rays, d_sem])) } else { None },
            weights: Tensor::zeros(&[0, nu + ni]),
            hit_rays,
        });
    }

    let to_unit = |q: Vec3| -> [f64; 3] {
        [
            (q[0] + half[0]) / s_max,
            (q[1] + half[1]) / s_max,
            (q[2] + half[2]) / s_max,
        ]
    };

    // Uniform stratified pass.
    let mut t_uni = vec![0.0; hits * nu];
    let mut pts_uni = Vec::with_capacity(hits * nu);
    for k in 0..hits {
        let (t0, t1) = intervals[k];
        let l = t1 - t0;
        for i in 0..nu {
            let t = t0 + (i as f64 + jitter_u(opts.jitter, hit_rays[k], i, 0)) * l / nu as f64;
            t_uni[k * nu + i] = t;
            pts_uni.push(to_unit(add3(camera.position, scale3(dirs[k], t))));
        }
    }
    let (sig_u, rgb_u, feat_u) = query_field(field, planes, &pts_uni, query_scale)?;

    // Importance pass from the detached coarse distribution.
    let (order, t_all, sig_all, rgb_all, feat_all) = if ni > 0 {
        let sig_raw = sig_u.data();
        let mut t_imp = vec![0.0; hits * ni];
        let mut pts_imp = Vec::with_capacity(hits * ni);
        for k in 0..hits {
            let (t0, t1) = intervals[k];
            let ts = &t_uni[k * nu..(k + 1) * nu];
            let _ = t0;
            // Bins are the sample intervals [t_i, t_{i+1}] (last ends at
            // box exit), weighted by the coarse compositing weights.
            let mut delta = vec![0.0; nu];
            for i in 0..nu {
                let next = if i + 1 < nu { ts[i + 1] } else { t1 };
                delta[i] = next - ts[i];
            }
            let w = coarse_weights(&sig_raw[k * nu..(k + 1) * nu], &delta);
            let mut bins = Vec::with_capacity(nu + 1);
            bins.extend_from_slice(ts);
            bins.push(t1);
            let drawn = sample_importance(&bins, &w, ni, opts.jitter, hit_rays[k]);
            for (j, t) in drawn.into_iter().enumerate() {
                t_imp[k * ni + j] = t;
                pts_imp.push(to_unit(add3(camera.position, scale3(dirs[k], t))));
            }
        }
        let (sig_i, rgb_i, feat_i) = query_field(field, planes, &pts_imp, query_scale)?;

        // Merge-sort each ray's uniform + importance samples.
        let s = nu + ni;
        let mut perm = Vec::with_capacity(hits * s);
        let mut t_sorted = vec![0.0; hits * s];
        for k in 0..hits {
            let mut idx: Vec<usize> = (0..s).collect();
            let key = |i: usize| -> f64 {
                if i < nu {
                    t_uni[k * nu + i]
                } else {
                    t_imp[k * ni + (i - nu)]
                }
            };
            idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap());
            for (pos, &i) in idx.iter().enumerate() {
                t_sorted[k * s + pos] = key(i);
                perm.push(if i < nu {
                    k * nu + i
                } else {
                    hits * nu + k * ni + (i - nu)
                });
            }
        }
        let sig_all = Tensor::concat_rows(&[sig_u, sig_i]).gather_rows(&perm);
        let rgb_all = Tensor::concat_rows(&[rgb_u, rgb_i]).gather_rows(&perm);
        let feat_all = match (feat_u, feat_i) {
            (Some(a), Some(b)) => Some(Tensor::concat_rows(&[a, b]).gather_rows(&perm)),
            _ => None,
        };
        (s, t_sorted, sig_all, rgb_all, feat_all)
    } else {
        (nu, t_uni, sig_u, rgb_u, feat_u)
    };

    let s = order;
    // Segment lengths; the last extends to box exit.
    let mut delta = vec![0.0; hits * s];
    for k in 0..hits {
        let (_t0, t1) = intervals[k];
        for i in 0..s {
            let next = if i + 1 < s { t_all[k * s + i + 1] } else { t1 };
            delta[k * s + i] = next - t_all[k * s + i];
        }
    }

    let weights = sig_all.reshape(&[hits, s]).render_weights(&delta); // [hits, s]
    let w_flat = weights.reshape(&[hits * s]);
    let alpha_h = weights.sum_cols(); // [hits]
    let rgb_h = rgb_all.mul_col_vec(&w_flat).sum_groups(s); // [hits, 3]
    let t_tensor = Tensor::from_vec(&[hits, s], t_all);
    let depth_h = weights.mul(&t_tensor).sum_cols(); // [hits]
    let sem_h = feat_all.map(|f| f.mul_col_vec(&w_flat).sum_groups(s));

    // Scatter hit rays back into the full image.
    let rgb = rgb_h.scatter_add_rows(&hit_rays, rays);
    let alpha = alpha_h
        .reshape(&[hits, 1])
        .scatter_add_rows(&hit_rays, rays)
        .reshape(&[rays]);
    let depth = depth_h
        .reshape(&[hits, 1])
        .scatter_add_rows(&hit_rays, rays)
        .reshape(&[rays]);
    let semantic = match sem_h {
        Some(f) => Some(f.scatter_add_rows(&hit_rays, rays)),
        None if d_sem > 0 => Some(Tensor::zeros(&[rays, d_sem])),
        None => None,
    };

    Ok(RenderOutput {
        resolution: res,
        rgb,
        alpha,
        depth,
        semantic,
        weights,
        hit_rays,
    })
}

/// Density sampled on a regular lattice spanning the scaled box, used by
/// marching cubes. Returns grid values in x-fastest order.
pub fn density_grid<F: FieldFn>(
    field: &F,
    planes: &TriPlaneFeatures,
    scale: [f64; 3],
    scaled_box: bool,
    grid_res: usize,
) -> Result<Vec<f64>> {
    let s_max = scale[0].max(scale[1]).max(scale[2]);
    let (extent, query_scale) = if scaled_box {
        (scale, [scale[0] / s_max, scale[1] / s_max, scale[2] / s_max])
    } else {
        ([s_max; 3], [1.0, 1.0, 1.0])
    };
    let n = grid_res;
    let mut pts = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                // p in [0, s/s_max] over the box (see module docs).
                pts.push([
                    ix as f64 / (n - 1) as f64 * (extent[0] / s_max),
                    iy as f64 / (n - 1) as f64 * (extent[1] / s_max),
                    iz as f64 / (n - 1) as f64 * (extent[2] / s_max),
                ]);
            }
        }
    }
    let (sigma, _rgb, _feat) = query_field(field, planes, &pts, query_scale)?;
    Ok(sigma.to_vec())
}
