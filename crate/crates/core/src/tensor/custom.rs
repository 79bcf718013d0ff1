//! Fused primitives for neural field rendering: tri-plane bilinear sampling
//! and transmittance-weight computation. Both have hand-derived first-order
//! backwards; nothing downstream needs second-order gradients through them.

use super::Tensor;
use rayon::prelude::*;

/// Precomputed bilinear taps for a batch of 3-d query points against three
/// axis-aligned planes (xy, xz, yz). Points are constants of the graph: the
/// sampling positions carry no gradient.
pub struct PlanePoints {
    /// Per point, per plane: (corner00 flat index, row stride use, fx, fy).
    taps: Vec<[Tap; 3]>,
    pub resolution: usize,
}

#[derive(Clone, Copy)]
struct Tap {
    ix: usize,
    iy: usize,
    fx: f64,
    fy: f64,
}

impl PlanePoints {
    /// `points` are (x,y,z) triples in plane coordinates; values are clamped
    /// to [0,1] and mapped so 0 and 1 land on the border cell centers.
    pub fn new(points: &[[f64; 3]], resolution: usize) -> PlanePoints {
        let r = resolution;
        assert!(r >= 2, "plane resolution must be at least 2");
        let make_tap = |u: f64, v: f64| -> Tap {
            let u = u.clamp(0.0, 1.0) * (r - 1) as f64;
            let v = v.clamp(0.0, 1.0) * (r - 1) as f64;
            let ix = (u.floor() as usize).min(r - 2);
            let iy = (v.floor() as usize).min(r - 2);
            Tap {
                ix,
                iy,
                fx: u - ix as f64,
                fy: v - iy as f64,
            }
        };
        let taps = points
            .iter()
            .map(|p| {
                [
                    make_tap(p[0], p[1]), // xy plane
                    make_tap(p[0], p[2]), // xz plane
                    make_tap(p[1], p[2]), // yz plane
                ]
            })
            .collect();
        PlanePoints { taps, resolution: r }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

impl Tensor {
    /// Samples tri-plane features: self[3,C,R,R] at `pts` -> [P,C], summing
    /// the bilinear samples of the three planes.
    pub fn plane_sample(&self, pts: &std::rc::Rc<PlanePoints>) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "planes must be [3,C,R,R]");
        assert_eq!(s[0], 3);
        let (c, r) = (s[1], s[2]);
        assert_eq!(s[3], r);
        assert_eq!(pts.resolution, r, "PlanePoints resolution mismatch");
        let data = self.data();
        let data: &[f64] = &data;
        let taps_all: &[[Tap; 3]] = &pts.taps;
        let n = pts.len();
        let mut out = vec![0.0; n * c];
        let plane_stride = c * r * r;
        out.par_chunks_mut(c).enumerate().for_each(|(pi, orow)| {
            let taps = &taps_all[pi];
            for (plane, tap) in taps.iter().enumerate() {
                let w00 = (1.0 - tap.fx) * (1.0 - tap.fy);
                let w10 = tap.fx * (1.0 - tap.fy);
                let w01 = (1.0 - tap.fx) * tap.fy;
                let w11 = tap.fx * tap.fy;
                let base = plane * plane_stride;
                let x1 = (tap.ix + 1).min(r - 1);
                let y1 = (tap.iy + 1).min(r - 1);
                for ch in 0..c {
                    let pb = base + ch * r * r;
                    orow[ch] += w00 * data[pb + tap.iy * r + tap.ix]
                        + w10 * data[pb + tap.iy * r + x1]
                        + w01 * data[pb + y1 * r + tap.ix]
                        + w11 * data[pb + y1 * r + x1];
                }
            }
        });
        let pts_c = pts.clone();
        let shape = s.to_vec();
        Tensor::make(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if g.needs_grad() {
                    panic!("second-order gradients are not supported through plane_sample");
                }
                let gd = g.data();
                let mut gp = vec![0.0; shape.iter().product()];
                let plane_stride = c * r * r;
                for (pi, taps) in pts_c.taps.iter().enumerate() {
                    let grow = &gd[pi * c..(pi + 1) * c];
                    for (plane, tap) in taps.iter().enumerate() {
                        let w00 = (1.0 - tap.fx) * (1.0 - tap.fy);
                        let w10 = tap.fx * (1.0 - tap.fy);
                        let w01 = (1.0 - tap.fx) * tap.fy;
                        let w11 = tap.fx * tap.fy;
                        let base = plane * plane_stride;
                        let x1 = (tap.ix + 1).min(r - 1);
                        let y1 = (tap.iy + 1).min(r - 1);
                        for ch in 0..c {
                            let pb = base + ch * r * r;
                            let gv = grow[ch];
                            gp[pb + tap.iy * r + tap.ix] += w00 * gv;
                            gp[pb + tap.iy * r + x1] += w10 * gv;
                            gp[pb + y1 * r + tap.ix] += w01 * gv;
                            gp[pb + y1 * r + x1] += w11 * gv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, gp))]
            }),
        )
    }

    /// NeRF compositing weights from densities: self[Rays,S] (sigma) and
    /// constant segment lengths delta[Rays,S] ->
    /// w_i = T_i * (1 - exp(-sigma_i * delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j).
    pub fn render_weights(&self, delta: &[f64]) -> Tensor {
        let (rays, s) = (self.rows(), self.cols());
        assert_eq!(delta.len(), rays * s);
        let sigma = self.data();
        let sigma: &[f64] = &sigma;
        let mut w = vec![0.0; rays * s];
        let mut trans_next = vec![0.0; rays * s]; // T_{i+1} saved for backward
        w.par_chunks_mut(s)
            .zip(trans_next.par_chunks_mut(s))
            .enumerate()
            .for_each(|(ray, (wrow, trow))| {
                let srow = &sigma[ray * s..(ray + 1) * s];
                let drow = &delta[ray * s..(ray + 1) * s];
                let mut t = 1.0;
                for i in 0..s {
                    let att = (-srow[i] * drow[i]).exp();
                    wrow[i] = t * (1.0 - att);
                    t *= att;
                    trow[i] = t;
                }
            });
        let delta_c: Vec<f64> = delta.to_vec();
        let w_saved = w.clone();
        Tensor::make(
            vec![rays, s],
            w,
            vec![self.clone()],
            Box::new(move |g, _| {
                if g.needs_grad() {
                    panic!("second-order gradients are not supported through render_weights");
                }
                let gd = g.data();
                let gd: &[f64] = &gd;
                let mut gs = vec![0.0; rays * s];
                gs.par_chunks_mut(s).enumerate().for_each(|(ray, grow)| {
                    let base = ray * s;
                    // dL/dsigma_k = delta_k * (G_k * T_{k+1} - sum_{i>k} G_i w_i)
                    let mut suffix = 0.0;
                    for k in (0..s).rev() {
                        grow[k] = delta_c[base + k] * (gd[base + k] * trans_next[base + k] - suffix);
                        suffix += gd[base + k] * w_saved[base + k];
                    }
                });
                vec![Some(Tensor::from_vec(&[rays, s], gs))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tensor};
    use super::PlanePoints;
    use std::rc::Rc;

    #[test]
    fn plane_sample_constant_planes_is_constant() {
        let c = 2;
        let r = 4;
        let mut data = vec![0.0; 3 * c * r * r];
        for plane in 0..3 {
            for ch in 0..c {
                let v = (plane * c + ch) as f64;
                for i in 0..r * r {
                    data[(plane * c + ch) * r * r + i] = v;
                }
            }
        }
        let planes = Tensor::from_vec(&[3, c, r, r], data);
        let pts = Rc::new(PlanePoints::new(&[[0.1, 0.7, 0.3], [0.9, 0.2, 0.6]], r));
        let out = planes.plane_sample(&pts).to_vec();
        // channel ch = sum over planes of (plane*c + ch)
        for p in 0..2 {
            assert!((out[p * c] - (0.0 + 2.0 + 4.0)).abs() < 1e-12);
            assert!((out[p * c + 1] - (1.0 + 3.0 + 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_sample_grads_match_fd() {
        let c = 2;
        let r = 3;
        let n = 3 * c * r * r;
        let base: Vec<f64> = (0..n).map(|i| ((i * 31 % 17) as f64 - 8.0) / 6.0).collect();
        let query = [[0.2, 0.8, 0.5], [0.0, 1.0, 0.4], [0.65, 0.35, 0.9]];
        let probe: Vec<f64> = (0..query.len() * c).map(|i| 0.2 + 0.15 * i as f64).collect();
        let f = |d: &[f64]| {
            let planes = Tensor::from_vec(&[3, c, r, r], d.to_vec());
            let pts = Rc::new(PlanePoints::new(&query, r));
            planes
                .plane_sample(&pts)
                .reshape(&[query.len() * c])
                .mul(&Tensor::from_vec(&[query.len() * c], probe.clone()))
                .sum_all()
                .item()
        };
        let planes = Tensor::leaf(&[3, c, r, r], base.clone());
        let pts = Rc::new(PlanePoints::new(&query, r));
        let loss = planes
            .plane_sample(&pts)
            .reshape(&[query.len() * c])
            .mul(&Tensor::from_vec(&[query.len() * c], probe.clone()))
            .sum_all();
        let g = backward(&loss).wrt(&planes).to_vec();
        let h = 1e-6;
        for i in 0..n {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-7, "cell {}: {} vs {}", i, g[i], fd);
        }
    }

    #[test]
    fn render_weights_sum_to_transmittance_alpha() {
        let s = 6;
        let sigma: Vec<f64> = vec![0.3, 1.2, 0.0, 2.5, 0.7, 0.1];
        let delta: Vec<f64> = vec![0.2, 0.1, 0.3, 0.15, 0.2, 0.05];
        let t = Tensor::from_vec(&[1, s], sigma.clone());
        let w = t.render_weights(&delta).to_vec();
        let total: f64 = w.iter().sum();
        let optical: f64 = sigma.iter().zip(&delta).map(|(a, b)| a * b).sum();
        assert!((total - (1.0 - (-optical).exp())).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn render_weights_grads_match_fd() {
        let s = 5;
        let sigma: Vec<f64> = vec![0.4, 1.5, 0.2, 2.0, 0.8];
        let delta: Vec<f64> = vec![0.25, 0.1, 0.3, 0.12, 0.2];
        let probe: Vec<f64> = vec![0.9, -0.3, 0.5, 0.7, -0.2];
        let f = |sg: &[f64]| {
            let t = Tensor::from_vec(&[1, s], sg.to_vec());
            t.render_weights(&delta)
                .reshape(&[s])
                .mul(&Tensor::from_vec(&[s], probe.clone()))
                .sum_all()
                .item()
        };
        let t = Tensor::leaf(&[1, s], sigma.clone());
        let loss = t
            .render_weights(&delta)
            .reshape(&[s])
            .mul(&Tensor::from_vec(&[s], probe.clone()))
            .sum_all();
        let g = backward(&loss).wrt(&t).to_vec();
        let h = 1e-7;
        for i in 0..s {
            let mut p = sigma.clone();
            let mut m = sigma.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "sigma[{}]: {} vs {}", i, g[i], fd);
        }
    }
}
