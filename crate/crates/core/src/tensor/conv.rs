//! Convolution, pooling and upsampling on NCHW tensors (stride 1, square
//! kernels). The three conv primitives (forward, kernel rotation, weight
//! gradient) reference each other in their backwards, so arbitrary-order
//! gradients flow through convolution stacks.

use super::ops::gemm;
use super::Tensor;
use rayon::prelude::*;

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f64]) {
    // col layout: [c*k*k, h*w]
    let hw = h * w;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * hw;
                for oy in 0..h {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        col[row + oy * w..row + (oy + 1) * w].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kj as isize - pad as isize;
                        col[row + oy * w + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[(ci * h + iy) * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-d convolution: x[N,Cin,H,W] * w[Cout,Cin,k,k] -> [N,Cout,H',W']
    /// with H' = H + 2*pad - k + 1 (stride 1).
    pub fn conv2d(&self, weight: &Tensor, pad: usize) -> Tensor {
        let (n, cin, h, w) = dims4(self);
        let (cout, cin_w, kh, kw) = dims4(weight);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        let k = kh;
        assert!(h + 2 * pad + 1 > k, "kernel larger than padded input");
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        // With stride 1 and the same pad on both sides, im2col indexed at the
        // output grid requires oh == h only when pad = (k-1)/2; support the
        // general case by padding into a scratch image.
        let x = self.data();
        let wd = weight.data();
        let (x, wd): (&[f64], &[f64]) = (&x, &wd);
        let mut out = vec![0.0; n * cout * oh * ow];
        let per_in = cin * h * w;
        let per_out = cout * oh * ow;
        out.par_chunks_mut(per_out).enumerate().for_each(|(ni, oslice)| {
            let xi = &x[ni * per_in..(ni + 1) * per_in];
            let mut col = vec![0.0; cin * k * k * oh * ow];
            im2col_general(xi, cin, h, w, k, pad, oh, ow, &mut col);
            gemm(cout, cin * k * k, oh * ow, wd, &col, oslice);
        });
        let pad_c = pad;
        Tensor::make(
            vec![n, cout, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, p| {
                let k = p[1].shape()[2];
                let ipad = k - 1 - pad_c;
                let gx = g.conv2d(&p[1].rotate_kernel(), ipad);
                let gw = p[0].conv2d_wgrad(g, pad_c);
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// [Cout,Cin,k,k] -> [Cin,Cout,k,k] with spatially flipped taps. Its own
    /// inverse, which makes it its own backward.
    pub fn rotate_kernel(&self) -> Tensor {
        let (cout, cin, kh, kw) = dims4(self);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..cout {
            for c in 0..cin {
                for i in 0..kh {
                    for j in 0..kw {
                        out[((c * cout + o) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] =
                            src[((o * cin + c) * kh + i) * kw + j];
                    }
                }
            }
        }
        Tensor::make(
            vec![cin, cout, kh, kw],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.rotate_kernel())]),
        )
    }

    /// Weight gradient of conv2d: self = x[N,Cin,H,W], g[N,Cout,H',W'] ->
    /// [Cout,Cin,k,k] where k is implied by shapes.
    pub fn conv2d_wgrad(&self, g: &Tensor, pad: usize) -> Tensor {
        let (n, cin, h, w) = dims4(self);
        let (n2, cout, oh, ow) = dims4(g);
        assert_eq!(n, n2);
        let k = h + 2 * pad + 1 - oh;
        assert_eq!(ow, w + 2 * pad - k + 1);
        let x = self.data();
        let gd = g.data();
        let (x, gd): (&[f64], &[f64]) = (&x, &gd);
        let per_in = cin * h * w;
        let per_out = cout * oh * ow;
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xi = &x[ni * per_in..(ni + 1) * per_in];
                let gi = &gd[ni * per_out..(ni + 1) * per_out];
                let mut col = vec![0.0; cin * k * k * oh * ow];
                im2col_general(xi, cin, h, w, k, pad, oh, ow, &mut col);
                // gw += g[cout, ohw] * col^T[ohw, cin k^2]
                let mut colt = vec![0.0; col.len()];
                let rows = cin * k * k;
                let cols = oh * ow;
                for r in 0..rows {
                    for c in 0..cols {
                        colt[c * rows + r] = col[r * cols + c];
                    }
                }
                let mut gw = vec![0.0; cout * rows];
                gemm(cout, cols, rows, gi, &colt, &mut gw);
                gw
            })
            .collect();
        let mut acc = vec![0.0; cout * cin * k * k];
        for p in &partials {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let pad_c = pad;
        Tensor::make(
            vec![cout, cin, k, k],
            acc,
            vec![self.clone(), g.clone()],
            Box::new(move |gg, p| {
                // gg is [Cout,Cin,k,k]; linear in x and g.
                let k = gg.shape()[2];
                let ipad = k - 1 - pad_c;
                let gx = p[1].conv2d(&gg.rotate_kernel(), ipad);
                let ggrad = p[0].conv2d(gg, pad_c);
                vec![Some(gx), Some(ggrad)]
            }),
        )
    }

    /// 2x2 average pooling (spatial dims must be even).
    pub fn avg_pool2(&self) -> Tensor {
        let (n, c, h, w) = dims4(self);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let src = self.data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n * c {
            let base = img * h * w;
            let obase = img * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let i = base + 2 * y * w + 2 * x;
                    out[obase + y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        Tensor::make(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.upsample_nearest2().scale(0.25))]),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self) -> Tensor {
        let (n, c, h, w) = dims4(self);
        let src = self.data();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n * c {
            let base = img * h * w;
            let obase = img * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    out[obase + y * ow + x] = src[base + (y / 2) * w + x / 2];
                }
            }
        }
        Tensor::make(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.avg_pool2().scale(4.0))]),
        )
    }

    /// Bilinear 2x upsampling with half-pixel alignment; the backward is
    /// the exact adjoint (first-order only).
    pub fn upsample_bilinear2(&self) -> Tensor {
        let (n, c, h, w) = dims4(self);
        let src = self.data();
        let (oh, ow) = (h * 2, w * 2);
        let taps = |o: usize, limit: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let lo = s.floor().max(0.0) as usize;
            let lo = lo.min(limit - 1);
            let hi = (lo + 1).min(limit - 1);
            let f = (s - lo as f64).clamp(0.0, 1.0);
            (lo, hi, f)
        };
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n * c {
            let base = img * h * w;
            let obase = img * oh * ow;
            for oy in 0..oh {
                let (y0, y1, fy) = taps(oy, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = taps(ox, w);
                    out[obase + oy * ow + ox] = (1.0 - fy)
                        * ((1.0 - fx) * src[base + y0 * w + x0] + fx * src[base + y0 * w + x1])
                        + fy * ((1.0 - fx) * src[base + y1 * w + x0] + fx * src[base + y1 * w + x1]);
                }
            }
        }
        Tensor::make(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if g.needs_grad() {
                    panic!("second-order gradients are not supported through upsample_bilinear2");
                }
                let gd = g.data();
                let mut gx = vec![0.0; n * c * h * w];
                for img in 0..n * c {
                    let base = img * h * w;
                    let obase = img * oh * ow;
                    for oy in 0..oh {
                        let (y0, y1, fy) = taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = taps(ox, w);
                            let gv = gd[obase + oy * ow + ox];
                            gx[base + y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                            gx[base + y0 * w + x1] += (1.0 - fy) * fx * gv;
                            gx[base + y1 * w + x0] += fy * (1.0 - fx) * gv;
                            gx[base + y1 * w + x1] += fy * fx * gv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx))]
            }),
        )
    }

    /// x[N,D] + v[N] broadcast over columns.
    pub fn add_col_vec(&self, v: &Tensor) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(v.shape(), [n]);
        let (x, vv) = (self.data(), v.data());
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = x[r * d + c] + vv[r];
            }
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.sum_cols())]),
        )
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn add_chan_bias(&self, bias: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(self);
        assert_eq!(bias.shape(), [c]);
        let flat = self.reshape(&[n * c, h * w]);
        let tiled = bias.reshape(&[1, c]).repeat_rows(n).reshape(&[n * c]);
        flat.add_col_vec(&tiled).reshape(&[n, c, h, w])
    }

    /// Scales each channel of an NCHW tensor by a per-(sample,channel) factor
    /// s[N,C].
    pub fn mul_sample_chan(&self, s: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(self);
        assert_eq!(s.shape(), [n, c]);
        let flat = self.reshape(&[n * c, h * w]);
        flat.mul_col_vec(&s.reshape(&[n * c])).reshape(&[n, c, h, w])
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_general(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    if oh == h && ow == w {
        im2col(x, c, h, w, k, pad, col);
        return;
    }
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * ohw;
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad as isize;
                        col[row + oy * ow + ox] = if iy < 0
                            || iy >= h as isize
                            || ix < 0
                            || ix >= w as isize
                        {
                            0.0
                        } else {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, backward_with, Tensor};

    fn conv_ref(
        x: &[f64],
        w: &[f64],
        n: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        k: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = oy as isize + ki as isize - pad as isize;
                                    let ix = ox as isize + kj as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((ni * cin + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * cin + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((ni * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let (n, cin, h, w, cout, k, pad) = (2, 3, 5, 4, 2, 3, 1);
        let xd: Vec<f64> = (0..n * cin * h * w).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect();
        let wd: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 17 % 13) as f64 - 6.0) / 5.0).collect();
        let x = Tensor::from_vec(&[n, cin, h, w], xd.clone());
        let wt = Tensor::from_vec(&[cout, cin, k, k], wd.clone());
        let y = x.conv2d(&wt, pad);
        let reference = conv_ref(&xd, &wd, n, cin, h, w, cout, k, pad);
        for (a, b) in y.to_vec().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let (n, cin, h, w, cout, k, pad) = (1, 2, 4, 4, 2, 3, 1);
        let xd: Vec<f64> = (0..n * cin * h * w).map(|i| ((i * 29 % 23) as f64 - 11.0) / 9.0).collect();
        let wd: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 31 % 17) as f64 - 8.0) / 6.0).collect();
        let probe: Vec<f64> = (0..n * cout * h * w).map(|i| ((i * 13 % 11) as f64 - 5.0) / 4.0).collect();

        let f = |xs: &[f64], ws: &[f64]| {
            let x = Tensor::from_vec(&[n, cin, h, w], xs.to_vec());
            let wt = Tensor::from_vec(&[cout, cin, k, k], ws.to_vec());
            x.conv2d(&wt, pad)
                .reshape(&[n * cout * h * w])
                .mul(&Tensor::from_vec(&[n * cout * h * w], probe.clone()))
                .sum_all()
                .item()
        };
        let x = Tensor::leaf(&[n, cin, h, w], xd.clone());
        let wt = Tensor::leaf(&[cout, cin, k, k], wd.clone());
        let y = x
            .conv2d(&wt, pad)
            .reshape(&[n * cout * h * w])
            .mul(&Tensor::from_vec(&[n * cout * h * w], probe.clone()))
            .sum_all();
        let g = backward(&y);
        let gx = g.wrt(&x).to_vec();
        let gw = g.wrt(&wt).to_vec();
        let hstep = 1e-6;
        for i in (0..xd.len()).step_by(5) {
            let mut p = xd.clone();
            let mut m = xd.clone();
            p[i] += hstep;
            m[i] -= hstep;
            let fd = (f(&p, &wd) - f(&m, &wd)) / (2.0 * hstep);
            assert!((gx[i] - fd).abs() < 1e-6, "x[{}]: {} vs {}", i, gx[i], fd);
        }
        for i in 0..wd.len() {
            let mut p = wd.clone();
            let mut m = wd.clone();
            p[i] += hstep;
            m[i] -= hstep;
            let fd = (f(&xd, &p) - f(&xd, &m)) / (2.0 * hstep);
            assert!((gw[i] - fd).abs() < 1e-6, "w[{}]: {} vs {}", i, gw[i], fd);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = Tensor::leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.upsample_nearest2();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        let z = y.avg_pool2();
        assert_eq!(z.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let g = backward(&z.sum_all()).wrt(&x).to_vec();
        assert_eq!(g, vec![1.0; 4]);
    }

    /// Second-order check: d/dw of || d(conv)/dx ||^2, the R1 pattern.
    #[test]
    fn conv_double_backward_matches_fd() {
        let (n, cin, h, w, cout, k, pad) = (1, 1, 3, 3, 1, 3, 1);
        let xd: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 3.0).collect();
        let wd: Vec<f64> = (0..9).map(|i| ((i * 7 % 5) as f64 - 2.0) / 2.5).collect();

        // P(w) = sum( (d sum(conv(x,w)) / dx)^2 )
        let penalty = |ws: &[f64]| {
            let x = Tensor::leaf(&[n, cin, h, w], xd.clone());
            let wt = Tensor::leaf(&[cout, cin, k, k], ws.to_vec());
            let out = x.conv2d(&wt, pad).sum_all();
            let gx = backward_with(&out, true).wrt(&x);
            (gx.square().sum_all(), wt)
        };
        let (p, wt) = penalty(&wd);
        let gw = backward(&p).wrt(&wt).to_vec();
        let hstep = 1e-6;
        for i in 0..wd.len() {
            let mut pw = wd.clone();
            let mut mw = wd.clone();
            pw[i] += hstep;
            mw[i] -= hstep;
            let fp = penalty(&pw).0.item();
            let fm = penalty(&mw).0.item();
            let fd = (fp - fm) / (2.0 * hstep);
            assert!(
                (gw[i] - fd).abs() < 1e-5,
                "w[{}]: analytic {} vs fd {}",
                i,
                gw[i],
                fd
            );
        }
    }
}
