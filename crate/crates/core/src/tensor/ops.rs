//! Elementwise, reduction, shape and matmul primitives.

use super::Tensor;
use rayon::prelude::*;

/// Rows below this threshold run matmul single-threaded.
const PAR_MATMUL_MIN_ROWS: usize = 64;

fn same_shape(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

impl Tensor {
    fn zip_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
        let (da, db) = (a.data(), b.data());
        let (da, db): (&[f64], &[f64]) = (&da, &db);
        let mut out = vec![0.0; da.len()];
        if da.len() >= 1 << 16 {
            out.par_chunks_mut(1 << 12).enumerate().for_each(|(ci, chunk)| {
                let base = ci << 12;
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = f(da[base + i], db[base + i]);
                }
            });
        } else {
            for i in 0..da.len() {
                out[i] = f(da[i], db[i]);
            }
        }
        out
    }

    fn map_data(&self, f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
        let d = self.data();
        let d: &[f64] = &d;
        let mut out = vec![0.0; d.len()];
        if d.len() >= 1 << 16 {
            out.par_chunks_mut(1 << 12).enumerate().for_each(|(ci, chunk)| {
                let base = ci << 12;
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = f(d[base + i]);
                }
            });
        } else {
            for i in 0..d.len() {
                out[i] = f(d[i]);
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other);
        let data = Tensor::zip_data(self, other, |a, b| a + b);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other);
        let data = Tensor::zip_data(self, other, |a, b| a - b);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other);
        let data = Tensor::zip_data(self, other, |a, b| a * b);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| vec![Some(g.mul(&p[1])), Some(g.mul(&p[0]))]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.map_data(|a| a * c);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.scale(c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.map_data(|a| a + c);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn recip(&self) -> Tensor {
        let data = self.map_data(|a| 1.0 / a);
        let saved = data.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let d: Vec<f64> = saved.iter().map(|y| -y * y).collect();
                let gate = Tensor::from_vec(g.shape(), d);
                vec![Some(g.mul(&gate))]
            }),
        )
    }

    pub fn sqrt_elem(&self) -> Tensor {
        let data = self.map_data(f64::sqrt);
        let saved = data.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = saved.iter().map(|y| 0.5 / y.max(1e-300)).collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.map_data(f64::exp);
        let saved = data.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate = Tensor::from_vec(g.shape(), saved.clone());
                vec![Some(g.mul(&gate))]
            }),
        )
    }

    pub fn ln(&self) -> Tensor {
        let src = self.data();
        let data = self.map_data(f64::ln);
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = src.iter().map(|x| 1.0 / x).collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.map_data(f64::tanh);
        let saved = data.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = saved.iter().map(|y| 1.0 - y * y).collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.map_data(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let saved = data.clone();
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = saved.iter().map(|y| y * (1.0 - y)).collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    pub fn softplus(&self) -> Tensor {
        let src = self.data();
        let data = self.map_data(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        });
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = src
                    .iter()
                    .map(|&x| {
                        if x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        }
                    })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    /// tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let src = self.data();
        let data = self.map_data(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()));
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = src
                    .iter()
                    .map(|&x| {
                        let u = C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                    })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    /// Gate is constant a.e., so the ops-composed backward stays exact under
    /// double differentiation (second derivative is zero off the kink).
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let src = self.data();
        let data = self.map_data(|x| if x > 0.0 { x } else { slope * x });
        Tensor::make(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gate: Vec<f64> = src.iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect();
                vec![Some(g.mul(&Tensor::from_vec(g.shape(), gate)))]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn sum_all(&self) -> Tensor {
        let d = self.data();
        let total = pairwise_sum(&d);
        let shape = self.shape().to_vec();
        Tensor::make(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_full(&shape))]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// [1] -> arbitrary shape, every element equal to the scalar.
    pub fn broadcast_full(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), 1);
        let v = self.item();
        let n: usize = shape.iter().product();
        Tensor::make(
            shape.to_vec(),
            vec![v; n],
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.sum_all())]),
        )
    }

    /// [N,D] -> [D], summing over rows.
    pub fn sum_rows(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::make(
            vec![d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_rows(n))]),
        )
    }

    /// [D] -> [N,D], repeating the vector as every row.
    pub fn broadcast_rows(&self, n: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1);
        let d = self.len();
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            out[r * d..(r + 1) * d].copy_from_slice(&src);
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.sum_rows())]),
        )
    }

    /// [N,D] -> [N], summing over columns.
    pub fn sum_cols(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; n];
        for r in 0..n {
            out[r] = pairwise_sum(&src[r * d..(r + 1) * d]);
        }
        Tensor::make(
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_cols(d))]),
        )
    }

    /// [N] -> [N,D], repeating each element across a row.
    pub fn broadcast_cols(&self, d: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1);
        let n = self.len();
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            out[r * d..(r + 1) * d].fill(src[r]);
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.sum_cols())]),
        )
    }

    /// x[N,D] + v[D] broadcast over rows.
    pub fn add_row_vec(&self, v: &Tensor) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(v.shape(), [d]);
        let (x, vv) = (self.data(), v.data());
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = x[r * d + c] + vv[c];
            }
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.sum_rows())]),
        )
    }

    /// x[N,D] * v[D] broadcast over rows.
    pub fn mul_row_vec(&self, v: &Tensor) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(v.shape(), [d]);
        let (x, vv) = (self.data(), v.data());
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = x[r * d + c] * vv[c];
            }
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(|g, p| {
                let gx = g.mul_row_vec(&p[1]);
                let gv = g.mul(&p[0]).sum_rows();
                vec![Some(gx), Some(gv)]
            }),
        )
    }

    /// x[N,D] * v[N] broadcast over columns (per-row scalar).
    pub fn mul_col_vec(&self, v: &Tensor) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(v.shape(), [n]);
        let (x, vv) = (self.data(), v.data());
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = x[r * d + c] * vv[r];
            }
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(|g, p| {
                let gx = g.mul_col_vec(&p[1]);
                let gv = g.mul(&p[0]).sum_cols();
                vec![Some(gx), Some(gv)]
            }),
        )
    }

    pub fn transpose2d(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                out[c * n + r] = src[r * d + c];
            }
        }
        Tensor::make(
            vec![d, n],
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.transpose2d())]),
        )
    }

    /// [N,K] x [K,M] -> [N,M].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &a, &b, &mut out);
        Tensor::make(
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let ga = g.matmul(&p[1].transpose2d());
                let gb = p[0].transpose2d().matmul(g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let d = parts[0].cols();
        let mut total = 0usize;
        for p in parts {
            assert_eq!(p.cols(), d);
            total += p.rows();
        }
        let mut out = Vec::with_capacity(total * d);
        let mut splits = Vec::with_capacity(parts.len());
        for p in parts {
            splits.push(p.rows());
            out.extend_from_slice(&p.data());
        }
        Tensor::make(
            vec![total, d],
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(splits.len());
                let mut at = 0usize;
                for &rows in &splits {
                    grads.push(Some(g.slice_rows(at, rows)));
                    at += rows;
                }
                grads
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert!(start + len <= n, "slice_rows {}+{} > {}", start, len, n);
        let src = self.data();
        let out = src[start * d..(start + len) * d].to_vec();
        Tensor::make(
            vec![len, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut parts = Vec::with_capacity(3);
                if start > 0 {
                    parts.push(Tensor::zeros(&[start, d]));
                }
                parts.push(g.clone());
                if start + len < n {
                    parts.push(Tensor::zeros(&[n - start - len, d]));
                }
                vec![Some(Tensor::concat_rows(&parts))]
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let n = parts[0].rows();
        let mut total = 0usize;
        for p in parts {
            assert_eq!(p.rows(), n);
            total += p.cols();
        }
        let mut out = vec![0.0; n * total];
        let datas: Vec<_> = parts.iter().map(|p| (p.cols(), p.data())).collect();
        for r in 0..n {
            let mut at = 0usize;
            for (d, data) in &datas {
                out[r * total + at..r * total + at + d].copy_from_slice(&data[r * d..(r + 1) * d]);
                at += d;
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        Tensor::make(
            vec![n, total],
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut at = 0usize;
                for &w in &widths {
                    grads.push(Some(g.slice_cols(at, w)));
                    at += w;
                }
                grads
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert!(start + len <= d);
        let src = self.data();
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&src[r * d + start..r * d + start + len]);
        }
        Tensor::make(
            vec![n, len],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut parts = Vec::with_capacity(3);
                if start > 0 {
                    parts.push(Tensor::zeros(&[n, start]));
                }
                parts.push(g.clone());
                if start + len < d {
                    parts.push(Tensor::zeros(&[n, d - start - len]));
                }
                vec![Some(Tensor::concat_cols(&parts))]
            }),
        )
    }

    /// Rows of `self` selected by `idx` (with repetition allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather index {} out of range {}", i, n);
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let idx_owned: Vec<usize> = idx.to_vec();
        Tensor::make(
            vec![idx.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.scatter_add_rows(&idx_owned, n))]),
        )
    }

    /// Adjoint of `gather_rows`: rows of `self` accumulated into `n` slots.
    pub fn scatter_add_rows(&self, idx: &[usize], n: usize) -> Tensor {
        let (m, d) = (self.rows(), self.cols());
        assert_eq!(m, idx.len());
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += src[r * d + c];
            }
        }
        let idx_owned: Vec<usize> = idx.to_vec();
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.gather_rows(&idx_owned))]),
        )
    }

    /// [G*k, D] -> [G, D], summing each consecutive group of k rows.
    pub fn sum_groups(&self, k: usize) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(n % k, 0, "sum_groups: {} rows not divisible by {}", n, k);
        let groups = n / k;
        let src = self.data();
        let mut out = vec![0.0; groups * d];
        for gidx in 0..groups {
            for r in 0..k {
                let row = &src[(gidx * k + r) * d..(gidx * k + r + 1) * d];
                for c in 0..d {
                    out[gidx * d + c] += row[c];
                }
            }
        }
        Tensor::make(
            vec![groups, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.repeat_rows(k))]),
        )
    }

    /// [G, D] -> [G*k, D], each row repeated k times consecutively.
    pub fn repeat_rows(&self, k: usize) -> Tensor {
        let (g_rows, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; g_rows * k * d];
        for gi in 0..g_rows {
            let row = &src[gi * d..(gi + 1) * d];
            for r in 0..k {
                out[(gi * k + r) * d..(gi * k + r + 1) * d].copy_from_slice(row);
            }
        }
        Tensor::make(
            vec![g_rows * k, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.sum_groups(k))]),
        )
    }

    /// Per-row L2 normalization: y = x / max(||x||, eps).
    pub fn normalize_rows(&self, eps: f64) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[r] = norm;
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
        }
        let saved = out.clone();
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let y = &saved[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], gx).carry_graph_of(g))]
            }),
        )
    }

    /// Softmax over the last dimension of a 2-d tensor.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - mx).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        let saved = out.clone();
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let y = &saved[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], gx).carry_graph_of(g))]
            }),
        )
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let src = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                z += (row[c] - mx).exp();
            }
            let lz = mx + z.ln();
            for c in 0..d {
                out[r * d + c] = row[c] - lz;
            }
        }
        let saved = out.clone();
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let ls = &saved[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..d {
                        gx[r * d + c] = gr[c] - ls[c].exp() * gsum;
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], gx).carry_graph_of(g))]
            }),
        )
    }

    /// Layer normalization over the last dimension with affine params.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let src = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = gm[c] * h + bt[c];
            }
        }
        Tensor::make(
            vec![n, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; n * d];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..n {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for c in 0..d {
                        let gy = gr[c] * gm[c];
                        sum_gy += gy;
                        sum_gyx += gy * xh[c];
                        ggamma[c] += gr[c] * xh[c];
                        gbeta[c] += gr[c];
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let gy = gr[c] * gm[c];
                        gx[r * d + c] =
                            inv_std[r] * (gy - inv_d * sum_gy - xh[c] * inv_d * sum_gyx);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, d], gx).carry_graph_of(g)),
                    Some(Tensor::from_vec(&[d], ggamma).carry_graph_of(g)),
                    Some(Tensor::from_vec(&[d], gbeta).carry_graph_of(g)),
                ]
            }),
        )
    }

    /// Keeps a raw-kernel gradient attached to the upstream graph when the
    /// upstream gradient itself is being differentiated: adds zero times the
    /// upstream so the node depends on it linearly. For tensors produced from
    /// plain buffers this is the identity in value.
    fn carry_graph_of(self, g: &Tensor) -> Tensor {
        if g.needs_grad() {
            // Extremely rare path (second-order through a raw-backward op is
            // unsupported); fail loudly instead of silently dropping terms.
            panic!("second-order gradients are not supported through this op");
        }
        self
    }
}

/// Deterministic pairwise summation (order independent of thread count).
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Row-parallel dgemm: out[n,m] = a[n,k] * b[k,m]. Each output row block is
/// produced by an independent sequential kernel call, so results are bitwise
/// identical for any thread count.
pub fn gemm(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    let chunk = PAR_MATMUL_MIN_ROWS.max(n.div_ceil(rayon::current_num_threads().max(1) * 2));
    if n <= PAR_MATMUL_MIN_ROWS {
        gemm_block(n, k, m, a, b, out);
    } else {
        out.par_chunks_mut(chunk * m).enumerate().for_each(|(ci, oc)| {
            let r0 = ci * chunk;
            let rows = oc.len() / m;
            gemm_block(rows, k, m, &a[r0 * k..(r0 + rows) * k], b, oc);
        });
    }
}

fn gemm_block(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tensor};

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// FD-checks d(sum of probe ⊙ op(x)) / dx for every element.
    fn check_unary(op: impl Fn(&Tensor) -> Tensor + Copy, x0: Vec<f64>) {
        let probe: Vec<f64> = (0..x0.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let f = |xs: &[f64]| {
            let t = Tensor::from_vec(&[xs.len()], xs.to_vec());
            let y = op(&t);
            y.to_vec().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let x = Tensor::leaf(&[x0.len()], x0.clone());
        let y = op(&x).mul(&Tensor::from_vec(&[x0.len()], probe.clone())).sum_all();
        let g = backward(&y).wrt(&x).to_vec();
        for i in 0..x0.len() {
            let fd = finite_diff(f, &x0, i);
            let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "element {}: analytic {} vs fd {}", i, g[i], fd);
        }
    }

    #[test]
    fn unary_grads_match_finite_differences() {
        let xs = vec![-1.4, -0.3, 0.2, 0.9, 2.1];
        check_unary(|t| t.exp(), xs.clone());
        check_unary(|t| t.tanh(), xs.clone());
        check_unary(|t| t.sigmoid(), xs.clone());
        check_unary(|t| t.softplus(), xs.clone());
        check_unary(|t| t.gelu(), xs.clone());
        check_unary(|t| t.leaky_relu(0.2), xs.clone());
        check_unary(|t| t.square(), xs.clone());
        check_unary(|t| t.ln(), vec![0.3, 0.9, 1.7, 2.4]);
        check_unary(|t| t.recip(), vec![0.5, -1.2, 2.0]);
    }

    #[test]
    fn matmul_grads() {
        let a = Tensor::leaf(&[2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let b = Tensor::leaf(&[3, 2], vec![2.0, 1.0, -1.0, 0.0, 0.5, -2.0]);
        let y = a.matmul(&b).sum_all();
        let g = backward(&y);
        // dY/dA = ones(2,2) @ B^T
        let ga = g.wrt(&a).to_vec();
        let expect_row = [3.0, -1.0, -1.5];
        for r in 0..2 {
            for c in 0..3 {
                assert!((ga[r * 3 + c] - expect_row[c]).abs() < 1e-12);
            }
        }
        let gb = g.wrt(&b).to_vec();
        let expect_col = [1.5, 2.0, 2.0]; // column sums of A
        for r in 0..3 {
            for c in 0..2 {
                assert!((gb[r * 2 + c] - expect_col[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sums_to_one_and_grads() {
        let x = Tensor::leaf(&[2, 3], vec![0.1, 1.2, -0.4, 2.0, 2.0, 2.0]);
        let y = x.softmax_rows();
        let v = y.to_vec();
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);

        let probe = Tensor::from_vec(&[2, 3], vec![0.3, -0.2, 0.7, 0.1, 0.9, -0.5]);
        let loss = x.softmax_rows().mul(&probe).sum_all();
        let g = backward(&loss).wrt(&x).to_vec();
        let x0 = x.to_vec();
        for i in 0..6 {
            let h = 1e-6;
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let f = |xs: &[f64]| {
                Tensor::from_vec(&[2, 3], xs.to_vec())
                    .softmax_rows()
                    .mul(&probe)
                    .sum_all()
                    .item()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "{} vs {}", g[i], fd);
        }
    }

    #[test]
    fn layer_norm_grads_match_fd() {
        let x0 = vec![0.4, -1.1, 2.2, 0.0, 0.7, -0.2];
        let gamma0 = vec![1.1, 0.9, 1.3];
        let beta0 = vec![0.1, -0.2, 0.05];
        let probe = vec![0.2, -0.4, 0.6, 0.3, 0.9, -0.1];
        let f = |xs: &[f64], gs: &[f64], bs: &[f64]| {
            let x = Tensor::from_vec(&[2, 3], xs.to_vec());
            let gm = Tensor::from_vec(&[3], gs.to_vec());
            let bt = Tensor::from_vec(&[3], bs.to_vec());
            x.layer_norm(&gm, &bt, 1e-6)
                .mul(&Tensor::from_vec(&[2, 3], probe.clone()))
                .sum_all()
                .item()
        };
        let x = Tensor::leaf(&[2, 3], x0.clone());
        let gm = Tensor::leaf(&[3], gamma0.clone());
        let bt = Tensor::leaf(&[3], beta0.clone());
        let y = x
            .layer_norm(&gm, &bt, 1e-6)
            .mul(&Tensor::from_vec(&[2, 3], probe.clone()))
            .sum_all();
        let g = backward(&y);
        let (gx, gg, gb) = (g.wrt(&x).to_vec(), g.wrt(&gm).to_vec(), g.wrt(&bt).to_vec());
        let h = 1e-6;
        for i in 0..6 {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &gamma0, &beta0) - f(&m, &gamma0, &beta0)) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-5, "x[{}]: {} vs {}", i, gx[i], fd);
        }
        for i in 0..3 {
            let mut p = gamma0.clone();
            let mut m = gamma0.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&x0, &p, &beta0) - f(&x0, &m, &beta0)) / (2.0 * h);
            assert!((gg[i] - fd).abs() < 1e-5);
            let mut pb = beta0.clone();
            let mut mb = beta0.clone();
            pb[i] += h;
            mb[i] -= h;
            let fdb = (f(&x0, &gamma0, &pb) - f(&x0, &gamma0, &mb)) / (2.0 * h);
            assert!((gb[i] - fdb).abs() < 1e-5);
        }
    }

    #[test]
    fn gather_scatter_round_trip_grads() {
        let table = Tensor::leaf(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let picked = table.gather_rows(&[3, 1, 3]);
        assert_eq!(picked.to_vec(), vec![7.0, 8.0, 3.0, 4.0, 7.0, 8.0]);
        let loss = picked.sum_all();
        let g = backward(&loss).wrt(&table).to_vec();
        assert_eq!(g, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn group_sum_and_repeat_are_adjoint() {
        let x = Tensor::leaf(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = x.sum_groups(2);
        assert_eq!(y.to_vec(), vec![4.0, 6.0, 12.0, 14.0]);
        let g = backward(&y.sum_all()).wrt(&x).to_vec();
        assert_eq!(g, vec![1.0; 8]);
    }

    #[test]
    fn normalize_rows_unit_norm_and_grads() {
        let x0 = vec![0.3, -0.4, 1.2, 0.0, 0.5, -0.1];
        let x = Tensor::leaf(&[2, 3], x0.clone());
        let y = x.normalize_rows(1e-12);
        for r in 0..2 {
            let v = y.to_vec();
            let n: f64 = v[r * 3..(r + 1) * 3].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let probe = Tensor::from_vec(&[2, 3], vec![0.2, 0.7, -0.3, 0.4, -0.9, 0.6]);
        let loss = x.normalize_rows(1e-12).mul(&probe).sum_all();
        let g = backward(&loss).wrt(&x).to_vec();
        let h = 1e-7;
        for i in 0..6 {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p[i] += h;
            m[i] -= h;
            let f = |xs: &[f64]| {
                Tensor::from_vec(&[2, 3], xs.to_vec())
                    .normalize_rows(1e-12)
                    .mul(&probe)
                    .sum_all()
                    .item()
            };
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-5, "{} vs {}", g[i], fd);
        }
    }
}
