//! K-way categorical latent prior: nearest-neighbour vector quantization of
//! tri-plane embeddings with straight-through gradients and the
//! VQ/commitment loss. Codes are l2-normalized (both embeddings and entries)
//! when the config enables it.

use crate::error::{Error, Result};
use crate::nn::{HasParams, ParamList, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

const NORM_EPS: f64 = 1e-12;

pub struct Codebook {
    /// Raw entries [K, D]; rows are re-normalized after every optimizer
    /// step when `l2_normalize` is on.
    pub entries: Tensor,
    pub l2_normalize: bool,
}

/// Result of quantizing an [M, D] embedding batch.
pub struct Quantized {
    /// Normalized input embeddings (graph-attached to the encoder).
    pub e_norm: Tensor,
    /// Selected codebook rows, exactly equal to `lookup(indices)`
    /// (graph-attached to the entries).
    pub vectors: Tensor,
    pub indices: Vec<usize>,
}

impl Codebook {
    /// Fan-in variance-scaled uniform init (scale 1) over the lookup
    /// dimension, then row normalization when l2 mode is on.
    pub fn new(rng: &mut Rng, k: usize, d: usize, l2_normalize: bool) -> Codebook {
        let bound = (3.0 / d as f64).sqrt();
        let mut data: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-bound..bound)).collect();
        if l2_normalize {
            for row in data.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Codebook {
            entries: Tensor::leaf(&[k, d], data),
            l2_normalize,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Codes used for lookup: normalized rows in l2 mode, raw otherwise.
    pub fn codes(&self) -> Tensor {
        if self.l2_normalize {
            self.entries.normalize_rows(NORM_EPS)
        } else {
            self.entries.clone()
        }
    }

    /// Normalizes embedding rows to match the code space.
    pub fn normalize(&self, e: &Tensor) -> Tensor {
        if self.l2_normalize {
            e.normalize_rows(NORM_EPS)
        } else {
            e.clone()
        }
    }

    /// Nearest-entry quantization; ties break to the lowest index.
    pub fn quantize(&self, e: &Tensor) -> Result<Quantized> {
        let d = self.dim();
        assert_eq!(e.cols(), d, "embedding dim {} vs codebook dim {}", e.cols(), d);
        if e.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite embedding passed to quantize".into()));
        }
        let e_norm = self.normalize(e);
        let codes = self.codes();
        let indices = nearest_indices(&e_norm.data(), &codes.data(), d);
        let vectors = codes.gather_rows(&indices);
        Ok(Quantized { e_norm, vectors, indices })
    }

    /// Forward value is exactly `z` (bitwise); the gradient passes to `e`
    /// unchanged. Codebook entries receive gradients only through `vq_loss`.
    pub fn straight_through(&self, e_norm: &Tensor, z: &Tensor) -> Tensor {
        assert_eq!(e_norm.shape(), z.shape());
        Tensor::make(
            z.shape().to_vec(),
            z.to_vec(),
            vec![e_norm.clone(), z.clone()],
            Box::new(|g, _| vec![Some(g.clone()), None]),
        )
    }

    /// ||sg[e] - z||^2 + lambda * ||sg[z] - e||^2, squared norms per cell,
    /// mean over cells.
    pub fn vq_loss(&self, e_norm: &Tensor, z: &Tensor, commitment_weight: f64) -> Tensor {
        assert_eq!(e_norm.shape(), z.shape());
        let cells = e_norm.rows() as f64;
        let codebook_term = z.sub(&e_norm.detach()).square().sum_all().scale(1.0 / cells);
        let commit_term = e_norm.sub(&z.detach()).square().sum_all().scale(commitment_weight / cells);
        codebook_term.add(&commit_term)
    }

    /// Rows of the code table at `indices`; out-of-range is an error.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let k = self.size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Shape(format!("codebook index {bad} out of range 0..{k}")));
        }
        Ok(self.codes().gather_rows(indices))
    }

    /// Histogram of code usage for a quantized batch.
    pub fn usage_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0usize; self.size()];
        for &i in indices {
            h[i] += 1;
        }
        h
    }

    /// Re-normalizes stored entries; called after each optimizer step in l2
    /// mode so rows stay unit-norm.
    pub fn renormalize_entries(&self) {
        if !self.l2_normalize {
            return;
        }
        let d = self.dim();
        self.entries.set_data(|rows| {
            for row in rows.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= n);
            }
        });
    }
}

impl HasParams for Codebook {
    fn collect(&self, prefix: &str, out: &mut ParamList) {
        let name = if prefix.is_empty() {
            "entries".to_string()
        } else {
            format!("{prefix}.entries")
        };
        out.push(name, &self.entries);
    }
}

fn nearest_indices(e: &[f64], codes: &[f64], d: usize) -> Vec<usize> {
    let m = e.len() / d;
    let k = codes.len() / d;
    let mut out = Vec::with_capacity(m);
    for cell in 0..m {
        let ev = &e[cell * d..(cell + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for n in 0..k {
            let cv = &codes[n * d..(n + 1) * d];
            let mut dist = 0.0;
            for i in 0..d {
                let diff = ev[i] - cv[i];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = n;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream;
    use crate::tensor::backward;
    use proptest::prelude::*;

    fn fixed_codebook(rows: Vec<Vec<f64>>, l2: bool) -> Codebook {
        let k = rows.len();
        let d = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Codebook {
            entries: Tensor::leaf(&[k, d], data),
            l2_normalize: l2,
        }
    }

    #[test]
    fn nearest_neighbor_identity_basis() {
        let cb = fixed_codebook(vec![vec![1.0, 0.0], vec![0.0, 1.0]], false);
        let q = cb.quantize(&Tensor::from_vec(&[1, 2], vec![0.9, 0.1])).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.vectors.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn exact_tie_breaks_to_lowest_index() {
        // Entries 3 and 7 are exactly equidistant from the zero vector.
        let mut rows = vec![
            vec![5.0, 5.0],
            vec![4.0, -6.0],
            vec![-7.0, 2.0],
            vec![1.0, 0.0],  // distance 1
            vec![3.0, 3.0],
            vec![-2.0, 5.0],
            vec![6.0, -1.0],
            vec![-1.0, 0.0], // distance 1
        ];
        rows[4] = vec![8.0, 8.0];
        let cb = fixed_codebook(rows, false);
        let q = cb.quantize(&Tensor::from_vec(&[1, 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(q.indices, vec![3]);
    }

    #[test]
    fn quantize_matches_bruteforce_oracle() {
        // 10 random codebooks, 100 random cells each: compare against an
        // exhaustive argmin scan written independently of the impl path.
        for trial in 0..10 {
            let mut rng = stream(100 + trial, "vq-oracle", 0);
            let cb = Codebook::new(&mut rng, 16, 4, false);
            let cells: Vec<f64> = (0..100 * 4).map(|_| crate::nn::normal(&mut rng)).collect();
            let e = Tensor::from_vec(&[100, 4], cells.clone());
            let q = cb.quantize(&e).unwrap();
            let codes = cb.codes().to_vec();
            for cell in 0..100 {
                let ev = &cells[cell * 4..(cell + 1) * 4];
                let mut best = usize::MAX;
                let mut best_d = f64::INFINITY;
                for n in 0..16 {
                    let cv = &codes[n * 4..(n + 1) * 4];
                    let dist: f64 = ev.iter().zip(cv).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_d {
                        best_d = dist;
                        best = n;
                    }
                }
                assert_eq!(q.indices[cell], best, "trial {trial} cell {cell}");
            }
        }
    }

    #[test]
    fn l2_mode_argmin_equals_dot_product_argmax() {
        let mut rng = stream(5, "vq-l2", 0);
        let cb = Codebook::new(&mut rng, 32, 8, true);
        let cells: Vec<f64> = (0..50 * 8).map(|_| crate::nn::normal(&mut rng)).collect();
        let e = Tensor::from_vec(&[50, 8], cells);
        let q = cb.quantize(&e).unwrap();
        let en = q.e_norm.to_vec();
        let codes = cb.codes().to_vec();
        for cell in 0..50 {
            let ev = &en[cell * 8..(cell + 1) * 8];
            let mut best = usize::MAX;
            let mut best_dot = f64::NEG_INFINITY;
            for n in 0..32 {
                let cv = &codes[n * 8..(n + 1) * 8];
                let dot: f64 = ev.iter().zip(cv).map(|(a, b)| a * b).sum();
                if dot > best_dot {
                    best_dot = dot;
                    best = n;
                }
            }
            assert_eq!(q.indices[cell], best);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut rng = stream(9, "vq-st", 0);
        let cb = Codebook::new(&mut rng, 8, 4, true);
        let e = Tensor::leaf(&[3, 4], (0..12).map(|i| (i as f64 - 6.0) / 5.0).collect());
        let q = cb.quantize(&e).unwrap();
        let st = cb.straight_through(&q.e_norm, &q.vectors);
        assert_eq!(st.to_vec(), q.vectors.to_vec());

        // loss = sum(z) -> gradient at e_norm is all ones.
        let g = backward(&st.sum_all());
        assert_eq!(g.wrt(&q.e_norm).to_vec(), vec![1.0; 12]);
        // Codebook entries receive nothing through the straight-through path.
        assert!(g.get(&cb.entries).is_none());

        // A loss independent of z gives zero gradient at e.
        let g2 = backward(&Tensor::scalar(1.0).add(&st.sum_all().scale(0.0)));
        assert_eq!(g2.wrt(&q.e_norm).to_vec(), vec![0.0; 12]);
    }

    #[test]
    fn vq_loss_hand_values_and_stop_gradients() {
        let cb = fixed_codebook(vec![vec![1.0, 0.0], vec![0.0, 1.0]], false);
        // Single cell e = (0,0), z = (1,0), lambda = 0.25.
        let e = Tensor::leaf(&[1, 2], vec![0.0, 0.0]);
        let z = cb.lookup(&[0]).unwrap();
        let loss = cb.vq_loss(&e, &z, 0.25);
        assert!((loss.item() - 1.25).abs() < 1e-12);

        // e == z everywhere -> 0.
        let e_eq = Tensor::leaf(&[1, 2], vec![1.0, 0.0]);
        let z_eq = cb.lookup(&[0]).unwrap();
        assert_eq!(cb.vq_loss(&e_eq, &z_eq, 0.25).item(), 0.0);

        // Stop-gradient contract: entries see only the first term, e only
        // the second.
        let g = backward(&loss);
        let ge = g.wrt(&e).to_vec();
        // d/de of 0.25*||z_det - e||^2 / 1 = -0.5*(z - e) = (-0.5, 0)
        assert!((ge[0] + 0.5).abs() < 1e-12);
        assert!(ge[1].abs() < 1e-12);
        let gentries = g.wrt(&cb.entries).to_vec();
        // d/dz of ||sg[e] - z||^2 = 2(z - e) = (2, 0) scattered to row 0.
        assert!((gentries[0] - 2.0).abs() < 1e-12);
        assert!(gentries[1].abs() < 1e-12);
        assert_eq!(&gentries[2..], &[0.0, 0.0]);

        // Zeroing the first term leaves entries without gradient.
        let commit_only = e.sub(&z.detach()).square().sum_all().scale(0.25);
        let g2 = backward(&commit_only);
        assert!(g2.get(&cb.entries).is_none());
    }

    #[test]
    fn lookup_bounds_and_all_zero_indices() {
        let mut rng = stream(3, "vq-lookup", 0);
        let cb = Codebook::new(&mut rng, 4, 3, true);
        let v = cb.lookup(&[0, 0, 0]).unwrap();
        let codes = cb.codes().to_vec();
        for cell in 0..3 {
            assert_eq!(&v.to_vec()[cell * 3..(cell + 1) * 3], &codes[0..3]);
        }
        assert!(cb.lookup(&[4]).is_err());
    }

    #[test]
    fn usage_histogram_sums_to_cells() {
        let mut rng = stream(4, "vq-hist", 0);
        let cb = Codebook::new(&mut rng, 8, 4, true);
        let cells: Vec<f64> = (0..25 * 4).map(|_| crate::nn::normal(&mut rng)).collect();
        let q = cb.quantize(&Tensor::from_vec(&[25, 4], cells)).unwrap();
        let h = cb.usage_histogram(&q.indices);
        assert_eq!(h.iter().sum::<usize>(), 25);
    }

    #[test]
    fn renormalize_keeps_rows_unit() {
        let mut rng = stream(8, "vq-renorm", 0);
        let cb = Codebook::new(&mut rng, 6, 5, true);
        cb.entries.set_data(|d| d.iter_mut().for_each(|v| *v *= 3.7));
        cb.renormalize_entries();
        let data = cb.entries.to_vec();
        for row in data.chunks(5) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn lookup_quantize_round_trip_is_exact(seed in 0u64..1000) {
            let mut rng = stream(seed, "vq-prop", 0);
            let cb = Codebook::new(&mut rng, 12, 6, seed % 2 == 0);
            let cells: Vec<f64> = (0..20 * 6).map(|_| crate::nn::normal(&mut rng)).collect();
            let q = cb.quantize(&Tensor::from_vec(&[20, 6], cells)).unwrap();
            let looked = cb.lookup(&q.indices).unwrap();
            prop_assert_eq!(looked.to_vec(), q.vectors.to_vec());
        }
    }
}
