//! Evaluation suite: Frechet distance over pluggable image embeddings,
//! mask/mesh floater-over-union, coverage + minimum matching distance for
//! images and geometry (one-way Chamfer), and depth-map consistency across
//! rotated viewpoints.

use crate::camera::Camera;
use crate::decoder::TriPlaneFeatures;
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::renderer::{render, FieldFn, RenderOptions};
use crate::sample::{Mask, RgbImage};
use crate::tensor::no_grad;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::pyramid::{EmbeddingBackend, PyramidEmbedding};

/// ||mu_g - mu_v||^2 + Tr[S_g + S_v - 2 (S_g S_v)^{1/2}] with unbiased
/// covariances and the symmetric matrix square root; negative eigenvalues
/// from numerics clip to zero.
pub fn frechet_distance(emb_g: &[Vec<f64>], emb_v: &[Vec<f64>]) -> Result<f64> {
    if emb_g.len() < 2 || emb_v.len() < 2 {
        return Err(Error::Metric("frechet_distance needs at least 2 vectors per side".into()));
    }
    let d = emb_g[0].len();
    if emb_v[0].len() != d || emb_g.iter().chain(emb_v).any(|e| e.len() != d) {
        return Err(Error::Metric("embedding dimension mismatch".into()));
    }
    let stats = |set: &[Vec<f64>]| -> (Vec<f64>, DMatrix<f64>) {
        let n = set.len() as f64;
        let mut mu = vec![0.0; d];
        for e in set {
            for i in 0..d {
                mu[i] += e[i];
            }
        }
        mu.iter_mut().for_each(|v| *v /= n);
        let mut cov = DMatrix::zeros(d, d);
        for e in set {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (e[i] - mu[i]) * (e[j] - mu[j]);
                }
            }
        }
        cov /= n - 1.0;
        (mu, cov)
    };
    let (mu_g, cov_g) = stats(emb_g);
    let (mu_v, cov_v) = stats(emb_v);
    let mean_term: f64 = mu_g
        .iter()
        .zip(&mu_v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    // Tr sqrt(S_g S_v) = Tr sqrt( sqrt(S_g) S_v sqrt(S_g) ).
    let sqrt_g = sym_sqrt(&cov_g);
    let inner = &sqrt_g * &cov_v * &sqrt_g;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    Ok(mean_term + cov_g.trace() + cov_v.trace() - 2.0 * tr_sqrt)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Binary object region from an alpha map at threshold 0.5.
pub fn alpha_to_region(alpha: &[f64], h: usize, w: usize) -> Mask {
    Mask {
        h,
        w,
        data: alpha.iter().map(|&a| a > 0.5).collect(),
    }
}

/// Fraction of region pixels outside the largest 8-connected component,
/// in percent. An empty region counts as 100%.
pub fn mask_fou_single(region: &Mask) -> f64 {
    let total = region.count();
    if total == 0 {
        return 100.0;
    }
    let (h, w) = (region.h, region.w);
    let mut seen = vec![false; h * w];
    let mut largest = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !region.data[start] || seen[start] {
            continue;
        }
        let mut size = 0usize;
        seen[start] = true;
        stack.push(start);
        while let Some(px) = stack.pop() {
            size += 1;
            let (y, x) = (px / w, px % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let np = ny as usize * w + nx as usize;
                    if region.data[np] && !seen[np] {
                        seen[np] = true;
                        stack.push(np);
                    }
                }
            }
        }
        largest = largest.max(size);
    }
    100.0 * (1.0 - largest as f64 / total as f64)
}

pub fn mask_fou(regions: &[Mask]) -> f64 {
    if regions.is_empty() {
        return 100.0;
    }
    regions.iter().map(mask_fou_single).sum::<f64>() / regions.len() as f64
}

/// Coverage and minimum matching distance between embedding sets.
/// COV: fraction of validation items matched as some generated item's
/// nearest neighbour. MMD: mean over validation of the squared distance to
/// its closest generated item.
pub fn cov_mmd_embeddings(emb_g: &[Vec<f64>], emb_v: &[Vec<f64>]) -> Result<(f64, f64)> {
    if emb_g.is_empty() || emb_v.is_empty() {
        return Err(Error::Metric("cov_mmd needs non-empty sets".into()));
    }
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut matched = vec![false; emb_v.len()];
    for g in emb_g {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, v) in emb_v.iter().enumerate() {
            let d = dist2(g, v);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        matched[best] = true;
    }
    let cov = matched.iter().filter(|&&m| m).count() as f64 / emb_v.len() as f64;
    let mmd = emb_v
        .iter()
        .map(|v| {
            emb_g
                .iter()
                .map(|g| dist2(g, v))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / emb_v.len() as f64;
    Ok((cov, mmd))
}

/// Mean squared nearest-neighbour distance from each point of `a` to the
/// set `b`.
pub fn one_way_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    a.par_iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / a.len() as f64
}

/// One-way Chamfer from a validation point cloud to a generated mesh,
/// the mesh represented by area-weighted surface samples. An empty mesh
/// yields the +infinity sentinel.
pub fn one_way_chamfer(points: &[[f64; 3]], mesh: &Mesh, surface_samples: usize, seed: u64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Metric("one_way_chamfer: empty point cloud".into()));
    }
    if mesh.is_empty() {
        return Ok(f64::INFINITY);
    }
    let surf = mesh.sample_surface(surface_samples, seed);
    Ok(one_way_points(points, &surf))
}

/// Fraction of surface area on pieces outside the largest face-connected
/// component, in percent. Empty meshes count as 100%.
pub fn mesh_fou_single(mesh: &Mesh) -> f64 {
    if mesh.is_empty() {
        return 100.0;
    }
    let (ids, count) = mesh.face_components();
    if count <= 1 {
        return 0.0;
    }
    let mut areas = vec![0.0; count];
    for (f, &id) in mesh.faces.iter().zip(&ids) {
        areas[id] += mesh.face_area(*f);
    }
    let total: f64 = areas.iter().sum();
    let largest = areas.iter().cloned().fold(0.0, f64::max);
    100.0 * (1.0 - largest / total)
}

pub fn mesh_fou(meshes: &[Mesh]) -> f64 {
    if meshes.is_empty() {
        return 100.0;
    }
    meshes.iter().map(mesh_fou_single).sum::<f64>() / meshes.len() as f64
}

/// Geometry coverage/MMD: cov_mmd with the distance replaced by the one-way
/// Chamfer from validation clouds to generated meshes. Empty meshes are
/// excluded from matching via the infinity sentinel.
pub fn geometry_cov_mmd(
    clouds: &[Vec<[f64; 3]>],
    meshes: &[Mesh],
    surface_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if clouds.is_empty() || meshes.is_empty() {
        return Err(Error::Metric("geometry_cov_mmd needs non-empty sets".into()));
    }
    // Distance matrix D[v][g].
    let mut dist = vec![vec![f64::INFINITY; meshes.len()]; clouds.len()];
    let surfaces: Vec<Option<Vec<[f64; 3]>>> = meshes
        .iter()
        .map(|m| {
            if m.is_empty() {
                None
            } else {
                Some(m.sample_surface(surface_samples, seed))
            }
        })
        .collect();
    for (vi, cloud) in clouds.iter().enumerate() {
        if cloud.is_empty() {
            return Err(Error::Metric("geometry_cov_mmd: empty validation cloud".into()));
        }
        for (gi, surf) in surfaces.iter().enumerate() {
            if let Some(s) = surf {
                dist[vi][gi] = one_way_points(cloud, s);
            }
        }
    }
    let mut matched = vec![false; clouds.len()];
    for gi in 0..meshes.len() {
        if surfaces[gi].is_none() {
            continue; // excluded from matching
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (vi, row) in dist.iter().enumerate() {
            if row[gi] < best_d {
                best_d = row[gi];
                best = vi;
            }
        }
        matched[best] = true;
    }
    let cov = matched.iter().filter(|&&m| m).count() as f64 / clouds.len() as f64;
    let mmd = dist
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / clouds.len() as f64;
    Ok((cov, mmd))
}

/// Back-projects alpha>0.5 depth pixels into the object frame, with the
/// object's longest box edge normalized to length 10.
pub fn backproject_depth(
    camera: &Camera,
    depth: &[f64],
    alpha: &[f64],
    scale: [f64; 3],
) -> Vec<[f64; 3]> {
    let res = camera.width;
    let norm = 10.0 / scale[0].max(scale[1]).max(scale[2]);
    let mut out = Vec::new();
    for py in 0..res {
        for px in 0..res {
            let i = py * res + px;
            if alpha[i] > 0.5 {
                let p = camera.backproject(px, py, depth[i]);
                out.push([p[0] * norm, p[1] * norm, p[2] * norm]);
            }
        }
    }
    out
}

/// Depth consistency of one decoded asset: symmetric Chamfer distance
/// between back-projected depth maps rendered from a camera and the same
/// camera yawed 45 degrees. `None` when either view has no alpha>0.5
/// pixels (asset skipped).
pub fn depth_consistency<F: FieldFn>(
    field: &F,
    planes: &TriPlaneFeatures,
    scale: [f64; 3],
    camera: &Camera,
    opts: &RenderOptions,
    yaw: f64,
) -> Result<Option<f64>> {
    let cam_b = camera.rotated_about_z(yaw);
    let (pa, pb) = no_grad(|| -> Result<_> {
        let out_a = render(field, planes, camera, scale, opts)?;
        let out_b = render(field, planes, &cam_b, scale, opts)?;
        let pa = backproject_depth(camera, &out_a.depth.to_vec(), &out_a.alpha.to_vec(), scale);
        let pb = backproject_depth(&cam_b, &out_b.depth.to_vec(), &out_b.alpha.to_vec(), scale);
        Ok((pa, pb))
    })?;
    if pa.is_empty() || pb.is_empty() {
        return Ok(None);
    }
    Ok(Some(0.5 * (one_way_points(&pa, &pb) + one_way_points(&pb, &pa))))
}

/// Report schema for the evaluation suite (all eight quality/diversity
/// columns; null when an input artifact is missing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub fid: Option<f64>,
    pub mask_fou: Option<f64>,
    pub cov_image: Option<f64>,
    pub mmd_image: Option<f64>,
    pub consistency: Option<f64>,
    pub mesh_fou: Option<f64>,
    pub cov_geometry: Option<f64>,
    pub mmd_geometry: Option<f64>,
    pub generated_count: usize,
    pub validation_count: usize,
    #[serde(default)]
    pub skipped: Vec<String>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const REPORT_FIELDS: [&str; 8] = [
    "fid",
    "mask_fou",
    "cov_image",
    "mmd_image",
    "consistency",
    "mesh_fou",
    "cov_geometry",
    "mmd_geometry",
];

/// Checks that a serialized report carries every metric column.
pub fn validate_report_json(json: &serde_json::Value) -> Result<()> {
    let obj = json
        .as_object()
        .ok_or_else(|| Error::Metric("report must be a JSON object".into()))?;
    for field in REPORT_FIELDS {
        if !obj.contains_key(field) {
            return Err(Error::Metric(format!("report missing field '{field}'")));
        }
    }
    Ok(())
}

/// In-memory evaluation inputs; directory discovery lives in the CLI.
pub struct EvalInputs {
    /// Whitened images with alpha-derived regions.
    pub generated_images: Vec<(RgbImage, Mask)>,
    pub generated_meshes: Vec<Mesh>,
    pub validation_images: Vec<(RgbImage, Mask)>,
    pub validation_clouds: Vec<Vec<[f64; 3]>>,
    /// Mean per-asset consistency, computed by the caller (needs the
    /// decoder); None marks the column as skipped.
    pub consistency: Option<f64>,
}

/// Assembles the full report; missing artifact groups null their columns
/// and are listed in `skipped`.
pub fn evaluate(inputs: &EvalInputs, backend: &dyn EmbeddingBackend) -> Result<MetricsReport> {
    let mut skipped = Vec::new();
    if inputs.generated_images.is_empty() {
        return Err(Error::Metric("no generated images to evaluate".into()));
    }
    if inputs.validation_images.is_empty() {
        return Err(Error::Metric("no validation images to evaluate".into()));
    }
    let embed_all = |set: &[(RgbImage, Mask)]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|(img, _)| backend.embed(img)).collect()
    };
    let emb_g = embed_all(&inputs.generated_images)?;
    let emb_v = embed_all(&inputs.validation_images)?;
    let fid = Some(frechet_distance(&emb_g, &emb_v)?);
    let regions: Vec<Mask> = inputs
        .generated_images
        .iter()
        .map(|(_, m)| m.clone())
        .collect();
    let fou = Some(mask_fou(&regions));
    let (cov_i, mmd_i) = cov_mmd_embeddings(&emb_g, &emb_v)?;

    let (mesh_fou_v, cov_g, mmd_g) = if inputs.generated_meshes.is_empty() {
        skipped.push("generated meshes".into());
        (None, None, None)
    } else if inputs.validation_clouds.is_empty() {
        skipped.push("validation point clouds".into());
        (Some(mesh_fou(&inputs.generated_meshes)), None, None)
    } else {
        let (cov, mmd) = geometry_cov_mmd(
            &inputs.validation_clouds,
            &inputs.generated_meshes,
            10_000,
            0,
        )?;
        (Some(mesh_fou(&inputs.generated_meshes)), Some(cov), Some(mmd))
    };
    if inputs.consistency.is_none() {
        skipped.push("consistency (no decodable assets)".into());
    }

    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        fid,
        mask_fou: fou,
        cov_image: Some(cov_i),
        mmd_image: Some(mmd_i),
        consistency: inputs.consistency,
        mesh_fou: mesh_fou_v,
        cov_geometry: cov_g,
        mmd_geometry: mmd_g,
        generated_count: inputs.generated_images.len(),
        validation_count: inputs.validation_images.len(),
        skipped,
    })
}

/// Human-readable table of the eight metric columns.
pub fn report_table(report: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "-"),
    };
    let mut s = String::new();
    s.push_str("metric        value\n");
    for (name, v) in [
        ("FID", report.fid),
        ("Mask FOU %", report.mask_fou),
        ("COV (img)", report.cov_image),
        ("MMD (img)", report.mmd_image),
        ("Consistency", report.consistency),
        ("Mesh FOU %", report.mesh_fou),
        ("COV (geom)", report.cov_geometry),
        ("MMD (geom)", report.mmd_geometry),
    ] {
        s.push_str(&format!("{name:<12} {}\n", fmt(v)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream;
    use rand::Rng as _;

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = stream(11, "fid-self", 0);
        let set: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| crate::nn::normal(&mut rng)).collect())
            .collect();
        let d = frechet_distance(&set, &set).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");
    }

    #[test]
    fn frechet_gaussian_closed_form_case() {
        // Exact sufficient statistics: mu 0 vs 1, variance 1 vs 1 (either
        // covariance convention agrees here) -> distance 1.
        let a = vec![vec![-1.0], vec![1.0]];
        let b = vec![vec![0.0], vec![2.0]];
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "distance {d}");
        // Symmetry.
        let d2 = frechet_distance(&b, &a).unwrap();
        assert!((d - d2).abs() < 1e-12);
    }

    #[test]
    fn frechet_rotation_invariance() {
        let mut rng = stream(3, "fid-rot", 0);
        let a: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| crate::nn::normal(&mut rng)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| crate::nn::normal(&mut rng) + 0.5).collect()).collect();
        let d0 = frechet_distance(&a, &b).unwrap();
        // Rotate both sets identically about z by 0.7 rad.
        let rot = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let (s, c) = (0.7f64).sin_cos();
            set.iter()
                .map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])
                .collect()
        };
        let d1 = frechet_distance(&rot(&a), &rot(&b)).unwrap();
        assert!((d0 - d1).abs() < 1e-6, "{d0} vs {d1}");
    }

    #[test]
    fn frechet_dimension_mismatch_errors() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let b = vec![vec![0.0], vec![1.0]];
        assert!(frechet_distance(&a, &b).is_err());
    }

    fn blob_mask(regions: &[(usize, usize, usize, usize)], n: usize) -> Mask {
        let mut m = Mask::new(n, n);
        for &(y0, x0, h, w) in regions {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn mask_fou_cases() {
        let n = 32;
        // Single blob -> 0%.
        let single = blob_mask(&[(4, 4, 10, 10)], n);
        assert_eq!(mask_fou_single(&single), 0.0);
        // 80 px + separate 20 px -> 20%.
        let two = blob_mask(&[(2, 2, 8, 10), (20, 20, 4, 5)], n);
        assert_eq!(two.count(), 100);
        assert!((mask_fou_single(&two) - 20.0).abs() < 1e-12);
        // Empty -> 100%.
        assert_eq!(mask_fou_single(&Mask::new(n, n)), 100.0);
    }

    #[test]
    fn cov_mmd_hand_cases() {
        let v = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        // Generated equals validation: COV 1, MMD 0.
        let (cov, mmd) = cov_mmd_embeddings(&v, &v).unwrap();
        assert_eq!(cov, 1.0);
        assert_eq!(mmd, 0.0);
        // One generated vector equal to v1: COV 0.5, MMD = ||v2-v1||^2 / 2.
        let g = vec![vec![0.0, 0.0]];
        let (cov, mmd) = cov_mmd_embeddings(&g, &v).unwrap();
        assert_eq!(cov, 0.5);
        assert!((mmd - 2.0).abs() < 1e-12);
        // Permuting the generated set changes nothing.
        let g2 = vec![vec![9.0, 9.0], vec![0.0, 0.0]];
        let g2p = vec![vec![0.0, 0.0], vec![9.0, 9.0]];
        assert_eq!(
            cov_mmd_embeddings(&g2, &v).unwrap(),
            cov_mmd_embeddings(&g2p, &v).unwrap()
        );
    }

    #[test]
    fn duplicates_never_hurt_cov_or_mmd() {
        let mut rng = stream(8, "covdup", 0);
        for _ in 0..20 {
            let v: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let g: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let (cov0, mmd0) = cov_mmd_embeddings(&g, &v).unwrap();
            let mut g_dup = g.clone();
            g_dup.push(g[0].clone());
            let (cov1, mmd1) = cov_mmd_embeddings(&g_dup, &v).unwrap();
            assert!(cov1 >= cov0);
            assert!(mmd1 <= mmd0 + 1e-15);
        }
    }

    fn quad_mesh(origin: [f64; 3], size: f64) -> Mesh {
        let o = origin;
        Mesh {
            vertices: vec![
                o,
                [o[0] + size, o[1], o[2]],
                [o[0] + size, o[1] + size, o[2]],
                [o[0], o[1] + size, o[2]],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        }
    }

    fn cube_mesh(origin: [f64; 3], size: f64) -> Mesh {
        let mut vertices = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    vertices.push([
                        origin[0] + size * x as f64,
                        origin[1] + size * y as f64,
                        origin[2] + size * z as f64,
                    ]);
                }
            }
        }
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // z = 0
            [4, 5, 6], [5, 7, 6], // z = 1
            [0, 1, 4], [1, 5, 4], // y = 0
            [2, 6, 3], [3, 6, 7], // y = 1
            [0, 4, 2], [2, 4, 6], // x = 0
            [1, 3, 5], [3, 7, 5], // x = 1
        ];
        Mesh { vertices, faces, colors: None }
    }

    fn merge(a: &Mesh, b: &Mesh) -> Mesh {
        let mut m = a.clone();
        let off = m.vertices.len();
        m.vertices.extend_from_slice(&b.vertices);
        for f in &b.faces {
            m.faces.push([f[0] + off, f[1] + off, f[2] + off]);
        }
        m
    }

    #[test]
    fn mesh_fou_cases() {
        let cube = cube_mesh([0.0; 3], 1.0);
        assert_eq!(mesh_fou_single(&cube), 0.0);
        // Two identical disjoint cubes in one mesh: 50%.
        let two = merge(&cube, &cube_mesh([5.0, 0.0, 0.0], 1.0));
        assert!((mesh_fou_single(&two) - 50.0).abs() < 1e-9);
        // Cube area 6 + floater area 0.6 -> 0.6/6.6.
        let mut floater = quad_mesh([10.0, 0.0, 0.0], 1.0);
        // Shrink to area 0.6: scale the unit quad (area 1) by sqrt(0.6).
        let s = 0.6f64.sqrt();
        for v in &mut floater.vertices {
            v[0] = 10.0 + (v[0] - 10.0) * s;
            v[1] *= s;
        }
        let with_floater = merge(&cube, &floater);
        let expect = 100.0 * 0.6 / 6.6;
        assert!((mesh_fou_single(&with_floater) - expect).abs() < 1e-9);
        assert_eq!(mesh_fou_single(&Mesh::default()), 100.0);
    }

    #[test]
    fn one_way_chamfer_cases() {
        let cube = cube_mesh([0.0; 3], 1.0);
        // Points sampled on the mesh itself: near-zero distance.
        let pts = cube.sample_surface(256, 7);
        let d = one_way_chamfer(&pts, &cube, 10_000, 1).unwrap();
        assert!(d < 1e-3, "self distance {d}");

        // Single point at height d above a large quad: distance d^2.
        let quad = quad_mesh([-5.0, -5.0, 0.0], 10.0);
        let dist = 0.7;
        let p = vec![[0.0, 0.0, dist]];
        let c = one_way_chamfer(&p, &quad, 20_000, 2).unwrap();
        let rel = (c - dist * dist).abs() / (dist * dist);
        assert!(rel < 0.05, "chamfer {c} vs {} (rel {rel})", dist * dist);

        // Empty cloud is a precondition violation.
        assert!(one_way_chamfer(&[], &quad, 100, 0).is_err());
        // Empty mesh gives the sentinel.
        assert_eq!(
            one_way_chamfer(&p, &Mesh::default(), 100, 0).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn one_way_chamfer_is_asymmetric() {
        // Cloud A tight on the quad, cloud B far away: one_way(A->quadB)
        // differs from one_way(B->quadA) by construction.
        let a = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let b = vec![[0.0, 0.0, 3.0], [0.1, 0.0, 3.0], [5.0, 5.0, 9.0]];
        let ab = one_way_points(&a, &b);
        let ba = one_way_points(&b, &a);
        assert!((ab - ba).abs() > 1.0, "{ab} vs {ba}");
    }

    #[test]
    fn geometry_cov_mmd_cases() {
        let shapes = [
            cube_mesh([0.0; 3], 1.0),
            cube_mesh([4.0, 0.0, 0.0], 2.0),
            cube_mesh([0.0, 6.0, 0.0], 0.5),
        ];
        let clouds: Vec<Vec<[f64; 3]>> = shapes.iter().map(|m| m.sample_surface(300, 5)).collect();
        // Generated = exact meshes of the validation shapes.
        let (cov, mmd) = geometry_cov_mmd(&clouds, &shapes, 8000, 3).unwrap();
        assert_eq!(cov, 1.0);
        assert!(mmd < 1e-3, "mmd {mmd}");

        // One mesh vs two identical clouds: COV 0.5.
        let c2 = vec![clouds[0].clone(), clouds[0].clone()];
        let (cov, _) = geometry_cov_mmd(&c2, &shapes[0..1], 4000, 3).unwrap();
        assert_eq!(cov, 0.5);

        // Scaling clouds and meshes by 2 scales MMD by 4.
        let scale2 = |m: &Mesh| -> Mesh {
            let mut out = m.clone();
            for v in &mut out.vertices {
                for k in 0..3 {
                    v[k] *= 2.0;
                }
            }
            out
        };
        let clouds2: Vec<Vec<[f64; 3]>> = clouds
            .iter()
            .map(|c| c.iter().map(|p| [p[0] * 2.0, p[1] * 2.0, p[2] * 2.0]).collect())
            .collect();
        // Use shifted generated meshes so distances are nonzero.
        let gen: Vec<Mesh> = shapes
            .iter()
            .map(|m| {
                let mut out = m.clone();
                for v in &mut out.vertices {
                    v[2] += 0.8;
                }
                out
            })
            .collect();
        let gen2: Vec<Mesh> = gen.iter().map(scale2).collect();
        let (_, mmd1) = geometry_cov_mmd(&clouds, &gen, 8000, 4).unwrap();
        let (_, mmd2) = geometry_cov_mmd(&clouds2, &gen2, 8000, 4).unwrap();
        let ratio = mmd2 / mmd1;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn report_json_round_trip_and_schema() {
        let report = MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            fid: Some(0.5),
            mask_fou: Some(1.0),
            cov_image: Some(1.0),
            mmd_image: Some(0.0),
            consistency: None,
            mesh_fou: Some(0.0),
            cov_geometry: Some(1.0),
            mmd_geometry: Some(0.001),
            generated_count: 4,
            validation_count: 4,
            skipped: vec!["consistency (no decodable assets)".into()],
        };
        let json = serde_json::to_value(&report).unwrap();
        validate_report_json(&json).unwrap();
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }
}
