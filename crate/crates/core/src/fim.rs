//! Feature indexing: registers mesh vertices onto image grids and collects
//! per-vertex feature rows.

use serde::{Deserialize, Serialize};

use crate::body_model::PosedMesh;
use crate::error::{Error, Result};
use crate::projection::GridGeometry;

pub type ImageGeometry = GridGeometry;

/// Which feature sources feed the per-vertex head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FimToggles {
    pub use_xyz: bool,
    pub use_image: bool,
    pub use_latent: bool,
    pub use_global: bool,
}

impl Default for FimToggles {
    fn default() -> Self {
        FimToggles {
            use_xyz: true,
            use_image: true,
            use_latent: true,
            use_global: true,
        }
    }
}

impl FimToggles {
    pub fn any(&self) -> bool {
        self.use_xyz || self.use_image || self.use_latent || self.use_global
    }

    /// All fifteen non-empty combinations, enumerated as bitmasks
    /// `xyz | image << 1 | latent << 2 | global << 3`.
    pub fn all_subsets() -> Vec<FimToggles> {
        (1u8..16).map(FimToggles::from_bits).collect()
    }

    pub fn from_bits(bits: u8) -> Self {
        FimToggles {
            use_xyz: bits & 1 != 0,
            use_image: bits & 2 != 0,
            use_latent: bits & 4 != 0,
            use_global: bits & 8 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        u8::from(self.use_xyz)
            | u8::from(self.use_image) << 1
            | u8::from(self.use_latent) << 2
            | u8::from(self.use_global) << 3
    }

    /// Parses a comma-separated list such as `xyz,image`; `all` enables
    /// every source.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = FimToggles {
            use_xyz: false,
            use_image: false,
            use_latent: false,
            use_global: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "xyz" => t.use_xyz = true,
                "image" => t.use_image = true,
                "latent" => t.use_latent = true,
                "global" => t.use_global = true,
                "all" => t = FimToggles::default(),
                other => return Err(Error::ConfigInvalid(format!("unknown feature source `{other}`"))),
            }
        }
        if !t.any() {
            return Err(Error::NoFeaturesEnabled);
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.use_xyz, "xyz"),
            (self.use_image, "image"),
            (self.use_latent, "latent"),
            (self.use_global, "global"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        names.join("+")
    }
}

/// Nearest pixel `(row, col)` of every vertex, clamped onto the grid.
pub fn register(mesh: &PosedMesh, geom: &ImageGeometry) -> Vec<[usize; 2]> {
    mesh.vertices
        .iter()
        .map(|v| {
            let (r, c) = geom.cell_clamped(v[0], v[1]);
            [r, c]
        })
        .collect()
}

/// Row-major flat pixel index of each registered vertex.
pub fn flat_pixels(pix: &[[usize; 2]], geom: &ImageGeometry) -> Vec<usize> {
    pix.iter().map(|p| p[0] * geom.cols + p[1]).collect()
}

/// `out[v][c] = feature_map[c][pix[v]]` for a `[channels, rows, cols]` map.
pub fn gather(
    feature_map: &[f64],
    channels: usize,
    rows: usize,
    cols: usize,
    pix: &[[usize; 2]],
) -> Result<Vec<Vec<f64>>> {
    crate::error::check_len("feature map", channels * rows * cols, feature_map.len())?;
    pix.iter()
        .map(|&[r, c]| {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: r,
                    limit: rows,
                });
            }
            if c >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "gather col",
                    index: c,
                    limit: cols,
                });
            }
            Ok((0..channels).map(|ch| feature_map[(ch * rows + r) * cols + c]).collect())
        })
        .collect()
}

/// Adjoint of [`gather`]: scatter-adds per-vertex rows back into a map.
pub fn gather_vjp(upstream: &[Vec<f64>], channels: usize, rows: usize, cols: usize, pix: &[[usize; 2]]) -> Vec<f64> {
    let mut out = vec![0.0; channels * rows * cols];
    for (row, &[r, c]) in upstream.iter().zip(pix) {
        for (ch, g) in row.iter().enumerate() {
            out[(ch * rows + r) * cols + c] += g;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureGroup {
    Xyz,
    Image,
    Latent,
}

/// Per-vertex feature rows and the column layout of the groups they hold.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexFeatureMatrix {
    pub features: Vec<Vec<f64>>,
    pub layout: Vec<(FeatureGroup, usize)>,
}

impl VertexFeatureMatrix {
    pub fn width(&self) -> usize {
        self.layout.iter().map(|(_, w)| w).sum()
    }
}

/// Concatenates the enabled per-vertex groups in the order xyz, image,
/// latent. The global source is not per-vertex and is fused by the network.
pub fn fuse(
    mesh: &PosedMesh,
    gathered_image: Option<&[Vec<f64>]>,
    gathered_latent: Option<&[Vec<f64>]>,
    toggles: FimToggles,
) -> Result<VertexFeatureMatrix> {
    if !toggles.any() {
        return Err(Error::NoFeaturesEnabled);
    }
    let nv = mesh.num_vertices();
    let mut layout = Vec::new();
    let mut features = vec![Vec::new(); nv];
    if toggles.use_xyz {
        layout.push((FeatureGroup::Xyz, 3));
        for (row, v) in features.iter_mut().zip(&mesh.vertices) {
            row.extend_from_slice(v);
        }
    }
    for (on, group, what, src) in [
        (toggles.use_image, FeatureGroup::Image, "image features", gathered_image),
        (toggles.use_latent, FeatureGroup::Latent, "latent features", gathered_latent),
    ] {
        if !on {
            continue;
        }
        let src = src.ok_or_else(|| Error::ConfigInvalid(format!("{what} enabled but not supplied")))?;
        crate::error::check_len(what, nv, src.len())?;
        let w = src.first().map_or(0, Vec::len);
        for (row, s) in features.iter_mut().zip(src) {
            crate::error::check_len(what, w, s.len())?;
            row.extend_from_slice(s);
        }
        layout.push((group, w));
    }
    Ok(VertexFeatureMatrix { features, layout })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn geom() -> ImageGeometry {
        GridGeometry::new(6, 4, 0.05, [0.0, 0.0]).unwrap()
    }

    fn mesh(v: Vec<[f64; 3]>) -> PosedMesh {
        PosedMesh::new(v, vec![], Arc::new(vec![]))
    }

    fn random_mesh(seed: u64, n: usize) -> PosedMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mesh((0..n)
            .map(|_| {
                [
                    rng.random_range(-0.1..0.3),
                    rng.random_range(-0.1..0.4),
                    rng.random_range(0.0..0.2),
                ]
            })
            .collect())
    }

    #[test]
    fn register_examples() {
        let g = geom();
        let m = mesh(vec![[0.0, 0.0, 0.0], [-1.0, 0.12, 0.0], [0.19, 0.29, 0.0]]);
        assert_eq!(register(&m, &g), vec![[0, 0], [2, 0], [5, 3]]);
    }

    #[test]
    fn register_matches_bin_and_clamp() {
        let g = geom();
        let m = random_mesh(1, 500);
        for (v, p) in m.vertices.iter().zip(register(&m, &g)) {
            let mut c = ((v[0] - g.origin_xy_m[0]) / g.pitch_m).floor() as i64;
            let mut r = ((v[1] - g.origin_xy_m[1]) / g.pitch_m).floor() as i64;
            c = c.clamp(0, g.cols as i64 - 1);
            r = r.clamp(0, g.rows as i64 - 1);
            assert_eq!(p, [r as usize, c as usize]);
        }
    }

    #[test]
    fn gather_examples() {
        let g = geom();
        let m = random_mesh(2, 30);
        let pix = register(&m, &g);
        let fm = vec![2.5; 3 * g.num_cells()];
        for row in gather(&fm, 3, g.rows, g.cols, &pix).unwrap() {
            assert_eq!(row, vec![2.5; 3]);
        }
        let mut hot = vec![0.0; g.num_cells()];
        hot[2 * g.cols + 1] = 1.0;
        let pix = vec![[2, 1], [0, 0], [5, 3]];
        let out = gather(&hot, 1, g.rows, g.cols, &pix).unwrap();
        assert_eq!(out, vec![vec![1.0], vec![0.0], vec![0.0]]);
        assert!(matches!(
            gather(&hot, 1, g.rows, g.cols, &[[6, 0]]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_adjoint_and_finite_differences() {
        let g = geom();
        let m = random_mesh(3, 80);
        let pix = register(&m, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = 2;
        let fm: Vec<f64> = (0..ch * g.num_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<Vec<f64>> = (0..80).map(|_| (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let inner = |fm: &[f64]| -> f64 {
            gather(fm, ch, g.rows, g.cols, &pix)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        };
        let adj = gather_vjp(&up, ch, g.rows, g.cols, &pix);
        let rhs: f64 = adj.iter().zip(&fm).map(|(a, b)| a * b).sum();
        assert!((inner(&fm) - rhs).abs() < 1e-9);
        let h = 1e-6;
        for k in 0..fm.len() {
            let mut p = fm.clone();
            let mut q = fm.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (inner(&p) - inner(&q)) / (2.0 * h);
            assert!((fd - adj[k]).abs() <= 1e-6 * fd.abs().max(adj[k].abs()).max(1e-3));
        }
    }

    #[test]
    fn gather_is_vertex_permutation_equivariant() {
        let g = geom();
        let m = random_mesh(5, 40);
        let mut perm: Vec<usize> = (0..40).collect();
        perm.reverse();
        perm.swap(3, 17);
        let pm = mesh(perm.iter().map(|&i| m.vertices[i]).collect());
        let fm: Vec<f64> = (0..g.num_cells()).map(|k| k as f64 * 0.3).collect();
        let a = gather(&fm, 1, g.rows, g.cols, &register(&m, &g)).unwrap();
        let b = gather(&fm, 1, g.rows, g.cols, &register(&pm, &g)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b[k], a[i]);
        }
    }

    #[test]
    fn fuse_layouts() {
        let m = random_mesh(6, 10);
        let xyz_only = FimToggles::from_bits(1);
        let f = fuse(&m, None, None, xyz_only).unwrap();
        assert_eq!(f.width(), 3);
        for (row, v) in f.features.iter().zip(&m.vertices) {
            assert_eq!(row.as_slice(), v.as_slice());
        }
        let img: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
        let f = fuse(&m, Some(&img), None, FimToggles::from_bits(0b011)).unwrap();
        assert_eq!(f.width(), 5);
        assert_eq!(f.features[4], vec![m.vertices[4][0], m.vertices[4][1], m.vertices[4][2], 4.0, -4.0]);
        let lat: Vec<Vec<f64>> = (0..10).map(|i| (0..8).map(|c| (i * 8 + c) as f64).collect()).collect();
        let f = fuse(&m, Some(&img), Some(&lat), FimToggles::from_bits(0b111)).unwrap();
        assert_eq!(f.width(), 13);
        for v in 0..10 {
            let mut expect = m.vertices[v].to_vec();
            expect.extend(&img[v]);
            expect.extend(&lat[v]);
            assert_eq!(f.features[v], expect);
        }
        assert!(matches!(fuse(&m, None, None, FimToggles::from_bits(0)), Err(Error::NoFeaturesEnabled)));
    }

    #[test]
    fn toggles_enumerate_and_parse() {
        let all = FimToggles::all_subsets();
        assert_eq!(all.len(), 15);
        assert!(all.iter().all(FimToggles::any));
        for t in &all {
            assert_eq!(FimToggles::from_bits(t.bits()), *t);
            assert_eq!(FimToggles::parse(&t.label().replace('+', ",")).unwrap(), *t);
        }
        assert!(FimToggles::parse("").is_err());
        assert!(FimToggles::parse("xyz,bogus").is_err());
    }
}
