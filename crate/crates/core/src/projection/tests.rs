use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn grid(rows: usize, cols: usize) -> GridGeometry {
    GridGeometry::new(rows, cols, 0.1, [-0.3, 0.2]).unwrap()
}

fn mesh_of(vertices: Vec<[f64; 3]>) -> PosedMesh {
    PosedMesh::new(vertices, vec![], Arc::new(vec![]))
}

/// Flat mesh at z = 0 with a `k x k` vertex lattice inside every cell.
fn flat_mesh(g: &GridGeometry, k: usize) -> PosedMesh {
    let mut v = Vec::new();
    for r in 0..g.rows {
        for c in 0..g.cols {
            for i in 0..k {
                for j in 0..k {
                    v.push([
                        g.origin_xy_m[0] + (c as f64 + (j as f64 + 0.5) / k as f64) * g.pitch_m,
                        g.origin_xy_m[1] + (r as f64 + (i as f64 + 0.5) / k as f64) * g.pitch_m,
                        0.0,
                    ]);
                }
            }
        }
    }
    mesh_of(v)
}

#[test]
fn origin_is_lower_inclusive() {
    let g = grid(4, 3);
    assert_eq!(taxel_of_point(g.origin_xy_m, &g), Some((0, 0)));
    let p = [g.origin_xy_m[0] + 0.1, g.origin_xy_m[1] + 0.1];
    // 0.1 is not exact in binary, so step a hair past the edge both ways.
    let q = [g.origin_xy_m[0] + 0.125, g.origin_xy_m[1] + 0.125];
    assert_eq!(taxel_of_point(q, &g), Some((1, 1)));
    assert!(matches!(taxel_of_point(p, &g), Some((0, 0)) | Some((1, 1))));
}

#[test]
fn upper_edge_is_exclusive_with_exact_pitch() {
    let g = GridGeometry::new(4, 3, 0.25, [0.0, 0.0]).unwrap();
    assert_eq!(taxel_of_point([0.25, 0.25], &g), Some((1, 1)));
    assert_eq!(taxel_of_point([0.75, 0.5], &g), None);
    assert_eq!(taxel_of_point([0.5, 1.0], &g), None);
    assert_eq!(taxel_of_point([-1e-12, 0.0], &g), None);
}

#[test]
fn binning_matches_interval_scan() {
    let g = GridGeometry::new(7, 5, 0.0286, [-0.07, 0.01]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let p = [rng.random_range(-0.2..0.3), rng.random_range(-0.1..0.35)];
        let mut hit = None;
        for r in 0..g.rows {
            for c in 0..g.cols {
                let x0 = g.origin_xy_m[0] + c as f64 * g.pitch_m;
                let y0 = g.origin_xy_m[1] + r as f64 * g.pitch_m;
                if p[0] >= x0 && p[0] < x0 + g.pitch_m && p[1] >= y0 && p[1] < y0 + g.pitch_m {
                    assert!(hit.is_none());
                    hit = Some((r, c));
                }
            }
        }
        assert_eq!(taxel_of_point(p, &g), hit, "point {p:?}");
    }
}

#[test]
fn uniform_image_on_flat_mesh() {
    let g = grid(3, 4);
    let img = PressureImage::new(g, vec![2.5; 12]).unwrap();
    let m = flat_mesh(&g, 2);
    let vpm = project_gt(&img, &m, DEFAULT_Z_EPS).unwrap();
    assert!(vpm.iter().all(|&p| p == 2.5));
}

#[test]
fn lifted_vertex_gets_nothing() {
    let g = grid(1, 1);
    let img = PressureImage::new(g, vec![7.0]).unwrap();
    let c = g.cell_center(0, 0);
    let m = mesh_of(vec![[c[0], c[1], 0.5], [c[0], c[1], 0.0]]);
    assert_eq!(project_gt(&img, &m, DEFAULT_Z_EPS).unwrap(), vec![0.0, 7.0]);
}

#[test]
fn project_gt_matches_pairwise_loop() {
    let g = GridGeometry::new(2, 2, 0.5, [0.0, 0.0]).unwrap();
    let img = PressureImage::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let verts = vec![
        [0.1, 0.1, 0.0],
        [0.7, 0.2, 0.005],
        [0.3, 0.9, -0.01],
        [0.9, 0.9, 0.02],
        [1.2, 0.4, 0.0],
        [0.5, 0.5, 0.01],
    ];
    let m = mesh_of(verts.clone());
    let got = project_gt(&img, &m, 0.01).unwrap();
    let mut expect = vec![0.0; verts.len()];
    for (i, v) in verts.iter().enumerate() {
        for r in 0..2 {
            for c in 0..2 {
                let inside = v[0] >= c as f64 * 0.5
                    && v[0] < (c + 1) as f64 * 0.5
                    && v[1] >= r as f64 * 0.5
                    && v[1] < (r + 1) as f64 * 0.5;
                if inside && v[2] <= 0.01 {
                    expect[i] = img.values[r * 2 + c];
                }
            }
        }
    }
    assert_eq!(got, expect);
    assert_eq!(got, vec![1.0, 2.0, 3.0, 0.0, 0.0, 4.0]);
}

#[test]
fn negative_z_eps_is_rejected() {
    let g = grid(1, 1);
    assert!(project_gt(&PressureImage::zeros(g), &mesh_of(vec![]), -0.1).is_err());
}

#[test]
fn contact_examples() {
    assert_eq!(contact_from_pressure(&[0.0; 4]).unwrap(), vec![0; 4]);
    let c = contact_from_pressure(&[0.0, 3.2, 0.0]).unwrap();
    assert_eq!(c.iter().map(|&x| x as usize).sum::<usize>(), 1);
    assert!(matches!(
        contact_from_pressure(&[1.0, -0.5]),
        Err(Error::NegativePressure { vertex: 1, .. })
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p: Vec<f64> = (0..200)
        .map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..5.0) })
        .collect();
    let c = contact_from_pressure(&p).unwrap();
    for (a, b) in p.iter().zip(&c) {
        assert_eq!(*b == 1, *a > 0.0);
    }
}

#[test]
fn round_trip_on_flat_mesh() {
    let g = grid(5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..30)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.1..20.0) })
        .collect();
    let img = PressureImage::new(g, values.clone()).unwrap();
    let m = flat_mesh(&g, 3);
    let vpm = project_gt(&img, &m, DEFAULT_Z_EPS).unwrap();
    let back = reproject_2d(&vpm, &m, &g).unwrap();
    for (a, b) in back.values.iter().zip(&values) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn constant_and_empty_taxels() {
    let g = grid(2, 2);
    let c = g.cell_center(0, 0);
    let d = g.cell_center(1, 1);
    let m = mesh_of(vec![[c[0], c[1], 0.0], [c[0], c[1], 0.3], [d[0], d[1], 0.0]]);
    let img = reproject_2d(&[4.0; 3], &m, &g).unwrap();
    assert_eq!(img.values, vec![4.0, 0.0, 0.0, 4.0]);
    let img = reproject_2d(&[1.0, 3.0, -2.0], &m, &g).unwrap();
    assert_eq!(img.values, vec![2.0, 0.0, 0.0, -2.0]);
}

#[test]
fn vjp_of_ones_is_inverse_count() {
    let g = grid(1, 2);
    let c = g.cell_center(0, 0);
    let m = mesh_of(vec![[c[0], c[1], 0.0]; 4].into_iter().chain([[9.0, 9.0, 0.0]]).collect());
    let grad = reproject_2d_vjp(&[1.0, 1.0], &m, &g).unwrap();
    assert_eq!(grad, vec![0.25, 0.25, 0.25, 0.25, 0.0]);
    assert_eq!(reproject_2d_vjp(&[0.0, 0.0], &m, &g).unwrap(), vec![0.0; 5]);
}

fn random_scene(seed: u64, nv: usize) -> (GridGeometry, PosedMesh) {
    let g = GridGeometry::new(4, 3, 0.05, [0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..nv)
        .map(|_| {
            [
                rng.random_range(-0.02..0.17),
                rng.random_range(-0.02..0.22),
                rng.random_range(0.0..0.1),
            ]
        })
        .collect();
    (g, mesh_of(v))
}

#[test]
fn vjp_matches_finite_differences() {
    let (g, m) = random_scene(9, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let u: Vec<f64> = (0..g.num_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
    let f = |v: &[f64]| -> f64 {
        let img = reproject_2d(v, &m, &g).unwrap();
        img.values.iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let grad = reproject_2d_vjp(&u, &m, &g).unwrap();
    let h = 1e-5;
    for i in 0..v.len() {
        let mut vp = v.clone();
        let mut vm = v.clone();
        vp[i] += h;
        vm[i] -= h;
        let fd = (f(&vp) - f(&vm)) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-8);
        assert!((fd - grad[i]).abs() / denom < 1e-6 || (fd - grad[i]).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn reprojection_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (g, m) = random_scene(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let u: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mix: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let lhs = reproject_2d(&mix, &m, &g).unwrap().values;
        let ru = reproject_2d(&u, &m, &g).unwrap().values;
        let rw = reproject_2d(&w, &m, &g).unwrap().values;
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (a * ru[k] + b * rw[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn reprojection_adjoint_identity(seed in 0u64..1000) {
        let (g, m) = random_scene(seed, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u: Vec<f64> = (0..g.num_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let av = reproject_2d(&v, &m, &g).unwrap().values;
        let atu = reproject_2d_vjp(&u, &m, &g).unwrap();
        let lhs: f64 = u.iter().zip(&av).map(|(a, b)| a * b).sum();
        let rhs: f64 = atu.iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn lifted_vertices_are_zero(seed in 0u64..1000, z_eps in 0.0f64..0.05) {
        let (g, m) = random_scene(seed, 60);
        let img = PressureImage::new(g, vec![3.0; g.num_cells()]).unwrap();
        let vpm = project_gt(&img, &m, z_eps).unwrap();
        for (v, p) in m.vertices.iter().zip(&vpm) {
            if v[2] > z_eps {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }
}

#[test]
fn clamped_binning_agrees_inside_and_clamps_outside() {
    let g = grid(4, 3);
    assert_eq!(g.cell_clamped(-5.0, 0.25), (0, 0));
    assert_eq!(g.cell_clamped(100.0, 100.0), (3, 2));
    let c = g.cell_center(2, 1);
    assert_eq!(g.cell_clamped(c[0], c[1]), (2, 1));
}

#[test]
fn images_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(3, 2);
    let img = PressureImage::new(g, vec![0.0, 1.0, 2.5, 0.0, 4.0, 9.0]).unwrap();
    let p = dir.path().join("p.pmt");
    img.save(&p).unwrap();
    assert!(sidecar_path(&p).exists());
    assert_eq!(PressureImage::load(&p).unwrap(), img);
    let d = DepthImage::new(g, vec![2.0, NO_RETURN, 1.5, 1.7, 2.0, 2.0]).unwrap();
    let q = dir.path().join("d.pmt");
    d.save(&q).unwrap();
    assert_eq!(DepthImage::load(&q).unwrap(), d);
}

#[test]
fn image_constructors_validate() {
    let g = grid(2, 2);
    assert!(PressureImage::new(g, vec![1.0; 3]).is_err());
    assert!(PressureImage::new(g, vec![1.0, -1.0, 0.0, 0.0]).is_err());
    assert!(GridGeometry::new(0, 2, 0.1, [0.0, 0.0]).is_err());
    assert!(GridGeometry::new(2, 2, 0.0, [0.0, 0.0]).is_err());
}
