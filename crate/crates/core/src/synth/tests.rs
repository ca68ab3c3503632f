use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body_model::{ModelBank, Vec3};
use crate::nn::train::{ImageData, LabeledData};
use crate::projection::DEFAULT_Z_EPS;

const H: f64 = 2.0;

fn bank() -> ModelBank {
    ModelBank::toy(200, 3).unwrap()
}

fn mesh(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> PosedMesh {
    PosedMesh::new(vertices, Vec::new(), Arc::new(faces))
}

/// Axis-aligned box `[x0,x1] x [y0,y1] x [0,h]`.
fn box_mesh(x0: f64, x1: f64, y0: f64, y1: f64, h: f64) -> PosedMesh {
    let mut v = Vec::new();
    for z in [0.0, h] {
        v.extend([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]]);
    }
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    mesh(v, faces)
}

/// Flat triangulated plate of n x n quads at height `z`.
fn plate(x0: f64, y0: f64, size: f64, n: usize, z: f64) -> PosedMesh {
    let step = size / n as f64;
    let mut v = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            v.push([x0 + j as f64 * step, y0 + i as f64 * step, z]);
        }
    }
    let w = n + 1;
    let mut f = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let a = i * w + j;
            f.push([a, a + 1, a + w + 1]);
            f.push([a, a + w + 1, a + w]);
        }
    }
    mesh(v, f)
}

fn roll_of(p: &BodyParams) -> f64 {
    let r = crate::body_model::rot6d_to_matrix(p.root_rot_x, p.root_rot_y).unwrap();
    r[(2, 2)].clamp(-1.0, 1.0).acos()
}

#[test]
fn sampling_is_seeded() {
    let b = bank();
    let cfg = SamplingConfig::default();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_params(&mut rng, PoseCategory::LeftLateral, &cfg, &b.male).unwrap()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn supine_roll_stays_near_flat() {
    let b = bank();
    let cfg = SamplingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let p = sample_params(&mut rng, PoseCategory::Supine, &cfg, &b.female).unwrap();
        assert!(roll_of(&p).to_degrees() <= 15.0);
    }
    for cat in [PoseCategory::LeftLateral, PoseCategory::RightLateral] {
        let p = sample_params(&mut rng, cat, &cfg, &b.female).unwrap();
        assert!((roll_of(&p).to_degrees() - 90.0).abs() <= cfg.lateral_roll_jitter_deg + 1e-9);
    }
}

#[test]
fn lateral_sides_face_opposite_ways() {
    let b = bank();
    let cfg = SamplingConfig { lateral_roll_jitter_deg: 0.0, yaw_jitter_deg: 0.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let left = sample_params(&mut rng, PoseCategory::LeftLateral, &cfg, &b.male).unwrap();
    let right = sample_params(&mut rng, PoseCategory::RightLateral, &cfg, &b.male).unwrap();
    // Rest-frame +x (the body's left) points down when lying on the left side.
    assert!(left.root_rot_x[2] < -0.99);
    assert!(right.root_rot_x[2] > 0.99);
}

#[test]
fn bodies_rest_on_the_mattress() {
    let b = bank();
    let cfg = SamplingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..100 {
        let cat = PoseCategory::ALL[k % 3];
        let model = if k % 2 == 0 { &b.female } else { &b.male };
        let p = sample_params(&mut rng, cat, &cfg, model).unwrap();
        p.validate().unwrap();
        let z = pose_mesh(model, &p).unwrap().min_z();
        assert!(z.abs() <= 1e-6, "sample {k}: min z {z}");
    }
}

#[test]
fn empty_mesh_renders_background() {
    let g = SceneGeometry::default().depth;
    let d = render_depth(&mesh(vec![], vec![]), &g, Cover::Uncovered, H).unwrap();
    assert!(d.values.iter().all(|&x| x == H));
    let d = render_depth(&mesh(vec![], vec![]), &g, Cover::Cover2, H).unwrap();
    assert!(d.values.iter().all(|&x| x == H));
}

#[test]
fn box_top_is_flat() {
    let g = GridGeometry::centered(20, 10, 0.05, [0.0, 0.0]).unwrap();
    let m = box_mesh(-0.11, 0.13, -0.2, 0.17, 0.3);
    let d = render_depth(&m, &g, Cover::Uncovered, H).unwrap();
    let (r, c) = g.cell_of(0.0, 0.0).unwrap();
    assert!((d.values[r * g.cols + c] - (H - 0.3)).abs() < 1e-12);
    assert_eq!(d.values[0], H);
}

/// Highest hit of a downward ray through `(x, y)`.
fn ray_cast(m: &PosedMesh, x: f64, y: f64) -> Option<f64> {
    let dir = Vector3::new(0.0, 0.0, -1.0);
    let o = Vector3::new(x, y, H);
    let mut best: Option<f64> = None;
    for f in m.faces.iter() {
        let [a, b, c] = f.map(|i| Vector3::from(m.vertices[i]));
        let (e1, e2) = (b - a, c - a);
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = o - a;
        let u = s.dot(&p) / det;
        let q = s.cross(&e1);
        let v = dir.dot(&q) / det;
        if u < 0.0 || v < 0.0 || u + v > 1.0 {
            continue;
        }
        let t = e2.dot(&q) / det;
        let z = H - t;
        best = Some(best.map_or(z, |bz: f64| bz.max(z)));
    }
    best
}

#[test]
fn raster_matches_ray_casting() {
    use rand::Rng;
    let g = GridGeometry::centered(24, 18, 0.04, [0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let mut v = Vec::new();
        let mut f = Vec::new();
        for t in 0..12 {
            let c = [rng.random_range(-0.3..0.3), rng.random_range(-0.4..0.4)];
            for _ in 0..3 {
                v.push([
                    c[0] + rng.random_range(-0.2..0.2),
                    c[1] + rng.random_range(-0.2..0.2),
                    rng.random_range(0.0..0.5),
                ]);
            }
            f.push([3 * t, 3 * t + 1, 3 * t + 2]);
        }
        let m = mesh(v, f);
        let d = render_depth(&m, &g, Cover::Uncovered, H).unwrap();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let [x, y] = g.cell_center(r, c);
                let want = H - ray_cast(&m, x, y).unwrap_or(0.0).max(0.0);
                assert!((d.values[r * g.cols + c] - want).abs() < 1e-6, "pixel ({r},{c})");
            }
        }
    }
}

#[test]
fn cover_sits_above_the_body() {
    let b = bank();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = sample_params(&mut rng, PoseCategory::Supine, &SamplingConfig::default(), &b.male).unwrap();
    let m = pose_mesh(&b.male, &p).unwrap();
    let g = SceneGeometry::default().depth;
    let bare = render_depth(&m, &g, Cover::Uncovered, H).unwrap();
    for cover in [Cover::Cover1, Cover::Cover2] {
        let d = render_depth(&m, &g, cover, H).unwrap();
        for (c, u) in d.values.iter().zip(&bare.values) {
            assert!(*c <= *u + 1e-12);
            assert!((0.0..=H).contains(c));
        }
    }
}

#[test]
fn plate_weight_is_conserved() {
    let g = SceneGeometry::default().pressure;
    let m = plate(-0.2, -0.3, 0.4, 8, 0.0);
    let p = simulate_pressure(&m, &g, 10.0, DEFAULT_Z_EPS).unwrap();
    let total: f64 = p.values.iter().map(|v| v * 1000.0 * g.cell_area_m2()).sum();
    assert!((total - 98.1).abs() < 1e-6, "{total}");
}

#[test]
fn hovering_plate_has_no_contact() {
    let g = SceneGeometry::default().pressure;
    let m = plate(-0.2, -0.3, 0.4, 4, 0.2);
    assert!(matches!(simulate_pressure(&m, &g, 10.0, DEFAULT_Z_EPS), Err(Error::NoContact)));
    assert!(matches!(simulate_pressure(&m, &g, 0.0, DEFAULT_Z_EPS), Err(Error::ConfigInvalid(_))));
}

fn heron(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let d = |p: Vec3, q: Vec3| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let (x, y, z) = (d(a, b), d(b, c), d(c, a));
    let s = 0.5 * (x + y + z);
    (s * (s - x) * (s - y) * (s - z)).max(0.0).sqrt()
}

#[test]
fn taxel_forces_match_vertex_shares() {
    let b = bank();
    let geo = SceneGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = sample_params(&mut rng, PoseCategory::RightLateral, &SamplingConfig::default(), &b.female).unwrap();
    let m = pose_mesh(&b.female, &p).unwrap();
    let mass = 72.0;
    let img = simulate_pressure(&m, &geo.pressure, mass, geo.z_eps).unwrap();

    let mut area = vec![0.0; m.num_vertices()];
    for f in m.faces.iter() {
        let a = heron(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
        for &i in f {
            area[i] += a / 3.0;
        }
    }
    let contact: Vec<usize> = (0..m.num_vertices()).filter(|&i| m.vertices[i][2] <= geo.z_eps).collect();
    let sum: f64 = contact.iter().map(|&i| area[i]).sum();
    let g = &geo.pressure;
    let mut force = vec![0.0; g.num_cells()];
    for &i in &contact {
        let [x, y, _] = m.vertices[i];
        let c = ((x - g.origin_xy_m[0]) / g.pitch_m).floor();
        let r = ((y - g.origin_xy_m[1]) / g.pitch_m).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < g.cols && (r as usize) < g.rows {
            force[r as usize * g.cols + c as usize] += mass * 9.81 * area[i] / sum;
        }
    }
    for (k, f) in force.iter().enumerate() {
        let got = img.values[k] * 1000.0 * g.cell_area_m2();
        assert!((got - f).abs() <= 1e-9 * f.max(1.0), "taxel {k}: {got} vs {f}");
    }
}

#[test]
fn generated_scenes_are_consistent() {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(9, 13) };
    let d = generate(&cfg).unwrap();
    assert_eq!(d.len(), 9);
    for s in &d.samples {
        validate_scene(s, cfg.geometry.z_eps).unwrap();
        let total: f64 = s.pressure.values.iter().sum::<f64>() * 1000.0 * cfg.geometry.pressure.cell_area_m2();
        let w = s.body_mass_kg * GRAVITY;
        assert!((total - w).abs() <= 1e-6 * w);
        assert!(s.gt_contact.iter().any(|&c| c == 1));
    }
    let covers: std::collections::BTreeSet<_> = d.samples.iter().map(|s| s.cover).collect();
    assert_eq!(covers.len(), 3);
}

#[test]
fn manifests_are_reproducible() {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(10, 4) };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_dataset(&cfg, a.path()).unwrap();
    let mb = make_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    let pa = std::fs::read(a.path().join("samples/s00003_pressure.pmt")).unwrap();
    let pb = std::fs::read(b.path().join("samples/s00003_pressure.pmt")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn lateral_filter_drops_supine() {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(12, 5) };
    let d = generate(&cfg).unwrap();
    let lat = d.filter(Some(&[PoseCategory::LeftLateral, PoseCategory::RightLateral]), None);
    assert!(!lat.is_empty());
    assert!((0..lat.len()).all(|i| lat.pose_category(i) != PoseCategory::Supine));
    let sup = d.filter(Some(&[PoseCategory::Supine]), Some(&[Cover::Uncovered]));
    assert!((0..sup.len()).all(|i| sup.pose_category(i) == PoseCategory::Supine && sup.cover(i) == Cover::Uncovered));
    assert_eq!(lat.len() + d.filter(Some(&[PoseCategory::Supine]), None).len(), d.len());
}

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(4, 6) };
    let d = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, d.manifest);
    for (a, b) in back.samples.iter().zip(&d.samples) {
        assert!(a.depth == b.depth, "depth");
        assert!(a.pressure == b.pressure, "pressure");
        assert!(a.gt_params == b.gt_params, "params");
        assert!(a.gt_mesh.vertices == b.gt_mesh.vertices, "vertices");
        assert!(a.gt_mesh.joints == b.gt_mesh.joints, "joints");
        assert!(a.gt_mesh.faces == b.gt_mesh.faces, "faces");
        assert!(a.gt_vpm == b.gt_vpm, "vpm");
        assert!(a.gt_contact == b.gt_contact, "contact");
        assert!(a.pose_category == b.pose_category && a.cover == b.cover && a.body_mass_kg == b.body_mass_kg, "meta");
    }
}

#[test]
fn gt_pressure_reads_are_counted() {
    let cfg = SynthConfig { n_v: 200, ..SynthConfig::balanced(3, 6) };
    let d = generate(&cfg).unwrap();
    let v = d.view();
    let _ = (v.depth(0), v.pressure_image(1), v.gt_params(2), v.gt_mesh(0));
    assert_eq!(d.gt_pressure_reads(), 0);
    let _ = v.gt_pressure(1);
    assert_eq!(d.gt_pressure_reads(), 1);
}

#[test]
fn categories_and_covers_parse() {
    for c in PoseCategory::ALL {
        assert_eq!(c.name().parse::<PoseCategory>().unwrap(), c);
    }
    for c in [Cover::Uncovered, Cover::Cover1, Cover::Cover2] {
        assert_eq!(c.to_string().parse::<Cover>().unwrap(), c);
    }
    assert!("prone".parse::<PoseCategory>().is_err());
}
