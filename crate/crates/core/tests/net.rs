use pressmap_core::body_model::Gender;
use pressmap_core::losses::{compute_stats, loss_p2d, GtView, NormStats};
use pressmap_core::nn::net::{gate, FrozenFeatures};
use pressmap_core::nn::train::{train_supervised, train_ws, ImageData, TrainConfig};
use pressmap_core::nn::{BodyMapNet, LbsConstants, NetConfig, Normalization, WsNet};
use pressmap_core::projection::{GridGeometry, PressureImage, Reprojection};
use pressmap_core::synth::{generate, Dataset, SynthConfig};
use pressmap_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, seed: u64) -> Dataset {
    generate(&SynthConfig { n_v: 200, ..SynthConfig::balanced(n, seed) }).unwrap()
}

fn stats(d: &Dataset) -> NormStats {
    compute_stats(d.samples.iter().map(|s| GtView {
        params: &s.gt_params,
        mesh: &s.gt_mesh,
        pressure: &s.gt_vpm,
        contact: &s.gt_contact,
    }))
    .unwrap()
}

fn small_config() -> NetConfig {
    NetConfig {
        enc_channels: vec![4, 6, 6],
        enc_strides: vec![2, 2, 2],
        mesh_hidden: 16,
        vertex_hidden: 8,
        ..NetConfig::default()
    }
}

fn net(d: &Dataset) -> BodyMapNet {
    let s = stats(d);
    let norm = Normalization::from_targets(d.samples.iter().map(|s| &s.gt_params), s.sigma_p).unwrap();
    BodyMapNet::new(small_config(), norm).unwrap()
}

fn perturb(store: &mut pressmap_core::nn::ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = store.flat().iter().map(|x| x + rng.random_range(-0.2..0.2)).collect();
    store.set_flat(&flat).unwrap();
}

fn features(d: &Dataset, n: &BodyMapNet, i: usize) -> FrozenFeatures {
    let v = d.view();
    let lbs = LbsConstants::new(&d.models.female);
    let input = n.prepare(v.depth(i), v.pressure_image(i), v.gender(i)).unwrap();
    n.frozen_features(&input, &lbs).unwrap()
}

#[test]
fn forward_is_deterministic() {
    let d = dataset(2, 1);
    let (a, b) = (net(&d), net(&d));
    assert_eq!(a.params, b.params);
    let v = d.view();
    let lbs = LbsConstants::new(&d.models.female);
    let input = a.prepare(v.depth(0), v.pressure_image(0), v.gender(0)).unwrap();
    let model = d.models.get(v.gender(0)).unwrap();
    assert_eq!(a.infer(&input, model, &lbs).unwrap(), b.infer(&input, model, &lbs).unwrap());

    let other = BodyMapNet::new(NetConfig { seed: 9, ..small_config() }, a.norm.clone()).unwrap();
    assert_ne!(other.params, a.params);
}

#[test]
fn inference_map_is_gated_contact() {
    assert_eq!(gate(&[3.0, 4.0, 5.0, 6.0], &[0.1, 0.5, 0.49, 0.9]), vec![0.0, 4.0, 0.0, 6.0]);
    assert!(gate(&[1.0, 2.0], &[0.2, 0.3]).iter().all(|&p| p == 0.0));

    let d = dataset(2, 2);
    let mut n = net(&d);
    perturb(&mut n.params, 3);
    let v = d.view();
    let lbs = LbsConstants::new(&d.models.female);
    let input = n.prepare(v.depth(1), v.pressure_image(1), v.gender(1)).unwrap();
    let o = n.infer(&input, d.models.get(v.gender(1)).unwrap(), &lbs).unwrap();
    for ((m, p), q) in o.inference_map.iter().zip(&o.pressure).zip(&o.contact_prob) {
        assert_eq!(*m, if *q >= 0.5 { *p } else { 0.0 });
    }
}

#[test]
fn vertex_head_is_permutation_equivariant() {
    let d = dataset(2, 3);
    let n = net(&d);
    let mut ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    perturb(&mut ws.params, 4);
    let f = features(&d, &n, 0);
    let base = ws.infer(&f).unwrap();
    assert!(base.iter().any(|&p| p != 0.0));

    let nv = f.vertices.len();
    let perm: Vec<usize> = (0..nv).map(|i| (i * 37 + 11) % nv).collect();
    let g = FrozenFeatures {
        vertices: perm.iter().map(|&i| f.vertices[i]).collect(),
        ..f.clone()
    };
    let out = ws.infer(&g).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out[k], base[i]);
    }
}

#[test]
fn zero_head_scores_the_sensed_image_against_zero() {
    let d = dataset(1, 4);
    let n = net(&d);
    let ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    let f = features(&d, &n, 0);
    let pred = ws.infer(&f).unwrap();
    assert!(pred.iter().all(|&p| p == 0.0));

    let sensed = &d.samples[0].pressure;
    let mesh = pressmap_core::body_model::PosedMesh::new(f.vertices.clone(), vec![], d.models.female.faces.clone());
    let r = Reprojection::new(&mesh, &sensed.geometry);
    let projected = PressureImage::new(sensed.geometry, r.forward(&pred).unwrap()).unwrap();
    let want = sensed.values.iter().map(|p| p * p).sum::<f64>() / sensed.values.len() as f64;
    assert_eq!(loss_p2d(&projected, sensed).unwrap(), want);
}

#[test]
fn checkpoints_round_trip() {
    let d = dataset(1, 5);
    let mut n = net(&d);
    perturb(&mut n.params, 6);
    let dir = tempfile::tempdir().unwrap();
    n.save(dir.path().join("mesh")).unwrap();
    assert_eq!(BodyMapNet::load(dir.path().join("mesh")).unwrap(), n);

    let mut ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    perturb(&mut ws.params, 7);
    ws.save(dir.path().join("ws")).unwrap();
    assert_eq!(WsNet::load(dir.path().join("ws")).unwrap(), ws);
    assert!(matches!(BodyMapNet::load(dir.path().join("ws")), Err(Error::Format(_))));
}

#[test]
fn mismatched_pressure_grid_is_rejected() {
    let d = dataset(1, 6);
    let n = net(&d);
    let g = GridGeometry::centered(32, 27, 0.0286, [0.0, 0.0]).unwrap();
    let wrong = PressureImage::zeros(g);
    let r = n.prepare(&d.samples[0].depth, &wrong, Gender::Male);
    assert!(matches!(r, Err(Error::GeometryMismatch(_))));
}

#[test]
fn empty_toggles_are_rejected() {
    let mut cfg = small_config();
    cfg.fim.use_xyz = false;
    cfg.fim.use_image = false;
    cfg.fim.use_latent = false;
    cfg.fim.use_global = false;
    assert!(matches!(BodyMapNet::new(cfg, Normalization::identity()), Err(Error::NoFeaturesEnabled)));
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig { epochs, batch_size: 2, ..TrainConfig::default() };
    c.adam.lr = lr;
    c
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let d = dataset(4, 7);
    let s = stats(&d);
    let mut n = net(&d);
    let mut cfg = quick(2, 0.0);
    cfg.adam.weight_decay = 0.0;
    let before = n.params.clone();
    let h = train_supervised(&mut n, &d.view(), &d.models, &s, &cfg).unwrap();
    assert_eq!(n.params, before);
    assert!((h.epoch_loss[0] - h.epoch_loss[1]).abs() <= 1e-12 * h.epoch_loss[0].abs());

    let mut ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    let wb = ws.params.clone();
    train_ws(&mut ws, &n, &d.view(), &d.models, &cfg).unwrap();
    assert_eq!(ws.params, wb);
}

#[test]
fn training_is_seeded() {
    let d = dataset(4, 8);
    let s = stats(&d);
    let run = |threads| {
        let mut n = net(&d);
        let cfg = TrainConfig { threads, ..quick(2, 1e-3) };
        let h = train_supervised(&mut n, &d.view(), &d.models, &s, &cfg).unwrap();
        (n.params, h)
    };
    let (a, b) = (run(1), run(1));
    assert_eq!(a, b);
    assert_eq!(run(3), a);
    assert_ne!(a.0, net(&d).params);
}

#[test]
fn empty_data_is_an_error() {
    let d = dataset(2, 9);
    let s = stats(&d);
    let mut n = net(&d);
    let empty = d.view().select([]);
    let r = train_supervised(&mut n, &empty, &d.models, &s, &quick(1, 1e-4));
    assert!(matches!(r, Err(Error::EmptyDataset)));
    let mut ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    assert!(matches!(train_ws(&mut ws, &n, &empty, &d.models, &quick(1, 1e-4)), Err(Error::EmptyDataset)));
}

#[test]
fn weak_supervision_never_reads_vertex_pressure() {
    let d = dataset(4, 10);
    let n = net(&d);
    let mut ws = WsNet::new(small_config(), n.norm.clone()).unwrap();
    let h = train_ws(&mut ws, &n, &d.view(), &d.models, &quick(2, 1e-3)).unwrap();
    assert_eq!(h.epoch_loss.len(), 2);
    assert_eq!(d.gt_pressure_reads(), 0);
    assert_ne!(ws.params, WsNet::new(small_config(), n.norm.clone()).unwrap().params);
}

#[test]
fn augmented_training_runs() {
    let d = dataset(4, 11);
    let s = stats(&d);
    let mut n = net(&d);
    let mut cfg = quick(1, 1e-4);
    cfg.augment.rotation_deg = 10.0;
    cfg.augment.erase_prob = 0.5;
    let h = train_supervised(&mut n, &d.view(), &d.models, &s, &cfg).unwrap();
    assert!(h.step_loss.iter().all(|l| l.is_finite()));
}
