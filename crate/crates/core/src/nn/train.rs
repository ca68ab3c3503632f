//! Training loops, evaluation and the data interfaces they consume.

use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::lbs::LbsConstants;
use super::net::{BodyMapNet, FrozenFeatures, NetInput, WsNet};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::body_model::{build_neighbor_table, BodyParams, Gender, ModelBank, NeighborTable, PosedMesh, Vec3};
use crate::error::{Error, Result};
use crate::losses::{
    contact_on_tape, no_contact_vertices, p2d_on_tape, p3d_on_tape, preg_on_tape, smpl_on_tape,
    total_supervised_on_tape, total_ws_on_tape, v2v_on_tape, LossWeights, NormStats,
};
use crate::metrics::{evaluate_sample, MetricReport, SampleView};
use crate::projection::{DepthImage, GridGeometry, PressureImage, Reprojection};

/// Inputs available at test time.
pub trait ImageData: Sync {
    fn len(&self) -> usize;
    fn depth(&self, i: usize) -> &DepthImage;
    fn pressure_image(&self, i: usize) -> &PressureImage;
    fn gender(&self, i: usize) -> Gender;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs plus full 3D ground truth.
pub trait LabeledData: ImageData {
    fn gt_params(&self, i: usize) -> &BodyParams;
    fn gt_mesh(&self, i: usize) -> &PosedMesh;
    fn gt_pressure(&self, i: usize) -> &[f64];
    fn gt_contact(&self, i: usize) -> &[u8];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    /// Maximum in-plane rotation in degrees; 0 disables it.
    pub rotation_deg: f64,
    /// Probability of erasing one rectangle of the input images.
    pub erase_prob: f64,
    /// Largest erased rectangle side as a fraction of the image side.
    pub erase_max_frac: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            rotation_deg: 0.0,
            erase_prob: 0.0,
            erase_max_frac: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clamped to the dataset size.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub augment: Augmentation,
    /// Vertices above this height count as off the mattress in the
    /// weakly supervised regularizer.
    pub nocv_plane_z: f64,
    /// Worker threads for per-sample gradients; results are merged in
    /// sample order, so the count does not change the outcome.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            augment: Augmentation::default(),
            nocv_plane_z: 0.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let a = &self.adam;
        let finite = [a.lr, a.beta1, a.beta2, a.eps, a.weight_decay, self.nocv_plane_z]
            .iter()
            .all(|v| v.is_finite());
        if !finite || a.lr < 0.0 || a.weight_decay < 0.0 || a.eps <= 0.0 {
            return Err(Error::ConfigInvalid("optimizer settings must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::ConfigInvalid("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch size must be positive".into()));
        }
        let g = &self.augment;
        if !(g.rotation_deg >= 0.0 && (0.0..=1.0).contains(&g.erase_prob) && (0.0..=1.0).contains(&g.erase_max_frac)) {
            return Err(Error::ConfigInvalid("augmentation settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean sample loss of every optimizer step.
    pub step_loss: Vec<f64>,
    /// Mean sample loss over each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Runs `f` over `0..n`, fanned out over up to `threads` scoped workers,
/// and returns the results in index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::ConfigInvalid("worker thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

struct Lbs {
    female: LbsConstants,
    male: LbsConstants,
}

impl Lbs {
    fn new(models: &ModelBank) -> Self {
        Lbs {
            female: LbsConstants::new(&models.female),
            male: LbsConstants::new(&models.male),
        }
    }

    fn get(&self, g: Gender) -> Result<&LbsConstants> {
        match g {
            Gender::Female => Ok(&self.female),
            Gender::Male => Ok(&self.male),
            Gender::Neutral => Err(Error::ConfigInvalid("no neutral model in the bank".into())),
        }
    }
}

fn grads_of(tape: &Tape, vars: &[Var], store: &ParamStore) -> Vec<Tensor> {
    vars.iter()
        .zip(&store.tensors)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(&t.shape)))
        .collect()
}

/// Shared epoch loop: seeded shuffling, per-sample gradients averaged over
/// each batch, one Adam step per batch.
fn run_epochs<S: Sync>(
    params: &mut ParamStore,
    n: usize,
    cfg: &TrainConfig,
    mut prepare_batch: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<Vec<S>>,
    sample: impl Fn(&ParamStore, usize, &S) -> Result<(f64, Vec<Tensor>)> + Sync,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let bs = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, &params.tensors);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(bs) {
            let slots = prepare_batch(batch, &mut rng)?;
            let store: &ParamStore = params;
            let results = parallel_map(batch.len(), cfg.threads, |k| sample(store, batch[k], &slots[k]))?;
            let mut total = params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect::<Vec<_>>();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in total.iter_mut().zip(g) {
                    for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in &mut total {
                t.data.iter_mut().for_each(|v| *v *= scale);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            adam.update(&mut params.tensors, &total)?;
            history.step_loss.push(loss * scale);
            epoch_sum += loss;
        }
        history.epoch_loss.push(epoch_sum / n as f64);
    }
    Ok(history)
}

/// Per-sample ground truth after optional augmentation.
#[derive(Debug, Clone)]
struct Target {
    input: NetInput,
    params: BodyParams,
    vertices: Vec<Vec3>,
    joints: Vec<Vec3>,
}

/// Rotates a grid image about its centre by `angle`, nearest-neighbour,
/// filling uncovered pixels with `fill`.
fn rotate_image(values: &[f64], g: &GridGeometry, angle: f64, fill: f64) -> Vec<f64> {
    let c = g.cell_center(0, 0);
    let d = g.cell_center(g.rows - 1, g.cols - 1);
    let (cx, cy) = (0.5 * (c[0] + d[0]), 0.5 * (c[1] + d[1]));
    let (s, co) = (-angle).sin_cos();
    let mut out = Vec::with_capacity(values.len());
    for r in 0..g.rows {
        for col in 0..g.cols {
            let [x, y] = g.cell_center(r, col);
            let (dx, dy) = (x - cx, y - cy);
            let sx = cx + co * dx - s * dy;
            let sy = cy + s * dx + co * dy;
            out.push(g.cell_of(sx, sy).map_or(fill, |(rr, cc)| values[rr * g.cols + cc]));
        }
    }
    out
}

fn grid_center(g: &GridGeometry) -> [f64; 2] {
    let c = g.cell_center(0, 0);
    let d = g.cell_center(g.rows - 1, g.cols - 1);
    [0.5 * (c[0] + d[0]), 0.5 * (c[1] + d[1])]
}

/// Rotates the scene about the vertical axis through the pressure grid
/// centre: both images, the mesh, and the root of the body parameters.
#[allow(clippy::too_many_arguments)]
fn rotated_target(
    net: &BodyMapNet,
    depth: &DepthImage,
    pressure: &PressureImage,
    params: &BodyParams,
    mesh: &PosedMesh,
    models: &ModelBank,
    angle: f64,
) -> Result<Target> {
    let camera = net.config.camera_height_m;
    let depth = DepthImage::new(depth.geometry, rotate_image(&depth.values, &depth.geometry, angle, camera))?;
    let pressure = PressureImage::new(pressure.geometry, rotate_image(&pressure.values, &pressure.geometry, angle, 0.0))?;
    let [cx, cy] = grid_center(&pressure.geometry);
    let rz: Matrix3<f64> = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
    let rot = |p: &Vec3| -> Vec3 {
        let q = rz * Vector3::new(p[0] - cx, p[1] - cy, p[2]);
        [q[0] + cx, q[1] + cy, q[2]]
    };
    let model = models.get(params.gender)?;
    let j0 = model.regress_joints(&model.shaped_vertices(&params.beta)?)[0];
    let root = crate::body_model::rot6d_to_matrix(params.root_rot_x, params.root_rot_y)?;
    let mut p = params.clone().with_root_rotation(&(rz * root));
    // Root joint world position is J0 + trans; rotate it and solve for trans.
    let w = rot(&[j0[0] + params.root_trans[0], j0[1] + params.root_trans[1], j0[2] + params.root_trans[2]]);
    p.root_trans = [w[0] - j0[0], w[1] - j0[1], w[2] - j0[2]];
    Ok(Target {
        input: net.prepare(&depth, &pressure, params.gender)?,
        params: p,
        vertices: mesh.vertices.iter().map(rot).collect(),
        joints: mesh.joints.iter().map(rot).collect(),
    })
}

fn erase(input: &mut NetInput, rng: &mut ChaCha8Rng, max_frac: f64) {
    let (rows, cols) = (input.geometry.rows, input.geometry.cols);
    let h = ((rows as f64 * rng.random_range(0.0..=max_frac)).round() as usize).max(1).min(rows);
    let w = ((cols as f64 * rng.random_range(0.0..=max_frac)).round() as usize).max(1).min(cols);
    let r0 = rng.random_range(0..=rows - h);
    let c0 = rng.random_range(0..=cols - w);
    for ch in 0..super::net::IMAGE_FEATURE_CHANNELS {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                input.channels.data[(ch * rows + r) * cols + c] = 0.0;
            }
        }
    }
}

/// Supervised training against parameters, mesh, vertex pressure and
/// contact labels.
pub fn train_supervised(
    net: &mut BodyMapNet,
    data: &impl LabeledData,
    models: &ModelBank,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let n = data.len();
    let lbs = Lbs::new(models);
    let base: Vec<NetInput> = (0..n)
        .map(|i| net.prepare(data.depth(i), data.pressure_image(i), data.gender(i)))
        .collect::<Result<_>>()?;
    let aug = &cfg.augment;
    let frozen_net = net.clone();
    let mut params = std::mem::take(&mut net.params);
    let history = run_epochs(
        &mut params,
        n,
        cfg,
        |batch, rng| {
            let mut slots = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut t = None;
                if aug.rotation_deg > 0.0 {
                    let a = rng.random_range(-aug.rotation_deg..=aug.rotation_deg).to_radians();
                    t = Some(rotated_target(
                        &frozen_net,
                        data.depth(i),
                        data.pressure_image(i),
                        data.gt_params(i),
                        data.gt_mesh(i),
                        models,
                        a,
                    )?);
                }
                if aug.erase_prob > 0.0 && rng.random_bool(aug.erase_prob) {
                    let t = t.get_or_insert_with(|| Target {
                        input: base[i].clone(),
                        params: data.gt_params(i).clone(),
                        vertices: data.gt_mesh(i).vertices.clone(),
                        joints: data.gt_mesh(i).joints.clone(),
                    });
                    erase(&mut t.input, rng, aug.erase_max_frac);
                }
                slots.push(t);
            }
            Ok(slots)
        },
        |store, i, slot: &Option<Target>| {
            let input = slot.as_ref().map_or(&base[i], |t| &t.input);
            let gt_params = slot.as_ref().map_or(data.gt_params(i), |t| &t.params);
            let mesh = data.gt_mesh(i);
            let gt_verts = slot.as_ref().map_or(&mesh.vertices[..], |t| &t.vertices[..]);
            let gt_joints = slot.as_ref().map_or(&mesh.joints[..], |t| &t.joints[..]);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let o = frozen_net.forward_tape(&mut tape, &p, input, lbs.get(input.gender)?)?;
            let a = smpl_on_tape(&mut tape, o.psi, o.joints, gt_params, gt_joints, stats)?;
            let b = v2v_on_tape(&mut tape, o.vertices, gt_verts, stats)?;
            let c = p3d_on_tape(&mut tape, o.pressure, data.gt_pressure(i), stats)?;
            let d = contact_on_tape(&mut tape, o.contact_prob, data.gt_contact(i), stats)?;
            let loss = total_supervised_on_tape(&mut tape, [a, b, c, d], &cfg.weights)?;
            tape.backward(loss)?;
            Ok((tape.value(loss).item(), grads_of(&tape, &p, store)))
        },
    );
    net.params = params;
    history
}


/// Per-sample state for weakly supervised training, fixed by the frozen
/// mesh network.
struct WsSample {
    features: FrozenFeatures,
    reprojection: Arc<Reprojection>,
    no_contact: Arc<Vec<usize>>,
}

fn ws_samples(mesh_net: &BodyMapNet, data: &impl ImageData, models: &ModelBank, plane_z: f64) -> Result<Vec<WsSample>> {
    let lbs = Lbs::new(models);
    (0..data.len())
        .map(|i| {
            let input = mesh_net.prepare(data.depth(i), data.pressure_image(i), data.gender(i))?;
            let features = mesh_net.frozen_features(&input, lbs.get(data.gender(i))?)?;
            let mesh = PosedMesh::new(features.vertices.clone(), vec![], models.female.faces.clone());
            Ok(WsSample {
                reprojection: Arc::new(Reprojection::new(&mesh, &data.pressure_image(i).geometry)),
                no_contact: Arc::new(no_contact_vertices(&mesh, plane_z)),
                features,
            })
        })
        .collect()
}

/// Trains the per-vertex pressure head from the images alone: the predicted
/// vertex pressure, averaged back onto the mat grid, should match the
/// sensed image, and vertices off the mattress should carry none.
pub fn train_ws(
    ws: &mut WsNet,
    mesh_net: &BodyMapNet,
    data: &impl ImageData,
    models: &ModelBank,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let samples = ws_samples(mesh_net, data, models, cfg.nocv_plane_z)?;
    let model = ws.clone();
    let mut params = std::mem::take(&mut ws.params);
    let history = run_epochs(
        &mut params,
        data.len(),
        cfg,
        |batch, _| Ok(vec![(); batch.len()]),
        |store, i, _: &()| {
            let s = &samples[i];
            let sensed = data.pressure_image(i);
            let g = sensed.geometry;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let pv = model.forward_tape(&mut tape, &p, &s.features)?;
            let img = tape.reproject(pv, s.reprojection.clone())?;
            let img = tape.reshape(img, &[g.rows, g.cols])?;
            let a = p2d_on_tape(&mut tape, img, sensed)?;
            let b = preg_on_tape(&mut tape, pv, s.no_contact.clone())?;
            let loss = total_ws_on_tape(&mut tape, a, b, &cfg.weights)?;
            tape.backward(loss)?;
            Ok((tape.value(loss).item(), grads_of(&tape, &p, store)))
        },
    );
    ws.params = params;
    history
}

/// Prediction for one sample in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub params: BodyParams,
    pub mesh: PosedMesh,
    pub pressure: Vec<f64>,
}

fn report(pred: &Prediction, data: &impl LabeledData, i: usize, models: &ModelBank, nb: &NeighborTable) -> Result<MetricReport> {
    let gt = data.gt_mesh(i);
    let gp = data.gt_params(i);
    evaluate_sample(
        SampleView {
            beta: &pred.params.beta,
            joints: &pred.mesh.joints,
            vertices: &pred.mesh.vertices,
            pressure: &pred.pressure,
        },
        SampleView {
            beta: &gp.beta,
            joints: &gt.joints,
            vertices: &gt.vertices,
            pressure: data.gt_pressure(i),
        },
        models.get(gp.gender)?,
        nb,
    )
}

/// Mesh and gated pressure from the supervised network.
pub fn predict(net: &BodyMapNet, data: &impl ImageData, models: &ModelBank, threads: usize) -> Result<Vec<Prediction>> {
    let lbs = Lbs::new(models);
    parallel_map(data.len(), threads, |i| {
        let input = net.prepare(data.depth(i), data.pressure_image(i), data.gender(i))?;
        let model = models.get(data.gender(i))?;
        let o = net.infer(&input, model, lbs.get(data.gender(i))?)?;
        Ok(Prediction {
            params: o.params,
            mesh: o.mesh,
            pressure: o.inference_map,
        })
    })
}

/// Mesh from the frozen network and pressure from the weakly supervised
/// head.
pub fn predict_ws(ws: &WsNet, mesh_net: &BodyMapNet, data: &impl ImageData, models: &ModelBank, threads: usize) -> Result<Vec<Prediction>> {
    let lbs = Lbs::new(models);
    parallel_map(data.len(), threads, |i| {
        let input = mesh_net.prepare(data.depth(i), data.pressure_image(i), data.gender(i))?;
        let model = models.get(data.gender(i))?;
        let o = mesh_net.infer(&input, model, lbs.get(data.gender(i))?)?;
        let f = FrozenFeatures {
            vertices: o.mesh.vertices.clone(),
            ..mesh_net.frozen_features(&input, lbs.get(data.gender(i))?)?
        };
        Ok(Prediction {
            pressure: ws.infer(&f)?,
            params: o.params,
            mesh: o.mesh,
        })
    })
}

/// Per-sample metrics of `preds` against the ground truth, in data order.
pub fn score(preds: &[Prediction], data: &impl LabeledData, models: &ModelBank, threads: usize) -> Result<Vec<MetricReport>> {
    if preds.len() != data.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: data.len(),
            got: preds.len(),
        });
    }
    let nb = build_neighbor_table(models.num_vertices(), &models.female.faces)?;
    parallel_map(data.len(), threads, |i| report(&preds[i], data, i, models, &nb))
}

pub fn evaluate(net: &BodyMapNet, data: &impl LabeledData, models: &ModelBank, threads: usize) -> Result<Vec<MetricReport>> {
    score(&predict(net, data, models, threads)?, data, models, threads)
}

pub fn evaluate_ws(
    ws: &WsNet,
    mesh_net: &BodyMapNet,
    data: &impl LabeledData,
    models: &ModelBank,
    threads: usize,
) -> Result<Vec<MetricReport>> {
    score(&predict_ws(ws, mesh_net, data, models, threads)?, data, models, threads)
}
