//! Training objectives. Every term is written once against the tape; the plain
//! functions evaluate the same graph on constant leaves.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyParams, PosedMesh, Vec3};
use crate::error::{check_len, Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::projection::PressureImage;

pub const SIGMA_FLOOR: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;

/// Population standard deviations of the ground-truth quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub sigma_beta: f64,
    pub sigma_theta: f64,
    pub sigma_yx: f64,
    pub sigma_s: f64,
    pub sigma_v: f64,
    pub sigma_p: f64,
    pub sigma_c: f64,
}

impl NormStats {
    pub fn ones() -> Self {
        NormStats {
            sigma_beta: 1.0,
            sigma_theta: 1.0,
            sigma_yx: 1.0,
            sigma_s: 1.0,
            sigma_v: 1.0,
            sigma_p: 1.0,
            sigma_c: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.sigma_beta,
            self.sigma_theta,
            self.sigma_yx,
            self.sigma_s,
            self.sigma_v,
            self.sigma_p,
            self.sigma_c,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        NormStats {
            sigma_beta: a[0],
            sigma_theta: a[1],
            sigma_yx: a[2],
            sigma_s: a[3],
            sigma_v: a[4],
            sigma_p: a[5],
            sigma_c: a[6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_ws: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.25,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda_ws: 500.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda_ws];
        if all.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("loss weights must be nonnegative: {all:?}")))
        }
    }
}

/// Ground truth of one sample as seen by the statistics pass.
#[derive(Debug, Clone, Copy)]
pub struct GtView<'a> {
    pub params: &'a BodyParams,
    pub mesh: &'a PosedMesh,
    pub pressure: &'a [f64],
    pub contact: &'a [u8],
}

/// Streaming mean/variance accumulator.
#[derive(Debug, Default, Clone, Copy)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn extend<'a>(&mut self, xs: impl IntoIterator<Item = &'a f64>) {
        xs.into_iter().for_each(|x| self.push(*x));
    }

    fn sigma(&self) -> f64 {
        if self.n == 0 {
            return SIGMA_FLOOR;
        }
        (self.m2 / self.n as f64).sqrt().max(SIGMA_FLOOR)
    }
}

pub fn compute_stats<'a>(samples: impl IntoIterator<Item = GtView<'a>>) -> Result<NormStats> {
    let mut acc = [Welford::default(); 7];
    let mut count = 0usize;
    for s in samples {
        count += 1;
        acc[0].extend(&s.params.beta);
        acc[1].extend(&s.params.theta);
        acc[2].extend(s.params.root_rot_x.iter().chain(&s.params.root_rot_y));
        acc[3].extend(s.mesh.joints.iter().flatten());
        acc[4].extend(s.mesh.vertices.iter().flatten());
        acc[5].extend(s.pressure);
        for c in s.contact {
            acc[6].push(f64::from(*c));
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(NormStats::from_array(acc.map(|w| w.sigma())))
}

fn sum_abs_diff(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

fn sum_row_dist(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let n = tape.row_norm(d)?;
    Ok(tape.sum(n))
}

fn points_tensor(p: &[Vec3]) -> Tensor {
    Tensor::from_rows(p)
}

/// Parameter loss. `pred_psi` is the flat `[beta, theta, trans, x, y]`
/// vector and `pred_joints` the `[N_s, 3]` joint positions.
pub fn smpl_on_tape(
    tape: &mut Tape,
    pred_psi: Var,
    pred_joints: Var,
    gt: &BodyParams,
    gt_joints: &[Vec3],
    stats: &NormStats,
) -> Result<Var> {
    let (nb, nt) = (gt.beta.len(), gt.theta.len());
    check_len("predicted parameters", nb + nt + 9, tape.value(pred_psi).numel())?;
    check_len("predicted joints", gt_joints.len() * 3, tape.value(pred_joints).numel())?;
    let pb = tape.slice(pred_psi, 0, &[nb])?;
    let pt = tape.slice(pred_psi, nb, &[nt])?;
    let pr = tape.slice(pred_psi, nb + nt + 3, &[6])?;
    let gb = tape.constant(Tensor::vector(gt.beta.clone()));
    let gtt = tape.constant(Tensor::vector(gt.theta.clone()));
    let gr = tape.constant(Tensor::vector(gt.root_rot_x.iter().chain(&gt.root_rot_y).copied().collect()));
    let gj = tape.constant(points_tensor(gt_joints));
    let pj = tape.reshape(pred_joints, &[gt_joints.len(), 3])?;

    let lb = sum_abs_diff(tape, pb, gb)?;
    let lb = tape.scale(lb, 1.0 / (nb as f64 * stats.sigma_beta));
    let lt = sum_abs_diff(tape, pt, gtt)?;
    let lt = tape.scale(lt, 1.0 / (nt as f64 * stats.sigma_theta));
    let lr = sum_abs_diff(tape, pr, gr)?;
    let lr = tape.scale(lr, 1.0 / (6.0 * stats.sigma_yx));
    let ls = sum_row_dist(tape, pj, gj)?;
    let ls = tape.scale(ls, 1.0 / (gt_joints.len() as f64 * stats.sigma_s));
    let a = tape.add(lb, lt)?;
    let b = tape.add(lr, ls)?;
    tape.add(a, b)
}

pub fn v2v_on_tape(tape: &mut Tape, pred_vertices: Var, gt: &[Vec3], stats: &NormStats) -> Result<Var> {
    check_len("predicted vertices", gt.len() * 3, tape.value(pred_vertices).numel())?;
    let p = tape.reshape(pred_vertices, &[gt.len(), 3])?;
    let g = tape.constant(points_tensor(gt));
    let s = sum_row_dist(tape, p, g)?;
    Ok(tape.scale(s, 1.0 / (gt.len() as f64 * stats.sigma_v)))
}

pub fn p3d_on_tape(tape: &mut Tape, pred_pressure: Var, gt: &[f64], stats: &NormStats) -> Result<Var> {
    check_len("predicted pressure", gt.len(), tape.value(pred_pressure).numel())?;
    let p = tape.reshape(pred_pressure, &[gt.len()])?;
    let g = tape.constant(Tensor::vector(gt.to_vec()));
    let s = sum_abs_diff(tape, p, g)?;
    Ok(tape.scale(s, 1.0 / (gt.len() as f64 * stats.sigma_p)))
}

/// Binary cross-entropy on contact probabilities (already squashed).
pub fn contact_on_tape(tape: &mut Tape, pred_prob: Var, gt: &[u8], stats: &NormStats) -> Result<Var> {
    let n = gt.len();
    check_len("predicted contact", n, tape.value(pred_prob).numel())?;
    let p = tape.reshape(pred_prob, &[n])?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = tape.constant(Tensor::vector(gt.iter().map(|c| f64::from(*c)).collect()));
    let one_minus_y = tape.constant(Tensor::vector(gt.iter().map(|c| 1.0 - f64::from(*c)).collect()));
    let lp = tape.log(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.log(q);
    let a = tape.mul(y, lp)?;
    let b = tape.mul(one_minus_y, lq)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, -1.0 / (n as f64 * stats.sigma_c)))
}

/// Mean squared taxel error between a projected and a sensed image.
pub fn p2d_on_tape(tape: &mut Tape, projected: Var, sensed: &PressureImage) -> Result<Var> {
    let g = sensed.geometry;
    if tape.shape(projected) != [g.rows, g.cols] {
        return Err(Error::GeometryMismatch(format!(
            "projection {:?} vs sensed {}x{}",
            tape.shape(projected),
            g.rows,
            g.cols
        )));
    }
    let s = tape.constant(Tensor::new(&[g.rows, g.cols], sensed.values.clone())?);
    let d = tape.sub(projected, s)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Vertices strictly above the plane `z = plane_z`.
pub fn no_contact_vertices(mesh: &PosedMesh, plane_z: f64) -> Vec<usize> {
    mesh.vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| v[2] > plane_z)
        .map(|(i, _)| i)
        .collect()
}

/// Mean squared pressure over the given no-contact vertex set; 0 when empty.
pub fn preg_on_tape(tape: &mut Tape, pred_pressure: Var, no_contact: Arc<Vec<usize>>) -> Result<Var> {
    let n = tape.value(pred_pressure).numel();
    if no_contact.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let col = tape.reshape(pred_pressure, &[n, 1])?;
    let sel = tape.gather_rows(col, no_contact)?;
    let sq = tape.square(sel);
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedComponents {
    pub smpl: f64,
    pub v2v: f64,
    pub p3d: f64,
    pub contact: f64,
}

pub fn total_supervised_on_tape(tape: &mut Tape, parts: [Var; 4], w: &LossWeights) -> Result<Var> {
    let b = tape.scale(parts[1], w.lambda1);
    let c = tape.scale(parts[2], w.lambda2);
    let d = tape.scale(parts[3], w.lambda3);
    let ab = tape.add(parts[0], b)?;
    let cd = tape.add(c, d)?;
    tape.add(ab, cd)
}

pub fn total_ws_on_tape(tape: &mut Tape, p2d: Var, preg: Var, w: &LossWeights) -> Result<Var> {
    let r = tape.scale(preg, w.lambda_ws);
    tape.add(p2d, r)
}

fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

pub fn loss_smpl(
    pred: &BodyParams,
    pred_joints: &[Vec3],
    gt: &BodyParams,
    gt_joints: &[Vec3],
    stats: &NormStats,
) -> Result<f64> {
    check_len("beta", gt.beta.len(), pred.beta.len())?;
    check_len("theta", gt.theta.len(), pred.theta.len())?;
    check_len("joints", gt_joints.len(), pred_joints.len())?;
    eval(|t| {
        let psi = t.constant(Tensor::vector(pred.to_vector()));
        let j = t.constant(points_tensor(pred_joints));
        smpl_on_tape(t, psi, j, gt, gt_joints, stats)
    })
}

pub fn loss_v2v(pred: &[Vec3], gt: &[Vec3], stats: &NormStats) -> Result<f64> {
    check_len("vertices", gt.len(), pred.len())?;
    eval(|t| {
        let p = t.constant(points_tensor(pred));
        v2v_on_tape(t, p, gt, stats)
    })
}

pub fn loss_p3d(pred: &[f64], gt: &[f64], stats: &NormStats) -> Result<f64> {
    check_len("vertex pressure", gt.len(), pred.len())?;
    eval(|t| {
        let p = t.constant(Tensor::vector(pred.to_vec()));
        p3d_on_tape(t, p, gt, stats)
    })
}

pub fn loss_contact(pred_prob: &[f64], gt: &[u8], stats: &NormStats) -> Result<f64> {
    check_len("contact", gt.len(), pred_prob.len())?;
    eval(|t| {
        let p = t.constant(Tensor::vector(pred_prob.to_vec()));
        contact_on_tape(t, p, gt, stats)
    })
}

pub fn loss_total_supervised(c: &SupervisedComponents, w: &LossWeights) -> Result<f64> {
    let parts = [c.smpl, c.v2v, c.p3d, c.contact];
    if !parts.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("supervised loss component"));
    }
    Ok(c.smpl + w.lambda1 * c.v2v + w.lambda2 * c.p3d + w.lambda3 * c.contact)
}

pub fn loss_p2d(projected: &PressureImage, sensed: &PressureImage) -> Result<f64> {
    if projected.geometry != sensed.geometry {
        return Err(Error::GeometryMismatch(format!(
            "{:?} vs {:?}",
            projected.geometry, sensed.geometry
        )));
    }
    let g = projected.geometry;
    eval(|t| {
        let p = t.constant(Tensor::new(&[g.rows, g.cols], projected.values.clone())?);
        p2d_on_tape(t, p, sensed)
    })
}

/// Pressure regularizer over vertices above the mattress plane `z = 0`.
pub fn loss_preg(pred_pressure: &[f64], mesh: &PosedMesh) -> Result<f64> {
    loss_preg_at(pred_pressure, mesh, 0.0)
}

/// [`loss_preg`] with the mattress plane at height `plane_z`.
pub fn loss_preg_at(pred_pressure: &[f64], mesh: &PosedMesh, plane_z: f64) -> Result<f64> {
    check_len("vertex pressure", mesh.num_vertices(), pred_pressure.len())?;
    let idx = Arc::new(no_contact_vertices(mesh, plane_z));
    eval(|t| {
        let p = t.constant(Tensor::vector(pred_pressure.to_vec()));
        preg_on_tape(t, p, idx)
    })
}

pub fn loss_total_ws(l_p2d: f64, l_preg: f64, w: &LossWeights) -> Result<f64> {
    if !(l_p2d.is_finite() && l_preg.is_finite()) {
        return Err(Error::NonFinite("weak-supervision loss component"));
    }
    Ok(l_p2d + w.lambda_ws * l_preg)
}
