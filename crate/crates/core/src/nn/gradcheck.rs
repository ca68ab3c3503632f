//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::lbs::LbsConstants;
use super::net::{points, register_mesh, BodyMapNet, NetConfig, NetInput, Normalization, WsNet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::body_model::{
    generate_toy_model, pose_mesh, BodyModel, BodyParams, Gender, PosedMesh, ToyModelConfig, Vec3, NUM_BETAS,
    NUM_JOINTS, NUM_THETA,
};
use crate::error::Result;
use crate::losses::{
    contact_on_tape, no_contact_vertices, p2d_on_tape, p3d_on_tape, preg_on_tape, smpl_on_tape,
    total_supervised_on_tape, total_ws_on_tape, v2v_on_tape, LossWeights, NormStats,
};
use crate::projection::{DepthImage, GridGeometry, PressureImage, Reprojection};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// A differentiable function of a few tensors, built on a fresh tape.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares the tape gradient of `<r, f(inputs)>` (random fixed `r`) with
/// central differences. The error is the norm-wise relative error over all
/// checked coordinates, `|g_tape - g_fd| / max(|g_tape|, |g_fd|)`.
///
/// `limit` caps how many coordinates per input are perturbed (evenly
/// strided); `None` checks all of them.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    tolerance: f64,
    fault: Option<&str>,
    limit: Option<usize>,
    f: &Builder<'_>,
) -> Result<CheckResult> {
    let mut tape = match fault {
        Some(op) => Tape::with_fault(op),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n_out as u64);
    let weights = Tensor {
        shape: tape.shape(out).to_vec(),
        data: (0..n_out).map(|_| rng.random_range(0.5..1.5)).collect(),
    };
    let loss = reduce(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let scalar = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        let l = reduce(&mut t, o, &weights)?;
        Ok(t.value(l).item())
    };

    let (mut diff2, mut ga2, mut gn2, mut checked) = (0.0, 0.0, 0.0, 0usize);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(&input.shape));
        let n = input.numel();
        let stride = limit.map_or(1, |l| n.div_ceil(l.max(1)).max(1));
        let mut work = inputs.to_vec();
        for i in (0..n).step_by(stride) {
            let x = input.data[i];
            work[k].data[i] = x + STEP;
            let fp = scalar(&work)?;
            work[k].data[i] = x - STEP;
            let fm = scalar(&work)?;
            work[k].data[i] = x;
            let fd = (fp - fm) / (2.0 * STEP);
            let a = analytic.data[i];
            diff2 += (a - fd) * (a - fd);
            ga2 += a * a;
            gn2 += fd * fd;
            checked += 1;
        }
    }
    let denom = ga2.sqrt().max(gn2.sqrt());
    let rel_err = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(CheckResult {
        name: name.to_string(),
        rel_err,
        tolerance,
        checked,
        passed: rel_err < tolerance && rel_err.is_finite(),
    })
}

fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(rng, shape, 0.1, 1.5);
    for v in &mut t.data {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// One randomized check per tape operation.
pub fn op_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &Builder<'_>| -> Result<()> {
        out.push(check(name, &inputs, tol, fault, None, f)?);
        Ok(())
    };
    let m = |rng: &mut ChaCha8Rng, r, c| rand_t(rng, &[r, c], -1.0, 1.0);

    run("add", vec![m(&mut rng, 3, 4), m(&mut rng, 3, 4)], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![m(&mut rng, 3, 4), m(&mut rng, 3, 4)], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![m(&mut rng, 3, 4), m(&mut rng, 3, 4)], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![m(&mut rng, 2, 5)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("add_scalar", vec![m(&mut rng, 2, 5)], &|t, v| Ok(t.add_scalar(v[0], 0.4)))?;
    run("add_row", vec![m(&mut rng, 4, 3), rand_t(&mut rng, &[3], -1.0, 1.0)], &|t, v| {
        t.add_row(v[0], v[1])
    })?;
    run("matmul", vec![m(&mut rng, 3, 5), m(&mut rng, 5, 2)], &|t, v| t.matmul(v[0], v[1]))?;
    run("transpose", vec![m(&mut rng, 3, 5)], &|t, v| t.transpose(v[0]))?;
    run("relu", vec![away_from_zero(&mut rng, &[4, 4])], &|t, v| Ok(t.relu(v[0])))?;
    run("sigmoid", vec![rand_t(&mut rng, &[10], -4.0, 4.0)], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("abs", vec![away_from_zero(&mut rng, &[10])], &|t, v| Ok(t.abs(v[0])))?;
    run("square", vec![m(&mut rng, 2, 3)], &|t, v| Ok(t.square(v[0])))?;
    run("log", vec![rand_t(&mut rng, &[8], 0.2, 3.0)], &|t, v| Ok(t.log(v[0])))?;
    {
        // Keep every value at least 0.05 from the clamp limits.
        let mut x = rand_t(&mut rng, &[12], -1.0, 1.0);
        for v in &mut x.data {
            if (*v - 0.5).abs() < 0.05 || (*v + 0.5).abs() < 0.05 {
                *v += 0.12;
            }
        }
        run("clamp", vec![x], &|t, v| Ok(t.clamp(v[0], -0.5, 0.5)))?;
    }
    run("row_norm", vec![away_from_zero(&mut rng, &[5, 3])], &|t, v| t.row_norm(v[0]))?;
    run("sum", vec![m(&mut rng, 3, 3)], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![m(&mut rng, 3, 3)], &|t, v| Ok(t.mean(v[0])))?;
    run(
        "conv2d",
        vec![
            rand_t(&mut rng, &[2, 7, 6], -1.0, 1.0),
            rand_t(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[3], -1.0, 1.0),
        ],
        &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
    )?;
    run("global_avg_pool", vec![rand_t(&mut rng, &[3, 4, 5], -1.0, 1.0)], &|t, v| {
        t.global_avg_pool(v[0])
    })?;
    {
        // Distinct column values so the argmax is stable under perturbation.
        let mut x = rand_t(&mut rng, &[6, 4], -1.0, 1.0);
        for (k, v) in x.data.iter_mut().enumerate() {
            *v += 0.37 * (k % 6) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        run("max_rows", vec![x], &|t, v| t.max_rows(v[0]))?;
    }
    run("concat_cols", vec![m(&mut rng, 3, 2), m(&mut rng, 3, 4)], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    })?;
    run("concat_rows", vec![m(&mut rng, 2, 3), m(&mut rng, 4, 3)], &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    })?;
    run("reshape", vec![m(&mut rng, 3, 4)], &|t, v| {
        let r = t.reshape(v[0], &[4, 3])?;
        let w = t.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(1), &[3, 2], -1.0, 1.0));
        t.matmul(r, w)
    })?;
    run("slice", vec![m(&mut rng, 3, 4)], &|t, v| t.slice(v[0], 3, &[2, 3]))?;
    {
        let pix = Arc::new(vec![0usize, 5, 5, 11, 3, 0, 7]);
        run("gather_pixels", vec![rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0)], &move |t, v| {
            t.gather_pixels(v[0], pix.clone())
        })?;
    }
    {
        let idx = Arc::new(vec![2usize, 0, 2, 4]);
        run("gather_rows", vec![m(&mut rng, 5, 3)], &move |t, v| t.gather_rows(v[0], idx.clone()))?;
    }
    run("repeat_rows", vec![m(&mut rng, 1, 4)], &|t, v| t.repeat_rows(v[0], 5))?;
    run("rot6d", vec![rand_t(&mut rng, &[6], -1.0, 1.0)], &|t, v| t.rot6d(v[0]))?;
    run("rodrigues", vec![rand_t(&mut rng, &[3], -1.5, 1.5)], &|t, v| t.rodrigues(v[0]))?;
    run("rodrigues_small_angle", vec![rand_t(&mut rng, &[3], -0.01, 0.01)], &|t, v| {
        t.rodrigues(v[0])
    })?;
    run("affine_apply", vec![m(&mut rng, 5, 12), m(&mut rng, 5, 3)], &|t, v| {
        t.affine_apply(v[0], v[1])
    })?;
    {
        let g = GridGeometry::new(3, 3, 0.1, [0.0, 0.0])?;
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.random_range(-0.02..0.32), rng.random_range(-0.02..0.32), 0.0])
            .collect();
        let mesh = crate::body_model::PosedMesh::new(pts, vec![], Arc::new(vec![]));
        let op = Arc::new(Reprojection::new(&mesh, &g));
        run("reproject", vec![rand_t(&mut rng, &[20], -2.0, 2.0)], &move |t, v| {
            t.reproject(v[0], op.clone())
        })?;
    }
    Ok(out)
}

fn fixture_params(rng: &mut ChaCha8Rng, gender: Gender) -> BodyParams {
    let mut p = BodyParams::neutral(gender);
    p.beta = (0..NUM_BETAS).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.theta = (0..NUM_THETA).map(|_| rng.random_range(-0.3..0.3)).collect();
    p.root_trans = [0.3, 0.9, 0.1];
    p
}

/// One check per loss term, each with respect to its predicted inputs.
pub fn loss_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();
    let stats = NormStats::from_array(std::array::from_fn(|_| rng.random_range(0.3..2.0)));
    let w = LossWeights::default();
    let n = 30;
    let gt = fixture_params(&mut rng, Gender::Female);
    let gt_joints: Vec<Vec3> = (0..NUM_JOINTS).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let gt_verts: Vec<Vec3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let gt_p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let gt_c: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let psi_len = NUM_BETAS + NUM_THETA + 9;

    out.push(check(
        "loss_smpl",
        &[rand_t(&mut rng, &[psi_len], -1.0, 1.0), rand_t(&mut rng, &[NUM_JOINTS, 3], -1.0, 2.0)],
        tol,
        fault,
        None,
        &|t, v| smpl_on_tape(t, v[0], v[1], &gt, &gt_joints, &stats),
    )?);
    out.push(check("loss_v2v", &[rand_t(&mut rng, &[n, 3], -1.0, 2.0)], tol, fault, None, &|t, v| {
        v2v_on_tape(t, v[0], &gt_verts, &stats)
    })?);
    out.push(check("loss_p3d", &[rand_t(&mut rng, &[n], -3.0, 8.0)], tol, fault, None, &|t, v| {
        p3d_on_tape(t, v[0], &gt_p, &stats)
    })?);
    out.push(check("loss_contact", &[rand_t(&mut rng, &[n], 0.05, 0.95)], tol, fault, None, &|t, v| {
        contact_on_tape(t, v[0], &gt_c, &stats)
    })?);
    out.push(check(
        "loss_total_supervised",
        &(0..4).map(|_| rand_t(&mut rng, &[1], 0.0, 3.0)).collect::<Vec<_>>(),
        tol,
        fault,
        None,
        &|t, v| total_supervised_on_tape(t, [v[0], v[1], v[2], v[3]], &w),
    )?);
    let g = GridGeometry::new(4, 3, 0.1, [0.0, 0.0])?;
    let sensed = PressureImage::new(g, (0..12).map(|_| rng.random_range(0.0..4.0)).collect())?;
    out.push(check("loss_p2d", &[rand_t(&mut rng, &[4, 3], 0.0, 4.0)], tol, fault, None, &|t, v| {
        p2d_on_tape(t, v[0], &sensed)
    })?);
    let nocv = Arc::new((0..n).filter(|_| rng.random_bool(0.6)).collect::<Vec<_>>());
    out.push(check("loss_preg", &[rand_t(&mut rng, &[n], -2.0, 2.0)], tol, fault, None, &|t, v| {
        preg_on_tape(t, v[0], nocv.clone())
    })?);
    out.push(check(
        "loss_total_ws",
        &[rand_t(&mut rng, &[1], 0.0, 3.0), rand_t(&mut rng, &[1], 0.0, 3.0)],
        tol,
        fault,
        None,
        &|t, v| total_ws_on_tape(t, v[0], v[1], &w),
    )?);
    Ok(out)
}

/// Small network, model and images shared by the end-to-end checks.
struct Fixture {
    model: BodyModel,
    lbs: LbsConstants,
    net: BodyMapNet,
    input: NetInput,
    sensed: PressureImage,
}

fn fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let model = generate_toy_model(&ToyModelConfig {
        n_v: 200,
        seed: 3,
        gender: Gender::Male,
    })?;
    let lbs = LbsConstants::new(&model);
    let config = NetConfig {
        input_rows: 12,
        input_cols: 6,
        enc_channels: vec![4, 5],
        enc_strides: vec![2, 2],
        mesh_hidden: 8,
        vertex_hidden: 6,
        seed: rng.random(),
        ..NetConfig::default()
    };
    let mut norm = Normalization::identity();
    norm.psi_std.iter_mut().for_each(|s| *s = 0.2);
    norm.psi_mean[NUM_BETAS + NUM_THETA..NUM_BETAS + NUM_THETA + 3].copy_from_slice(&[0.3, 0.9, 0.1]);
    norm.pressure_scale_kpa = 2.0;
    let mut net = BodyMapNet::new(config.clone(), norm)?;
    // Zero-initialized layers would hide their upstream gradients.
    for t in &mut net.params.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let g = GridGeometry::new(12, 6, 0.15, [0.0, 0.0])?;
    let sensed = PressureImage::new(g, (0..72).map(|_| rng.random_range(0.0..3.0)).collect())?;
    let dg = GridGeometry::new(24, 12, 0.075, [0.0, 0.0])?;
    let depth = DepthImage::new(dg, (0..288).map(|_| rng.random_range(1.6..2.0)).collect())?;
    let input = net.prepare(&depth, &sensed, Gender::Male)?;
    Ok(Fixture {
        model,
        lbs,
        net,
        input,
        sensed,
    })
}

/// Randomizes every parameter coordinate and checks `limit` of them per
/// tensor.
const COMPOSITE_COORDS: usize = 3;

/// End-to-end checks of the supervised and weakly supervised objectives
/// with respect to network parameters. Vertex-to-pixel binning is held at
/// its value for the unperturbed parameters.
pub fn composite_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = fixture(&mut rng)?;
    let gt = fixture_params(&mut rng, Gender::Male);
    let gt_mesh = pose_mesh(&fx.model, &gt)?;
    let nv = fx.model.num_vertices();
    let gt_p: Vec<f64> = (0..nv).map(|_| rng.random_range(0.0..4.0)).collect();
    let gt_c: Vec<u8> = gt_p.iter().map(|p| u8::from(*p > 2.0)).collect();
    let stats = NormStats::from_array(std::array::from_fn(|_| rng.random_range(0.5..2.0)));
    let w = LossWeights::default();

    let reg = {
        let mut t = Tape::new();
        let p = fx.net.params.bind(&mut t, false);
        let o = fx.net.forward_tape(&mut t, &p, &fx.input, &fx.lbs)?;
        register_mesh(&fx.net.config, &fx.input.geometry, &points(t.value(o.vertices)))
    };
    let mut out = vec![check(
        "composite_supervised",
        &fx.net.params.tensors,
        COMPOSITE_TOLERANCE,
        fault,
        Some(COMPOSITE_COORDS),
        &|t, p| {
            let o = fx.net.forward_tape_with(t, p, &fx.input, &fx.lbs, Some(&reg))?;
            let a = smpl_on_tape(t, o.psi, o.joints, &gt, &gt_mesh.joints, &stats)?;
            let b = v2v_on_tape(t, o.vertices, &gt_mesh.vertices, &stats)?;
            let c = p3d_on_tape(t, o.pressure, &gt_p, &stats)?;
            let d = contact_on_tape(t, o.contact_prob, &gt_c, &stats)?;
            total_supervised_on_tape(t, [a, b, c, d], &w)
        },
    )?];

    let frozen = fx.net.frozen_features(&fx.input, &fx.lbs)?;
    let mut ws_norm = fx.net.norm.clone();
    ws_norm.pressure_scale_kpa = 1.5;
    let mut ws = WsNet::new(fx.net.config.clone(), ws_norm)?;
    for t in &mut ws.params.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mesh = PosedMesh::new(frozen.vertices.clone(), vec![], fx.model.faces.clone());
    let op = Arc::new(Reprojection::new(&mesh, &fx.sensed.geometry));
    let median_z = {
        let mut z: Vec<f64> = mesh.vertices.iter().map(|v| v[2]).collect();
        z.sort_by(f64::total_cmp);
        z[z.len() / 2]
    };
    let nocv = Arc::new(no_contact_vertices(&mesh, median_z));
    let g = fx.sensed.geometry;
    out.push(check(
        "composite_ws",
        &ws.params.tensors,
        COMPOSITE_TOLERANCE,
        fault,
        Some(COMPOSITE_COORDS),
        &|t, p| {
            let pv = ws.forward_tape(t, p, &frozen)?;
            let img = t.reproject(pv, op.clone())?;
            let img = t.reshape(img, &[g.rows, g.cols])?;
            let a = p2d_on_tape(t, img, &fx.sensed)?;
            let b = preg_on_tape(t, pv, nocv.clone())?;
            total_ws_on_tape(t, a, b, &w)
        },
    )?);
    Ok(out)
}

/// Every op, loss and end-to-end check.
pub fn full_suite(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut checks = op_suite(seed, fault)?;
    checks.extend(loss_suite(seed.wrapping_add(1), fault)?);
    checks.extend(composite_suite(seed.wrapping_add(2), fault)?);
    Ok(GradcheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OP_NAMES;

    #[test]
    fn every_op_passes() {
        let checks = op_suite(7, None).unwrap();
        for c in &checks {
            assert!(c.passed, "{} rel err {}", c.name, c.rel_err);
        }
        for name in OP_NAMES {
            assert!(checks.iter().any(|c| c.name == name), "{name} unchecked");
        }
    }

    #[test]
    fn corrupted_vjp_is_caught() {
        for op in ["relu", "conv2d", "rot6d", "matmul"] {
            let checks = op_suite(7, Some(op)).unwrap();
            let bad = checks.iter().find(|c| c.name == op).unwrap();
            assert!(!bad.passed, "{op} fault went unnoticed");
        }
    }

    #[test]
    fn every_loss_passes() {
        for c in loss_suite(11, None).unwrap() {
            assert!(c.passed, "{} rel err {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn composites_pass() {
        let checks = composite_suite(5, None).unwrap();
        assert_eq!(checks.len(), 2);
        for c in &checks {
            assert!(c.passed, "{} rel err {}", c.name, c.rel_err);
            assert!(c.checked > 20);
        }
    }

    #[test]
    fn composite_catches_faults() {
        let checks = composite_suite(5, Some("conv2d")).unwrap();
        assert!(!checks[0].passed);
        let checks = composite_suite(5, Some("reproject")).unwrap();
        assert!(!checks[1].passed);
    }

    #[test]
    fn relu_example() {
        let mut t = Tape::new();
        let x = t.var(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn identity_dense_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data[i * 4] = 1.0;
        }
        let w = t.constant(eye);
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.matmul(x, w).unwrap();
        let y = t.add_row(y, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.var(Tensor::zeros(&[2, 3]));
        let b = t.var(Tensor::zeros(&[2, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        let big = t.sum(a);
        let _ = big;
        assert!(t.backward(a).is_err());
    }
}
