//! Linear blend skinning recorded on the tape, so pose and shape parameters
//! receive gradients from vertex and joint losses.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::body_model::BodyModel;
use crate::error::{check_len, Result};

/// Model arrays laid out as tape-ready tensors.
#[derive(Debug, Clone)]
pub struct LbsConstants {
    template: Tensor,
    shape_basis: Tensor,
    regressor: Tensor,
    skin: Tensor,
    parents: Vec<Option<usize>>,
    n_betas: usize,
}

impl LbsConstants {
    pub fn new(model: &BodyModel) -> Self {
        let nv = model.num_vertices();
        let nj = model.num_joints();
        LbsConstants {
            template: Tensor::from_rows(&model.template_vertices),
            shape_basis: Tensor {
                shape: vec![nv * 3, model.n_betas],
                data: model.shape_basis.clone(),
            },
            regressor: Tensor {
                shape: vec![nj, nv],
                data: model.joint_regressor.clone(),
            },
            skin: Tensor {
                shape: vec![nv, nj],
                data: model.skin_weights.clone(),
            },
            parents: model.kinematic_parents.clone(),
            n_betas: model.n_betas,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.template.shape[0]
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn psi_len(&self) -> usize {
        self.n_betas + 3 * (self.num_joints() - 1) + 9
    }
}

/// Poses the model from a flat `[beta, theta, trans, x, y]` vector. Returns
/// vertices `[N_v, 3]` and joints `[N_j, 3]`.
pub fn pose_on_tape(tape: &mut Tape, c: &LbsConstants, psi: Var) -> Result<(Var, Var)> {
    check_len("parameter vector", c.psi_len(), tape.value(psi).numel())?;
    let nv = c.num_vertices();
    let nj = c.num_joints();
    let nb = c.n_betas;
    let nt = 3 * (nj - 1);

    let beta = tape.slice(psi, 0, &[nb, 1])?;
    let trans = tape.slice(psi, nb + nt, &[3])?;
    let rot6 = tape.slice(psi, nb + nt + 3, &[6])?;

    let basis = tape.constant(c.shape_basis.clone());
    let template = tape.constant(c.template.clone());
    let blend = tape.matmul(basis, beta)?;
    let blend = tape.reshape(blend, &[nv, 3])?;
    let shaped = tape.add(template, blend)?;
    let regressor = tape.constant(c.regressor.clone());
    let rest_joints = tape.matmul(regressor, shaped)?;
    let jcol: Vec<Var> = (0..nj)
        .map(|j| tape.slice(rest_joints, j * 3, &[3, 1]))
        .collect::<Result<_>>()?;

    let mut world: Vec<(Var, Var)> = Vec::with_capacity(nj);
    for j in 0..nj {
        let entry = match c.parents[j] {
            None => (tape.rot6d(rot6)?, jcol[j]),
            Some(p) => {
                let w = tape.slice(psi, nb + 3 * (j - 1), &[3])?;
                let local = tape.rodrigues(w)?;
                let (pr, pt) = world[p];
                let r = tape.matmul(pr, local)?;
                let off = tape.sub(jcol[j], jcol[p])?;
                let off = tape.matmul(pr, off)?;
                (r, tape.add(off, pt)?)
            }
        };
        world.push(entry);
    }

    // Per-joint [R | t - R J] flattened to one row of 12.
    let mut rows = Vec::with_capacity(nj);
    let mut joint_rows = Vec::with_capacity(nj);
    for (j, &(r, t)) in world.iter().enumerate() {
        let rj = tape.matmul(r, jcol[j])?;
        let tcol = tape.sub(t, rj)?;
        let a = tape.concat_cols(&[r, tcol])?;
        rows.push(tape.reshape(a, &[1, 12])?);
        joint_rows.push(tape.reshape(t, &[1, 3])?);
    }
    let a = tape.concat_rows(&rows)?;
    let skin = tape.constant(c.skin.clone());
    let blended = tape.matmul(skin, a)?;
    let verts = tape.affine_apply(blended, shaped)?;
    let verts = tape.add_row(verts, trans)?;
    let joints = tape.concat_rows(&joint_rows)?;
    let joints = tape.add_row(joints, trans)?;
    Ok((verts, joints))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::body_model::{generate_toy_model, pose_mesh, BodyParams, ToyModelConfig};

    #[test]
    fn tape_skinning_matches_reference_posing() {
        let model = generate_toy_model(&ToyModelConfig::default()).unwrap();
        let c = LbsConstants::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..4 {
            let mut p = BodyParams::neutral(model.gender);
            p.beta = (0..model.n_betas).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Include tiny angles to exercise the series branch.
            let amp = if k == 0 { 1e-8 } else { 0.6 };
            p.theta = (0..p.theta.len()).map(|_| rng.random_range(-amp..amp)).collect();
            p.root_trans = [0.1, -0.2, 0.3];
            p.root_rot_x = [0.9, 0.2, -0.1];
            p.root_rot_y = [0.1, 1.1, 0.3];
            let reference = pose_mesh(&model, &p).unwrap();
            let mut tape = Tape::new();
            let psi = tape.constant(Tensor::vector(p.to_vector()));
            let (v, j) = pose_on_tape(&mut tape, &c, psi).unwrap();
            let (tv, tj) = (tape.value(v), tape.value(j));
            for (i, q) in reference.vertices.iter().enumerate() {
                for a in 0..3 {
                    assert!((tv.data[i * 3 + a] - q[a]).abs() < 1e-12);
                }
            }
            for (i, q) in reference.joints.iter().enumerate() {
                for a in 0..3 {
                    assert!((tj.data[i * 3 + a] - q[a]).abs() < 1e-12);
                }
            }
        }
    }
}
