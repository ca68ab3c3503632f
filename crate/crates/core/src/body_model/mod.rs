//! Parametric articulated body: model data, linear blend skinning, rest-pose
//! anatomical measurements and one/two-ring vertex neighborhoods.
//!
//! Conventions: in the rest pose +Y is vertical (feet at the bottom) and +Z
//! points out of the face. Posed meshes live in the bed frame, where the
//! mattress is the Z = 0 plane and +Z points towards the ceiling.

mod bank;
mod io;
mod neighbors;
mod toy;

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub use bank::ModelBank;
pub use neighbors::{build_neighbor_table, NeighborTable};
pub use toy::{generate_toy_model, ToyModelConfig};

/// Joint count of the SMPL kinematic tree.
pub const NUM_JOINTS: usize = 24;
/// Shape coefficients.
pub const NUM_BETAS: usize = 10;
/// Axis-angle pose parameters for every non-root joint.
pub const NUM_THETA: usize = 3 * (NUM_JOINTS - 1);

/// Names of the fourteen pressure-relevant body regions, in report order.
pub const PART_NAMES: [&str; 14] = [
    "left_heel",
    "right_heel",
    "left_toes",
    "right_toes",
    "left_elbow",
    "right_elbow",
    "left_shoulder",
    "right_shoulder",
    "left_hip",
    "right_hip",
    "spine",
    "head",
    "sacrum",
    "ischium",
];

/// Measurement loops required by [`anatomical_measurements`].
pub const RING_NAMES: [&str; 3] = ["chest", "waist", "hips"];

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Neutral,
}

impl Gender {
    /// One-hot (female, male) code; neutral maps to (0.5, 0.5).
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Gender::Female => [1.0, 0.0],
            Gender::Male => [0.0, 1.0],
            Gender::Neutral => [0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedIndices {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Per-axis sampling bounds (radians) for one joint's axis-angle triplet.
pub type JointLimits = [[f64; 2]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template_vertices: Vec<Vec3>,
    pub faces: Arc<Vec<[usize; 3]>>,
    /// Row-major `[N_v][3][N_beta]`.
    pub shape_basis: Vec<f64>,
    pub n_betas: usize,
    /// Row-major `[N_j][N_v]`.
    pub joint_regressor: Vec<f64>,
    /// Row-major `[N_v][N_j]`.
    pub skin_weights: Vec<f64>,
    /// `None` marks the root.
    pub kinematic_parents: Vec<Option<usize>>,
    pub part_masks: Vec<NamedIndices>,
    pub measurement_rings: Vec<NamedIndices>,
    pub joint_limits: Vec<JointLimits>,
    pub gender: Gender,
}

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.kinematic_parents.len()
    }

    pub fn ring(&self, name: &str) -> Result<&[usize]> {
        self.measurement_rings
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.indices.as_slice())
            .ok_or_else(|| Error::MissingRing(name.to_string()))
    }

    pub fn part(&self, name: &str) -> Option<&[usize]> {
        self.part_masks
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.indices.as_slice())
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let nv = self.num_vertices();
        let nj = self.num_joints();
        check_len("shape_basis", nv * 3 * self.n_betas, self.shape_basis.len())?;
        check_len("joint_regressor", nj * nv, self.joint_regressor.len())?;
        check_len("skin_weights", nv * nj, self.skin_weights.len())?;
        check_len("joint_limits", nj, self.joint_limits.len())?;
        for f in self.faces.iter() {
            for &i in f {
                if i >= nv {
                    return Err(Error::IndexOutOfRange {
                        what: "faces",
                        index: i,
                        limit: nv,
                    });
                }
            }
        }
        for v in 0..nv {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::ConfigInvalid(format!(
                    "skin weights of vertex {v} are not a partition of unity"
                )));
            }
        }
        for j in 0..nj {
            let s: f64 = self.joint_regressor[j * nv..(j + 1) * nv].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::ConfigInvalid(format!(
                    "joint regressor row {j} sums to {s}"
                )));
            }
        }
        for (j, p) in self.kinematic_parents.iter().enumerate() {
            match (j, p) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::ConfigInvalid("joint 0 must be the root".into()))
                }
                (_, Some(p)) if *p < j => {}
                _ => {
                    return Err(Error::ConfigInvalid(format!(
                        "joint {j} has invalid parent {p:?}"
                    )))
                }
            }
        }
        let mut owner = vec![usize::MAX; nv];
        for (m, mask) in self.part_masks.iter().enumerate() {
            for &i in &mask.indices {
                if i >= nv {
                    return Err(Error::IndexOutOfRange {
                        what: "part mask",
                        index: i,
                        limit: nv,
                    });
                }
                if owner[i] != usize::MAX {
                    return Err(Error::ConfigInvalid(format!(
                        "vertex {i} belongs to parts `{}` and `{}`",
                        self.part_masks[owner[i]].name, mask.name
                    )));
                }
                owner[i] = m;
            }
        }
        for ring in &self.measurement_rings {
            if let Some(&i) = ring.indices.iter().find(|&&i| i >= nv) {
                return Err(Error::IndexOutOfRange {
                    what: "measurement ring",
                    index: i,
                    limit: nv,
                });
            }
        }
        Ok(())
    }

    /// Template plus the shape blend for `beta`.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        check_len("beta", self.n_betas, beta.len())?;
        let nb = self.n_betas;
        Ok(self
            .template_vertices
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut p = *t;
                for (a, pa) in p.iter_mut().enumerate() {
                    let row = &self.shape_basis[(v * 3 + a) * nb..(v * 3 + a + 1) * nb];
                    *pa += row.iter().zip(beta).map(|(b, x)| b * x).sum::<f64>();
                }
                p
            })
            .collect())
    }

    pub fn regress_joints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        let nv = self.num_vertices();
        (0..self.num_joints())
            .map(|j| {
                let row = &self.joint_regressor[j * nv..(j + 1) * nv];
                let mut out = [0.0; 3];
                for (w, p) in row.iter().zip(vertices) {
                    if *w != 0.0 {
                        for a in 0..3 {
                            out[a] += w * p[a];
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// Body parameters: shape, per-joint axis-angle pose, root translation and
/// the root rotation as two (not necessarily unit) 3-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub root_trans: Vec3,
    pub root_rot_x: Vec3,
    pub root_rot_y: Vec3,
    pub gender: Gender,
}

impl BodyParams {
    /// Zero shape and pose, identity root.
    pub fn neutral(gender: Gender) -> Self {
        BodyParams {
            beta: vec![0.0; NUM_BETAS],
            theta: vec![0.0; NUM_THETA],
            root_trans: [0.0; 3],
            root_rot_x: [1.0, 0.0, 0.0],
            root_rot_y: [0.0, 1.0, 0.0],
            gender,
        }
    }

    pub fn with_root_rotation(mut self, r: &Matrix3<f64>) -> Self {
        self.root_rot_x = [r[(0, 0)], r[(1, 0)], r[(2, 0)]];
        self.root_rot_y = [r[(0, 1)], r[(1, 1)], r[(2, 1)]];
        self
    }

    /// Flat `[beta, theta, trans, x, y]` vector as produced by the mesh head.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + self.theta.len() + 9);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.root_trans);
        v.extend_from_slice(&self.root_rot_x);
        v.extend_from_slice(&self.root_rot_y);
        v
    }

    pub fn from_vector(v: &[f64], n_betas: usize, n_theta: usize, gender: Gender) -> Result<Self> {
        check_len("parameter vector", n_betas + n_theta + 9, v.len())?;
        let tail = &v[n_betas + n_theta..];
        Ok(BodyParams {
            beta: v[..n_betas].to_vec(),
            theta: v[n_betas..n_betas + n_theta].to_vec(),
            root_trans: [tail[0], tail[1], tail[2]],
            root_rot_x: [tail[3], tail[4], tail[5]],
            root_rot_y: [tail[6], tail[7], tail[8]],
            gender,
        })
    }

    pub fn validate(&self) -> Result<()> {
        rot6d_to_matrix(self.root_rot_x, self.root_rot_y).map(|_| ())
    }
}

/// Posed (or rest) mesh with its joint locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
    pub faces: Arc<Vec<[usize; 3]>>,
}

impl PosedMesh {
    pub fn new(vertices: Vec<Vec3>, joints: Vec<Vec3>, faces: Arc<Vec<[usize; 3]>>) -> Self {
        PosedMesh {
            vertices,
            joints,
            faces,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn min_z(&self) -> f64 {
        self.vertices.iter().map(|v| v[2]).fold(f64::INFINITY, f64::min)
    }

    /// Applies `p -> r p + t` to every vertex and joint.
    pub fn transformed(&self, r: &Matrix3<f64>, t: Vec3) -> Self {
        let f = |p: &Vec3| {
            let q = r * Vector3::from(*p) + Vector3::from(t);
            [q.x, q.y, q.z]
        };
        PosedMesh {
            vertices: self.vertices.iter().map(f).collect(),
            joints: self.joints.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Gram-Schmidt map from two 3-vectors to a rotation matrix whose first two
/// columns span the same oriented plane.
pub fn rot6d_to_matrix(x: Vec3, y: Vec3) -> Result<Matrix3<f64>> {
    let x = Vector3::from(x);
    let y = Vector3::from(y);
    let (nx, ny) = (x.norm(), y.norm());
    if !(nx > 1e-6 && ny > 1e-6) {
        return Err(Error::DegenerateRotation("rotation vector norm below 1e-6"));
    }
    let c1 = x / nx;
    let u = y - c1 * c1.dot(&y);
    if u.norm() <= 1e-6 * ny {
        return Err(Error::DegenerateRotation("rotation vectors are parallel"));
    }
    let c2 = u.normalize();
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Rodrigues' formula for an axis-angle vector.
pub fn axis_angle_to_matrix(w: Vec3) -> Matrix3<f64> {
    let w = Vector3::from(w);
    let theta = w.norm();
    let k = w.cross_matrix();
    let (a, b) = if theta < 1e-6 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// World rigid transform (rotation, translation) of every joint, composed
/// down the kinematic tree from shaped rest joints.
pub(crate) fn joint_world_transforms(
    model: &BodyModel,
    rest_joints: &[Vec3],
    params: &BodyParams,
) -> Result<Vec<(Matrix3<f64>, Vector3<f64>)>> {
    let root = rot6d_to_matrix(params.root_rot_x, params.root_rot_y)?;
    let mut out: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(model.num_joints());
    for (j, parent) in model.kinematic_parents.iter().enumerate() {
        let jr = Vector3::from(rest_joints[j]);
        match parent {
            None => out.push((root, jr)),
            Some(p) => {
                let local = axis_angle_to_matrix([
                    params.theta[3 * (j - 1)],
                    params.theta[3 * (j - 1) + 1],
                    params.theta[3 * (j - 1) + 2],
                ]);
                let (pr, pt) = out[*p];
                let offset = jr - Vector3::from(rest_joints[*p]);
                out.push((pr * local, pr * offset + pt));
            }
        }
    }
    Ok(out)
}

/// Poses the model with linear blend skinning.
pub fn pose_mesh(model: &BodyModel, params: &BodyParams) -> Result<PosedMesh> {
    check_len("beta", model.n_betas, params.beta.len())?;
    check_len("theta", 3 * (model.num_joints() - 1), params.theta.len())?;
    let shaped = model.shaped_vertices(&params.beta)?;
    let rest_joints = model.regress_joints(&shaped);
    let world = joint_world_transforms(model, &rest_joints, params)?;
    let trans = Vector3::from(params.root_trans);

    // Transforms relative to the rest pose: A_j = [R_j | t_j - R_j J_j].
    let rel: Vec<(Matrix3<f64>, Vector3<f64>)> = world
        .iter()
        .zip(&rest_joints)
        .map(|((r, t), jr)| (*r, t - r * Vector3::from(*jr)))
        .collect();

    let nj = model.num_joints();
    let vertices = shaped
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let weights = &model.skin_weights[v * nj..(v + 1) * nj];
            let mut r = Matrix3::zeros();
            let mut t = Vector3::zeros();
            for (w, (rj, tj)) in weights.iter().zip(&rel) {
                if *w != 0.0 {
                    r += rj * *w;
                    t += tj * *w;
                }
            }
            let q = r * Vector3::from(*p) + t + trans;
            [q.x, q.y, q.z]
        })
        .collect();
    let joints = world
        .iter()
        .map(|(_, t)| {
            let q = t + trans;
            [q.x, q.y, q.z]
        })
        .collect();
    Ok(PosedMesh::new(vertices, joints, model.faces.clone()))
}

/// Mesh for `beta` in the zero pose with identity root and no translation.
pub fn rest_pose_mesh(model: &BodyModel, beta: &[f64]) -> Result<PosedMesh> {
    check_len("beta", model.n_betas, beta.len())?;
    let params = BodyParams {
        beta: beta.to_vec(),
        theta: vec![0.0; 3 * (model.num_joints() - 1)],
        ..BodyParams::neutral(model.gender)
    };
    pose_mesh(model, &params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub height_m: f64,
    pub chest_m: f64,
    pub waist_m: f64,
    pub hips_m: f64,
}

/// Closed polyline length through `ring` in order.
pub fn ring_perimeter(vertices: &[Vec3], ring: &[usize]) -> f64 {
    if ring.len() < 2 {
        return 0.0;
    }
    (0..ring.len())
        .map(|i| {
            let a = vertices[ring[i]];
            let b = vertices[ring[(i + 1) % ring.len()]];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum()
}

/// Height along the rest-pose vertical axis and the three ring perimeters.
/// Expects a rest-pose mesh.
pub fn anatomical_measurements(mesh: &PosedMesh, model: &BodyModel) -> Result<Measurements> {
    let (lo, hi) = mesh
        .vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v[1]), hi.max(v[1]))
        });
    let height_m = if mesh.vertices.is_empty() { 0.0 } else { hi - lo };
    Ok(Measurements {
        height_m,
        chest_m: ring_perimeter(&mesh.vertices, model.ring("chest")?),
        waist_m: ring_perimeter(&mesh.vertices, model.ring("waist")?),
        hips_m: ring_perimeter(&mesh.vertices, model.ring("hips")?),
    })
}

/// SMPL kinematic tree (24 joints).
pub const SMPL_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];
