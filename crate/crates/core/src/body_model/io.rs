//! Model directory: `header.json` plus one PMT1 file per float tensor.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BodyModel, Gender, JointLimits, NamedIndices};
use crate::error::{check_len, Error, Result};
use crate::pmt::PmtTensor;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    gender_tag: Gender,
    num_vertices: usize,
    num_joints: usize,
    n_betas: usize,
    /// -1 marks the root.
    kinematic_parents: Vec<i64>,
    faces: Vec<[usize; 3]>,
    part_masks: Vec<NamedIndices>,
    measurement_rings: Vec<NamedIndices>,
    joint_limits: Vec<JointLimits>,
    vertical_axis: String,
    mattress_normal: String,
}

const TENSORS: [&str; 4] = ["template_vertices", "shape_basis", "joint_regressor", "skin_weights"];

impl BodyModel {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nv = self.num_vertices();
        let nj = self.num_joints();
        let header = ModelHeader {
            format: "pressmap-body-model/1".into(),
            gender_tag: self.gender,
            num_vertices: nv,
            num_joints: nj,
            n_betas: self.n_betas,
            kinematic_parents: self
                .kinematic_parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            faces: self.faces.as_ref().clone(),
            part_masks: self.part_masks.clone(),
            measurement_rings: self.measurement_rings.clone(),
            joint_limits: self.joint_limits.clone(),
            vertical_axis: "+y".into(),
            mattress_normal: "+z".into(),
        };
        let path = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let flat: Vec<f64> = self.template_vertices.iter().flatten().copied().collect();
        let tensors = [
            PmtTensor::f64(&[nv, 3], flat)?,
            PmtTensor::f64(&[nv, 3, self.n_betas], self.shape_basis.clone())?,
            PmtTensor::f64(&[nj, nv], self.joint_regressor.clone())?,
            PmtTensor::f64(&[nv, nj], self.skin_weights.clone())?,
        ];
        for (name, t) in TENSORS.iter().zip(tensors) {
            t.save(dir.join(format!("{name}.pmt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("header.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: ModelHeader = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let load = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let t = PmtTensor::load(dir.join(format!("{name}.pmt")))?;
            if t.shape() != dims {
                return Err(Error::Format(format!(
                    "{name}: expected dims {dims:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(t.to_f64())
        };
        let (nv, nj, nb) = (h.num_vertices, h.num_joints, h.n_betas);
        check_len("kinematic_parents", nj, h.kinematic_parents.len())?;
        let template = load("template_vertices", &[nv, 3])?;
        let model = BodyModel {
            template_vertices: template.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            faces: Arc::new(h.faces),
            shape_basis: load("shape_basis", &[nv, 3, nb])?,
            n_betas: nb,
            joint_regressor: load("joint_regressor", &[nj, nv])?,
            skin_weights: load("skin_weights", &[nv, nj])?,
            kinematic_parents: h
                .kinematic_parents
                .iter()
                .map(|&p| usize::try_from(p).ok())
                .collect(),
            part_masks: h.part_masks,
            measurement_rings: h.measurement_rings,
            joint_limits: h.joint_limits,
            gender: h.gender_tag,
        };
        model.validate()?;
        Ok(model)
    }
}
