//! Pose, shape and pressure evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::body_model::{anatomical_measurements, rest_pose_mesh, BodyModel, NamedIndices, Vec3};
use crate::error::{check_len, Error, Result};

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_dist_mm(what: &'static str, pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_len(what, gt.len(), pred.len())?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(1000.0 * pred.iter().zip(gt).map(|(a, b)| dist(a, b)).sum::<f64>() / gt.len() as f64)
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_dist_mm("joints", pred, gt)
}

/// Mean per-vertex position error in millimeters.
pub fn pve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_dist_mm("vertices", pred, gt)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeErrors {
    pub height: f64,
    pub chest: f64,
    pub waist: f64,
    pub hips: f64,
}

/// Absolute rest-pose measurement differences in centimeters.
pub fn shape_errors(pred_beta: &[f64], gt_beta: &[f64], model: &BodyModel) -> Result<ShapeErrors> {
    let p = anatomical_measurements(&rest_pose_mesh(model, pred_beta)?, model)?;
    let g = anatomical_measurements(&rest_pose_mesh(model, gt_beta)?, model)?;
    Ok(ShapeErrors {
        height: 100.0 * (p.height_m - g.height_m).abs(),
        chest: 100.0 * (p.chest_m - g.chest_m).abs(),
        waist: 100.0 * (p.waist_m - g.waist_m).abs(),
        hips: 100.0 * (p.hips_m - g.hips_m).abs(),
    })
}

/// Mean squared per-vertex pressure error in kPa^2.
pub fn v2vp(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len("vertex pressure", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gt.len() as f64)
}

/// Average of each vertex with its listed neighbors.
pub fn smooth_kring(pressure: &[f64], neighbors: &[Vec<usize>]) -> Result<Vec<f64>> {
    check_len("neighbor table", pressure.len(), neighbors.len())?;
    neighbors
        .iter()
        .enumerate()
        .map(|(v, nb)| {
            let mut s = pressure[v];
            for &n in nb {
                s += *pressure.get(n).ok_or(Error::IndexOutOfRange {
                    what: "neighbor",
                    index: n,
                    limit: pressure.len(),
                })?;
            }
            Ok(s / (nb.len() + 1) as f64)
        })
        .collect()
}

pub fn v2vp_smoothed(pred: &[f64], gt: &[f64], neighbors: &[Vec<usize>]) -> Result<f64> {
    check_len("vertex pressure", gt.len(), pred.len())?;
    v2vp(&smooth_kring(pred, neighbors)?, &smooth_kring(gt, neighbors)?)
}

/// v2vP restricted to each named vertex set.
pub fn per_part_v2vp(pred: &[f64], gt: &[f64], parts: &[NamedIndices]) -> Result<BTreeMap<String, f64>> {
    check_len("vertex pressure", gt.len(), pred.len())?;
    let mut out = BTreeMap::new();
    for part in parts {
        if part.indices.is_empty() {
            return Err(Error::EmptyMask(part.name.clone()));
        }
        let mut s = 0.0;
        for &i in &part.indices {
            if i >= gt.len() {
                return Err(Error::IndexOutOfRange {
                    what: "part mask",
                    index: i,
                    limit: gt.len(),
                });
            }
            s += (pred[i] - gt[i]).powi(2);
        }
        out.insert(part.name.clone(), s / part.indices.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub pve_mm: f64,
    pub shape_err_cm: ShapeErrors,
    pub v2vp: f64,
    pub v2vp_1ea: f64,
    pub v2vp_2ea: f64,
    pub per_part_v2vp: BTreeMap<String, f64>,
}

impl MetricReport {
    /// Unweighted mean over per-sample reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = reports.len() as f64;
        let mut out = MetricReport::default();
        for r in reports {
            out.mpjpe_mm += r.mpjpe_mm / n;
            out.pve_mm += r.pve_mm / n;
            out.shape_err_cm.height += r.shape_err_cm.height / n;
            out.shape_err_cm.chest += r.shape_err_cm.chest / n;
            out.shape_err_cm.waist += r.shape_err_cm.waist / n;
            out.shape_err_cm.hips += r.shape_err_cm.hips / n;
            out.v2vp += r.v2vp / n;
            out.v2vp_1ea += r.v2vp_1ea / n;
            out.v2vp_2ea += r.v2vp_2ea / n;
            for (k, v) in &r.per_part_v2vp {
                *out.per_part_v2vp.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        Ok(out)
    }
}

/// Mean metrics of one group of samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean: MetricReport,
}

/// Overall and per-group means; groups are keyed by label in sorted order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupedReport {
    pub overall: GroupSummary,
    pub groups: BTreeMap<String, GroupSummary>,
}

/// Splits per-sample reports by `labels[i]` and averages each group.
pub fn group_reports<S: AsRef<str>>(reports: &[MetricReport], labels: &[S]) -> Result<GroupedReport> {
    if labels.len() != reports.len() {
        return Err(Error::DimensionMismatch {
            what: "group labels",
            expected: reports.len(),
            got: labels.len(),
        });
    }
    let mut split: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
    for (r, l) in reports.iter().zip(labels) {
        split.entry(l.as_ref().to_string()).or_default().push(r.clone());
    }
    let groups = split
        .into_iter()
        .map(|(k, rs)| {
            Ok((
                k,
                GroupSummary {
                    count: rs.len(),
                    mean: MetricReport::mean(&rs)?,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(GroupedReport {
        overall: GroupSummary {
            count: reports.len(),
            mean: MetricReport::mean(reports)?,
        },
        groups,
    })
}

/// What a model predicted for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub beta: &'a [f64],
    pub joints: &'a [Vec3],
    pub vertices: &'a [Vec3],
    pub pressure: &'a [f64],
}

pub fn evaluate_sample(
    pred: SampleView<'_>,
    gt: SampleView<'_>,
    model: &BodyModel,
    neighbors: &crate::body_model::NeighborTable,
) -> Result<MetricReport> {
    Ok(MetricReport {
        mpjpe_mm: mpjpe(pred.joints, gt.joints)?,
        pve_mm: pve(pred.vertices, gt.vertices)?,
        shape_err_cm: shape_errors(pred.beta, gt.beta, model)?,
        v2vp: v2vp(pred.pressure, gt.pressure)?,
        v2vp_1ea: v2vp_smoothed(pred.pressure, gt.pressure, &neighbors.ring1)?,
        v2vp_2ea: v2vp_smoothed(pred.pressure, gt.pressure, &neighbors.ring2)?,
        per_part_v2vp: per_part_v2vp(pred.pressure, gt.pressure, &model.part_masks)?,
    })
}
