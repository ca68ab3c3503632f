//! Synthetic in-bed scenes: posed bodies lying on a mattress, seen by an
//! overhead depth camera and a pressure mat.

mod dataset;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{generate, make_dataset, Dataset, DatasetView, GroupSpec, Manifest, ManifestEntry, SynthConfig};

use crate::body_model::{pose_mesh, BodyModel, BodyParams, PosedMesh, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::projection::{contact_from_pressure, project_gt, DepthImage, GridGeometry, PressureImage};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseCategory {
    Supine,
    LeftLateral,
    RightLateral,
}

impl PoseCategory {
    pub const ALL: [PoseCategory; 3] = [PoseCategory::Supine, PoseCategory::LeftLateral, PoseCategory::RightLateral];

    pub fn is_lateral(self) -> bool {
        self != PoseCategory::Supine
    }

    pub fn name(self) -> &'static str {
        match self {
            PoseCategory::Supine => "supine",
            PoseCategory::LeftLateral => "left_lateral",
            PoseCategory::RightLateral => "right_lateral",
        }
    }
}

impl fmt::Display for PoseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoseCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PoseCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown pose category `{s}`")))
    }
}

/// Blanket over the body, seen only by the depth camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cover {
    Uncovered,
    Cover1,
    Cover2,
}

impl Cover {
    pub const ALL: [Cover; 3] = [Cover::Uncovered, Cover::Cover1, Cover::Cover2];

    pub fn name(self) -> &'static str {
        match self {
            Cover::Uncovered => "uncovered",
            Cover::Cover1 => "cover1",
            Cover::Cover2 => "cover2",
        }
    }

    /// Blanket thickness in metres.
    pub fn thickness_m(self) -> f64 {
        match self {
            Cover::Uncovered => 0.0,
            Cover::Cover1 => 0.015,
            Cover::Cover2 => 0.04,
        }
    }

    /// How far the blanket drapes past the body, as a blur width in pixels.
    fn drape_px(self) -> f64 {
        match self {
            Cover::Uncovered => 0.0,
            Cover::Cover1 => 1.5,
            Cover::Cover2 => 3.0,
        }
    }
}

impl fmt::Display for Cover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cover {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Cover::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown cover `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Shape coefficients are uniform in `[-beta_range, beta_range]`.
    pub beta_range: f64,
    /// Fraction of each joint's limit range used when drawing angles.
    pub pose_scale: f64,
    pub supine_roll_jitter_deg: f64,
    pub lateral_roll_jitter_deg: f64,
    pub yaw_jitter_deg: f64,
    /// Random offset of the body centre from `center_xy`, per axis.
    pub center_jitter_m: f64,
    pub center_xy: [f64; 2],
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            beta_range: 1.5,
            pose_scale: 1.0,
            supine_roll_jitter_deg: 6.0,
            lateral_roll_jitter_deg: 10.0,
            yaw_jitter_deg: 4.0,
            center_jitter_m: 0.03,
            center_xy: [0.0, 0.0],
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.beta_range,
            self.pose_scale,
            self.supine_roll_jitter_deg,
            self.lateral_roll_jitter_deg,
            self.yaw_jitter_deg,
            self.center_jitter_m,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.pose_scale > 1.0 || self.supine_roll_jitter_deg > 15.0 {
            return Err(Error::ConfigInvalid("sampling ranges must be finite, nonnegative and within limits".into()));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Root rotation about the bed's long (y) axis for a category.
pub fn nominal_roll(category: PoseCategory) -> f64 {
    match category {
        PoseCategory::Supine => 0.0,
        PoseCategory::LeftLateral => std::f64::consts::FRAC_PI_2,
        PoseCategory::RightLateral => -std::f64::consts::FRAC_PI_2,
    }
}

/// Draws parameters for `category` and places the body so its lowest vertex
/// rests on the mattress and its footprint is centred near `center_xy`.
pub fn sample_params(
    rng: &mut impl Rng,
    category: PoseCategory,
    cfg: &SamplingConfig,
    model: &BodyModel,
) -> Result<BodyParams> {
    let mut p = BodyParams::neutral(model.gender);
    p.beta = (0..model.n_betas).map(|_| symmetric(rng, cfg.beta_range)).collect();
    for j in 1..NUM_JOINTS.min(model.joint_limits.len()) {
        for a in 0..3 {
            let [lo, hi] = model.joint_limits[j][a];
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * cfg.pose_scale;
            p.theta[3 * (j - 1) + a] = mid + symmetric(rng, half);
        }
    }
    let jitter = if category.is_lateral() {
        cfg.lateral_roll_jitter_deg
    } else {
        cfg.supine_roll_jitter_deg
    };
    let roll = nominal_roll(category) + symmetric(rng, jitter).to_radians();
    let yaw = symmetric(rng, cfg.yaw_jitter_deg).to_radians();
    let r: Matrix3<f64> = (Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), roll))
    .into_inner();
    p = p.with_root_rotation(&r);

    let mesh = pose_mesh(model, &p)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let cx = cfg.center_xy[0] + symmetric(rng, cfg.center_jitter_m);
    let cy = cfg.center_xy[1] + symmetric(rng, cfg.center_jitter_m);
    p.root_trans = [cx - 0.5 * (lo[0] + hi[0]), cy - 0.5 * (lo[1] + hi[1]), -lo[2]];
    Ok(p)
}

/// Highest surface point above each pixel centre, or 0 (the mattress) where
/// no triangle covers it.
pub fn surface_heights(mesh: &PosedMesh, geom: &GridGeometry) -> Vec<f64> {
    let mut h = vec![0.0f64; geom.num_cells()];
    let (ox, oy, pitch) = (geom.origin_xy_m[0], geom.origin_xy_m[1], geom.pitch_m);
    for f in mesh.faces.iter() {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area2.abs() < 1e-15 {
            continue;
        }
        let (minx, maxx) = (a[0].min(b[0]).min(c[0]), a[0].max(b[0]).max(c[0]));
        let (miny, maxy) = (a[1].min(b[1]).min(c[1]), a[1].max(b[1]).max(c[1]));
        let span = |lo: f64, hi: f64, o: f64, n: usize| -> Option<(usize, usize)> {
            let first = ((lo - o) / pitch - 0.5).ceil().max(0.0);
            let last = ((hi - o) / pitch - 0.5).floor().min(n as f64 - 1.0);
            (first <= last).then_some((first as usize, last as usize))
        };
        let (Some((c0, c1)), Some((r0, r1))) = (span(minx, maxx, ox, geom.cols), span(miny, maxy, oy, geom.rows)) else {
            continue;
        };
        for r in r0..=r1 {
            for col in c0..=c1 {
                let [px, py] = geom.cell_center(r, col);
                let w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area2;
                let w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area2;
                let w2 = 1.0 - w0 - w1;
                if w0 < -1e-12 || w1 < -1e-12 || w2 < -1e-12 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let k = r * geom.cols + col;
                h[k] = h[k].max(z);
            }
        }
    }
    h
}

fn gaussian_blur(src: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - rad;
                    let (rr, cc) = if along_rows { (r + d, c) } else { (r, c + d) };
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        acc += w * src[rr as usize * cols + cc as usize];
                    }
                }
                out[r as usize * cols + c as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, false), true)
}

/// Heights of the blanket surface: the body heights smoothed outward and
/// lifted by the blanket thickness where it drapes over the body.
pub fn cover_heights(body: &[f64], geom: &GridGeometry, cover: Cover) -> Vec<f64> {
    if cover == Cover::Uncovered {
        return body.to_vec();
    }
    let sigma = cover.drape_px();
    let smooth = gaussian_blur(body, geom.rows, geom.cols, sigma);
    let mask: Vec<f64> = body.iter().map(|h| if *h > 0.0 { 1.0 } else { 0.0 }).collect();
    let drape = gaussian_blur(&mask, geom.rows, geom.cols, sigma);
    body.iter()
        .zip(smooth.iter().zip(&drape))
        .map(|(h, (s, m))| h.max(*s) + cover.thickness_m() * m.min(1.0))
        .collect()
}

/// Orthographic top-down depth: camera height minus the visible surface
/// height, clamped to `[0, camera_height]`.
pub fn render_depth(mesh: &PosedMesh, geom: &GridGeometry, cover: Cover, camera_height_m: f64) -> Result<DepthImage> {
    geom.validate()?;
    if !(camera_height_m > 0.0 && camera_height_m.is_finite()) {
        return Err(Error::ConfigInvalid(format!("camera height {camera_height_m}")));
    }
    let h = cover_heights(&surface_heights(mesh, geom), geom, cover);
    DepthImage::new(*geom, h.into_iter().map(|z| (camera_height_m - z).clamp(0.0, camera_height_m)).collect())
}

/// One third of the summed area of each vertex's incident triangles.
pub fn vertex_areas(mesh: &PosedMesh) -> Vec<f64> {
    let mut a = vec![0.0; mesh.num_vertices()];
    for f in mesh.faces.iter() {
        let [p, q, r] = f.map(|i| Vector3::from(mesh.vertices[i]));
        let area = 0.5 * (q - p).cross(&(r - p)).norm();
        for &i in f {
            a[i] += area / 3.0;
        }
    }
    a
}

/// Static weight of vertex `v` among the contact set, in newtons.
pub fn contact_forces(mesh: &PosedMesh, body_mass_kg: f64, z_eps: f64) -> Result<Vec<(usize, f64)>> {
    if !(body_mass_kg > 0.0 && body_mass_kg.is_finite()) {
        return Err(Error::ConfigInvalid(format!("body mass must be positive, got {body_mass_kg}")));
    }
    let contact: Vec<usize> = (0..mesh.num_vertices()).filter(|&i| mesh.vertices[i][2] <= z_eps).collect();
    if contact.is_empty() {
        return Err(Error::NoContact);
    }
    let areas = vertex_areas(mesh);
    let total: f64 = contact.iter().map(|&i| areas[i]).sum();
    let weight = body_mass_kg * GRAVITY;
    Ok(contact
        .iter()
        .map(|&i| {
            let share = if total > 0.0 { areas[i] / total } else { 1.0 / contact.len() as f64 };
            (i, weight * share)
        })
        .collect())
}

/// Pressure image (kPa) from area-weighted shares of the body weight carried
/// by the vertices within `z_eps` of the mattress.
pub fn simulate_pressure(mesh: &PosedMesh, geom: &GridGeometry, body_mass_kg: f64, z_eps: f64) -> Result<PressureImage> {
    geom.validate()?;
    let forces = contact_forces(mesh, body_mass_kg, z_eps)?;
    let mut force = vec![0.0; geom.num_cells()];
    for (i, f) in forces {
        let v = mesh.vertices[i];
        if let Some((r, c)) = geom.cell_of(v[0], v[1]) {
            force[r * geom.cols + c] += f;
        }
    }
    let area = geom.cell_area_m2();
    PressureImage::new(*geom, force.into_iter().map(|f| f / area / 1000.0).collect())
}

/// One synthetic scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub depth: DepthImage,
    pub pressure: PressureImage,
    pub gt_params: BodyParams,
    pub gt_mesh: PosedMesh,
    pub gt_vpm: Vec<f64>,
    pub gt_contact: Vec<u8>,
    pub pose_category: PoseCategory,
    pub cover: Cover,
    pub body_mass_kg: f64,
}

/// Camera, grids and contact tolerance shared by every scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub pressure: GridGeometry,
    pub depth: GridGeometry,
    pub camera_height_m: f64,
    pub z_eps: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        let pitch = 0.0286;
        SceneGeometry {
            pressure: GridGeometry::centered(64, 27, pitch, [0.0, 0.0]).expect("valid default grid"),
            depth: GridGeometry::centered(128, 54, pitch / 2.0, [0.0, 0.0]).expect("valid default grid"),
            camera_height_m: 2.0,
            z_eps: crate::projection::DEFAULT_Z_EPS,
        }
    }
}

pub fn render_scene(
    model: &BodyModel,
    params: BodyParams,
    pose_category: PoseCategory,
    cover: Cover,
    body_mass_kg: f64,
    geo: &SceneGeometry,
) -> Result<SceneSample> {
    let mesh = pose_mesh(model, &params)?;
    let depth = render_depth(&mesh, &geo.depth, cover, geo.camera_height_m)?;
    let pressure = simulate_pressure(&mesh, &geo.pressure, body_mass_kg, geo.z_eps)?;
    let gt_vpm = project_gt(&pressure, &mesh, geo.z_eps)?;
    let gt_contact = contact_from_pressure(&gt_vpm)?;
    Ok(SceneSample {
        depth,
        pressure,
        gt_params: params,
        gt_mesh: mesh,
        gt_vpm,
        gt_contact,
        pose_category,
        cover,
        body_mass_kg,
    })
}

/// Checks the ground-truth consistency of a scene.
pub fn validate_scene(s: &SceneSample, z_eps: f64) -> Result<()> {
    s.gt_params.validate()?;
    let vpm = project_gt(&s.pressure, &s.gt_mesh, z_eps)?;
    if vpm != s.gt_vpm {
        return Err(Error::Format("vertex pressure does not match the projected pressure image".into()));
    }
    if contact_from_pressure(&s.gt_vpm)? != s.gt_contact {
        return Err(Error::Format("contact labels do not match vertex pressure".into()));
    }
    if s.depth.values.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Format("depth values out of range".into()));
    }
    Ok(())
}
