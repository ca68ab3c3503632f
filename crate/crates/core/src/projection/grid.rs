use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmt::PmtTensor;

/// Regular image grid laid over the bed plane. Row index runs along +y,
/// column index along +x; `origin_xy_m` is the outer corner of cell (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub pitch_m: f64,
    pub origin_xy_m: [f64; 2],
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize, pitch_m: f64, origin_xy_m: [f64; 2]) -> Result<Self> {
        let g = GridGeometry {
            rows,
            cols,
            pitch_m,
            origin_xy_m,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::ConfigInvalid(format!(
                "grid must have positive size, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.pitch_m > 0.0 && self.pitch_m.is_finite()) {
            return Err(Error::ConfigInvalid(format!("grid pitch must be positive, got {}", self.pitch_m)));
        }
        if !self.origin_xy_m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_area_m2(&self) -> f64 {
        self.pitch_m * self.pitch_m
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.pitch_m
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.pitch_m
    }

    /// Half-open binning; `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_xy_m[0]) / self.pitch_m).floor();
        let r = ((y - self.origin_xy_m[1]) / self.pitch_m).floor();
        if r >= 0.0 && c >= 0.0 && r < self.rows as f64 && c < self.cols as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    /// Same binning as [`cell_of`](Self::cell_of), clamped onto the border.
    pub fn cell_clamped(&self, x: f64, y: f64) -> (usize, usize) {
        let clamp = |v: f64, n: usize| {
            if v.is_nan() || v < 0.0 {
                0
            } else {
                (v as usize).min(n - 1)
            }
        };
        let c = ((x - self.origin_xy_m[0]) / self.pitch_m).floor();
        let r = ((y - self.origin_xy_m[1]) / self.pitch_m).floor();
        (clamp(r, self.rows), clamp(c, self.cols))
    }

    /// Centre of cell `(r, c)` in bed coordinates.
    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin_xy_m[0] + (c as f64 + 0.5) * self.pitch_m,
            self.origin_xy_m[1] + (r as f64 + 0.5) * self.pitch_m,
        ]
    }

    /// Grid of `rows x cols` cells centred on `center_xy`.
    pub fn centered(rows: usize, cols: usize, pitch_m: f64, center_xy: [f64; 2]) -> Result<Self> {
        GridGeometry::new(
            rows,
            cols,
            pitch_m,
            [
                center_xy[0] - 0.5 * cols as f64 * pitch_m,
                center_xy[1] - 0.5 * rows as f64 * pitch_m,
            ],
        )
    }
}

/// Pressure mat reading in kPa, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureImage {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
}

impl PressureImage {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.num_cells() {
            return Err(Error::GeometryMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::ConfigInvalid(format!("pressure taxel {i} is {v}")));
        }
        Ok(PressureImage { geometry, values })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        PressureImage {
            values: vec![0.0; geometry.num_cells()],
            geometry,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.geometry.cols + c]
    }

    pub fn save(&self, pmt_path: impl AsRef<Path>) -> Result<()> {
        save_grid(pmt_path.as_ref(), &self.geometry, &self.values)
    }

    pub fn load(pmt_path: impl AsRef<Path>) -> Result<Self> {
        let (g, v) = load_grid(pmt_path.as_ref())?;
        PressureImage::new(g, v)
    }
}

/// Marks depth pixels without a camera return.
pub const NO_RETURN: f64 = -1.0;

/// Overhead depth image in meters from the camera plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.num_cells() {
            return Err(Error::GeometryMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.rows,
                geometry.cols
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("depth image"));
        }
        Ok(DepthImage { geometry, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.geometry.cols + c]
    }

    pub fn save(&self, pmt_path: impl AsRef<Path>) -> Result<()> {
        save_grid(pmt_path.as_ref(), &self.geometry, &self.values)
    }

    pub fn load(pmt_path: impl AsRef<Path>) -> Result<Self> {
        let (g, v) = load_grid(pmt_path.as_ref())?;
        DepthImage::new(g, v)
    }
}

/// Path of the JSON geometry file stored next to an image tensor.
pub fn sidecar_path(pmt_path: &Path) -> PathBuf {
    pmt_path.with_extension("json")
}

fn save_grid(path: &Path, g: &GridGeometry, values: &[f64]) -> Result<()> {
    PmtTensor::f64(&[g.rows, g.cols], values.to_vec())?.save(path)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(g).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn load_grid(path: &Path) -> Result<(GridGeometry, Vec<f64>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let g: GridGeometry = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    g.validate()?;
    let t = PmtTensor::load(path)?;
    if t.shape() != [g.rows, g.cols] {
        return Err(Error::GeometryMismatch(format!(
            "tensor shape {:?} vs sidecar {}x{}",
            t.shape(),
            g.rows,
            g.cols
        )));
    }
    Ok((g, t.to_f64()))
}
