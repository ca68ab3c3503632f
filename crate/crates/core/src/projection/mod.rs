//! Moving pressure between the mat image and the mesh vertices.

mod grid;

pub use grid::{sidecar_path, DepthImage, GridGeometry, PressureImage, NO_RETURN};

use crate::body_model::PosedMesh;
use crate::error::{Error, Result};

/// Default height below which a vertex counts as touching the mattress.
pub const DEFAULT_Z_EPS: f64 = 0.01;

pub fn taxel_of_point(xy: [f64; 2], geom: &GridGeometry) -> Option<(usize, usize)> {
    geom.cell_of(xy[0], xy[1])
}

/// Ground-truth vertex pressure: each vertex within `z_eps` of the mattress
/// inherits the kPa value of the taxel under it.
pub fn project_gt(img: &PressureImage, mesh: &PosedMesh, z_eps: f64) -> Result<Vec<f64>> {
    if !(z_eps >= 0.0) {
        return Err(Error::ConfigInvalid(format!("z_eps must be nonnegative, got {z_eps}")));
    }
    let g = &img.geometry;
    Ok(mesh
        .vertices
        .iter()
        .map(|v| match g.cell_of(v[0], v[1]) {
            Some((r, c)) if v[2] <= z_eps => img.values[r * g.cols + c],
            _ => 0.0,
        })
        .collect())
}

pub fn contact_from_pressure(pressure: &[f64]) -> Result<Vec<u8>> {
    pressure
        .iter()
        .enumerate()
        .map(|(vertex, &value)| {
            if value < 0.0 {
                Err(Error::NegativePressure { vertex, value })
            } else if value.is_nan() {
                Err(Error::NonFinite("vertex pressure"))
            } else {
                Ok(u8::from(value > 0.0))
            }
        })
        .collect()
}

/// Vertex-to-taxel averaging operator for a fixed mesh. Every vertex is
/// binned by its x, y position alone; a taxel's value is the mean over the
/// vertices binned to it (0 when none are).
#[derive(Debug, Clone)]
pub struct Reprojection {
    geometry: GridGeometry,
    bins: Vec<Option<usize>>,
    counts: Vec<usize>,
}

impl Reprojection {
    pub fn new(mesh: &PosedMesh, geometry: &GridGeometry) -> Self {
        let mut counts = vec![0usize; geometry.num_cells()];
        let bins = mesh
            .vertices
            .iter()
            .map(|v| {
                geometry.cell_of(v[0], v[1]).map(|(r, c)| {
                    let k = r * geometry.cols + c;
                    counts[k] += 1;
                    k
                })
            })
            .collect();
        Reprojection {
            geometry: *geometry,
            bins,
            counts,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn num_vertices(&self) -> usize {
        self.bins.len()
    }

    /// Flat taxel index of each vertex.
    pub fn bins(&self) -> &[Option<usize>] {
        &self.bins
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn forward(&self, pressure: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("vertex pressure", self.bins.len(), pressure.len())?;
        let mut sums = vec![0.0; self.counts.len()];
        for (b, p) in self.bins.iter().zip(pressure) {
            if let Some(k) = b {
                sums[*k] += p;
            }
        }
        for (s, &n) in sums.iter_mut().zip(&self.counts) {
            if n > 0 {
                *s /= n as f64;
            }
        }
        Ok(sums)
    }

    /// Adjoint of [`forward`](Self::forward).
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("taxel upstream", self.counts.len(), upstream.len())?;
        Ok(self
            .bins
            .iter()
            .map(|b| match b {
                Some(k) => upstream[*k] / self.counts[*k] as f64,
                None => 0.0,
            })
            .collect())
    }
}

/// Averages vertex pressures into an image. Predicted maps may be negative,
/// so the result is not checked against the sensed-image invariants.
pub fn reproject_2d(pressure: &[f64], mesh: &PosedMesh, geom: &GridGeometry) -> Result<PressureImage> {
    geom.validate()?;
    crate::error::check_len("vertex pressure", mesh.num_vertices(), pressure.len())?;
    let values = Reprojection::new(mesh, geom).forward(pressure)?;
    Ok(PressureImage {
        geometry: *geom,
        values,
    })
}

pub fn reproject_2d_vjp(upstream: &[f64], mesh: &PosedMesh, geom: &GridGeometry) -> Result<Vec<f64>> {
    geom.validate()?;
    Reprojection::new(mesh, geom).vjp(upstream)
}

#[cfg(test)]
mod tests;
