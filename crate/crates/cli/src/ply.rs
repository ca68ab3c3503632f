//! ASCII PLY export of a mesh colored by per-vertex pressure.
//!
//! Colors run linearly from blue (0 kPa) to red (the largest value in the
//! map); negative values are drawn as 0. The raw value is kept in a
//! `pressure` vertex property.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pressmap_core::body_model::PosedMesh;

pub fn colormap(p: f64, max: f64) -> [u8; 3] {
    let t = if max > 0.0 { (p / max).clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

pub fn render(mesh: &PosedMesh, pressure: &[f64]) -> Result<String> {
    if pressure.len() != mesh.vertices.len() {
        bail!("{} pressure values for {} vertices", pressure.len(), mesh.vertices.len());
    }
    let max = pressure.iter().copied().fold(0.0f64, f64::max);
    let mut s = String::new();
    writeln!(s, "ply\nformat ascii 1.0\ncomment pressure in kPa")?;
    writeln!(s, "element vertex {}", mesh.vertices.len())?;
    writeln!(s, "property double x\nproperty double y\nproperty double z")?;
    writeln!(s, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(s, "property double pressure")?;
    writeln!(s, "element face {}", mesh.faces.len())?;
    writeln!(s, "property list uchar int vertex_indices\nend_header")?;
    for (v, p) in mesh.vertices.iter().zip(pressure) {
        let [r, g, b] = colormap(*p, max);
        writeln!(s, "{} {} {} {r} {g} {b} {p}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces.iter() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(s)
}

pub fn write(path: &Path, mesh: &PosedMesh, pressure: &[f64]) -> Result<()> {
    std::fs::write(path, render(mesh, pressure)?).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0, 5.0), [0, 0, 255]);
        assert_eq!(colormap(5.0, 5.0), [255, 0, 0]);
        assert_eq!(colormap(-1.0, 5.0), [0, 0, 255]);
        assert_eq!(colormap(3.0, 0.0), [0, 0, 255]);
    }

    #[test]
    fn header_counts_match_body() {
        let m = PosedMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![], Arc::new(vec![[0, 1, 2]]));
        let s = render(&m, &[0.0, 1.0, 2.0]).unwrap();
        assert!(s.contains("element vertex 3\n"));
        assert!(s.contains("element face 1\n"));
        assert!(s.ends_with("3 0 1 2\n"));
        assert!(s.contains("0 1 0 255 0 0 2\n"));
        assert!(render(&m, &[0.0]).is_err());
    }
}
