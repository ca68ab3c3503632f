use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// One- and two-edge vertex neighborhoods (self excluded, sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub ring1: Vec<Vec<usize>>,
    pub ring2: Vec<Vec<usize>>,
}

pub fn build_neighbor_table(num_vertices: usize, faces: &[[usize; 3]]) -> Result<NeighborTable> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_vertices];
    for f in faces {
        for &i in f {
            if i >= num_vertices {
                return Err(Error::IndexOutOfRange {
                    what: "faces",
                    index: i,
                    limit: num_vertices,
                });
            }
        }
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }
    let ring2 = (0..num_vertices)
        .map(|v| {
            let mut s: BTreeSet<usize> = adj[v].clone();
            for &n in &adj[v] {
                s.extend(adj[n].iter().copied());
            }
            s.remove(&v);
            s.into_iter().collect()
        })
        .collect();
    let ring1 = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    Ok(NeighborTable { ring1, ring2 })
}
