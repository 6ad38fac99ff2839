use std::collections::HashMap;

use super::mc_tables::{CORNERS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use super::mesh::TriangleMesh;
use super::tsdf::TsdfVolume;
use crate::geom::Vec3;
use crate::par;

/// Minimum triangle area kept after extraction.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Edge interpolation parameters closer than this to an endpoint snap to it.
const SNAP_T: f64 = 1e-6;

/// Vertex identifier: `4·grid_index + axis` for an edge crossing, and
/// `4·grid_index + 3` for a crossing snapped onto a grid point.
type VertexKey = usize;

/// Crossing on the grid edge from corner `a` to corner `b` of cell
/// `(i, j, k)`. Interpolation always runs from the lower endpoint so that
/// neighboring cells agree bit for bit.
fn edge_vertex_key(vol: &TsdfVolume, i: usize, j: usize, k: usize, a: usize, b: usize, iso: f64) -> VertexKey {
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let lo = (i + ca.0.min(cb.0), j + ca.1.min(cb.1), k + ca.2.min(cb.2));
    let hi = (i + ca.0.max(cb.0), j + ca.1.max(cb.1), k + ca.2.max(cb.2));
    let axis = if ca.0 != cb.0 {
        0
    } else if ca.1 != cb.1 {
        1
    } else {
        2
    };
    let (il, ih) = (vol.index(lo.0, lo.1, lo.2), vol.index(hi.0, hi.1, hi.2));
    match crossing_t(vol.tsdf[il], vol.tsdf[ih], iso) {
        t if t < SNAP_T => 4 * il + 3,
        t if t > 1.0 - SNAP_T => 4 * ih + 3,
        _ => 4 * il + axis,
    }
}

fn crossing_t(va: f64, vb: f64, iso: f64) -> f64 {
    if (vb - va).abs() > 0.0 {
        ((iso - va) / (vb - va)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn vertex_position(vol: &TsdfVolume, key: VertexKey, iso: f64) -> Vec3 {
    let (idx, axis) = (key / 4, key % 4);
    let [nx, ny, _] = vol.dims;
    let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
    let pa = vol.point(i, j, k);
    let (i2, j2, k2) = match axis {
        0 => (i + 1, j, k),
        1 => (i, j + 1, k),
        2 => (i, j, k + 1),
        _ => return pa,
    };
    let t = crossing_t(vol.tsdf[idx], vol.tsdf[vol.index(i2, j2, k2)], iso);
    pa + (vol.point(i2, j2, k2) - pa) * t
}

/// Marching cubes over cells whose eight corners all carry weight > 0.
/// Triangles are wound counter-clockwise seen from the side with values
/// above `iso`. Returns an empty mesh when nothing crosses.
pub fn extract_mesh(vol: &TsdfVolume, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims;
    let slabs = par::map_range(nz - 1, |k| {
        let mut tris: Vec<[VertexKey; 3]> = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut vals = [0.0; 8];
                let mut observed = true;
                for (c, &(dx, dy, dz)) in CORNERS.iter().enumerate() {
                    let idx = vol.index(i + dx, j + dy, k + dz);
                    observed &= vol.weight[idx] > 0.0;
                    vals[c] = vol.tsdf[idx];
                }
                if !observed {
                    continue;
                }
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                for t in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    let key = |e: i16| {
                        let (a, b) = EDGE_CORNERS[e as usize];
                        edge_vertex_key(vol, i, j, k, a, b, iso)
                    };
                    let f = [key(t[0]), key(t[2]), key(t[1])];
                    // snapped crossings can collapse a triangle to a segment
                    if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                        tris.push(f);
                    }
                }
            }
        }
        tris
    });
    let mut index: HashMap<VertexKey, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for tris in slabs {
        for t in tris {
            let f = t.map(|key| {
                *index.entry(key).or_insert_with(|| {
                    mesh.positions.push(vertex_position(vol, key, iso));
                    (mesh.positions.len() - 1) as u32
                })
            });
            mesh.faces.push(f);
        }
    }
    mesh.cleaned(MIN_TRIANGLE_AREA)
}
