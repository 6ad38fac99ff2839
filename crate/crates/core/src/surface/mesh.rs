//! Triangle meshes and their PLY / OBJ encodings.
//!
//! PLY files are binary little-endian: `float x, y, z` (plus `nx, ny, nz`
//! when normals are present) per vertex and `list uchar uint` per face.
//! OBJ files are plain `v` / `vn` / `f` text.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(Self::Ply),
            Some("obj") => Ok(Self::Obj),
            _ => invalid(format!("cannot infer mesh format from `{}` (use .ply or .obj)", path.display())),
        }
    }
}

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, msg: msg.into() })
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.faces.iter().flatten().any(|&i| i as usize >= n) {
            return invalid("face index out of range");
        }
        if let Some(nr) = &self.normals {
            if nr.len() != n {
                return invalid("normal count differs from vertex count");
            }
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.positions[a as usize], self.positions[b as usize], self.positions[c as usize]]
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    /// `V − E + F` with edges counted as unordered vertex pairs.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.positions.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    /// Drops triangles with area ≤ `min_area` and vertices no face uses.
    pub fn cleaned(&self, min_area: f64) -> TriangleMesh {
        let keep: Vec<[u32; 3]> = (0..self.faces.len()).filter(|&f| self.triangle_area(f) > min_area).map(|f| self.faces[f]).collect();
        let mut remap = vec![u32::MAX; self.positions.len()];
        let mut out = TriangleMesh { normals: self.normals.as_ref().map(|_| Vec::new()), ..Default::default() };
        for f in &keep {
            let mut nf = [0u32; 3];
            for k in 0..3 {
                let v = f[k] as usize;
                if remap[v] == u32::MAX {
                    remap[v] = out.positions.len() as u32;
                    out.positions.push(self.positions[v]);
                    if let (Some(dst), Some(src)) = (out.normals.as_mut(), self.normals.as_ref()) {
                        dst.push(src[v]);
                    }
                }
                nf[k] = remap[v];
            }
            out.faces.push(nf);
        }
        out
    }

    /// `n` points distributed uniformly by area.
    pub fn sample_points<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        if self.faces.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.triangle_area(f);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.triangle(f);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn to_ply_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let with_normals = self.normals.is_some();
        let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n", self.positions.len());
        if with_normals {
            header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
        }
        header.push_str(&format!("element face {}\nproperty list uchar uint vertex_indices\nend_header\n", self.faces.len()));
        out.extend_from_slice(header.as_bytes());
        for (i, p) in self.positions.iter().enumerate() {
            for k in 0..3 {
                out.extend_from_slice(&(p[k] as f32).to_le_bytes());
            }
            if let Some(nr) = &self.normals {
                for k in 0..3 {
                    out.extend_from_slice(&(nr[i][k] as f32).to_le_bytes());
                }
            }
        }
        for f in &self.faces {
            out.push(3);
            for &i in f {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out
    }

    pub fn from_ply_bytes(bytes: &[u8]) -> Result<Self> {
        parse_ply(bytes)
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            s.push_str(&format!("v {} {} {}\n", p.x, p.y, p.z));
        }
        if let Some(nr) = &self.normals {
            for n in nr {
                s.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
            }
        }
        for f in &self.faces {
            let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
            if self.normals.is_some() {
                s.push_str(&format!("f {a}//{a} {b}//{b} {c}//{c}\n"));
            } else {
                s.push_str(&format!("f {a} {b} {c}\n"));
            }
        }
        s
    }

    pub fn from_obj_str(text: &str) -> Result<Self> {
        parse_obj(text)
    }

    pub fn write(&self, path: &Path, format: MeshFormat) -> Result<()> {
        let bytes = match format {
            MeshFormat::Ply => self.to_ply_bytes(),
            MeshFormat::Obj => self.to_obj_string().into_bytes(),
        };
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path, format: MeshFormat) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        match format {
            MeshFormat::Ply => parse_ply(&bytes),
            MeshFormat::Obj => match std::str::from_utf8(&bytes) {
                Ok(t) => parse_obj(t),
                Err(e) => parse_err(e.valid_up_to(), "OBJ file is not valid UTF-8"),
            },
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            "uchar" | "uint8" => Self::U8,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::I32 | Self::U32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Self::U8 => b[0] as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return parse_err(self.pos, format!("unexpected end of file while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    let end_marker = b"end_header\n";
    let header_end = match bytes.windows(end_marker.len()).position(|w| w == end_marker) {
        Some(p) => p + end_marker.len(),
        None => return parse_err(bytes.len(), "missing `end_header`"),
    };
    let header = match std::str::from_utf8(&bytes[..header_end]) {
        Ok(h) => h,
        Err(e) => return parse_err(e.valid_up_to(), "header is not ASCII"),
    };
    let mut vertex_count = None;
    let mut face_count = None;
    let mut vertex_props: Vec<(String, Scalar)> = Vec::new();
    let mut face_types = None;
    let mut current = "";
    let mut offset = 0;
    for (ln, line) in header.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match (ln, tokens.as_slice()) {
            (0, ["ply"]) => {}
            (0, _) => return parse_err(at, "not a PLY file"),
            (_, ["format", "binary_little_endian", "1.0"]) => {}
            (_, ["format", other, ..]) => return parse_err(at, format!("unsupported PLY format `{other}`")),
            (_, ["comment", ..]) | (_, ["obj_info", ..]) | (_, ["end_header"]) => {}
            (_, ["element", name, count]) => {
                let n: usize = match count.parse() {
                    Ok(n) => n,
                    Err(_) => return parse_err(at, format!("bad element count `{count}`")),
                };
                current = match *name {
                    "vertex" => {
                        vertex_count = Some(n);
                        "vertex"
                    }
                    "face" => {
                        face_count = Some(n);
                        "face"
                    }
                    other => return parse_err(at, format!("unsupported element `{other}`")),
                };
            }
            (_, ["property", "list", ct, it, _name]) if current == "face" => match (Scalar::parse(ct), Scalar::parse(it)) {
                (Some(c), Some(i)) if matches!(c, Scalar::U8 | Scalar::U32 | Scalar::I32) && matches!(i, Scalar::U32 | Scalar::I32) => {
                    face_types = Some((c, i))
                }
                _ => return parse_err(at, "unsupported face list types"),
            },
            (_, ["property", ty, name]) if current == "vertex" => match Scalar::parse(ty) {
                Some(s) => vertex_props.push((name.to_string(), s)),
                None => return parse_err(at, format!("unsupported property type `{ty}`")),
            },
            _ => return parse_err(at, format!("unexpected header line `{}`", line.trim_end())),
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| Error::Parse { offset: header_end, msg: "no vertex element".into() })?;
    let face_count = face_count.unwrap_or(0);
    let find = |n: &str| vertex_props.iter().position(|(p, _)| p == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return parse_err(header_end, "vertex element lacks x/y/z");
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    if face_count > 0 && face_types.is_none() {
        return parse_err(header_end, "face element lacks a vertex index list");
    }
    let stride: usize = vertex_props.iter().map(|(_, s)| s.size()).sum();
    let mut cur = Cursor { bytes, pos: header_end };
    let mut mesh = TriangleMesh { normals: normal_idx.map(|_| Vec::with_capacity(vertex_count)), ..Default::default() };
    let mut values = vec![0.0; vertex_props.len()];
    for _ in 0..vertex_count {
        let rec = cur.take(stride, "vertex data")?;
        let mut o = 0;
        for (k, (_, s)) in vertex_props.iter().enumerate() {
            values[k] = s.read(&rec[o..]);
            o += s.size();
        }
        mesh.positions.push(Vec3::new(values[ix], values[iy], values[iz]));
        if let (Some(nr), Some([a, b, c])) = (mesh.normals.as_mut(), normal_idx) {
            nr.push(Vec3::new(values[a], values[b], values[c]));
        }
    }
    if let Some((ct, it)) = face_types {
        for _ in 0..face_count {
            let at = cur.pos;
            let n = ct.read(cur.take(ct.size(), "face vertex count")?) as usize;
            if n != 3 {
                return parse_err(at, format!("only triangles are supported, found a {n}-gon"));
            }
            let mut f = [0u32; 3];
            for v in &mut f {
                let idx_at = cur.pos;
                let raw = it.read(cur.take(it.size(), "face indices")?);
                if raw < 0.0 || raw as usize >= vertex_count {
                    return parse_err(idx_at, format!("vertex index {raw} out of range"));
                }
                *v = raw as u32;
            }
            mesh.faces.push(f);
        }
    }
    Ok(mesh)
}

fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        let mut tokens = body.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" | "vn" => {
                if rest.len() < 3 {
                    return parse_err(at, format!("`{tag}` needs three coordinates"));
                }
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = match rest[k].parse::<f64>() {
                        Ok(v) if v.is_finite() => v,
                        _ => return parse_err(at, format!("bad number `{}`", rest[k])),
                    };
                }
                let v = Vec3::from(c);
                if tag == "v" {
                    positions.push(v);
                } else {
                    normals.push(v);
                }
            }
            "f" => {
                if rest.len() < 3 {
                    return parse_err(at, "face needs at least three vertices");
                }
                let mut idx = Vec::with_capacity(rest.len());
                for t in &rest {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = match first.parse() {
                        Ok(i) => i,
                        Err(_) => return parse_err(at, format!("bad face index `{t}`")),
                    };
                    let resolved = if i > 0 { i - 1 } else { positions.len() as i64 + i };
                    if resolved < 0 || resolved as usize >= positions.len() {
                        return parse_err(at, format!("face index {i} out of range"));
                    }
                    idx.push(resolved as u32);
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let normals = (!normals.is_empty() && normals.len() == positions.len()).then_some(normals);
    Ok(TriangleMesh { positions, faces, normals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> TriangleMesh {
        TriangleMesh {
            positions: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.5)],
            faces: vec![[0, 1, 2]],
            normals: None,
        }
    }

    #[test]
    fn single_triangle_round_trips() {
        let m = tri();
        assert_eq!(TriangleMesh::from_ply_bytes(&m.to_ply_bytes()).unwrap(), m);
        assert_eq!(TriangleMesh::from_obj_str(&m.to_obj_string()).unwrap(), m);
    }

    #[test]
    fn normals_round_trip() {
        let mut m = tri();
        m.normals = Some(vec![Vec3::z(); 3]);
        assert_eq!(TriangleMesh::from_ply_bytes(&m.to_ply_bytes()).unwrap(), m);
        assert_eq!(TriangleMesh::from_obj_str(&m.to_obj_string()).unwrap(), m);
    }

    #[test]
    fn truncated_ply_reports_offset() {
        let bytes = tri().to_ply_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 13, 20] {
            match TriangleMesh::from_ply_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_obj_reports_line_offset() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 x\nf 1 2 3\n";
        match TriangleMesh::from_obj_str(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        assert!(TriangleMesh::from_obj_str("v 0 0 0\nf 1 2 5\n").is_err());
    }

    #[test]
    fn obj_quads_are_fanned() {
        let m = TriangleMesh::from_obj_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 -1\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((m.area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cleanup_drops_degenerates() {
        let mut m = tri();
        m.positions.push(Vec3::new(2.0, 0.0, 0.0));
        m.positions.push(Vec3::new(9.0, 9.0, 9.0));
        m.faces.push([0, 1, 3]);
        let c = m.cleaned(1e-12);
        assert_eq!(c.faces.len(), 1);
        assert_eq!(c.positions.len(), 3);
    }

    #[test]
    fn area_sampling_stays_on_triangles() {
        use rand::SeedableRng;
        let m = tri();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for p in m.sample_points(200, &mut rng) {
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12);
            assert!((p.z - 0.5 * p.y).abs() < 1e-12);
        }
    }
}
