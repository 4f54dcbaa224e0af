//! UV-textured triangle meshes: OBJ/PNG interchange, normalization and UV
//! island detection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::image::{Image, ImageError, Mask};
use crate::scalar::{cross3, normalize3, sub3, Real};

/// Tolerance on UV coordinates when deciding whether two triangles share an
/// edge in texture space.
pub const UV_EDGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no texture coordinates")]
    MissingUvs,
    #[error("face on line {line} has {count} vertices")]
    NonTriangleFace { line: usize, count: usize },
    #[error("mesh references {0} materials; only a single atlas is supported")]
    MultiAtlasUnsupported(usize),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("atlas must be at least 1x1")]
    EmptyAtlas,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Vertex and UV indices of one triangle corner triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triangle {
    pub v: [u32; 3],
    pub t: [u32; 3],
}

/// Triangle mesh with per-corner UVs and a single RGBA texture atlas.
///
/// Immutable once constructed; edits produce new atlas images.
#[derive(Debug, Clone)]
pub struct TexturedMesh<S: Real> {
    positions: Vec<[S; 3]>,
    uvs: Vec<[S; 2]>,
    triangles: Vec<Triangle>,
    atlas: Image,
    islands: Vec<Vec<usize>>,
    island_of: Vec<usize>,
    island_masks: OnceLock<Vec<Mask>>,
}

/// Map a UV to the texel it samples in a `w × h` atlas (row 0 is v = 1).
#[inline]
pub fn uv_to_texel<S: Real>(uv: [S; 2], w: usize, h: usize) -> (usize, usize) {
    let u = uv[0].as_f64();
    let v = uv[1].as_f64();
    let x = ((u * w as f64).floor().max(0.0) as usize).min(w - 1);
    let y = (((1.0 - v) * h as f64).floor().max(0.0) as usize).min(h - 1);
    (x, y)
}

/// Fractional wrap into `[0, 1]`; values already inside are kept so that an
/// exact 1.0 stays on the atlas edge.
pub fn wrap_uv(c: f64) -> f64 {
    if (0.0..=1.0).contains(&c) {
        c
    } else {
        c - c.floor()
    }
}

impl<S: Real> TexturedMesh<S> {
    pub fn new(
        positions: Vec<[S; 3]>,
        uvs: Vec<[S; 2]>,
        triangles: Vec<Triangle>,
        atlas: Image,
    ) -> Result<Self, MeshError> {
        if atlas.width() == 0 || atlas.height() == 0 {
            return Err(MeshError::EmptyAtlas);
        }
        if uvs.is_empty() && !triangles.is_empty() {
            return Err(MeshError::MissingUvs);
        }
        for (i, t) in triangles.iter().enumerate() {
            if t.v.iter().any(|&v| v as usize >= positions.len()) {
                return Err(MeshError::IndexOutOfRange(format!("triangle {i} vertex {:?}", t.v)));
            }
            if t.t.iter().any(|&v| v as usize >= uvs.len()) {
                return Err(MeshError::IndexOutOfRange(format!("triangle {i} uv {:?}", t.t)));
            }
        }
        let uvs = uvs
            .into_iter()
            .map(|[u, v]| [S::lit(wrap_uv(u.as_f64())), S::lit(wrap_uv(v.as_f64()))])
            .collect();
        let atlas = atlas.to_rgba();
        let mut mesh = Self {
            positions,
            uvs,
            triangles,
            atlas,
            islands: Vec::new(),
            island_of: Vec::new(),
            island_masks: OnceLock::new(),
        };
        mesh.islands = compute_islands(&mesh);
        mesh.island_of = vec![0; mesh.triangles.len()];
        for (k, isl) in mesh.islands.iter().enumerate() {
            for &t in isl {
                mesh.island_of[t] = k;
            }
        }
        Ok(mesh)
    }

    pub fn positions(&self) -> &[[S; 3]] {
        &self.positions
    }
    pub fn uvs(&self) -> &[[S; 2]] {
        &self.uvs
    }
    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }
    pub fn atlas(&self) -> &Image {
        &self.atlas
    }
    pub fn atlas_dims(&self) -> (usize, usize) {
        self.atlas.dims()
    }
    pub fn islands(&self) -> &[Vec<usize>] {
        &self.islands
    }
    pub fn island_of(&self, tri: usize) -> usize {
        self.island_of[tri]
    }

    pub fn corner_positions(&self, tri: usize) -> [[S; 3]; 3] {
        let t = &self.triangles[tri];
        t.v.map(|i| self.positions[i as usize])
    }

    pub fn corner_uvs(&self, tri: usize) -> [[S; 2]; 3] {
        let t = &self.triangles[tri];
        t.t.map(|i| self.uvs[i as usize])
    }

    pub fn face_normal(&self, tri: usize) -> [S; 3] {
        let [a, b, c] = self.corner_positions(tri);
        normalize3(cross3(sub3(b, a), sub3(c, a)))
    }

    /// Same geometry with a replacement atlas of identical dimensions.
    pub fn with_atlas(&self, atlas: Image) -> Self {
        assert_eq!(atlas.dims(), self.atlas.dims(), "replacement atlas dims");
        Self {
            positions: self.positions.clone(),
            uvs: self.uvs.clone(),
            triangles: self.triangles.clone(),
            atlas: atlas.to_rgba(),
            islands: self.islands.clone(),
            island_of: self.island_of.clone(),
            island_masks: self.island_masks.clone(),
        }
    }

    /// Center the bounding box at the origin and scale uniformly so the
    /// farthest vertex lies at distance 1.
    pub fn normalized(mut self) -> Self {
        if self.positions.is_empty() {
            return self;
        }
        let mut lo = [S::infinity(); 3];
        let mut hi = [S::neg_infinity(); 3];
        for p in &self.positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let two = S::lit(2.0);
        let center = [(lo[0] + hi[0]) / two, (lo[1] + hi[1]) / two, (lo[2] + hi[2]) / two];
        let radius = self
            .positions
            .iter()
            .map(|p| {
                let d = sub3(*p, center);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(S::zero(), S::max);
        let scale = if radius > S::zero() { S::one() / radius } else { S::one() };
        for p in &mut self.positions {
            *p = sub3(*p, center).map(|c| c * scale);
        }
        self
    }

    pub fn bounding_radius(&self) -> S {
        self.positions
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(S::zero(), S::max)
    }

    /// Per-island masks of the texels each island's UV triangles overlap.
    pub fn island_texel_masks(&self) -> &[Mask] {
        self.island_masks.get_or_init(|| {
            let (w, h) = self.atlas_dims();
            self.islands
                .iter()
                .map(|tris| {
                    let mut m = Mask::new(w, h);
                    for &t in tris {
                        rasterize_uv_triangle(&mut m, self.corner_uvs(t), Coverage::Conservative);
                    }
                    m
                })
                .collect()
        })
    }

    /// Texels whose centers fall inside some UV triangle.
    pub fn mapped_texels(&self) -> Mask {
        let (w, h) = self.atlas_dims();
        let mut m = Mask::new(w, h);
        for t in 0..self.triangles.len() {
            rasterize_uv_triangle(&mut m, self.corner_uvs(t), Coverage::Centers);
        }
        m
    }

    /// Union of all islands' conservative texel footprints.
    pub fn chart_mask(&self) -> Mask {
        let (w, h) = self.atlas_dims();
        let mut m = Mask::new(w, h);
        for im in self.island_texel_masks() {
            m.union_with(im);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Texel centers inside the triangle.
    Centers,
    /// Any overlap between the closed texel square and the triangle.
    Conservative,
}

/// Mark the texels of `m` covered by a UV triangle.
pub fn rasterize_uv_triangle<S: Real>(m: &mut Mask, uv: [[S; 2]; 3], mode: Coverage) {
    let (w, h) = m.dims();
    let p: Vec<[f64; 2]> = uv
        .iter()
        .map(|c| [c[0].as_f64() * w as f64, (1.0 - c[1].as_f64()) * h as f64])
        .collect();
    let (p0, p1, p2) = (p[0], p[1], p[2]);
    let minx = p0[0].min(p1[0]).min(p2[0]).floor().max(0.0) as usize;
    let miny = p0[1].min(p1[1]).min(p2[1]).floor().max(0.0) as usize;
    let maxx = (p0[0].max(p1[0]).max(p2[0]).ceil() as usize).min(w);
    let maxy = (p0[1].max(p1[1]).max(p2[1]).ceil() as usize).min(h);
    let edge = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let area = edge(p0, p1, p2);
    if area == 0.0 && mode == Coverage::Centers {
        return;
    }
    let sign = if area < 0.0 { -1.0 } else { 1.0 };
    for y in miny..maxy.max(miny) {
        for x in minx..maxx.max(minx) {
            let hit = match mode {
                Coverage::Centers => {
                    let c = [x as f64 + 0.5, y as f64 + 0.5];
                    sign * edge(p1, p2, c) >= 0.0 && sign * edge(p2, p0, c) >= 0.0 && sign * edge(p0, p1, c) >= 0.0
                }
                Coverage::Conservative => tri_overlaps_box([p0, p1, p2], [x as f64, y as f64], [x as f64 + 1.0, y as f64 + 1.0]),
            };
            if hit {
                m.set(x, y, true);
            }
        }
    }
}

/// Separating-axis test between a 2D triangle and a closed axis-aligned box.
fn tri_overlaps_box(t: [[f64; 2]; 3], lo: [f64; 2], hi: [f64; 2]) -> bool {
    for k in 0..2 {
        let tmin = t[0][k].min(t[1][k]).min(t[2][k]);
        let tmax = t[0][k].max(t[1][k]).max(t[2][k]);
        if tmax < lo[k] || tmin > hi[k] {
            return false;
        }
    }
    let corners = [lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]];
    for e in 0..3 {
        let a = t[e];
        let b = t[(e + 1) % 3];
        let n = [a[1] - b[1], b[0] - a[0]];
        if n == [0.0, 0.0] {
            continue;
        }
        let proj = |p: [f64; 2]| n[0] * p[0] + n[1] * p[1];
        let tv: Vec<f64> = t.iter().map(|&p| proj(p)).collect();
        let (tmin, tmax) = (tv[0].min(tv[1]).min(tv[2]), tv[0].max(tv[1]).max(tv[2]));
        let bv: Vec<f64> = corners.iter().map(|&p| proj(p)).collect();
        let bmin = bv.iter().cloned().fold(f64::INFINITY, f64::min);
        let bmax = bv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if tmax < bmin || bmax < tmin {
            return false;
        }
    }
    true
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so the result does not depend on union order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Partition triangles into UV islands: two triangles are joined when they
/// share an edge whose endpoint UVs agree within [`UV_EDGE_TOLERANCE`].
///
/// Islands are returned with sorted members, ordered by smallest member.
pub fn compute_islands<S: Real>(mesh: &TexturedMesh<S>) -> Vec<Vec<usize>> {
    let uvs = mesh.uvs();
    // canonical id per UV point: points within tolerance collapse together
    let mut order: Vec<usize> = (0..uvs.len()).collect();
    order.sort_by(|&a, &b| {
        uvs[a][0].as_f64().total_cmp(&uvs[b][0].as_f64()).then(uvs[a][1].as_f64().total_cmp(&uvs[b][1].as_f64()))
    });
    let mut points = UnionFind::new(uvs.len());
    for (k, &a) in order.iter().enumerate() {
        let ua = uvs[a];
        for &b in &order[k + 1..] {
            let ub = uvs[b];
            if ub[0].as_f64() - ua[0].as_f64() > UV_EDGE_TOLERANCE {
                break;
            }
            if (ub[1].as_f64() - ua[1].as_f64()).abs() <= UV_EDGE_TOLERANCE {
                points.union(a, b);
            }
        }
    }
    let canon: Vec<usize> = (0..uvs.len()).map(|i| points.find(i)).collect();

    let tris = mesh.triangles();
    let mut uf = UnionFind::new(tris.len());
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for (ti, t) in tris.iter().enumerate() {
        for e in 0..3 {
            let a = canon[t.t[e] as usize];
            let b = canon[t.t[(e + 1) % 3] as usize];
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            match edges.get(&key) {
                Some(&other) => uf.union(ti, other),
                None => {
                    edges.insert(key, ti);
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for ti in 0..tris.len() {
        let r = uf.find(ti);
        groups.entry(r).or_default().push(ti);
    }
    let mut islands: Vec<Vec<usize>> = groups.into_values().collect();
    for isl in &mut islands {
        isl.sort_unstable();
    }
    islands.sort_by_key(|isl| isl[0]);
    islands
}

/// Parsed OBJ contents before validation.
struct ObjData {
    positions: Vec<[f64; 3]>,
    uvs: Vec<[f64; 2]>,
    triangles: Vec<Triangle>,
}

fn parse_index(tok: &str, len: usize, line: usize) -> Result<u32, MeshError> {
    let raw: i64 = tok.parse().map_err(|_| MeshError::Parse { line, reason: format!("bad index {tok:?}") })?;
    let idx = if raw < 0 { len as i64 + raw } else { raw - 1 };
    if idx < 0 || idx as usize >= len {
        return Err(MeshError::IndexOutOfRange(format!("line {line}: index {raw} with {len} entries")));
    }
    Ok(idx as u32)
}

fn parse_obj(src: &str) -> Result<ObjData, MeshError> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut triangles = Vec::new();
    let mut materials: Vec<String> = Vec::new();
    let mut faces_missing_uv = false;
    for (lineno, raw) in src.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut toks = content.split_whitespace();
        let Some(tag) = toks.next() else { continue };
        let nums = |toks: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>, MeshError> {
            toks.map(|t| t.parse::<f64>().map_err(|_| MeshError::Parse { line, reason: format!("bad number {t:?}") }))
                .collect()
        };
        match tag {
            "v" => {
                let v = nums(toks)?;
                if v.len() < 3 {
                    return Err(MeshError::Parse { line, reason: "vertex needs 3 coordinates".into() });
                }
                positions.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                let v = nums(toks)?;
                if v.len() < 2 {
                    return Err(MeshError::Parse { line, reason: "vt needs 2 coordinates".into() });
                }
                uvs.push([v[0], v[1]]);
            }
            "usemtl" => {
                let name = toks.next().unwrap_or("").to_string();
                if !materials.contains(&name) {
                    materials.push(name);
                }
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in toks {
                    let mut parts = tok.split('/');
                    let v = parse_index(parts.next().unwrap_or(""), positions.len(), line)?;
                    let t = match parts.next() {
                        Some(s) if !s.is_empty() => Some(parse_index(s, uvs.len(), line)?),
                        _ => None,
                    };
                    corners.push((v, t));
                }
                if corners.len() < 3 {
                    return Err(MeshError::NonTriangleFace { line, count: corners.len() });
                }
                if corners.iter().any(|c| c.1.is_none()) {
                    faces_missing_uv = true;
                    continue;
                }
                // fan from the first corner
                for k in 1..corners.len() - 1 {
                    let (a, b, c) = (corners[0], corners[k], corners[k + 1]);
                    triangles.push(Triangle { v: [a.0, b.0, c.0], t: [a.1.unwrap(), b.1.unwrap(), c.1.unwrap()] });
                }
            }
            _ => {}
        }
    }
    if materials.len() > 1 {
        return Err(MeshError::MultiAtlasUnsupported(materials.len()));
    }
    if uvs.is_empty() || faces_missing_uv {
        return Err(MeshError::MissingUvs);
    }
    Ok(ObjData { positions, uvs, triangles })
}

/// Load an OBJ mesh with its PNG atlas, wrap UVs and normalize to the unit
/// bounding sphere.
pub fn load_mesh<S: Real>(path: impl AsRef<Path>, atlas_path: impl AsRef<Path>) -> Result<TexturedMesh<S>, MeshError> {
    let src = std::fs::read_to_string(path)?;
    let atlas = Image::load_png(atlas_path)?;
    mesh_from_obj_str(&src, atlas)
}

pub fn mesh_from_obj_str<S: Real>(src: &str, atlas: Image) -> Result<TexturedMesh<S>, MeshError> {
    let obj = parse_obj(src)?;
    let positions = obj.positions.iter().map(|p| p.map(S::lit)).collect();
    let uvs = obj.uvs.iter().map(|p| p.map(S::lit)).collect();
    Ok(TexturedMesh::new(positions, uvs, obj.triangles, atlas)?.normalized())
}

/// OBJ text for the mesh; faces reference `material` when given.
pub fn to_obj_string<S: Real>(mesh: &TexturedMesh<S>, material: Option<(&str, &str)>) -> String {
    let mut out = String::new();
    if let Some((mtllib, name)) = material {
        let _ = writeln!(out, "mtllib {mtllib}\nusemtl {name}");
    }
    for p in mesh.positions() {
        let _ = writeln!(out, "v {:.9} {:.9} {:.9}", p[0].as_f64(), p[1].as_f64(), p[2].as_f64());
    }
    for t in mesh.uvs() {
        let _ = writeln!(out, "vt {:.9} {:.9}", t[0].as_f64(), t[1].as_f64());
    }
    for t in mesh.triangles() {
        let _ = writeln!(
            out,
            "f {}/{} {}/{} {}/{}",
            t.v[0] + 1,
            t.t[0] + 1,
            t.v[1] + 1,
            t.t[1] + 1,
            t.v[2] + 1,
            t.t[2] + 1
        );
    }
    out
}

/// Write `<obj_path>`, a sibling `.mtl`, and the atlas PNG.
pub fn save_mesh<S: Real>(mesh: &TexturedMesh<S>, obj_path: impl AsRef<Path>, atlas_path: impl AsRef<Path>) -> Result<(), MeshError> {
    let obj_path = obj_path.as_ref();
    let atlas_path = atlas_path.as_ref();
    let mtl_path = obj_path.with_extension("mtl");
    let mtl_name = mtl_path.file_name().and_then(|s| s.to_str()).unwrap_or("mesh.mtl");
    let atlas_name = atlas_path.file_name().and_then(|s| s.to_str()).unwrap_or("atlas.png");
    std::fs::write(obj_path, to_obj_string(mesh, Some((mtl_name, "atlas"))))?;
    std::fs::write(&mtl_path, format!("newmtl atlas\nKd 1 1 1\nmap_Kd {atlas_name}\n"))?;
    mesh.atlas().save_png(atlas_path)?;
    Ok(())
}
