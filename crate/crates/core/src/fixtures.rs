//! Small procedural assets used by tests, examples and the demo CLI inputs.

use std::fmt::Write as _;

use crate::image::{Image, Rect};
use crate::mesh::{TexturedMesh, Triangle};
use crate::scalar::Real;

/// Side length of the per-face charts in [`cube_charts_layout`].
pub const CHART_SIDE: usize = 76;

/// Texel rectangles (in a 256² atlas) of six separate square charts laid out on
/// a 3×2 grid with gutters; order is +X, −X, +Y, −Y, +Z, −Z.
pub fn cube_charts_layout() -> [Rect; 6] {
    let mut out = [Rect::new(0, 0, 0, 0); 6];
    for (k, r) in out.iter_mut().enumerate() {
        let (col, row) = (k % 3, k / 3);
        *r = Rect::new(4 + col * 84, 4 + row * 84, CHART_SIDE, CHART_SIDE);
    }
    out
}

/// (normal, right, up) for the six cube faces.
const FACES: [([f64; 3], [f64; 3], [f64; 3]); 6] = [
    ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
    ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
    ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
    ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
    ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    ([0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
];

/// Layout rectangles are expressed in texels of a 256² atlas; other atlas
/// sizes scale the same UVs.
const LAYOUT_SIZE: f64 = 256.0;

fn chart_uv(r: Rect, s: f64, t: f64) -> [f64; 2] {
    // s, t in [0,1]: s left→right, t bottom→top
    let x = r.x as f64 + s * r.w as f64;
    let y = r.bottom() as f64 - t * r.h as f64;
    [x / LAYOUT_SIZE, 1.0 - y / LAYOUT_SIZE]
}

/// Deterministic brown "wood" atlas with gentle stripes.
pub fn brown_atlas(size: usize) -> Image {
    let mut img = Image::new(size, size, 4);
    for y in 0..size {
        for x in 0..size {
            let stripe = ((x / 6 + y / 11) % 3) as u8 * 6;
            let px = img.pixel_mut(x, y);
            px.copy_from_slice(&[118 + stripe, 78 + stripe / 2, 46, 255]);
        }
    }
    img
}

/// Axis-aligned cube in [-1,1]³ with six separate texel-aligned charts.
/// Triangle `2k` and `2k+1` belong to face `k`.
pub fn cube_charts<S: Real>(atlas: Image) -> TexturedMesh<S> {
    let layout = cube_charts_layout();
    let mut positions: Vec<[S; 3]> = Vec::new();
    let mut uvs = Vec::new();
    let mut tris = Vec::new();
    let vid = |p: [f64; 3], positions: &mut Vec<[S; 3]>| -> u32 {
        let p = p.map(S::lit);
        if let Some(i) = positions.iter().position(|q| *q == p) {
            i as u32
        } else {
            positions.push(p);
            (positions.len() - 1) as u32
        }
    };
    for (k, (n, r, u)) in FACES.iter().enumerate() {
        let corner = |sr: f64, su: f64| [n[0] + sr * r[0] + su * u[0], n[1] + sr * r[1] + su * u[1], n[2] + sr * r[2] + su * u[2]];
        let quad = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        let mut v = [0u32; 4];
        let mut t = [0u32; 4];
        for (q, &(a, b)) in quad.iter().enumerate() {
            v[q] = vid(corner(a, b), &mut positions);
            uvs.push(chart_uv(layout[k], (a + 1.0) / 2.0, (b + 1.0) / 2.0).map(S::lit));
            t[q] = (uvs.len() - 1) as u32;
        }
        tris.push(Triangle { v: [v[0], v[1], v[2]], t: [t[0], t[1], t[2]] });
        tris.push(Triangle { v: [v[0], v[2], v[3]], t: [t[0], t[2], t[3]] });
    }
    TexturedMesh::new(positions, uvs, tris, atlas).expect("valid cube").normalized()
}

/// The same cube written as an OBJ with six quad faces (for fan-triangulation
/// checks); uses the chart layout of [`cube_charts`] for a 256² atlas.
pub fn cube_quads_obj() -> String {
    let layout = cube_charts_layout();
    let mut out = String::new();
    let mut pos: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    let mut uv_lines = String::new();
    let mut uv_count = 0;
    for (k, (n, r, u)) in FACES.iter().enumerate() {
        let mut f = Vec::new();
        for &(a, b) in &[(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            let p = [n[0] + a * r[0] + b * u[0], n[1] + a * r[1] + b * u[1], n[2] + a * r[2] + b * u[2]];
            let vi = match pos.iter().position(|q| *q == p) {
                Some(i) => i,
                None => {
                    pos.push(p);
                    pos.len() - 1
                }
            };
            let uv = chart_uv(layout[k], (a + 1.0) / 2.0, (b + 1.0) / 2.0);
            let _ = writeln!(uv_lines, "vt {} {}", uv[0], uv[1]);
            uv_count += 1;
            f.push(format!("{}/{}", vi + 1, uv_count));
        }
        faces.push(format!("f {}", f.join(" ")));
    }
    for p in &pos {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    out.push_str(&uv_lines);
    for f in faces {
        out.push_str(&f);
        out.push('\n');
    }
    out
}

/// Cube with the classic cross unwrap: 8 vertices, 14 UVs, 12 triangles, one
/// connected UV island.
pub fn cube_cross_obj() -> String {
    // layout points (col,row) on a 4×5 grid
    let pos_of = |c: usize, r: usize| -> [f64; 3] {
        let yz = |r: usize| match r {
            0 | 4 => (1.0, -1.0),
            1 => (1.0, 1.0),
            2 => (-1.0, 1.0),
            _ => (-1.0, -1.0),
        };
        match (c, r) {
            (1 | 2, _) => {
                let (y, z) = yz(r);
                [if c == 1 { -1.0 } else { 1.0 }, y, z]
            }
            (0, 1) => [-1.0, 1.0, -1.0],
            (0, 2) => [-1.0, -1.0, -1.0],
            (3, 1) => [1.0, 1.0, -1.0],
            (3, 2) => [1.0, -1.0, -1.0],
            _ => unreachable!(),
        }
    };
    let mut points: Vec<(usize, usize)> = Vec::new();
    for r in 0..5 {
        for c in 1..3 {
            points.push((c, r));
        }
    }
    points.extend([(0, 1), (0, 2), (3, 1), (3, 2)]);
    let mut pos: Vec<[f64; 3]> = Vec::new();
    let mut vmap = Vec::new();
    for &(c, r) in &points {
        let p = pos_of(c, r);
        let i = match pos.iter().position(|q| *q == p) {
            Some(i) => i,
            None => {
                pos.push(p);
                pos.len() - 1
            }
        };
        vmap.push(i);
    }
    let pid = |c: usize, r: usize| points.iter().position(|&p| p == (c, r)).unwrap();
    let mut quads = Vec::new();
    for r in 0..4 {
        quads.push([(1, r + 1), (2, r + 1), (2, r), (1, r)]);
    }
    quads.push([(0, 2), (1, 2), (1, 1), (0, 1)]);
    quads.push([(2, 2), (3, 2), (3, 1), (2, 1)]);
    let mut out = String::new();
    for p in &pos {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    for &(c, r) in &points {
        let _ = writeln!(out, "vt {} {}", c as f64 / 4.0, 1.0 - r as f64 / 5.0);
    }
    for q in quads {
        let ids: Vec<usize> = q.iter().map(|&(c, r)| pid(c, r)).collect();
        for tri in [[ids[0], ids[1], ids[2]], [ids[0], ids[2], ids[3]]] {
            let _ = writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                vmap[tri[0]] + 1,
                tri[0] + 1,
                vmap[tri[1]] + 1,
                tri[1] + 1,
                vmap[tri[2]] + 1,
                tri[2] + 1
            );
        }
    }
    out
}

/// Sphere built by projecting a subdivided cube; each cube face keeps its own
/// chart from [`cube_charts_layout`], giving near-uniform texel density.
pub fn cube_sphere<S: Real>(subdiv: usize, atlas: Image) -> TexturedMesh<S> {
    let layout = cube_charts_layout();
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut tris = Vec::new();
    for (k, (n, r, u)) in FACES.iter().enumerate() {
        let base = positions.len() as u32;
        for j in 0..=subdiv {
            for i in 0..=subdiv {
                let s = i as f64 / subdiv as f64;
                let t = j as f64 / subdiv as f64;
                // equal-angle spacing keeps texel density close to uniform
                let a = (std::f64::consts::FRAC_PI_4 * (2.0 * s - 1.0)).tan();
                let b = (std::f64::consts::FRAC_PI_4 * (2.0 * t - 1.0)).tan();
                let p = [n[0] + a * r[0] + b * u[0], n[1] + a * r[1] + b * u[1], n[2] + a * r[2] + b * u[2]];
                let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                positions.push(p.map(|c| S::lit(c / len)));
                uvs.push(chart_uv(layout[k], s, t).map(S::lit));
            }
        }
        let idx = |i: usize, j: usize| base + (j * (subdiv + 1) + i) as u32;
        for j in 0..subdiv {
            for i in 0..subdiv {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                tris.push(Triangle { v: [a, b, c], t: [a, b, c] });
                tris.push(Triangle { v: [a, c, d], t: [a, c, d] });
            }
        }
    }
    TexturedMesh::new(positions, uvs, tris, atlas).expect("valid sphere").normalized()
}

/// Square in the z = 0 plane with UVs spanning the unit square, sized so that
/// after normalization a camera at `view_aligned_distance(fov)` sees it fill
/// the frame exactly.
pub fn view_aligned_quad<S: Real>(atlas: Image) -> TexturedMesh<S> {
    let e = std::f64::consts::FRAC_1_SQRT_2;
    let positions = vec![[-e, -e, 0.0], [e, -e, 0.0], [e, e, 0.0], [-e, e, 0.0]]
        .into_iter()
        .map(|p| p.map(S::lit))
        .collect();
    let uvs = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]].into_iter().map(|p| p.map(S::lit)).collect();
    let tris = vec![Triangle { v: [0, 1, 2], t: [0, 1, 2] }, Triangle { v: [0, 2, 3], t: [0, 2, 3] }];
    TexturedMesh::new(positions, uvs, tris, atlas).expect("valid quad").normalized()
}

/// Camera distance at which [`view_aligned_quad`] exactly fills the frame.
pub fn view_aligned_distance(fov_deg: f64) -> f64 {
    std::f64::consts::FRAC_1_SQRT_2 / (fov_deg.to_radians() / 2.0).tan()
}
