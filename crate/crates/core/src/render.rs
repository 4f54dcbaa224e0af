//! Deterministic software rasterizer with per-pixel correspondence buffers.
//!
//! Every frame carries, per pixel, the visible triangle, its perspective
//! correct barycentrics, the interpolated UV and the eye-space depth. These
//! buffers are what moves masks between screen space and the atlas.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::{Image, ImageError, Rgb};
use crate::mesh::{uv_to_texel, TexturedMesh};
use crate::scalar::{dot3, normalize3, sub3, Real};

/// Face id stored at pixels that show no geometry.
pub const SENTINEL_BACKGROUND: u32 = u32::MAX;
pub const BACKGROUND_RGB: Rgb = [255, 255, 255];

pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_FOV_DEG: f64 = 45.0;
pub const DEFAULT_DISTANCE: f64 = 2.8;

const NEAR: f64 = 1e-3;

/// Orbit camera on a sphere around the origin, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Elevation; +90 looks straight down from above.
    pub theta: f64,
    /// Azimuth around +Y; 0 looks from +Z, 90 from +X.
    pub phi: f64,
    pub fov: f64,
    pub distance: f64,
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Unlit albedo sampled from the atlas.
    Textured,
    /// Two-sided Lambertian gray, light at the camera.
    Geometry,
}

/// Camera intrinsics shared by view presets; the object's bounding radius is
/// 1 after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraDefaults {
    pub fov: f64,
    pub distance: f64,
    pub resolution: usize,
}

impl Default for CameraDefaults {
    fn default() -> Self {
        Self { fov: DEFAULT_FOV_DEG, distance: DEFAULT_DISTANCE, resolution: DEFAULT_RESOLUTION }
    }
}

fn fmt_angle(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

impl ViewSpec {
    pub fn new(theta: f64, phi: f64, cam: CameraDefaults) -> Self {
        Self { theta, phi: phi.rem_euclid(360.0), fov: cam.fov, distance: cam.distance, resolution: cam.resolution }
    }

    pub fn validate(&self, bounding_radius: f64) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.theta) {
            return Err(format!("theta {} outside [-90, 90]", self.theta));
        }
        if !(0.0..360.0).contains(&self.phi) {
            return Err(format!("phi {} outside [0, 360)", self.phi));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(format!("fov {} outside (0, 180)", self.fov));
        }
        if self.distance <= bounding_radius {
            return Err(format!("distance {} inside bounding radius {bounding_radius}", self.distance));
        }
        if self.resolution == 0 {
            return Err("resolution must be positive".into());
        }
        Ok(())
    }

    /// Stable identifier, e.g. `t0_p90`, `t-90_p0`.
    pub fn id(&self) -> String {
        format!("t{}_p{}", fmt_angle(self.theta), fmt_angle(self.phi))
    }

    /// Inverse of [`ViewSpec::id`] with intrinsics taken from `cam`.
    pub fn from_id(id: &str, cam: CameraDefaults) -> Option<Self> {
        let rest = id.strip_prefix('t')?;
        let (t, p) = rest.split_once("_p")?;
        Some(Self::new(t.parse().ok()?, p.parse().ok()?, cam))
    }
}

/// Views used for intent prediction: θ = 0, φ ∈ {0, 90, 180, 270}.
pub fn intent_views(cam: CameraDefaults) -> Vec<ViewSpec> {
    [0.0, 90.0, 180.0, 270.0].into_iter().map(|phi| ViewSpec::new(0.0, phi, cam)).collect()
}

/// Views used for refinement and inpainting: six evenly spaced side views
/// plus top and bottom.
pub fn coverage_views(cam: CameraDefaults) -> Vec<ViewSpec> {
    let mut v: Vec<ViewSpec> = (0..6).map(|k| ViewSpec::new(0.0, 60.0 * k as f64, cam)).collect();
    v.push(ViewSpec::new(90.0, 0.0, cam));
    v.push(ViewSpec::new(-90.0, 0.0, cam));
    v
}

/// Pinhole camera derived from a [`ViewSpec`].
#[derive(Debug, Clone, Copy)]
pub struct Camera<S: Real> {
    pub eye: [S; 3],
    pub right: [S; 3],
    pub up: [S; 3],
    /// Unit vector from the origin toward the eye (camera looks along −back).
    pub back: [S; 3],
    tan_half: S,
    res: usize,
}

impl<S: Real> Camera<S> {
    pub fn new(spec: &ViewSpec) -> Self {
        let (st, ct) = spec.theta.to_radians().sin_cos();
        let (sp, cp) = spec.phi.to_radians().sin_cos();
        let back = [ct * sp, st, ct * cp];
        let right = [cp, 0.0, -sp];
        let up = [-st * sp, ct, -st * cp];
        let d = spec.distance;
        Self {
            eye: back.map(|c| S::lit(c * d)),
            right: right.map(S::lit),
            up: up.map(S::lit),
            back: back.map(S::lit),
            tan_half: S::lit((spec.fov.to_radians() / 2.0).tan()),
            res: spec.resolution,
        }
    }

    /// Continuous pixel coordinates and eye-space depth of a world point.
    pub fn project(&self, p: [S; 3]) -> ([S; 2], S) {
        let rel = sub3(p, self.eye);
        let xc = dot3(rel, self.right);
        let yc = dot3(rel, self.up);
        let depth = -dot3(rel, self.back);
        let half = S::lit(0.5) * S::from_usize_lossy(self.res);
        let sx = (xc / (depth * self.tan_half) + S::one()) * half;
        let sy = (S::one() - yc / (depth * self.tan_half)) * half;
        ([sx, sy], depth)
    }

    /// Unit direction of the ray through the center of pixel (px, py).
    pub fn ray_dir(&self, px: usize, py: usize) -> [S; 3] {
        let res = S::from_usize_lossy(self.res);
        let two = S::lit(2.0);
        let nx = (two * (S::from_usize_lossy(px) + S::lit(0.5)) / res - S::one()) * self.tan_half;
        let ny = (S::one() - two * (S::from_usize_lossy(py) + S::lit(0.5)) / res) * self.tan_half;
        let d = [
            self.right[0] * nx + self.up[0] * ny - self.back[0],
            self.right[1] * nx + self.up[1] * ny - self.back[1],
            self.right[2] * nx + self.up[2] * ny - self.back[2],
        ];
        normalize3(d)
    }
}

/// One rendered view with its correspondence buffers.
#[derive(Debug, Clone)]
pub struct ViewFrame<S: Real> {
    pub spec: ViewSpec,
    pub mode: RenderMode,
    pub color: Image,
    pub face_id: Vec<u32>,
    pub bary: Vec<[S; 3]>,
    pub uv: Vec<[S; 2]>,
    pub depth: Vec<S>,
}

impl<S: Real> ViewFrame<S> {
    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    #[inline]
    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.face_id[y * self.spec.resolution + x] != SENTINEL_BACKGROUND
    }

    pub fn foreground_count(&self) -> usize {
        self.face_id.iter().filter(|&&f| f != SENTINEL_BACKGROUND).count()
    }

    pub fn foreground_mask(&self) -> crate::image::Mask {
        let r = self.spec.resolution;
        crate::image::Mask::from_fn(r, r, |x, y| self.is_foreground(x, y))
    }

    /// Texel sampled at pixel (x, y), if the pixel shows geometry.
    #[inline]
    pub fn texel_at(&self, x: usize, y: usize, atlas_w: usize, atlas_h: usize) -> Option<(usize, usize)> {
        let i = y * self.spec.resolution + x;
        (self.face_id[i] != SENTINEL_BACKGROUND).then(|| uv_to_texel(self.uv[i], atlas_w, atlas_h))
    }

    /// Write color.png, faceid.u32, uv.f32, depth.f32, bary.f32 and spec.json
    /// (binary buffers little-endian, row-major).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), ImageError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.color.save_png(dir.join("color.png"))?;
        let mut buf = Vec::with_capacity(self.face_id.len() * 4);
        for f in &self.face_id {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        std::fs::write(dir.join("faceid.u32"), &buf)?;
        let write_f32 = |name: &str, vals: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
            let mut b = Vec::new();
            for v in vals {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
            std::fs::write(dir.join(name), b)
        };
        write_f32("uv.f32", &mut self.uv.iter().flat_map(|u| [u[0].as_f64(), u[1].as_f64()]))?;
        write_f32("depth.f32", &mut self.depth.iter().map(|d| d.as_f64()))?;
        write_f32("bary.f32", &mut self.bary.iter().flat_map(|b| b.map(|c| c.as_f64())))?;
        let spec = serde_json::json!({ "id": self.spec.id(), "mode": self.mode, "spec": self.spec });
        std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&spec).expect("spec json"))?;
        Ok(())
    }
}

#[inline]
fn edge<S: Real>(a: [S; 2], b: [S; 2], c: [S; 2]) -> S {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Render with the mesh's own atlas.
pub fn render<S: Real>(mesh: &TexturedMesh<S>, spec: &ViewSpec, mode: RenderMode) -> ViewFrame<S> {
    render_with_atlas(mesh, mesh.atlas(), spec, mode)
}

/// Render sampling `atlas` in place of the mesh's atlas (same dimensions).
pub fn render_with_atlas<S: Real>(mesh: &TexturedMesh<S>, atlas: &Image, spec: &ViewSpec, mode: RenderMode) -> ViewFrame<S> {
    let res = spec.resolution;
    let n = res * res;
    let cam = Camera::<S>::new(spec);
    let mut frame = ViewFrame {
        spec: *spec,
        mode,
        color: Image::filled(res, res, &BACKGROUND_RGB),
        face_id: vec![SENTINEL_BACKGROUND; n],
        bary: vec![[S::zero(); 3]; n],
        uv: vec![[S::zero(); 2]; n],
        depth: vec![S::infinity(); n],
    };
    let near = S::lit(NEAR);
    let half = S::lit(0.5);
    let resf = S::from_usize_lossy(res);
    for tri in 0..mesh.triangles().len() {
        let corners = mesh.corner_positions(tri);
        let proj = corners.map(|p| cam.project(p));
        if proj.iter().any(|(_, d)| *d <= near) {
            continue;
        }
        let (p0, p1, p2) = (proj[0].0, proj[1].0, proj[2].0);
        let area = edge(p0, p1, p2);
        if area == S::zero() || !area.is_finite() {
            continue;
        }
        let minx = p0[0].min(p1[0]).min(p2[0]);
        let maxx = p0[0].max(p1[0]).max(p2[0]);
        let miny = p0[1].min(p1[1]).min(p2[1]);
        let maxy = p0[1].max(p1[1]).max(p2[1]);
        if maxx < S::zero() || maxy < S::zero() || minx > resf || miny > resf {
            continue;
        }
        // pixel centers at i + 0.5
        let x0 = (minx - half).ceil().max(S::zero()).to_usize().unwrap_or(0);
        let y0 = (miny - half).ceil().max(S::zero()).to_usize().unwrap_or(0);
        let x1 = (maxx - half).floor().min(resf - S::one()).to_i64().unwrap_or(-1);
        let y1 = (maxy - half).floor().min(resf - S::one()).to_i64().unwrap_or(-1);
        if x1 < x0 as i64 || y1 < y0 as i64 {
            continue;
        }
        let inv_depth = [S::one() / proj[0].1, S::one() / proj[1].1, S::one() / proj[2].1];
        let uvs = mesh.corner_uvs(tri);
        let normal = mesh.face_normal(tri);
        for py in y0..=y1 as usize {
            let cy = S::from_usize_lossy(py) + half;
            for px in x0..=x1 as usize {
                let c = [S::from_usize_lossy(px) + half, cy];
                let l0 = edge(p1, p2, c) / area;
                let l1 = edge(p2, p0, c) / area;
                let l2 = edge(p0, p1, c) / area;
                if l0 < S::zero() || l1 < S::zero() || l2 < S::zero() {
                    continue;
                }
                let q = [l0 * inv_depth[0], l1 * inv_depth[1], l2 * inv_depth[2]];
                let s = q[0] + q[1] + q[2];
                let depth = S::one() / s;
                let i = py * res + px;
                if !(depth < frame.depth[i]) {
                    continue;
                }
                let b = [q[0] / s, q[1] / s, q[2] / s];
                let uv = [
                    b[0] * uvs[0][0] + b[1] * uvs[1][0] + b[2] * uvs[2][0],
                    b[0] * uvs[0][1] + b[1] * uvs[1][1] + b[2] * uvs[2][1],
                ];
                frame.depth[i] = depth;
                frame.face_id[i] = tri as u32;
                frame.bary[i] = b;
                frame.uv[i] = uv;
                let rgb = match mode {
                    RenderMode::Textured => {
                        let (tx, ty) = uv_to_texel(uv, atlas.width(), atlas.height());
                        atlas.rgb(tx, ty)
                    }
                    RenderMode::Geometry => {
                        let cos = dot3(normal, cam.ray_dir(px, py)).abs().as_f64();
                        let g = (40.0 + 215.0 * cos).round().clamp(0.0, 255.0) as u8;
                        [g, g, g]
                    }
                };
                frame.color.set_rgb(px, py, rgb);
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::mesh::Triangle;

    fn flat_tri(z: f64, scale: f64) -> Vec<[f64; 3]> {
        vec![[-scale, -scale, z], [scale * 3.0, -scale, z], [-scale, scale * 3.0, z]]
    }

    #[test]
    fn full_screen_triangle_covers_all_pixels() {
        // huge triangle in z=0 plane; skip normalization to keep it full-screen
        let pos = flat_tri(0.0, 10.0);
        let uvs = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let mesh = TexturedMesh::new(pos, uvs, vec![Triangle { v: [0, 1, 2], t: [0, 1, 2] }], Image::filled(2, 2, &[9, 9, 9, 255])).unwrap();
        let spec = ViewSpec { theta: 0.0, phi: 0.0, fov: 45.0, distance: 3.0, resolution: 4 };
        let f = render(&mesh, &spec, RenderMode::Textured);
        assert_eq!(f.foreground_count(), 16);
        for i in 0..16 {
            assert_eq!(f.face_id[i], 0);
            let s: f64 = f.bary[i].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nearer_triangle_wins_depth_test() {
        let mut pos = flat_tri(-1.0, 10.0);
        pos.extend(flat_tri(0.0, 10.0));
        let uvs = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let tris = vec![Triangle { v: [0, 1, 2], t: [0, 1, 2] }, Triangle { v: [3, 4, 5], t: [0, 1, 2] }];
        let mesh = TexturedMesh::new(pos, uvs, tris, Image::filled(2, 2, &[9, 9, 9, 255])).unwrap();
        let spec = ViewSpec { theta: 0.0, phi: 0.0, fov: 45.0, distance: 3.0, resolution: 8 };
        let f = render(&mesh, &spec, RenderMode::Geometry);
        // camera at +Z: the z = 0 triangle is nearer
        assert!(f.face_id.iter().all(|&id| id == 1));
        assert!((f.depth[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let mesh = TexturedMesh::<f32>::new(vec![], vec![], vec![], Image::filled(1, 1, &[0, 0, 0, 255])).unwrap();
        let spec = ViewSpec::new(0.0, 0.0, CameraDefaults { resolution: 16, ..Default::default() });
        let f = render(&mesh, &spec, RenderMode::Textured);
        assert_eq!(f.foreground_count(), 0);
        assert!(f.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn presets_match_angles() {
        let cam = CameraDefaults::default();
        let iv = intent_views(cam);
        assert_eq!(iv.iter().map(|v| v.phi).collect::<Vec<_>>(), vec![0.0, 90.0, 180.0, 270.0]);
        assert!(iv.iter().all(|v| v.theta == 0.0));
        for w in iv.windows(2) {
            assert_eq!(w[1].phi - w[0].phi, 90.0);
        }
        let cv = coverage_views(cam);
        assert_eq!(cv.len(), 8);
        assert_eq!(cv[..6].iter().map(|v| v.phi).collect::<Vec<_>>(), vec![0.0, 60.0, 120.0, 180.0, 240.0, 300.0]);
        assert_eq!((cv[6].theta, cv[7].theta), (90.0, -90.0));
        assert!(cv.iter().chain(&iv).all(|v| v.validate(1.0).is_ok()));
    }

    #[test]
    fn view_ids_roundtrip() {
        let cam = CameraDefaults::default();
        for v in coverage_views(cam) {
            assert_eq!(ViewSpec::from_id(&v.id(), cam), Some(v));
        }
        assert_eq!(ViewSpec::new(-90.0, 0.0, cam).id(), "t-90_p0");
    }

    #[test]
    fn render_is_deterministic() {
        let mesh: TexturedMesh<f32> = fixtures::cube_charts(fixtures::brown_atlas(64));
        let spec = ViewSpec::new(20.0, 33.0, CameraDefaults { resolution: 64, ..Default::default() });
        let a = render(&mesh, &spec, RenderMode::Textured);
        let b = render(&mesh, &spec, RenderMode::Textured);
        assert_eq!(a.color, b.color);
        assert_eq!(a.face_id, b.face_id);
        assert_eq!(a.uv, b.uv);
    }

    #[test]
    fn frame_buffers_serialize() {
        let mesh: TexturedMesh<f32> = fixtures::cube_charts(fixtures::brown_atlas(64));
        let spec = ViewSpec::new(0.0, 0.0, CameraDefaults { resolution: 8, ..Default::default() });
        let f = render(&mesh, &spec, RenderMode::Textured);
        let dir = tempfile::tempdir().unwrap();
        f.write_dir(dir.path()).unwrap();
        let ids = std::fs::read(dir.path().join("faceid.u32")).unwrap();
        assert_eq!(ids.len(), 64 * 4);
        assert_eq!(u32::from_le_bytes(ids[..4].try_into().unwrap()), f.face_id[0]);
        assert_eq!(std::fs::read(dir.path().join("uv.f32")).unwrap().len(), 64 * 8);
        let spec_json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("spec.json")).unwrap()).unwrap();
        assert_eq!(spec_json["id"], "t0_p0");
    }
}
