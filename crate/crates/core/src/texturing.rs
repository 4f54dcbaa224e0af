//! Tiling a texture patch into the edit region and blending the seams with
//! multi-view inpainting.
//!
//! For a region with bounding box `W × H` and a `w × h` patch, the grid holds
//! `N_w = ⌊W/w⌋` by `N_h = ⌊H/h⌋` patches separated by equal gaps
//! `Δx = (W − N_w·w)/(N_w + 1)` (likewise `Δy`), with origins
//! `x_i = i·w + (i+1)·Δx`, `y_j = j·h + (j+1)·Δy` relative to the box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{inpaint, BackendError, InpaintBackend, InpaintRequest};
use crate::image::{Image, Mask, MaskIntegral, Rect, Rgb, TexelMask};
use crate::mesh::TexturedMesh;
use crate::morph::{components8, diffusion_fill, erode_disk, Border};
use crate::render::{render_with_atlas, Camera, RenderMode, ViewSpec};
use crate::scalar::{PlanScalar, Real};

pub const DEFAULT_EROSION_RADIUS: usize = 2;
pub const MIN_PATCH_SIDE: usize = 16;
pub const MAX_PATCH_SIDE: usize = 256;
/// A later view replaces a back-projected texel only if its obliquity weight
/// beats the stored one by more than this.
pub const OVERWRITE_MARGIN: f32 = 0.1;
/// Views whose gap covers less than this fraction of the frame are skipped.
pub const MIN_GAP_FRACTION: f64 = 0.002;

#[derive(Debug, Error)]
pub enum TexturingError {
    #[error("edit region is empty")]
    EmptyRegion,
    #[error("patch {patch:?} does not fit the region box {bbox:?}")]
    PatchLargerThanRegion { patch: (usize, usize), bbox: Rect },
    #[error("patch dimensions must be at least 1×1")]
    ZeroPatch,
    #[error("inpainting failed in view {view_id}: {source}")]
    Inpaint {
        view_id: String,
        source: BackendError,
        /// Atlas and weights as of the last completed view.
        state: Box<IntegrateState>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    Full,
    Partial,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement<S> {
    pub i: usize,
    pub j: usize,
    /// Origin relative to the bounding box, unrounded.
    pub x: S,
    pub y: S,
    pub kind: PlacementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan<S> {
    pub bbox: Rect,
    pub patch: (usize, usize),
    pub counts: (usize, usize),
    pub spacing: (S, S),
    pub positions: Vec<Placement<S>>,
}

/// Origin `k·p + (k+1)·(L − n·p)/(n+1)` evaluated with a single division.
fn origin<S: PlanScalar>(k: usize, p: usize, n: usize, len: usize) -> S {
    let rem = len - n * p;
    S::from_count(k * p * (n + 1) + (k + 1) * rem) / S::from_count(n + 1)
}

impl<S: PlanScalar> PlacementPlan<S> {
    /// The uniform grid for a box, every position marked Full.
    pub fn grid(bbox: Rect, patch: (usize, usize)) -> Result<Self, TexturingError> {
        let (w, h) = patch;
        if w == 0 || h == 0 {
            return Err(TexturingError::ZeroPatch);
        }
        if w > bbox.w || h > bbox.h {
            return Err(TexturingError::PatchLargerThanRegion { patch, bbox });
        }
        let (nw, nh) = (bbox.w / w, bbox.h / h);
        let spacing = (
            (S::from_count(bbox.w) - S::from_count(nw * w)) / S::from_count(nw + 1),
            (S::from_count(bbox.h) - S::from_count(nh * h)) / S::from_count(nh + 1),
        );
        let mut positions = Vec::with_capacity(nw * nh);
        for j in 0..nh {
            let y = origin::<S>(j, h, nh, bbox.h);
            for i in 0..nw {
                positions.push(Placement { i, j, x: origin(i, w, nw, bbox.w), y: y.clone(), kind: PlacementKind::Full });
            }
        }
        Ok(Self { bbox, patch, counts: (nw, nh), spacing, positions })
    }

    /// Texel rectangle a position occupies once its origin is rounded to the
    /// nearest texel (halves up), in atlas coordinates.
    pub fn texel_rect(&self, p: &Placement<S>) -> Rect {
        let x = p.x.round_half_up();
        let y = p.y.round_half_up();
        debug_assert!(x >= 0 && y >= 0);
        Rect::new(self.bbox.x + x as usize, self.bbox.y + y as usize, self.patch.0, self.patch.1)
    }

    /// Classify every position against `region` by its rounded rectangle.
    pub fn classify(&mut self, region: &Mask) {
        let integral = MaskIntegral::new(region);
        let rects: Vec<Rect> = self.positions.iter().map(|p| self.texel_rect(p)).collect();
        for (p, r) in self.positions.iter_mut().zip(rects) {
            let hit = integral.count(r);
            p.kind = if hit == r.area() {
                PlacementKind::Full
            } else if hit == 0 {
                PlacementKind::Discarded
            } else {
                PlacementKind::Partial
            };
        }
    }

    pub fn count_kind(&self, kind: PlacementKind) -> usize {
        self.positions.iter().filter(|p| p.kind == kind).count()
    }
}

/// Grid over the bounding box of `region`, classified against it.
pub fn plan_placement<S: PlanScalar>(region: &TexelMask, patch: (usize, usize)) -> Result<PlacementPlan<S>, TexturingError> {
    let bbox = region.bbox().ok_or(TexturingError::EmptyRegion)?;
    let mut plan = PlacementPlan::grid(bbox, patch)?;
    plan.classify(region);
    Ok(plan)
}

/// Square patch side for a `W × H` box: half the minor side, clamped to
/// [16, 256].
pub fn default_patch_side(w: usize, h: usize) -> usize {
    (w.min(h) / 2).clamp(MIN_PATCH_SIDE, MAX_PATCH_SIDE)
}

/// Patch dimensions shrunk so they fit the box.
pub fn fit_patch(patch: (usize, usize), bbox: Rect) -> (usize, usize) {
    (patch.0.min(bbox.w).max(1), patch.1.min(bbox.h).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchSource {
    Generated { image_index: usize, rect: Rect },
    Atlas { rect: Rect },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexturePatch {
    pub pixels: Image,
    pub mean_color: Rgb,
    pub source: PatchSource,
}

impl TexturePatch {
    pub fn new(pixels: Image, source: PatchSource) -> Self {
        let pixels = pixels.to_rgb();
        let m = pixels.mean_rgb(Rect::new(0, 0, pixels.width(), pixels.height()));
        Self { mean_color: m.map(|c| c.round().clamp(0.0, 255.0) as u8), pixels, source }
    }

    /// Pixels resampled to `dims` (unchanged when they already match).
    pub fn resized(&self, dims: (usize, usize)) -> Image {
        if self.pixels.dims() == dims {
            self.pixels.clone()
        } else {
            self.pixels.resize_bilinear(dims.0, dims.1)
        }
    }
}

/// One connected piece of the region inside a single UV island, with its
/// own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPlan {
    pub island: usize,
    pub region: Mask,
    pub plan: PlacementPlan<f64>,
}

/// Split the region by island (a texel goes to the first island containing
/// it), then into 8-connected components, and plan each piece with the
/// default patch size. Region texels outside every island are left unplanned.
pub fn plan_components(island_masks: &[Mask], region: &TexelMask, patch_side: Option<usize>) -> Vec<ComponentPlan> {
    let mut remaining = region.clone();
    let mut out = Vec::new();
    for (k, island) in island_masks.iter().enumerate() {
        let part = remaining.intersection(island);
        if part.is_empty() {
            continue;
        }
        remaining.subtract(&part);
        for comp in components8(&part) {
            let bbox = comp.bbox().expect("component is non-empty");
            let side = patch_side.unwrap_or_else(|| default_patch_side(bbox.w, bbox.h));
            let patch = fit_patch((side, side), bbox);
            let plan = plan_placement(&comp, patch).expect("fitted patch always fits its component");
            out.push(ComponentPlan { island: k, region: comp, plan });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StampOutcome {
    pub atlas: Image,
    /// Texels that received patch pixels.
    pub stamped: TexelMask,
    /// Region texels left for inpainting.
    pub gap: TexelMask,
}

/// Copy `patch` (already at plan size) into each kept footprint, shrunk by a
/// disk erosion, into `atlas`. Returns the stamped texels.
pub fn stamp_plan<S: PlanScalar>(
    atlas: &mut Image,
    plan: &PlacementPlan<S>,
    region: &TexelMask,
    patch: &Image,
    erosion_radius: usize,
) -> TexelMask {
    assert_eq!(patch.dims(), plan.patch, "patch must be resampled to the plan size");
    assert_eq!(atlas.dims(), region.dims(), "region must match the atlas");
    let mut stamped = TexelMask::new(region.width(), region.height());
    for p in &plan.positions {
        if p.kind == PlacementKind::Discarded {
            continue;
        }
        let r = plan.texel_rect(p);
        let local = Mask::from_fn(r.w, r.h, |x, y| region.get(r.x + x, r.y + y));
        let eroded = erode_disk(&local, erosion_radius, Border::Clear);
        for (x, y) in eroded.iter_set() {
            atlas.set_rgb(r.x + x, r.y + y, patch.rgb(x, y));
            stamped.set(r.x + x, r.y + y, true);
        }
    }
    stamped
}

/// Stamp a single plan; the gap is the region minus stamped texels.
pub fn stamp_patches<S: PlanScalar>(
    atlas: &Image,
    plan: &PlacementPlan<S>,
    region: &TexelMask,
    patch: &TexturePatch,
    erosion_radius: usize,
) -> StampOutcome {
    let mut out = atlas.clone();
    let stamped = stamp_plan(&mut out, plan, region, &patch.resized(plan.patch), erosion_radius);
    StampOutcome { gap: region.difference(&stamped), atlas: out, stamped }
}

/// Stamp every component plan; the gap covers the whole region minus stamped
/// texels, unplanned texels included.
pub fn stamp_components(
    atlas: &Image,
    plans: &[ComponentPlan],
    region: &TexelMask,
    patch: &TexturePatch,
    erosion_radius: usize,
) -> StampOutcome {
    let mut out = atlas.clone();
    let mut stamped = TexelMask::new(region.width(), region.height());
    for cp in plans {
        let s = stamp_plan(&mut out, &cp.plan, &cp.region, &patch.resized(cp.plan.patch), erosion_radius);
        stamped.union_with(&s);
    }
    StampOutcome { gap: region.difference(&stamped), atlas: out, stamped }
}

/// Resumable blending state.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateState {
    pub atlas: Image,
    /// Obliquity weight of the view that last wrote each texel; `-inf` where
    /// nothing has been written.
    pub weights: Vec<f32>,
    /// Index of the next view to process.
    pub next_view: usize,
}

impl IntegrateState {
    pub fn new(atlas: Image) -> Self {
        let n = atlas.width() * atlas.height();
        Self { atlas, weights: vec![f32::NEG_INFINITY; n], next_view: 0 }
    }

    pub fn written(&self) -> Mask {
        let (w, h) = self.atlas.dims();
        Mask::from_fn(w, h, |x, y| self.weights[y * w + x] > f32::NEG_INFINITY)
    }

    pub fn weights_to_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn weights_from_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
        bytes.len().is_multiple_of(4).then(|| bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratePass {
    pub view_id: String,
    pub skipped: bool,
    pub screen_pixels: usize,
    pub texels_written: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOutcome {
    pub atlas: Image,
    pub passes: Vec<IntegratePass>,
    /// Gap texels no view reached, filled in texture space.
    pub residual: TexelMask,
    pub inpaint_calls: usize,
}

/// Per-view inputs for the inpainting pass.
pub struct IntegrateParams<'a> {
    pub prompt: &'a str,
    pub views: &'a [ViewSpec],
    /// Seed for the view at a given index.
    pub seed_for_view: &'a dyn Fn(usize) -> u64,
}

/// Blend the gap texels through multi-view inpainting.
///
/// Each view renders the current atlas, inpaints the pixels showing gap
/// texels that this view sees more head-on than whatever wrote them before,
/// and writes the best pixel per texel back. Gap texels no view wrote are
/// diffusion-filled in texture space. `on_pass` runs after every view with
/// the state to persist.
pub fn integrate<S: Real>(
    mesh: &TexturedMesh<S>,
    mut state: IntegrateState,
    gap: &TexelMask,
    params: &IntegrateParams<'_>,
    backend: &dyn InpaintBackend,
    on_pass: &mut dyn FnMut(&IntegrateState, &IntegratePass),
) -> Result<IntegrateOutcome, TexturingError> {
    let (aw, ah) = state.atlas.dims();
    assert_eq!(gap.dims(), (aw, ah), "gap must match the atlas");
    let mut passes = Vec::new();
    let mut calls = 0;
    if gap.is_empty() {
        return Ok(IntegrateOutcome { atlas: state.atlas, passes, residual: gap.clone(), inpaint_calls: 0 });
    }
    while state.next_view < params.views.len() {
        let k = state.next_view;
        let spec = &params.views[k];
        let frame = render_with_atlas(mesh, &state.atlas, spec, RenderMode::Textured);
        let cam = Camera::<S>::new(spec);
        let res = frame.resolution();
        let mut screen = Mask::new(res, res);
        let mut pix_weight = vec![0f32; res * res];
        for y in 0..res {
            for x in 0..res {
                let Some((tx, ty)) = frame.texel_at(x, y, aw, ah) else { continue };
                if !gap.get(tx, ty) {
                    continue;
                }
                let n = mesh.face_normal(frame.face_id[y * res + x] as usize);
                let d = cam.ray_dir(x, y);
                let w = (n[0] * d[0] + n[1] * d[1] + n[2] * d[2]).abs().as_f64() as f32;
                if w > state.weights[ty * aw + tx] + OVERWRITE_MARGIN {
                    screen.set(x, y, true);
                    pix_weight[y * res + x] = w;
                }
            }
        }
        let count = screen.count();
        let mut pass = IntegratePass { view_id: spec.id(), skipped: true, screen_pixels: count, texels_written: 0 };
        if (count as f64) >= MIN_GAP_FRACTION * (res * res) as f64 {
            let req = InpaintRequest {
                image: frame.color.to_rgb(),
                mask: screen.clone(),
                prompt: params.prompt.to_string(),
                seed: (params.seed_for_view)(k),
            };
            calls += 1;
            let out = match inpaint(backend, &req) {
                Ok(img) => img,
                Err(source) => return Err(TexturingError::Inpaint { view_id: spec.id(), source, state: Box::new(state) }),
            };
            // Best pixel per texel; first in raster order wins ties.
            let mut best: Vec<Option<(f32, Rgb)>> = vec![None; aw * ah];
            for (x, y) in screen.iter_set() {
                let (tx, ty) = frame.texel_at(x, y, aw, ah).expect("masked pixels are foreground");
                let w = pix_weight[y * res + x];
                let slot = &mut best[ty * aw + tx];
                if slot.is_none_or(|(bw, _)| w > bw) {
                    *slot = Some((w, out.rgb(x, y)));
                }
            }
            for (i, b) in best.iter().enumerate() {
                if let Some((w, c)) = b {
                    state.atlas.set_rgb(i % aw, i / aw, *c);
                    state.weights[i] = *w;
                    pass.texels_written += 1;
                }
            }
            pass.skipped = false;
        }
        state.next_view += 1;
        on_pass(&state, &pass);
        passes.push(pass);
    }
    let residual = gap.difference(&state.written());
    let mut atlas = state.atlas;
    if !residual.is_empty() {
        let filled = diffusion_fill(&atlas.to_rgb(), &residual);
        for (x, y) in residual.iter_set() {
            atlas.set_rgb(x, y, filled.rgb(x, y));
        }
    }
    Ok(IntegrateOutcome { atlas, passes, residual, inpaint_calls: calls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockInpaint;
    use crate::fixtures::{view_aligned_distance, view_aligned_quad};
    use num_rational::Rational64;

    #[test]
    fn worked_example() {
        let plan = PlacementPlan::<f64>::grid(Rect::new(0, 0, 100, 50), (30, 20)).unwrap();
        assert_eq!(plan.counts, (3, 2));
        assert_eq!(plan.spacing.0, 2.5);
        assert!((plan.spacing.1 - 10.0 / 3.0).abs() < 1e-12);
        let xs: Vec<f64> = plan.positions.iter().filter(|p| p.j == 0).map(|p| p.x).collect();
        assert_eq!(xs, [2.5, 35.0, 67.5]);
        let exact = PlacementPlan::<Rational64>::grid(Rect::new(0, 0, 100, 50), (30, 20)).unwrap();
        assert_eq!(exact.positions[4].y, Rational64::new(80, 3));
    }

    #[test]
    fn exact_fit_and_exact_division() {
        let plan = plan_placement::<f64>(&Mask::full(16, 16), (16, 16)).unwrap();
        assert_eq!(plan.counts, (1, 1));
        assert_eq!(plan.spacing, (0.0, 0.0));
        assert_eq!((plan.positions[0].x, plan.positions[0].y), (0.0, 0.0));
        assert_eq!(plan.positions[0].kind, PlacementKind::Full);
        let tiled = PlacementPlan::<f64>::grid(Rect::new(0, 0, 90, 10), (30, 10)).unwrap();
        assert_eq!(tiled.spacing.0, 0.0);
        assert_eq!(tiled.positions.iter().map(|p| p.x).collect::<Vec<_>>(), [0.0, 30.0, 60.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(plan_placement::<f64>(&Mask::new(4, 4), (1, 1)), Err(TexturingError::EmptyRegion)));
        assert!(matches!(plan_placement::<f64>(&Mask::full(4, 4), (5, 1)), Err(TexturingError::PatchLargerThanRegion { .. })));
        assert!(matches!(plan_placement::<f64>(&Mask::full(4, 4), (0, 1)), Err(TexturingError::ZeroPatch)));
    }

    #[test]
    fn left_half_region() {
        let region = Mask::from_fn(100, 40, |x, _| x < 50);
        // Box is only the left half, so force it to the full width through a
        // corner texel on the right.
        let mut r = region.clone();
        r.set(99, 39, true);
        let plan = plan_placement::<f64>(&r, (20, 20)).unwrap();
        let col_kind = |i: usize| plan.positions.iter().filter(|p| p.i == i).map(|p| p.kind).collect::<Vec<_>>();
        assert!(col_kind(0).iter().all(|k| *k == PlacementKind::Full));
        assert!(col_kind(2).iter().all(|k| *k == PlacementKind::Partial));
        assert!(col_kind(3).iter().all(|k| *k == PlacementKind::Discarded));
    }

    #[test]
    fn erosion_shrinks_rectangle() {
        let region = Mask::from_rect(40, 30, Rect::new(5, 5, 30, 20));
        let plan = plan_placement::<f64>(&region, (30, 20)).unwrap();
        let patch = TexturePatch::new(Image::filled(30, 20, &[200, 10, 10]), PatchSource::Atlas { rect: Rect::new(0, 0, 30, 20) });
        let atlas = Image::filled(40, 30, &[1, 2, 3, 255]);
        let out = stamp_patches(&atlas, &plan, &region, &patch, 2);
        assert_eq!(out.stamped, Mask::from_rect(40, 30, Rect::new(7, 7, 26, 16)));
        assert_eq!(out.gap.count(), 30 * 20 - 26 * 16);
        let zero = stamp_patches(&atlas, &plan, &region, &patch, 0);
        assert!(zero.gap.is_empty());
        assert_eq!(zero.atlas.rgb(5, 5), [200, 10, 10]);
        assert_eq!(zero.atlas.rgb(0, 0), [1, 2, 3]);
    }

    #[test]
    fn components_split_by_island() {
        let a = Mask::from_rect(64, 64, Rect::new(0, 0, 32, 64));
        let b = Mask::from_rect(64, 64, Rect::new(32, 0, 32, 64));
        let region = Mask::from_rect(64, 64, Rect::new(10, 10, 40, 20));
        let plans = plan_components(&[a, b], &region, None);
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].plan.bbox, Rect::new(10, 10, 22, 20));
        assert_eq!(plans[1].plan.bbox, Rect::new(32, 10, 18, 20));
        assert_eq!(plans[0].plan.patch, (16, 16));
    }

    #[test]
    fn empty_gap_is_a_no_op() {
        let mesh = view_aligned_quad::<f64>(Image::filled(8, 8, &[5, 5, 5, 255]));
        let views = [ViewSpec { theta: 0.0, phi: 0.0, fov: 45.0, distance: view_aligned_distance(45.0), resolution: 8 }];
        let backend = MockInpaint::default();
        let p = IntegrateParams { prompt: "x", views: &views, seed_for_view: &|k| k as u64 };
        let out = integrate(&mesh, IntegrateState::new(mesh.atlas().clone()), &Mask::new(8, 8), &p, &backend, &mut |_, _| {}).unwrap();
        assert_eq!(out.atlas, *mesh.atlas());
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn aligned_quad_matches_texture_space_fill() {
        let n = 48;
        let mut atlas = Image::new(n, n, 4);
        for y in 0..n {
            for x in 0..n {
                atlas.set_rgb(x, y, [(x * 5) as u8, (y * 5) as u8, 90]);
            }
        }
        let mesh = view_aligned_quad::<f64>(atlas.clone());
        let outer = Mask::from_rect(n, n, Rect::new(10, 12, 24, 20));
        let ring = outer.difference(&Mask::from_rect(n, n, Rect::new(12, 14, 20, 16)));
        let views = [ViewSpec { theta: 0.0, phi: 0.0, fov: 45.0, distance: view_aligned_distance(45.0), resolution: n }];
        let p = IntegrateParams { prompt: "x", views: &views, seed_for_view: &|_| 0 };
        let out = integrate(&mesh, IntegrateState::new(atlas.clone()), &ring, &p, &MockInpaint::default(), &mut |_, _| {}).unwrap();
        let direct = diffusion_fill(&atlas.to_rgb(), &ring);
        assert!(out.residual.is_empty());
        for y in 0..n {
            for x in 0..n {
                if ring.get(x, y) {
                    assert_eq!(out.atlas.rgb(x, y), direct.rgb(x, y), "({x},{y})");
                } else {
                    assert_eq!(out.atlas.pixel(x, y), atlas.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn invisible_gap_uses_texture_space_fallback() {
        let mesh = view_aligned_quad::<f64>(Image::filled(16, 16, &[50, 60, 70, 255]));
        let gap = Mask::from_rect(16, 16, Rect::new(4, 4, 3, 3));
        let p = IntegrateParams { prompt: "x", views: &[], seed_for_view: &|_| 0 };
        let out = integrate(&mesh, IntegrateState::new(mesh.atlas().clone()), &gap, &p, &MockInpaint::default(), &mut |_, _| {}).unwrap();
        assert_eq!(out.residual, gap);
        assert_eq!(out.atlas.rgb(5, 5), [50, 60, 70]);
    }
}
