//! Moving masks between screen space and the texture atlas, and the
//! multi-view refinement loop driven by a segmentation backend.

use std::path::Path;

use thiserror::Error;

use crate::backend::{segment, BackendError, SegmentCandidate, SegmentRequest, SegmentationBackend};
use crate::image::{ImageError, Mask, TexelMask};
use crate::mesh::TexturedMesh;
use crate::morph::close3x3;
use crate::render::{render, RenderMode, ViewFrame, ViewSpec};
use crate::scalar::Real;
use crate::scribble::{ScribbleError, ScribbleRegion};

/// Minimum fraction of the prompt a segment must contain to count as
/// enclosing it.
pub const ENCLOSE_FRACTION: f64 = 0.9;
/// Views where the projected region covers less than this fraction of the
/// frame are skipped.
pub const MIN_VIEW_FRACTION: f64 = 0.005;

/// Texels sampled by the masked foreground pixels, before closing.
pub fn lift_raw<S: Real>(mask: &Mask, frame: &ViewFrame<S>, atlas_dims: (usize, usize)) -> TexelMask {
    let (aw, ah) = atlas_dims;
    let mut out = TexelMask::new(aw, ah);
    let res = frame.resolution();
    assert_eq!(mask.dims(), (res, res), "mask must match frame resolution");
    for (x, y) in mask.iter_set() {
        if let Some((tx, ty)) = frame.texel_at(x, y, aw, ah) {
            out.set(tx, ty, true);
        }
    }
    out
}

/// Lift a screen mask into texture space and close one-texel sampling holes.
pub fn screen_to_texel<S: Real>(mask: &Mask, frame: &ViewFrame<S>, atlas_dims: (usize, usize)) -> TexelMask {
    let raw = lift_raw(mask, frame, atlas_dims);
    if raw.is_empty() {
        return raw;
    }
    close3x3(&raw)
}

/// Foreground pixels whose sampled texel is set in `tmask`.
pub fn texel_to_screen<S: Real>(tmask: &TexelMask, frame: &ViewFrame<S>) -> Mask {
    let (aw, ah) = tmask.dims();
    let res = frame.resolution();
    Mask::from_fn(res, res, |x, y| frame.texel_at(x, y, aw, ah).is_some_and(|(tx, ty)| tmask.get(tx, ty)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStep {
    pub view_id: String,
    /// Prompt sent to segmentation in this view.
    pub input: Mask,
    /// Segment accepted from the backend.
    pub segment: Mask,
    /// Accumulated texel mask after this step.
    pub texels: TexelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub steps: Vec<RefinementStep>,
    pub final_mask: TexelMask,
}

impl RefinementTrace {
    /// Write `NN_<view>_{input,segment,texels}.png` per step plus `final.png`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ImageError> {
        save_steps(&self.steps, dir.as_ref())?;
        self.final_mask.save_png(dir.as_ref().join("final.png"))
    }
}

fn save_steps(steps: &[RefinementStep], dir: &Path) -> Result<(), ImageError> {
    std::fs::create_dir_all(dir)?;
    for (k, s) in steps.iter().enumerate() {
        let stem = format!("{k:02}_{}", s.view_id);
        s.input.save_png(dir.join(format!("{stem}_input.png")))?;
        s.segment.save_png(dir.join(format!("{stem}_segment.png")))?;
        s.texels.save_png(dir.join(format!("{stem}_texels.png")))?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Scribble(#[from] ScribbleError),
    #[error("the scribble view {expected} must come first in the view order, got {got:?}")]
    ViewOrder { expected: String, got: Option<String> },
    #[error("segmentation failed in view {view_id} after {} steps: {source}", partial.len())]
    Segmentation {
        view_id: String,
        source: BackendError,
        partial: Vec<RefinementStep>,
    },
}

/// Smallest candidate containing at least 90% of the prompt, else the one
/// with the largest overlap (earliest wins ties). Candidates arrive sorted by
/// area.
pub fn select_enclosing(candidates: &[SegmentCandidate], prompt: &Mask) -> Option<usize> {
    let need = ENCLOSE_FRACTION * prompt.count() as f64;
    if let Some(k) = candidates.iter().position(|c| c.mask.intersection_count(prompt) as f64 >= need) {
        return Some(k);
    }
    let mut best: Option<(usize, usize)> = None;
    for (k, c) in candidates.iter().enumerate() {
        let ov = c.mask.intersection_count(prompt);
        if best.is_none_or(|(_, b)| ov > b) {
            best = Some((k, ov));
        }
    }
    best.map(|(k, _)| k)
}

/// Scribble view first, then the remaining views in order without repeats.
pub fn refinement_order(scribble_view: ViewSpec, views: &[ViewSpec]) -> Vec<ViewSpec> {
    let mut out = vec![scribble_view];
    for v in views {
        if !out.iter().any(|o| o.id() == v.id()) {
            out.push(*v);
        }
    }
    out
}

/// Grow the scribbled region across views with a segmentation backend.
///
/// `views[0]` must be the scribble's own view. Each view is rendered in
/// geometry mode; the first is prompted with the scribble itself, later ones
/// with the projection of the texel mask accumulated so far.
pub fn refine_region<S: Real>(
    mesh: &TexturedMesh<S>,
    region: &ScribbleRegion,
    views: &[ViewSpec],
    seg: &dyn SegmentationBackend,
) -> Result<RefinementTrace, RefineError> {
    if region.screen_mask.is_empty() {
        return Err(ScribbleError::EmptyScribble.into());
    }
    match views.first() {
        Some(v) if v.id() == region.view_id => {}
        other => return Err(RefineError::ViewOrder { expected: region.view_id.clone(), got: other.map(|v| v.id()) }),
    }
    let dims = mesh.atlas_dims();
    let mut steps: Vec<RefinementStep> = Vec::new();
    let mut texels = TexelMask::new(dims.0, dims.1);
    for (k, spec) in views.iter().enumerate() {
        if k > 0 && spec.id() == region.view_id {
            continue;
        }
        let frame = render(mesh, spec, RenderMode::Geometry);
        let prompt = if k == 0 {
            region.screen_mask.intersection(&frame.foreground_mask())
        } else {
            texel_to_screen(&texels, &frame)
        };
        let (w, h) = prompt.dims();
        if k == 0 && prompt.is_empty() {
            return Err(ScribbleError::EmptyScribble.into());
        }
        if k > 0 && (prompt.count() as f64) < MIN_VIEW_FRACTION * (w * h) as f64 {
            continue;
        }
        let fail = |source: BackendError, steps: Vec<RefinementStep>| RefineError::Segmentation {
            view_id: spec.id(),
            source,
            partial: steps,
        };
        let req = match SegmentRequest::from_mask(frame.color.clone(), prompt.clone()) {
            Ok(r) => r,
            Err(e) => return Err(fail(e, steps)),
        };
        let cands = match segment(seg, &req) {
            Ok(c) => c,
            Err(e) => return Err(fail(e, steps)),
        };
        let pick = select_enclosing(&cands, &prompt).expect("segment() never returns an empty list");
        let chosen = cands[pick].mask.clone();
        texels.union_with(&screen_to_texel(&chosen, &frame, dims));
        steps.push(RefinementStep { view_id: spec.id(), input: prompt, segment: chosen, texels: texels.clone() });
    }
    Ok(RefinementTrace { steps, final_mask: texels })
}

/// Follow the scribble strictly: lift it without any segmentation.
pub fn bypass_refinement<S: Real>(region: &ScribbleRegion, frame: &ViewFrame<S>, atlas_dims: (usize, usize)) -> Result<TexelMask, ScribbleError> {
    if region.screen_mask.is_empty() {
        return Err(ScribbleError::EmptyScribble);
    }
    Ok(screen_to_texel(&region.screen_mask, frame, atlas_dims))
}
