//! Intent-prediction evaluation over a manifest of scribbled meshes with
//! ground-truth keywords.
//!
//! Each case may carry canned predictions (and distractor predictions) for
//! offline runs: they are turned into mock chat completions keyed by the
//! exact request the case produces. With a live chat backend the canned
//! fields are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use scribbletex_core::backend::{request_key, MockChat};
use scribbletex_core::fixtures::{brown_atlas, cube_charts};
use scribbletex_core::intent::{build_intent_request, IntentCase, IntentInputs, Templates};
use scribbletex_core::mesh::load_mesh;
use scribbletex_core::render::{render, render_with_atlas, CameraDefaults, RenderMode, ViewSpec};
use scribbletex_core::scribble::{draw_overlay, rasterize_strokes, Stroke};
use scribbletex_core::Mesh;

use crate::error::PipelineError;

const BUNDLED: &str = include_str!("../assets/intent_cases.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub name: String,
    /// `builtin:cube`, or an OBJ path relative to the manifest.
    pub mesh: String,
    /// Atlas PNG path relative to the manifest; required for OBJ meshes.
    #[serde(default)]
    pub atlas: Option<String>,
    pub strokes: Vec<Stroke>,
    #[serde(default)]
    pub hint: Option<String>,
    pub truth_keywords: Vec<String>,
    /// Canned ranked semantics for mock runs.
    #[serde(default)]
    pub predictions: Vec<String>,
    /// Canned semantics that must all be judged wrong.
    #[serde(default)]
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub cases: Vec<ManifestCase>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED).expect("bundled manifest parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }
}

fn case_mesh(case: &ManifestCase, base: &Path) -> Result<Mesh, PipelineError> {
    if case.mesh == "builtin:cube" {
        return Ok(cube_charts(brown_atlas(256)));
    }
    let atlas = case
        .atlas
        .as_ref()
        .ok_or_else(|| PipelineError::Validation(format!("case {}: an OBJ mesh needs an atlas", case.name)))?;
    let obj = base.join(&case.mesh);
    load_mesh(&obj, base.join(atlas)).map_err(|e| PipelineError::from_mesh(&obj, e))
}

/// Render the intent views and the scribble overlay for one case. All
/// strokes must share a view; the largest region found is used.
pub fn case_inputs(case: &ManifestCase, base: &Path, cam: CameraDefaults, intent_views: &[ViewSpec]) -> Result<IntentInputs, PipelineError> {
    let mesh = case_mesh(case, base)?;
    let view_id = &case.strokes.first().ok_or_else(|| PipelineError::Validation(format!("case {}: no strokes", case.name)))?.view_id;
    let spec = ViewSpec::from_id(view_id, cam).ok_or_else(|| PipelineError::Validation(format!("unknown view id {view_id:?}")))?;
    let frame = render(&mesh, &spec, RenderMode::Geometry);
    let mut regions = rasterize_strokes(&case.strokes, &frame)?;
    regions.sort_by_key(|r| std::cmp::Reverse(r.screen_mask.count()));
    let mut region = regions.into_iter().next().ok_or_else(|| PipelineError::Validation(format!("case {}: empty scribble", case.name)))?;
    region.hint = case.hint.clone();
    let base_img = render_with_atlas(&mesh, mesh.atlas(), &spec, RenderMode::Textured).color;
    let views = intent_views.iter().map(|v| render(&mesh, v, RenderMode::Textured).color).collect();
    Ok(IntentInputs { views, overlay: draw_overlay(&base_img, &region), color: region.color, hint: region.hint })
}

pub fn build_cases(manifest: &Manifest, cam: CameraDefaults, intent_views: &[ViewSpec]) -> Result<Vec<IntentCase>, PipelineError> {
    manifest
        .cases
        .iter()
        .map(|c| {
            Ok(IntentCase { inputs: case_inputs(c, &manifest.base_dir, cam, intent_views)?, truth_keywords: c.truth_keywords.clone() })
        })
        .collect()
}

fn completion(semantics: &[String]) -> String {
    let preds: Vec<_> = semantics
        .iter()
        .enumerate()
        .map(|(k, s)| json!({ "rank": k + 1, "semantic": s, "rationale": "canned" }))
        .collect();
    json!({ "predictions": preds }).to_string()
}

/// Which canned field a mock chat should answer with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Canned {
    Predictions,
    Distractors,
}

/// Mock chat answering every case's intent request (at `n`) with its canned
/// semantics.
pub fn canned_chat(manifest: &Manifest, cases: &[IntentCase], templates: &Templates, n: usize, which: Canned) -> Result<MockChat, PipelineError> {
    let mut chat = MockChat::canned_only();
    for (m, c) in manifest.cases.iter().zip(cases) {
        let semantics = match which {
            Canned::Predictions => &m.predictions,
            Canned::Distractors => &m.distractors,
        };
        if semantics.is_empty() {
            continue;
        }
        let req = build_intent_request(templates, &c.inputs, n).map_err(|e| PipelineError::Validation(e.to_string()))?;
        chat.insert(request_key(&req), vec![completion(semantics)]);
    }
    Ok(chat)
}
