use std::path::Path;

use serde::{Deserialize, Serialize};

use scribbletex_backends::BackendsConfig;
use scribbletex_core::backend::{DEFAULT_GEN_SIZE, DEFAULT_GUIDANCE_SCALE};
use scribbletex_core::intent::{Lexicon, Templates};
use scribbletex_core::render::{coverage_views, intent_views, CameraDefaults, ViewSpec};
use scribbletex_core::texturing::DEFAULT_EROSION_RADIUS;

use crate::error::PipelineError;

/// Optional replacements for the built-in view presets, as (θ, φ) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ViewOverrides {
    pub intent: Option<Vec<[f64; 2]>>,
    pub coverage: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_intents: usize,
    pub n_global_prompts: usize,
    pub guidance_scale: f64,
    pub refinement_enabled: bool,
    pub erosion_radius: usize,
    pub seed: u64,
    /// Use an atlas patch instead of generating when its mean color is
    /// closer than this (RGB Euclidean, 0–255).
    pub atlas_priority_threshold: f64,
    pub gen_size: usize,
    pub negative_prompt: String,
    /// Fixed square patch side; default derives it from each region.
    pub patch_side: Option<usize>,
    pub templates_dir: Option<String>,
    pub lexicon_path: Option<String>,
    pub camera: CameraDefaults,
    pub views: ViewOverrides,
    pub backends: BackendsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_intents: 4,
            n_global_prompts: 4,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            refinement_enabled: true,
            erosion_radius: DEFAULT_EROSION_RADIUS,
            seed: 0,
            atlas_priority_threshold: 20.0,
            gen_size: DEFAULT_GEN_SIZE,
            negative_prompt: String::new(),
            patch_side: None,
            templates_dir: None,
            lexicon_path: None,
            camera: CameraDefaults::default(),
            views: ViewOverrides::default(),
            backends: BackendsConfig::all_mock(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Validation(m.to_string()));
        if self.n_intents == 0 {
            return bad("n_intents must be ≥ 1");
        }
        if self.n_global_prompts == 0 {
            return bad("n_global_prompts must be ≥ 1");
        }
        if !(self.guidance_scale > 0.0) {
            return bad("guidance_scale must be > 0");
        }
        if self.gen_size == 0 {
            return bad("gen_size must be ≥ 1");
        }
        if self.camera.resolution < 8 {
            return bad("camera.resolution must be ≥ 8");
        }
        if self.patch_side == Some(0) {
            return bad("patch_side must be ≥ 1");
        }
        for (name, views) in [("intent", &self.views.intent), ("coverage", &self.views.coverage)] {
            if let Some(v) = views {
                if v.is_empty() {
                    return Err(PipelineError::Validation(format!("views.{name} must not be empty")));
                }
            }
        }
        Ok(())
    }

    pub fn intent_views(&self) -> Vec<ViewSpec> {
        match &self.views.intent {
            Some(v) => v.iter().map(|[t, p]| ViewSpec::new(*t, *p, self.camera)).collect(),
            None => intent_views(self.camera),
        }
    }

    pub fn coverage_views(&self) -> Vec<ViewSpec> {
        match &self.views.coverage {
            Some(v) => v.iter().map(|[t, p]| ViewSpec::new(*t, *p, self.camera)).collect(),
            None => coverage_views(self.camera),
        }
    }

    pub fn templates(&self) -> Result<Templates, PipelineError> {
        match &self.templates_dir {
            Some(d) => Templates::load_dir(d).map_err(|e| PipelineError::io(Path::new(d), e)),
            None => Ok(Templates::default()),
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon, PipelineError> {
        match &self.lexicon_path {
            Some(p) => Lexicon::load(p).map_err(PipelineError::Validation),
            None => Ok(Lexicon::default()),
        }
    }
}
