//! On-disk session: source copies, rendered views, per-region artifacts and
//! state, the current atlas and the backend transcript.
//!
//! Layout under the session root:
//!
//! ```text
//! session.json              id, config snapshot, region ids
//! source/mesh.obj           uploaded files, never modified
//! source/atlas.png
//! atlas/current.png         latest edited atlas
//! views/<view>/...          renders served to the UI
//! regions/<r>/region.json   region record and state
//! regions/<r>/<stage>/...   stage artifacts
//! multi/<ids>/...           shared stamping and blending of several regions
//! transcript.jsonl          backend calls
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scribbletex_core::image::{Image, Mask, Rgb};
use scribbletex_core::mesh::mesh_from_obj_str;
use scribbletex_core::render::{render, render_with_atlas, RenderMode, ViewSpec};
use scribbletex_core::scribble::{draw_overlay, rasterize_strokes, ScribbleRegion, Stroke};
use scribbletex_core::Mesh;

use crate::config::PipelineConfig;
use crate::error::{ErrorRecord, PipelineError};

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Refine,
    Intent,
    Patch,
    Stamp,
    Integrate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Refine => "refine",
            Stage::Intent => "intent",
            Stage::Patch => "patch",
            Stage::Stamp => "stamp",
            Stage::Integrate => "integrate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Stage::Setup, Stage::Refine, Stage::Intent, Stage::Patch, Stage::Stamp, Stage::Integrate]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-region progress; only ever moves forward, except for an explicit
/// reset when the user picks a different intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionState {
    Scribbled,
    Refined,
    IntentPredicted,
    PatchChosen,
    Stamped,
    Integrated,
}

impl RegionState {
    /// State reached once `stage` completes.
    pub fn after(stage: Stage) -> Option<Self> {
        match stage {
            Stage::Setup => None,
            Stage::Refine => Some(Self::Refined),
            Stage::Intent => Some(Self::IntentPredicted),
            Stage::Patch => Some(Self::PatchChosen),
            Stage::Stamp => Some(Self::Stamped),
            Stage::Integrate => Some(Self::Integrated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    pub view_id: String,
    pub color: Rgb,
    pub hint: Option<String>,
    pub state: RegionState,
    pub chosen_rank: Option<usize>,
    pub error: Option<ErrorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub created_unix: u64,
    pub config: PipelineConfig,
    pub regions: Vec<String>,
}

pub const SOURCE_MESH: &str = "source/mesh.obj";
pub const SOURCE_ATLAS: &str = "source/atlas.png";
pub const CURRENT_ATLAS: &str = "atlas/current.png";
pub const TRANSCRIPT: &str = "transcript.jsonl";

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    std::fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    write_atomic(path, &serde_json::to_vec_pretty(v).expect("serializable"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), PipelineError> {
    write_atomic(path, &img.encode_png())
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<(), PipelineError> {
    write_png(path, &m.to_image())
}

pub fn read_png(path: &Path) -> Result<Image, PipelineError> {
    Image::load_png(path).map_err(|e| PipelineError::from_image(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask, PipelineError> {
    Ok(Mask::from_image(&read_png(path)?))
}

/// Session ids are the directory names.
fn session_id(root: &Path) -> String {
    root.file_name().and_then(|n| n.to_str()).unwrap_or("session").to_string()
}

#[derive(Debug)]
pub struct Session {
    root: PathBuf,
    pub meta: SessionMeta,
    mesh: Mesh,
}

impl Session {
    /// Create a session from mesh and atlas bytes; the directory must not
    /// already hold a session.
    pub fn create_from_bytes(root: impl AsRef<Path>, obj: &[u8], atlas_png: &[u8], config: PipelineConfig) -> Result<Self, PipelineError> {
        let root = root.as_ref().to_path_buf();
        config.validate()?;
        if root.join("session.json").exists() {
            return Err(PipelineError::Validation(format!("{} already holds a session", root.display())));
        }
        let text = std::str::from_utf8(obj).map_err(|_| PipelineError::Validation("mesh is not UTF-8 text".into()))?;
        let atlas = Image::decode_png(atlas_png).map_err(|e| PipelineError::Validation(format!("atlas: {e}")))?;
        let mesh: Mesh = mesh_from_obj_str(text, atlas).map_err(|e| PipelineError::Validation(format!("mesh: {e}")))?;
        write_atomic(&root.join(SOURCE_MESH), obj)?;
        write_atomic(&root.join(SOURCE_ATLAS), atlas_png)?;
        let meta = SessionMeta {
            id: session_id(&root),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config,
            regions: vec![],
        };
        write_json(&root.join("session.json"), &meta)?;
        Ok(Self { root, meta, mesh })
    }

    pub fn create(root: impl AsRef<Path>, mesh_path: &Path, atlas_path: &Path, config: PipelineConfig) -> Result<Self, PipelineError> {
        let obj = std::fs::read(mesh_path).map_err(|e| PipelineError::io(mesh_path, e))?;
        let png = std::fs::read(atlas_path).map_err(|e| PipelineError::io(atlas_path, e))?;
        Self::create_from_bytes(root, &obj, &png, config)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let root = root.as_ref().to_path_buf();
        let meta_path = root.join("session.json");
        if !meta_path.exists() {
            return Err(PipelineError::NotFound(format!("no session at {}", root.display())));
        }
        let meta: SessionMeta = read_json(&meta_path)?;
        let obj_path = root.join(SOURCE_MESH);
        let text = std::fs::read_to_string(&obj_path).map_err(|e| PipelineError::io(&obj_path, e))?;
        let atlas = read_png(&root.join(SOURCE_ATLAS))?;
        let mesh = mesh_from_obj_str(&text, atlas).map_err(|e| PipelineError::from_mesh(&obj_path, e))?;
        Ok(Self { root, meta, mesh })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.meta.config
    }

    /// Mesh with the original atlas, normalized to the unit sphere.
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn current_atlas(&self) -> Result<Image, PipelineError> {
        let p = self.path(CURRENT_ATLAS);
        if p.exists() {
            read_png(&p)
        } else {
            Ok(self.mesh.atlas().clone())
        }
    }

    pub fn set_current_atlas(&self, atlas: &Image) -> Result<(), PipelineError> {
        write_png(&self.path(CURRENT_ATLAS), atlas)
    }

    pub fn region_dir(&self, id: &str) -> PathBuf {
        self.root.join("regions").join(id)
    }

    pub fn region(&self, id: &str) -> Result<RegionRecord, PipelineError> {
        let p = self.region_dir(id).join("region.json");
        if !p.exists() {
            return Err(PipelineError::NotFound(format!("region {id}")));
        }
        read_json(&p)
    }

    pub fn save_region(&self, rec: &RegionRecord) -> Result<(), PipelineError> {
        write_json(&self.region_dir(&rec.id).join("region.json"), rec)
    }

    pub fn regions(&self) -> Result<Vec<RegionRecord>, PipelineError> {
        self.meta.regions.iter().map(|r| self.region(r)).collect()
    }

    pub fn scribble_region(&self, rec: &RegionRecord) -> Result<ScribbleRegion, PipelineError> {
        Ok(ScribbleRegion {
            color: rec.color,
            screen_mask: read_mask(&self.region_dir(&rec.id).join("scribble.png"))?,
            view_id: rec.view_id.clone(),
            hint: rec.hint.clone(),
        })
    }

    pub fn view_spec(&self, view_id: &str) -> Result<ViewSpec, PipelineError> {
        let spec = ViewSpec::from_id(view_id, self.meta.config.camera)
            .ok_or_else(|| PipelineError::Validation(format!("unknown view id {view_id:?}")))?;
        spec.validate(self.mesh.bounding_radius() as f64).map_err(PipelineError::Validation)?;
        Ok(spec)
    }

    /// Render a view of the current atlas (`color`) or the bare geometry and
    /// store it under `views/<id>/`.
    pub fn render_view(&self, view_id: &str, mode: RenderMode) -> Result<PathBuf, PipelineError> {
        let spec = self.view_spec(view_id)?;
        let (img, name) = match mode {
            RenderMode::Textured => (render_with_atlas(&self.mesh, &self.current_atlas()?, &spec, mode).color, "color.png"),
            RenderMode::Geometry => (render(&self.mesh, &spec, mode).color, "geometry.png"),
        };
        let p = self.root.join("views").join(spec.id()).join(name);
        write_png(&p, &img)?;
        Ok(p)
    }

    /// Rasterize strokes into new regions; strokes are grouped by view in
    /// order of first appearance.
    pub fn add_regions(&mut self, strokes: &[Stroke], hint: Option<&str>) -> Result<Vec<RegionRecord>, PipelineError> {
        if strokes.is_empty() {
            return Err(PipelineError::Validation("no strokes".into()));
        }
        let mut groups: BTreeMap<usize, (String, Vec<Stroke>)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for s in strokes {
            let k = match order.iter().position(|v| *v == s.view_id) {
                Some(k) => k,
                None => {
                    order.push(s.view_id.clone());
                    order.len() - 1
                }
            };
            groups.entry(k).or_insert_with(|| (s.view_id.clone(), vec![])).1.push(s.clone());
        }
        let atlas = self.current_atlas()?;
        let mut found = Vec::new();
        for (_, (view_id, group)) in groups {
            let spec = self.view_spec(&view_id)?;
            let frame = render(&self.mesh, &spec, RenderMode::Geometry);
            let regions = rasterize_strokes(&group, &frame)?;
            let textured = render_with_atlas(&self.mesh, &atlas, &spec, RenderMode::Textured).color;
            for r in regions {
                found.push((r, group.clone(), textured.clone()));
            }
        }
        let mut out = Vec::new();
        for (mut region, group, textured) in found {
            region.hint = hint.map(str::to_string);
            let id = format!("r{}", self.meta.regions.len());
            let dir = self.region_dir(&id);
            write_json(&dir.join("strokes.json"), &group)?;
            write_mask(&dir.join("scribble.png"), &region.screen_mask)?;
            write_png(&dir.join("overlay.png"), &draw_overlay(&textured, &region))?;
            let rec = RegionRecord {
                id: id.clone(),
                view_id: region.view_id.clone(),
                color: region.color,
                hint: region.hint.clone(),
                state: RegionState::Scribbled,
                chosen_rank: None,
                error: None,
            };
            self.save_region(&rec)?;
            self.meta.regions.push(id);
            write_json(&self.root.join("session.json"), &self.meta)?;
            out.push(rec);
        }
        Ok(out)
    }
}
