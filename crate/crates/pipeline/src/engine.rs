//! Stage runner. Every stage persists its outputs before the region state
//! advances, so a rerun after a crash resumes from the first incomplete
//! stage without repeating backend calls.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use scribbletex_backends::{BackendSet, CallCounts};
use scribbletex_core::backend::{generate_images, GenImageRequest};
use scribbletex_core::image::{Image, Mask};
use scribbletex_core::intent::{
    atlas_patch_search, choose_patch, exhaustive_patch_search, make_global_prompts, predict_intent, GlobalPrompt,
    IntentError, IntentInputs, IntentPrediction, Lexicon, PatchChoice, Templates,
};
use scribbletex_core::mask_map::{bypass_refinement, refine_region, refinement_order};
use scribbletex_core::palette::describe_palette;
use scribbletex_core::render::{render, render_with_atlas, RenderMode};
use scribbletex_core::scribble::draw_overlay;
use scribbletex_core::texturing::{
    default_patch_side, fit_patch, integrate, plan_components, stamp_components, IntegrateParams, IntegratePass,
    IntegrateState, PatchSource, PlacementPlan, TexturePatch, MIN_PATCH_SIDE,
};

use crate::error::PipelineError;
use crate::session::{
    read_json, read_mask, read_png, write_atomic, write_json, write_mask, write_png, RegionRecord, RegionState, Session,
    Stage,
};

/// Seed for one backend call, derived from the run seed and the call's
/// position so reruns and resumes request identical outputs.
pub fn derive_seed(seed: u64, scope: &str, stage: &str, index: usize) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{scope}:{stage}:{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub session: String,
    pub region: String,
    pub stage: Stage,
    /// `started`, `completed`, `resumed` or `failed`.
    pub status: String,
    pub elapsed_ms: u64,
    pub artifacts: Vec<String>,
    pub message: Option<String>,
}

pub type EventSink = Arc<dyn Fn(&Event) + Send + Sync>;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// 1-based rank of the intent to texture with; defaults to the top one.
    pub intent_rank: Option<usize>,
    /// Stop with [`PipelineError::Stopped`] once this stage has completed.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub region: String,
    pub stage: Stage,
    pub status: String,
    pub elapsed_ms: u64,
    pub calls: CallCounts,
    pub artifacts: Vec<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub id: String,
    pub state: RegionState,
    pub intent_rank: Option<usize>,
    pub semantic: Option<String>,
    pub predictions: Vec<IntentPrediction>,
    pub patch_source: Option<PatchSource>,
    pub error: Option<crate::error::ErrorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub session: String,
    pub seed: u64,
    pub area_refinement: String,
    pub regions: Vec<RegionSummary>,
    pub stages: Vec<StageReport>,
    pub calls: CallCounts,
    pub total_ms: u64,
    pub final_atlas: Option<String>,
}

fn diff(a: CallCounts, b: CallCounts) -> CallCounts {
    CallCounts { chat: b.chat - a.chat, gen: b.gen - a.gen, inpaint: b.inpaint - a.inpaint, seg: b.seg - a.seg }
}

/// Patch chosen for a region, as persisted in `patch/choice.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub intent_rank: usize,
    pub semantic: String,
    pub source: PatchSource,
    pub distance: f64,
    pub reason: String,
    /// The chat selection failed and the exhaustive color search was used.
    pub fallback: bool,
    pub prompts: Vec<GlobalPrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IntegrateProgress {
    next_view: usize,
    passes: Vec<IntegratePass>,
}

pub struct Engine<'a> {
    session: &'a Session,
    backends: &'a BackendSet,
    templates: Templates,
    lexicon: Lexicon,
    events: Option<EventSink>,
    stages: Vec<StageReport>,
}

struct Timer {
    start: Instant,
    calls: CallCounts,
}

impl<'a> Engine<'a> {
    pub fn new(session: &'a Session, backends: &'a BackendSet) -> Result<Self, PipelineError> {
        let cfg = session.config();
        Ok(Self { session, backends, templates: cfg.templates()?, lexicon: cfg.lexicon()?, events: None, stages: vec![] })
    }

    pub fn with_events(mut self, sink: EventSink) -> Self {
        self.events = Some(sink);
        self
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.session.root()).unwrap_or(p).display().to_string()
    }

    fn emit(&self, region: &str, stage: Stage, status: &str, elapsed_ms: u64, artifacts: Vec<String>, message: Option<String>) {
        if let Some(sink) = &self.events {
            sink(&Event {
                session: self.session.meta.id.clone(),
                region: region.to_string(),
                stage,
                status: status.to_string(),
                elapsed_ms,
                artifacts,
                message,
            });
        }
    }

    fn begin(&self, region: &str, stage: Stage) -> Timer {
        self.emit(region, stage, "started", 0, vec![], None);
        Timer { start: Instant::now(), calls: self.backends.counts() }
    }

    fn finish(&mut self, t: Timer, region: &str, stage: Stage, resumed: bool, artifacts: Vec<PathBuf>, note: Option<String>) {
        let status = if resumed { "resumed" } else { "completed" };
        let elapsed_ms = t.start.elapsed().as_millis() as u64;
        let artifacts: Vec<String> = artifacts.iter().map(|p| self.rel(p)).collect();
        self.emit(region, stage, status, elapsed_ms, artifacts.clone(), note.clone());
        self.stages.push(StageReport {
            region: region.to_string(),
            stage,
            status: status.into(),
            elapsed_ms,
            calls: diff(t.calls, self.backends.counts()),
            artifacts,
            note,
        });
    }

    fn fail(&mut self, t: Timer, rec: &mut RegionRecord, stage: Stage, e: &PipelineError) {
        let elapsed_ms = t.start.elapsed().as_millis() as u64;
        self.emit(&rec.id, stage, "failed", elapsed_ms, vec![], Some(e.to_string()));
        self.stages.push(StageReport {
            region: rec.id.clone(),
            stage,
            status: "failed".into(),
            elapsed_ms,
            calls: diff(t.calls, self.backends.counts()),
            artifacts: vec![],
            note: Some(e.to_string()),
        });
        rec.error = Some(e.record());
        let _ = self.session.save_region(rec);
    }

    fn advance(&self, rec: &mut RegionRecord, stage: Stage) -> Result<(), PipelineError> {
        let next = RegionState::after(stage).expect("region stage");
        if next > rec.state {
            rec.state = next;
        }
        rec.error = None;
        self.session.save_region(rec)
    }

    /// Run one stage body with bookkeeping; `done` says whether it was
    /// already complete.
    fn stage<T>(
        &mut self,
        rec: &mut RegionRecord,
        stage: Stage,
        body: impl FnOnce(&mut Self, &mut RegionRecord, bool) -> Result<(T, Vec<PathBuf>, Option<String>), PipelineError>,
    ) -> Result<T, PipelineError> {
        let done = rec.state >= RegionState::after(stage).expect("region stage");
        let t = self.begin(&rec.id, stage);
        match body(self, rec, done) {
            Ok((v, artifacts, note)) => {
                if !done {
                    self.advance(rec, stage)?;
                }
                self.finish(t, &rec.id, stage, done, artifacts, note);
                Ok(v)
            }
            Err(e) => {
                self.fail(t, rec, stage, &e);
                Err(e)
            }
        }
    }

    fn check_stop(opts: &RunOptions, stage: Stage) -> Result<(), PipelineError> {
        if opts.stop_after == Some(stage) {
            Err(PipelineError::Stopped(stage))
        } else {
            Ok(())
        }
    }

    // Region stages.

    fn refine(&mut self, rec: &mut RegionRecord) -> Result<Mask, PipelineError> {
        self.stage(rec, Stage::Refine, |eng, rec, done| {
            let dir = eng.session.region_dir(&rec.id).join("refine");
            let out = dir.join("region.png");
            let enabled = eng.session.config().refinement_enabled;
            let note = (!enabled).then(|| "area refinement: disabled".to_string());
            if done {
                return Ok((read_mask(&out)?, vec![out], note));
            }
            let mesh = eng.session.mesh();
            let region = eng.session.scribble_region(rec)?;
            let spec = eng.session.view_spec(&rec.view_id)?;
            let lifted = if enabled {
                let order = refinement_order(spec, &eng.session.config().coverage_views());
                let trace = refine_region(mesh, &region, &order, &eng.backends.seg).map_err(PipelineError::from_refine)?;
                trace.save(dir.join("trace")).map_err(|e| PipelineError::from_image(&dir, e))?;
                trace.final_mask
            } else {
                let frame = render(mesh, &spec, RenderMode::Geometry);
                bypass_refinement(&region, &frame, mesh.atlas_dims())?
            };
            let r = lifted.intersection(&mesh.chart_mask());
            if r.is_empty() {
                return Err(PipelineError::Stage { stage: Stage::Refine, message: "the scribble covers no mapped texels".into() });
            }
            write_mask(&out, &r)?;
            Ok((r, vec![out], note))
        })
    }

    fn intent(&mut self, rec: &mut RegionRecord) -> Result<Vec<IntentPrediction>, PipelineError> {
        self.stage(rec, Stage::Intent, |eng, rec, done| {
            let dir = eng.session.region_dir(&rec.id).join("intent");
            let out = dir.join("predictions.json");
            if done {
                return Ok((read_json(&out)?, vec![out], None));
            }
            let cfg = eng.session.config();
            let mesh = eng.session.mesh();
            let atlas = eng.base_atlas(rec)?;
            let mut views = Vec::new();
            let mut artifacts = Vec::new();
            for spec in cfg.intent_views() {
                let img = render_with_atlas(mesh, &atlas, &spec, RenderMode::Textured).color;
                let p = dir.join(format!("view_{}.png", spec.id()));
                write_png(&p, &img)?;
                artifacts.push(p);
                views.push(img);
            }
            let region = eng.session.scribble_region(rec)?;
            let spec = eng.session.view_spec(&rec.view_id)?;
            let base = render_with_atlas(mesh, &atlas, &spec, RenderMode::Textured).color;
            let overlay = draw_overlay(&base, &region);
            let p = dir.join("overlay.png");
            write_png(&p, &overlay)?;
            artifacts.push(p);
            let inputs = IntentInputs { views, overlay, color: rec.color, hint: rec.hint.clone() };
            let preds = predict_intent(&eng.backends.chat, &eng.templates, &inputs, cfg.n_intents)
                .map_err(|e| PipelineError::from_intent(Stage::Intent, e))?;
            write_json(&out, &preds)?;
            artifacts.push(out);
            Ok((preds, artifacts, None))
        })
    }

    /// Atlas the region edit starts from, recorded the first time it is
    /// needed so alternate-intent reruns replace rather than stack edits.
    fn base_atlas(&self, rec: &RegionRecord) -> Result<Image, PipelineError> {
        let p = self.session.region_dir(&rec.id).join("base.png");
        if p.exists() {
            return read_png(&p);
        }
        let atlas = self.session.current_atlas()?;
        write_png(&p, &atlas)?;
        Ok(atlas)
    }

    fn patch(&mut self, rec: &mut RegionRecord, r: &Mask, preds: &[IntentPrediction], rank: usize) -> Result<(TexturePatch, ChoiceRecord), PipelineError> {
        self.stage(rec, Stage::Patch, |eng, rec, done| {
            let dir = eng.session.region_dir(&rec.id).join("patch");
            let (png, json_path) = (dir.join("patch.png"), dir.join("choice.json"));
            if done {
                let choice: ChoiceRecord = read_json(&json_path)?;
                let patch = TexturePatch::new(read_png(&png)?, choice.source.clone());
                return Ok(((patch, choice), vec![png, json_path], None));
            }
            let pred = preds.get(rank - 1).cloned().ok_or_else(|| {
                PipelineError::Validation(format!("intent rank {rank} outside 1..={}", preds.len()))
            })?;
            let (patch, choice, mut artifacts) = eng.select_patch(rec, r, &pred, &dir)?;
            write_png(&png, &patch.pixels)?;
            write_json(&json_path, &choice)?;
            artifacts.extend([png, json_path]);
            rec.chosen_rank = Some(rank);
            let note = Some(match &choice.source {
                PatchSource::Atlas { .. } => format!("patch reused from the atlas for \"{}\"", choice.semantic),
                PatchSource::Generated { .. } => format!("patch generated for \"{}\"", choice.semantic),
            });
            Ok(((patch, choice), artifacts, note))
        })
    }

    fn select_patch(
        &self,
        rec: &RegionRecord,
        r: &Mask,
        pred: &IntentPrediction,
        dir: &Path,
    ) -> Result<(TexturePatch, ChoiceRecord, Vec<PathBuf>), PipelineError> {
        let cfg = self.session.config();
        let mesh = self.session.mesh();
        let atlas = self.base_atlas(rec)?;
        let bbox = r.bbox().expect("region is non-empty");
        let side = cfg.patch_side.unwrap_or_else(|| default_patch_side(bbox.w, bbox.h));
        let size = fit_patch((side, side), bbox);
        let valid = mesh.mapped_texels().difference(r);
        if let Some(c) = atlas_patch_search(&atlas, &valid, rec.color, size) {
            if c.distance < cfg.atlas_priority_threshold {
                let source = PatchSource::Atlas { rect: c.rect };
                let patch = TexturePatch::new(atlas.crop(c.rect), source.clone());
                let choice = ChoiceRecord {
                    intent_rank: pred.rank,
                    semantic: pred.semantic.clone(),
                    source,
                    distance: c.distance,
                    reason: c.reason,
                    fallback: false,
                    prompts: vec![],
                };
                return Ok((patch, choice, vec![]));
            }
        }

        let mut artifacts = Vec::new();
        let prompts_path = dir.join("prompts.json");
        let prompts: Vec<GlobalPrompt> = if prompts_path.exists() {
            read_json(&prompts_path)?
        } else {
            let style = style_context(&atlas, &mesh.mapped_texels());
            let p = make_global_prompts(&self.backends.chat, &self.templates, &self.lexicon, pred, rec.color, &style, cfg.n_global_prompts)
                .map_err(|e| PipelineError::from_intent(Stage::Patch, e))?;
            write_json(&prompts_path, &p)?;
            p
        };
        artifacts.push(prompts_path);

        let mut images = Vec::new();
        for (k, gp) in prompts.iter().enumerate() {
            let p = dir.join(format!("global_{k}.png"));
            if p.exists() {
                images.push(read_png(&p)?);
            } else {
                let req = GenImageRequest {
                    prompt: gp.text.clone(),
                    negative_prompt: cfg.negative_prompt.clone(),
                    guidance_scale: cfg.guidance_scale,
                    seed: derive_seed(cfg.seed, &rec.id, "gen", k),
                    count: 1,
                    width: cfg.gen_size,
                    height: cfg.gen_size,
                };
                let img = generate_images(&self.backends.gen, &req)
                    .map_err(|e| PipelineError::from_backend(Stage::Patch, e))?
                    .swap_remove(0);
                write_png(&p, &img)?;
                images.push(img);
            }
            artifacts.push(p);
        }

        let (c, fallback): (PatchChoice, bool) =
            match choose_patch(&self.backends.chat, &self.templates, &images, &pred.semantic, rec.color) {
                Ok(c) => (c, false),
                Err(IntentError::NoCandidate) => {
                    let win = search_window(&images);
                    let c = exhaustive_patch_search(&images, rec.color, (win, win)).ok_or_else(|| PipelineError::Stage {
                        stage: Stage::Patch,
                        message: "no patch candidate in the generated images".into(),
                    })?;
                    (c, true)
                }
                Err(e) => return Err(PipelineError::from_intent(Stage::Patch, e)),
            };
        let source = PatchSource::Generated { image_index: c.image_index, rect: c.rect };
        let patch = TexturePatch::new(images[c.image_index].crop(c.rect), source.clone());
        let choice = ChoiceRecord {
            intent_rank: pred.rank,
            semantic: pred.semantic.clone(),
            source,
            distance: c.distance,
            reason: c.reason,
            fallback,
            prompts,
        };
        Ok((patch, choice, artifacts))
    }

    // Shared stamping and blending, used by single and multi-region runs.

    fn stamp_into(&self, dir: &Path, base: &Image, parts: &[(&Mask, &TexturePatch)]) -> Result<(Image, Mask, Vec<PathBuf>), PipelineError> {
        let cfg = self.session.config();
        let mesh = self.session.mesh();
        let (w, h) = base.dims();
        let mut atlas = base.clone();
        let mut gap = Mask::new(w, h);
        let mut stamped = Mask::new(w, h);
        let mut plans_json = Vec::new();
        for (k, (r, patch)) in parts.iter().enumerate() {
            let plans = plan_components(mesh.island_texel_masks(), r, cfg.patch_side);
            let out = stamp_components(&atlas, &plans, r, patch, cfg.erosion_radius);
            atlas = out.atlas;
            gap.union_with(&out.gap);
            stamped.union_with(&out.stamped);
            for cp in &plans {
                plans_json.push(json!({ "part": k, "island": cp.island, "plan": &cp.plan as &PlacementPlan<f64> }));
            }
        }
        let paths = [dir.join("plans.json"), dir.join("stamped.png"), dir.join("gap.png"), dir.join("atlas.png")];
        write_json(&paths[0], &plans_json)?;
        write_mask(&paths[1], &stamped)?;
        write_mask(&paths[2], &gap)?;
        write_png(&paths[3], &atlas)?;
        Ok((atlas, gap, paths.to_vec()))
    }

    fn integrate_in(&self, dir: &Path, stamped: Image, gap: &Mask, prompt: &str, scope: &str) -> Result<(Image, Vec<PathBuf>), PipelineError> {
        let cfg = self.session.config();
        let views = cfg.coverage_views();
        let state_dir = dir.join("state");
        let progress_path = state_dir.join("progress.json");
        let (state, mut passes) = if progress_path.exists() {
            let progress: IntegrateProgress = read_json(&progress_path)?;
            let atlas = read_png(&state_dir.join("atlas.png"))?;
            let wpath = state_dir.join("weights.f32");
            let bytes = std::fs::read(&wpath).map_err(|e| PipelineError::io(&wpath, e))?;
            let weights = IntegrateState::weights_from_bytes(&bytes)
                .filter(|w| w.len() == atlas.width() * atlas.height())
                .ok_or_else(|| PipelineError::Validation(format!("{}: corrupt weights", wpath.display())))?;
            (IntegrateState { atlas, weights, next_view: progress.next_view }, progress.passes)
        } else {
            (IntegrateState::new(stamped), vec![])
        };
        let seed = cfg.seed;
        let seed_for_view = |k: usize| derive_seed(seed, scope, "inpaint", k);
        let params = IntegrateParams { prompt, views: &views, seed_for_view: &seed_for_view };
        let mut save_err: Option<PipelineError> = None;
        let mut on_pass = |s: &IntegrateState, pass: &IntegratePass| {
            if save_err.is_some() {
                return;
            }
            passes.push(pass.clone());
            let r = (|| {
                write_png(&dir.join("passes").join(format!("{:02}_{}.png", s.next_view - 1, pass.view_id)), &s.atlas)?;
                write_png(&state_dir.join("atlas.png"), &s.atlas)?;
                write_atomic(&state_dir.join("weights.f32"), &s.weights_to_bytes())?;
                write_json(&progress_path, &IntegrateProgress { next_view: s.next_view, passes: passes.clone() })
            })();
            if let Err(e) = r {
                save_err = Some(e);
            }
        };
        let outcome = integrate(self.session.mesh(), state, gap, &params, &self.backends.inpaint, &mut on_pass)
            .map_err(|e| PipelineError::from_texturing(Stage::Integrate, e))?;
        if let Some(e) = save_err {
            return Err(e);
        }
        let final_path = dir.join("final.png");
        let passes_path = dir.join("passes.json");
        write_json(&passes_path, &json!({ "passes": outcome.passes, "residual_texels": outcome.residual.count() }))?;
        write_png(&final_path, &outcome.atlas)?;
        Ok((outcome.atlas, vec![passes_path, final_path]))
    }

    /// Throw away everything after intent prediction when a different
    /// intent is chosen.
    fn reset_for_rank(&self, rec: &mut RegionRecord, rank: usize) -> Result<(), PipelineError> {
        if rec.state >= RegionState::PatchChosen && rec.chosen_rank != Some(rank) {
            let dir = self.session.region_dir(&rec.id);
            for sub in ["patch", "stamp", "integrate"] {
                let p = dir.join(sub);
                if p.exists() {
                    std::fs::remove_dir_all(&p).map_err(|e| PipelineError::io(&p, e))?;
                }
            }
            rec.state = RegionState::IntentPredicted;
            rec.chosen_rank = None;
            self.session.save_region(rec)?;
        }
        Ok(())
    }

    fn summary(&self, rec: &RegionRecord) -> RegionSummary {
        let dir = self.session.region_dir(&rec.id);
        let predictions: Vec<IntentPrediction> = read_json(&dir.join("intent/predictions.json")).unwrap_or_default();
        let choice: Option<ChoiceRecord> = read_json(&dir.join("patch/choice.json")).ok();
        RegionSummary {
            id: rec.id.clone(),
            state: rec.state,
            intent_rank: rec.chosen_rank,
            semantic: choice.as_ref().map(|c| c.semantic.clone()),
            predictions,
            patch_source: choice.map(|c| c.source),
            error: rec.error.clone(),
        }
    }

    fn report(&self, ids: &[String], started: Instant, start_calls: CallCounts, final_atlas: Option<&Path>) -> RunReport {
        let regions = ids.iter().filter_map(|id| self.session.region(id).ok()).map(|r| self.summary(&r)).collect();
        let cfg = self.session.config();
        RunReport {
            session: self.session.meta.id.clone(),
            seed: cfg.seed,
            area_refinement: if cfg.refinement_enabled { "enabled" } else { "disabled" }.into(),
            regions,
            stages: self.stages.clone(),
            calls: diff(start_calls, self.backends.counts()),
            total_ms: started.elapsed().as_millis() as u64,
            final_atlas: final_atlas.map(|p| self.rel(p)),
        }
    }

    fn write_report(&self, report: &RunReport) {
        let _ = write_json(&self.session.path("report.json"), report);
    }

    /// Refine only, e.g. for the UI to preview the texture-space region.
    pub fn refine_only(&mut self, region_id: &str) -> Result<Mask, PipelineError> {
        let mut rec = self.session.region(region_id)?;
        self.refine(&mut rec)
    }

    /// Refine and predict intents without texturing.
    pub fn predict_only(&mut self, region_id: &str) -> Result<Vec<IntentPrediction>, PipelineError> {
        let mut rec = self.session.region(region_id)?;
        self.refine(&mut rec)?;
        self.intent(&mut rec)
    }

    /// Run every remaining stage for one region.
    pub fn run_edit(&mut self, region_id: &str, opts: &RunOptions) -> Result<RunReport, PipelineError> {
        let started = Instant::now();
        let start_calls = self.backends.counts();
        let ids = vec![region_id.to_string()];
        let res = self.run_edit_inner(region_id, opts);
        let report = self.report(&ids, started, start_calls, res.as_ref().ok().map(|p| p.as_path()));
        self.write_report(&report);
        res.map(|_| report)
    }

    fn run_edit_inner(&mut self, region_id: &str, opts: &RunOptions) -> Result<PathBuf, PipelineError> {
        let mut rec = self.session.region(region_id)?;
        let rank = opts.intent_rank.or(rec.chosen_rank).unwrap_or(1);
        if rank == 0 {
            return Err(PipelineError::Validation("intent rank is 1-based".into()));
        }
        self.reset_for_rank(&mut rec, rank)?;

        let r = self.refine(&mut rec)?;
        Self::check_stop(opts, Stage::Refine)?;
        let preds = self.intent(&mut rec)?;
        Self::check_stop(opts, Stage::Intent)?;
        let (patch, choice) = self.patch(&mut rec, &r, &preds, rank)?;
        Self::check_stop(opts, Stage::Patch)?;

        let dir = self.session.region_dir(&rec.id);
        let (stamped, gap) = self.stage(&mut rec, Stage::Stamp, |eng, rec, done| {
            let sdir = dir.join("stamp");
            if done {
                let (a, g) = (sdir.join("atlas.png"), sdir.join("gap.png"));
                return Ok(((read_png(&a)?, read_mask(&g)?), vec![a, g], None));
            }
            let base = eng.base_atlas(rec)?;
            let (atlas, gap, paths) = eng.stamp_into(&sdir, &base, &[(&r, &patch)])?;
            Ok(((atlas, gap), paths, None))
        })?;
        Self::check_stop(opts, Stage::Stamp)?;

        let final_path = dir.join("integrate").join("final.png");
        let atlas = self.stage(&mut rec, Stage::Integrate, |eng, rec, done| {
            if done {
                return Ok((read_png(&final_path)?, vec![final_path.clone()], None));
            }
            let (atlas, paths) = eng.integrate_in(&dir.join("integrate"), stamped, &gap, &choice.semantic, &rec.id)?;
            Ok((atlas, paths, None))
        })?;
        self.session.set_current_atlas(&atlas)?;
        Self::check_stop(opts, Stage::Integrate)?;
        Ok(self.session.path(crate::session::CURRENT_ATLAS))
    }

    /// Texture several regions at once. Refinement, intent and patch choice
    /// run per region and a failure there only drops that region; the
    /// surviving regions are stamped together and blended in one pass whose
    /// prompt joins their semantics.
    pub fn run_multi(&mut self, region_ids: &[String], opts: &RunOptions) -> Result<RunReport, PipelineError> {
        let started = Instant::now();
        let start_calls = self.backends.counts();
        let res = self.run_multi_inner(region_ids, opts);
        let report = self.report(region_ids, started, start_calls, res.as_ref().ok().map(|p| p.as_path()));
        self.write_report(&report);
        res.map(|_| report)
    }

    fn run_multi_inner(&mut self, region_ids: &[String], opts: &RunOptions) -> Result<PathBuf, PipelineError> {
        if region_ids.is_empty() {
            return Err(PipelineError::Validation("no regions given".into()));
        }
        let mut ids = region_ids.to_vec();
        ids.sort();
        ids.dedup();
        let mut recs = Vec::new();
        for id in &ids {
            recs.push(self.session.region(id)?);
        }
        let rank = opts.intent_rank.unwrap_or(1);
        if rank == 0 {
            return Err(PipelineError::Validation("intent rank is 1-based".into()));
        }

        let mut live: Vec<(RegionRecord, Mask)> = Vec::new();
        let mut first_err = None;
        for mut rec in recs {
            match self.refine(&mut rec) {
                Ok(r) => live.push((rec, r)),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        for a in 0..live.len() {
            for b in a + 1..live.len() {
                if !live[a].1.is_disjoint(&live[b].1) {
                    return Err(PipelineError::OverlappingRegions { a: live[a].0.id.clone(), b: live[b].0.id.clone() });
                }
            }
        }
        Self::check_stop(opts, Stage::Refine)?;

        let mut ready = Vec::new();
        for (mut rec, r) in live {
            let res = self.intent(&mut rec).and_then(|preds| {
                let rank = rec.chosen_rank.unwrap_or(rank);
                self.patch(&mut rec, &r, &preds, rank)
            });
            match res {
                Ok((patch, choice)) => ready.push((rec, r, patch, choice)),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if ready.is_empty() {
            return Err(first_err.expect("every region failed"));
        }
        Self::check_stop(opts, Stage::Patch)?;

        let key: Vec<&str> = ready.iter().map(|(rec, ..)| rec.id.as_str()).collect();
        let key = key.join("+");
        let dir = self.session.path("multi").join(&key);
        let base_path = dir.join("base.png");
        let base = if base_path.exists() {
            read_png(&base_path)?
        } else {
            let a = self.session.current_atlas()?;
            write_png(&base_path, &a)?;
            a
        };
        let stamp_dir = dir.join("stamp");
        let (sa, sg) = (stamp_dir.join("atlas.png"), stamp_dir.join("gap.png"));
        let t = self.begin(&key, Stage::Stamp);
        let (stamped, gap, artifacts, resumed) = if ready.iter().all(|(rec, ..)| rec.state >= RegionState::Stamped) && sa.exists() {
            (read_png(&sa)?, read_mask(&sg)?, vec![sa, sg], true)
        } else {
            let parts: Vec<(&Mask, &TexturePatch)> = ready.iter().map(|(_, r, p, _)| (r, p)).collect();
            let (a, g, paths) = self.stamp_into(&stamp_dir, &base, &parts)?;
            for (rec, ..) in ready.iter_mut() {
                self.advance(rec, Stage::Stamp)?;
            }
            (a, g, paths, false)
        };
        self.finish(t, &key, Stage::Stamp, resumed, artifacts, None);
        Self::check_stop(opts, Stage::Stamp)?;

        let final_path = dir.join("integrate").join("final.png");
        let t = self.begin(&key, Stage::Integrate);
        let (atlas, artifacts, resumed) =
            if ready.iter().all(|(rec, ..)| rec.state >= RegionState::Integrated) && final_path.exists() {
                (read_png(&final_path)?, vec![final_path], true)
            } else {
                let prompt: Vec<&str> = ready.iter().map(|(.., c)| c.semantic.as_str()).collect();
                let prompt = prompt.join(", ");
                match self.integrate_in(&dir.join("integrate"), stamped, &gap, &prompt, &format!("multi:{key}")) {
                    Ok((a, p)) => {
                        for (rec, ..) in ready.iter_mut() {
                            self.advance(rec, Stage::Integrate)?;
                        }
                        (a, p, false)
                    }
                    Err(e) => {
                        for (rec, ..) in ready.iter_mut() {
                            rec.error = Some(e.record());
                            self.session.save_region(rec)?;
                        }
                        self.emit(&key, Stage::Integrate, "failed", t.start.elapsed().as_millis() as u64, vec![], Some(e.to_string()));
                        return Err(e);
                    }
                }
            };
        self.finish(t, &key, Stage::Integrate, resumed, artifacts, None);
        self.session.set_current_atlas(&atlas)?;
        Self::check_stop(opts, Stage::Integrate)?;
        Ok(self.session.path(crate::session::CURRENT_ATLAS))
    }
}

/// Palette of the mapped part of the atlas, used as style context for the
/// global prompts.
fn style_context(atlas: &Image, mapped: &Mask) -> String {
    let data: Vec<u8> = mapped.iter_set().flat_map(|(x, y)| atlas.rgb(x, y)).collect();
    let n = data.len() / 3;
    if n == 0 {
        return describe_palette(atlas, 3);
    }
    let sample = Image::from_raw(n, 1, 3, data).expect("sizes match");
    describe_palette(&sample, 3)
}

/// Window side for the exhaustive fallback over generated images: a quarter
/// of the smallest image side, at least the minimum patch side.
fn search_window(images: &[Image]) -> usize {
    let min_side = images.iter().map(|i| i.width().min(i.height())).min().unwrap_or(MIN_PATCH_SIDE);
    (min_side / 4).max(MIN_PATCH_SIDE).min(min_side.max(1))
}
