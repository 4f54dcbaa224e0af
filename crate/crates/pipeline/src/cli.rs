use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use scribbletex_backends::{BackendKind, BackendSet, Transcript};
use scribbletex_core::fixtures::{brown_atlas, cube_charts};
use scribbletex_core::intent::accuracy_sweep;
use scribbletex_core::mesh::to_obj_string;
use scribbletex_core::scribble::Stroke;
use scribbletex_core::Mesh;

use crate::config::PipelineConfig;
use crate::engine::{Engine, RunOptions, RunReport};
use crate::error::PipelineError;
use crate::eval::{build_cases, canned_chat, Canned, Manifest};
use crate::session::{write_atomic, write_json, write_png, Session, Stage, TRANSCRIPT};

#[derive(Debug, Parser)]
#[command(name = "scribbletex", version, about = "Edit mesh textures with colored scribbles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply scribbles to a textured mesh and write the edited atlas.
    Edit(EditArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a small cube scene, strokes and a mock config to try `edit` on.
    Demo {
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure intent-prediction accuracy on a manifest of scribbled meshes.
    /// With a mock chat backend, the manifest's canned predictions answer.
    EvalIntent(EvalArgs),
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Case manifest; defaults to the bundled one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest number of predictions to score; defaults to `n_intents`.
    #[arg(long)]
    pub max_n: Option<usize>,
    /// Answer with the canned distractors instead (mock chat only).
    #[arg(long)]
    pub distractors: bool,
}

#[derive(Debug, clap::Args)]
pub struct EditArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    /// JSON file with an array of strokes, or an object with a `strokes` array.
    #[arg(long)]
    pub strokes: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep the session with every stage artifact under `<out>/session`.
    /// Rerunning with the same output resumes an interrupted edit.
    #[arg(long)]
    pub dump_stages: bool,
    /// Free-text instruction passed to intent prediction.
    #[arg(long)]
    pub hint: Option<String>,
    /// 1-based rank of the predicted intent to apply.
    #[arg(long)]
    pub intent_rank: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bypass segmentation-based area refinement.
    #[arg(long)]
    pub no_refine: bool,
    /// Exit (code 4) once the named stage has completed; used to exercise
    /// resuming from a persisted session.
    #[arg(long, hide = true)]
    pub stop_after: Option<Stage>,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding one subdirectory per session.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrokeFile {
    List(Vec<Stroke>),
    Wrapped { strokes: Vec<Stroke> },
}

pub fn read_strokes(path: &Path) -> Result<Vec<Stroke>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let parsed: StrokeFile =
        serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
    Ok(match parsed {
        StrokeFile::List(s) | StrokeFile::Wrapped { strokes: s } => s,
    })
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

pub fn open_backends(session: &Session) -> Result<BackendSet, PipelineError> {
    let tpath = session.path(TRANSCRIPT);
    let transcript = Transcript::open(&tpath).map_err(|e| PipelineError::io(&tpath, e))?;
    Ok(BackendSet::from_config(&session.config().backends, Some(Arc::new(transcript)))?)
}

/// Run the `edit` command; returns the report.
pub fn edit(args: &EditArgs) -> Result<RunReport, PipelineError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_refine {
        cfg.refinement_enabled = false;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| PipelineError::io(&args.out, e))?;
    let strokes = read_strokes(&args.strokes)?;

    let tmp;
    let root = if args.dump_stages {
        args.out.join("session")
    } else {
        tmp = tempfile::tempdir().map_err(|e| PipelineError::io(&args.out, e))?;
        tmp.path().join("session")
    };
    let mut session = if root.join("session.json").exists() {
        let s = Session::open(&root)?;
        if s.meta.config != cfg {
            return Err(PipelineError::Validation(format!(
                "{} holds a session with a different config; remove it or use another --out",
                root.display()
            )));
        }
        s
    } else {
        Session::create(&root, &args.mesh, &args.atlas, cfg)?
    };
    if session.meta.regions.is_empty() {
        session.add_regions(&strokes, args.hint.as_deref())?;
    }
    let backends = open_backends(&session)?;
    let opts = RunOptions { intent_rank: args.intent_rank, stop_after: args.stop_after };
    let ids = session.meta.regions.clone();
    let mut engine = Engine::new(&session, &backends)?;
    let result = if ids.len() == 1 { engine.run_edit(&ids[0], &opts) } else { engine.run_multi(&ids, &opts) };
    let report_path = args.out.join("report.json");
    match &result {
        Ok(report) => {
            write_png(&args.out.join("atlas.png"), &session.current_atlas()?)?;
            write_json(&report_path, report)?;
        }
        Err(e) => {
            if let Ok(bytes) = std::fs::read(session.path("report.json")) {
                write_atomic(&report_path, &bytes)?;
            }
            write_json(&args.out.join("error.json"), &e.record())?;
        }
    }
    result
}

/// Accuracy for n = 1..=max_n.
pub fn eval_intent(args: &EvalArgs) -> Result<Vec<f64>, PipelineError> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = match &args.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::bundled(),
    };
    if manifest.cases.is_empty() {
        return Err(PipelineError::Validation("manifest has no cases".into()));
    }
    let max_n = args.max_n.unwrap_or(cfg.n_intents);
    if max_n == 0 {
        return Err(PipelineError::Validation("max-n must be ≥ 1".into()));
    }
    let templates = cfg.templates()?;
    let lexicon = cfg.lexicon()?;
    let cases = build_cases(&manifest, cfg.camera, &cfg.intent_views())?;
    let sweep = if cfg.backends.chat.kind == BackendKind::Mock {
        let which = if args.distractors { Canned::Distractors } else { Canned::Predictions };
        let chat = canned_chat(&manifest, &cases, &templates, max_n, which)?;
        accuracy_sweep(&chat, &templates, &lexicon, &cases, max_n)
    } else {
        let backends = BackendSet::from_config(&cfg.backends, None)?;
        accuracy_sweep(&backends.chat, &templates, &lexicon, &cases, max_n)
    };
    Ok(sweep)
}

/// Files written by `demo`.
pub fn demo(out: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mesh: Mesh = cube_charts(brown_atlas(256));
    write_atomic(&out.join("cube.obj"), to_obj_string(&mesh, None).as_bytes())?;
    write_png(&out.join("atlas.png"), mesh.atlas())?;
    let strokes = vec![Stroke {
        view_id: "t0_p0".into(),
        color: [220, 30, 30],
        radius: 14.0,
        points: vec![[200.0, 220.0], [250.0, 260.0], [310.0, 290.0]],
    }];
    write_json(&out.join("strokes.json"), &strokes)?;
    let cfg = PipelineConfig { seed: 42, ..PipelineConfig::default() };
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Edit(args) => {
            let report = edit(&args)?;
            for r in &report.regions {
                println!(
                    "{}: {} ({})",
                    r.id,
                    r.semantic.as_deref().unwrap_or("-"),
                    r.error.as_ref().map(|e| e.message.as_str()).unwrap_or("ok")
                );
            }
            println!("wrote {}", args.out.join("atlas.png").display());
            Ok(())
        }
        Command::Serve(args) => {
            let cfg = load_config(args.config.as_deref())?;
            crate::server::serve(args.addr, args.root, cfg)
        }
        Command::EvalIntent(args) => {
            for (k, acc) in eval_intent(&args)?.iter().enumerate() {
                println!("n={} accuracy={acc:.3}", k + 1);
            }
            Ok(())
        }
        Command::Demo { out } => {
            demo(&out)?;
            println!(
                "scribbletex edit --mesh {0}/cube.obj --atlas {0}/atlas.png --strokes {0}/strokes.json --config {0}/config.toml --out {0}/result",
                out.display()
            );
            Ok(())
        }
    }
}
