//! Backend wiring: configuration, live HTTP clients, call logging and the
//! factory that assembles the four services from config.

pub mod config;
pub mod http;
pub mod transcript;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Map, Value};

use scribbletex_core::backend::{
    request_key, BackendError, ChatBackend, ChatRequest, GenImageRequest, ImageGenBackend, InpaintBackend, InpaintRequest,
    MockChat, MockImageGen, MockInpaint, MockSegmentation, SegmentRequest, SegmentationBackend,
};
use scribbletex_core::image::{Image, Mask};

pub use config::{BackendConfig, BackendKind, BackendsConfig, ConfigError, ImagePartStyle, Service};
pub use transcript::Transcript;

/// Wraps a backend, counting calls and logging one transcript record per
/// logical call.
pub struct Logged<B: ?Sized> {
    service: Service,
    kind: BackendKind,
    calls: AtomicUsize,
    transcript: Option<Arc<Transcript>>,
    inner: Box<B>,
}

impl<B: ?Sized> Logged<B> {
    pub fn new(service: Service, kind: BackendKind, inner: Box<B>, transcript: Option<Arc<Transcript>>) -> Self {
        Self { service, kind, calls: AtomicUsize::new(0), transcript, inner }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn record<T>(&self, summary: Value, result: &Result<T, BackendError>, describe: impl Fn(&T) -> Value) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(t) = &self.transcript {
            let mut rec = Map::new();
            rec.insert("event".into(), json!("call"));
            rec.insert("service".into(), json!(self.service.name()));
            rec.insert("backend".into(), json!(self.kind));
            rec.insert("request".into(), summary);
            match result {
                Ok(v) => rec.insert("response".into(), describe(v)),
                Err(e) => rec.insert("error".into(), json!({ "message": e.to_string(), "raw": e.raw() })),
            };
            t.append(rec);
        }
    }
}

fn image_summary(img: &Image) -> Value {
    json!({ "width": img.width(), "height": img.height() })
}

impl<B: ChatBackend + ?Sized> ChatBackend for Logged<B> {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        let r = self.inner.chat(req);
        let summary = json!({
            "key": request_key(req),
            "system_text": req.system_text,
            "user_text": req.user_text,
            "images": req.images.iter().map(image_summary).collect::<Vec<_>>(),
            "max_candidates": req.max_candidates,
        });
        self.record(summary, &r, |v| json!(v));
        r
    }
}

impl<B: ImageGenBackend + ?Sized> ImageGenBackend for Logged<B> {
    fn generate(&self, req: &GenImageRequest) -> Result<Vec<Image>, BackendError> {
        let r = self.inner.generate(req);
        self.record(json!(req), &r, |v| json!(v.iter().map(image_summary).collect::<Vec<_>>()));
        r
    }
}

impl<B: InpaintBackend + ?Sized> InpaintBackend for Logged<B> {
    fn inpaint_raw(&self, req: &InpaintRequest) -> Result<Image, BackendError> {
        let r = self.inner.inpaint_raw(req);
        let summary = json!({ "image": image_summary(&req.image), "mask_pixels": req.mask.count(), "prompt": req.prompt, "seed": req.seed });
        self.record(summary, &r, image_summary);
        r
    }
}

impl<B: SegmentationBackend + ?Sized> SegmentationBackend for Logged<B> {
    fn segment_raw(&self, req: &SegmentRequest) -> Result<Vec<Mask>, BackendError> {
        let r = self.inner.segment_raw(req);
        let summary = json!({ "image": image_summary(&req.image), "prompt_pixels": req.prompt_mask.count(), "prompt_box": req.prompt_box });
        self.record(summary, &r, |v| json!(v.iter().map(Mask::count).collect::<Vec<_>>()));
        r
    }
}

/// The four services, each wrapped for logging.
pub struct BackendSet {
    pub chat: Logged<dyn ChatBackend>,
    pub gen: Logged<dyn ImageGenBackend>,
    pub inpaint: Logged<dyn InpaintBackend>,
    pub seg: Logged<dyn SegmentationBackend>,
}

/// Per-service call counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct CallCounts {
    pub chat: usize,
    pub gen: usize,
    pub inpaint: usize,
    pub seg: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.chat + self.gen + self.inpaint + self.seg
    }
}

/// Load canned chat completions: a JSON object mapping request keys to
/// lists of completions.
pub fn load_canned(path: &str) -> Result<BTreeMap<String, Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))
}

impl BackendSet {
    /// Assemble services from config; mocks and HTTP clients share the same
    /// logging wrapper.
    pub fn from_config(cfg: &BackendsConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        let t = || transcript.clone();
        let chat: Box<dyn ChatBackend> = match cfg.chat.kind {
            BackendKind::Http => Box::new(http::HttpChat::new(&cfg.chat, t())?),
            BackendKind::Mock => {
                let mut m = if cfg.chat.scripted { MockChat::scripted() } else { MockChat::canned_only() };
                if let Some(p) = &cfg.chat.canned_path {
                    let canned = load_canned(p).map_err(|reason| ConfigError::Canned { service: "chat", reason })?;
                    for (k, v) in canned {
                        m.insert(k, v);
                    }
                }
                Box::new(m)
            }
        };
        let gen: Box<dyn ImageGenBackend> = match cfg.gen.kind {
            BackendKind::Http => Box::new(http::HttpImageGen::new(&cfg.gen, t())?),
            BackendKind::Mock => Box::new(MockImageGen::default()),
        };
        let inpaint: Box<dyn InpaintBackend> = match cfg.inpaint.kind {
            BackendKind::Http => Box::new(http::HttpInpaint::new(&cfg.inpaint, t())?),
            BackendKind::Mock => Box::new(MockInpaint::default()),
        };
        let seg: Box<dyn SegmentationBackend> = match cfg.seg.kind {
            BackendKind::Http => Box::new(http::HttpSegmentation::new(&cfg.seg, t())?),
            BackendKind::Mock => Box::new(MockSegmentation::new(cfg.seg.seg_mode)),
        };
        Ok(Self::from_parts(cfg, chat, gen, inpaint, seg, transcript))
    }

    /// Wrap explicit backend instances (tests inject scripted ones).
    pub fn from_parts(
        cfg: &BackendsConfig,
        chat: Box<dyn ChatBackend>,
        gen: Box<dyn ImageGenBackend>,
        inpaint: Box<dyn InpaintBackend>,
        seg: Box<dyn SegmentationBackend>,
        transcript: Option<Arc<Transcript>>,
    ) -> Self {
        Self {
            chat: Logged::new(Service::Chat, cfg.chat.kind, chat, transcript.clone()),
            gen: Logged::new(Service::Gen, cfg.gen.kind, gen, transcript.clone()),
            inpaint: Logged::new(Service::Inpaint, cfg.inpaint.kind, inpaint, transcript.clone()),
            seg: Logged::new(Service::Seg, cfg.seg.kind, seg, transcript),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts { chat: self.chat.calls(), gen: self.gen.calls(), inpaint: self.inpaint.calls(), seg: self.seg.calls() }
    }
}

/// Count logical calls per service in a transcript file.
pub fn transcript_call_counts(path: impl AsRef<std::path::Path>) -> std::io::Result<CallCounts> {
    let mut c = CallCounts::default();
    for rec in Transcript::read_all(path)? {
        if rec.get("event").and_then(Value::as_str) != Some("call") {
            continue;
        }
        match rec.get("service").and_then(Value::as_str) {
            Some("chat") => c.chat += 1,
            Some("gen") => c.gen += 1,
            Some("inpaint") => c.inpaint += 1,
            Some("seg") => c.seg += 1,
            _ => {}
        }
    }
    Ok(c)
}
