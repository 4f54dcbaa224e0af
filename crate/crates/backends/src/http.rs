//! Blocking HTTP clients speaking the minimal JSON protocols of the four
//! services.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Map, Value};

use scribbletex_core::backend::{
    BackendError, ChatBackend, ChatRequest, GenImageRequest, ImageGenBackend, InpaintBackend, InpaintRequest, SegmentRequest,
    SegmentationBackend,
};
use scribbletex_core::image::{Image, Mask};

use crate::config::{BackendConfig, ConfigError, ImagePartStyle, Service};
use crate::transcript::{redact, redact_auth, Transcript};

/// Counting semaphore limiting concurrent requests to one backend.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared transport: auth, retries with exponential backoff, in-flight cap
/// and transcript logging.
#[derive(Debug)]
pub struct HttpCore {
    service: Service,
    endpoint: String,
    token: Option<String>,
    cfg: BackendConfig,
    agent: ureq::Agent,
    gate: Gate,
    transcript: Option<Arc<Transcript>>,
}

fn b64_png(img: &Image) -> String {
    B64.encode(img.encode_png())
}

fn decode_b64_png(s: &str) -> Result<Image, String> {
    let s = s.strip_prefix("data:image/png;base64,").unwrap_or(s);
    let bytes = B64.decode(s.trim()).map_err(|e| format!("base64: {e}"))?;
    Image::decode_png(&bytes).map_err(|e| e.to_string())
}

impl HttpCore {
    pub fn new(service: Service, cfg: &BackendConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        cfg.validate(service)?;
        let endpoint = cfg.resolve_endpoint(service)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            service,
            endpoint,
            token: cfg.resolve_token(service),
            cfg: cfg.clone(),
            agent,
            gate: Gate::new(cfg.max_in_flight),
            transcript,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn log(&self, attempt: u32, body: &Value, outcome: Value, elapsed: Duration) {
        if let Some(t) = &self.transcript {
            let mut rec = Map::new();
            rec.insert("event".into(), json!("http"));
            rec.insert("service".into(), json!(self.service.name()));
            rec.insert("endpoint".into(), json!(self.endpoint));
            rec.insert("attempt".into(), json!(attempt));
            rec.insert("authorization".into(), redact_auth(self.token.as_deref()));
            rec.insert("request".into(), redact(body));
            rec.insert("outcome".into(), outcome);
            rec.insert("elapsed_ms".into(), json!(elapsed.as_millis() as u64));
            t.append(rec);
        }
    }

    fn send_once(&self, bytes: &[u8]) -> Result<(u16, String), ureq::Error> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send(bytes)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string()?;
        Ok((status, text))
    }

    /// POST `body` (with the configured extra params merged in) and return
    /// the parsed JSON reply.
    pub fn post_json(&self, mut body: Map<String, Value>) -> Result<Value, BackendError> {
        for (k, v) in &self.cfg.params {
            body.entry(k.clone()).or_insert_with(|| v.clone());
        }
        let body = Value::Object(body);
        let bytes = serde_json::to_vec(&body).expect("request serializes");
        let _slot = self.gate.acquire();
        let mut attempt = 0;
        loop {
            let start = Instant::now();
            let result = self.send_once(&bytes);
            let elapsed = start.elapsed();
            let (err, retryable) = match result {
                Ok((status, text)) => {
                    self.log(attempt, &body, json!({ "status": status, "body": redact(&serde_json::from_str(&text).unwrap_or(Value::String(text.clone()))) }), elapsed);
                    match status {
                        200..=299 => {
                            return serde_json::from_str(&text).map_err(|e| BackendError::malformed(format!("invalid JSON: {e}"), text));
                        }
                        401 | 403 => return Err(BackendError::AuthFailure { raw: text }),
                        429 | 500..=599 => (BackendError::Http { status, raw: text }, true),
                        _ => (BackendError::Http { status, raw: text }, false),
                    }
                }
                Err(e) => {
                    self.log(attempt, &body, json!({ "error": e.to_string() }), elapsed);
                    match e {
                        ureq::Error::Timeout(_) => (BackendError::Timeout { raw: e.to_string() }, true),
                        other => (BackendError::Unreachable(other.to_string()), true),
                    }
                }
            };
            if !retryable || attempt >= self.cfg.retries {
                return Err(err);
            }
            let delay = self.cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
            std::thread::sleep(Duration::from_millis(delay));
            attempt += 1;
        }
    }
}

/// OpenAI-compatible chat completions client.
#[derive(Debug)]
pub struct HttpChat {
    core: HttpCore,
}

impl HttpChat {
    pub fn new(cfg: &BackendConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        Ok(Self { core: HttpCore::new(Service::Chat, cfg, transcript)? })
    }

    fn image_part(&self, img: &Image) -> Value {
        let b64 = b64_png(img);
        match self.core.cfg.image_part_style {
            ImagePartStyle::Openai => json!({ "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{b64}") } }),
            ImagePartStyle::Plain => json!({ "type": "image", "image": b64 }),
        }
    }

    fn body(&self, req: &ChatRequest, n: usize) -> Map<String, Value> {
        let mut user = vec![json!({ "type": "text", "text": req.user_text })];
        user.extend(req.images.iter().map(|i| self.image_part(i)));
        let mut body = Map::new();
        body.insert("model".into(), json!(self.core.cfg.model));
        body.insert(
            "messages".into(),
            json!([
                { "role": "system", "content": [{ "type": "text", "text": req.system_text }] },
                { "role": "user", "content": user },
            ]),
        );
        body.insert("n".into(), json!(n));
        body
    }
}

fn message_text(choice: &Value) -> Option<String> {
    let content = choice.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")),
        _ => None,
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        let mut out = Vec::with_capacity(req.max_candidates);
        // Some servers ignore `n`; ask again for the shortfall.
        for _ in 0..req.max_candidates {
            let want = req.max_candidates - out.len();
            let reply = self.core.post_json(self.body(req, want))?;
            let choices = reply
                .get("choices")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::malformed("missing choices", reply.to_string()))?;
            for c in choices {
                let text = message_text(c).ok_or_else(|| BackendError::malformed("choice without message content", reply.to_string()))?;
                out.push(text);
            }
            if choices.is_empty() {
                return Err(BackendError::malformed("empty choices", reply.to_string()));
            }
            if out.len() >= req.max_candidates {
                break;
            }
        }
        out.truncate(req.max_candidates);
        Ok(out)
    }
}

#[derive(Debug)]
pub struct HttpImageGen {
    core: HttpCore,
}

impl HttpImageGen {
    pub fn new(cfg: &BackendConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        Ok(Self { core: HttpCore::new(Service::Gen, cfg, transcript)? })
    }
}

impl ImageGenBackend for HttpImageGen {
    fn generate(&self, req: &GenImageRequest) -> Result<Vec<Image>, BackendError> {
        let mut body = Map::new();
        if !self.core.cfg.model.is_empty() {
            body.insert("model".into(), json!(self.core.cfg.model));
        }
        body.insert("prompt".into(), json!(req.prompt));
        body.insert("negative_prompt".into(), json!(req.negative_prompt));
        body.insert("guidance_scale".into(), json!(req.guidance_scale));
        body.insert("seed".into(), json!(req.seed));
        body.insert("count".into(), json!(req.count));
        body.insert("width".into(), json!(req.width));
        body.insert("height".into(), json!(req.height));
        let reply = self.core.post_json(body)?;
        let imgs = reply
            .get("images")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::malformed("missing images", redact(&reply).to_string()))?;
        imgs.iter()
            .map(|v| {
                let s = v.as_str().ok_or_else(|| BackendError::malformed("image is not a string", ""))?;
                decode_b64_png(s).map_err(|e| BackendError::malformed(e, ""))
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct HttpInpaint {
    core: HttpCore,
}

impl HttpInpaint {
    pub fn new(cfg: &BackendConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        Ok(Self { core: HttpCore::new(Service::Inpaint, cfg, transcript)? })
    }
}

impl InpaintBackend for HttpInpaint {
    fn inpaint_raw(&self, req: &InpaintRequest) -> Result<Image, BackendError> {
        let mut body = Map::new();
        if !self.core.cfg.model.is_empty() {
            body.insert("model".into(), json!(self.core.cfg.model));
        }
        body.insert("image".into(), json!(b64_png(&req.image)));
        body.insert("mask".into(), json!(b64_png(&req.mask.to_image())));
        body.insert("prompt".into(), json!(req.prompt));
        body.insert("seed".into(), json!(req.seed));
        let reply = self.core.post_json(body)?;
        let s = reply
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::malformed("missing image", redact(&reply).to_string()))?;
        decode_b64_png(s).map_err(|e| BackendError::malformed(e, ""))
    }
}

#[derive(Debug)]
pub struct HttpSegmentation {
    core: HttpCore,
}

impl HttpSegmentation {
    pub fn new(cfg: &BackendConfig, transcript: Option<Arc<Transcript>>) -> Result<Self, ConfigError> {
        Ok(Self { core: HttpCore::new(Service::Seg, cfg, transcript)? })
    }
}

impl SegmentationBackend for HttpSegmentation {
    fn segment_raw(&self, req: &SegmentRequest) -> Result<Vec<Mask>, BackendError> {
        let b = req.prompt_box;
        let mut body = Map::new();
        if !self.core.cfg.model.is_empty() {
            body.insert("model".into(), json!(self.core.cfg.model));
        }
        body.insert("image".into(), json!(b64_png(&req.image)));
        body.insert("prompt_mask".into(), json!(b64_png(&req.prompt_mask.to_image())));
        body.insert("prompt_box".into(), json!({ "x": b.x, "y": b.y, "width": b.w, "height": b.h }));
        let reply = self.core.post_json(body)?;
        let masks = reply
            .get("masks")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::malformed("missing masks", redact(&reply).to_string()))?;
        masks
            .iter()
            .map(|m| {
                let s = m.get("mask").and_then(Value::as_str).ok_or_else(|| BackendError::malformed("mask entry without mask", ""))?;
                decode_b64_png(s).map(|img| Mask::from_image(&img)).map_err(|e| BackendError::malformed(e, ""))
            })
            .collect()
    }
}
