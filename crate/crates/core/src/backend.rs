//! Contracts for the external model services and their offline mocks.
//!
//! Four services are involved: vision chat, text-to-image, inpainting and
//! promptable segmentation. Live HTTP clients implement the traits in a
//! separate crate; the mocks here are deterministic pure functions of the
//! request so full runs work offline.
//!
//! The free functions [`chat`], [`generate_images`], [`inpaint`] and
//! [`segment`] wrap any backend and enforce the request and response
//! contracts on the client side.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, Mask, Rect};
use crate::morph::diffusion_fill;
use crate::palette;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
pub const DEFAULT_GEN_SIZE: usize = 1024;
pub const MAX_CHAT_IMAGES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out: {raw}")]
    Timeout { raw: String },
    #[error("authentication rejected: {raw}")]
    AuthFailure { raw: String },
    #[error("malformed response ({reason}): {raw}")]
    MalformedResponse { reason: String, raw: String },
    #[error("http status {status}: {raw}")]
    Http { status: u16, raw: String },
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("segmentation prompt mask is empty")]
    EmptyPrompt,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn malformed(reason: impl Into<String>, raw: impl Into<String>) -> Self {
        Self::MalformedResponse { reason: reason.into(), raw: raw.into() }
    }

    /// Raw payload carried by the error, if any.
    pub fn raw(&self) -> Option<&str> {
        match self {
            Self::Timeout { raw } | Self::AuthFailure { raw } | Self::MalformedResponse { raw, .. } | Self::Http { raw, .. } => {
                Some(raw)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub images: Vec<Image>,
    /// Number of independent completions requested.
    pub max_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenImageRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub guidance_scale: f64,
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
}

impl GenImageRequest {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: String::new(),
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed,
            count: 1,
            width: DEFAULT_GEN_SIZE,
            height: DEFAULT_GEN_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub image: Image,
    /// Set pixels are to be filled.
    pub mask: Mask,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRequest {
    pub image: Image,
    pub prompt_mask: Mask,
    pub prompt_box: Rect,
}

impl SegmentRequest {
    /// Prompt with a mask and its bounding box.
    pub fn from_mask(image: Image, prompt_mask: Mask) -> Result<Self, BackendError> {
        let prompt_box = prompt_mask.bbox().ok_or(BackendError::EmptyPrompt)?;
        Ok(Self { image, prompt_mask, prompt_box })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCandidate {
    pub mask: Mask,
    pub area: usize,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError>;
}

pub trait ImageGenBackend: Send + Sync {
    fn generate(&self, req: &GenImageRequest) -> Result<Vec<Image>, BackendError>;
}

pub trait InpaintBackend: Send + Sync {
    /// Raw backend output; callers go through [`inpaint`].
    fn inpaint_raw(&self, req: &InpaintRequest) -> Result<Image, BackendError>;
}

pub trait SegmentationBackend: Send + Sync {
    /// Raw candidate masks; callers go through [`segment`].
    fn segment_raw(&self, req: &SegmentRequest) -> Result<Vec<Mask>, BackendError>;
}

macro_rules! forward_ref {
    ($tr:ident, $m:ident, $req:ty, $out:ty) => {
        impl<T: $tr + ?Sized> $tr for &T {
            fn $m(&self, req: &$req) -> Result<$out, BackendError> {
                (**self).$m(req)
            }
        }
        impl<T: $tr + ?Sized> $tr for Box<T> {
            fn $m(&self, req: &$req) -> Result<$out, BackendError> {
                (**self).$m(req)
            }
        }
        impl<T: $tr + ?Sized> $tr for std::sync::Arc<T> {
            fn $m(&self, req: &$req) -> Result<$out, BackendError> {
                (**self).$m(req)
            }
        }
    };
}

forward_ref!(ChatBackend, chat, ChatRequest, Vec<String>);
forward_ref!(ImageGenBackend, generate, GenImageRequest, Vec<Image>);
forward_ref!(InpaintBackend, inpaint_raw, InpaintRequest, Image);
forward_ref!(SegmentationBackend, segment_raw, SegmentRequest, Vec<Mask>);

/// Validated chat call returning exactly `max_candidates` completions.
pub fn chat(backend: &dyn ChatBackend, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
    if req.images.len() > MAX_CHAT_IMAGES {
        return Err(BackendError::InvalidRequest(format!("{} images exceeds {MAX_CHAT_IMAGES}", req.images.len())));
    }
    if req.max_candidates == 0 {
        return Err(BackendError::InvalidRequest("max_candidates must be ≥ 1".into()));
    }
    let out = backend.chat(req)?;
    if out.len() != req.max_candidates {
        return Err(BackendError::malformed(
            format!("expected {} completions, got {}", req.max_candidates, out.len()),
            out.join("\n---\n"),
        ));
    }
    Ok(out)
}

pub fn generate_images(backend: &dyn ImageGenBackend, req: &GenImageRequest) -> Result<Vec<Image>, BackendError> {
    if !(req.guidance_scale > 0.0) {
        return Err(BackendError::InvalidRequest(format!("guidance_scale {} must be > 0", req.guidance_scale)));
    }
    if req.count == 0 || req.width == 0 || req.height == 0 {
        return Err(BackendError::InvalidRequest("count and size must be ≥ 1".into()));
    }
    let out = backend.generate(req)?;
    if out.len() != req.count {
        return Err(BackendError::malformed(format!("expected {} images, got {}", req.count, out.len()), ""));
    }
    Ok(out
        .into_iter()
        .map(|img| if img.dims() == (req.width, req.height) { img.to_rgb() } else { img.to_rgb().resize_bilinear(req.width, req.height) })
        .collect())
}

/// Inpaint through any backend; pixels outside the mask are copied back from
/// the input so they stay byte-identical whatever the backend returns.
pub fn inpaint(backend: &dyn InpaintBackend, req: &InpaintRequest) -> Result<Image, BackendError> {
    if req.image.dims() != req.mask.dims() {
        return Err(BackendError::InvalidRequest(format!("image {:?} vs mask {:?}", req.image.dims(), req.mask.dims())));
    }
    if req.mask.is_empty() {
        return Err(BackendError::InvalidRequest("inpaint mask is empty".into()));
    }
    let mut raw = backend.inpaint_raw(req)?;
    if raw.width() == 0 || raw.height() == 0 {
        return Err(BackendError::malformed("inpaint returned an empty image", ""));
    }
    // Some services return their working resolution; bring it back.
    if raw.dims() != req.image.dims() {
        let (w, h) = req.image.dims();
        raw = raw.resize_bilinear(w, h);
    }
    let mut out = req.image.clone();
    for (x, y) in req.mask.iter_set() {
        out.set_rgb(x, y, raw.rgb(x, y));
    }
    Ok(out)
}

/// Segment through any backend; candidates are sorted by area ascending.
pub fn segment(backend: &dyn SegmentationBackend, req: &SegmentRequest) -> Result<Vec<SegmentCandidate>, BackendError> {
    if req.prompt_mask.is_empty() {
        return Err(BackendError::EmptyPrompt);
    }
    if req.prompt_mask.dims() != req.image.dims() {
        return Err(BackendError::InvalidRequest("prompt mask and image dimensions differ".into()));
    }
    let masks = backend.segment_raw(req)?;
    if masks.is_empty() {
        return Err(BackendError::malformed("no candidate masks", ""));
    }
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        if m.dims() != req.image.dims() {
            return Err(BackendError::malformed(format!("candidate mask {:?}", m.dims()), ""));
        }
        let area = m.count();
        out.push(SegmentCandidate { mask: m, area });
    }
    out.sort_by_key(|c| c.area);
    Ok(out)
}

/// Stable content hash of a chat request, used to key canned completions.
pub fn request_key(req: &ChatRequest) -> String {
    let mut h = Sha256::new();
    h.update(req.system_text.as_bytes());
    h.update([0]);
    h.update(req.user_text.as_bytes());
    h.update([0]);
    for img in &req.images {
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.height() as u64).to_le_bytes());
        h.update([img.channels() as u8]);
        h.update(img.data());
    }
    h.update((req.max_candidates as u64).to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stage markers carried in system prompts; the scripted mock keys on them.
pub mod stage {
    pub const INTENT: &str = "[stage:intent]";
    pub const GLOBAL_PROMPTS: &str = "[stage:global_prompts]";
    pub const PATCH_SELECT: &str = "[stage:patch_select]";
}

/// Deterministic chat mock.
///
/// Completions registered for a request hash win; otherwise, when scripted
/// mode is on, a rule-based responder answers the three editing dialogues
/// with well-formed JSON derived from the request text.
#[derive(Debug, Default)]
pub struct MockChat {
    canned: BTreeMap<String, Vec<String>>,
    scripted: bool,
    calls: AtomicUsize,
}

impl MockChat {
    pub fn scripted() -> Self {
        Self { scripted: true, ..Default::default() }
    }

    /// Only canned completions; unknown requests yield malformed output.
    pub fn canned_only() -> Self {
        Self::default()
    }

    pub fn with_canned(mut self, key: impl Into<String>, completions: Vec<String>) -> Self {
        self.insert(key, completions);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, completions: Vec<String>) {
        self.canned.insert(key.into(), completions);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn scripted_reply(req: &ChatRequest) -> String {
        let text = &req.user_text;
        let count = Regex::new(r"exactly (\d+)")
            .unwrap()
            .captures(text)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(1);
        let color = Regex::new(r"(?i)color:\s*([a-z]+)")
            .unwrap()
            .captures(text)
            .map(|c| c[1].to_lowercase())
            .unwrap_or_else(|| "gray".into());
        let semantic = Regex::new(r#"Target content:\s*"([^"]+)""#)
            .unwrap()
            .captures(text)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| format!("{color} pattern"));
        if req.system_text.contains(stage::INTENT) {
            const NOUNS: [&str; 8] = ["flowers", "fabric pattern", "painted stripes", "stone tiles", "leaves", "crystals", "moss", "sand"];
            let preds: Vec<serde_json::Value> = (0..count)
                .map(|k| {
                    serde_json::json!({
                        "rank": k + 1,
                        "semantic": format!("{color} {}", NOUNS[k % NOUNS.len()]),
                        "rationale": format!("the {color} scribble suggests {}", NOUNS[k % NOUNS.len()]),
                    })
                })
                .collect();
            serde_json::json!({ "predictions": preds }).to_string()
        } else if req.system_text.contains(stage::GLOBAL_PROMPTS) {
            const FRAMES: [&str; 6] = [
                "A wide scenic photograph of a landscape covered in {s}, rich {c} tones",
                "A detailed close-up photograph of {s}, {c} color, soft natural light",
                "An overhead view of a garden full of {s}, vivid {c} hues",
                "A studio photograph showing a large surface of {s}, {c} palette",
                "A painterly scene with {s} filling the foreground, {c} accents",
                "A macro texture photograph of {s}, dominant {c} color",
            ];
            let prompts: Vec<String> =
                (0..count).map(|k| FRAMES[k % FRAMES.len()].replace("{s}", &semantic).replace("{c}", &color)).collect();
            serde_json::json!({ "prompts": prompts }).to_string()
        } else if req.system_text.contains(stage::PATCH_SELECT) {
            let boxes: Vec<serde_json::Value> = req
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let (w, h) = img.dims();
                    serde_json::json!({
                        "image_index": i, "x": w / 4, "y": h / 4, "width": (w / 2).max(1), "height": (h / 2).max(1),
                        "reason": format!("central area shows {semantic}"),
                    })
                })
                .collect();
            serde_json::json!({ "boxes": boxes }).to_string()
        } else {
            "{}".to_string()
        }
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let n = req.max_candidates;
        if let Some(c) = self.canned.get(&request_key(req)) {
            if c.is_empty() {
                return Err(BackendError::malformed("canned entry is empty", ""));
            }
            return Ok((0..n).map(|k| c[k % c.len()].clone()).collect());
        }
        if self.scripted {
            let reply = Self::scripted_reply(req);
            return Ok(vec![reply; n]);
        }
        Ok(vec!["I am not sure what you mean.".to_string(); n])
    }
}

fn text_seed(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Procedural image generator: smooth seeded noise tinted by the first color
/// word in the prompt (gray when there is none).
#[derive(Debug, Default)]
pub struct MockImageGen {
    calls: AtomicUsize,
}

impl MockImageGen {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn synthesize(prompt: &str, seed: u64, width: usize, height: usize) -> Image {
        let tint = palette::find_color_word(prompt).map(|(_, c)| c).unwrap_or([128, 128, 128]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ text_seed(prompt));
        const GRID: usize = 8;
        let coarse: Vec<f64> = (0..(GRID + 1) * (GRID + 1)).map(|_| rng.random::<f64>()).collect();
        let mut img = Image::new(width, height, 3);
        for y in 0..height {
            let fy = y as f64 / height.max(1) as f64 * GRID as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..width {
                let fx = x as f64 / width.max(1) as f64 * GRID as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let g = |i: usize, j: usize| coarse[j.min(GRID) * (GRID + 1) + i.min(GRID)];
                let smooth = (g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx) * (1.0 - ty)
                    + (g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx) * ty;
                let grain: f64 = rng.random::<f64>();
                let factor = 0.85 + 0.2 * smooth + 0.1 * grain;
                img.set_rgb(x, y, tint.map(|c| (c as f64 * factor).round().clamp(0.0, 255.0) as u8));
            }
        }
        img
    }
}

impl ImageGenBackend for MockImageGen {
    fn generate(&self, req: &GenImageRequest) -> Result<Vec<Image>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((0..req.count)
            .map(|k| Self::synthesize(&req.prompt, req.seed.wrapping_add(k as u64), req.width, req.height))
            .collect())
    }
}

/// Inpainting mock: diffusion fill of the masked pixels.
#[derive(Debug, Default)]
pub struct MockInpaint {
    calls: AtomicUsize,
}

impl MockInpaint {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl InpaintBackend for MockInpaint {
    fn inpaint_raw(&self, req: &InpaintRequest) -> Result<Image, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(diffusion_fill(&req.image.to_rgb(), &req.mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegMockMode {
    /// The prompt mask plus its filled bounding box.
    #[default]
    PromptAndBox,
    /// Only the prompt mask.
    Identity,
}

#[derive(Debug, Default)]
pub struct MockSegmentation {
    pub mode: SegMockMode,
    calls: AtomicUsize,
}

impl MockSegmentation {
    pub fn new(mode: SegMockMode) -> Self {
        Self { mode, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SegmentationBackend for MockSegmentation {
    fn segment_raw(&self, req: &SegmentRequest) -> Result<Vec<Mask>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = req.prompt_mask.clone();
        match self.mode {
            SegMockMode::Identity => Ok(vec![prompt]),
            SegMockMode::PromptAndBox => {
                let (w, h) = prompt.dims();
                let bbox = Mask::from_rect(w, h, req.prompt_box);
                Ok(vec![bbox, prompt])
            }
        }
    }
}

/// Segmentation backend from a closure, handy for scripted tests.
pub struct FnSegmentation<F>(pub F);

impl<F> SegmentationBackend for FnSegmentation<F>
where
    F: Fn(&SegmentRequest) -> Result<Vec<Mask>, BackendError> + Send + Sync,
{
    fn segment_raw(&self, req: &SegmentRequest) -> Result<Vec<Mask>, BackendError> {
        (self.0)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat_req(n: usize) -> ChatRequest {
        ChatRequest { system_text: "sys".into(), user_text: "hello".into(), images: vec![], max_candidates: n }
    }

    #[test]
    fn canned_completion_by_hash() {
        let req = chat_req(1);
        let mock = MockChat::canned_only().with_canned(request_key(&req), vec!["canned!".into()]);
        assert_eq!(chat(&mock, &req).unwrap(), vec!["canned!".to_string()]);
    }

    #[test]
    fn four_candidates_requested_four_returned() {
        let req = chat_req(4);
        let mock = MockChat::scripted();
        assert_eq!(chat(&mock, &req).unwrap().len(), 4);
    }

    #[test]
    fn too_many_images_rejected() {
        let mut req = chat_req(1);
        req.images = vec![Image::new(1, 1, 3); 9];
        assert!(matches!(chat(&MockChat::scripted(), &req), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn red_prompt_yields_red_tinted_deterministic_noise() {
        let gen = MockImageGen::default();
        let mut req = GenImageRequest::new("a field of red poppies", 7);
        req.width = 64;
        req.height = 48;
        let a = generate_images(&gen, &req).unwrap();
        let b = generate_images(&gen, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].dims(), (64, 48));
        let m = a[0].mean_rgb(Rect::new(0, 0, 64, 48));
        assert!(m[0] > 150.0 && m[1] < 60.0 && m[2] < 60.0, "{m:?}");
        req.count = 4;
        let four = generate_images(&gen, &req).unwrap();
        assert_eq!(four.len(), 4);
        assert_ne!(four[0], four[1]);
    }

    #[test]
    fn guidance_must_be_positive() {
        let mut req = GenImageRequest::new("x", 1);
        req.guidance_scale = 0.0;
        assert!(generate_images(&MockImageGen::default(), &req).is_err());
        assert_eq!(GenImageRequest::new("x", 1).guidance_scale, 7.5);
    }

    struct Scrambler;
    impl InpaintBackend for Scrambler {
        fn inpaint_raw(&self, req: &InpaintRequest) -> Result<Image, BackendError> {
            let mut img = req.image.clone();
            for b in img.data_mut() {
                *b = b.wrapping_add(77);
            }
            Ok(img)
        }
    }

    #[test]
    fn inpaint_preserves_outside_mask_for_any_backend() {
        let mut image = Image::new(16, 16, 3);
        for (i, b) in image.data_mut().iter_mut().enumerate() {
            *b = (i * 13 % 256) as u8;
        }
        let mask = Mask::from_rect(16, 16, Rect::new(4, 4, 5, 3));
        let req = InpaintRequest { image: image.clone(), mask: mask.clone(), prompt: "p".into(), seed: 0 };
        for out in [inpaint(&Scrambler, &req).unwrap(), inpaint(&MockInpaint::default(), &req).unwrap()] {
            for y in 0..16 {
                for x in 0..16 {
                    if !mask.get(x, y) {
                        assert_eq!(out.pixel(x, y), image.pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn fill_everything_degenerates_to_mean() {
        let image = Image::filled(8, 8, &[10, 20, 30]);
        let req = InpaintRequest { image: image.clone(), mask: Mask::full(8, 8), prompt: "p".into(), seed: 0 };
        assert_eq!(inpaint(&MockInpaint::default(), &req).unwrap(), image);
    }

    #[test]
    fn segmentation_mock_sorted_and_empty_prompt_rejected() {
        let image = Image::new(20, 20, 3);
        let mut disk = Mask::new(20, 20);
        for (x, y) in [(10, 10), (9, 10), (11, 10), (10, 9), (10, 11)] {
            disk.set(x, y, true);
        }
        let req = SegmentRequest::from_mask(image.clone(), disk.clone()).unwrap();
        let cands = segment(&MockSegmentation::default(), &req).unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].mask, disk);
        assert_eq!(cands[1].area, 9);
        assert!(cands.windows(2).all(|w| w[0].area <= w[1].area));
        let empty = SegmentRequest { image, prompt_mask: Mask::new(20, 20), prompt_box: Rect::new(0, 0, 1, 1) };
        assert_eq!(segment(&MockSegmentation::default(), &empty), Err(BackendError::EmptyPrompt));
    }
}
