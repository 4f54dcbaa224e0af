//! The three chat dialogues that turn a scribble into texture content:
//! naming the intended content, writing scene prompts that feature it, and
//! picking a patch from the generated images. Also the keyword-based
//! evaluation of intent predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{chat, BackendError, ChatBackend, ChatRequest};
use crate::image::{Image, Mask, Rect, Rgb};
use crate::palette::{color_distance, color_name, is_color_word, rgb_f64};

#[derive(Debug, Error)]
pub enum IntentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unusable {stage} response after reprompt: {problem}")]
    Malformed { stage: &'static str, problem: String, raw: String },
    #[error("no usable patch box in any response")]
    NoCandidate,
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub version: String,
    pub intent_system: String,
    pub intent_user: String,
    pub global_system: String,
    pub global_user: String,
    pub patch_system: String,
    pub patch_user: String,
    pub reprompt: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            version: include_str!("../assets/templates/VERSION").trim().to_string(),
            intent_system: include_str!("../assets/templates/intent_system.txt").to_string(),
            intent_user: include_str!("../assets/templates/intent_user.txt").to_string(),
            global_system: include_str!("../assets/templates/global_system.txt").to_string(),
            global_user: include_str!("../assets/templates/global_user.txt").to_string(),
            patch_system: include_str!("../assets/templates/patch_system.txt").to_string(),
            patch_user: include_str!("../assets/templates/patch_user.txt").to_string(),
            reprompt: include_str!("../assets/templates/reprompt.txt").to_string(),
        }
    }
}

impl Templates {
    /// Load from a directory laid out like the bundled one; missing files
    /// fall back to the bundled text.
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", dir.display())));
        }
        let mut t = Self::default();
        let read = |name: &str, slot: &mut String| -> std::io::Result<()> {
            let p = dir.join(name);
            if p.exists() {
                *slot = std::fs::read_to_string(p)?;
            }
            Ok(())
        };
        read("VERSION", &mut t.version)?;
        t.version = t.version.trim().to_string();
        read("intent_system.txt", &mut t.intent_system)?;
        read("intent_user.txt", &mut t.intent_user)?;
        read("global_system.txt", &mut t.global_system)?;
        read("global_user.txt", &mut t.global_user)?;
        read("patch_system.txt", &mut t.patch_system)?;
        read("patch_user.txt", &mut t.patch_user)?;
        read("reprompt.txt", &mut t.reprompt)?;
        Ok(t)
    }
}

/// Substitute `{{name}}` placeholders; unknown or unfilled names are errors.
pub fn render_template(template: &str, vars: &[(&str, String)]) -> Result<String, IntentError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| IntentError::Template("unterminated placeholder".into()))?;
        let name = after[..end].trim();
        let val = vars
            .iter()
            .find(|(k, _)| *k == name)
            .ok_or_else(|| IntentError::Template(format!("no value for placeholder {name}")))?;
        out.push_str(&val.1);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn rgb_text(c: Rgb) -> String {
    format!("{}, {}, {}", c[0], c[1], c[2])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentPrediction {
    pub rank: usize,
    pub semantic: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalPrompt {
    pub text: String,
    pub intent_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchChoice {
    pub image_index: usize,
    pub rect: Rect,
    pub reason: String,
    /// Euclidean RGB distance between the patch mean and the scribble color.
    pub distance: f64,
}

/// First embedded JSON object accepted by `accept`, scanning every `{`.
pub fn extract_json<T>(text: &str, mut accept: impl FnMut(&Value) -> Result<T, String>) -> Result<T, String> {
    let mut last = "no JSON object found".to_string();
    for (i, _) in text.match_indices('{') {
        let mut it = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = it.next() {
            if v.is_object() {
                match accept(&v) {
                    Ok(t) => return Ok(t),
                    Err(e) => last = e,
                }
            }
        }
    }
    Err(last)
}

/// Run a chat exchange, reprompting once with the format reminder when
/// `parse` rejects the first completion.
fn chat_with_reprompt<T>(
    backend: &dyn ChatBackend,
    templates: &Templates,
    req: ChatRequest,
    stage: &'static str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, IntentError> {
    let first = chat(backend, &req)?.swap_remove(0);
    let problem = match parse(&first) {
        Ok(t) => return Ok(t),
        Err(p) => p,
    };
    let reminder = render_template(&templates.reprompt, &[("problem", problem)])?;
    let retry = ChatRequest { system_text: format!("{}\n{}", req.system_text.trim_end(), reminder), ..req };
    let second = chat(backend, &retry)?.swap_remove(0);
    parse(&second).map_err(|problem| IntentError::Malformed { stage, problem, raw: second })
}

/// Images and context sent to the intent dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentInputs {
    /// Textured renders of the four intent views.
    pub views: Vec<Image>,
    /// The scribble view with the strokes drawn over it.
    pub overlay: Image,
    pub color: Rgb,
    pub hint: Option<String>,
}

pub fn build_intent_request(templates: &Templates, inputs: &IntentInputs, n: usize) -> Result<ChatRequest, IntentError> {
    let hint = match inputs.hint.as_deref().map(str::trim) {
        Some(h) if !h.is_empty() => format!("User instruction: {h}"),
        _ => String::new(),
    };
    let user_text = render_template(
        &templates.intent_user,
        &[
            ("color_name", color_name(inputs.color).to_string()),
            ("rgb", rgb_text(inputs.color)),
            ("hint", hint),
            ("n", n.to_string()),
        ],
    )?;
    let mut images = inputs.views.clone();
    images.push(inputs.overlay.clone());
    Ok(ChatRequest { system_text: templates.intent_system.clone(), user_text, images, max_candidates: 1 })
}

pub fn parse_intent_response(text: &str, n: usize) -> Result<Vec<IntentPrediction>, String> {
    extract_json(text, |v| {
        let arr = v.get("predictions").and_then(Value::as_array).ok_or("missing \"predictions\" array")?;
        let mut raw: Vec<(f64, usize, String, String)> = Vec::new();
        for (k, p) in arr.iter().enumerate() {
            let semantic = p.get("semantic").and_then(Value::as_str).map(str::trim).unwrap_or("");
            if semantic.is_empty() {
                return Err(format!("prediction {k} has an empty semantic"));
            }
            let rank = p.get("rank").and_then(Value::as_f64).unwrap_or((k + 1) as f64);
            let rationale = p.get("rationale").and_then(Value::as_str).unwrap_or("").trim().to_string();
            raw.push((rank, k, semantic.to_string(), rationale));
        }
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (_, _, semantic, rationale) in raw {
            if seen.insert(semantic.to_lowercase()) {
                out.push(IntentPrediction { rank: out.len() + 1, semantic, rationale });
            }
        }
        if out.len() < n {
            return Err(format!("expected {n} distinct predictions, got {}", out.len()));
        }
        out.truncate(n);
        Ok(out)
    })
}

/// Ask the chat model for `n` ranked guesses of the scribble's content.
pub fn predict_intent(
    backend: &dyn ChatBackend,
    templates: &Templates,
    inputs: &IntentInputs,
    n: usize,
) -> Result<Vec<IntentPrediction>, IntentError> {
    if n == 0 {
        return Err(IntentError::InvalidArgument("n must be ≥ 1".into()));
    }
    let req = build_intent_request(templates, inputs, n)?;
    chat_with_reprompt(backend, templates, req, "intent", |t| parse_intent_response(t, n))
}

pub fn build_global_request(templates: &Templates, semantic: &str, color: Rgb, style: &str, n: usize) -> Result<ChatRequest, IntentError> {
    let user_text = render_template(
        &templates.global_user,
        &[
            ("semantic", semantic.to_string()),
            ("color_name", color_name(color).to_string()),
            ("rgb", rgb_text(color)),
            ("style", style.to_string()),
            ("n", n.to_string()),
        ],
    )?;
    Ok(ChatRequest { system_text: templates.global_system.clone(), user_text, images: vec![], max_candidates: 1 })
}

pub fn parse_global_response(text: &str, semantic: &str, n: usize, lexicon: &Lexicon) -> Result<Vec<String>, String> {
    let wanted = lexicon.content_terms(semantic);
    extract_json(text, |v| {
        let arr = v.get("prompts").and_then(Value::as_array).ok_or("missing \"prompts\" array")?;
        let prompts: Vec<String> =
            arr.iter().filter_map(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        if prompts.len() < n {
            return Err(format!("expected {n} prompts, got {}", prompts.len()));
        }
        let prompts = prompts[..n].to_vec();
        if !wanted.is_empty() {
            for (k, p) in prompts.iter().enumerate() {
                let have = lexicon.terms(p);
                if wanted.is_disjoint(&have) {
                    return Err(format!("prompt {k} does not mention \"{semantic}\""));
                }
            }
        }
        Ok(prompts)
    })
}

/// Scene descriptions featuring the predicted content.
pub fn make_global_prompts(
    backend: &dyn ChatBackend,
    templates: &Templates,
    lexicon: &Lexicon,
    pred: &IntentPrediction,
    color: Rgb,
    style: &str,
    n: usize,
) -> Result<Vec<GlobalPrompt>, IntentError> {
    if n == 0 {
        return Err(IntentError::InvalidArgument("n must be ≥ 1".into()));
    }
    let req = build_global_request(templates, &pred.semantic, color, style, n)?;
    let texts = chat_with_reprompt(backend, templates, req, "global_prompts", |t| {
        parse_global_response(t, &pred.semantic, n, lexicon)
    })?;
    Ok(texts.into_iter().map(|text| GlobalPrompt { text, intent_rank: pred.rank }).collect())
}

pub fn build_patch_request(templates: &Templates, images: &[Image], semantic: &str, color: Rgb) -> Result<ChatRequest, IntentError> {
    let user_text = render_template(
        &templates.patch_user,
        &[
            ("semantic", semantic.to_string()),
            ("color_name", color_name(color).to_string()),
            ("rgb", rgb_text(color)),
            ("n", images.len().to_string()),
        ],
    )?;
    Ok(ChatRequest { system_text: templates.patch_system.clone(), user_text, images: images.to_vec(), max_candidates: 1 })
}

/// Boxes clamped to their image; invalid ones are dropped.
pub fn parse_patch_response(text: &str, dims: &[(usize, usize)]) -> Result<Vec<(usize, Rect, String)>, String> {
    extract_json(text, |v| {
        let arr = v.get("boxes").and_then(Value::as_array).ok_or("missing \"boxes\" array")?;
        let mut out = Vec::new();
        for b in arr {
            let num = |k: &str| b.get(k).and_then(Value::as_f64);
            let (Some(i), Some(x), Some(y), Some(w), Some(h)) = (num("image_index"), num("x"), num("y"), num("width"), num("height"))
            else {
                continue;
            };
            if i < 0.0 || i.fract() != 0.0 || i as usize >= dims.len() || !(w > 0.0 && h > 0.0) {
                continue;
            }
            let (iw, ih) = dims[i as usize];
            let x0 = x.round().max(0.0).min(iw as f64) as usize;
            let y0 = y.round().max(0.0).min(ih as f64) as usize;
            let x1 = (x + w).round().max(0.0).min(iw as f64) as usize;
            let y1 = (y + h).round().max(0.0).min(ih as f64) as usize;
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let reason = b.get("reason").and_then(Value::as_str).unwrap_or("").to_string();
            out.push((i as usize, Rect::new(x0, y0, x1 - x0, y1 - y0), reason));
        }
        if out.is_empty() {
            return Err("no box lies inside its image".into());
        }
        Ok(out)
    })
}

fn tie_key(c: &PatchChoice) -> (usize, usize, usize, usize, usize) {
    (c.image_index, c.rect.y, c.rect.x, c.rect.w, c.rect.h)
}

/// Candidate with the smallest mean-color distance; ties go to the smallest
/// (image, y, x, w, h), so the result does not depend on candidate order.
pub fn best_by_color(images: &[Image], candidates: &[(usize, Rect, String)], color: Rgb) -> Option<PatchChoice> {
    let target = rgb_f64(color);
    candidates
        .iter()
        .map(|(i, r, reason)| PatchChoice {
            image_index: *i,
            rect: *r,
            reason: reason.clone(),
            distance: color_distance(images[*i].mean_rgb(*r), target),
        })
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then(tie_key(a).cmp(&tie_key(b))))
}

/// The chat model proposes boxes; the one closest in mean color wins.
pub fn choose_patch(
    backend: &dyn ChatBackend,
    templates: &Templates,
    images: &[Image],
    semantic: &str,
    color: Rgb,
) -> Result<PatchChoice, IntentError> {
    if images.is_empty() {
        return Err(IntentError::InvalidArgument("no images to choose from".into()));
    }
    let dims: Vec<_> = images.iter().map(Image::dims).collect();
    let req = build_patch_request(templates, images, semantic, color)?;
    let boxes = match chat_with_reprompt(backend, templates, req, "patch_select", |t| parse_patch_response(t, &dims)) {
        Ok(b) => b,
        Err(IntentError::Malformed { .. }) => return Err(IntentError::NoCandidate),
        Err(e) => return Err(e),
    };
    best_by_color(images, &boxes, color).ok_or(IntentError::NoCandidate)
}

struct ColorSums {
    w: usize,
    sums: Vec<[u64; 3]>,
}

impl ColorSums {
    fn new(img: &Image) -> Self {
        let (w, h) = img.dims();
        let mut sums = vec![[0u64; 3]; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = [0u64; 3];
            for x in 0..w {
                let c = img.rgb(x, y);
                for k in 0..3 {
                    row[k] += c[k] as u64;
                    sums[(y + 1) * (w + 1) + x + 1][k] = sums[y * (w + 1) + x + 1][k] + row[k];
                }
            }
        }
        Self { w, sums }
    }

    fn mean(&self, r: Rect) -> [f64; 3] {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        let (a, b, c, d) = (s(r.x, r.y), s(r.right(), r.y), s(r.x, r.bottom()), s(r.right(), r.bottom()));
        let n = r.area() as f64;
        [0, 1, 2].map(|k| (d[k] + a[k] - b[k] - c[k]) as f64 / n)
    }
}

/// Slide a window over every image at the given stride and return the one
/// whose mean color is closest; ties go to the smallest (image, y, x).
/// Windows are only considered where `valid` (if given, one mask per image)
/// is set on every pixel.
pub fn patch_search_with_stride(
    images: &[Image],
    valid: Option<&[Mask]>,
    color: Rgb,
    size: (usize, usize),
    stride: (usize, usize),
) -> Option<PatchChoice> {
    let target = rgb_f64(color);
    let mut best: Option<PatchChoice> = None;
    for (i, img) in images.iter().enumerate() {
        let (iw, ih) = img.dims();
        let (pw, ph) = (size.0.clamp(1, iw.max(1)), size.1.clamp(1, ih.max(1)));
        if iw == 0 || ih == 0 {
            continue;
        }
        let sums = ColorSums::new(img);
        let valid_sums = valid.map(|v| crate::image::MaskIntegral::new(&v[i]));
        for y in (0..=ih - ph).step_by(stride.1.max(1)) {
            for x in (0..=iw - pw).step_by(stride.0.max(1)) {
                let r = Rect::new(x, y, pw, ph);
                if let Some(vs) = &valid_sums {
                    if vs.count(r) != r.area() {
                        continue;
                    }
                }
                let d = color_distance(sums.mean(r), target);
                if best.as_ref().is_none_or(|b| d < b.distance) {
                    best = Some(PatchChoice { image_index: i, rect: r, reason: "closest mean color".into(), distance: d });
                }
            }
        }
    }
    best
}

/// Deterministic fallback: stride of half the patch size.
pub fn exhaustive_patch_search(images: &[Image], color: Rgb, size: (usize, usize)) -> Option<PatchChoice> {
    patch_search_with_stride(images, None, color, size, ((size.0 / 2).max(1), (size.1 / 2).max(1)))
}

/// Same search over the existing atlas, restricted to windows fully inside
/// `valid` texels.
pub fn atlas_patch_search(atlas: &Image, valid: &Mask, color: Rgb, size: (usize, usize)) -> Option<PatchChoice> {
    patch_search_with_stride(
        std::slice::from_ref(atlas),
        Some(std::slice::from_ref(valid)),
        color,
        size,
        ((size.0 / 2).max(1), (size.1 / 2).max(1)),
    )
}

/// Word normalization for keyword matching: stopwords, suffix stripping and
/// synonym canonicalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub stopwords: Vec<String>,
    pub suffix_rules: Vec<(String, String)>,
    pub min_stem: usize,
    /// Canonical term → alternatives.
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        serde_json::from_str(include_str!("../assets/lexicon.json")).expect("bundled lexicon is valid")
    }
}

impl Lexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    fn synonym_of(&self, w: &str) -> Option<&str> {
        if self.synonyms.contains_key(w) {
            return Some(self.synonyms.get_key_value(w).unwrap().0);
        }
        self.synonyms.iter().find(|(_, alts)| alts.iter().any(|a| a == w)).map(|(k, _)| k.as_str())
    }

    pub fn stem(&self, w: &str) -> String {
        for (suffix, repl) in &self.suffix_rules {
            if let Some(base) = w.strip_suffix(suffix.as_str()) {
                if base.len() + repl.len() >= self.min_stem {
                    return format!("{base}{repl}");
                }
                return w.to_string();
            }
        }
        w.to_string()
    }

    /// Canonical form of one word, or `None` for stopwords.
    pub fn canonical(&self, word: &str) -> Option<String> {
        let w = word.to_lowercase();
        if w.is_empty() || self.stopwords.contains(&w) {
            return None;
        }
        if let Some(c) = self.synonym_of(&w) {
            return Some(c.to_string());
        }
        let s = self.stem(&w);
        Some(self.synonym_of(&s).map(str::to_string).unwrap_or(s))
    }

    pub fn terms(&self, text: &str) -> BTreeSet<String> {
        text.split(|c: char| !c.is_alphanumeric()).filter_map(|w| self.canonical(w)).collect()
    }

    /// Terms of `text` that are not color words.
    pub fn content_terms(&self, text: &str) -> BTreeSet<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !is_color_word(w))
            .filter_map(|w| self.canonical(w))
            .collect()
    }

    /// A keyword phrase matches when every one of its terms appears in `text`.
    pub fn phrase_matches(&self, keyword: &str, text: &str) -> bool {
        let want = self.terms(keyword);
        !want.is_empty() && want.is_subset(&self.terms(text))
    }

    pub fn prediction_correct(&self, truth_keywords: &[String], predictions: &[IntentPrediction]) -> bool {
        predictions.iter().any(|p| truth_keywords.iter().any(|k| self.phrase_matches(k, &p.semantic)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentCase {
    pub inputs: IntentInputs,
    pub truth_keywords: Vec<String>,
}

/// Fraction of cases where some prediction matches a truth keyword. A case
/// whose dialogue fails counts as incorrect.
pub fn evaluate_intent_accuracy(
    backend: &dyn ChatBackend,
    templates: &Templates,
    lexicon: &Lexicon,
    cases: &[IntentCase],
    n: usize,
) -> f64 {
    assert!(!cases.is_empty(), "evaluation needs at least one case");
    let correct = cases
        .iter()
        .filter(|c| {
            predict_intent(backend, templates, &c.inputs, n).is_ok_and(|p| lexicon.prediction_correct(&c.truth_keywords, &p))
        })
        .count();
    correct as f64 / cases.len() as f64
}

/// Accuracy for every n in 1..=max_n, from one query per case at `max_n`
/// scored on prediction prefixes.
pub fn accuracy_sweep(backend: &dyn ChatBackend, templates: &Templates, lexicon: &Lexicon, cases: &[IntentCase], max_n: usize) -> Vec<f64> {
    assert!(!cases.is_empty(), "evaluation needs at least one case");
    let preds: Vec<Option<Vec<IntentPrediction>>> =
        cases.iter().map(|c| predict_intent(backend, templates, &c.inputs, max_n).ok()).collect();
    (1..=max_n)
        .map(|n| {
            let ok = cases
                .iter()
                .zip(&preds)
                .filter(|(c, p)| p.as_ref().is_some_and(|p| lexicon.prediction_correct(&c.truth_keywords, &p[..n.min(p.len())])))
                .count();
            ok as f64 / cases.len() as f64
        })
        .collect()
}
