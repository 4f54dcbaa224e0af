//! Basic color vocabulary for describing scribble colors in text and
//! recovering a tint from generation prompts.

use crate::image::{Image, Rgb};

pub const NAMED_COLORS: &[(&str, Rgb)] = &[
    ("red", [220, 30, 30]),
    ("orange", [240, 140, 20]),
    ("yellow", [240, 220, 40]),
    ("green", [40, 170, 60]),
    ("cyan", [40, 200, 210]),
    ("blue", [40, 70, 210]),
    ("purple", [130, 50, 170]),
    ("pink", [240, 150, 190]),
    ("brown", [120, 75, 40]),
    ("black", [15, 15, 15]),
    ("gray", [128, 128, 128]),
    ("white", [245, 245, 245]),
];

pub fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn rgb_f64(c: Rgb) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

/// Nearest named color by Euclidean RGB distance.
pub fn color_name(c: Rgb) -> &'static str {
    NAMED_COLORS
        .iter()
        .min_by(|a, b| {
            color_distance(rgb_f64(a.1), rgb_f64(c)).total_cmp(&color_distance(rgb_f64(b.1), rgb_f64(c)))
        })
        .map(|(n, _)| *n)
        .expect("palette non-empty")
}

pub fn is_color_word(w: &str) -> bool {
    let w = w.to_ascii_lowercase();
    w == "grey" || NAMED_COLORS.iter().any(|(n, _)| *n == w)
}

/// First color word appearing in `text`, with its RGB value.
pub fn find_color_word(text: &str) -> Option<(&'static str, Rgb)> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .find_map(|w| {
            let w = w.to_ascii_lowercase();
            let w = if w == "grey" { "gray".to_string() } else { w };
            NAMED_COLORS.iter().find(|(n, _)| *n == w).map(|(n, c)| (*n, *c))
        })
}

/// Short description of the dominant colors of an image, e.g. "brown, white".
pub fn describe_palette(img: &Image, max_colors: usize) -> String {
    let mut counts = vec![0usize; NAMED_COLORS.len()];
    let step = ((img.width() * img.height()) / 4096).max(1);
    for i in (0..img.width() * img.height()).step_by(step) {
        let c = img.rgb(i % img.width(), i / img.width());
        let name = color_name(c);
        let k = NAMED_COLORS.iter().position(|(n, _)| *n == name).unwrap();
        counts[k] += 1;
    }
    let mut order: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.iter().take(max_colors).map(|&k| NAMED_COLORS[k].0).collect::<Vec<_>>().join(", ")
}
