//! Stroke rasterization: user strokes on a rendered view become colored
//! screen-space regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Mask, Rgb};
use crate::morph::components8;
use crate::render::ViewFrame;
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ScribbleError {
    #[error("scribble does not touch the object")]
    EmptyScribble,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("invalid stroke {index}: {reason}")]
    InvalidStroke { index: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// One brush stroke: a polyline stamped with a disk of `radius` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub view_id: String,
    pub color: Rgb,
    pub radius: f64,
    pub points: Vec<[f64; 2]>,
}

/// A connected scribbled area on one view with its dominant color.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleRegion {
    pub color: Rgb,
    pub screen_mask: Mask,
    pub view_id: String,
    /// Free-text instruction accompanying the scribble.
    pub hint: Option<String>,
}

impl Stroke {
    fn validate(&self, index: usize, frame_id: &str, res: usize) -> Result<(), ScribbleError> {
        let bad = |reason: String| Err(ScribbleError::InvalidStroke { index, reason });
        if self.view_id != frame_id {
            return bad(format!("references view {:?}, expected {frame_id:?}", self.view_id));
        }
        if self.points.is_empty() {
            return bad("no points".into());
        }
        if !(self.radius >= 1.0) {
            return bad(format!("radius {} < 1", self.radius));
        }
        let limit = res as f64;
        if let Some(p) = self.points.iter().find(|p| !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < limit && p[1] < limit)) {
            return bad(format!("point {p:?} outside {res}x{res} view"));
        }
        Ok(())
    }

    /// Pixels within `radius` of the polyline; pixel (i, j) sits at (i, j).
    pub fn stamp(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::new(width, height);
        let r = self.radius;
        let r2 = r * r;
        let segs: Vec<([f64; 2], [f64; 2])> = if self.points.len() == 1 {
            vec![(self.points[0], self.points[0])]
        } else {
            self.points.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (a, b) in segs {
            let x0 = (a[0].min(b[0]) - r).floor().max(0.0) as usize;
            let y0 = (a[1].min(b[1]) - r).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + r).ceil().max(0.0) as usize).min(width.saturating_sub(1));
            let y1 = ((a[1].max(b[1]) + r).ceil().max(0.0) as usize).min(height.saturating_sub(1));
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64 - a[0], y as f64 - a[1]];
                    let t = if len2 > 0.0 { ((p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                    let q = [p[0] - t * d[0], p[1] - t * d[1]];
                    if q[0] * q[0] + q[1] * q[1] <= r2 {
                        m.set(x, y, true);
                    }
                }
            }
        }
        m
    }
}

/// Stamp strokes, clip to the object, and split into 8-connected regions
/// colored by the stroke color covering the most pixels of each region.
pub fn rasterize_strokes<S: Real>(strokes: &[Stroke], frame: &ViewFrame<S>) -> Result<Vec<ScribbleRegion>, ScribbleError> {
    let res = frame.resolution();
    let id = frame.spec.id();
    for (i, s) in strokes.iter().enumerate() {
        s.validate(i, &id, res)?;
    }
    let fg = frame.foreground_mask();
    let stamps: Vec<Mask> = strokes.iter().map(|s| s.stamp(res, res).intersection(&fg)).collect();
    let mut union = Mask::new(res, res);
    for s in &stamps {
        union.union_with(s);
    }
    if union.is_empty() {
        return Err(ScribbleError::EmptyScribble);
    }
    let regions = components8(&union)
        .into_iter()
        .map(|comp| {
            let mut area: BTreeMap<Rgb, usize> = BTreeMap::new();
            for (s, st) in strokes.iter().zip(&stamps) {
                *area.entry(s.color).or_default() += st.intersection_count(&comp);
            }
            // largest area wins; ties go to the smallest RGB triple
            let color = area
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(c, _)| *c)
                .expect("component covered by some stroke");
            ScribbleRegion { color, screen_mask: comp, view_id: id.clone(), hint: None }
        })
        .collect();
    Ok(regions)
}

/// Modal color among masked overlay pixels after quantizing each channel to
/// 32 levels, returned as the mean of that bucket's members.
pub fn dominant_color(mask: &Mask, overlay: &Image) -> Result<Rgb, ScribbleError> {
    if mask.dims() != overlay.dims() {
        return Err(ScribbleError::Dimensions(format!("mask {:?} vs overlay {:?}", mask.dims(), overlay.dims())));
    }
    let mut buckets: BTreeMap<[u8; 3], ([u64; 3], u64)> = BTreeMap::new();
    for (x, y) in mask.iter_set() {
        let c = overlay.rgb(x, y);
        let e = buckets.entry(c.map(|v| v >> 3)).or_default();
        for k in 0..3 {
            e.0[k] += c[k] as u64;
        }
        e.1 += 1;
    }
    let (_, (sum, n)) = buckets
        .iter()
        .max_by(|a, b| a.1 .1.cmp(&b.1 .1).then(b.0.cmp(a.0)))
        .ok_or(ScribbleError::EmptyMask)?;
    Ok([0, 1, 2].map(|k| ((sum[k] + n / 2) / n) as u8))
}

/// Regions from an imported overlay whose non-transparent pixels are the
/// scribble.
pub fn regions_from_overlay<S: Real>(overlay: &Image, frame: &ViewFrame<S>) -> Result<Vec<ScribbleRegion>, ScribbleError> {
    let res = frame.resolution();
    if overlay.dims() != (res, res) {
        return Err(ScribbleError::Dimensions(format!("overlay {:?} vs view {res}x{res}", overlay.dims())));
    }
    let mut mask = Mask::from_image(overlay);
    mask.intersect_with(&frame.foreground_mask());
    if mask.is_empty() {
        return Err(ScribbleError::EmptyScribble);
    }
    components8(&mask)
        .into_iter()
        .map(|comp| {
            Ok(ScribbleRegion { color: dominant_color(&comp, overlay)?, screen_mask: comp, view_id: frame.spec.id(), hint: None })
        })
        .collect()
}

/// The view's color image with the region painted on top.
pub fn draw_overlay(base: &Image, region: &ScribbleRegion) -> Image {
    let mut out = base.to_rgb();
    for (x, y) in region.screen_mask.iter_set() {
        out.set_rgb(x, y, region.color);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::render::{render, CameraDefaults, RenderMode, ViewSpec};
    use proptest::prelude::*;

    fn cube_frame() -> crate::Frame {
        let mesh: crate::Mesh = fixtures::cube_charts(fixtures::brown_atlas(64));
        render(&mesh, &ViewSpec::new(0.0, 0.0, CameraDefaults { resolution: 128, ..Default::default() }), RenderMode::Textured)
    }

    fn stroke(color: Rgb, radius: f64, points: Vec<[f64; 2]>) -> Stroke {
        Stroke { view_id: "t0_p0".into(), color, radius, points }
    }

    #[test]
    fn single_capsule_on_object() {
        let f = cube_frame();
        let s = stroke([255, 0, 0], 5.0, vec![[50.0, 60.0], [70.0, 62.0]]);
        let regions = rasterize_strokes(std::slice::from_ref(&s), &f).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].color, [255, 0, 0]);
        assert_eq!(regions[0].screen_mask, s.stamp(128, 128).intersection(&f.foreground_mask()));
    }

    #[test]
    fn disjoint_strokes_make_two_regions() {
        let f = cube_frame();
        let strokes = [stroke([255, 0, 0], 3.0, vec![[45.0, 45.0]]), stroke([0, 255, 0], 3.0, vec![[80.0, 80.0]])];
        let regions = rasterize_strokes(&strokes, &f).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].color, [255, 0, 0]);
        assert_eq!(regions[1].color, [0, 255, 0]);
    }

    #[test]
    fn overlapping_strokes_take_area_dominant_color() {
        let f = cube_frame();
        let red = stroke([255, 0, 0], 6.0, vec![[45.0, 64.0], [75.0, 64.0]]);
        let green = stroke([0, 255, 0], 6.0, vec![[75.0, 64.0], [82.0, 64.0]]);
        // brute-force areas of each stroke over the union
        let fg = f.foreground_mask();
        let r = red.stamp(128, 128).intersection(&fg).count();
        let g = green.stamp(128, 128).intersection(&fg).count();
        assert!(r > g);
        let regions = rasterize_strokes(&[green, red], &f).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].color, [255, 0, 0]);
    }

    #[test]
    fn background_only_is_empty_scribble() {
        let f = cube_frame();
        let s = stroke([255, 0, 0], 2.0, vec![[2.0, 2.0], [6.0, 2.0]]);
        assert_eq!(rasterize_strokes(&[s], &f), Err(ScribbleError::EmptyScribble));
    }

    #[test]
    fn invalid_strokes_rejected() {
        let f = cube_frame();
        let mut s = stroke([1, 2, 3], 0.5, vec![[10.0, 10.0]]);
        assert!(matches!(rasterize_strokes(&[s.clone()], &f), Err(ScribbleError::InvalidStroke { .. })));
        s.radius = 2.0;
        s.view_id = "t0_p90".into();
        assert!(matches!(rasterize_strokes(&[s], &f), Err(ScribbleError::InvalidStroke { .. })));
    }

    #[test]
    fn dominant_color_mode_and_bucket_mean() {
        let mut img = Image::new(10, 1, 3);
        for x in 0..10 {
            img.set_rgb(x, 0, if x < 6 { [255 - x as u8, 2, 1] } else { [0, 0, 255] });
        }
        let m = Mask::full(10, 1);
        // red bucket members 255..250 → mean 252.5 → 253
        assert_eq!(dominant_color(&m, &img).unwrap(), [253, 2, 1]);
        assert_eq!(dominant_color(&Mask::new(10, 1), &img), Err(ScribbleError::EmptyMask));
    }

    #[test]
    fn antialiased_stroke_core_stays_close_to_red() {
        // synthetic overlay: brown base, red stroke with soft edges
        let (w, h) = (64, 64);
        let mut img = Image::filled(w, h, &[120, 75, 40]);
        let mut core = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let d = (y as f64 - 32.0).abs();
                let a = (1.0 - (d - 4.0).max(0.0) / 3.0).clamp(0.0, 1.0);
                if a > 0.0 {
                    let mix = |s: f64, b: f64| (s * a + b * (1.0 - a)).round() as u8;
                    img.set_rgb(x, y, [mix(230.0, 120.0), mix(20.0, 75.0), mix(25.0, 40.0)]);
                }
                if d <= 5.0 {
                    core.set(x, y, true);
                }
            }
        }
        let c = dominant_color(&core, &img).unwrap();
        let dist = crate::palette::color_distance(crate::palette::rgb_f64(c), [230.0, 20.0, 25.0]);
        assert!(dist <= 16.0, "{c:?} at distance {dist}");
    }

    #[test]
    fn overlay_import_finds_regions() {
        let f = cube_frame();
        let mut overlay = Image::new(128, 128, 4);
        for y in 60..66 {
            for x in 50..70 {
                overlay.pixel_mut(x, y).copy_from_slice(&[0, 0, 250, 255]);
            }
        }
        let regions = regions_from_overlay(&overlay, &f).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].color, [0, 0, 250]);
        assert_eq!(regions[0].screen_mask.count(), 120);
    }

    #[test]
    fn stroke_json_schema() {
        let s: Stroke = serde_json::from_str(r#"{"view_id":"t0_p0","color":[255,0,0],"radius":5,"points":[[1,2],[3,4.5]]}"#).unwrap();
        assert_eq!(s.points, vec![[1.0, 2.0], [3.0, 4.5]]);
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"view_id":"t0_p0","color":[255,0,0],"radius":5.0,"points":[[1.0,2.0],[3.0,4.5]]}"#
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn regions_partition_the_clipped_union(
            pts in proptest::collection::vec((20.0f64..108.0, 20.0f64..108.0, 1.0f64..6.0, 0usize..3), 1..5)
        ) {
            let f = cube_frame();
            let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];
            let strokes: Vec<Stroke> = pts.iter().map(|&(x, y, r, c)| stroke(colors[c], r, vec![[x, y], [x + 6.0, y + 3.0]])).collect();
            let fg = f.foreground_mask();
            let mut union = Mask::new(128, 128);
            for s in &strokes {
                union.union_with(&s.stamp(128, 128).intersection(&fg));
            }
            match rasterize_strokes(&strokes, &f) {
                Ok(regions) => {
                    let mut acc = Mask::new(128, 128);
                    for r in &regions {
                        prop_assert!(acc.is_disjoint(&r.screen_mask));
                        acc.union_with(&r.screen_mask);
                    }
                    prop_assert_eq!(&acc, &union);
                    let mut rev = strokes.clone();
                    rev.reverse();
                    prop_assert_eq!(rasterize_strokes(&rev, &f).unwrap().len(), regions.len());
                }
                Err(e) => {
                    prop_assert_eq!(e, ScribbleError::EmptyScribble);
                    prop_assert!(union.is_empty());
                }
            }
        }

        #[test]
        fn translation_moves_masks(dx in -10i32..10, dy in -10i32..10) {
            let f = cube_frame();
            let base = stroke([255, 0, 0], 4.0, vec![[55.0, 58.0], [66.0, 70.0]]);
            let mut moved = base.clone();
            for p in &mut moved.points {
                p[0] += dx as f64;
                p[1] += dy as f64;
            }
            let a = rasterize_strokes(&[base], &f).unwrap();
            let b = rasterize_strokes(&[moved], &f).unwrap();
            let shifted = Mask::from_fn(128, 128, |x, y| {
                a[0].screen_mask.get_i(x as i64 - dx as i64, y as i64 - dy as i64)
            });
            prop_assert_eq!(&b[0].screen_mask, &shifted);
        }
    }
}
