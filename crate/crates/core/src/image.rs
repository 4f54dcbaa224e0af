//! 8-bit raster images and binary masks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("corrupt or unreadable image {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// An RGB triple.
pub type Rgb = [u8; 3];

/// Row-major interleaved 8-bit image with 1, 3 or 4 channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(matches!(channels, 1 | 3 | 4), "unsupported channel count {channels}");
        Self { width, height, channels, data: vec![0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Self {
        let mut img = Self::new(width, height, pixel.len());
        for px in img.data.chunks_exact_mut(pixel.len()) {
            px.copy_from_slice(pixel);
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(ImageError::Channels(channels));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Dimensions(format!(
                "{} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// RGB view of a pixel; gray images replicate the single channel.
    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> Rgb {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, c: Rgb) {
        let ch = self.channels;
        let p = self.pixel_mut(x, y);
        if ch == 1 {
            p[0] = ((c[0] as u32 + c[1] as u32 + c[2] as u32) / 3) as u8;
        } else {
            p[..3].copy_from_slice(&c);
            if ch == 4 {
                p[3] = 255;
            }
        }
    }

    pub fn to_rgb(&self) -> Image {
        let mut out = Image::new(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(x, y).copy_from_slice(&self.rgb(x, y));
            }
        }
        out
    }

    pub fn to_rgba(&self) -> Image {
        if self.channels == 4 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 4);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.rgb(x, y);
                out.pixel_mut(x, y).copy_from_slice(&[c[0], c[1], c[2], 255]);
            }
        }
        out
    }

    /// Copy of the sub-rectangle; the rectangle must lie inside the image.
    pub fn crop(&self, r: Rect) -> Image {
        assert!(r.x + r.w <= self.width && r.y + r.h <= self.height, "crop {r:?} outside image");
        let mut out = Image::new(r.w, r.h, self.channels);
        for y in 0..r.h {
            let src = ((r.y + y) * self.width + r.x) * self.channels;
            let dst = y * r.w * self.channels;
            out.data[dst..dst + r.w * self.channels]
                .copy_from_slice(&self.data[src..src + r.w * self.channels]);
        }
        out
    }

    /// Per-channel mean of the RGB values inside `r`.
    pub fn mean_rgb(&self, r: Rect) -> [f64; 3] {
        let mut sum = [0u64; 3];
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let c = self.rgb(x, y);
                for k in 0..3 {
                    sum[k] += c[k] as u64;
                }
            }
        }
        let n = (r.w * r.h).max(1) as f64;
        [sum[0] as f64 / n, sum[1] as f64 / n, sum[2] as f64 / n]
    }

    /// Bilinear resample to `w × h`, sampling at pixel centers.
    pub fn resize_bilinear(&self, w: usize, h: usize) -> Image {
        assert!(w >= 1 && h >= 1);
        if (w, h) == self.dims() {
            return self.clone();
        }
        let mut out = Image::new(w, h, self.channels);
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let a = self.pixel(x0, y0)[c] as f64 * (1.0 - tx) + self.pixel(x1, y0)[c] as f64 * tx;
                    let b = self.pixel(x0, y1)[c] as f64 * (1.0 - tx) + self.pixel(x1, y1)[c] as f64 * tx;
                    out.pixel_mut(x, y)[c] = (a * (1.0 - ty) + b * ty).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::decode_png(&bytes).map_err(|e| match e {
            ImageError::Corrupt { reason, .. } => ImageError::Corrupt { path: path.display().to_string(), reason },
            other => other,
        })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let corrupt = |reason: String| ImageError::Corrupt { path: "<memory>".into(), reason };
        let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| corrupt(e.to_string()))?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        if w == 0 || h == 0 {
            return Err(corrupt("empty image".into()));
        }
        let img = match dynimg.color() {
            image::ColorType::L8 | image::ColorType::L16 => {
                Image::from_raw(w, h, 1, dynimg.into_luma8().into_raw())?
            }
            image::ColorType::Rgb8 | image::ColorType::Rgb16 | image::ColorType::Rgb32F => {
                Image::from_raw(w, h, 3, dynimg.into_rgb8().into_raw())?
            }
            _ => Image::from_raw(w, h, 4, dynimg.into_rgba8().into_raw())?,
        };
        Ok(img)
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            _ => image::ExtendedColorType::Rgba8,
        };
        let mut buf = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut buf),
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .expect("png encoding into memory");
        buf
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png())?;
        Ok(())
    }
}

/// Axis-aligned integer rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }
    pub fn area(&self) -> usize {
        self.w * self.h
    }
    pub fn right(&self) -> usize {
        self.x + self.w
    }
    pub fn bottom(&self) -> usize {
        self.y + self.h
    }
    pub fn intersects(&self, o: &Rect) -> bool {
        self.x < o.right() && o.x < self.right() && self.y < o.bottom() && o.y < self.bottom()
    }
    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x >= self.x && o.y >= self.y && o.right() <= self.right() && o.bottom() <= self.bottom()
    }
    /// Clamp to `[0,width) × [0,height)`; `None` when nothing remains.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<Rect> {
        let x0 = self.x.min(width);
        let y0 = self.y.min(height);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Binary mask over a `width × height` grid; doubles as a screen mask and a
/// texel mask over an atlas.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

/// Mask over texture-atlas texels.
pub type TexelMask = Mask;

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_rect(width: usize, height: usize, r: Rect) -> Self {
        Self::from_fn(width, height, |x, y| x >= r.x && x < r.right() && y >= r.y && y < r.bottom())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as unset.
    #[inline]
    pub fn get_i(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % w, i / w))
    }

    /// Minimal axis-aligned bounding rectangle of the set bits.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (x, y) in self.iter_set() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    fn assert_same(&self, o: &Mask) {
        assert_eq!(self.dims(), o.dims(), "mask dimension mismatch");
    }

    pub fn union_with(&mut self, o: &Mask) {
        self.assert_same(o);
        for (a, &b) in self.bits.iter_mut().zip(&o.bits) {
            *a |= b;
        }
    }

    pub fn intersect_with(&mut self, o: &Mask) {
        self.assert_same(o);
        for (a, &b) in self.bits.iter_mut().zip(&o.bits) {
            *a &= b;
        }
    }

    pub fn subtract(&mut self, o: &Mask) {
        self.assert_same(o);
        for (a, &b) in self.bits.iter_mut().zip(&o.bits) {
            *a &= !b;
        }
    }

    pub fn union(&self, o: &Mask) -> Mask {
        let mut m = self.clone();
        m.union_with(o);
        m
    }

    pub fn intersection(&self, o: &Mask) -> Mask {
        let mut m = self.clone();
        m.intersect_with(o);
        m
    }

    pub fn difference(&self, o: &Mask) -> Mask {
        let mut m = self.clone();
        m.subtract(o);
        m
    }

    pub fn intersection_count(&self, o: &Mask) -> usize {
        self.assert_same(o);
        self.bits.iter().zip(&o.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn is_subset_of(&self, o: &Mask) -> bool {
        self.assert_same(o);
        self.bits.iter().zip(&o.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, o: &Mask) -> bool {
        self.intersection_count(o) == 0
    }

    /// Count of set bits inside `r` (r must lie inside the mask).
    pub fn count_in(&self, r: Rect) -> usize {
        (r.y..r.bottom()).map(|y| (r.x..r.right()).filter(|&x| self.get(x, y)).count()).sum()
    }

    /// 1-channel image, 255 where set.
    pub fn to_image(&self) -> Image {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Image::from_raw(self.width, self.height, 1, data).expect("mask dims")
    }

    /// A pixel is set when any channel is nonzero (alpha for RGBA images).
    pub fn from_image(img: &Image) -> Mask {
        let mut m = Mask::new(img.width(), img.height());
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.pixel(x, y);
                let on = match img.channels() {
                    4 => p[3] > 0,
                    _ => p.iter().any(|&v| v > 0),
                };
                m.set(x, y, on);
            }
        }
        m
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        self.to_image().save_png(path)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask, ImageError> {
        Ok(Mask::from_image(&Image::load_png(path)?))
    }
}

/// Summed-area table for O(1) rectangle counts over a mask.
pub struct MaskIntegral {
    width: usize,
    sums: Vec<u32>,
}

impl MaskIntegral {
    pub fn new(m: &Mask) -> Self {
        let (w, h) = m.dims();
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += m.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    pub fn count(&self, r: Rect) -> usize {
        let s = |x: usize, y: usize| self.sums[y * (self.width + 1) + x] as i64;
        (s(r.right(), r.bottom()) - s(r.x, r.bottom()) - s(r.right(), r.y) + s(r.x, r.y)) as usize
    }
}
