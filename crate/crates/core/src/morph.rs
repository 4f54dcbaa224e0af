//! Binary morphology, connected components and diffusion fill.

use crate::image::{Image, Mask};

/// How erosion treats samples that fall outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Outside counts as set; erosion never eats into the grid edge.
    Set,
    /// Outside counts as unset.
    Clear,
}

fn square_offsets(r: i64) -> Vec<(i64, i64)> {
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            v.push((dx, dy));
        }
    }
    v
}

/// Offsets of a Euclidean disk of radius `r` (distance ≤ r).
pub fn disk_offsets(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

pub fn dilate(m: &Mask, offsets: &[(i64, i64)]) -> Mask {
    let (w, h) = m.dims();
    let mut out = Mask::new(w, h);
    for (x, y) in m.iter_set() {
        for &(dx, dy) in offsets {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out.set(nx as usize, ny as usize, true);
            }
        }
    }
    out
}

pub fn erode(m: &Mask, offsets: &[(i64, i64)], border: Border) -> Mask {
    let (w, h) = m.dims();
    let mut out = Mask::new(w, h);
    for (x, y) in m.iter_set() {
        let keep = offsets.iter().all(|&(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                border == Border::Set
            } else {
                m.get(nx as usize, ny as usize)
            }
        });
        if keep {
            out.set(x, y, true);
        }
    }
    out
}

/// Closing with a 3×3 square, one iteration: dilate then erode.
pub fn close3x3(m: &Mask) -> Mask {
    let k = square_offsets(1);
    erode(&dilate(m, &k), &k, Border::Set)
}

/// Erosion by a Euclidean disk; radius 0 is the identity.
pub fn erode_disk(m: &Mask, radius: usize, border: Border) -> Mask {
    if radius == 0 {
        return m.clone();
    }
    erode(m, &disk_offsets(radius), border)
}

/// 8-connected components, ordered by their first pixel in row-major order.
pub fn components8(m: &Mask) -> Vec<Mask> {
    let (w, h) = m.dims();
    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !m.get_index(start) || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Mask::new(w, h);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.set_index(i, true);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if m.get_i(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

const SMOOTHING_PASSES: usize = 8;

/// Fill the pixels of `holes` from their surroundings.
///
/// Rings of hole pixels adjacent to known pixels are assigned the mean of
/// their known 8-neighbours, peeling inward until the hole is closed, then a
/// few Jacobi passes smooth the interior with the known pixels held fixed.
/// When there is nothing known to grow from, holes take the mean of the whole
/// input. Pixels outside `holes` are never modified.
pub fn diffusion_fill(img: &Image, holes: &Mask) -> Image {
    assert_eq!(img.dims(), holes.dims(), "fill mask dims");
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut out = img.clone();
    if holes.is_empty() {
        return out;
    }
    let mut known: Vec<bool> = holes.bits().iter().map(|&b| !b).collect();
    if !known.iter().any(|&k| k) {
        let n = (w * h) as u64;
        let mut sum = vec![0u64; ch];
        for px in img.data().chunks_exact(ch) {
            for c in 0..ch {
                sum[c] += px[c] as u64;
            }
        }
        let mean: Vec<u8> = sum.iter().map(|s| ((s + n / 2) / n) as u8).collect();
        for px in out.data_mut().chunks_exact_mut(ch) {
            px.copy_from_slice(&mean);
        }
        return out;
    }

    let neighbours = |x: usize, y: usize| {
        let mut v = [(0usize, 0usize); 8];
        let mut n = 0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    v[n] = (nx as usize, ny as usize);
                    n += 1;
                }
            }
        }
        (v, n)
    };

    let mut remaining: Vec<usize> = (0..w * h).filter(|&i| holes.get_index(i)).collect();
    while !remaining.is_empty() {
        let mut ring = Vec::new();
        let mut rest = Vec::new();
        for &i in &remaining {
            let (x, y) = (i % w, i / w);
            let (nb, n) = neighbours(x, y);
            let mut sum = [0u32; 4];
            let mut cnt = 0u32;
            for &(nx, ny) in &nb[..n] {
                if known[ny * w + nx] {
                    let p = out.pixel(nx, ny);
                    for c in 0..ch {
                        sum[c] += p[c] as u32;
                    }
                    cnt += 1;
                }
            }
            if cnt > 0 {
                let mut px = [0u8; 4];
                for c in 0..ch {
                    px[c] = ((sum[c] + cnt / 2) / cnt) as u8;
                }
                ring.push((i, px));
            } else {
                rest.push(i);
            }
        }
        for (i, px) in ring {
            let (x, y) = (i % w, i / w);
            out.pixel_mut(x, y).copy_from_slice(&px[..ch]);
            known[i] = true;
        }
        remaining = rest;
    }

    let hole_idx: Vec<usize> = (0..w * h).filter(|&i| holes.get_index(i)).collect();
    for _ in 0..SMOOTHING_PASSES {
        let prev = out.clone();
        for &i in &hole_idx {
            let (x, y) = (i % w, i / w);
            let (nb, n) = neighbours(x, y);
            let mut sum = [0u32; 4];
            for &(nx, ny) in &nb[..n] {
                let p = prev.pixel(nx, ny);
                for c in 0..ch {
                    sum[c] += p[c] as u32;
                }
            }
            let n = n as u32;
            let px = out.pixel_mut(x, y);
            for c in 0..ch {
                px[c] = ((sum[c] + n / 2) / n) as u8;
            }
        }
    }
    out
}
