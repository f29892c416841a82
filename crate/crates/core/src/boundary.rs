//! Boundary bands, Boundary IoU (bPQ) and boundary-weighted IoU (wPQ).
//!
//! Distances are exact squared Euclidean distances between pixel centres. A
//! pixel is in the band of radius `r` when its distance to the nearest pixel on
//! the other side of the contour is below `r + 1/2`; with integer squared
//! distances that is `d² <= r(r + 1)`. The image border counts as mask
//! exterior.

use serde::{Deserialize, Serialize};

use crate::segmap::LabelMap;
use crate::{Error, Result};

/// Binary mask stored as its tight bounding box inside a fixed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    frame_width: usize,
    frame_height: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(frame_width: usize, frame_height: usize) -> Self {
        Self {
            frame_width,
            frame_height,
            x0: 0,
            y0: 0,
            w: 0,
            h: 0,
            bits: Vec::new(),
        }
    }

    /// Full-frame, row-major bits.
    pub fn from_bits(frame_width: usize, frame_height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != frame_width * frame_height {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} bits, frame is {frame_width}x{frame_height}",
                bits.len()
            )));
        }
        Ok(Self::from_region(
            frame_width,
            frame_height,
            (0, 0, frame_width, frame_height),
            bits.to_vec(),
        ))
    }

    pub fn from_fn(
        frame_width: usize,
        frame_height: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let bits = (0..frame_width * frame_height)
            .map(|i| f(i % frame_width, i / frame_width))
            .collect();
        Self::from_region(
            frame_width,
            frame_height,
            (0, 0, frame_width, frame_height),
            bits,
        )
    }

    /// Pixels of one segment of a label map.
    pub fn segment(map: &LabelMap, segment_id: u32) -> Self {
        let w = map.width();
        let ids = map.instance_of();
        Self::from_fn(w, map.height(), |x, y| ids[y * w + x] == segment_id)
    }

    /// Builds from a rectangular region `(x0, y0, w, h)` and shrinks to the
    /// tight bounding box.
    fn from_region(
        frame_width: usize,
        frame_height: usize,
        (rx, ry, rw, rh): (usize, usize, usize, usize),
        bits: Vec<bool>,
    ) -> Self {
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % rw, i / rw);
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmin == usize::MAX {
            return Self::empty(frame_width, frame_height);
        }
        let (w, h) = (xmax - xmin + 1, ymax - ymin + 1);
        let mut tight = Vec::with_capacity(w * h);
        for y in ymin..=ymax {
            tight.extend_from_slice(&bits[y * rw + xmin..=y * rw + xmax]);
        }
        debug_assert!(rh >= h);
        Self {
            frame_width,
            frame_height,
            x0: rx + xmin,
            y0: ry + ymin,
            w,
            h,
            bits: tight,
        }
    }

    pub fn frame(&self) -> (usize, usize) {
        (self.frame_width, self.frame_height)
    }

    /// Tight bounding box `(x0, y0, w, h)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.w, self.h)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.w
            && y < self.y0 + self.h
            && self.bits[(y - self.y0) * self.w + (x - self.x0)]
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0
    }

    /// Pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (self.x0 + i % self.w, self.y0 + i / self.w))
    }

    pub fn to_frame_bits(&self) -> Vec<bool> {
        let mut out = vec![false; self.frame_width * self.frame_height];
        for (x, y) in self.pixels() {
            out[y * self.frame_width + x] = true;
        }
        out
    }

    fn same_frame(&self, other: &Mask) -> Result<()> {
        if self.frame() != other.frame() {
            return Err(Error::DimensionMismatch(format!(
                "mask frames {:?} and {:?}",
                self.frame(),
                other.frame()
            )));
        }
        Ok(())
    }

    fn intersection_count(&self, other: &Mask) -> u64 {
        self.pixels().filter(|&(x, y)| other.contains(x, y)).count() as u64
    }
}

/// Masks for every segment of a label map in one pass, keyed by segment id.
pub fn segment_masks(map: &LabelMap) -> std::collections::BTreeMap<u32, Mask> {
    use std::collections::BTreeMap;
    let (w, h) = (map.width(), map.height());
    let mut boxes: BTreeMap<u32, (usize, usize, usize, usize)> = BTreeMap::new();
    for (i, &s) in map.instance_of().iter().enumerate() {
        if s == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let b = boxes.entry(s).or_insert((x, y, x, y));
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    boxes
        .into_iter()
        .map(|(s, (x0, y0, x1, y1))| {
            let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
            let mut bits = Vec::with_capacity(bw * bh);
            for y in y0..=y1 {
                bits.extend(
                    map.instance_of()[y * w + x0..=y * w + x1]
                        .iter()
                        .map(|&v| v == s),
                );
            }
            (s, Mask::from_region(w, h, (x0, y0, bw, bh), bits))
        })
        .collect()
}

/// Squared Euclidean distance from every pixel to the nearest `feature` pixel
/// (Meijster's two-pass algorithm). `u64::MAX` everywhere if there is no
/// feature pixel.
pub fn squared_distance_transform(width: usize, height: usize, feature: &[bool]) -> Vec<u64> {
    assert_eq!(feature.len(), width * height);
    if !feature.iter().any(|&f| f) {
        return vec![u64::MAX; feature.len()];
    }
    let inf = (width + height) as i64;
    let mut g = vec![0i64; width * height];
    for x in 0..width {
        g[x] = if feature[x] { 0 } else { inf };
        for y in 1..height {
            let i = y * width + x;
            g[i] = if feature[i] { 0 } else { g[i - width] + 1 };
        }
        for y in (0..height.saturating_sub(1)).rev() {
            let i = y * width + x;
            if g[i + width] < g[i] {
                g[i] = g[i + width] + 1;
            }
        }
    }

    let mut out = vec![0u64; width * height];
    let mut s = vec![0i64; width];
    let mut t = vec![0i64; width];
    for y in 0..height {
        let row = &g[y * width..(y + 1) * width];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            let gi = row[i as usize];
            let gu = row[u as usize];
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q: i64 = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..width as i64 {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w < width as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w;
                }
            }
        }
        for u in (0..width as i64).rev() {
            out[y * width + u as usize] = f(u, s[q as usize]) as u64;
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

fn within_band(d2: u64, radius: u32) -> bool {
    let r = radius as u64;
    d2 <= r * (r + 1)
}

/// `max(1, round(d * diagonal))`.
pub fn band_radius(d: f64, width: usize, height: usize) -> Result<u32> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "contour fraction d = {d} outside (0, 1]"
        )));
    }
    let diagonal = ((width * width + height * height) as f64).sqrt();
    Ok(((d * diagonal).round() as u32).max(1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryBand {
    pub band: Mask,
    pub radius_px: u32,
}

/// Inner band: mask pixels close to the mask exterior.
pub fn boundary_band(mask: &Mask, radius_px: u32) -> BoundaryBand {
    let (fw, fh) = mask.frame();
    if mask.is_empty() {
        return BoundaryBand {
            band: Mask::empty(fw, fh),
            radius_px,
        };
    }
    // one pixel of exterior padding stands in for both real exterior and the
    // image border
    let (x0, y0, w, h) = mask.bbox();
    let (pw, ph) = (w + 2, h + 2);
    let mut exterior = vec![true; pw * ph];
    for (x, y) in mask.pixels() {
        exterior[(y - y0 + 1) * pw + (x - x0 + 1)] = false;
    }
    let dist = squared_distance_transform(pw, ph, &exterior);
    let mut bits = vec![false; w * h];
    for (x, y) in mask.pixels() {
        let (lx, ly) = (x - x0, y - y0);
        bits[ly * w + lx] = within_band(dist[(ly + 1) * pw + lx + 1], radius_px);
    }
    BoundaryBand {
        band: Mask::from_region(fw, fh, (x0, y0, w, h), bits),
        radius_px,
    }
}

/// Outer band: in-frame pixels outside the mask but close to it.
pub fn outer_band(mask: &Mask, radius_px: u32) -> Mask {
    let (fw, fh) = mask.frame();
    if mask.is_empty() {
        return Mask::empty(fw, fh);
    }
    let (x0, y0, w, h) = mask.bbox();
    let reach = radius_px as usize + 1;
    let rx0 = x0.saturating_sub(reach);
    let ry0 = y0.saturating_sub(reach);
    let rx1 = (x0 + w + reach).min(fw);
    let ry1 = (y0 + h + reach).min(fh);
    let (rw, rh) = (rx1 - rx0, ry1 - ry0);
    let mut inside = vec![false; rw * rh];
    for (x, y) in mask.pixels() {
        inside[(y - ry0) * rw + (x - rx0)] = true;
    }
    let dist = squared_distance_transform(rw, rh, &inside);
    let bits = inside
        .iter()
        .zip(&dist)
        .map(|(&m, &d2)| !m && within_band(d2, radius_px))
        .collect();
    Mask::from_region(fw, fh, (rx0, ry0, rw, rh), bits)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Boundary IoU alone.
    #[default]
    Boundary,
    /// `min(IoU, Boundary IoU)`.
    Min,
}

/// `|band(G) ∩ band(P)| / |band(G) ∪ band(P)|` over inner bands.
pub fn boundary_iou(gt: &Mask, pred: &Mask, radius_px: u32) -> Result<f64> {
    gt.same_frame(pred)?;
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let bg = boundary_band(gt, radius_px).band;
    let bp = boundary_band(pred, radius_px).band;
    let inter = bg.intersection_count(&bp);
    let union = bg.area() + bp.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Plain mask IoU.
pub fn mask_iou(gt: &Mask, pred: &Mask) -> Result<f64> {
    gt.same_frame(pred)?;
    let inter = gt.intersection_count(pred);
    let union = gt.area() + pred.area() - inter;
    if union == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-TP quality for bPQ under the chosen mode.
pub fn boundary_quality(
    gt: &Mask,
    pred: &Mask,
    radius_px: u32,
    mode: BoundaryMode,
    iou: f64,
) -> Result<f64> {
    let b = boundary_iou(gt, pred, radius_px)?;
    Ok(match mode {
        BoundaryMode::Boundary => b,
        BoundaryMode::Min => b.min(iou),
    })
}

/// Two-level weights: `factor` on the gt segment's inner and outer bands, 1
/// elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub factor: f64,
    pub radius_px: u32,
    /// Pixels carrying weight `factor`.
    pub band: Mask,
}

impl WeightMap {
    pub fn weight(&self, x: usize, y: usize) -> f64 {
        if self.band.contains(x, y) {
            self.factor
        } else {
            1.0
        }
    }
}

pub fn weight_map(gt: &Mask, factor: f64, radius_px: u32) -> Result<WeightMap> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "boundary factor a = {factor} must be >= 1"
        )));
    }
    let (fw, fh) = gt.frame();
    let inner = boundary_band(gt, radius_px).band;
    let outer = outer_band(gt, radius_px);
    let band = if inner.is_empty() {
        outer
    } else {
        let (ix, iy, iw, ih) = inner.bbox();
        let (ox, oy, ow, oh) = if outer.is_empty() {
            inner.bbox()
        } else {
            outer.bbox()
        };
        let x0 = ix.min(ox);
        let y0 = iy.min(oy);
        let x1 = (ix + iw).max(ox + ow);
        let y1 = (iy + ih).max(oy + oh);
        let (w, h) = (x1 - x0, y1 - y0);
        let bits = (0..w * h)
            .map(|i| {
                let (x, y) = (x0 + i % w, y0 + i / w);
                inner.contains(x, y) || outer.contains(x, y)
            })
            .collect();
        Mask::from_region(fw, fh, (x0, y0, w, h), bits)
    };
    Ok(WeightMap {
        factor,
        radius_px,
        band,
    })
}

/// `Σ_{G∩P} w / Σ_{G∪P} w`.
pub fn weighted_iou(gt: &Mask, pred: &Mask, weights: &WeightMap) -> Result<f64> {
    gt.same_frame(pred)?;
    gt.same_frame(&weights.band)?;
    // weights are two-level, so both sums are exact as (band count, rest count)
    let mut inter = (0u64, 0u64);
    let mut union = (0u64, 0u64);
    let tally = |acc: &mut (u64, u64), x, y| {
        if weights.band.contains(x, y) {
            acc.0 += 1;
        } else {
            acc.1 += 1;
        }
    };
    for (x, y) in gt.pixels() {
        if pred.contains(x, y) {
            tally(&mut inter, x, y);
        }
        tally(&mut union, x, y);
    }
    for (x, y) in pred.pixels() {
        if !gt.contains(x, y) {
            tally(&mut union, x, y);
        }
    }
    if union == (0, 0) {
        return Err(Error::EmptyMask);
    }
    let a = weights.factor;
    Ok((inter.0 as f64 * a + inter.1 as f64) / (union.0 as f64 * a + union.1 as f64))
}
