//! Box and run-length-encoded mask algebra.
//!
//! Boxes use half-open pixel-edge coordinates: a box `(x0, y0, x1, y1)`
//! covers `[x0, x1) × [y0, y1)`, so the box of a single pixel at column `c`,
//! row `r` is `(c, r, c + 1, r + 1)` and has area 1.
//!
//! Masks are stored COCO style: column-major run lengths, the first run
//! counting background pixels (possibly zero).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box in corner form. Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Builds a box from center `(cx, cy)` and size `(w, h)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    /// Closed containment of a point: points on an edge count as inside.
    pub fn contains_point(&self, p: &Point2D) -> bool {
        self.x0 <= p.x && p.x <= self.x1 && self.y0 <= p.y && p.y <= self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x0.clamp(0.0, width);
        let y0 = self.y0.clamp(0.0, height);
        BBox::new(
            x0,
            y0,
            self.x1.clamp(x0, width),
            self.y1.clamp(y0, height),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Zero-area pairs yield 0, never NaN.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// True iff every corner of `inner` lies inside or on `outer`.
pub fn box_contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x0 <= inner.x0 && outer.y0 <= inner.y0 && inner.x1 <= outer.x1 && inner.y1 <= outer.y1
}

/// Coordinate-wise weighted average `(w_p·p + w_s·s) / (w_p + w_s)`.
pub fn weighted_box_merge(p: &BBox, s: &BBox, w_p: f64, w_s: f64) -> BBox {
    let total = w_p + w_s;
    debug_assert!(total > 0.0);
    let t = w_s / total;
    let mix = |a: f64, b: f64| a + t * (b - a);
    BBox::new(mix(p.x0, s.x0), mix(p.y0, s.y0), mix(p.x1, s.x1), mix(p.y1, s.y1))
}

/// Binary mask as column-major run lengths starting with a background run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskRle {
    #[serde(rename = "h")]
    pub height: u32,
    #[serde(rename = "w")]
    pub width: u32,
    pub runs: Vec<u32>,
}

impl MaskRle {
    pub fn empty(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            runs: vec![height * width],
        }
    }

    /// Encodes a column-major grid: pixel `(row, col)` lives at `col * height + row`.
    pub fn from_column_major(height: u32, width: u32, pixels: &[bool]) -> Self {
        assert_eq!(pixels.len(), (height * width) as usize, "grid size mismatch");
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &p in pixels {
            if p != current {
                runs.push(count);
                count = 0;
                current = p;
            }
            count += 1;
        }
        runs.push(count);
        Self {
            height,
            width,
            runs,
        }
    }

    pub fn from_fn(height: u32, width: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut pixels = Vec::with_capacity((height * width) as usize);
        for col in 0..width {
            for row in 0..height {
                pixels.push(f(row, col));
            }
        }
        Self::from_column_major(height, width, &pixels)
    }

    pub fn to_column_major(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.pixel_count());
        let mut value = false;
        for &r in &self.runs {
            out.extend(std::iter::repeat(value).take(r as usize));
            value = !value;
        }
        out
    }

    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    /// Sum of runs equals `height * width`.
    pub fn is_consistent(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().map(|&r| r as u64).sum::<u64>() == self.pixel_count() as u64
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        let target = col as u64 * self.height as u64 + row as u64;
        let mut start = 0u64;
        for (i, &r) in self.runs.iter().enumerate() {
            let end = start + r as u64;
            if target < end {
                return i % 2 == 1;
            }
            start = end;
        }
        false
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Iterates `(start, len)` of foreground runs in flat column-major index space.
    fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut start = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let s = start;
            start += r as u64;
            (i % 2 == 1 && r > 0).then_some((s, r as u64))
        })
    }

    fn check_same_shape(&self, other: &MaskRle) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &MaskRle) -> Result<u64> {
        self.check_same_shape(other)?;
        let a: Vec<_> = self.foreground_runs().collect();
        let b: Vec<_> = other.foreground_runs().collect();
        let (mut i, mut j, mut inter) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let (sa, la) = a[i];
            let (sb, lb) = b[j];
            let (ea, eb) = (sa + la, sb + lb);
            let lo = sa.max(sb);
            let hi = ea.min(eb);
            if hi > lo {
                inter += hi - lo;
            }
            if ea <= eb {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(inter)
    }

    /// Pixel-wise union of two same-shape masks.
    pub fn union(&self, other: &MaskRle) -> Result<MaskRle> {
        self.check_same_shape(other)?;
        let pixels: Vec<bool> = self
            .to_column_major()
            .into_iter()
            .zip(other.to_column_major())
            .map(|(a, b)| a || b)
            .collect();
        Ok(MaskRle::from_column_major(self.height, self.width, &pixels))
    }
}

/// Tightest half-open box covering every foreground pixel.
pub fn min_bounding_rect(m: &MaskRle) -> Result<BBox> {
    let h = m.height as u64;
    let (mut c0, mut c1, mut r0, mut r1) = (u64::MAX, 0u64, u64::MAX, 0u64);
    let mut any = false;
    for (start, len) in m.foreground_runs() {
        any = true;
        let end = start + len - 1;
        let (sc, sr) = (start / h, start % h);
        let (ec, er) = (end / h, end % h);
        c0 = c0.min(sc);
        c1 = c1.max(ec);
        if sc != ec {
            // the run wraps a column boundary, so it touches both top and bottom rows
            r0 = 0;
            r1 = h - 1;
        } else {
            r0 = r0.min(sr);
            r1 = r1.max(er);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
}

/// `|A∩B| / |A∪B|`, defined 0 when both masks are empty.
pub fn mask_iou(a: &MaskRle, b: &MaskRle) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// `2|A∩B| / (|A| + |B|)`, defined 0 when both masks are empty.
pub fn dice_coeff(a: &MaskRle, b: &MaskRle) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let total = a.area() + b.area();
    Ok(if total == 0 {
        0.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}
