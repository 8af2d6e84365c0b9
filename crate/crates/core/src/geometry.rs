//! Axis-aligned boxes and the overlap measures used throughout the pipeline.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Fraction of this box covered by `region`.
    pub fn overlap_ratio(&self, region: &BBox) -> f64 {
        let area = self.area();
        if area <= 0.0 {
            return 0.0;
        }
        (self.intersection_area(region) / area).clamp(0.0, 1.0)
    }

    pub fn contains_point(&self, (px, py): (f64, f64)) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Tight box around a set of points; `None` for an empty set.
    pub fn enclosing(points: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        let mut it = points.into_iter();
        let (x0, y0) = it.next()?;
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (x0, y0, x0, y0);
        for (x, y) in it {
            xmin = xmin.min(x);
            ymin = ymin.min(y);
            xmax = xmax.max(x);
            ymax = ymax.max(y);
        }
        Some(Self::new(xmin, ymin, xmax - xmin, ymax - ymin))
    }

    /// Grows the box about its center, keeping its aspect where possible,
    /// until its area is at least `min_area`.
    pub fn grown_to_area(&self, min_area: f64) -> Self {
        if self.area() >= min_area {
            return *self;
        }
        let (cx, cy) = self.center();
        let (mut w, mut h) = (self.w.max(1e-9), self.h.max(1e-9));
        // degenerate boxes (a line or a point) get a square footprint
        if w < 1.0 || h < 1.0 {
            let side = min_area.sqrt();
            w = w.max(side);
            h = h.max(side);
        }
        if w * h < min_area {
            let s = (min_area / (w * h)).sqrt();
            w *= s;
            h *= s;
        }
        Self::from_center(cx, cy, w, h)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// Intersection over union. Boxes are expected to have positive size.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
