use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box as (center-x, center-y, width, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxCxcywh {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxCxcywh::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::contract(format!("box needs positive finite size, got {self:?}")));
        }
        Ok(())
    }

    /// Whether every coordinate lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn l1_distance(&self, other: &BoxCxcywh) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

fn intersection_union(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<(f64, f64)> {
    a.validate()?;
    b.validate()?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    Ok((inter, a.area() + b.area() - inter))
}

pub fn box_iou(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<f64> {
    let (inter, union) = intersection_union(a, b)?;
    Ok(inter / union)
}

/// IoU minus the fraction of the tightest enclosing box not covered by
/// the union.
pub fn generalized_iou(a: &BoxCxcywh, b: &BoxCxcywh) -> Result<f64> {
    let (inter, union) = intersection_union(a, b)?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (enclosing - union) / enclosing)
}
