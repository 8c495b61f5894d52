//! Normalized boxes and overlap measures.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsgaError};

/// Axis-aligned box in center format `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(SsgaError::DegenerateBox(format!(
                "width {} and height {} must be positive",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Intersection-over-union in `[0, 1]`.
pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU in `[-1, 1]`.
pub fn generalized_iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(giou_with_grad(&a.to_array(), &b.to_array()).0)
}

/// GIoU of `pred` against a fixed `gt`, with its gradient w.r.t. `pred`'s `(cx, cy, w, h)`.
pub(crate) fn giou_with_grad(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let [cx, cy, w, h] = *pred;
    let (x1, y1, x2, y2) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    let (gx1, gy1) = (gt[0] - gt[2] / 2.0, gt[1] - gt[3] / 2.0);
    let (gx2, gy2) = (gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0);

    let area_p = w * h;
    let area_g = gt[2] * gt[3];
    let (ix1, ix2) = (x1.max(gx1), x2.min(gx2));
    let (iy1, iy2) = (y1.max(gy1), y2.min(gy2));
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let (ex1, ex2) = (x1.min(gx1), x2.max(gx2));
    let (ey1, ey2) = (y1.min(gy1), y2.max(gy2));
    let (ew, eh) = (ex2 - ex1, ey2 - ey1);
    let enclose = ew * eh;
    let giou = inter / union - 1.0 + union / enclose;

    // reverse pass
    let g_enclose = -union / (enclose * enclose);
    let g_union = 1.0 / enclose - inter / (union * union);
    let g_inter = 1.0 / union - g_union;
    let g_area_p = g_union;

    let (mut gx1_, mut gx2_, mut gy1_, mut gy2_) = (0.0, 0.0, 0.0, 0.0);
    let g_iw = g_inter * ih;
    let g_ih = g_inter * iw;
    if ix2 - ix1 > 0.0 {
        if x2 <= gx2 {
            gx2_ += g_iw;
        }
        if x1 >= gx1 {
            gx1_ -= g_iw;
        }
    }
    if iy2 - iy1 > 0.0 {
        if y2 <= gy2 {
            gy2_ += g_ih;
        }
        if y1 >= gy1 {
            gy1_ -= g_ih;
        }
    }
    let g_ew = g_enclose * eh;
    let g_eh = g_enclose * ew;
    if x2 >= gx2 {
        gx2_ += g_ew;
    }
    if x1 <= gx1 {
        gx1_ -= g_ew;
    }
    if y2 >= gy2 {
        gy2_ += g_eh;
    }
    if y1 <= gy1 {
        gy1_ -= g_eh;
    }
    let g_cx = gx1_ + gx2_;
    let g_cy = gy1_ + gy2_;
    let g_w = g_area_p * h + (gx2_ - gx1_) / 2.0;
    let g_h = g_area_p * w + (gy2_ - gy1_) / 2.0;
    (giou, [g_cx, g_cy, g_w, g_h])
}
