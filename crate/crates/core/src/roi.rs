//! ROI-Align sampling geometry: where each pooled cell samples the feature map,
//! its bilinear weights, and the derivatives needed to backpropagate into boxes.

use crate::tensor::Tensor;

/// One bilinear sample on an `H × W` feature plane.
#[derive(Clone, Debug)]
pub struct RoiSample {
    pub box_index: usize,
    /// Flat `y * W + x` indices of the four neighbouring cells.
    pub idx: [usize; 4],
    pub weights: [f64; 4],
    pub dweights_dx: [f64; 4],
    pub dweights_dy: [f64; 4],
    /// d(feature x coordinate) / d(cx, cy, w, h).
    pub dx_dbox: [f64; 4],
    pub dy_dbox: [f64; 4],
}

/// The box after scaling its width and height by `beta` about its center.
pub fn scaled_region(b: [f64; 4], beta: f64) -> [f64; 4] {
    [b[0], b[1], b[2] * beta, b[3] * beta]
}

/// Corners `(x1, y1, x2, y2)` of the scaled region clipped to the unit square.
pub fn clipped_region(b: [f64; 4], beta: f64) -> [f64; 4] {
    let s = scaled_region(b, beta);
    [
        (s[0] - s[2] / 2.0).max(0.0),
        (s[1] - s[3] / 2.0).max(0.0),
        (s[0] + s[2] / 2.0).min(1.0),
        (s[1] + s[3] / 2.0).min(1.0),
    ]
}

/// Normalized coordinates of every pooled cell center, row-major over the `p × p` grid.
/// A region that clips to zero area collapses onto the (clamped) box center.
pub fn sample_points(b: [f64; 4], beta: f64, pool: usize) -> Vec<(f64, f64)> {
    let [x1, y1, x2, y2] = clipped_region(b, beta);
    let degenerate = x2 <= x1 || y2 <= y1;
    let mut pts = Vec::with_capacity(pool * pool);
    for gy in 0..pool {
        for gx in 0..pool {
            if degenerate {
                pts.push((b[0].clamp(0.0, 1.0), b[1].clamp(0.0, 1.0)));
            } else {
                let tx = (gx as f64 + 0.5) / pool as f64;
                let ty = (gy as f64 + 0.5) / pool as f64;
                pts.push((x1 * (1.0 - tx) + x2 * tx, y1 * (1.0 - ty) + y2 * ty));
            }
        }
    }
    pts
}

/// Axis helper: feature coordinate, low/high cell, fraction, and d(coord)/d(normalized).
fn axis(norm: f64, size: usize) -> (usize, usize, f64, f64) {
    let raw = norm * size as f64 - 0.5;
    let max = (size - 1) as f64;
    let (coord, slope) = if raw <= 0.0 {
        (0.0, 0.0)
    } else if raw >= max {
        (max, 0.0)
    } else {
        (raw, size as f64)
    };
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, coord - lo as f64, slope)
}

pub(crate) fn roi_samples(boxes: &Tensor, beta: f64, pool: usize, h: usize, w: usize) -> Vec<RoiSample> {
    let n = boxes.rows();
    let mut out = Vec::with_capacity(n * pool * pool);
    for i in 0..n {
        let b = [boxes.get2(i, 0), boxes.get2(i, 1), boxes.get2(i, 2), boxes.get2(i, 3)];
        let s = scaled_region(b, beta);
        let (rx1, ry1) = (s[0] - s[2] / 2.0, s[1] - s[3] / 2.0);
        let (rx2, ry2) = (s[0] + s[2] / 2.0, s[1] + s[3] / 2.0);
        let [x1, y1, x2, y2] = clipped_region(b, beta);
        let degenerate = x2 <= x1 || y2 <= y1;
        // d(x1)/d(cx, w) and d(x2)/d(cx, w) through the clip
        let dx1 = if rx1 > 0.0 { [1.0, -beta / 2.0] } else { [0.0, 0.0] };
        let dx2 = if rx2 < 1.0 { [1.0, beta / 2.0] } else { [0.0, 0.0] };
        let dy1 = if ry1 > 0.0 { [1.0, -beta / 2.0] } else { [0.0, 0.0] };
        let dy2 = if ry2 < 1.0 { [1.0, beta / 2.0] } else { [0.0, 0.0] };
        for (k, (xn, yn)) in sample_points(b, beta, pool).into_iter().enumerate() {
            let (gy, gx) = (k / pool, k % pool);
            let (x0, xh, lx, sx) = axis(xn, w);
            let (y0, yh, ly, sy) = axis(yn, h);
            let (dxn, dyn_) = if degenerate {
                let cx = if (0.0..=1.0).contains(&b[0]) { 1.0 } else { 0.0 };
                let cy = if (0.0..=1.0).contains(&b[1]) { 1.0 } else { 0.0 };
                ([cx, 0.0, 0.0, 0.0], [0.0, cy, 0.0, 0.0])
            } else {
                let tx = (gx as f64 + 0.5) / pool as f64;
                let ty = (gy as f64 + 0.5) / pool as f64;
                (
                    [
                        dx1[0] * (1.0 - tx) + dx2[0] * tx,
                        0.0,
                        dx1[1] * (1.0 - tx) + dx2[1] * tx,
                        0.0,
                    ],
                    [
                        0.0,
                        dy1[0] * (1.0 - ty) + dy2[0] * ty,
                        0.0,
                        dy1[1] * (1.0 - ty) + dy2[1] * ty,
                    ],
                )
            };
            out.push(RoiSample {
                box_index: i,
                idx: [y0 * w + x0, y0 * w + xh, yh * w + x0, yh * w + xh],
                weights: [
                    (1.0 - ly) * (1.0 - lx),
                    (1.0 - ly) * lx,
                    ly * (1.0 - lx),
                    ly * lx,
                ],
                dweights_dx: [-(1.0 - ly), 1.0 - ly, -ly, ly],
                dweights_dy: [-(1.0 - lx), -lx, 1.0 - lx, lx],
                dx_dbox: dxn.map(|v| v * sx),
                dy_dbox: dyn_.map(|v| v * sy),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_doubles_extent_about_center() {
        assert_eq!(scaled_region([0.5, 0.5, 0.25, 0.25], 2.0), [0.5, 0.5, 0.5, 0.5]);
        assert_eq!(clipped_region([0.5, 0.5, 0.25, 0.25], 2.0), [0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn clipping_to_unit_square() {
        let r = clipped_region([0.1, 0.9, 0.4, 0.4], 1.0);
        assert!((r[0] - 0.0).abs() < 1e-15 && (r[3] - 1.0).abs() < 1e-15);
        assert!((r[2] - 0.3).abs() < 1e-12 && (r[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn degenerate_region_collapses_to_center() {
        let pts = sample_points([0.5, 0.5, 0.0, 0.3], 1.5, 2);
        assert!(pts.iter().all(|&p| p == (0.5, 0.5)));
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let boxes = Tensor::from_rows(&[vec![0.3, 0.6, 0.2, 0.5], vec![0.95, 0.02, 0.3, 0.1]]).unwrap();
        for s in roi_samples(&boxes, 1.5, 3, 5, 7) {
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
