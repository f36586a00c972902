use crate::geom::BoundingBox;

/// Log-space size deltas are clamped to this before exponentiation.
const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

pub const RPN_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
pub const ROI_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// `(dx, dy, dw, dh)` moving `reference` onto `target`.
pub fn encode(reference: &BoundingBox, target: &BoundingBox, w: [f64; 4]) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let (tw, th) = (target.width(), target.height());
    let (tcx, tcy) = target.center();
    [
        w[0] * (tcx - rcx) / rw,
        w[1] * (tcy - rcy) / rh,
        w[2] * (tw / rw).ln(),
        w[3] * (th / rh).ln(),
    ]
}

/// Inverse of [`encode`]; the corners may describe an empty box.
pub fn decode(reference: &BoundingBox, d: [f64; 4], w: [f64; 4]) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let cx = rcx + d[0] / w[0] * rw;
    let cy = rcy + d[1] / w[1] * rh;
    let pw = rw * (d[2] / w[2]).min(MAX_LOG_SCALE).exp();
    let ph = rh * (d[3] / w[3]).min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * pw, cy - 0.5 * ph, cx + 0.5 * pw, cy + 0.5 * ph]
}

/// Clamps raw corners to the image and keeps boxes at least `min_size`
/// pixels on each side.
pub fn clip_corners(c: [f64; 4], height: usize, width: usize, min_size: f64) -> Option<BoundingBox> {
    if c.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (w, h) = (width as f64, height as f64);
    let b = BoundingBox {
        x1: c[0].clamp(0.0, w),
        y1: c[1].clamp(0.0, h),
        x2: c[2].clamp(0.0, w),
        y2: c[3].clamp(0.0, h),
    };
    (b.width() >= min_size && b.height() >= min_size).then_some(b)
}

/// Square anchors centred on each cell of an `fh x fw` grid, ordered
/// size-major then row-major, matching the `[A, H, W]` head layout.
pub fn anchors(sizes: &[f64], fh: usize, fw: usize, stride: f64) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity(sizes.len() * fh * fw);
    for &s in sizes {
        for y in 0..fh {
            for x in 0..fw {
                let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                out.push(BoundingBox {
                    x1: cx - 0.5 * s,
                    y1: cy - 0.5 * s,
                    x2: cx + 0.5 * s,
                    y2: cy + 0.5 * s,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_layout() {
        let a = anchors(&[16.0, 32.0], 2, 3, 16.0);
        assert_eq!(a.len(), 12);
        assert_eq!(a[0].to_array(), [0.0, 0.0, 16.0, 16.0]);
        // size 32, row 1, col 2
        assert_eq!(a[6 + 5].center(), (40.0, 24.0));
        assert_eq!(a[11].width(), 32.0);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            x in 0.0f64..100.0, y in 0.0f64..100.0, w in 2.0f64..50.0, h in 2.0f64..50.0,
            tx in 0.0f64..100.0, ty in 0.0f64..100.0, tw in 2.0f64..50.0, th in 2.0f64..50.0,
        ) {
            let r = BoundingBox::new(x, y, x + w, y + h).unwrap();
            let t = BoundingBox::new(tx, ty, tx + tw, ty + th).unwrap();
            for wts in [RPN_WEIGHTS, ROI_WEIGHTS] {
                let back = decode(&r, encode(&r, &t, wts), wts);
                for (a, b) in back.iter().zip(t.to_array()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clip_rejects_slivers() {
        assert!(clip_corners([-5.0, -5.0, 0.5, 10.0], 20, 20, 1.0).is_none());
        assert_eq!(
            clip_corners([-5.0, 2.0, 8.0, 30.0], 20, 20, 1.0).unwrap().to_array(),
            [0.0, 2.0, 8.0, 20.0]
        );
        assert!(clip_corners([f64::NAN, 0.0, 1.0, 1.0], 20, 20, 0.0).is_none());
    }
}
