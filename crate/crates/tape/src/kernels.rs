//! Raw loops behind the heavier graph ops.

use crate::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[C,H,W]` into `[C*k*k, Ho*Wo]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[C*k*k, Ho*Wo]` back into `[C,H,W]`.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// A region to pool, in input-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi<T> {
    pub batch: usize,
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Bilinear taps at `(y, x)` in an `h×w` plane, with the usual RoIAlign
/// border handling: points more than one cell outside contribute nothing,
/// points in the border band are clamped to the edge.
fn bilinear_taps<T: Real>(y: T, x: T, h: usize, w: usize) -> Option<[(usize, T); 4]> {
    let one = T::one();
    if y < -one || y > T::from_usize(h).unwrap() || x < -one || x > T::from_usize(w).unwrap() {
        return None;
    }
    let y = y.max(T::zero());
    let x = x.max(T::zero());
    let mut y_low = y.floor().to_usize().unwrap();
    let mut x_low = x.floor().to_usize().unwrap();
    let (y_high, yy) = if y_low >= h - 1 {
        y_low = h - 1;
        (h - 1, T::from_usize(y_low).unwrap())
    } else {
        (y_low + 1, y)
    };
    let (x_high, xx) = if x_low >= w - 1 {
        x_low = w - 1;
        (w - 1, T::from_usize(x_low).unwrap())
    } else {
        (x_low + 1, x)
    };
    let ly = yy - T::from_usize(y_low).unwrap();
    let lx = xx - T::from_usize(x_low).unwrap();
    let hy = one - ly;
    let hx = one - lx;
    Some([
        (y_low * w + x_low, hy * hx),
        (y_low * w + x_high, hy * lx),
        (y_high * w + x_low, ly * hx),
        (y_high * w + x_high, ly * lx),
    ])
}

/// Per output cell, `sampling² * 4` (plane index, weight) taps whose
/// weighted sum is the pooled value. Weights already include the 1/S² mean.
pub(crate) fn roi_align_taps<T: Real>(
    roi: &Roi<T>,
    spatial_scale: T,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    sampling: usize,
) -> Vec<(usize, T)> {
    let half = T::lit(0.5);
    let start_x = roi.x1 * spatial_scale - half;
    let start_y = roi.y1 * spatial_scale - half;
    let bin_w = (roi.x2 - roi.x1) * spatial_scale / T::from_usize(out_w).unwrap();
    let bin_h = (roi.y2 - roi.y1) * spatial_scale / T::from_usize(out_h).unwrap();
    let s = T::from_usize(sampling).unwrap();
    let norm = T::one() / (s * s);
    let per_cell = sampling * sampling * 4;
    let mut taps = Vec::with_capacity(out_h * out_w * per_cell);
    for ph in 0..out_h {
        for pw in 0..out_w {
            for iy in 0..sampling {
                let y = start_y
                    + T::from_usize(ph).unwrap() * bin_h
                    + (T::from_usize(iy).unwrap() + half) * bin_h / s;
                for ix in 0..sampling {
                    let x = start_x
                        + T::from_usize(pw).unwrap() * bin_w
                        + (T::from_usize(ix).unwrap() + half) * bin_w / s;
                    match bilinear_taps(y, x, h, w) {
                        Some(t) => taps.extend(t.iter().map(|&(i, wt)| (i, wt * norm))),
                        None => taps.extend([(0, T::zero()); 4]),
                    }
                }
            }
        }
    }
    taps
}
