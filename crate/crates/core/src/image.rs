//! Planar RGB image with values in `[0, 1]`.

use std::path::Path;

use crate::{Error, Result};

/// `(3, H, W)` channel-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            *mc = self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n;
        }
        m
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Self {
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / new_h as f32;
        let sx = self.width as f32 / new_w as f32;
        let mut out = Vec::with_capacity(3 * new_h * new_w);
        for c in 0..3 {
            let p = self.plane(c);
            for y in 0..new_h {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ly = fy - y0 as f32;
                for x in 0..new_w {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let lx = fx - x0 as f32;
                    let top = p[y0 * self.width + x0] * (1.0 - lx) + p[y0 * self.width + x1] * lx;
                    let bot = p[y1 * self.width + x0] * (1.0 - lx) + p[y1 * self.width + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        Self {
            height: new_h,
            width: new_w,
            data: out,
        }
    }

    /// Separable Gaussian blur with standard deviation `sigma` pixels and
    /// edge replication. `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f32) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = self.clone();
        for c in 0..3 {
            let src = self.plane(c);
            let dst = tmp.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let xx = (x + k as isize - radius).clamp(0, w - 1);
                        acc += kv * src[(y * w + xx) as usize];
                    }
                    dst[(y * w + x) as usize] = acc;
                }
            }
        }
        let mut out = tmp.clone();
        for c in 0..3 {
            let src = tmp.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let yy = (y + k as isize - radius).clamp(0, h - 1);
                        acc += kv * src[(yy * w + x) as usize];
                    }
                    dst[(y * w + x) as usize] = acc;
                }
            }
        }
        out
    }

    /// 8-bit RGB encoding (values rounded to the nearest level).
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    /// Snaps values to the 8-bit grid, i.e. what a PNG round trip yields.
    pub fn quantize8(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io_at(path, std::io::Error::other(e)))
    }

    pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(4, 6, |c, y, x| (c + y + x) as f32 / 20.0);
        assert_eq!(img.resize(4, 6), img);
        let flat = Image::filled(5, 7, [0.2, 0.4, 0.6]);
        let r = flat.resize(10, 14);
        assert!(r.data().chunks(140).enumerate().all(|(c, p)| p
            .iter()
            .all(|&v| (v - [0.2, 0.4, 0.6][c]).abs() < 1e-6)));
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_grid() {
        let img = Image::from_fn(3, 5, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(back, img.quantize8());
    }
}
