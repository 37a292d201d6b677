//! Planar float images, resampling and PNG/PNM IO.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Three-channel image, planar `C,H,W`, values nominally in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Single-channel region-of-interest mask; `true` is inside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

/// Bilinear resampling of one plane with half-pixel centres.
pub fn resize_plane_bilinear<T: Scalar>(
    src: &[T],
    width: usize,
    height: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<T> {
    if width == new_width && height == new_height {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); new_width * new_height];
    if width == 0 || height == 0 {
        return out;
    }
    let sx = width as f64 / new_width as f64;
    let sy = height as f64 / new_height as f64;
    let axis = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..new_height {
        let (y0, y1, fy) = axis(y, sy, height);
        for x in 0..new_width {
            let (x0, x1, fx) = axis(x, sx, width);
            let v = |yy: usize, xx: usize| src[yy * width + xx].as_f64();
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out[y * new_width + x] = T::of(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::InvalidShape {
                op: "image",
                shape: vec![3, height, width],
                reason: format!("buffer holds {} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(w, h, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| to_u8(self.get(c, y as usize, x as usize) as f64);
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes PNG, PPM or PGM depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Self {
        let mut data = Vec::with_capacity(3 * new_width * new_height);
        for c in 0..3 {
            data.extend(resize_plane_bilinear(
                self.plane(c),
                self.width,
                self.height,
                new_width,
                new_height,
            ));
        }
        Self {
            width: new_width,
            height: new_height,
            data,
        }
    }

    /// Crops `[x0, x0+w) × [y0, y0+h)`; the window must lie inside.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            let p = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&p[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Grows the image to at least `w×h` by repeating the last row and
    /// column.
    pub fn pad_replicate(&self, w: usize, h: usize) -> Self {
        let (nw, nh) = (w.max(self.width), h.max(self.height));
        let mut data = Vec::with_capacity(3 * nw * nh);
        for c in 0..3 {
            for y in 0..nh {
                let sy = y.min(self.height - 1);
                for x in 0..nw {
                    data.push(self.get(c, sy, x.min(self.width - 1)));
                }
            }
        }
        Self {
            width: nw,
            height: nh,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = &mut out.plane_mut(c)[y * self.width..(y + 1) * self.width];
                row.reverse();
            }
        }
        out
    }

    /// `[3,H,W]` tensor of the raw values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image buffer is 3*H*W")
    }
}

/// `[0,1] → 0..=255`, rounding half to even.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

impl Mask {
    pub fn full(width: usize, height: usize, inside: bool) -> Self {
        Self {
            width,
            height,
            data: vec![inside; width * height],
        }
    }

    /// Loads a PNG/PGM; any nonzero pixel is inside.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        Ok(Self {
            width: gray.width() as usize,
            height: gray.height() as usize,
            data: gray.pixels().map(|p| p.0[0] != 0).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img: GrayImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.data[y as usize * self.width + x as usize] {
                255
            } else {
                0
            }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, new_width: usize, new_height: usize) -> Self {
        let mut data = Vec::with_capacity(new_width * new_height);
        for y in 0..new_height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / new_height as f64) as usize;
            let sy = sy.min(self.height.saturating_sub(1));
            for x in 0..new_width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / new_width as f64) as usize;
                data.push(self.data[sy * self.width + sx.min(self.width.saturating_sub(1))]);
            }
        }
        Self {
            width: new_width,
            height: new_height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_plane_bilinear(&src, 4, 3, 4, 3), src);
        let c = vec![2.5f64; 20];
        let r = resize_plane_bilinear(&c, 5, 4, 9, 7);
        assert!(r.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_upsample_interpolates() {
        let src = vec![0.0f64, 1.0];
        let r = resize_plane_bilinear(&src, 2, 1, 4, 1);
        assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pad_and_crop() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = img.pad_replicate(3, 2);
        assert_eq!(p.plane(0), &[0.1, 0.2, 0.2, 0.1, 0.2, 0.2]);
        assert_eq!(p.crop(1, 1, 2, 1).plane(2), &[0.6, 0.6]);
    }

    #[test]
    fn flip_is_involution() {
        let img = Image::new(3, 2, (0..18).map(|i| i as f32 / 18.0).collect()).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 0, 0), img.get(1, 0, 2));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        for ext in ["png", "ppm"] {
            let path = dir.path().join(format!("a.{ext}"));
            img.save(&path).unwrap();
            let back = Image::load(&path).unwrap();
            assert_eq!(back.width, 2);
            for (a, b) in back.data.iter().zip(&img.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn mask_round_trip_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roi.pgm");
        let m = Mask {
            width: 3,
            height: 1,
            data: vec![true, false, true],
        };
        m.save(&path).unwrap();
        assert_eq!(Mask::load(&path).unwrap(), m);
    }
}
