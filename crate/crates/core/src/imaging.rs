//! In-memory RGB frames and the resampling helpers used for slice
//! extraction, augmentation, and heatmap rendering.
//!
//! Frames hold channel-first `3 x H x W` arrays with values in `[0, 1]`.
//! PNG round-trips are lossless for 8-bit-quantized content.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    data: Array3<f64>,
}

impl RgbFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        RgbFrame {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 x H x W".into(),
                got: format!("{:?}", data.shape()),
            });
        }
        Ok(RgbFrame { data })
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(RgbFrame { data })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.data[[0, y, x]]),
                    quantize(self.data[[1, y, x]]),
                    quantize(self.data[[2, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path.as_ref())?;
        Ok(())
    }

    /// Crops the (continuous-coordinate) box region and resizes it to
    /// `size x size` with bilinear sampling at output pixel centers.
    pub fn crop_resize(&self, region: &BoundingBox, size: usize) -> Array3<f64> {
        let mut out = Array3::zeros((3, size, size));
        let sx = region.width() / size as f64;
        let sy = region.height() / size as f64;
        for row in 0..size {
            let v = region.y1() + (row as f64 + 0.5) * sy;
            for col in 0..size {
                let u = region.x1() + (col as f64 + 0.5) * sx;
                let rgb = self.sample_bilinear(u, v);
                for c in 0..3 {
                    out[[c, row, col]] = rgb[c];
                }
            }
        }
        out
    }

    /// Bilinear sample at continuous coordinates; source pixel `p` has its
    /// center at `p + 0.5`, and lookups are clamped at the frame border.
    fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let su = u - 0.5;
        let sv = v - 0.5;
        let x0 = su.floor() as isize;
        let y0 = sv.floor() as isize;
        let fx = su - x0 as f64;
        let fy = sv - y0 as f64;
        let clamp = |p: isize, hi: isize| p.clamp(0, hi - 1) as usize;
        let (x0c, x1c) = (clamp(x0, w), clamp(x0 + 1, w));
        let (y0c, y1c) = (clamp(y0, h), clamp(y0 + 1, h));
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let p00 = self.data[[c, y0c, x0c]];
            let p01 = self.data[[c, y0c, x1c]];
            let p10 = self.data[[c, y1c, x0c]];
            let p11 = self.data[[c, y1c, x1c]];
            let top = p00 + (p01 - p00) * fx;
            let bot = p10 + (p11 - p10) * fx;
            *out = top + (bot - top) * fy;
        }
        rgb
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize of a single-channel map (used for heatmap upsampling).
pub fn resize_bilinear_2d(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (sh, sw) = (src.shape()[0] as isize, src.shape()[1] as isize);
    let mut out = Array2::zeros((out_h, out_w));
    for row in 0..out_h {
        let v = (row as f64 + 0.5) * sh as f64 / out_h as f64 - 0.5;
        for col in 0..out_w {
            let u = (col as f64 + 0.5) * sw as f64 / out_w as f64 - 0.5;
            let x0 = u.floor() as isize;
            let y0 = v.floor() as isize;
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            let clamp = |p: isize, hi: isize| p.clamp(0, hi - 1) as usize;
            let (x0c, x1c) = (clamp(x0, sw), clamp(x0 + 1, sw));
            let (y0c, y1c) = (clamp(y0, sh), clamp(y0 + 1, sh));
            let top = src[[y0c, x0c]] + (src[[y0c, x1c]] - src[[y0c, x0c]]) * fx;
            let bot = src[[y1c, x0c]] + (src[[y1c, x1c]] - src[[y1c, x0c]]) * fx;
            out[[row, col]] = top + (bot - top) * fy;
        }
    }
    out
}

/// Blends a `[0, 1]` heatmap over a base slice: warm tint where heat is
/// high, cool where it is low.
pub fn heat_overlay(base: &Array3<f64>, heat: &Array2<f64>) -> Result<RgbFrame> {
    let (h, w) = (heat.shape()[0], heat.shape()[1]);
    if base.shape() != [3, h, w] {
        return Err(Error::ShapeMismatch {
            expected: format!("3 x {h} x {w}"),
            got: format!("{:?}", base.shape()),
        });
    }
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = heat[[y, x]].clamp(0.0, 1.0);
            let tint = [t, 0.25 * t, 1.0 - t];
            for c in 0..3 {
                out[[c, y, x]] = (0.5 * base[[c, y, x]] + 0.5 * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    RgbFrame::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    #[test]
    fn png_roundtrip_is_lossless_for_quantized_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut frame = RgbFrame::zeros(5, 7);
        for (i, v) in frame.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let path = dir.path().join("f.png");
        frame.save_png(&path).unwrap();
        let back = RgbFrame::load_png(&path).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn crop_resize_identity_on_axis_aligned_crop() {
        // Cropping an integer-aligned region at its native size reproduces
        // the pixels exactly (sample points land on source centers).
        let mut frame = RgbFrame::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                frame.data_mut()[[0, y, x]] = (x + 8 * y) as f64 / 64.0;
            }
        }
        let region = BoundingBox::new(2.0, 3.0, 6.0, 7.0).unwrap();
        let crop = frame.crop_resize(&region, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(crop[[0, y, x]], frame.data()[[0, y + 3, x + 2]]);
            }
        }
    }

    #[test]
    fn crop_resize_constant_region_stays_constant() {
        let mut frame = RgbFrame::zeros(10, 10);
        frame.data_mut().fill(0.375);
        let region = BoundingBox::new(1.3, 2.7, 8.9, 9.1).unwrap();
        let crop = frame.crop_resize(&region, 13);
        assert!(crop.iter().all(|&v| (v - 0.375).abs() < 1e-12));
    }

    #[test]
    fn resize_2d_preserves_constant_maps() {
        let src = Array2::from_elem((3, 3), 0.6);
        let up = resize_bilinear_2d(&src, 12, 12);
        assert!(up.iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }
}
