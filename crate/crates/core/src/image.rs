//! Planar floating-point images and 8-bit PNG persistence.

use std::path::Path;

use editloc_nn::{Real, Tensor};

use crate::error::{contract, Error, Result};

/// Luminance weights used for every color-to-gray conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Image stored channel-major (`data[(c * height + y) * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return contract(format!(
                "{} values do not fill a {channels}x{height}x{width} image",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.pixels();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            ))
        }
    }

    /// Channels `start..start + count` as a new image.
    pub fn channel_range(&self, start: usize, count: usize) -> Self {
        let p = self.pixels();
        Self {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * p..(start + count) * p].to_vec(),
        }
    }

    pub fn concat(parts: &[&Image]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for part in parts {
            if part.height != first.height || part.width != first.width {
                return contract("concatenated images must share spatial size");
            }
            data.extend_from_slice(&part.data);
            channels += part.channels;
        }
        Image::from_vec(channels, first.height, first.width, data)
    }

    /// Weighted luminance of a 3-channel image; a 1-channel image is returned
    /// unchanged.
    pub fn luminance(&self) -> Result<Self> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = (0..self.pixels())
                    .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
                    .collect();
                Image::from_vec(1, self.height, self.width, data)
            }
            c => contract(format!("luminance needs 1 or 3 channels, got {c}")),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds every value to the nearest multiple of 1/255 so 8-bit storage is
    /// exact.
    pub fn quantized(&self) -> Self {
        self.map(quantize)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `[C, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("length matches shape")
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            ref s => return contract(format!("expected a single image tensor, got shape {s:?}")),
        };
        Image::from_vec(c, h, w, t.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Writes a 1-channel (grayscale) or 3-channel (RGB) 8-bit PNG. Values are
    /// clipped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(self.get(0, y as usize, x as usize))]))
                .save(path),
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            })
            .save(path),
            c => return contract(format!("PNG export needs 1 or 3 channels, got {c}")),
        };
        result.map_err(|e| image_error(path, e))
    }

    /// Reads a PNG as RGB (`channels == 3`) or grayscale (`channels == 1`).
    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => {
                let g = img.to_luma8();
                Ok(Image::from_fn(1, h, w, |_, y, x| {
                    g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
                }))
            }
            3 => {
                let rgb = img.to_rgb8();
                Ok(Image::from_fn(3, h, w, |c, y, x| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
                }))
            }
            c => contract(format!("PNG import needs 1 or 3 channels, got {c}")),
        }
    }
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Places equally sized RGB or grayscale panels side by side, separated by a
/// 2-pixel white gutter. Grayscale panels are replicated to RGB.
pub fn hstack_panels(panels: &[&Image]) -> Result<Image> {
    let first = panels
        .first()
        .ok_or_else(|| Error::Contract("no panels to arrange".into()))?;
    let (h, w) = (first.height, first.width);
    let gutter = 2;
    let total_w = panels.len() * w + (panels.len() - 1) * gutter;
    let mut out = Image::filled(3, h, total_w, 1.0);
    for (i, panel) in panels.iter().enumerate() {
        if panel.height != h || panel.width != w {
            return contract("panels must share a size");
        }
        let x0 = i * (w + gutter);
        for c in 0..3 {
            let src = if panel.channels == 1 { 0 } else { c };
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x0 + x, panel.get(src, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Stacks equally wide images vertically with a 2-pixel white gutter.
pub fn vstack_rows(rows: &[Image]) -> Result<Image> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("no rows to arrange".into()))?;
    let (c, w) = (first.channels, first.width);
    let gutter = 2;
    let total_h = rows.iter().map(|r| r.height).sum::<usize>() + (rows.len() - 1) * gutter;
    let mut out = Image::filled(c, total_h, w, 1.0);
    let mut y0 = 0;
    for row in rows {
        if row.channels != c || row.width != w {
            return contract("rows must share width and channel count");
        }
        for ch in 0..c {
            for y in 0..row.height {
                for x in 0..w {
                    out.set(ch, y0 + y, x, row.get(ch, y, x));
                }
            }
        }
        y0 += row.height + gutter;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 17 + x * 5) % 256) as f64 / 255.0);
        let gray = Image::from_fn(1, 5, 7, |_, y, x| ((y * 40 + x) % 256) as f64 / 255.0);
        rgb.save_png(dir.path().join("rgb.png")).unwrap();
        gray.save_png(dir.path().join("gray.png")).unwrap();
        assert_eq!(Image::load_png(dir.path().join("rgb.png"), 3).unwrap(), rgb);
        assert_eq!(Image::load_png(dir.path().join("gray.png"), 1).unwrap(), gray);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = Image::load_png("/nonexistent/x.png", 3).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn luminance_weights() {
        let img = Image::from_vec(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.luminance().unwrap().data(), &[0.299]);
        let white = Image::filled(3, 2, 2, 1.0).luminance().unwrap();
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(2, 3, 4, |c, y, x| (c + y * x) as f64 * 0.25);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn panel_grid_layout() {
        let a = Image::filled(3, 4, 4, 0.0);
        let b = Image::filled(1, 4, 4, 0.5);
        let row = hstack_panels(&[&a, &b]).unwrap();
        assert_eq!(row.shape(), (3, 4, 10));
        assert_eq!(row.get(1, 0, 4), 1.0);
        assert_eq!(row.get(2, 3, 9), 0.5);
        let grid = vstack_rows(&[row.clone(), row]).unwrap();
        assert_eq!(grid.shape(), (3, 10, 10));
    }
}
