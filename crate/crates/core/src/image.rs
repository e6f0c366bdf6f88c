//! RGB images with real-valued samples in `[0, 1]`, stored planar (CHW).

use std::path::Path;

use crate::autograd::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Planar R, G, B.
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("empty image {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Image { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rejects non-finite samples and samples outside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image sample {i}")));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("image sample {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Crop of size `h x w` at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (n, c, h, w) = t.dims4();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
        }
        Image::new(h, w, t.data().to_vec())
    }

    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        if images.iter().any(|i| (i.height, i.width) != (first.height, first.width)) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new([images.len(), 3, first.height, first.width], data))
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        t.split_batch().iter().map(Image::from_tensor).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} bytes for {width}x{height} RGB", rgb.len())));
        }
        Ok(Image::from_fn(height, width, |c, y, x| rgb[(y * width + x) * 3 + c] as f64 / 255.0))
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.pixels());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Samples rounded to the 8-bit grid, as any codec input would see them.
    pub fn quantized8(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub fn to_dynamic(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions")
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
            .expect("rgb8 buffer size matches dimensions")
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resize (triangle filter) to the given size.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let resized = image::imageops::resize(
            &self.to_rgb32f(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Image::from_fn(height, width, |c, y, x| {
            resized.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0) as f64
        })
    }

    fn to_rgb32f(&self) -> image::Rgb32FImage {
        image::Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([self.get(0, y, x) as f32, self.get(1, y, x) as f32, self.get(2, y, x) as f32])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact_on_grid() {
        let img = Image::from_fn(5, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
        let back = Image::from_rgb8(7, 5, &img.to_rgb8()).unwrap();
        assert!(img.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn validate_rejects_nan_and_out_of_range() {
        let mut img = Image::filled(2, 2, [0.5; 3]);
        assert!(img.validate().is_ok());
        img.data[3] = f64::NAN;
        assert!(matches!(img.validate(), Err(Error::NonFinite(_))));
        img.data[3] = 1.5;
        assert!(matches!(img.validate(), Err(Error::InvalidInput(_))));
    }
}
