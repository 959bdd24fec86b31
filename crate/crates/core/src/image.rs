//! RGB rasters in `[0, 1]` and lossless PNG/PPM I/O.

use std::path::Path;

use crate::tensor::Tensor;

/// Side length that padded codec inputs must be a multiple of.
pub const PAD_MULTIPLE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image has zero size")]
    Empty,
    #[error("image contains non-finite values")]
    NonFinite,
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("expected 3 channels, found {0}")]
    Channels(usize),
    #[error("unsupported image format for {0} (use .png or .ppm)")]
    Format(String),
    #[error(transparent)]
    Codec(#[from] ::image::ImageError),
}

/// A single RGB image stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor,
}

impl ImageTensor {
    /// Validates shape, finiteness and range.
    pub fn new(pixels: Tensor) -> Result<Self, ImageError> {
        let [n, c, h, w] = pixels.shape();
        if n != 1 || c != 3 {
            return Err(ImageError::Channels(c));
        }
        if h == 0 || w == 0 {
            return Err(ImageError::Empty);
        }
        if !pixels.is_finite() {
            return Err(ImageError::NonFinite);
        }
        if let Some(&v) = pixels.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self { pixels })
    }

    /// Clamps into `[0, 1]`; non-finite values become 0.
    pub fn from_tensor_clamped(t: Tensor) -> Result<Self, ImageError> {
        Self::new(t.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut t = Tensor::zeros([1, 3, height, width]);
        for (c, v) in rgb.iter().enumerate() {
            t.data_mut()[c * height * width..(c + 1) * height * width].fill(*v);
        }
        Self::new(t).expect("valid fill colour")
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != height * width * 3 {
            return Err(ImageError::Channels(rgb.len() / (height * width).max(1)));
        }
        let mut t = Tensor::zeros([1, 3, height, width]);
        for i in 0..height * width {
            for c in 0..3 {
                t.data_mut()[c * height * width + i] = rgb[i * 3 + c] as f64 / 255.0;
            }
        }
        Self::new(t)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; h * w * 3];
        for i in 0..h * w {
            for c in 0..3 {
                out[i * 3 + c] = (self.pixels.data()[c * h * w + i] * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.pixels.h()
    }

    pub fn width(&self) -> usize {
        self.pixels.w()
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.at(0, c, y, x)
    }

    /// Reflect-pads bottom and right edges up to multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> ImageTensor {
        let (h, w) = (self.height(), self.width());
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut t = Tensor::zeros([1, 3, ph, pw]);
        for c in 0..3 {
            for y in 0..ph {
                let sy = reflect(y, h);
                for x in 0..pw {
                    let idx = t.index(0, c, y, x);
                    t.data_mut()[idx] = self.pixels.at(0, c, sy, reflect(x, w));
                }
            }
        }
        ImageTensor { pixels: t }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> ImageTensor {
        assert!(y0 + height <= self.height() && x0 + width <= self.width(), "crop out of bounds");
        let mut t = Tensor::zeros([1, 3, height, width]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let idx = t.index(0, c, y, x);
                    t.data_mut()[idx] = self.pixels.at(0, c, y0 + y, x0 + x);
                }
            }
        }
        ImageTensor { pixels: t }
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        check_format(path)?;
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let format = check_format(path)?;
        let buf = ::image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer sized from image");
        buf.save_with_format(path, format)?;
        Ok(())
    }
}

fn check_format(path: &Path) -> Result<::image::ImageFormat, ImageError> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => Ok(::image::ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(::image::ImageFormat::Pnm),
        _ => Err(ImageError::Format(path.display().to_string())),
    }
}

/// Mirror index (without repeating the edge sample) for any `i`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_pixels() {
        assert!(matches!(ImageTensor::new(Tensor::full([1, 3, 2, 2], f64::NAN)), Err(ImageError::NonFinite)));
        assert!(matches!(ImageTensor::new(Tensor::full([1, 3, 2, 2], 1.5)), Err(ImageError::OutOfRange(_))));
        assert!(matches!(ImageTensor::new(Tensor::zeros([1, 4, 2, 2])), Err(ImageError::Channels(4))));
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let data: Vec<u8> = (0..3 * 3 * 3).map(|i| (i * 9) as u8).collect();
        let img = ImageTensor::from_rgb8(3, 3, &data).unwrap();
        let p = img.pad_to_multiple(64);
        assert_eq!((p.height(), p.width()), (64, 64));
        assert_eq!(p.get(0, 3, 0), img.get(0, 1, 0));
        assert_eq!(p.get(1, 0, 4), img.get(1, 0, 0));
        assert_eq!(p.crop(0, 0, 3, 3), img);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(5, 7, &data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            img.save(&path).unwrap();
            assert_eq!(ImageTensor::load(&path).unwrap(), img);
        }
        assert!(matches!(img.save(&dir.path().join("a.jpg")), Err(ImageError::Format(_))));
    }
}
