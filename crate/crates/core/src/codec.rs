//! Image ↔ latent mapping and the image/mask value types.
//!
//! The default codec is an exact space-to-depth rearrangement with factor
//! `f = 2`: every `f×f` pixel block becomes `f²` groups of 3 channels, so a
//! `[3, H, W]` image maps to a `[12, H/2, W/2]` latent and back without loss.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_FACTOR: usize = 2;

/// RGB image `[3, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T: Real = f32>(Tensor<T>);

/// Latent `[Cz, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T: Real = f32>(Tensor<T>);

/// Binary edit-region map `[1, H, W]`; 1 marks pixels to regenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor<T: Real = f32>(Tensor<T>);

impl<T: Real> ImageTensor<T> {
    /// Validates the channel count and clamps values into `[-1, 1]`.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "image",
                shape: s.to_vec(),
                reason: "expected [3, H, W]".into(),
            });
        }
        if s[0] != 3 {
            return Err(Error::ChannelCount {
                expected: 3,
                found: s[0],
            });
        }
        let lo = -T::one();
        Ok(Self(t.map(|v| v.max(lo).min(T::one()))))
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> T {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor(self.0.cast())
    }

    /// `(1 - m) ⊙ x`: zeroes the edit region.
    pub fn masked(&self, mask: &MaskTensor<T>) -> Result<Self> {
        self.check_mask(mask)?;
        let hw = self.height() * self.width();
        let m = mask.0.data();
        let data = self
            .0
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (T::one() - m[i % hw]))
            .collect();
        Ok(Self(Tensor::from_parts(self.0.shape().to_vec(), data)))
    }

    /// Takes pixels from `self` inside the mask and from `original` outside it.
    pub fn composite(&self, original: &Self, mask: &MaskTensor<T>) -> Result<Self> {
        self.check_mask(mask)?;
        if original.0.shape() != self.0.shape() {
            return Err(Error::ShapeMismatch {
                op: "composite",
                lhs: self.0.shape().to_vec(),
                rhs: original.0.shape().to_vec(),
            });
        }
        let hw = self.height() * self.width();
        let m = mask.0.data();
        let data = self
            .0
            .data()
            .iter()
            .zip(original.0.data())
            .enumerate()
            .map(|(i, (&gen, &orig))| if m[i % hw] > T::zero() { gen } else { orig })
            .collect();
        Ok(Self(Tensor::from_parts(self.0.shape().to_vec(), data)))
    }

    pub(crate) fn check_mask(&self, mask: &MaskTensor<T>) -> Result<()> {
        if mask.height() != self.height() || mask.width() != self.width() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: self.0.shape().to_vec(),
                rhs: mask.0.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Crops rows `y0..y1` and columns `x0..x1`.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let (h, w) = (y1 - y0, x1 - x0);
        let t = Tensor::from_fn(&[3, h, w], |i| {
            let (c, rem) = (i / (h * w), i % (h * w));
            self.pixel(c, y0 + rem / w, x0 + rem % w)
        });
        Self(t)
    }
}

impl<T: Real> LatentTensor<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::InvalidShape {
                op: "latent",
                shape: t.shape().to_vec(),
                reason: "expected [Cz, h, w]".into(),
            });
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

impl<T: Real> MaskTensor<T> {
    /// Accepts `[1, H, W]` (or `[H, W]`) tensors whose values are exactly 0 or 1.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let t = match t.shape().len() {
            2 => {
                let s = [1, t.shape()[0], t.shape()[1]];
                t.reshape(&s)?
            }
            3 if t.shape()[0] == 1 => t,
            _ => {
                return Err(Error::InvalidShape {
                    op: "mask",
                    shape: t.shape().to_vec(),
                    reason: "expected [1, H, W]".into(),
                })
            }
        };
        if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::NonBinaryMask);
        }
        Ok(Self(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[1, height, width]))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(Tensor::ones(&[1, height, width]))
    }

    /// Builds a mask from a predicate over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Tensor::from_fn(&[1, height, width], |i| {
            if f(i / width, i % width) {
                T::one()
            } else {
                T::zero()
            }
        }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.data()[y * self.width() + x] > T::zero()
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > T::zero()).count()
    }

    /// Fraction of pixels in the edit region.
    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.0.numel() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Inclusive-exclusive bounding box `(y0, y1, x0, x1)` of the edit region.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (h, w) = (self.height(), self.width());
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for y in 0..h {
            for x in 0..w {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 < y1).then_some((y0, y1, x0, x1))
    }

    pub fn cast<U: Real>(&self) -> MaskTensor<U> {
        MaskTensor(self.0.cast())
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| T::one() - v))
    }
}

/// Maps images to latents and back.
pub trait LatentCodec: Send + Sync {
    fn factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    fn encode<T: Real>(&self, x: &ImageTensor<T>) -> Result<LatentTensor<T>>;

    fn decode<T: Real>(&self, z: &LatentTensor<T>) -> Result<ImageTensor<T>>;

    /// Latent-resolution mask: a cell is masked if any covered pixel is.
    fn mask_to_latent<T: Real>(&self, m: &MaskTensor<T>) -> Result<MaskTensor<T>> {
        let f = self.factor();
        let (h, w) = (m.height(), m.width());
        if h % f != 0 || w % f != 0 {
            return Err(Error::IndivisibleDims {
                height: h,
                width: w,
                factor: f,
            });
        }
        let (lh, lw) = (h / f, w / f);
        Ok(MaskTensor::from_fn(lh, lw, |y, x| {
            (0..f).any(|dy| (0..f).any(|dx| m.get(y * f + dy, x * f + dx)))
        }))
    }
}

/// Lossless space-to-depth codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceToDepth {
    factor: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self {
            factor: DEFAULT_FACTOR,
        }
    }
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1, "codec factor must be positive");
        Self { factor }
    }
}

impl LatentCodec for SpaceToDepth {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn encode<T: Real>(&self, x: &ImageTensor<T>) -> Result<LatentTensor<T>> {
        let f = self.factor;
        let (h, w) = (x.height(), x.width());
        if h % f != 0 || w % f != 0 {
            return Err(Error::IndivisibleDims {
                height: h,
                width: w,
                factor: f,
            });
        }
        let (lh, lw) = (h / f, w / f);
        let cz = self.latent_channels();
        let src = x.tensor().data();
        let mut out = vec![T::zero(); cz * lh * lw];
        // latent channel (dy * f + dx) * 3 + c holds pixel (c, i*f + dy, j*f + dx)
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let (i, dy, j, dx) = (y / f, y % f, xx / f, xx % f);
                    let zc = (dy * f + dx) * 3 + c;
                    out[(zc * lh + i) * lw + j] = src[(c * h + y) * w + xx];
                }
            }
        }
        LatentTensor::new(Tensor::from_parts(vec![cz, lh, lw], out))
    }

    fn decode<T: Real>(&self, z: &LatentTensor<T>) -> Result<ImageTensor<T>> {
        let f = self.factor;
        if z.channels() != self.latent_channels() {
            return Err(Error::ChannelCount {
                expected: self.latent_channels(),
                found: z.channels(),
            });
        }
        let (lh, lw) = (z.height(), z.width());
        let (h, w) = (lh * f, lw * f);
        let src = z.tensor().data();
        let mut out = vec![T::zero(); 3 * h * w];
        for zc in 0..self.latent_channels() {
            let (c, d) = (zc % 3, zc / 3);
            let (dy, dx) = (d / f, d % f);
            for i in 0..lh {
                for j in 0..lw {
                    out[(c * h + i * f + dy) * w + j * f + dx] = src[(zc * lh + i) * lw + j];
                }
            }
        }
        Ok(ImageTensor(Tensor::from_parts(vec![3, h, w], out)))
    }
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

impl ImageTensor<f32> {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let t = Tensor::from_fn(&[3, h, w], |i| {
            let (c, rem) = (i / (h * w), i % (h * w));
            from_u8(img.get_pixel((rem % w) as u32, (rem / w) as u32)[c])
        });
        Self(t)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = |c| to_u8(self.pixel(c, y as usize, x as usize));
            image::Rgb([p(0), p(1), p(2)])
        })
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Resamples to `height × width` with a triangle filter.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let src = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            let p = |c| self.pixel(c, y as usize, x as usize);
            image::Rgb([p(0), p(1), p(2)])
        });
        let dst = image::imageops::resize(
            &src,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        let t = Tensor::from_fn(&[3, height, width], |i| {
            let (c, rem) = (i / (height * width), i % (height * width));
            dst.get_pixel((rem % width) as u32, (rem / width) as u32)[c]
        });
        Self(t.map(|v| v.clamp(-1.0, 1.0)))
    }
}

impl MaskTensor<f32> {
    /// Decodes a PNG as 8-bit grayscale and thresholds at 128.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32)[0] >= 128))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.height(), self.width());
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}
