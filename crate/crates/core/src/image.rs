//! RGB frames with values in `[0, 1]`, stored row-major as `H x W x 3`.

use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be non-zero"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "image buffer holds {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
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

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Content hash over the exact bit patterns of the pixel values.
    pub fn content_hash(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.height.hash(&mut hasher);
        self.width.hash(&mut hasher);
        for v in &self.data {
            v.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f32> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok((sum / self.data.len() as f64) as f32)
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "frame shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.shape();
        let mut planar = vec![0f32; h * w * 3];
        for (p, rgb) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                planar[ch * h * w + p] = rgb[ch];
            }
        }
        Ok(Tensor::from_vec(planar, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Stacks frames into a `(N, 3, H, W)` batch.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::validation("cannot batch zero images"))?;
        let tensors = images
            .iter()
            .map(|img| {
                first.check_same_shape(img)?;
                img.to_tensor(dtype, device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&tensors, 0)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::validation(format!(
                    "expected a (3,H,W) or (1,3,H,W) tensor, got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        let planar = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut data = vec![0f32; h * w * 3];
        for p in 0..h * w {
            for ch in 0..3 {
                data[p * 3 + ch] = planar[ch * h * w + p].clamp(0.0, 1.0);
            }
        }
        Image::new(h, w, data)
    }

    /// Splits a `(N, 3, H, W)` tensor into frames.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let n = t.dim(0)?;
        (0..n).map(|i| Image::from_tensor(&t.get(i)?)).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    fn from_rgb8(img: &::image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ::image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Image::from_fn(height, width, |r, c| {
            let y = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let x = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
            self.sample_bilinear(y, x)
        })
    }

    /// Bilinear lookup with edge clamping.
    pub fn sample_bilinear(&self, y: f32, x: f32) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let (a, b, c, d) = (
            self.pixel(y0, x0),
            self.pixel(y0, x1),
            self.pixel(y1, x0),
            self.pixel(y1, x1),
        );
        let mut out = [0f32; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Largest centered square.
    pub fn center_crop_square(&self) -> Self {
        let side = self.height.min(self.width);
        let top = (self.height - side) / 2;
        let left = (self.width - side) / 2;
        Image::from_fn(side, side, |r, c| self.pixel(top + r, left + c))
    }

    /// Aspect-preserving fit into a `size x size` canvas, padding with black.
    pub fn letterbox(&self, size: usize) -> Letterbox {
        let scale = size as f32 / self.height.max(self.width) as f32;
        let h = ((self.height as f32 * scale).round() as usize).clamp(1, size);
        let w = ((self.width as f32 * scale).round() as usize).clamp(1, size);
        let resized = self.resize(h, w);
        let top = (size - h) / 2;
        let left = (size - w) / 2;
        let image = Image::from_fn(size, size, |r, c| {
            if r >= top && r < top + h && c >= left && c < left + w {
                resized.pixel(r - top, c - left)
            } else {
                [0.0; 3]
            }
        });
        Letterbox {
            image,
            scale,
            offset: (top, left),
        }
    }
}

/// A frame fitted into the model's square resolution, with the mapping
/// `model = source * scale + offset`.
#[derive(Clone, Debug)]
pub struct Letterbox {
    pub image: Image,
    pub scale: f32,
    pub offset: (usize, usize),
}
