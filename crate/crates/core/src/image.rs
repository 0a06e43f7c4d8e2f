//! Float images in `[0, 1]`, HWC layout, with PNG/PPM and raw-f32 IO.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, GrayImage, ImageEncoder, RgbImage};

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Parameter("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Edge-replicating pad on the bottom/right to the given size.
    pub fn pad_to(&self, h: usize, w: usize) -> Image {
        Image::from_fn(h.max(self.height), w.max(self.width), self.channels, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
    }

    /// ITU-R 601 luma of an RGB image; single-channel images pass through.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        })
    }

    /// Area-average downsampling by an integer factor per axis.
    pub fn area_downsample(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 || self.height % out_h != 0 || self.width % out_w != 0 {
            return Err(Error::contract(format!(
                "cannot area-average {}x{} to {out_h}x{out_w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / out_h, self.width / out_w);
        let inv = 1.0 / (fy * fx) as f64;
        Ok(Image::from_fn(out_h, out_w, self.channels, |y, x, c| {
            let mut s = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += self.get(y * fy + dy, x * fx + dx, c);
                }
            }
            s * inv
        }))
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(vec![1, self.height, self.width, self.channels], |i| {
            S::of(self.data[i])
        })
    }

    /// Image `index` of an NHWC tensor.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, index: usize) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::shape("image from tensor", s, &[index]));
        }
        let n = s[1] * s[2] * s[3];
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        Image::new(s[1], s[2], s[3], data)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes 8-bit PNG (RGB or grayscale), or binary PPM for a `.ppm` path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        let is_ppm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        let dynimg = match self.channels {
            1 => DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("buffer sized by construction"),
            ),
            3 => DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, bytes).expect("buffer sized by construction"),
            ),
            c => return Err(Error::Parameter(format!("cannot save {c}-channel image"))),
        };
        if is_ppm {
            let rgb = dynimg.to_rgb8();
            let file = BufWriter::new(fs::File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(rgb.as_raw(), w, h, image::ExtendedColorType::Rgb8)?;
            Ok(())
        } else {
            dynimg.save_with_format(path, image::ImageFormat::Png)?;
            Ok(())
        }
    }
}

/// Stacks same-sized images into one `[n, h, w, c]` tensor.
pub fn batch_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::shape(
                "batch",
                &[first.height, first.width, first.channels],
                &[img.height, img.width, img.channels],
            ));
        }
        data.extend(img.data.iter().map(|v| S::of(*v)));
    }
    Tensor::new(
        vec![images.len(), first.height, first.width, first.channels],
        data,
    )
}

/// Raw little-endian f32 values, no header.
pub fn write_f32_raw(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32_raw(path: &Path) -> Result<Vec<f64>> {
    let buf = fs::read(path)?;
    if buf.len() % 4 != 0 {
        return Err(Error::format(
            buf.len() as u64,
            "raw f32 sidecar length is not a multiple of 4",
        ));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
