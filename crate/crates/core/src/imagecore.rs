//! Single-channel float rasters: decoding, normalization, blur, resize and
//! bilinear sampling with spatial derivatives.
//!
//! Pixel centers sit at integer coordinates. Sampling outside
//! `[0, W-1] x [0, H-1]` clamps to the border, and the derivative along a
//! clamped axis is zero.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{GpoError, Result};
use crate::geom::PixelCoord;

const DUMP_MAGIC: &[u8; 4] = b"GPOI";
const DUMP_VERSION: u8 = 1;

/// Grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Bilinear sample with the partial derivatives of the interpolating surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GpoError::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(GpoError::Argument(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GpoError::Argument(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    ///
    /// Panics if the data length does not match the dimensions.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        assert!(width > 0 && height > 0 && data.len() == width * height);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::from_clamped(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image::from_clamped(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample without the NaN check; NaN coordinates land on pixel 0.
    #[inline]
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64) -> Sample {
        bilinear(&self.data, self.width, self.height, x, y)
    }
}

/// One interpolation axis: the two lattice indices, the fractional offset,
/// and whether the query was clamped.
#[derive(Debug, Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    live: bool,
}

#[inline]
fn axis(c: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: 0.0,
            live: false,
        };
    }
    let hi = (n - 1) as f64;
    let (cc, live) = if c < 0.0 {
        (0.0, false)
    } else if c > hi {
        (hi, false)
    } else if c.is_nan() {
        (0.0, false)
    } else {
        (c, true)
    };
    let mut i0 = cc.floor() as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    Axis {
        i0,
        i1: i0 + 1,
        frac: cc - i0 as f64,
        live,
    }
}

/// Bilinear interpolation over a row-major scalar grid with clamp-to-edge.
#[inline]
pub(crate) fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> Sample {
    let ax = axis(x, w);
    let ay = axis(y, h);
    let r0 = ay.i0 * w;
    let r1 = ay.i1 * w;
    let v00 = data[r0 + ax.i0];
    let v10 = data[r0 + ax.i1];
    let v01 = data[r1 + ax.i0];
    let v11 = data[r1 + ax.i1];
    let (fx, fy) = (ax.frac, ay.frac);
    let top = (1.0 - fx) * v00 + fx * v10;
    let bottom = (1.0 - fx) * v01 + fx * v11;
    let value = (1.0 - fy) * top + fy * bottom;
    let gx = if ax.live {
        (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    } else {
        0.0
    };
    let gy = if ay.live { bottom - top } else { 0.0 };
    Sample { value, gx, gy }
}

/// The four lattice taps and their bilinear weights for a query point.
/// Used to scatter adjoints back onto a grid.
#[inline]
pub(crate) fn bilinear_taps(w: usize, h: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let ax = axis(x, w);
    let ay = axis(y, h);
    let (fx, fy) = (ax.frac, ay.frac);
    [
        (ay.i0 * w + ax.i0, (1.0 - fx) * (1.0 - fy)),
        (ay.i0 * w + ax.i1, fx * (1.0 - fy)),
        (ay.i1 * w + ax.i0, (1.0 - fx) * fy),
        (ay.i1 * w + ax.i1, fx * fy),
    ]
}

/// Samples `img` at `p`, returning the value and its spatial derivatives.
pub fn sample_bilinear(img: &Image, p: PixelCoord) -> Result<Sample> {
    if p.x.is_nan() || p.y.is_nan() {
        return Err(GpoError::Argument("NaN sample coordinate".into()));
    }
    Ok(img.sample_unchecked(p.x, p.y))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with edge replication. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(GpoError::Argument(format!(
            "blur sigma must be a finite value >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);

    let mut horiz = vec![0.0; w * h];
    horiz
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            let src = &img.data[y * w..(y + 1) * w];
            for (x, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * src[sx as usize];
                }
                *out = acc;
            }
        });

    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1);
                acc += kv * horiz[sy as usize * w + x];
            }
            *o = acc;
        }
    });
    Ok(Image::from_clamped(w, h, out))
}

/// Bilinear resize with half-pixel aligned mapping
/// `src = (dst + 0.5) * (src_size / dst_size) - 0.5`.
pub fn resize_bilinear(img: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(GpoError::Argument(format!(
            "resize target must be positive, got {new_w}x{new_h}"
        )));
    }
    if new_w == img.width && new_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    let mut out = vec![0.0; new_w * new_h];
    out.par_chunks_mut(new_w).enumerate().for_each(|(y, row)| {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for (x, o) in row.iter_mut().enumerate() {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            *o = img.sample_unchecked(src_x, src_y).value;
        }
    });
    Ok(Image::from_clamped(new_w, new_h, out))
}

/// Loads a raster (PNG, 8/16-bit, gray or color) or a float dump written by
/// [`save_float_dump`]. Color is reduced to luma `0.299 R + 0.587 G + 0.114 B`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GpoError::io(path, e))?;
    if bytes.starts_with(DUMP_MAGIC) {
        return decode_float_dump(&bytes).map_err(|msg| GpoError::format(path, msg));
    }
    let decoded = image::load_from_memory(&bytes).map_err(|e| GpoError::format(path, e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
    };
    Ok(Image::from_clamped(w, h, data))
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Quantizes to 8 bits as `round(v * 255)`.
pub fn to_gray8(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = GrayImage::from_raw(img.width as u32, img.height as u32, to_gray8(img))
        .expect("buffer matches dimensions");
    buf.save(path)
        .map_err(|e| GpoError::format(path, e.to_string()))
}

/// Writes an RGB raster with `red` in the R channel and `green` in G and B
/// left at zero.
pub fn save_overlay(red: &Image, green: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !red.same_dims(green) {
        return Err(GpoError::Argument("overlay images differ in size".into()));
    }
    let r = to_gray8(red);
    let g = to_gray8(green);
    let mut raw = Vec::with_capacity(r.len() * 3);
    for (a, b) in r.into_iter().zip(g) {
        raw.extend_from_slice(&[a, b, 0]);
    }
    let buf = RgbImage::from_raw(red.width as u32, red.height as u32, raw)
        .expect("buffer matches dimensions");
    buf.save(path)
        .map_err(|e| GpoError::format(path, e.to_string()))
}

/// Lossless dump: `"GPOI"`, version byte, LE u32 width, LE u32 height, then
/// row-major LE f64 intensities.
pub fn save_float_dump(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(13 + img.data.len() * 8);
    buf.extend_from_slice(DUMP_MAGIC);
    buf.push(DUMP_VERSION);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| GpoError::io(path, e))?;
    f.write_all(&buf).map_err(|e| GpoError::io(path, e))
}

fn decode_float_dump(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut r = bytes;
    let mut head = [0u8; 13];
    r.read_exact(&mut head).map_err(|_| "truncated header".to_string())?;
    if head[4] != DUMP_VERSION {
        return Err(format!("unsupported dump version {}", head[4]));
    }
    let w = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    if r.len() != w * h * 8 {
        return Err(format!("payload has {} bytes, expected {}", r.len(), w * h * 8));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(w, h, data).map_err(|e| e.to_string())
}
