//! 8-bit RGB rasters: loading, saving and bilinear resampling.
//!
//! PNG is the interchange format. TIFF is accepted on load only, since the
//! source imagery ships as TIFF. Everything here is pure over immutable inputs.

use std::fmt;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: String, reason: String },
    #[error("i/o failure on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid raster dimensions {width}x{height} for {len} pixels")]
    InvalidDims { width: u32, height: u32, len: usize },
}

/// Width and height in pixels, both at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidDims { width, height, len: 0 });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A row-major 2-D grid of pixels. Implemented by rasters, class maps and
/// binary masks so that geometric transforms and tiling share one code path.
pub trait Plane: Sized {
    type Pixel: Copy + Send + Sync;

    fn dims(&self) -> Dims;
    fn pixels(&self) -> &[Self::Pixel];
    fn from_pixels(dims: Dims, pixels: Vec<Self::Pixel>) -> Self;

    fn width(&self) -> u32 {
        self.dims().width
    }

    fn height(&self) -> u32 {
        self.dims().height
    }

    fn at(&self, x: u32, y: u32) -> Self::Pixel {
        self.pixels()[y as usize * self.width() as usize + x as usize]
    }

    /// Builds a plane by evaluating `f(x, y)` in row-major order.
    fn from_fn(dims: Dims, mut f: impl FnMut(u32, u32) -> Self::Pixel) -> Self {
        let mut pixels = Vec::with_capacity(dims.area());
        for y in 0..dims.height {
            for x in 0..dims.width {
                pixels.push(f(x, y));
            }
        }
        Self::from_pixels(dims, pixels)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct RgbRaster {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for RgbRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RgbRaster").field("width", &self.width).field("height", &self.height).finish_non_exhaustive()
    }
}

impl RgbRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize {
            return Err(RasterError::InvalidDims { width, height, len: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(dims: Dims, value: Rgb) -> Self {
        Self { width: dims.width, height: dims.height, pixels: vec![value; dims.area()] }
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.at(x, y)
    }

    pub fn set(&mut self, x: u32, y: u32, value: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = value;
    }

    pub fn into_pixels(self) -> Vec<Rgb> {
        self.pixels
    }

    fn to_image(&self) -> RgbImage {
        let raw: Vec<u8> = self.pixels.iter().flat_map(|p| p.iter().copied()).collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer length matches dims")
    }

    fn from_rgb8(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        let pixels = img.into_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self { width, height, pixels }
    }
}

impl Plane for RgbRaster {
    type Pixel = Rgb;

    fn dims(&self) -> Dims {
        Dims { width: self.width, height: self.height }
    }

    fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    fn from_pixels(dims: Dims, pixels: Vec<Rgb>) -> Self {
        debug_assert_eq!(pixels.len(), dims.area());
        Self { width: dims.width, height: dims.height, pixels }
    }
}

/// Decodes an 8-bit RGB PNG or TIFF. Alpha and any bands past the third are
/// dropped with a warning; 16-bit and float samples are rejected.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbRaster, RasterError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.is_file() {
        return Err(RasterError::MissingFile(shown));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| RasterError::Io { path: shown.clone(), reason: e.to_string() })?
        .with_guessed_format()
        .map_err(|e| RasterError::Io { path: shown.clone(), reason: e.to_string() })?;
    if reader.format().is_none() {
        return Err(RasterError::UnsupportedFormat { path: shown, reason: "unrecognized container".into() });
    }
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => {
            RasterError::UnsupportedFormat { path: shown.clone(), reason: u.to_string() }
        }
        image::ImageError::IoError(io) => RasterError::Io { path: shown.clone(), reason: io.to_string() },
        other => RasterError::CorruptImage { path: shown.clone(), reason: other.to_string() },
    })?;
    match img.color() {
        ColorType::Rgb8 => {}
        ColorType::Rgba8 => log::warn!("{shown}: ignoring fourth band"),
        other => {
            return Err(RasterError::UnsupportedFormat {
                path: shown,
                reason: format!("expected 8-bit RGB, found {other:?}"),
            })
        }
    }
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        other => other.to_rgb8(),
    };
    Ok(RgbRaster::from_rgb8(rgb))
}

/// Writes a lossless 8-bit RGB PNG.
pub fn save_rgb(raster: &RgbRaster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    raster
        .to_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RasterError::Io { path: path.display().to_string(), reason: e.to_string() })
}

/// Reads only the header to report pixel dimensions.
pub fn probe_dims(path: impl AsRef<Path>) -> Result<Dims, RasterError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.is_file() {
        return Err(RasterError::MissingFile(shown));
    }
    let (width, height) =
        image::image_dimensions(path).map_err(|e| RasterError::CorruptImage { path: shown, reason: e.to_string() })?;
    Dims::new(width, height)
}

/// Rounds a non-negative value to the nearest integer, ties upward, then
/// clamps into the 8-bit range.
pub(crate) fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// One axis of a bilinear resample: for every target index, the two source
/// indices and the weight of the second.
fn bilinear_taps(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|t| {
            let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor();
            let i1 = (i0 + 1.0).min(last);
            (i0 as usize, i1 as usize, s - i0)
        })
        .collect()
}

/// Half-pixel-centre bilinear resampling, per channel, rounded half-up.
pub fn resize_bilinear(raster: &RgbRaster, target: Dims) -> RgbRaster {
    if raster.dims() == target {
        return raster.clone();
    }
    let xs = bilinear_taps(raster.width, target.width);
    let ys = bilinear_taps(raster.height, target.height);
    let w = raster.width as usize;
    let src = &raster.pixels;
    let mut pixels = Vec::with_capacity(target.area());
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = src[y0 * w + x0];
            let p01 = src[y0 * w + x1];
            let p10 = src[y1 * w + x0];
            let p11 = src[y1 * w + x1];
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                out[c] = round_u8(top * (1.0 - fy) + bottom * fy);
            }
            pixels.push(out);
        }
    }
    RgbRaster::from_pixels(target, pixels)
}

/// Nearest-neighbour resampling of any plane, using pixel centres.
pub fn resize_nearest<P: Plane>(plane: &P, target: Dims) -> P {
    let src = plane.dims();
    let pick = |t: u32, s: u32, d: u32| -> u32 {
        let v = ((t as f64 + 0.5) * s as f64 / d as f64).floor() as u32;
        v.min(s - 1)
    };
    P::from_fn(target, |x, y| plane.at(pick(x, src.width, target.width), pick(y, src.height, target.height)))
}
