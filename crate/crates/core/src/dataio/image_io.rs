//! 8/16-bit grayscale and RGB images (PNG, PGM/PPM) as `[0, 1]` tensors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelFormat {
    Gray8,
    Gray16,
    Rgb8,
    Rgb16,
}

impl PixelFormat {
    pub fn max_code(self) -> f64 {
        match self {
            PixelFormat::Gray8 | PixelFormat::Rgb8 => 255.0,
            PixelFormat::Gray16 | PixelFormat::Rgb16 => 65535.0,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            PixelFormat::Gray8 | PixelFormat::Gray16 => 1,
            PixelFormat::Rgb8 | PixelFormat::Rgb16 => 3,
        }
    }

    /// Same bit depth with a different channel count.
    pub fn with_channels(self, channels: usize) -> Self {
        let deep = matches!(self, PixelFormat::Gray16 | PixelFormat::Rgb16);
        match (channels, deep) {
            (3, false) => PixelFormat::Rgb8,
            (3, true) => PixelFormat::Rgb16,
            (_, false) => PixelFormat::Gray8,
            (_, true) => PixelFormat::Gray16,
        }
    }
}

impl fmt::Display for PixelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelFormat::Gray8 => "gray8",
            PixelFormat::Gray16 => "gray16",
            PixelFormat::Rgb8 => "rgb8",
            PixelFormat::Rgb16 => "rgb16",
        })
    }
}

impl FromStr for PixelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray8" => Ok(PixelFormat::Gray8),
            "gray16" => Ok(PixelFormat::Gray16),
            "rgb8" => Ok(PixelFormat::Rgb8),
            "rgb16" => Ok(PixelFormat::Rgb16),
            _ => Err(Error::Invalid(format!("unknown pixel format `{s}`"))),
        }
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.display().to_string(),
        source,
    }
}

/// Reads an image as `[C, H, W]` values in `[0, 1]` (code / max code).
pub fn read_image(path: &Path) -> Result<(Tensor, PixelFormat)> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?
        .with_guessed_format()
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?
        .decode()
        .map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (format, planes): (PixelFormat, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (
            PixelFormat::Gray8,
            b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        DynamicImage::ImageLuma16(b) => (
            PixelFormat::Gray16,
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (
            PixelFormat::Rgb8,
            interleaved_to_planar(&b.into_raw(), h * w, 255.0),
        ),
        DynamicImage::ImageRgb16(b) => (
            PixelFormat::Rgb16,
            interleaved_to_planar(&b.into_raw(), h * w, 65535.0),
        ),
        other => {
            return Err(Error::Format {
                what: "image",
                detail: format!("{}: unsupported pixel layout {:?}", path.display(), other.color()),
            })
        }
    };
    let c = format.channels();
    Ok((Tensor::new(&[c, h, w], planes)?, format))
}

fn interleaved_to_planar<T: Copy + Into<f64>>(raw: &[T], n: usize, max: f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = raw[3 * i + c].into() / max;
        }
    }
    out
}

/// Reads a grayscale image as `[H, W]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let (t, format) = read_image(path)?;
    if format.channels() != 1 {
        return Err(Error::Format {
            what: "image",
            detail: format!("{} is {format}, expected grayscale", path.display()),
        });
    }
    let (_, h, w) = t.dims3()?;
    t.reshape(&[h, w])
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes `[H, W]`, `[1, H, W]` or `[3, H, W]` values (clamped to `[0, 1]`).
/// The container follows the extension: `.png`, `.pgm` or `.ppm`.
pub fn write_image(path: &Path, t: &Tensor, format: PixelFormat) -> Result<()> {
    let (c, h, w) = match t.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err("write_image", format!("{s:?}"))),
    };
    if c != format.channels() {
        return Err(shape_err(
            "write_image",
            format!("{c} channels for format {format}"),
        ));
    }
    let n = h * w;
    let max = format.max_code();
    let d = t.data();
    let (wu, hu) = (w as u32, h as u32);
    let img = match format {
        PixelFormat::Gray8 => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, d.iter().map(|&v| quantize(v, max) as u8).collect())
                .expect("sized buffer"),
        ),
        PixelFormat::Gray16 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, d.iter().map(|&v| quantize(v, max) as u16).collect())
                .expect("sized buffer"),
        ),
        PixelFormat::Rgb8 => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(
                wu,
                hu,
                (0..3 * n).map(|i| quantize(d[(i % 3) * n + i / 3], max) as u8).collect(),
            )
            .expect("sized buffer"),
        ),
        PixelFormat::Rgb16 => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                wu,
                hu,
                (0..3 * n).map(|i| quantize(d[(i % 3) * n + i / 3], max) as u16).collect(),
            )
            .expect("sized buffer"),
        ),
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let fmt = match ext.as_str() {
        "png" => image::ImageFormat::Png,
        "pgm" | "ppm" | "pnm" => image::ImageFormat::Pnm,
        _ => {
            return Err(Error::Invalid(format!(
                "{}: unsupported image extension",
                path.display()
            )))
        }
    };
    img.save_with_format(path, fmt).map_err(image_err(path))
}
