//! Image I/O, luminance conversion, central cropping, normalization and
//! JPEG re-compression.

use std::fmt;
use std::fs;
use std::io::{self, Cursor, Write};
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageError, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Codec that produced (or last touched) an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Codec {
    Jpeg,
    Png,
    Pgm,
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Jpeg => "jpeg",
            Codec::Png => "png",
            Codec::Pgm => "pgm",
        })
    }
}

/// One lossy compression stage. `quality` is `None` when the source file did
/// not say (decoded camera JPEGs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compression {
    pub codec: Codec,
    pub quality: Option<u8>,
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.quality {
            Some(q) => write!(f, "{}{}", self.codec, q),
            None => write!(f, "{}", self.codec),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMeta {
    pub device_id: Option<String>,
    compression_history: Vec<Compression>,
}

impl ImageMeta {
    pub fn for_device(device_id: impl Into<String>) -> Self {
        ImageMeta { device_id: Some(device_id.into()), compression_history: Vec::new() }
    }

    pub fn compression_history(&self) -> &[Compression] {
        &self.compression_history
    }

    /// History is append-only.
    pub fn push_compression(&mut self, stage: Compression) {
        self.compression_history.push(stage);
    }
}

/// Single-channel luminance raster with samples in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    samples: Plane,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(samples: Plane, meta: ImageMeta) -> Result<Self> {
        if samples.rows() == 0 || samples.cols() == 0 {
            return Err(Error::dim("image must be at least 1x1"));
        }
        if !samples.is_finite() {
            return Err(Error::DegenerateInput("image samples must be finite".into()));
        }
        Ok(Image { samples, meta })
    }

    pub fn width(&self) -> usize {
        self.samples.cols()
    }

    pub fn height(&self) -> usize {
        self.samples.rows()
    }

    pub fn samples(&self) -> &Plane {
        &self.samples
    }

    pub fn into_samples(self) -> Plane {
        self.samples
    }

    /// Samples rounded and clamped to 8 bits, row-major.
    pub fn to_u8(&self) -> Vec<u8> {
        self.samples.as_slice().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Side length of a square central crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CropSpec(usize);

impl CropSpec {
    pub const MIN: usize = 8;

    pub fn new(side: usize) -> Result<Self> {
        if side < Self::MIN || side % 2 != 0 {
            return Err(Error::config(format!("crop side must be even and >= {}, got {side}", Self::MIN)));
        }
        Ok(CropSpec(side))
    }

    pub fn side(self) -> usize {
        self.0
    }
}

/// ITU-R BT.601 luma.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn map_image_error(err: ImageError) -> Error {
    match err {
        ImageError::IoError(e) => Error::Io(e),
        ImageError::Unsupported(e) => Error::format(e.to_string()),
        other => {
            let msg = other.to_string();
            if msg.to_ascii_lowercase().contains("eof") || msg.contains("end of") {
                Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, msg))
            } else {
                Error::format(msg)
            }
        }
    }
}

fn plane_from_dynamic(img: &DynamicImage) -> Plane {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            Plane::from_vec(h, w, buf.as_raw().iter().map(|&v| v as f64).collect()).expect("dims")
        }
        DynamicImage::ImageLuma16(buf) => {
            Plane::from_vec(h, w, buf.as_raw().iter().map(|&v| v as f64 / 257.0).collect()).expect("dims")
        }
        other if !other.color().has_color() => {
            let buf = other.to_luma32f();
            Plane::from_vec(h, w, buf.as_raw().iter().map(|&v| v as f64 * 255.0).collect()).expect("dims")
        }
        other => {
            let rgb = other.to_rgb32f();
            let data = rgb
                .as_raw()
                .chunks_exact(3)
                .map(|px| luminance(px[0] as f64, px[1] as f64, px[2] as f64) * 255.0)
                .collect();
            Plane::from_vec(h, w, data).expect("dims")
        }
    }
}

/// Binary (P5) PGM with maxval ≤ 65535.
fn decode_pgm(bytes: &[u8]) -> Result<Plane> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated PGM header")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if next_token(&mut pos)? != "P5" {
        return Err(Error::format("not a binary PGM"));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(&mut pos)?;
        tok.parse().map_err(|_| Error::format(format!("bad PGM {name}: {tok:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM header out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("PGM raster truncated: {} of {need} bytes", raster.len()),
        )));
    }
    let scale = 255.0 / maxval as f64;
    let data = if bytes_per == 1 {
        raster[..need].iter().map(|&v| v as f64 * scale).collect()
    } else {
        raster[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale).collect()
    };
    Plane::from_vec(height, width, data)
}

/// Load PGM (P5), PNG or JPEG as luminance in `[0, 255]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P5") {
        let samples = decode_pgm(bytes)?;
        return Image::new(samples, ImageMeta::default());
    }
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    let format = match reader.format() {
        Some(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => f,
        Some(f) => return Err(Error::format(format!("unsupported image format {f:?}"))),
        None => return Err(Error::format("unrecognized image format")),
    };
    let decoded = reader.decode().map_err(map_image_error)?;
    let mut meta = ImageMeta::default();
    if format == ImageFormat::Jpeg {
        meta.push_compression(Compression { codec: Codec::Jpeg, quality: None });
    }
    Image::new(plane_from_dynamic(&decoded), meta)
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn save_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img))?;
    Ok(())
}

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    Ok(())
}

pub fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>> {
    check_quality(quality)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&img.to_u8(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(map_image_error)?;
    Ok(buf)
}

pub fn save_jpeg(img: &Image, quality: u8, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_jpeg(img, quality)?)?;
    Ok(())
}

/// Central `P x P` region; metadata carried over.
pub fn central_crop(img: &Image, spec: CropSpec) -> Result<Image> {
    let samples = img.samples.central_square(spec.side())?;
    Ok(Image { samples, meta: img.meta.clone() })
}

/// Divide by the population standard deviation.
pub fn normalize_by_std(m: &Plane) -> Result<Plane> {
    if m.is_empty() {
        return Err(Error::EmptyInput("cannot normalize an empty array".into()));
    }
    let std = m.population_std();
    if !(std >= 1e-12) {
        return Err(Error::DegenerateInput(format!("standard deviation {std:e} too small to normalize")));
    }
    Ok(m.scale(1.0 / std))
}

/// JPEG encode at `quality`, decode, and record the stage.
pub fn recompress_jpeg(img: &Image, quality: u8) -> Result<Image> {
    let bytes = encode_jpeg(img, quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg).map_err(map_image_error)?;
    let samples = plane_from_dynamic(&decoded);
    debug_assert_eq!(samples.dims(), img.samples.dims());
    let mut meta = img.meta.clone();
    meta.push_compression(Compression { codec: Codec::Jpeg, quality: Some(quality) });
    Ok(Image { samples, meta })
}
