//! Maximum-likelihood PRNU estimation and the binary fingerprint container.
//!
//! Container layout, all little-endian:
//!
//! | field      | type                  |
//! |------------|-----------------------|
//! | magic      | `b"PRNU"`             |
//! | version    | `u8` (= 1)            |
//! | height     | `u32`                 |
//! | width      | `u32`                 |
//! | n_images   | `u32`                 |
//! | flags      | `u8`                  |
//! | samples    | `height * width` `f32`, row-major |
//! | id length  | `u32`                 |
//! | device id  | UTF-8 bytes           |
//!
//! Residuals use the same container with [`FLAG_RESIDUAL`] set.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{Image, ImageMeta};
use crate::plane::{KahanSum, Plane};
use crate::residual::{extract_residual, zero_mean_plane, DenoiserConfig, NoiseResidual};

pub const MAGIC: &[u8; 4] = b"PRNU";
pub const VERSION: u8 = 1;
pub const FLAG_ZERO_MEANED: u8 = 0b01;
pub const FLAG_RESIDUAL: u8 = 0b10;

/// Guards the per-pixel division where every image is black.
pub const ESTIMATOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FingerprintFlags {
    pub zero_meaned: bool,
}

/// Estimated PRNU of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub device_id: String,
    pub k: Plane,
    pub n_images: u32,
    pub flags: FingerprintFlags,
}

impl Fingerprint {
    pub fn dims(&self) -> (usize, usize) {
        self.k.dims()
    }

    pub fn central_crop(&self, side: usize) -> Result<Fingerprint> {
        Ok(Fingerprint { k: self.k.central_square(side)?, ..self.clone() })
    }
}

fn to_f32_precision(p: &Plane) -> Plane {
    p.map(|v| v as f32 as f64)
}

/// Accumulate `sum W_i I_i` and `sum I_i^2` per pixel, then divide.
///
/// Summation is compensated so the estimate does not depend on the order
/// of `images` beyond the last few ulps. The result is zero-meaned and
/// rounded to the `f32` storage precision of the container.
pub fn estimate_prnu(device_id: &str, images: &[Image], cfg: &DenoiserConfig) -> Result<Fingerprint> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("no images to estimate from".into()))?;
    let dims = first.samples().dims();
    if let Some(bad) = images.iter().find(|img| img.samples().dims() != dims) {
        return Err(Error::dim(format!(
            "mixed image sizes: {}x{} vs {}x{}",
            dims.0,
            dims.1,
            bad.height(),
            bad.width()
        )));
    }
    let residuals = images
        .par_iter()
        .map(|img| extract_residual(img, cfg).map(|w| w.values))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Plane, &Plane)> = residuals.iter().zip(images.iter().map(Image::samples)).collect();
    Ok(estimate_from_residuals(device_id, &pairs))
}

/// Estimator core on precomputed `(W_i, I_i)` pairs.
pub fn estimate_from_residuals(device_id: &str, pairs: &[(&Plane, &Plane)]) -> Fingerprint {
    let (rows, cols) = pairs[0].0.dims();
    let n = rows * cols;
    let mut num = vec![KahanSum::default(); n];
    let mut den = vec![KahanSum::default(); n];
    for (w, img) in pairs {
        for (i, (&wv, &iv)) in w.as_slice().iter().zip(img.as_slice()).enumerate() {
            num[i].add(wv * iv);
            den[i].add(iv * iv);
        }
    }
    let raw = Plane::from_vec(
        rows,
        cols,
        num.iter().zip(&den).map(|(a, b)| a.value() / (b.value() + ESTIMATOR_EPS)).collect(),
    )
    .expect("dims");
    Fingerprint {
        device_id: device_id.to_string(),
        k: to_f32_precision(&zero_mean_plane(&raw)),
        n_images: pairs.len() as u32,
        flags: FingerprintFlags { zero_meaned: true },
    }
}

struct Container {
    flags: u8,
    n_images: u32,
    values: Plane,
    id: String,
}

fn write_container(out: &mut impl Write, c: &Container) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&(c.values.rows() as u32).to_le_bytes())?;
    out.write_all(&(c.values.cols() as u32).to_le_bytes())?;
    out.write_all(&c.n_images.to_le_bytes())?;
    out.write_all(&[c.flags])?;
    let mut buf = Vec::with_capacity(c.values.len() * 4);
    for &v in c.values.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.write_all(&(c.id.len() as u32).to_le_bytes())?;
    out.write_all(c.id.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_container(r: &mut impl Read) -> Result<Container> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected \"PRNU\"")));
    }
    let version = read_u8(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported container version {version} (expected {VERSION})")));
    }
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let n_images = read_u32(r)?;
    let flags = read_u8(r)?;
    let count = rows
        .checked_mul(cols)
        .filter(|&n| n <= (1 << 32))
        .ok_or_else(|| Error::format(format!("implausible dimensions {rows}x{cols}")))?;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let id_len = read_u32(r)? as usize;
    let mut id = Vec::new();
    r.take(id_len as u64).read_to_end(&mut id)?;
    if id.len() != id_len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated device id").into());
    }
    let id = String::from_utf8(id).map_err(|_| Error::format("device id is not UTF-8"))?;
    Ok(Container { flags, n_images, values: Plane::from_vec(rows, cols, data)?, id })
}

pub fn write_fingerprint(out: &mut impl Write, fp: &Fingerprint) -> Result<()> {
    let flags = if fp.flags.zero_meaned { FLAG_ZERO_MEANED } else { 0 };
    write_container(out, &Container { flags, n_images: fp.n_images, values: fp.k.clone(), id: fp.device_id.clone() })?;
    Ok(())
}

pub fn read_fingerprint(r: &mut impl Read) -> Result<Fingerprint> {
    let c = read_container(r)?;
    if c.flags & FLAG_RESIDUAL != 0 {
        return Err(Error::format("file holds a residual, not a fingerprint"));
    }
    Ok(Fingerprint {
        device_id: c.id,
        k: c.values,
        n_images: c.n_images,
        flags: FingerprintFlags { zero_meaned: c.flags & FLAG_ZERO_MEANED != 0 },
    })
}

pub fn save_fingerprint(fp: &Fingerprint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_fingerprint(&mut buf, fp)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_fingerprint(path: impl AsRef<Path>) -> Result<Fingerprint> {
    let bytes = fs::read(path)?;
    read_fingerprint(&mut bytes.as_slice())
}

/// Residual values are stored at `f32` precision.
pub fn save_residual(res: &NoiseResidual, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    let c = Container {
        flags: FLAG_RESIDUAL | FLAG_ZERO_MEANED,
        n_images: 1,
        values: res.values.clone(),
        id: res.source_meta.device_id.clone().unwrap_or_default(),
    };
    write_container(&mut buf, &c)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_residual(path: impl AsRef<Path>) -> Result<NoiseResidual> {
    let bytes = fs::read(path)?;
    let c = read_container(&mut bytes.as_slice())?;
    if c.flags & FLAG_RESIDUAL == 0 {
        return Err(Error::format("file holds a fingerprint, not a residual"));
    }
    let meta = if c.id.is_empty() { ImageMeta::default() } else { ImageMeta::for_device(c.id) };
    Ok(NoiseResidual::new(c.values, meta))
}

/// Ordered collection of fingerprints with unique device ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FingerprintDb {
    entries: Vec<Fingerprint>,
}

impl FingerprintDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, fp: Fingerprint) -> Result<()> {
        if self.entries.iter().any(|e| e.device_id == fp.device_id) {
            return Err(Error::Duplicate(format!("device id {:?} already present", fp.device_id)));
        }
        self.entries.push(fp);
        Ok(())
    }

    pub fn from_entries(entries: impl IntoIterator<Item = Fingerprint>) -> Result<Self> {
        let mut db = FingerprintDb::new();
        for fp in entries {
            db.add(fp)?;
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Fingerprint] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.device_id.as_str()).collect()
    }

    pub fn get(&self, device_id: &str) -> Option<&Fingerprint> {
        self.entries.iter().find(|e| e.device_id == device_id)
    }

    pub fn position(&self, device_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.device_id == device_id)
    }

    /// Keep only the listed ids, in the order given.
    pub fn subset(&self, ids: &[&str]) -> Result<FingerprintDb> {
        let mut out = FingerprintDb::new();
        for id in ids {
            let fp = self.get(id).ok_or_else(|| Error::config(format!("unknown device id {id:?}")))?;
            out.add(fp.clone())?;
        }
        Ok(out)
    }

    /// Central-crop every fingerprint to `side x side`; order is kept.
    pub fn crop_all(&self, side: usize) -> Result<FingerprintDb> {
        let entries = self.entries.iter().map(|fp| fp.central_crop(side)).collect::<Result<Vec<_>>>()?;
        Ok(FingerprintDb { entries })
    }

    /// One `<device_id>.prnu` file per entry.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for fp in &self.entries {
            save_fingerprint(fp, dir.join(format!("{}.prnu", fp.device_id)))?;
        }
        Ok(())
    }

    /// Load every `*.prnu` file in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<FingerprintDb> {
        let mut paths: Vec<_> = fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "prnu"))
            .collect();
        paths.sort();
        let mut seen = HashSet::new();
        let mut db = FingerprintDb::new();
        for p in paths {
            let fp = load_fingerprint(&p)?;
            if !seen.insert(fp.device_id.clone()) {
                return Err(Error::Duplicate(format!("device id {:?} in {}", fp.device_id, p.display())));
            }
            db.add(fp)?;
        }
        Ok(db)
    }
}
