//! Model file: `b"PCNW"`, `u8` version, architecture as `u32`s
//! (`input_channels`, `n_convs`, then `out_channels, kernel, stride` per
//! conv), then every parameter block as little-endian `f32` in
//! declaration order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ArchDescriptor, ConvSpec, PcnModel};

pub const MODEL_MAGIC: &[u8; 4] = b"PCNW";
pub const MODEL_VERSION: u8 = 1;

const MAX_LAYERS: u32 = 64;
const MAX_DIM: u32 = 1 << 16;

pub fn write_model(out: &mut impl Write, model: &PcnModel<f32>) -> Result<()> {
    let arch = model.arch();
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&[MODEL_VERSION])?;
    out.write_all(&(arch.input_channels as u32).to_le_bytes())?;
    out.write_all(&(arch.convs.len() as u32).to_le_bytes())?;
    for c in &arch.convs {
        for v in [c.out_channels, c.kernel, c.stride] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    let mut buf = Vec::with_capacity(model.parameter_count() * 4);
    for seg in model.segments() {
        for v in seg {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn bounded(r: &mut impl Read, what: &str, max: u32) -> Result<usize> {
    let v = read_u32(r)?;
    if v == 0 || v > max {
        return Err(Error::format(format!("corrupt model header: {what} = {v}")));
    }
    Ok(v as usize)
}

/// Read a model and insist that nothing follows it.
pub fn read_model(r: &mut impl Read) -> Result<PcnModel<f32>> {
    let model = read_model_prefix(r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("trailing bytes after the parameter block"));
    }
    Ok(model)
}

/// Read a model, leaving any following bytes unread.
pub(crate) fn read_model_prefix(r: &mut impl Read) -> Result<PcnModel<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected \"PCNW\"")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != MODEL_VERSION {
        return Err(Error::format(format!("unsupported model version {} (expected {MODEL_VERSION})", version[0])));
    }
    let input_channels = bounded(r, "input channels", MAX_DIM)?;
    let n_convs = bounded(r, "layer count", MAX_LAYERS)?;
    let mut convs = Vec::with_capacity(n_convs);
    for _ in 0..n_convs {
        convs.push(ConvSpec {
            out_channels: bounded(r, "channels", MAX_DIM)?,
            kernel: bounded(r, "kernel", 64)?,
            stride: bounded(r, "stride", 64)?,
        });
    }
    let arch = ArchDescriptor { input_channels, convs };
    arch.validate().map_err(|e| Error::format(format!("corrupt architecture: {e}")))?;
    let mut model = PcnModel::<f32>::zeros(arch)?;
    let expected = model.parameter_count() * 4;
    let mut raw = Vec::with_capacity(expected);
    r.take(expected as u64).read_to_end(&mut raw)?;
    if raw.len() != expected {
        return Err(Error::format(format!(
            "parameter block is {} bytes, architecture needs {expected}",
            raw.len()
        )));
    }
    let mut values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for seg in model.segments_mut() {
        for v in seg.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

pub fn save_model(model: &PcnModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PcnModel<f32>> {
    let bytes = fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

/// Load and insist on a specific architecture.
pub fn load_model_expecting(path: impl AsRef<Path>, arch: &ArchDescriptor) -> Result<PcnModel<f32>> {
    let model = load_model(path)?;
    if model.arch() != arch {
        return Err(Error::config(format!(
            "model architecture {:?} does not match the expected {:?}",
            model.arch(),
            arch
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(model: &PcnModel<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(&mut buf, model).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = PcnModel::<f32>::init(ArchDescriptor::default(), 11).unwrap();
        let buf = bytes(&model);
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn rejects_corruption() {
        let model = PcnModel::<f32>::init(ArchDescriptor::default(), 1).unwrap();
        let buf = bytes(&model);

        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));

        // first conv's channel count: 32 -> 33 changes the expected blob length
        let mut bad = buf.clone();
        bad[13] = 33;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_model(&mut long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn arch_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pcnw");
        save_model(&PcnModel::<f32>::init(ArchDescriptor::default(), 2).unwrap(), &path).unwrap();
        let mut other = ArchDescriptor::default();
        other.convs[0].out_channels = 16;
        assert!(matches!(load_model_expecting(&path, &other), Err(Error::Config(_))));
        assert!(load_model_expecting(&path, &ArchDescriptor::default()).is_ok());
    }
}
