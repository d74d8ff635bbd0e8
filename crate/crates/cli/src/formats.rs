//! Binary dataset and checkpoint files, PPM images and CSV tables.
//!
//! All multi-byte integers and floats are little-endian.

use std::fs;
use std::path::Path;

use mp3_core::data::ImageDataset;
use mp3_core::finetune::{Checkpoint, Phase};
use mp3_core::{ModelConfig, ModelParams, PeMode, Tensor};

use crate::error::{CliError, Result};

pub const DATA_MAGIC: &[u8; 8] = b"MP3DATA1";
pub const CKPT_MAGIC: &[u8; 8] = b"MP3CKPT1";
pub const CKPT_VERSION: u32 = 1;
const CONFIG_FIELDS: u32 = 13;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, at: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CliError::format(
                self.path,
                format!("truncated at byte {}", self.at),
            ));
        };
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(CliError::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.at),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, path: &Path) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| CliError::format(path, format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn encode_dataset(ds: &ImageDataset, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + ds.pixels.len() + 4 * ds.count);
    out.extend_from_slice(DATA_MAGIC);
    for v in [ds.count, ds.height, ds.width, ds.channels, ds.class_count] {
        put_u32(&mut out, v, path)?;
    }
    out.extend_from_slice(&ds.pixels);
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<ImageDataset> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != DATA_MAGIC {
        return Err(CliError::format(path, "not a dataset file (bad magic)"));
    }
    let (count, height, width, channels, class_count) =
        (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let len = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| CliError::format(path, "image dimensions overflow"))?;
    let pixels = r.take(len)?.to_vec();
    let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_count) {
        return Err(CliError::format(
            path,
            format!("label {bad} >= class count {class_count}"),
        ));
    }
    Ok(ImageDataset::new(
        height,
        width,
        channels,
        class_count,
        pixels,
        labels,
    )?)
}

pub fn save_dataset(ds: &ImageDataset, path: &Path) -> Result<()> {
    write(path, &encode_dataset(ds, path)?)
}

pub fn load_dataset(path: &Path) -> Result<ImageDataset> {
    decode_dataset(&read(path)?, path)
}

// ---- checkpoints -----------------------------------------------------------

/// The f64 nearest to the shortest decimal form of `v`, so `1e-6f32` loads as `1e-6`.
fn widen(v: f32) -> f64 {
    v.to_string().parse().expect("float display parses")
}

pub fn encode_checkpoint(ck: &Checkpoint<f32>, path: &Path) -> Result<Vec<u8>> {
    let c = &ck.config;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&CONFIG_FIELDS.to_le_bytes());
    for v in [
        c.depth,
        c.heads,
        c.width,
        c.mlp_ratio,
        c.patch_dim,
        c.num_positions,
        c.pe_mode.code() as usize,
        c.class_count,
        c.grid_rows,
        c.grid_cols,
    ] {
        put_u32(&mut out, v, path)?;
    }
    out.extend_from_slice(&(c.ln_eps as f32).to_le_bytes());
    put_u32(&mut out, ck.step, path)?;
    put_u32(&mut out, ck.phase.code() as usize, path)?;
    put_u32(&mut out, ck.params.len(), path)?;
    for (name, t) in ck.params.iter() {
        let nb = name.as_bytes();
        let nl =
            u16::try_from(nb.len()).map_err(|_| CliError::format(path, "tensor name too long"))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(nb);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| CliError::format(path, "tensor rank too large"))?;
        out.push(rank);
        for &d in t.shape() {
            put_u32(&mut out, d, path)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint<f32>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != CKPT_MAGIC {
        return Err(CliError::format(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let fields = r.u32()?;
    if fields != CONFIG_FIELDS {
        return Err(CliError::format(
            path,
            format!("expected {CONFIG_FIELDS} config fields, found {fields}"),
        ));
    }
    let mut u = [0usize; 10];
    for v in &mut u {
        *v = r.usize()?;
    }
    let ln_eps = widen(r.f32()?);
    let config = ModelConfig {
        depth: u[0],
        heads: u[1],
        width: u[2],
        mlp_ratio: u[3],
        patch_dim: u[4],
        num_positions: u[5],
        pe_mode: PeMode::from_code(u[6] as u32)?,
        class_count: u[7],
        grid_rows: u[8],
        grid_cols: u[9],
        ln_eps,
    };
    config.validate()?;
    let step = r.usize()?;
    let phase = Phase::from_code(r.u32()?)?;
    let count = r.usize()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let nl = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| CliError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if params.contains(&name) {
            return Err(CliError::format(path, format!("duplicate tensor {name:?}")));
        }
        params.insert(&name, Tensor::new(&shape, data)?);
    }
    r.finish()?;
    params.check_encoder(&config)?;
    Ok(Checkpoint {
        config,
        params,
        step,
        phase,
    })
}

pub fn save_checkpoint(ck: &Checkpoint<f32>, path: &Path) -> Result<()> {
    write(path, &encode_checkpoint(ck, path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    decode_checkpoint(&read(path)?, path)
}

// ---- images and tables -----------------------------------------------------

/// Binary PPM (P6). Single-channel images are written as gray RGB.
pub fn encode_ppm(pixels: &[u8], height: usize, width: usize, channels: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    match channels {
        3 => out.extend_from_slice(pixels),
        _ => {
            for px in pixels.chunks_exact(channels.max(1)) {
                out.extend_from_slice(&[px[0]; 3]);
            }
        }
    }
    out
}

pub fn save_ppm(
    path: &Path,
    pixels: &[u8],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<()> {
    write(path, &encode_ppm(pixels, height, width, channels))
}

/// Parses a P6 file as written by [`encode_ppm`]: returns `(height, width, rgb)`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(CliError::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(CliError::format(path, "only 8-bit P6 images are supported"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CliError::format(path, "bad PPM size"))
    };
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = &bytes[(at + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(CliError::format(path, "PPM payload size mismatch"));
    }
    Ok((h, w, body.to_vec()))
}

/// Writes a CSV table with a header row.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_recovers_decimal() {
        assert_eq!(widen(1e-6f32), 1e-6);
        assert_eq!(widen(0.5), 0.5);
    }

    #[test]
    fn ppm_round_trip_and_gray() {
        let p = Path::new("x.ppm");
        let rgb: Vec<u8> = (0..12).collect();
        let (h, w, back) = decode_ppm(&encode_ppm(&rgb, 2, 2, 3), p).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(back, rgb);
        let gray = encode_ppm(&[7, 9], 1, 2, 1);
        assert_eq!(&gray[gray.len() - 6..], &[7, 7, 7, 9, 9, 9]);
    }

    #[test]
    fn truncated_dataset_rejected() {
        let ds = mp3_core::data::synth_dataset("two-shapes", 2, 4, 4, 0).unwrap();
        let p = Path::new("d.bin");
        let bytes = encode_dataset(&ds, p).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_dataset(&extra, p).is_err());
        assert_eq!(decode_dataset(&bytes, p).unwrap(), ds);
    }
}
