//! Binary weight files.
//!
//! Layout: magic `LTTO`, version `u32`, then for each tensor until EOF:
//! name length `u32`, UTF-8 name, rank `u32`, extents as `u64`, and the
//! data as little-endian `f64`. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DepthModel, Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LTTO";
const VERSION: u32 = 1;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "LTTO weights",
        reason: reason.into(),
    }
}

fn named_tensors(model: &DepthModel) -> Vec<(String, &Tensor)> {
    let layers = model
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("encoder.{i}"), l))
        .chain(model.stages.iter().enumerate().map(|(i, l)| (format!("decoder.{i}"), l)))
        .chain(std::iter::once(("head".to_string(), &model.head)));
    layers
        .flat_map(|(p, l)| [(format!("{p}.weight"), &l.weight), (format!("{p}.bias"), &l.bias)])
        .collect()
}

pub fn write_weights(model: &DepthModel, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in named_tensors(model) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(format_err("truncated integer"))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(format!("truncated {what}")))
}

pub fn read_weights(mut r: impl Read) -> Result<DepthModel> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = read_u32(&mut r)?.ok_or_else(|| format_err("missing version"))?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    while let Some(name_len) = read_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| format_err("non-UTF-8 name"))?;
        let rank = read_u32(&mut r)?.ok_or_else(|| format_err("missing rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut r, &mut b, "extent")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_exact_or(&mut r, &mut raw, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    assemble(tensors)
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<DepthModel> {
    let mut lookup: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut take_layer = |prefix: &str| -> Option<Result<Linear>> {
        let w = lookup.remove(&format!("{prefix}.weight"))?;
        let b = match lookup.remove(&format!("{prefix}.bias")) {
            Some(b) => b,
            None => return Some(Err(format_err(format!("{prefix} has no bias")))),
        };
        if w.rank() != 2 || b.shape() != [w.rows()] {
            return Some(Err(format_err(format!("{prefix} has inconsistent shapes"))));
        }
        Some(Ok(Linear { weight: w, bias: b }))
    };
    let mut encoder = Vec::new();
    while let Some(l) = take_layer(&format!("encoder.{}", encoder.len())) {
        encoder.push(l?);
    }
    let mut stages = Vec::new();
    while let Some(l) = take_layer(&format!("decoder.{}", stages.len())) {
        stages.push(l?);
    }
    let head = take_layer("head").ok_or_else(|| format_err("missing head"))??;
    if encoder.is_empty() || stages.is_empty() {
        return Err(format_err("missing encoder or decoder layers"));
    }
    if let Some(extra) = lookup.keys().next() {
        return Err(format_err(format!("unexpected tensor `{extra}`")));
    }
    let patch_in = encoder[0].c_in();
    let patch_size = ((patch_in / 3) as f64).sqrt().round() as usize;
    if 3 * patch_size * patch_size != patch_in {
        return Err(format_err("encoder input width is not 3·p²"));
    }
    let chain = encoder.iter().chain(&stages).chain(std::iter::once(&head));
    let mut prev = patch_in;
    for (i, l) in chain.enumerate() {
        if l.c_in() != prev {
            return Err(format_err("layer widths do not chain"));
        }
        prev = if i == 0 { 2 * l.c_out() } else { l.c_out() };
    }
    if head.c_out() != 1 {
        return Err(format_err("head must output one channel"));
    }
    let config = ModelConfig {
        patch_size,
        encoder_widths: encoder.iter().map(Linear::c_out).collect(),
        decoder_widths: stages.iter().map(Linear::c_out).collect(),
    };
    Ok(DepthModel::from_parts(config, encoder, stages, head))
}

pub fn save_weights(model: &DepthModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<DepthModel> {
    read_weights(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = DepthModel::init(ModelConfig::default(), 11).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LTTO");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corrupt_files() {
        let m = DepthModel::init(ModelConfig::default(), 11).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert!(read_weights(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_weights(bad.as_slice()).is_err());
    }
}
