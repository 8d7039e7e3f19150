//! On-disk artifacts: PFM float maps, CSV reports, JSON documents and the
//! per-directory digest manifest.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pfm_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PFM",
        reason: reason.into(),
    }
}

/// Writes an `[H, W]` map as grayscale `Pf` or an `[H, W, 3]` map as colour
/// `PF`, little-endian (scale −1.0). Rows are stored bottom to top.
pub fn write_pfm(t: &Tensor, mut w: impl Write) -> Result<()> {
    let (h, wd, c) = match t.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, 3] => (*h, *w, 3),
        s => return Err(pfm_err(format!("cannot store shape {s:?}"))),
    };
    let tag = if c == 1 { "Pf" } else { "PF" };
    write!(w, "{tag}\n{wd} {h}\n-1.0\n")?;
    let row_len = wd * c;
    let mut buf = Vec::with_capacity(h * row_len * 4);
    for i in (0..h).rev() {
        for v in &t.data()[i * row_len..(i + 1) * row_len] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm(r: impl Read) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<_>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(pfm_err("truncated header"));
        }
        Ok(line.trim().to_string())
    };
    let channels = match next(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(pfm_err(format!("bad magic `{other}`"))),
    };
    let dims = next(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(pfm_err(format!("bad dimensions `{dims}`"))),
    };
    let scale: f64 = next(&mut r)?.parse().map_err(|_| pfm_err("bad scale"))?;
    let little = scale < 0.0;
    let row_len = w * channels;
    let mut bytes = vec![0u8; h * row_len * 4];
    r.read_exact(&mut bytes).map_err(|_| pfm_err("truncated data"))?;
    let mut data = vec![0.0; h * row_len];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (k / row_len, k % row_len);
        data[(h - 1 - row) * row_len + col] = v as f64;
    }
    let shape = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    Tensor::new(shape, data)
}

pub fn save_pfm(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pfm(t, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Tensor> {
    read_pfm(fs::File::open(path)?)
}

/// Writes serializable rows as CSV; the header comes from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a CSV with an explicit header, for reports whose rows may be empty.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        k => Error::Format {
            format: "CSV",
            reason: format!("{k:?}"),
        },
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests every file under `dir` except the manifest itself, sorted by path.
pub fn build_manifest(dir: &Path) -> Result<Manifest> {
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    let mut files = Vec::new();
    for p in paths {
        let rel = p.strip_prefix(dir).expect("under dir");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let bytes = fs::read(&p)?;
        files.push(ManifestEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { files })
}

pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let m = build_manifest(dir)?;
    write_json(&dir.join(MANIFEST_NAME), &m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trips_gray_and_colour() {
        let g = Tensor::new(vec![3, 5], (0..15).map(|v| v as f64 * 0.25).collect()).unwrap();
        let c = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64 - 6.0).collect()).unwrap();
        for t in [g, c] {
            let mut buf = Vec::new();
            write_pfm(&t, &mut buf).unwrap();
            assert_eq!(read_pfm(&buf[..]).unwrap(), t);
        }
    }

    #[test]
    fn pfm_header_is_little_endian_grayscale() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm(&t, &mut buf).unwrap();
        assert!(buf.starts_with(b"Pf\n1 2\n-1.0\n"));
        // Bottom row first.
        assert_eq!(&buf[buf.len() - 8..buf.len() - 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_rejects_garbage() {
        assert!(read_pfm(&b"P6\n1 1\n255\n"[..]).is_err());
        assert!(read_pfm(&b"Pf\n2 2\n-1.0\n\0\0"[..]).is_err());
        assert!(write_pfm(&Tensor::zeros(&[2, 2, 2]), Vec::new()).is_err());
    }

    #[test]
    fn manifest_lists_files_sorted_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "bee").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub").join("a.txt"), "a").unwrap();
        let m = write_manifest(dir.path()).unwrap();
        let names: Vec<_> = m.files.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(names, ["b.txt", "sub/a.txt"]);
        assert_eq!(m.files[1].sha256, sha256_hex(b"a"));
        // Rebuilding ignores the manifest file itself.
        assert_eq!(build_manifest(dir.path()).unwrap(), m);
    }
}
