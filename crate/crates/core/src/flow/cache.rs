//! Binary flow-cache records.
//!
//! Layout, little-endian: `b"LTR3O\0"`, `u16` version, `u32` height,
//! `u32` width, `u32` channels, `u32` occurring index, then
//! `height * width * channels` `f32` values in row-major, channel-interleaved
//! order. Cache entries hold one 3-channel record per candidate; imported
//! flows hold two consecutive 2-channel records per candidate
//! (onset->occurring, then occurring->offset).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::FlowField;
use crate::error::{Error, Result};
use crate::image::Image;

pub const CACHE_MAGIC: &[u8; 6] = b"LTR3O\0";
pub const CACHE_VERSION: u16 = 1;

const HEADER_LEN: usize = 6 + 2 + 4 * 4;

pub fn write_record<W: Write>(w: &mut W, image: &Image, occurring_idx: u32) -> io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + image.data().len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for v in [image.height(), image.width(), image.channels()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&occurring_idx.to_le_bytes());
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record, checking the magic, version and (if given) channel count.
pub fn read_record<R: Read>(r: &mut R, path: &Path, channels: Option<usize>) -> Result<(Image, u32)> {
    let truncated = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::cache(path, "truncated file")
        } else {
            Error::Io(e)
        }
    };
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head[..6]).map_err(truncated)?;
    if &head[..6] != CACHE_MAGIC {
        return Err(Error::cache(path, "not an LTR3O flow cache"));
    }
    r.read_exact(&mut head[6..]).map_err(truncated)?;
    let version = u16::from_le_bytes([head[6], head[7]]);
    if version != CACHE_VERSION {
        return Err(Error::cache(path, format!("version mismatch: file {version}, expected {CACHE_VERSION}")));
    }
    let word = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (h, w, c, occ) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    if let Some(want) = channels {
        if c != want {
            return Err(Error::cache(path, format!("shape mismatch: {c} channels, expected {want}")));
        }
    }
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::cache(path, format!("shape mismatch: implausible {h}x{w}x{c}")))?;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(truncated)?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((Image::from_vec(h, w, c, data)?, occ))
}

fn check_id(sample_id: &str) -> Result<()> {
    if sample_id.is_empty() || sample_id == "." || sample_id == ".." || sample_id.contains(['/', '\\']) {
        return Err(Error::Invalid(format!("sample id `{sample_id}` cannot name a cache entry")));
    }
    Ok(())
}

pub fn cache_entry_path(dir: &Path, sample_id: &str, j: usize) -> PathBuf {
    dir.join(sample_id).join(format!("cand_{j:03}.bin"))
}

pub fn import_entry_path(dir: &Path, sample_id: &str, j: usize) -> PathBuf {
    dir.join(sample_id).join(format!("cand_{j:03}.flow"))
}

/// Writes candidate `j` of `sample_id`. Each entry is its own file, so
/// distinct entries can be written concurrently.
pub fn flow_cache_write(dir: &Path, sample_id: &str, j: usize, image: &Image, occurring_idx: usize) -> Result<PathBuf> {
    check_id(sample_id)?;
    if image.channels() != 3 {
        return Err(Error::Shape(format!("cache entries hold 3-channel images, got {}", image.channels())));
    }
    let path = cache_entry_path(dir, sample_id, j);
    fs::create_dir_all(path.parent().unwrap())?;
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    write_record(&mut f, image, occurring_idx as u32)?;
    f.flush()?;
    Ok(path)
}

pub fn flow_cache_read(dir: &Path, sample_id: &str, j: usize) -> Result<(Image, usize)> {
    check_id(sample_id)?;
    let path = cache_entry_path(dir, sample_id, j);
    let mut f = io::BufReader::new(fs::File::open(&path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            Error::cache(&path, "cache miss")
        } else {
            Error::Io(e)
        }
    })?);
    let (img, occ) = read_record(&mut f, &path, Some(3))?;
    Ok((img, occ as usize))
}

/// Writes an external-flow import entry (two 2-channel records).
pub fn write_import(
    dir: &Path,
    sample_id: &str,
    j: usize,
    onset_to_occ: &FlowField,
    occ_to_offset: &FlowField,
    occurring_idx: usize,
) -> Result<PathBuf> {
    check_id(sample_id)?;
    let path = import_entry_path(dir, sample_id, j);
    fs::create_dir_all(path.parent().unwrap())?;
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    write_record(&mut f, onset_to_occ.as_image(), occurring_idx as u32)?;
    write_record(&mut f, occ_to_offset.as_image(), occurring_idx as u32)?;
    f.flush()?;
    Ok(path)
}

/// Returns `None` when the entry does not exist.
pub fn read_import(dir: &Path, sample_id: &str, j: usize) -> Result<Option<(FlowField, FlowField, usize)>> {
    check_id(sample_id)?;
    let path = import_entry_path(dir, sample_id, j);
    let file = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut r = io::BufReader::new(file);
    let (a, occ) = read_record(&mut r, &path, Some(2))?;
    let (b, _) = read_record(&mut r, &path, Some(2))?;
    if a.shape() != b.shape() {
        return Err(Error::cache(&path, "shape mismatch between the two flow records"));
    }
    Ok(Some((FlowField::from_image(a)?, FlowField::from_image(b)?, occ as usize)))
}
