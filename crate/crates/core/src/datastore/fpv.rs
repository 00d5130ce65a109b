//! FPV1: the bit-exact on-disk volume container.
//!
//! Layout: 4-byte magic `FPV1`; three little-endian u32 dims D,H,W; one
//! flags byte (bit 0: labels present); one style code byte; six reserved
//! zero bytes; then D·H·W little-endian f32 voxels and, when flagged,
//! D·H·W u8 labels. The header is exactly 24 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModalityStyle, Volume};
use crate::error::{Error, ParseError, Result};

pub const FPV_MAGIC: &[u8; 4] = b"FPV1";
pub const FPV_HEADER_LEN: usize = 24;

const FLAG_LABELS: u8 = 0b1;
const MAX_VOXELS: u64 = 1 << 31;

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    if vol.voxels.len() != vol.voxel_count() {
        return Err(Error::Data(format!(
            "refusing to write volume {}: voxel buffer does not match dims",
            vol.scan_id
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FPV_MAGIC)?;
    for d in [vol.d, vol.h, vol.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let flags = if vol.labels.is_some() { FLAG_LABELS } else { 0 };
    w.write_all(&[flags, vol.style.code(), 0, 0, 0, 0, 0, 0])?;
    for &v in &vol.voxels {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &vol.labels {
        w.write_all(labels)?;
    }
    w.flush()?;
    Ok(())
}

/// Decoded FPV1 header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeHeader {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub has_labels: bool,
    pub style: ModalityStyle,
}

fn parse_header(header: &[u8; FPV_HEADER_LEN]) -> Result<VolumeHeader> {
    if &header[0..4] != FPV_MAGIC {
        return Err(ParseError::BadMagic {
            expected: String::from_utf8_lossy(FPV_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&header[0..4]).into_owned(),
        }
        .into());
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as u64;
    let (d, h, w) = (dim(4), dim(8), dim(12));
    let numel = d.saturating_mul(h).saturating_mul(w);
    if d == 0 || h == 0 || w == 0 {
        return Err(ParseError::Header(format!("zero dimension in {d}x{h}x{w}")).into());
    }
    if numel > MAX_VOXELS {
        return Err(ParseError::DimsOverflow(format!("{d}x{h}x{w} = {numel} voxels")).into());
    }
    let style = ModalityStyle::from_code(header[17])?;
    Ok(VolumeHeader {
        d: d as usize,
        h: h as usize,
        w: w as usize,
        has_labels: header[16] & FLAG_LABELS != 0,
        style,
    })
}

/// Read only the 24-byte header.
pub fn read_volume_header(path: &Path) -> Result<VolumeHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; FPV_HEADER_LEN];
    read_or_truncated(&mut r, &mut header)?;
    parse_header(&header)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; FPV_HEADER_LEN];
    read_or_truncated(&mut r, &mut header)?;
    let hd = parse_header(&header)?;
    let (d, h, w) = (hd.d, hd.h, hd.w);
    let numel = d * h * w;

    let mut voxels = vec![0f32; numel];
    let mut buf = [0u8; 4];
    for v in voxels.iter_mut() {
        read_or_truncated(&mut r, &mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    let labels = if hd.has_labels {
        let mut l = vec![0u8; numel];
        read_or_truncated(&mut r, &mut l)?;
        Some(l)
    } else {
        None
    };
    Ok(Volume { d, h, w, voxels, labels, style: hd.style, scan_id: 0 })
}

fn read_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse(ParseError::Truncated { needed: buf.len() as u64, found: 0 })
        } else {
            Error::Io(e)
        }
    })
}
