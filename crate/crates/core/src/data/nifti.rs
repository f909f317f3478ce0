//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what the pipeline needs: 3D (or 4D with one frame) scalar volumes,
//! voxel spacing from `pixdim`, and intensity scaling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, IoContext, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

/// Voxel values in file order (x fastest), with sizes and spacing per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    /// `(nx, ny, nz)`.
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let mut raw = Vec::new();
    let f = File::open(path).at(path)?;
    if is_gz(path) {
        GzDecoder::new(BufReader::new(f))
            .read_to_end(&mut raw)
            .at(path)?;
    } else {
        BufReader::new(f).read_to_end(&mut raw).at(path)?;
    }
    parse_nifti(path, &raw)
}

fn parse_nifti(path: &Path, raw: &[u8]) -> Result<NiftiVolume> {
    if raw.len() < HEADER_SIZE {
        return Err(format_err(path, "shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(path, raw)
    } else if BigEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(path, raw)
    } else {
        Err(format_err(path, "sizeof_hdr is not 348"))
    }
}

fn parse_with<E: ByteOrder>(path: &Path, raw: &[u8]) -> Result<NiftiVolume> {
    let magic = &raw[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(format_err(path, "missing NIfTI-1 magic"));
    }
    let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&raw[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(2..=4).contains(&ndim) {
        return Err(format_err(path, format!("unsupported dimensionality {ndim}")));
    }
    if ndim == 4 && dim[4] > 1 {
        return Err(format_err(path, "4D volumes with more than one frame"));
    }
    let size = |i: usize| -> usize {
        if (i as i16) <= ndim {
            dim[i].max(1) as usize
        } else {
            1
        }
    };
    let dims = [size(1), size(2), size(3)];
    let datatype = E::read_i16(&raw[70..]);
    let pix: Vec<f32> = (0..8).map(|i| E::read_f32(&raw[76 + 4 * i..])).collect();
    let spacing = [pix[1] as f64, pix[2] as f64, if ndim >= 3 { pix[3] as f64 } else { 1.0 }];
    let offset = (E::read_f32(&raw[108..]) as usize).max(HEADER_SIZE);
    let slope = E::read_f32(&raw[112..]) as f64;
    let inter = E::read_f32(&raw[116..]) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, inter)
    };

    let count = dims.iter().product::<usize>();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported datatype {other}"))),
    };
    let body = raw
        .get(offset..offset + count * width)
        .ok_or_else(|| format_err(path, "voxel data truncated"))?;
    let data = (0..count)
        .map(|i| {
            let b = &body[i * width..];
            let v = match datatype {
                DT_UINT8 => b[0] as f64,
                DT_INT8 => b[0] as i8 as f64,
                DT_INT16 => E::read_i16(b) as f64,
                DT_UINT16 => E::read_u16(b) as f64,
                DT_INT32 => E::read_i32(b) as f64,
                DT_FLOAT32 => E::read_f32(b) as f64,
                _ => E::read_f64(b),
            };
            v * slope + inter
        })
        .collect();
    Ok(NiftiVolume {
        dims,
        spacing,
        data,
    })
}

/// Element type used when writing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoredType {
    U8,
    F32,
}

/// Write a little-endian NIfTI-1 file; gzip-compressed when the path ends
/// in `.gz`.
pub fn write_nifti(path: &Path, vol: &NiftiVolume, stored: StoredType) -> Result<()> {
    let count: usize = vol.dims.iter().product();
    if vol.data.len() != count {
        return Err(Error::Shape(format!(
            "{} voxels for dims {:?}",
            vol.data.len(),
            vol.dims
        )));
    }
    let mut buf = Cursor::new(Vec::with_capacity(DATA_OFFSET + count * 4));
    let mut hdr = [0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    let dim = [3i16, vol.dims[0] as i16, vol.dims[1] as i16, vol.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    let (dt, bitpix) = match stored {
        StoredType::U8 => (DT_UINT8, 8),
        StoredType::F32 => (DT_FLOAT32, 32),
    };
    LittleEndian::write_i16(&mut hdr[70..], dt);
    LittleEndian::write_i16(&mut hdr[72..], bitpix);
    let pix = [1.0f32, vol.spacing[0] as f32, vol.spacing[1] as f32, vol.spacing[2] as f32, 1.0, 0.0, 0.0, 0.0];
    for (i, p) in pix.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    hdr[123] = 10; // xyzt_units: mm, s
    hdr[344..348].copy_from_slice(b"n+1\0");
    buf.write_all(&hdr).at(path)?;
    buf.write_all(&[0u8; DATA_OFFSET - HEADER_SIZE]).at(path)?;
    for &v in &vol.data {
        match stored {
            StoredType::U8 => buf.write_u8(v as u8).at(path)?,
            StoredType::F32 => buf.write_f32::<LittleEndian>(v as f32).at(path)?,
        }
    }
    let bytes = buf.into_inner();
    let f = BufWriter::new(File::create(path).at(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(f, Compression::fast());
        enc.write_all(&bytes).at(path)?;
        enc.finish().at(path)?.flush().at(path)?;
    } else {
        let mut f = f;
        f.write_all(&bytes).at(path)?;
        f.flush().at(path)?;
    }
    Ok(())
}
