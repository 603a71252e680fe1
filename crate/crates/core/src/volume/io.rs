//! Volume persistence.
//!
//! `raw_v1` layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `GGPFNVOL`                        |
//! | 8      | 4    | version `u32` = 1                       |
//! | 12     | 12   | extents `l, h, w` as `u32`              |
//! | 24     | 24   | spacing as three `f64`                  |
//! | 48     | 4    | flags `u32`, bit 0 = labels present     |
//! | 52     | 4·n  | intensities `f32`                       |
//! | …      | n    | labels `u8` (only when bit 0 is set)    |
//!
//! The NIfTI-1 reader covers single-file (`n+1`) uncompressed volumes with
//! `int16` or `float32` samples, either byte order. Orientation matrices are
//! ignored: the data is taken as x-fastest with z indexing axial slices.
//! Compressed (`.nii.gz`) and header/image pair files are rejected.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

pub const RAW_V1_MAGIC: &[u8; 8] = b"GGPFNVOL";
pub const RAW_V1_HEADER_LEN: usize = 52;
const RAW_V1_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_INT16: i16 = 4;
const NIFTI_FLOAT32: i16 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    RawV1,
    Nifti1,
}

impl VolumeFormat {
    /// `.nii` selects NIfTI-1, anything else `raw_v1`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::RawV1,
        }
    }
}

impl FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_v1" | "raw" => Ok(VolumeFormat::RawV1),
            "nifti1" | "nifti1_subset" | "nii" => Ok(VolumeFormat::Nifti1),
            other => Err(Error::Usage(format!("unknown volume format '{other}'"))),
        }
    }
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<VolumeGrid> {
    let bytes = fs::read(path.as_ref())?;
    match format {
        VolumeFormat::RawV1 => decode_raw_v1(&bytes),
        VolumeFormat::Nifti1 => decode_nifti1(&bytes),
    }
}

/// Writes `vg`. NIfTI output carries intensities only (float32).
pub fn save_volume(vg: &VolumeGrid, path: impl AsRef<Path>, format: VolumeFormat) -> Result<()> {
    let bytes = match format {
        VolumeFormat::RawV1 => encode_raw_v1(vg),
        VolumeFormat::Nifti1 => encode_nifti1(vg)?,
    };
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

fn encode_raw_v1(vg: &VolumeGrid) -> Vec<u8> {
    let n = vg.voxel_count();
    let mut out = Vec::with_capacity(RAW_V1_HEADER_LEN + 5 * n);
    out.extend_from_slice(RAW_V1_MAGIC);
    out.extend_from_slice(&RAW_V1_VERSION.to_le_bytes());
    for e in vg.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in vg.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let flags = if vg.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in &vg.intensities {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &vg.labels {
        out.extend_from_slice(labels);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Parse(format!("file truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn decode_raw_v1(bytes: &[u8]) -> Result<VolumeGrid> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<8>()? != RAW_V1_MAGIC {
        return Err(Error::Parse("not a raw_v1 volume (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != RAW_V1_VERSION {
        return Err(Error::Parse(format!("unsupported raw_v1 version {version}")));
    }
    let extents = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let flags = r.u32()?;
    let n: usize = extents.iter().product();
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = RAW_V1_HEADER_LEN + 4 * n + if has_labels { n } else { 0 };
    if bytes.len() != expected {
        return Err(Error::Parse(format!(
            "raw_v1 volume {extents:?} should be {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[RAW_V1_HEADER_LEN..];
    let intensities =
        body[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
    let labels = has_labels.then(|| body[4 * n..].to_vec());
    VolumeGrid::new(extents, spacing, intensities, labels).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8], off: usize) -> i16 {
        let a = [b[off], b[off + 1]];
        match self {
            Endian::Little => i16::from_le_bytes(a),
            Endian::Big => i16::from_be_bytes(a),
        }
    }

    fn i32(self, b: &[u8], off: usize) -> i32 {
        let a = [b[off], b[off + 1], b[off + 2], b[off + 3]];
        match self {
            Endian::Little => i32::from_le_bytes(a),
            Endian::Big => i32::from_be_bytes(a),
        }
    }

    fn f32(self, b: &[u8], off: usize) -> f32 {
        f32::from_bits(self.i32(b, off) as u32)
    }
}

fn decode_nifti1(bytes: &[u8]) -> Result<VolumeGrid> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::UnsupportedFormat("compressed NIfTI files are not supported".into()));
    }
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::Parse(format!("NIfTI header truncated ({} bytes)", bytes.len())));
    }
    let endian = if Endian::Little.i32(bytes, 0) == NIFTI_HEADER_LEN as i32 {
        Endian::Little
    } else if Endian::Big.i32(bytes, 0) == NIFTI_HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(Error::Parse("not a NIfTI-1 file (sizeof_hdr != 348)".into()));
    };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::UnsupportedFormat("NIfTI header/image pairs are not supported".into())),
        _ => return Err(Error::Parse("bad NIfTI-1 magic".into())),
    }
    let dim: Vec<i16> = (0..8).map(|i| endian.i16(bytes, 40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) || (4..=ndim as usize).any(|i| dim[i] > 1) {
        return Err(Error::UnsupportedFormat(format!("only 3D volumes are supported, dim = {dim:?}")));
    }
    let extent = |i: usize| -> Result<usize> {
        if i as i16 > ndim {
            return Ok(1);
        }
        match dim[i] {
            d if d > 0 => Ok(d as usize),
            d => Err(Error::Parse(format!("invalid NIfTI dimension {d}"))),
        }
    };
    let (nx, ny, nz) = (extent(1)?, extent(2)?, extent(3)?);
    let datatype = endian.i16(bytes, 70);
    let elem = match datatype {
        NIFTI_INT16 => 2,
        NIFTI_FLOAT32 => 4,
        other => return Err(Error::UnsupportedFormat(format!("NIfTI datatype {other}"))),
    };
    let pixdim: Vec<f32> = (0..8).map(|i| endian.f32(bytes, 76 + 4 * i)).collect();
    let spacing_of = |v: f32| if v > 0.0 && v.is_finite() { v as f64 } else { 1.0 };
    let vox_offset = endian.f32(bytes, 108);
    if !(vox_offset >= NIFTI_HEADER_LEN as f32) {
        return Err(Error::Parse(format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = nx * ny * nz;
    let body = bytes
        .get(start..start + elem * n)
        .ok_or_else(|| Error::Parse(format!("NIfTI body truncated: need {} bytes after {start}", elem * n)))?;
    let slope = endian.f32(bytes, 112);
    let inter = endian.f32(bytes, 116);
    let scale = |v: f32| {
        if slope != 0.0 && slope.is_finite() {
            v * slope + if inter.is_finite() { inter } else { 0.0 }
        } else {
            v
        }
    };
    let intensities = match datatype {
        NIFTI_INT16 => body.chunks_exact(2).map(|c| scale(endian.i16(c, 0) as f32)).collect(),
        _ => body.chunks_exact(4).map(|c| scale(endian.f32(c, 0))).collect(),
    };
    VolumeGrid::new(
        [nz, ny, nx],
        [spacing_of(pixdim[3]), spacing_of(pixdim[2]), spacing_of(pixdim[1])],
        intensities,
        None,
    )
}

fn encode_nifti1(vg: &VolumeGrid) -> Result<Vec<u8>> {
    let [l, h, w] = vg.extents;
    if [l, h, w].iter().any(|&e| e > i16::MAX as usize) {
        return Err(Error::UnsupportedFormat(format!("extents {:?} exceed NIfTI-1 limits", vg.extents)));
    }
    let mut hdr = vec![0u8; NIFTI_HEADER_LEN + 4];
    let put_i16 = |hdr: &mut [u8], off: usize, v: i16| hdr[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |hdr: &mut [u8], off: usize, v: f32| hdr[off..off + 4].copy_from_slice(&v.to_le_bytes());
    hdr[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    for (i, d) in [3, w, h, l, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut hdr, 40 + 2 * i, d as i16);
    }
    put_i16(&mut hdr, 70, NIFTI_FLOAT32);
    put_i16(&mut hdr, 72, 32);
    let [si, sj, sk] = vg.spacing;
    for (i, p) in [1.0, sk as f32, sj as f32, si as f32].into_iter().enumerate() {
        put_f32(&mut hdr, 76 + 4 * i, p);
    }
    put_f32(&mut hdr, 108, (NIFTI_HEADER_LEN + 4) as f32);
    put_f32(&mut hdr, 112, 1.0);
    hdr[123] = 2; // xyzt_units: millimetres
    hdr[344..348].copy_from_slice(b"n+1\0");
    for v in &vg.intensities {
        hdr.extend_from_slice(&v.to_le_bytes());
    }
    Ok(hdr)
}
