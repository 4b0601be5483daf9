//! NIfTI-1 single-file (`n+1`) reader and writer.
//!
//! Only the fields needed for a 3D scalar volume are interpreted: `dim`,
//! `datatype`, `pixdim`, `vox_offset` and `scl_slope`/`scl_inter`. The
//! qform/sform block is carried as an opaque [`Orientation`] value. The
//! intensity kind of float volumes is recorded in `descrip`.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{atomic_write, AnyVolume, IntensityKind, MaskVolume, VolioError, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DESCRIP_PREFIX: &str = "airseg:";

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    F32,
}

impl NiftiDtype {
    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Self::U8),
            4 => Some(Self::I16),
            16 => Some(Self::F32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }
}

/// qform/sform fields as found in the header, never interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub qfac: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    /// srow_x, srow_y, srow_z
    pub srow: [f32; 12],
}

struct Cursor<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

pub fn read_nifti(path: &Path) -> Result<AnyVolume, VolioError> {
    let bytes = std::fs::read(path).map_err(|e| VolioError::io(path, e))?;
    read_nifti_bytes(&bytes)
}

/// Decodes an in-memory `.nii` or `.nii.gz` image (gzip is detected by magic).
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<AnyVolume, VolioError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| VolioError::MalformedHeader(format!("gzip stream: {e}")))?;
        return decode(&raw);
    }
    decode(bytes)
}

fn decode(buf: &[u8]) -> Result<AnyVolume, VolioError> {
    if buf.len() < HEADER_SIZE {
        return Err(VolioError::MalformedHeader(format!("{} bytes is shorter than a header", buf.len())));
    }
    let mut c = Cursor { buf, big_endian: false };
    if c.i32(0) != HEADER_SIZE as i32 {
        c.big_endian = true;
        if c.i32(0) != HEADER_SIZE as i32 {
            return Err(VolioError::MalformedHeader("sizeof_hdr is not 348 in either byte order".into()));
        }
    }
    if &buf[344..348] != b"n+1\0" {
        return Err(VolioError::MalformedHeader(format!(
            "magic {:?} is not a single-file NIfTI-1 image",
            String::from_utf8_lossy(&buf[344..348])
        )));
    }

    let dim: Vec<i16> = (0..8).map(|i| c.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(VolioError::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = dim[axis + 1];
        if v < 1 {
            return Err(VolioError::MalformedHeader(format!("dim[{}] = {v}", axis + 1)));
        }
        *d = v as usize;
    }
    if ndim > 3 {
        if let Some(extra) = dim[4..=ndim as usize].iter().find(|&&d| d != 1) {
            return Err(VolioError::Dimensionality(format!(
                "dim[0] = {ndim} with non-singleton higher dimension {extra}"
            )));
        }
    }

    let code = c.i16(70);
    let dtype = NiftiDtype::from_code(code).ok_or(VolioError::UnsupportedDatatype(code))?;

    let mut spacing = [1.0f64; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        // Shortest decimal of the stored float32, so 0.7 reads back as 0.7.
        let raw = c.f32(76 + 4 * (axis + 1)).abs();
        let v: f64 = raw.to_string().parse().unwrap_or(raw as f64);
        if v == 0.0 || !v.is_finite() {
            log::warn!("pixdim[{}] is {v}; using 1.0", axis + 1);
        } else {
            *s = v;
        }
    }

    let offset = c.f32(108);
    if !(offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
        return Err(VolioError::MalformedHeader(format!("vox_offset = {offset}")));
    }
    let offset = offset as usize;
    let n: usize = dims.iter().product();
    let expected = n * dtype.bytes();
    let available = buf.len().saturating_sub(offset);
    if available < expected {
        return Err(VolioError::Truncated {
            expected,
            found: available,
        });
    }
    let payload = &buf[offset..offset + expected];

    let slope = c.f32(112);
    let inter = c.f32(116);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);

    let orientation = Orientation {
        qfac: c.f32(76),
        qform_code: c.i16(252),
        sform_code: c.i16(254),
        quatern: std::array::from_fn(|i| c.f32(256 + 4 * i)),
        srow: std::array::from_fn(|i| c.f32(280 + 4 * i)),
    };
    let orientation = (orientation.qform_code != 0 || orientation.sform_code != 0).then_some(orientation);

    if dtype == NiftiDtype::U8 && !scaled && payload.iter().all(|&v| v <= 1) {
        return Ok(AnyVolume::Mask(MaskVolume::new(dims, spacing, payload.to_vec())?.with_orientation(orientation)));
    }

    let mut data: Vec<f32> = match dtype {
        NiftiDtype::U8 => payload.iter().map(|&v| v as f32).collect(),
        NiftiDtype::I16 => payload
            .chunks_exact(2)
            .map(|b| {
                let b = [b[0], b[1]];
                (if c.big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            })
            .collect(),
        NiftiDtype::F32 => payload
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                if c.big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect(),
    };
    if scaled {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }

    let descrip = String::from_utf8_lossy(&buf[148..228]);
    let kind = descrip
        .trim_end_matches('\0')
        .strip_prefix(DESCRIP_PREFIX)
        .and_then(IntensityKind::parse)
        .unwrap_or(IntensityKind::Hounsfield);
    Ok(AnyVolume::Intensity(Volume::new(dims, spacing, data, kind)?.with_orientation(orientation)))
}

/// Writes a volume as float32 or a mask as uint8, little-endian, gzip when
/// the path ends in `.gz`.
pub fn write_nifti(v: &AnyVolume, path: &Path) -> Result<(), VolioError> {
    let dtype = match v {
        AnyVolume::Intensity(_) => NiftiDtype::F32,
        AnyVolume::Mask(_) => NiftiDtype::U8,
    };
    write_nifti_as(v, path, dtype)
}

/// Like [`write_nifti`] with an explicit on-disk type. Integer types require
/// integral values in range.
pub fn write_nifti_as(v: &AnyVolume, path: &Path, dtype: NiftiDtype) -> Result<(), VolioError> {
    let bytes = encode(v, dtype)?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| VolioError::io(path, e))?;
        enc.finish().map_err(|e| VolioError::io(path, e))?
    } else {
        bytes
    };
    atomic_write(path, &bytes)
}

pub(crate) fn encode(v: &AnyVolume, dtype: NiftiDtype) -> Result<Vec<u8>, VolioError> {
    let (dims, spacing, orientation, kind) = match v {
        AnyVolume::Intensity(v) => (v.dims(), v.spacing(), v.orientation(), Some(v.kind())),
        AnyVolume::Mask(m) => (m.dims(), m.spacing(), m.orientation(), None),
    };
    for &d in &dims {
        if d > i16::MAX as usize {
            return Err(VolioError::Dimensionality(format!("dimension {d} exceeds NIfTI-1 limit")));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, dtype.code());
    put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
    put_f32(&mut h, 76, orientation.map_or(1.0, |o| o.qfac));
    for (i, s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, *s as f32);
    }
    for i in 3..7 {
        put_f32(&mut h, 80 + 4 * i, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // xyzt_units: mm
    if let Some(kind) = kind {
        let d = format!("{DESCRIP_PREFIX}{}", kind.as_str());
        h[148..148 + d.len()].copy_from_slice(d.as_bytes());
    }
    if let Some(o) = orientation {
        put_i16(&mut h, 252, o.qform_code);
        put_i16(&mut h, 254, o.sform_code);
        for (i, q) in o.quatern.iter().enumerate() {
            put_f32(&mut h, 256 + 4 * i, *q);
        }
        for (i, s) in o.srow.iter().enumerate() {
            put_f32(&mut h, 280 + 4 * i, *s);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    match (v, dtype) {
        (AnyVolume::Mask(m), NiftiDtype::U8) => h.extend_from_slice(m.data()),
        (AnyVolume::Mask(m), _) => {
            let as_f: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
            push_values(&mut h, &as_f, dtype)?;
        }
        (AnyVolume::Intensity(v), _) => push_values(&mut h, v.data(), dtype)?,
    }
    Ok(h)
}

fn push_values(out: &mut Vec<u8>, data: &[f32], dtype: NiftiDtype) -> Result<(), VolioError> {
    let integral = |v: f32, lo: f32, hi: f32| -> Result<f32, VolioError> {
        if v.fract() != 0.0 || v < lo || v > hi {
            Err(VolioError::Invalid(format!("value {v} not representable as {dtype:?}")))
        } else {
            Ok(v)
        }
    };
    match dtype {
        NiftiDtype::U8 => {
            for &v in data {
                out.push(integral(v, 0.0, 255.0)? as u8);
            }
        }
        NiftiDtype::I16 => {
            for &v in data {
                out.extend_from_slice(&(integral(v, i16::MIN as f32, i16::MAX as f32)? as i16).to_le_bytes());
            }
        }
        NiftiDtype::F32 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_file_size() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![0.5], IntensityKind::Normalized).unwrap();
        let bytes = encode(&AnyVolume::Intensity(v), NiftiDtype::F32).unwrap();
        assert_eq!(bytes.len(), 352 + 4);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), 16);
        assert_eq!(f32::from_le_bytes(bytes[108..112].try_into().unwrap()), 352.0);
    }

    #[test]
    fn mask_encodes_as_uint8() {
        let m = MaskVolume::new([2, 1, 1], [1.0; 3], vec![0, 1]).unwrap();
        let bytes = encode(&AnyVolume::Mask(m), NiftiDtype::U8).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), 2);
        assert_eq!(&bytes[352..], &[0, 1]);
    }

    #[test]
    fn rejects_bad_magic_and_size() {
        let m = MaskVolume::new([1, 1, 1], [1.0; 3], vec![1]).unwrap();
        let mut bytes = encode(&AnyVolume::Mask(m), NiftiDtype::U8).unwrap();
        bytes[0] = 0;
        assert!(matches!(read_nifti_bytes(&bytes), Err(VolioError::MalformedHeader(_))));
        assert!(matches!(read_nifti_bytes(&bytes[..100]), Err(VolioError::MalformedHeader(_))));
    }

    #[test]
    fn integer_dtype_requires_integral_values() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.5, 1.0], IntensityKind::Hounsfield).unwrap();
        assert!(encode(&AnyVolume::Intensity(v), NiftiDtype::I16).is_err());
    }
}
