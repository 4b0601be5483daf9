//! Little-endian tensor container:
//! `"MSEG" | u32 version | u32 count | count × (u16 name_len, name, u8 dtype,
//! u8 rank, rank × u32 dim, f32 payload)`, optionally followed by extra
//! sections the caller interprets.

use super::ModelError;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MSEG";
pub const CONTAINER_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let numel: usize = t.dims.iter().product();
        if numel != t.data.len() {
            return Err(ModelError::Format(format!(
                "`{}`: dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| ModelError::Format(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| ModelError::Format(format!("rank too large: {}", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| ModelError::Format(format!("dim too large: {}", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Format(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the tensor section; returns the tensors and the unread tail.
pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<NamedTensor>, &[u8]), ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(ModelError::Format("bad magic, not a weights file".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ModelError::Format("name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(ModelError::Format(format!("`{name}`: unsupported dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| ModelError::Format(format!("`{name}`: size overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| ModelError::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok((tensors, &bytes[r.pos..]))
}
