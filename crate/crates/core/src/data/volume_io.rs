//! Little-endian volume container:
//!
//! ```text
//! "SIPLVOL1" | u32 version = 1 | u32 rank | rank x u32 extents
//! | u8 element code (1 = f32, 2 = u8) | payload (row-major) | u32 CRC32(payload)
//! ```
//!
//! A [`VolumeSample`] is stored as two such files, `<id>.img.vol` (rank 4,
//! f32) and `<id>.lbl.vol` (rank 3, u8).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LabelVolume, VolumeSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"SIPLVOL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementCode {
    F32 = 1,
    U8 = 2,
}

impl ElementCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(ElementCode::F32),
            2 => Some(ElementCode::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementCode::F32 => 4,
            ElementCode::U8 => 1,
        }
    }
}

impl fmt::Display for ElementCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementCode::F32 => write!(f, "1 (f32)"),
            ElementCode::U8 => write!(f, "2 (u8)"),
        }
    }
}

/// Contents of one volume file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    /// Real values, stored as f32.
    Real(Tensor),
    Labels(LabelVolume),
}

impl VolumeData {
    pub fn code(&self) -> ElementCode {
        match self {
            VolumeData::Real(_) => ElementCode::F32,
            VolumeData::Labels(_) => ElementCode::U8,
        }
    }

    pub fn extents(&self) -> Vec<usize> {
        match self {
            VolumeData::Real(t) => t.shape().to_vec(),
            VolumeData::Labels(l) => l.extents.to_vec(),
        }
    }
}

/// Serialises `data`. Real values are narrowed to f32.
pub fn encode_volume(data: &VolumeData) -> Vec<u8> {
    let extents = data.extents();
    let mut payload = Vec::new();
    match data {
        VolumeData::Real(t) => {
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        VolumeData::Labels(l) => payload.extend_from_slice(&l.data),
    }
    let mut out = Vec::with_capacity(21 + 4 * extents.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for e in &extents {
        out.extend_from_slice(&(*e as u32).to_le_bytes());
    }
    out.push(data.code() as u8);
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn format_err(offset: usize, message: String) -> Error {
    Error::Format {
        offset: offset as u64,
        message,
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeData> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected \"SIPLVOL1\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(12, format!("unsupported rank {rank}")));
    }
    let mut extents = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = r.pos;
        let e = r.u32("extents")? as usize;
        if e == 0 {
            return Err(format_err(at, format!("extent {i} is zero")));
        }
        extents.push(e);
    }
    let code_at = r.pos;
    let code_byte = r.take(1, "element code")?[0];
    let code = ElementCode::from_byte(code_byte)
        .ok_or_else(|| format_err(code_at, format!("unknown element code {code_byte}")))?;
    let n = extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .and_then(|n| n.checked_mul(code.size()))
        .ok_or_else(|| format_err(12, "extents overflow".into()))?;
    let payload = r.take(n, "payload")?;
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(format_err(
            crc_at,
            format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    match code {
        ElementCode::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok(VolumeData::Real(Tensor::new(extents, data)?))
        }
        ElementCode::U8 => {
            if rank != 3 {
                return Err(format_err(12, format!("label volumes have rank 3, got {rank}")));
            }
            Ok(VolumeData::Labels(LabelVolume::new(
                [extents[0], extents[1], extents[2]],
                payload.to_vec(),
            )?))
        }
    }
}

pub fn write_volume_file(path: &Path, data: &VolumeData) -> Result<()> {
    fs::write(path, encode_volume(data)).map_err(|e| Error::io(path, e))
}

pub fn read_volume_file(path: &Path) -> Result<VolumeData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.img.vol")), dir.join(format!("{id}.lbl.vol")))
}

/// Writes `sample` as `<dir>/<id>.img.vol` and `<dir>/<id>.lbl.vol`.
pub fn save_volume(sample: &VolumeSample, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (img, lbl) = sample_paths(dir, &sample.id);
    write_volume_file(&img, &VolumeData::Real(sample.intensities.clone()))?;
    write_volume_file(&lbl, &VolumeData::Labels(sample.labels.clone()))?;
    Ok((img, lbl))
}

pub fn load_volume(dir: &Path, id: &str) -> Result<VolumeSample> {
    let (img, lbl) = sample_paths(dir, id);
    let intensities = match read_volume_file(&img)? {
        VolumeData::Real(t) => t,
        VolumeData::Labels(_) => {
            return Err(format_err(
                16,
                format!("{} holds labels, not intensities", img.display()),
            ))
        }
    };
    let labels = match read_volume_file(&lbl)? {
        VolumeData::Labels(l) => l,
        VolumeData::Real(_) => return Err(format_err(16, format!("{} holds reals, not labels", lbl.display()))),
    };
    VolumeSample::new(intensities, labels, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> VolumeData {
        VolumeData::Labels(LabelVolume::new([2, 1, 2], vec![0, 1, 2, 3]).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new([1, 2, 1, 1], vec![0.1f32 as f64, -3.5]).unwrap();
        let bytes = encode_volume(&VolumeData::Real(t.clone()));
        assert_eq!(decode_volume(&bytes).unwrap(), VolumeData::Real(t));
        let bytes = encode_volume(&labels());
        assert_eq!(decode_volume(&bytes).unwrap(), labels());
        assert_eq!(encode_volume(&decode_volume(&bytes).unwrap()), bytes);
    }

    #[test]
    fn corruptions_report_offsets() {
        let good = encode_volume(&labels());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[28] = 9; // element code after 3 extents
        match decode_volume(&bad) {
            Err(Error::Format { offset: 28, message }) => assert!(message.contains('9')),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[30] ^= 1;
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 33, .. })));

        assert!(matches!(
            decode_volume(&good[..20]),
            Err(Error::Format { offset: 20, .. })
        ));
    }
}
