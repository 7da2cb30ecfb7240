//! MVOL: a small little-endian container for one labelled volume.
//!
//! ```text
//! "MVOL" | version u32 | D u32 | H u32 | W u32
//! | modality len u16 + UTF-8 | label count u16 + u8 labels
//! | report len u32 + UTF-8 | D*H*W f32 (D slowest, W fastest)
//! ```

use std::path::Path;

use super::{Split, Volume, VolumeRecord};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u32 = 1;

/// Size in bytes of everything before the voxel payload.
pub fn header_len(record: &VolumeRecord) -> usize {
    4 + 4 + 12 + 2 + record.modality.len() + 2 + record.labels.len() + 4 + record.report.len()
}

pub fn encode_mvol(record: &VolumeRecord) -> Result<Vec<u8>> {
    if let Some(i) = record.voxels.first_non_finite() {
        return Err(Error::NonFiniteVoxel(i));
    }
    let too_long = |what: &str| Error::InvalidRecord(format!("{}: {what} too long for MVOL", record.id));
    let modality_len = u16::try_from(record.modality.len()).map_err(|_| too_long("modality"))?;
    let label_len = u16::try_from(record.labels.len()).map_err(|_| too_long("label vector"))?;
    let report_len = u32::try_from(record.report.len()).map_err(|_| too_long("report"))?;
    let mut out = Vec::with_capacity(header_len(record) + record.voxels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in record.voxels.dims() {
        let d = u32::try_from(d).map_err(|_| too_long("dimension"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&modality_len.to_le_bytes());
    out.extend_from_slice(record.modality.as_bytes());
    out.extend_from_slice(&label_len.to_le_bytes());
    out.extend_from_slice(&record.labels);
    out.extend_from_slice(&report_len.to_le_bytes());
    out.extend_from_slice(record.report.as_bytes());
    for v in record.voxels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::InvalidRecord(format!("{what} is not UTF-8")))
    }
}

/// Decode MVOL bytes. MVOL carries no id or split, so they are supplied
/// by the caller.
pub fn decode_mvol(bytes: &[u8], id: &str, split: Split, origin: &Path) -> Result<VolumeRecord> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = r.u16()? as usize;
    let modality = r.string(n, "modality")?;
    let n = r.u16()? as usize;
    let labels = r.take(n)?.to_vec();
    let n = r.u32()? as usize;
    let report = r.string(n, "report")?;
    let voxels: u64 = dims.iter().map(|&d| d as u64).product();
    let expected = r.pos as u64 + voxels * 4;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::InvalidRecord(format!(
            "{}: {} trailing bytes after voxel payload",
            origin.display(),
            bytes.len() as u64 - expected
        )));
    }
    let data = bytes[r.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VolumeRecord {
        id: id.to_string(),
        modality,
        voxels: Volume::new(dims, data)?,
        report,
        labels,
        split,
    })
}

pub fn write_mvol(record: &VolumeRecord, path: &Path) -> Result<()> {
    let bytes = encode_mvol(record)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read an MVOL file; the record id is the file stem and the split
/// defaults to train until a manifest says otherwise.
pub fn read_mvol(path: &Path) -> Result<VolumeRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_mvol(&bytes, &id, Split::Train, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dims: [usize; 3]) -> VolumeRecord {
        VolumeRecord {
            id: "case00001_T1".into(),
            modality: "T1".into(),
            voxels: Volume::from_fn(dims, |d, h, w| ((d * 7 + h * 3 + w) % 11) as f32 / 10.0),
            report: "T1 sequence shows cyst in anterior superior left region.".into(),
            labels: vec![1, 0, 0, 0],
            split: Split::Train,
        }
    }

    #[test]
    fn file_size_follows_layout() {
        let mut r = record([8, 8, 8]);
        r.voxels = Volume::filled([8, 8, 8], 0.0);
        let bytes = encode_mvol(&r).unwrap();
        let header = 4 + 4 + 12 + (2 + 2) + (2 + 4) + (4 + r.report.len());
        assert_eq!(header, header_len(&r));
        assert_eq!(bytes.len(), header + 8 * 8 * 8 * 4);
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let r = record([16, 16, 16]);
        let p = dir.path().join("case00001_T1.mvol");
        write_mvol(&r, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_mvol(&r, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        let back = read_mvol(&p).unwrap();
        assert_eq!(back, r);
        assert!(back.voxels.data().iter().zip(r.voxels.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn error_contracts() {
        let r = record([4, 4, 4]);
        let bytes = encode_mvol(&r).unwrap();
        let origin = Path::new("x.mvol");

        let cut = &bytes[..bytes.len() - 10];
        match decode_mvol(cut, "x", Split::Train, origin) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let mut v999 = bytes.clone();
        v999[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(decode_mvol(&v999, "x", Split::Train, origin), Err(Error::UnsupportedVersion(999))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_mvol(&magic, "x", Split::Train, origin), Err(Error::BadMagic(_))));

        let mut nan = record([2, 2, 2]);
        nan.voxels.data_mut()[3] = f32::INFINITY;
        assert!(matches!(encode_mvol(&nan), Err(Error::NonFiniteVoxel(3))));

        let dir = tempfile::tempdir().unwrap();
        let unwritable = dir.path().join("missing-dir").join("a.mvol");
        assert!(matches!(write_mvol(&r, &unwritable), Err(Error::Io { .. })));
    }
}
