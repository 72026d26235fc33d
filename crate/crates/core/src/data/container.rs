//! `.xfds` container: little-endian header, factor table, labels, images.

use std::path::Path;

use super::{DataError, FactorSpec, FactorizedDataset};

const MAGIC: &[u8; 4] = b"XFDS";
const VERSION: u32 = 1;

pub fn encode(ds: &FactorizedDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ds.labels.len() * 2 + ds.images.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in ds.image_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.specs.len() as u32).to_le_bytes());
    for s in &ds.specs {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.cardinality as u32).to_le_bytes());
        out.push(u8::from(s.supervised));
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.images);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> DataError {
        DataError::Parse {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {avail} remain")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<FactorizedDataset, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:?}, expected \"XFDS\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = r.u64("sample count")?;
    let f = r.u32("factor count")? as usize;
    let mut specs = Vec::with_capacity(f.min(1024));
    for i in 0..f {
        let start = r.pos;
        let len = r.u32("factor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "factor name")?)
            .map_err(|_| DataError::Parse {
                offset: start as u64 + 4,
                detail: format!("factor {i} name is not utf-8"),
            })?
            .to_string();
        let cardinality = r.u32("cardinality")? as usize;
        let supervised = match r.u8("supervised flag")? {
            0 => false,
            1 => true,
            v => {
                r.pos -= 1;
                return Err(r.err(format!("supervised flag must be 0 or 1, got {v}")));
            }
        };
        specs.push(FactorSpec {
            name,
            cardinality,
            supervised,
        });
    }
    let too_big = |what: &str, r: &Reader| r.err(format!("{what} size overflows"));
    let n = usize::try_from(n).map_err(|_| too_big("sample count", &r))?;
    let label_count = n.checked_mul(f).ok_or_else(|| too_big("label", &r))?;
    let label_bytes = label_count.checked_mul(2).ok_or_else(|| too_big("label", &r))?;
    let labels: Vec<u16> = r
        .take(label_bytes, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let image_bytes = [n, c, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| too_big("image", &r))?;
    let images = r.take(image_bytes, "images")?.to_vec();
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after images", bytes.len() - r.pos)));
    }
    FactorizedDataset::new([c, h, w], images, labels, specs).map_err(|e| DataError::Parse {
        offset: 0,
        detail: e.to_string(),
    })
}

pub fn save(ds: &FactorizedDataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FactorizedDataset, DataError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, MiniSprites};
    use super::*;

    fn tiny() -> FactorizedDataset {
        let cfg = MiniSprites {
            scales: 2,
            positions: 2,
            intensities: None,
            ..Default::default()
        };
        generate_dataset(&cfg, 3, 1000).unwrap()
    }

    fn offset(e: DataError) -> u64 {
        match e {
            DataError::Parse { offset, .. } => offset,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let ds = tiny();
        let back = decode(&encode(&ds)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.generator_seed, None);
    }

    #[test]
    fn corrupt_magic_fails_at_zero() {
        let mut bytes = encode(&tiny());
        bytes[1] = b'Y';
        assert_eq!(offset(decode(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn version_mismatch_points_at_version() {
        let mut bytes = encode(&tiny());
        bytes[4] = 2;
        assert_eq!(offset(decode(&bytes).unwrap_err()), 4);
    }

    #[test]
    fn missing_image_is_truncation() {
        let ds = tiny();
        let bytes = encode(&ds);
        let short = &bytes[..bytes.len() - ds.pixels()];
        match decode(short).unwrap_err() {
            DataError::Parse { detail, .. } => assert!(detail.contains("truncated images"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let ds = tiny();
        let mut bytes = encode(&ds);
        let label_start = bytes.len() - ds.images().len() - ds.labels().len() * 2;
        bytes[label_start] = 9;
        assert!(decode(&bytes).is_err());
    }
}
