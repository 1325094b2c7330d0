//! Little-endian binary formats for datasets (`VTDS`) and precomputed
//! feature sets (`VTFT`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, FeatureSample, FeatureSet, Sample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"VTDS";
pub const DATASET_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"VTFT";
pub const FEATURE_VERSION: u32 = 1;

/// Cursor over an in-memory file that reports the byte offset of failures.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.bytes(4, "magic")?;
        if got != expect {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let raw = self.bytes(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn version(&mut self, kind: &'static str, expected: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(Error::UnsupportedVersion { kind, found, expected });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn header_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the file format")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let per = ds.patch_count * ds.patch_dim;
    let mut out = Vec::with_capacity(32 + ds.len() * (4 + 4 * ds.signatures + 8 * per));
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, header_u32(ds.patch_count, "patch count")?);
    put_u32(&mut out, header_u32(ds.patch_dim, "patch_dim")?);
    put_u32(&mut out, header_u32(ds.classes, "class count")?);
    put_u32(&mut out, header_u32(ds.signatures, "signature count")?);
    put_u64(&mut out, ds.len() as u64);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.patches.len() != per || s.signature_positions.len() != ds.signatures {
            return Err(Error::dim(format!("sample {i} does not match the dataset header")));
        }
        put_u32(&mut out, header_u32(s.label, "label")?);
        for &p in &s.signature_positions {
            put_u32(&mut out, header_u32(p, "signature position")?);
        }
        put_f64s(&mut out, &s.patches);
    }
    write_file(path.as_ref(), &out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(DATASET_MAGIC)?;
    r.version("dataset", DATASET_VERSION)?;
    let patch_count = r.u32("patch count")? as usize;
    let patch_dim = r.u32("patch_dim")? as usize;
    let classes = r.u32("class count")? as usize;
    let signatures = r.u32("signature count")? as usize;
    let count_at = r.offset();
    let count = r.u64("sample count")?;
    if signatures > patch_count {
        return Err(Error::format(16, format!("{signatures} signatures exceed {patch_count} patches")));
    }
    let per_sample = 4 + 4 * signatures as u64 + 8 * (patch_count * patch_dim) as u64;
    if count.saturating_mul(per_sample) > r.remaining() as u64 {
        return Err(Error::format(
            count_at,
            format!("header declares {count} samples but only {} payload bytes follow", r.remaining()),
        ));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= classes {
            return Err(Error::format(at, format!("label {label} >= class count {classes}")));
        }
        let mut signature_positions = Vec::with_capacity(signatures);
        for _ in 0..signatures {
            let at = r.offset();
            let p = r.u32("signature position")? as usize;
            if p >= patch_count {
                return Err(Error::format(at, format!("signature position {p} >= {patch_count}")));
            }
            signature_positions.push(p);
        }
        let patches = r.f64s(patch_count * patch_dim, "patch values")?;
        samples.push(Sample {
            label,
            signature_positions,
            patches,
        });
    }
    r.finish()?;
    Ok(Dataset {
        patch_count,
        patch_dim,
        classes,
        signatures,
        samples,
    })
}

pub fn save_feature_set(path: impl AsRef<Path>, fs_: &FeatureSet) -> Result<()> {
    let per = fs_.patch_count * fs_.feature_dim;
    let mut out = Vec::with_capacity(28 + fs_.samples.len() * (4 + 8 * per));
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, header_u32(fs_.patch_count, "patch count")?);
    put_u32(&mut out, header_u32(fs_.feature_dim, "feature dim")?);
    put_u32(&mut out, header_u32(fs_.classes, "class count")?);
    put_u64(&mut out, fs_.samples.len() as u64);
    for (i, s) in fs_.samples.iter().enumerate() {
        if s.features.len() != per {
            return Err(Error::dim(format!("feature sample {i} does not match the header")));
        }
        put_u32(&mut out, header_u32(s.label, "label")?);
        put_f64s(&mut out, &s.features);
    }
    write_file(path.as_ref(), &out)
}

pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(FEATURE_MAGIC)?;
    r.version("feature set", FEATURE_VERSION)?;
    let patch_count = r.u32("patch count")? as usize;
    let feature_dim = r.u32("feature dim")? as usize;
    let classes = r.u32("class count")? as usize;
    let count_at = r.offset();
    let count = r.u64("sample count")?;
    let per_sample = 4 + 8 * (patch_count * feature_dim) as u64;
    if count.saturating_mul(per_sample) > r.remaining() as u64 {
        return Err(Error::format(
            count_at,
            format!("header declares {count} samples but only {} payload bytes follow", r.remaining()),
        ));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= classes {
            return Err(Error::format(at, format!("label {label} >= class count {classes}")));
        }
        let features = r.f64s(patch_count * feature_dim, "features")?;
        samples.push(FeatureSample { label, features });
    }
    r.finish()?;
    Ok(FeatureSet {
        patch_count,
        feature_dim,
        classes,
        samples,
    })
}
