//! Little-endian binary formats for datasets and embedding dumps.
//!
//! Dataset (`GMDS`, version 1):
//! ```text
//! magic "GMDS" | u32 version | u32 n_concepts | u32 samples_per_concept
//! | u32 real_dim | u32 gen_dim | u32 text_dim
//! then per sample: real_dim×f64, gen_dim×f64, text_dim×f64, u32 concept_id, u8 split
//! ```
//!
//! Embedding dump (`GMEB`, version 1):
//! ```text
//! magic "GMEB" | u32 version | u32 n | u32 dim | n × (u64 id, dim×f64)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"GMDS";
pub const DATASET_VERSION: u32 = 1;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"GMEB";
pub const EMBEDDING_VERSION: u32 = 1;

/// Cursor over a byte slice that reports truncation with the byte offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic bytes {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value at byte offset {at}")));
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                self.remaining(),
                self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    for (v, what) in [
        (ds.n_concepts, "n_concepts"),
        (ds.samples_per_concept, "samples_per_concept"),
        (ds.real_dim, "real_dim"),
        (ds.gen_dim, "gen_dim"),
        (ds.text_dim, "text_dim"),
    ] {
        put_u32(&mut out, dim_u32(v, what)?);
    }
    for s in &ds.samples {
        put_f64s(&mut out, &s.x_real);
        put_f64s(&mut out, &s.x_gen);
        put_f64s(&mut out, &s.text);
        put_u32(&mut out, s.concept_id);
        out.push(s.split as u8);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n_concepts = r.u32()? as usize;
    let samples_per_concept = r.u32()? as usize;
    let real_dim = r.u32()? as usize;
    let gen_dim = r.u32()? as usize;
    let text_dim = r.u32()? as usize;
    let n = n_concepts
        .checked_mul(samples_per_concept)
        .ok_or_else(|| Error::Format("sample count overflows".into()))?;

    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let x_real = r.f64s(real_dim)?;
        let x_gen = r.f64s(gen_dim)?;
        let text = r.f64s(text_dim)?;
        let at = r.offset();
        let concept_id = r.u32()?;
        if concept_id as usize >= n_concepts {
            return Err(Error::Format(format!(
                "concept id {concept_id} at byte offset {at} is out of range (n_concepts = {n_concepts})"
            )));
        }
        let at = r.offset();
        let split = Split::from_tag(r.u8()?).ok_or_else(|| {
            Error::Format(format!("invalid split tag at byte offset {at}"))
        })?;
        samples.push(Sample {
            x_real,
            x_gen,
            text,
            concept_id,
            split,
        });
    }
    r.finish()?;
    Ok(Dataset {
        n_concepts,
        samples_per_concept,
        real_dim,
        gen_dim,
        text_dim,
        samples,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn encode_embeddings(ids: &[u64], emb: &Tensor) -> Result<Vec<u8>> {
    if emb.shape().len() != 2 || emb.rows() != ids.len() {
        return Err(Error::Shape(format!(
            "{} ids for embeddings of shape {:?}",
            ids.len(),
            emb.shape()
        )));
    }
    let mut out = Vec::with_capacity(16 + ids.len() * (8 + 8 * emb.cols()));
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, EMBEDDING_VERSION);
    put_u32(&mut out, dim_u32(ids.len(), "row count")?);
    put_u32(&mut out, dim_u32(emb.cols(), "dimension")?);
    for (i, id) in ids.iter().enumerate() {
        out.extend_from_slice(&id.to_le_bytes());
        put_f64s(&mut out, emb.row(i));
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(Vec<u64>, Tensor)> {
    let mut r = ByteReader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Version {
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = n as u128 * (8 + 8 * d as u128);
    if expected != r.remaining() as u128 {
        return Err(Error::Format(format!(
            "header declares {n} rows of dimension {d} ({expected} payload bytes) but {} bytes follow",
            r.remaining()
        )));
    }
    let mut ids = Vec::with_capacity(n);
    let mut seen = HashSet::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n {
        let id = r.u64()?;
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        ids.push(id);
        values.extend(r.f64s(d)?);
    }
    r.finish()?;
    Ok((ids, Tensor::matrix(n, d, values)?))
}

pub fn export_embeddings(path: impl AsRef<Path>, ids: &[u64], emb: &Tensor) -> Result<()> {
    fs::write(path, encode_embeddings(ids, emb)?)?;
    Ok(())
}

/// Reads an embedding dump: row-aligned ids and an `N×d` matrix.
pub fn import_embeddings(path: impl AsRef<Path>) -> Result<(Vec<u64>, Tensor)> {
    decode_embeddings(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> (Vec<u64>, Tensor) {
        let emb = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, 1e-300]]).unwrap();
        (vec![7, 3, 42], emb)
    }

    #[test]
    fn embedding_dump_round_trip() {
        let (ids, emb) = three();
        let bytes = encode_embeddings(&ids, &emb).unwrap();
        let (ids2, emb2) = decode_embeddings(&bytes).unwrap();
        assert_eq!(ids, ids2);
        assert_eq!(emb, emb2);
    }

    #[test]
    fn duplicate_id_is_named() {
        let (_, emb) = three();
        let bytes = encode_embeddings(&[5, 9, 5], &emb).unwrap();
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(5)));
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn header_dimension_mismatch() {
        let (ids, emb) = three();
        let mut bytes = encode_embeddings(&ids, &emb).unwrap();
        // declare d = 3 while the payload carries d = 2
        bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn embedding_bad_magic_and_version() {
        let (ids, emb) = three();
        let mut bytes = encode_embeddings(&ids, &emb).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }
}
