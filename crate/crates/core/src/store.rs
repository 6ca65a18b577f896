//! Binary artifact formats (all little-endian).
//!
//! Embedding store:
//!
//! ```text
//! header  magic "MESC" | version u32 | d u32 | l u32 | u u32 | n_records u64
//! record  doc_id_len u16 | doc_id bytes | chunk_idx u32 | l*d f32 | u f32
//! ```
//!
//! Tensor checkpoints (encoder, head, cluster model) share one container:
//!
//! ```text
//! magic [4] | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! n_tensors u32 | { name_len u16 | name | rows u32 | cols u32 | rows*cols f64 }*
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::Mat;

pub const STORE_MAGIC: &[u8; 4] = b"MESC";
pub const STORE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bounds-checked little-endian cursor; every read fails cleanly on truncation.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "truncated input: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.bytes(2)?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.bytes(4)?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.bytes(8)?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::format("length overflow"))?)?;
        let mut out = vec![0f64; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub doc_id: String,
    pub chunk_index: u32,
    /// Row-major `l x d`; row `l - 1` is the top layer.
    pub embeddings: Vec<f32>,
    pub probe: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: u32,
    pub layers: u32,
    pub num_labels: u32,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingStore {
    pub fn new(dim: u32, layers: u32, num_labels: u32) -> Self {
        EmbeddingStore {
            dim,
            layers,
            num_labels,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: EmbeddingRecord) -> Result<()> {
        let want = (self.dim as usize) * (self.layers as usize);
        if rec.embeddings.len() != want || rec.probe.len() != self.num_labels as usize {
            return Err(Error::format(format!(
                "record {}#{}: dimension mismatch",
                rec.doc_id, rec.chunk_index
            )));
        }
        if rec.doc_id.len() > u16::MAX as usize {
            return Err(Error::format("doc_id longer than 65535 bytes"));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        for v in [STORE_VERSION, self.dim, self.layers, self.num_labels] {
            out.write_u32::<LittleEndian>(v).expect("vec write");
        }
        out.write_u64::<LittleEndian>(self.records.len() as u64).expect("vec write");
        for r in &self.records {
            out.write_u16::<LittleEndian>(r.doc_id.len() as u16).expect("vec write");
            out.extend_from_slice(r.doc_id.as_bytes());
            out.write_u32::<LittleEndian>(r.chunk_index).expect("vec write");
            for &x in r.embeddings.iter().chain(&r.probe) {
                out.write_f32::<LittleEndian>(x).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(buf);
        if rd.bytes(4)? != STORE_MAGIC {
            return Err(Error::format("bad embedding store magic"));
        }
        let version = rd.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(format!("unsupported store version {version}")));
        }
        let dim = rd.u32()?;
        let layers = rd.u32()?;
        let num_labels = rd.u32()?;
        let n = rd.u64()?;
        let per_record = (dim as u64)
            .checked_mul(layers as u64)
            .and_then(|x| x.checked_add(num_labels as u64))
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::format("record size overflow"))?;
        // Each record needs at least 6 header bytes plus its payload.
        if n.saturating_mul(per_record + 6) > rd.remaining() as u64 {
            return Err(Error::format(format!("store declares {n} records but is too short")));
        }
        let mut store = EmbeddingStore::new(dim, layers, num_labels);
        for _ in 0..n {
            let len = rd.u16()? as usize;
            let doc_id = rd.string(len)?;
            let chunk_index = rd.u32()?;
            let embeddings = rd.f32s(dim as usize * layers as usize)?;
            let probe = rd.f32s(num_labels as usize)?;
            store.records.push(EmbeddingRecord {
                doc_id,
                chunk_index,
                embeddings,
                probe,
            });
        }
        rd.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Named f64 tensors plus a JSON metadata blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub meta: String,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(self.meta.len() as u32).expect("vec write");
        out.extend_from_slice(self.meta.as_bytes());
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).expect("vec write");
        for (name, m) in &self.tensors {
            out.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(m.nrows() as u32).expect("vec write");
            out.write_u32::<LittleEndian>(m.ncols() as u32).expect("vec write");
            for &x in m.iter() {
                out.write_f64::<LittleEndian>(x).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut rd = ByteReader::new(buf);
        if rd.bytes(4)? != magic {
            return Err(Error::format(format!(
                "bad checkpoint magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = rd.u32()? as usize;
        let meta = rd.string(meta_len)?;
        let n = rd.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(rd.remaining() / 10));
        for _ in 0..n {
            let len = rd.u16()? as usize;
            let name = rd.string(len)?;
            let rows = rd.u32()? as usize;
            let cols = rd.u32()? as usize;
            let count = rows.checked_mul(cols).ok_or_else(|| Error::format("tensor size overflow"))?;
            let data = rd.f64s(count)?;
            let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::format(e.to_string()))?;
            tensors.push((name, m));
        }
        rd.finish()?;
        Ok(Checkpoint {
            magic: *magic,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic)
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor {name:?}")))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3, 2, 2);
        s.push(EmbeddingRecord {
            doc_id: "doc-1".into(),
            chunk_index: 4,
            embeddings: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            probe: vec![0.25, 0.75],
        })
        .unwrap();
        s
    }

    #[test]
    fn store_layout_is_exact() {
        let bytes = store().to_bytes();
        assert_eq!(&bytes[..4], b"MESC");
        assert_eq!(LittleEndian::read_u32(&bytes[4..8]), 1);
        assert_eq!(LittleEndian::read_u32(&bytes[8..12]), 3);
        assert_eq!(LittleEndian::read_u32(&bytes[12..16]), 2);
        assert_eq!(LittleEndian::read_u32(&bytes[16..20]), 2);
        assert_eq!(LittleEndian::read_u64(&bytes[20..28]), 1);
        assert_eq!(LittleEndian::read_u16(&bytes[28..30]), 5);
        assert_eq!(&bytes[30..35], b"doc-1");
        assert_eq!(LittleEndian::read_u32(&bytes[35..39]), 4);
        assert_eq!(LittleEndian::read_f32(&bytes[39..43]), 1.0);
        assert_eq!(bytes.len(), 39 + 8 * 4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = store();
        let err = s.push(EmbeddingRecord {
            doc_id: "x".into(),
            chunk_index: 0,
            embeddings: vec![0.0; 5],
            probe: vec![0.5, 0.5],
        });
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_trailing_input_rejected() {
        let bytes = store().to_bytes();
        for cut in 0..bytes.len() {
            assert!(EmbeddingStore::from_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EmbeddingStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn huge_record_count_does_not_allocate() {
        let mut bytes = store().to_bytes();
        bytes[20..28].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(EmbeddingStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn checkpoint_reloads_bit_exactly() {
        let ck = Checkpoint {
            magic: *b"TEST",
            meta: "{\"a\":1}".into(),
            tensors: vec![("w".into(), ndarray::array![[0.1, -2.5e-300], [f64::MIN_POSITIVE, 3.0]])],
        };
        let again = Checkpoint::from_bytes(&ck.to_bytes(), b"TEST").unwrap();
        assert_eq!(again, ck);
        assert!(Checkpoint::from_bytes(&ck.to_bytes(), b"NOPE").is_err());
    }

    proptest! {
        #[test]
        fn store_round_trip(ids in proptest::collection::vec("[a-z0-9_-]{0,12}", 0..5), seed in any::<u32>()) {
            let mut s = EmbeddingStore::new(2, 4, 3);
            for (i, id) in ids.iter().enumerate() {
                let base = (seed as f32) * 1e-3 + i as f32;
                s.push(EmbeddingRecord {
                    doc_id: id.clone(),
                    chunk_index: i as u32,
                    embeddings: (0..8).map(|k| base + k as f32).collect(),
                    probe: vec![0.2, 0.3, 0.5],
                }).unwrap();
            }
            prop_assert_eq!(EmbeddingStore::from_bytes(&s.to_bytes()).unwrap(), s);
        }

        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = EmbeddingStore::from_bytes(&bytes);
            let _ = Checkpoint::from_bytes(&bytes, b"MSHD");
        }
    }
}
