//! The `DCCL` compressed-embedding container.
//!
//! ```text
//! offset  size            field
//! 0       4               magic "DCCL"
//! 4       2               version (u16 LE, currently 1)
//! 6       1               bits per code, ceil(log2 K)
//! 7       1               reserved, 0
//! 8       8               V (u64 LE)
//! 16      4               M (u32 LE)
//! 20      4               K (u32 LE)
//! 24      4               D (u32 LE)
//! 28      M*K*D*4         codebooks, f32 LE, book-major then codeword-major
//! ..      ceil(V*M*b/8)   packed codes (see `packing`)
//! ..      V x (u32 + n)   vocabulary, length-prefixed UTF-8
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio;
use crate::dccl::{
    bits_per_code, pack_codes, packed_len, unpack_codes, CodeMatrix, CodebookSet, DcclEncoder, DcclModel,
};
use crate::embio::{EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCCL";
const VERSION: u16 = 1;
pub const DCCL_HEADER_BYTES: usize = 28;

/// Codes, codebooks and vocabulary: everything needed on-device to
/// rebuild the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEmbeddings {
    pub codes: CodeMatrix,
    pub books: CodebookSet,
    pub vocab: Vocabulary,
}

/// Byte counts of one serialized `DCCL` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcclSizes {
    pub header: usize,
    pub codebooks: usize,
    pub codes: usize,
    pub vocab: usize,
}

impl DcclSizes {
    pub fn total(&self) -> usize {
        self.header + self.codebooks + self.codes + self.vocab
    }

    /// Codes plus codebooks, the quantity compared against `V*D*4`.
    pub fn payload(&self) -> usize {
        self.codebooks + self.codes
    }
}

impl CompressedEmbeddings {
    pub fn new(codes: CodeMatrix, books: CodebookSet, vocab: Vocabulary) -> Result<Self> {
        if codes.num_words() != vocab.len() {
            return Err(Error::dim(format!(
                "{} code rows for a vocabulary of {}",
                codes.num_words(),
                vocab.len()
            )));
        }
        if codes.num_books() != books.num_books() || codes.num_codewords() != books.num_codewords() {
            return Err(Error::dim("codes and codebooks disagree on M or K"));
        }
        Ok(CompressedEmbeddings { codes, books, vocab })
    }

    pub fn sizes(&self) -> DcclSizes {
        DcclSizes {
            header: DCCL_HEADER_BYTES,
            codebooks: self.books.payload_bytes(),
            codes: packed_len(
                self.codes.num_words(),
                self.codes.num_books(),
                self.codes.num_codewords(),
            ),
            vocab: self.vocab.serialized_len(),
        }
    }

    pub fn reconstruct(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.vocab.clone(), self.codes.reconstruct_all(&self.books)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (v, m, k, d) = (
            self.codes.num_words(),
            self.books.num_books(),
            self.books.num_codewords(),
            self.books.dim(),
        );
        let mut buf = Vec::with_capacity(self.sizes().total());
        buf.extend_from_slice(MAGIC);
        buf.write_u16::<LittleEndian>(VERSION).unwrap();
        buf.push(bits_per_code(k) as u8);
        buf.push(0);
        buf.write_u64::<LittleEndian>(v as u64).unwrap();
        buf.write_u32::<LittleEndian>(m as u32).unwrap();
        buf.write_u32::<LittleEndian>(k as u32).unwrap();
        buf.write_u32::<LittleEndian>(d as u32).unwrap();
        binio::write_f32s(&mut buf, &self.books.table.value).unwrap();
        buf.extend_from_slice(&pack_codes(&self.codes));
        self.vocab.write_to(&mut buf).unwrap();
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, MAGIC)?;
        let version = binio::read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported DCCL version {version}")));
        }
        let bits = binio::read_u8(&mut r)?;
        let _reserved = binio::read_u8(&mut r)?;
        let v = binio::read_u64(&mut r)? as usize;
        let m = binio::read_u32(&mut r)? as usize;
        let k = binio::read_u32(&mut r)? as usize;
        let d = binio::read_u32(&mut r)? as usize;
        if k < 2 || m < 1 || d < 1 {
            return Err(Error::format(format!("invalid DCCL shape M={m} K={k} D={d}")));
        }
        if bits as u32 != bits_per_code(k) {
            return Err(Error::format(format!(
                "header says {bits} bits per code but K={k} needs {}",
                bits_per_code(k)
            )));
        }
        if m.saturating_mul(k).saturating_mul(d).saturating_mul(4) > bytes.len() {
            return Err(Error::format("DCCL header larger than file"));
        }
        let table = binio::read_f32s(&mut r, m * k, d)?;
        let books = CodebookSet::from_table(m, k, table)?;
        let n = packed_len(v, m, k);
        if n > bytes.len() {
            return Err(Error::format("DCCL header larger than file"));
        }
        let mut packed = vec![0u8; n];
        r.read_exact(&mut packed).map_err(binio::truncated)?;
        let codes = unpack_codes(&packed, v, m, k)?;
        let vocab = Vocabulary::read_from(&mut r, v)?;
        if r.position() as usize != bytes.len() {
            return Err(Error::format("trailing bytes after DCCL vocabulary"));
        }
        Self::new(codes, books, vocab)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"DAE1";

/// Trained compression layers: `"DAE1" | M u32 | K u32 | D u32 | H u32`
/// followed by `w1 (H x D)`, `b1`, `w2 (M*K x H)`, `b2` and the codebooks,
/// all f32 LE.
pub fn dccl_model_to_bytes(model: &DcclModel) -> Vec<u8> {
    let e = &model.encoder;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    for x in [e.num_books(), e.num_codewords(), e.input_dim(), e.hidden()] {
        buf.write_u32::<LittleEndian>(x as u32).unwrap();
    }
    for m in [&e.w1.value, &e.b1.value, &e.w2.value, &e.b2.value, &model.books.table.value] {
        binio::write_f32s(&mut buf, m).unwrap();
    }
    buf
}

pub fn dccl_model_from_bytes(bytes: &[u8]) -> Result<DcclModel> {
    let mut r = Cursor::new(bytes);
    binio::expect_magic(&mut r, MODEL_MAGIC)?;
    let m = binio::read_u32(&mut r)? as usize;
    let k = binio::read_u32(&mut r)? as usize;
    let d = binio::read_u32(&mut r)? as usize;
    let h = binio::read_u32(&mut r)? as usize;
    if m == 0 || k < 2 || d == 0 || h == 0 {
        return Err(Error::format(format!("invalid DAE1 shape M={m} K={k} D={d} H={h}")));
    }
    let floats = h * d + h + m * k * h + m * k + m * k * d;
    if floats.saturating_mul(4) + 20 != bytes.len() {
        return Err(Error::format("DAE1 length does not match its header"));
    }
    let w1 = binio::read_f32s(&mut r, h, d)?;
    let b1 = binio::read_f32s(&mut r, 1, h)?;
    let w2 = binio::read_f32s(&mut r, m * k, h)?;
    let b2 = binio::read_f32s(&mut r, 1, m * k)?;
    let table = binio::read_f32s(&mut r, m * k, d)?;
    Ok(DcclModel {
        encoder: DcclEncoder::from_parts(m, k, w1, b1, w2, b2)?,
        books: CodebookSet::from_table(m, k, table)?,
    })
}

pub fn save_dccl_model(path: &Path, model: &DcclModel) -> Result<()> {
    binio::write_atomic(path, &dccl_model_to_bytes(model))
}

pub fn load_dccl_model(path: &Path) -> Result<DcclModel> {
    dccl_model_from_bytes(&fs::read(path)?)
}

pub fn write_compressed(path: &Path, compressed: &CompressedEmbeddings) -> Result<()> {
    binio::write_atomic(path, &compressed.to_bytes())
}

pub fn read_compressed(path: &Path) -> Result<CompressedEmbeddings> {
    CompressedEmbeddings::from_bytes(&fs::read(path)?)
}

/// Uncompressed size divided by compressed size.
pub fn compression_rate(original_bytes: usize, compressed_bytes: usize) -> Result<f64> {
    if compressed_bytes == 0 {
        return Err(Error::param("compressed size must be positive"));
    }
    Ok(original_bytes as f64 / compressed_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    pub(crate) fn random_compressed(v: usize, m: usize, k: usize, d: usize, seed: u64) -> CompressedEmbeddings {
        let mut rng = Rng::new(seed);
        let mut books = CodebookSet::random(m, k, d, &mut rng).unwrap();
        books.round_to_f32();
        let raw = (0..v * m).map(|_| rng.below(k) as u32).collect();
        let codes = CodeMatrix::new(v, m, k, raw).unwrap();
        let vocab = Vocabulary::new((1..v).map(|i| format!("tok{i}"))).unwrap();
        CompressedEmbeddings::new(codes, books, vocab).unwrap()
    }

    #[test]
    fn storage_matches_formula() {
        let c = random_compressed(1000, 32, 16, 300, 1);
        let s = c.sizes();
        assert_eq!(s.codes, 16_000);
        assert_eq!(s.codebooks, 614_400);
        assert_eq!(c.to_bytes().len(), s.total());
        assert_eq!(s.total(), 28 + 614_400 + 16_000 + c.vocab.serialized_len());
    }

    #[test]
    fn rates() {
        assert_eq!(compression_rate(100, 100).unwrap(), 1.0);
        let r = compression_rate(1_200_000, 630_400).unwrap();
        assert!((r - 1.9036).abs() < 1e-3);
        assert!(compression_rate(1, 0).is_err());
        // 97.4% size reduction
        let r: f64 = 1.0 / (1.0 - 0.974);
        assert!((r - 38.46).abs() < 0.01);
    }

    #[test]
    fn file_reconstruction_equals_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.dccl");
        let c = random_compressed(50, 4, 5, 7, 3);
        write_compressed(&path, &c).unwrap();
        let back = read_compressed(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.reconstruct().unwrap(), c.reconstruct().unwrap());
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, c.sizes().total());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = random_compressed(3, 2, 4, 2, 0).to_bytes();
        bytes[4] = 9;
        assert!(matches!(CompressedEmbeddings::from_bytes(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(CompressedEmbeddings::from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(v in 1usize..30, m in 1usize..5, k in 2usize..20, d in 1usize..6, seed in 0u64..10_000) {
            let c = random_compressed(v, m, k, d, seed);
            let bytes = c.to_bytes();
            prop_assert_eq!(bytes.len(), c.sizes().total());
            prop_assert_eq!(CompressedEmbeddings::from_bytes(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn dccl_model_round_trip() {
        let mut model = DcclModel::new(5, 3, 4, 7, &mut Rng::new(2)).unwrap();
        model.round_to_f32();
        let bytes = dccl_model_to_bytes(&model);
        assert_eq!(dccl_model_from_bytes(&bytes).unwrap(), model);
        assert!(matches!(dccl_model_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
