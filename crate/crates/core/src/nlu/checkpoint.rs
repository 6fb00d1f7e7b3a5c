//! The `NLU1` model checkpoint.
//!
//! ```text
//! "NLU1" | version u16 | source tag u8 | reserved u8
//! schema       3 x (u32 count, count x (u32 len + UTF-8))   domains, intents, tags
//! vocabulary   V u64, V x (u32 len + UTF-8)
//! hyper        D u32 | hidden u32 | dropout f64 | M u32 | K u32   (M = K = 0 without codes)
//! tensors      count u32, then per tensor:
//!              name (u32 len + UTF-8) | encoding u8 | rows u64 | cols u64 | payload
//!                encoding 0: rows*cols f32
//!                encoding 1: bins u16 | min f64 | bin_width f64 | rows*cols u8
//!                encoding 2: K u32 | packed codes of a rows x cols code matrix
//! ```
//!
//! Source tags: 0 raw, 1 DCCL layers, 2 frozen codes, 3 factorized.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio;
use crate::dccl::{pack_codes, packed_len, unpack_codes, CodeMatrix, CodebookSet, DcclEncoder, DcclModel};
use crate::embio::Vocabulary;
use crate::error::{Error, Result};
use crate::nlu::lstm::{Dense, Lstm};
use crate::nlu::model::{EmbeddingSource, NluModel, SourceKind};
use crate::nlu::schema::TagSchema;
use crate::numerics::{HasParameters, Matrix, Parameter};
use crate::quant8::{dequantize, QuantizedMatrix};

const MAGIC: &[u8; 4] = b"NLU1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorEncoding {
    F32,
    Q8,
    Codes,
}

impl TensorEncoding {
    fn tag(self) -> u8 {
        match self {
            TensorEncoding::F32 => 0,
            TensorEncoding::Q8 => 1,
            TensorEncoding::Codes => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorEncoding::F32 => "f32",
            TensorEncoding::Q8 => "q8",
            TensorEncoding::Codes => "codes",
        }
    }
}

/// Byte accounting of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub encoding: TensorEncoding,
    pub rows: usize,
    pub cols: usize,
    /// Value bytes only: 4 per f32 entry, 1 per q8 entry, the packed
    /// stream for codes.
    pub payload_bytes: usize,
    /// The whole record including name, tag, shape and scale constants.
    pub record_bytes: usize,
}

impl TensorInfo {
    /// Tensors that make up the word-embedding component.
    pub fn is_embedding(&self) -> bool {
        self.name.starts_with("emb.") || self.name == "dccl.codebooks"
    }
}

/// Parsed layout of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLayout {
    pub source: SourceKind,
    pub total_bytes: usize,
    pub vocab_bytes: usize,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointLayout {
    pub fn embedding_payload_bytes(&self) -> usize {
        self.tensors.iter().filter(|t| t.is_embedding()).map(|t| t.payload_bytes).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

enum Stored {
    Dense(Matrix),
    Quantized(QuantizedMatrix),
    Codes(CodeMatrix),
}

struct Header {
    source: SourceKind,
    schema: TagSchema,
    vocab: Vocabulary,
    dim: usize,
    hidden: usize,
    dropout: f64,
    m: usize,
    k: usize,
}

fn write_record<W: Write>(w: &mut W, name: &str, stored: &Stored) -> std::io::Result<()> {
    binio::write_str(w, name)?;
    match stored {
        Stored::Dense(m) => {
            w.write_u8(TensorEncoding::F32.tag())?;
            w.write_u64::<LittleEndian>(m.rows() as u64)?;
            w.write_u64::<LittleEndian>(m.cols() as u64)?;
            binio::write_f32s(w, m)
        }
        Stored::Quantized(q) => {
            w.write_u8(TensorEncoding::Q8.tag())?;
            w.write_u64::<LittleEndian>(q.rows as u64)?;
            w.write_u64::<LittleEndian>(q.cols as u64)?;
            w.write_u16::<LittleEndian>(q.bins as u16)?;
            w.write_f64::<LittleEndian>(q.min)?;
            w.write_f64::<LittleEndian>(q.bin_width)?;
            w.write_all(&q.data)
        }
        Stored::Codes(c) => {
            w.write_u8(TensorEncoding::Codes.tag())?;
            w.write_u64::<LittleEndian>(c.num_words() as u64)?;
            w.write_u64::<LittleEndian>(c.num_books() as u64)?;
            w.write_u32::<LittleEndian>(c.num_codewords() as u32)?;
            w.write_all(&pack_codes(c))
        }
    }
}

fn read_record(r: &mut Cursor<&[u8]>, total: usize) -> Result<(String, Stored, TensorInfo)> {
    let start = r.position() as usize;
    let name = binio::read_str(r)?;
    let tag = binio::read_u8(r)?;
    let rows = binio::read_u64(r)? as usize;
    let cols = binio::read_u64(r)? as usize;
    let entries = rows
        .checked_mul(cols)
        .filter(|&n| n <= total)
        .ok_or_else(|| Error::format(format!("tensor `{name}` larger than file")))?;
    let (encoding, stored, payload_bytes) = match tag {
        0 => (TensorEncoding::F32, Stored::Dense(binio::read_f32s(r, rows, cols)?), entries * 4),
        1 => {
            let bins = binio::read_u16(r)? as usize;
            let min = binio::read_f64(r)?;
            let bin_width = binio::read_f64(r)?;
            let mut data = vec![0u8; entries];
            r.read_exact(&mut data).map_err(binio::truncated)?;
            let q = QuantizedMatrix { rows, cols, min, bin_width, bins, data };
            q.validate()?;
            (TensorEncoding::Q8, Stored::Quantized(q), entries)
        }
        2 => {
            let k = binio::read_u32(r)? as usize;
            if k < 2 {
                return Err(Error::format(format!("tensor `{name}` has K={k}")));
            }
            let n = packed_len(rows, cols, k);
            if n > total {
                return Err(Error::format(format!("tensor `{name}` larger than file")));
            }
            let mut packed = vec![0u8; n];
            r.read_exact(&mut packed).map_err(binio::truncated)?;
            (TensorEncoding::Codes, Stored::Codes(unpack_codes(&packed, rows, cols, k)?), n)
        }
        t => return Err(Error::format(format!("tensor `{name}` has unknown encoding {t}"))),
    };
    let info = TensorInfo {
        name: name.clone(),
        encoding,
        rows,
        cols,
        payload_bytes,
        record_bytes: r.position() as usize - start,
    };
    Ok((name, stored, info))
}

fn read_header(r: &mut Cursor<&[u8]>) -> Result<(Header, usize)> {
    binio::expect_magic(r, MAGIC)?;
    let version = binio::read_u16(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported NLU1 version {version}")));
    }
    let source = SourceKind::from_tag(binio::read_u8(r)?)?;
    let _reserved = binio::read_u8(r)?;
    let schema = TagSchema::read_from(r)?;
    let v = binio::read_u64(r)? as usize;
    let vocab_start = r.position() as usize;
    if v > r.get_ref().len() {
        return Err(Error::format("vocabulary larger than file"));
    }
    let vocab = Vocabulary::read_from(r, v)?;
    let vocab_bytes = r.position() as usize - vocab_start + 8;
    let dim = binio::read_u32(r)? as usize;
    let hidden = binio::read_u32(r)? as usize;
    let dropout = binio::read_f64(r)?;
    let m = binio::read_u32(r)? as usize;
    let k = binio::read_u32(r)? as usize;
    Ok((Header { source, schema, vocab, dim, hidden, dropout, m, k }, vocab_bytes))
}

fn source_shape(source: &EmbeddingSource) -> (usize, usize) {
    match source {
        EmbeddingSource::Dccl { model, .. } => (model.books.num_books(), model.books.num_codewords()),
        EmbeddingSource::Codes { books, .. } => (books.num_books(), books.num_codewords()),
        _ => (0, 0),
    }
}

/// Serializes `model`. Values are written as `f32`; call
/// [`NluModel::round_to_f32`] first for a bit-exact round trip.
pub fn model_to_bytes(model: &NluModel) -> Vec<u8> {
    let mut model = model.clone();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION).unwrap();
    buf.push(model.source.kind().tag());
    buf.push(0);
    model.schema.write_to(&mut buf).unwrap();
    buf.write_u64::<LittleEndian>(model.vocab.len() as u64).unwrap();
    model.vocab.write_to(&mut buf).unwrap();
    let (m, k) = source_shape(&model.source);
    buf.write_u32::<LittleEndian>(model.input_dim() as u32).unwrap();
    buf.write_u32::<LittleEndian>(model.hidden() as u32).unwrap();
    buf.write_f64::<LittleEndian>(model.dropout).unwrap();
    buf.write_u32::<LittleEndian>(m as u32).unwrap();
    buf.write_u32::<LittleEndian>(k as u32).unwrap();

    let mut records: Vec<(String, Stored)> = Vec::new();
    match &model.source {
        EmbeddingSource::Dccl { target, .. } => records.push(("emb.target".into(), Stored::Dense(target.clone()))),
        EmbeddingSource::Codes { codes, .. } => records.push(("emb.codes".into(), Stored::Codes(codes.clone()))),
        _ => {}
    }
    let quantized = model.quantized.clone();
    for p in model.parameters_mut() {
        let stored = match quantized.get(&p.name) {
            Some(q) => Stored::Quantized(q.clone()),
            None => Stored::Dense(p.value.clone()),
        };
        records.push((p.name.clone(), stored));
    }
    buf.write_u32::<LittleEndian>(records.len() as u32).unwrap();
    for (name, stored) in &records {
        write_record(&mut buf, name, stored).unwrap();
    }
    buf
}

fn parse(bytes: &[u8]) -> Result<(Header, usize, Vec<(String, Stored, TensorInfo)>)> {
    let mut r = Cursor::new(bytes);
    let (header, vocab_bytes) = read_header(&mut r)?;
    let count = binio::read_u32(&mut r)? as usize;
    if count > bytes.len() {
        return Err(Error::format("implausible tensor count"));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_record(&mut r, bytes.len())?);
    }
    if r.position() as usize != bytes.len() {
        return Err(Error::format("trailing bytes after NLU1 tensors"));
    }
    Ok((header, vocab_bytes, records))
}

pub fn checkpoint_layout(bytes: &[u8]) -> Result<CheckpointLayout> {
    let (header, vocab_bytes, records) = parse(bytes)?;
    Ok(CheckpointLayout {
        source: header.source,
        total_bytes: bytes.len(),
        vocab_bytes,
        tensors: records.into_iter().map(|(_, _, info)| info).collect(),
    })
}

fn take_any(dense: &mut BTreeMap<String, Matrix>, name: &str) -> Result<Matrix> {
    dense
        .remove(name)
        .ok_or_else(|| Error::format(format!("checkpoint is missing tensor `{name}`")))
}

fn take(dense: &mut BTreeMap<String, Matrix>, name: &str, rows: usize, cols: usize) -> Result<Parameter> {
    let m = take_any(dense, name)?;
    if m.shape() != (rows, cols) {
        return Err(Error::format(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(Parameter::new(name, m))
}

fn take_lstm(dense: &mut BTreeMap<String, Matrix>, prefix: &str, d: usize, hd: usize) -> Result<Lstm> {
    Ok(Lstm {
        w_ih: take(dense, &format!("{prefix}.w_ih"), 4 * hd, d)?,
        w_hh: take(dense, &format!("{prefix}.w_hh"), 4 * hd, hd)?,
        b: take(dense, &format!("{prefix}.b"), 1, 4 * hd)?,
    })
}

fn take_dense(dense: &mut BTreeMap<String, Matrix>, prefix: &str, out: usize, input: usize) -> Result<Dense> {
    Ok(Dense {
        w: take(dense, &format!("{prefix}.w"), out, input)?,
        b: take(dense, &format!("{prefix}.b"), 1, out)?,
    })
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<NluModel> {
    let (h, _, records) = parse(bytes)?;
    let mut dense: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut quantized = BTreeMap::new();
    let mut codes = None;
    for (name, stored, _) in records {
        match stored {
            Stored::Dense(m) => {
                dense.insert(name, m);
            }
            Stored::Quantized(q) => {
                dense.insert(name.clone(), dequantize(&q));
                quantized.insert(name, q);
            }
            Stored::Codes(c) => codes = Some(c),
        }
    }
    let (v, d, hd) = (h.vocab.len(), h.dim, h.hidden);
    let (m, k) = (h.m, h.k);
    let dense = &mut dense;
    let source = match h.source {
        SourceKind::Raw => EmbeddingSource::Raw(take(dense, "emb.table", v, d)?),
        SourceKind::Dccl => {
            let target = take(dense, "emb.target", v, d)?.value;
            let w1 = take_any(dense, "dccl.w1")?;
            let eh = w1.rows();
            let b1 = take(dense, "dccl.b1", 1, eh)?.value;
            let w2 = take(dense, "dccl.w2", m * k, eh)?.value;
            let b2 = take(dense, "dccl.b2", 1, m * k)?.value;
            let encoder = DcclEncoder::from_parts(m, k, w1, b1, w2, b2)?;
            let books = CodebookSet::from_table(m, k, take(dense, "dccl.codebooks", m * k, d)?.value)?;
            EmbeddingSource::Dccl { target, model: DcclModel { encoder, books } }
        }
        SourceKind::Codes => {
            let codes = codes.ok_or_else(|| Error::format("checkpoint is missing tensor `emb.codes`"))?;
            let books = CodebookSet::from_table(m, k, take(dense, "dccl.codebooks", m * k, d)?.value)?;
            EmbeddingSource::Codes { codes, books }
        }
        SourceKind::Factorized => {
            let small = take_any(dense, "emb.small")?;
            let r = small.cols();
            EmbeddingSource::Factorized {
                small: Parameter::new("emb.small", small),
                projection: take(dense, "emb.proj", r, d)?,
            }
        }
    };
    let t = h.schema.num_tags();
    let fwd = take_lstm(dense, "lstm.fwd", d, hd)?;
    let bwd = take_lstm(dense, "lstm.bwd", d, hd)?;
    let dc = take_dense(dense, "dc", h.schema.num_domains(), 2 * hd)?;
    let ic = take_dense(dense, "ic", h.schema.num_intents(), 2 * hd)?;
    let emit = take_dense(dense, "ner", t, 2 * hd)?;
    let transitions = take(dense, "crf.trans", t + 2, t + 2)?;
    if let Some(extra) = dense.keys().next() {
        return Err(Error::format(format!("unexpected tensor `{extra}`")));
    }
    if !(0.0..1.0).contains(&h.dropout) {
        return Err(Error::format(format!("dropout {} out of range", h.dropout)));
    }
    let model = NluModel {
        schema: h.schema,
        vocab: h.vocab,
        source: EmbeddingSource::raw(Matrix::zeros(v, d)),
        fwd,
        bwd,
        dc,
        ic,
        emit,
        transitions,
        dropout: h.dropout,
        quantized,
    };
    model.with_source(source).map_err(|e| Error::format(format!("inconsistent checkpoint: {e}")))
}

pub fn save_model(path: &Path, model: &NluModel) -> Result<()> {
    binio::write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<NluModel> {
    model_from_bytes(&fs::read(path)?)
}
