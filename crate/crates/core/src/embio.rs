//! Vocabularies and embedding matrices, with a text interchange format and
//! the binary `EMB1` container.
//!
//! `EMB1` layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | V: u64 | D: u64 | V*D f32 row-major | V x (len: u32, UTF-8 bytes)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const UNK: &str = "<unk>";
const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Ordered set of unique tokens with `<unk>` pinned at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary, moving (or inserting) `<unk>` to index 0.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK.to_string()];
        list.extend(tokens.into_iter().map(Into::into).filter(|t| t != UNK));
        Self::from_ordered(list)
    }

    /// Uses `tokens` verbatim; the first one must be `<unk>`.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::format("vocabulary must start with <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or of `<unk>` when it is unknown.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for t in &self.tokens {
            binio::write_str(w, t)?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: std::io::Read>(r: &mut R, count: usize) -> Result<Self> {
        let tokens = (0..count)
            .map(|_| binio::read_str(r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_ordered(tokens)
    }

    pub(crate) fn serialized_len(&self) -> usize {
        self.tokens.iter().map(|t| binio::str_len(t)).sum()
    }
}

/// A `V x D` embedding table aligned with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub weights: Matrix,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, weights: Matrix) -> Result<Self> {
        if weights.rows() != vocab.len() {
            return Err(Error::dim(format!(
                "{} embedding rows for a vocabulary of {}",
                weights.rows(),
                vocab.len()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::param("embedding contains non-finite values"));
        }
        Ok(EmbeddingMatrix { vocab, weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.weights.row(self.vocab.id(token))
    }

    /// Bytes of the raw float payload, `V * D * 4`.
    pub fn payload_bytes(&self) -> usize {
        self.weights.len() * 4
    }
}

/// Reads the `"V D"` header + `token v1 .. vD` text format. A missing
/// `<unk>` row is prepended as the mean of all vectors.
pub fn load_text_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(path)?;
    parse_text_embeddings(&text)
}

pub fn parse_text_embeddings(text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format("empty embedding file"))?;
    let mut parts = header.split_whitespace();
    let parse_count = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected `V D` header, got `{header}`"),
        })
    };
    let count = parse_count(parts.next())?;
    let dim = parse_count(parts.next())?;
    if dim == 0 {
        return Err(Error::format("embedding dimension must be positive"));
    }

    let mut tokens = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line");
        let before = data.len();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::format(format!(
                "line {line_no}: expected {dim} values for `{token}`, got {}",
                data.len() - before
            )));
        }
        tokens.push(token.to_string());
    }
    if tokens.len() != count {
        return Err(Error::format(format!(
            "header announces {count} vectors, file has {}",
            tokens.len()
        )));
    }

    let rows = Matrix::new(tokens.len(), dim, data)?;
    let unk_row = match tokens.iter().position(|t| t == UNK) {
        Some(i) => rows.row(i).to_vec(),
        None => {
            let mut mean = vec![0.0; dim];
            for r in 0..rows.rows() {
                for (m, v) in mean.iter_mut().zip(rows.row(r)) {
                    *m += v;
                }
            }
            let n = rows.rows().max(1) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        }
    };
    let vocab = Vocabulary::new(tokens.iter().cloned())?;
    let mut weights = Matrix::zeros(vocab.len(), dim);
    weights.row_mut(0).copy_from_slice(&unk_row);
    for (i, t) in tokens.iter().enumerate() {
        if t != UNK {
            let id = vocab.id(t);
            weights.row_mut(id).copy_from_slice(rows.row(i));
        }
    }
    EmbeddingMatrix::new(vocab, weights)
}

/// Writes the text format; each value is printed as the shortest decimal
/// that round-trips its `f32` value.
pub fn save_text_embeddings(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", emb.len(), emb.dim()));
    for (i, token) in emb.vocab.tokens().iter().enumerate() {
        out.push_str(token);
        for v in emb.weights.row(i) {
            out.push(' ');
            out.push_str(&format!("{v:.8e}"));
        }
        out.push('\n');
    }
    binio::write_atomic(path, out.as_bytes())
}

pub fn embeddings_to_bytes(emb: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.write_u64::<LittleEndian>(emb.len() as u64).unwrap();
    buf.write_u64::<LittleEndian>(emb.dim() as u64).unwrap();
    binio::write_f32s(&mut buf, &emb.weights).unwrap();
    emb.vocab.write_to(&mut buf).unwrap();
    buf
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = Cursor::new(bytes);
    binio::expect_magic(&mut r, EMB_MAGIC)?;
    let v = binio::read_u64(&mut r)? as usize;
    let d = binio::read_u64(&mut r)? as usize;
    if v.saturating_mul(d).saturating_mul(4) > bytes.len() {
        return Err(Error::format("EMB1 header larger than file"));
    }
    let weights = binio::read_f32s(&mut r, v, d)?;
    let vocab = Vocabulary::read_from(&mut r, v)?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::format("trailing bytes after EMB1 vocabulary"));
    }
    EmbeddingMatrix::new(vocab, weights)
}

pub fn save_binary(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    binio::write_atomic(path, &embeddings_to_bytes(emb))
}

pub fn load_binary(path: &Path) -> Result<EmbeddingMatrix> {
    embeddings_from_bytes(&fs::read(path)?)
}
