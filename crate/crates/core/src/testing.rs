//! Small fixtures shared by unit tests, integration tests and the acceptance
//! suite.

use crate::dccl::{CodeMatrix, CodebookSet, DcclEncoder, DcclModel, EncodeOptions};
use crate::embio::{EmbeddingMatrix, Vocabulary};
use crate::nlu::{EmbeddingSource, NluModel, TagSchema, Utterance};
use crate::numerics::{dot, Matrix, Rng};

/// Three domains and intents (the last ones OOD) and `t` tags, `Other` first.
pub fn toy_schema(t: usize) -> TagSchema {
    let tags: Vec<String> = std::iter::once("Other".to_string()).chain((1..t).map(|i| format!("t{i}"))).collect();
    TagSchema::new(
        vec!["d1".into(), "d2".into(), "OOD".into()],
        vec!["i1".into(), "i2".into(), "OODIntent".into()],
        tags,
    )
    .unwrap()
}

/// Randomly initialized model over `v` words (id 0 is `<unk>`) with a raw
/// `v x d` table, hidden size `h` and `t` tags.
pub fn toy_model(v: usize, d: usize, h: usize, t: usize, seed: u64) -> NluModel {
    let mut rng = Rng::new(seed);
    let vocab = Vocabulary::new((1..v).map(|i| format!("w{i}"))).unwrap();
    let emb = EmbeddingMatrix::new(vocab, Matrix::random_normal(v, d, 1.0, &mut rng)).unwrap();
    let mut m = NluModel::new(toy_schema(t), emb, h, &mut rng).unwrap();
    m.transitions.value = Matrix::random_normal(t + 2, t + 2, 0.5, &mut rng);
    m
}

/// `n` utterances of length 1..=4 with uniform random labels.
pub fn toy_batch(v: usize, t: usize, n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let l = 1 + rng.below(4);
            Utterance {
                tokens: (0..l).map(|_| rng.below(v)).collect(),
                domain: rng.below(3),
                intent: rng.below(3),
                slots: (0..l).map(|_| rng.below(t)).collect(),
            }
        })
        .collect()
}

/// `Codes` and `Dccl` sources that reproduce the raw table of `m` exactly:
/// one codebook holding every row, and an encoder whose nearest-row logits
/// pick each word's own row.
pub fn lossless_sources(m: &NluModel) -> (EmbeddingSource, EmbeddingSource) {
    let table = m.source.table().unwrap();
    let (v, d) = table.shape();
    let books = CodebookSet::from_books(std::slice::from_ref(&table)).unwrap();
    let codes = CodeMatrix::new(v, 1, v, (0..v as u32).collect()).unwrap();
    let mut w1 = Matrix::identity(d);
    w1.scale(0.25);
    let mut w2 = Matrix::zeros(v, d);
    let mut b2 = Matrix::zeros(1, v);
    for r in 0..v {
        let u: Vec<f64> = table.row(r).iter().map(|x| (0.25 * x).tanh()).collect();
        b2.set(0, r, -0.5 * dot(&u, &u));
        w2.row_mut(r).copy_from_slice(&u);
    }
    let encoder = DcclEncoder::from_parts(1, v, w1, Matrix::zeros(1, d), w2, b2).unwrap();
    let model = DcclModel { encoder, books: books.clone() };
    (EmbeddingSource::Codes { codes, books }, EmbeddingSource::Dccl { target: table, model })
}

/// Per word of a reference pass: the soft sample of every codebook, the
/// reconstruction-loss gradient and the chosen codes.
pub type StReference = Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)>;

/// Reference pass for [`st_surrogate`] over rows `ids` of `w`, with the
/// loss `mean_i |rec_i - w_i|^2`.
pub fn st_reference(m: &DcclModel, w: &Matrix, ids: &[usize], opts: &EncodeOptions) -> StReference {
    let n = ids.len() as f64;
    ids.iter()
        .map(|&id| {
            let mut r = Rng::new(0);
            let (rec, enc) = m.forward(w.row(id), opts, &mut r).unwrap();
            let g = rec.iter().zip(w.row(id)).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let soft = enc.samples.iter().map(|s| s.soft.clone()).collect();
            (soft, g, enc.codes())
        })
        .collect()
}

/// First-order term the straight-through estimator differentiates:
/// `Σ_i Σ_m (soft_m - soft_m^ref) · (C_m g_i)`, zero at the reference.
/// Panics if a perturbation flips a hard code.
pub fn st_surrogate(m: &DcclModel, w: &Matrix, ids: &[usize], opts: &EncodeOptions, reference: &StReference) -> f64 {
    let mut total = 0.0;
    for (&id, (soft_ref, g, codes)) in ids.iter().zip(reference) {
        let mut r = Rng::new(0);
        let enc = m.encoder.encode_word(w.row(id), opts.tau, &mut r, opts.mode).unwrap();
        for (mi, s) in enc.samples.iter().enumerate() {
            assert_eq!(s.index, codes[mi], "perturbation flipped a code");
            for kk in 0..s.soft.len() {
                total += (s.soft[kk] - soft_ref[mi][kk]) * dot(m.books.codeword(mi, kk), g);
            }
        }
    }
    total
}
