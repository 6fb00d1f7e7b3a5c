//! Error rates, relative changes, per-frequency-decile reconstruction error
//! and size accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::dccl::{compression_rate, DcclModel, EncodeOptions};
use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nlu::{checkpoint_layout, NluModel, Prediction, SourceKind, TagSchema, Utterance};
use crate::numerics::{squared_distance, Rng};

/// `errors / total`, undefined when `total` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub errors: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.errors as f64 / self.total as f64)
    }
}

pub const METRIC_NAMES: [&str; 5] = ["IRER", "ICER", "DCER", "SER", "FAR"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Exact-match error over non-OOD utterances.
    pub irer: Ratio,
    pub icer: Ratio,
    pub dcer: Ratio,
    /// Over every token position.
    pub ser: Ratio,
    /// OOD utterances whose predicted domain is not OOD.
    pub far: Ratio,
}

impl MetricsReport {
    pub fn ratios(&self) -> [Ratio; 5] {
        [self.irer, self.icer, self.dcer, self.ser, self.far]
    }

    pub fn values(&self) -> [Option<f64>; 5] {
        self.ratios().map(|r| r.value())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("metric  value     errors  total\n");
        for (name, r) in METRIC_NAMES.iter().zip(self.ratios()) {
            let v = r.value().map_or("absent".to_string(), |v| format!("{v:.6}"));
            writeln!(s, "{name:<6}  {v:<8}  {:>6}  {:>5}", r.errors, r.total).unwrap();
        }
        s
    }
}

/// Scores predictions against gold labels.
pub fn score(gold: &[Utterance], predictions: &[Prediction], schema: &TagSchema) -> Result<MetricsReport> {
    if gold.len() != predictions.len() {
        return Err(Error::param(format!("{} utterances but {} predictions", gold.len(), predictions.len())));
    }
    let zero = Ratio { errors: 0, total: 0 };
    let mut r = MetricsReport { irer: zero, icer: zero, dcer: zero, ser: zero, far: zero };
    let ood = schema.ood_domain();
    for (u, p) in gold.iter().zip(predictions) {
        schema.validate(u)?;
        if p.slots.len() != u.len() {
            return Err(Error::Label("prediction length differs from utterance".into()));
        }
        let domain_ok = p.domain == u.domain;
        let intent_ok = p.intent == u.intent;
        let slot_errors = u.slots.iter().zip(&p.slots).filter(|(a, b)| a != b).count();
        r.dcer.total += 1;
        r.dcer.errors += usize::from(!domain_ok);
        r.icer.total += 1;
        r.icer.errors += usize::from(!intent_ok);
        r.ser.total += u.len();
        r.ser.errors += slot_errors;
        if u.domain == ood {
            r.far.total += 1;
            r.far.errors += usize::from(p.domain != ood);
        } else {
            r.irer.total += 1;
            r.irer.errors += usize::from(!(domain_ok && intent_ok && slot_errors == 0));
        }
    }
    Ok(r)
}

pub fn evaluate(model: &NluModel, corpus: &Corpus) -> Result<MetricsReport> {
    if model.schema != corpus.schema {
        return Err(Error::Label("model and corpus label schemas differ".into()));
    }
    if model.vocab != corpus.vocab {
        return Err(Error::dim("model and corpus vocabularies differ"));
    }
    let preds = model.predict_batch(&corpus.utterances)?;
    score(&corpus.utterances, &preds, &corpus.schema)
}

/// Signed percentage change per metric; `None` with a note where the
/// baseline or candidate value is missing or the baseline is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeChange {
    pub changes: [Option<f64>; 5],
    pub notes: Vec<String>,
}

impl RelativeChange {
    pub fn get(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == metric).and_then(|i| self.changes[i])
    }
}

pub fn relative_change(candidate: &MetricsReport, baseline: &MetricsReport) -> RelativeChange {
    let mut notes = Vec::new();
    let mut changes = [None; 5];
    for (i, (c, b)) in candidate.values().into_iter().zip(baseline.values()).enumerate() {
        changes[i] = match (c, b) {
            (Some(c), Some(b)) if b > 0.0 => Some(100.0 * (c - b) / b),
            (_, Some(_)) if c.is_some() => {
                notes.push(format!("{}: baseline is 0", METRIC_NAMES[i]));
                None
            }
            _ => {
                notes.push(format!("{}: undefined on this corpus", METRIC_NAMES[i]));
                None
            }
        };
    }
    RelativeChange { changes, notes }
}

pub fn format_change(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |v| format!("{v:+.2}"))
}

/// Mean reconstruction error of one frequency decile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBucket {
    pub words: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub mean_mse: f64,
}

/// Deciles ordered from most to least frequent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub buckets: Vec<DecileBucket>,
}

impl DecileReport {
    /// Bucket-size weighted mean, i.e. the mean over all words.
    pub fn global_mean(&self) -> f64 {
        let n: usize = self.buckets.iter().map(|b| b.words).sum();
        self.buckets.iter().map(|b| b.mean_mse * b.words as f64).sum::<f64>() / n as f64
    }

    /// Top decile mean over bottom decile mean.
    pub fn top_bottom_ratio(&self) -> f64 {
        self.buckets[0].mean_mse / self.buckets[self.buckets.len() - 1].mean_mse
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("decile  words  counts          mean_mse\n");
        for (i, b) in self.buckets.iter().enumerate() {
            writeln!(s, "{:>6}  {:>5}  {:>6}..{:<6}  {:.6}", i + 1, b.words, b.min_count, b.max_count, b.mean_mse).unwrap();
        }
        s
    }
}

/// Ranks words by corpus frequency (ties by id) and reports the mean
/// squared reconstruction error per decile. Words absent from the corpus
/// rank last.
pub fn frequency_bucket_recon_report(emb: &EmbeddingMatrix, model: &DcclModel, corpus: &Corpus) -> Result<DecileReport> {
    if emb.vocab != corpus.vocab {
        return Err(Error::dim("embedding and corpus vocabularies differ"));
    }
    let v = emb.len();
    if v < 10 {
        return Err(Error::param("need at least 10 words for deciles"));
    }
    let counts = corpus.token_counts();
    let mut rng = Rng::new(0);
    let opts = EncodeOptions::deterministic();
    let mut errors = Vec::with_capacity(v);
    for id in 0..v {
        let w = emb.weights.row(id);
        let (rec, _) = model.forward(w, &opts, &mut rng)?;
        errors.push(squared_distance(w, &rec));
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut buckets = Vec::with_capacity(10);
    let mut start = 0;
    for d in 0..10 {
        let size = v / 10 + usize::from(d < v % 10);
        let ids = &order[start..start + size];
        start += size;
        buckets.push(DecileBucket {
            words: size,
            min_count: ids.iter().map(|&i| counts[i]).min().unwrap(),
            max_count: ids.iter().map(|&i| counts[i]).max().unwrap(),
            mean_mse: ids.iter().map(|&i| errors[i]).sum::<f64>() / size as f64,
        });
    }
    Ok(DecileReport { buckets })
}

/// On-disk sizes of a baseline and a candidate checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub baseline_model_bytes: usize,
    pub model_bytes: usize,
    pub baseline_embedding_bytes: usize,
    pub embedding_bytes: usize,
    /// Per tensor payload bytes of the candidate.
    pub components: BTreeMap<String, usize>,
    pub source: String,
    pub model_rate: f64,
    pub embedding_rate: f64,
}

pub fn size_report_from_bytes(baseline: &[u8], candidate: &[u8]) -> Result<SizeReport> {
    let b = checkpoint_layout(baseline)?;
    let c = checkpoint_layout(candidate)?;
    Ok(SizeReport {
        baseline_model_bytes: b.total_bytes,
        model_bytes: c.total_bytes,
        baseline_embedding_bytes: b.embedding_payload_bytes(),
        embedding_bytes: c.embedding_payload_bytes(),
        components: c.tensors.iter().map(|t| (t.name.clone(), t.payload_bytes)).collect(),
        source: c.source.name().to_string(),
        model_rate: compression_rate(b.total_bytes, c.total_bytes)?,
        embedding_rate: compression_rate(b.embedding_payload_bytes(), c.embedding_payload_bytes())?,
    })
}

pub fn size_report(baseline: &Path, candidate: &Path) -> Result<SizeReport> {
    size_report_from_bytes(&fs::read(baseline)?, &fs::read(candidate)?)
}

/// Kind of embedding source stored in a checkpoint.
pub fn checkpoint_source(bytes: &[u8]) -> Result<SourceKind> {
    Ok(checkpoint_layout(bytes)?.source)
}
