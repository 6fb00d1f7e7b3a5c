use std::collections::BTreeMap;

use crate::dccl::{CodeMatrix, CodebookSet, CompressedEmbeddings, DcclModel, EncodeOptions, Encoding};
use crate::embio::{EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::nlu::crf::{crf_nll, crf_nll_with_grad, viterbi};
use crate::nlu::lstm::{Dense, Lstm, LstmStep};
use crate::nlu::schema::{TagSchema, Utterance};
use crate::numerics::{argmax, log_sum_exp, softmax, squared_distance, HasParameters, Matrix, Parameter, Rng};
use crate::quant8::QuantizedMatrix;
use crate::svdcomp::FactorizedLayer;

/// Where token vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    /// Trainable `V x D` table.
    Raw(Parameter),
    /// Compression layers applied inline to the fixed table `target`.
    Dccl { target: Matrix, model: DcclModel },
    /// Frozen codes looked up in a codebook set.
    Codes { codes: CodeMatrix, books: CodebookSet },
    /// `small[id] · projection`.
    Factorized { small: Parameter, projection: Parameter },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Raw,
    Dccl,
    Codes,
    Factorized,
}

impl SourceKind {
    pub fn tag(self) -> u8 {
        match self {
            SourceKind::Raw => 0,
            SourceKind::Dccl => 1,
            SourceKind::Codes => 2,
            SourceKind::Factorized => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => SourceKind::Raw,
            1 => SourceKind::Dccl,
            2 => SourceKind::Codes,
            3 => SourceKind::Factorized,
            t => return Err(Error::format(format!("unknown embedding source tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Raw => "raw",
            SourceKind::Dccl => "dccl",
            SourceKind::Codes => "dccl-codes",
            SourceKind::Factorized => "svd-factorized",
        }
    }
}

impl EmbeddingSource {
    pub fn raw(table: Matrix) -> Self {
        EmbeddingSource::Raw(Parameter::new("emb.table", table))
    }

    pub fn factorized(layer: FactorizedLayer) -> Self {
        EmbeddingSource::Factorized {
            small: Parameter::new("emb.small", layer.small),
            projection: Parameter::new("emb.proj", layer.projection),
        }
    }

    pub fn codes(compressed: CompressedEmbeddings) -> Self {
        EmbeddingSource::Codes {
            codes: compressed.codes,
            books: compressed.books,
        }
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            EmbeddingSource::Raw(_) => SourceKind::Raw,
            EmbeddingSource::Dccl { .. } => SourceKind::Dccl,
            EmbeddingSource::Codes { .. } => SourceKind::Codes,
            EmbeddingSource::Factorized { .. } => SourceKind::Factorized,
        }
    }

    pub fn num_words(&self) -> usize {
        match self {
            EmbeddingSource::Raw(t) => t.value.rows(),
            EmbeddingSource::Dccl { target, .. } => target.rows(),
            EmbeddingSource::Codes { codes, .. } => codes.num_words(),
            EmbeddingSource::Factorized { small, .. } => small.value.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Raw(t) => t.value.cols(),
            EmbeddingSource::Dccl { target, .. } => target.cols(),
            EmbeddingSource::Codes { books, .. } => books.dim(),
            EmbeddingSource::Factorized { projection, .. } => projection.value.cols(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EmbeddingSource::Dccl { target, model } if target.cols() != model.dim() || model.encoder.input_dim() != model.dim() => {
                Err(Error::dim("DCCL layers and target table disagree on D"))
            }
            EmbeddingSource::Codes { codes, books }
                if codes.num_books() != books.num_books() || codes.num_codewords() != books.num_codewords() =>
            {
                Err(Error::dim("codes and codebooks disagree on M or K"))
            }
            EmbeddingSource::Factorized { small, projection } if small.value.cols() != projection.value.rows() => {
                Err(Error::dim("factor ranks disagree"))
            }
            _ => Ok(()),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            EmbeddingSource::Raw(t) => vec![t],
            EmbeddingSource::Dccl { model, .. } => model.parameters_mut(),
            EmbeddingSource::Codes { books, .. } => vec![&mut books.table],
            EmbeddingSource::Factorized { small, projection } => vec![small, projection],
        }
    }

    /// Vector for word `id` (already clamped to the vocabulary). DCCL
    /// encodings are returned for the backward pass.
    fn lookup(&self, id: usize, opts: &EncodeOptions, rng: &mut Rng) -> Result<(Vec<f64>, Option<Encoding>)> {
        Ok(match self {
            EmbeddingSource::Raw(t) => (t.value.row(id).to_vec(), None),
            EmbeddingSource::Dccl { target, model } => {
                let (rec, enc) = model.forward(target.row(id), opts, rng)?;
                (rec, Some(enc))
            }
            EmbeddingSource::Codes { codes, books } => (books.reconstruct(&codes.row(id))?, None),
            EmbeddingSource::Factorized { small, projection } => {
                let mut out = vec![0.0; projection.value.cols()];
                projection.value.matvec_t_acc(small.value.row(id), &mut out);
                (out, None)
            }
        })
    }

    fn backward(&mut self, id: usize, enc: Option<&Encoding>, d_x: &[f64], opts: &EncodeOptions) {
        match self {
            EmbeddingSource::Raw(t) => {
                for (g, d) in t.grad.row_mut(id).iter_mut().zip(d_x) {
                    *g += d;
                }
            }
            EmbeddingSource::Dccl { target, model } => {
                model.backward(target.row(id), enc.expect("DCCL lookups keep encodings"), d_x, opts);
            }
            EmbeddingSource::Codes { .. } => {}
            EmbeddingSource::Factorized { small, projection } => {
                let row = small.value.row(id).to_vec();
                let d_small = projection.value.matvec(d_x);
                for (g, d) in small.grad.row_mut(id).iter_mut().zip(&d_small) {
                    *g += d;
                }
                projection.grad.add_outer(&row, d_x);
            }
        }
    }

    /// Materialized `V x D` table under deterministic encoding.
    pub fn table(&self) -> Result<Matrix> {
        let mut rng = Rng::new(0);
        let opts = EncodeOptions::deterministic();
        let mut out = Matrix::zeros(self.num_words(), self.dim());
        for id in 0..self.num_words() {
            let (v, _) = self.lookup(id, &opts, &mut rng)?;
            out.row_mut(id).copy_from_slice(&v);
        }
        Ok(out)
    }
}

/// Task-layer outputs for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct NluOutput {
    pub domain_logits: Vec<f64>,
    pub intent_logits: Vec<f64>,
    /// `L x T`
    pub emissions: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prediction {
    pub domain: usize,
    pub intent: usize,
    pub slots: Vec<usize>,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub domain: f64,
    pub intent: f64,
    pub slots: f64,
    /// Batch reconstruction loss, when requested.
    pub reconstruction: Option<f64>,
    /// `domain + intent + slots (+ weight * reconstruction)`.
    pub total: f64,
}

impl LossParts {
    pub fn nlu(&self) -> f64 {
        self.domain + self.intent + self.slots
    }
}

/// Shared BiLSTM with domain and intent heads and a CRF slot tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct NluModel {
    pub schema: TagSchema,
    pub vocab: Vocabulary,
    pub source: EmbeddingSource,
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub dc: Dense,
    pub ic: Dense,
    pub emit: Dense,
    /// `(T+2) x (T+2)`, see [`crate::nlu::crf`].
    pub transitions: Parameter,
    pub dropout: f64,
    /// Tensors stored 8-bit; their parameter values hold the dequantized
    /// matrices.
    pub quantized: BTreeMap<String, QuantizedMatrix>,
}

struct Cache {
    ids: Vec<usize>,
    xs: Vec<Vec<f64>>,
    xs_rev: Vec<Vec<f64>>,
    encodings: Vec<Option<Encoding>>,
    steps_f: Vec<LstmStep>,
    steps_b: Vec<LstmStep>,
    feats: Vec<Vec<f64>>,
    feat_masks: Option<Vec<Vec<f64>>>,
    sentence: Vec<f64>,
    sentence_mask: Option<Vec<f64>>,
}

struct OutputGrads {
    d_domain: Vec<f64>,
    d_intent: Vec<f64>,
    d_emissions: Matrix,
    d_transitions: Matrix,
}

fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
}

fn cross_entropy(logits: &[f64], gold: usize) -> f64 {
    log_sum_exp(logits) - logits[gold]
}

fn cross_entropy_grad(logits: &[f64], gold: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[gold] -= 1.0;
    p
}

impl HasParameters for NluModel {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.source.parameters_mut();
        ps.extend(task_parameters(
            &mut self.fwd,
            &mut self.bwd,
            &mut self.dc,
            &mut self.ic,
            &mut self.emit,
            &mut self.transitions,
        ));
        ps
    }
}

fn task_parameters<'a>(
    fwd: &'a mut Lstm,
    bwd: &'a mut Lstm,
    dc: &'a mut Dense,
    ic: &'a mut Dense,
    emit: &'a mut Dense,
    transitions: &'a mut Parameter,
) -> Vec<&'a mut Parameter> {
    let mut ps = fwd.parameters_mut();
    ps.extend(bwd.parameters_mut());
    ps.extend(dc.parameters_mut());
    ps.extend(ic.parameters_mut());
    ps.extend(emit.parameters_mut());
    ps.push(transitions);
    ps
}

impl NluModel {
    /// Fresh model over a raw embedding table.
    pub fn new(schema: TagSchema, embeddings: EmbeddingMatrix, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::param("hidden size must be positive"));
        }
        let d = embeddings.dim();
        let t = schema.num_tags();
        let fwd = Lstm::new("lstm.fwd", d, hidden, rng);
        let bwd = Lstm::new("lstm.bwd", d, hidden, rng);
        let dc = Dense::new("dc", 2 * hidden, schema.num_domains(), rng);
        let ic = Dense::new("ic", 2 * hidden, schema.num_intents(), rng);
        let emit = Dense::new("ner", 2 * hidden, t, rng);
        Ok(NluModel {
            source: EmbeddingSource::raw(embeddings.weights),
            vocab: embeddings.vocab,
            fwd,
            bwd,
            dc,
            ic,
            emit,
            transitions: Parameter::new("crf.trans", Matrix::zeros(t + 2, t + 2)),
            schema,
            dropout: 0.0,
            quantized: BTreeMap::new(),
        })
    }

    /// Replaces the embedding source, keeping every task layer.
    pub fn with_source(mut self, source: EmbeddingSource) -> Result<Self> {
        source.validate()?;
        if source.num_words() != self.vocab.len() {
            return Err(Error::dim(format!(
                "source has {} words, vocabulary {}",
                source.num_words(),
                self.vocab.len()
            )));
        }
        if source.dim() != self.input_dim() {
            return Err(Error::dim(format!(
                "source dimension {} but the LSTM expects {}",
                source.dim(),
                self.input_dim()
            )));
        }
        self.source = source;
        Ok(self)
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn task_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        task_parameters(
            &mut self.fwd,
            &mut self.bwd,
            &mut self.dc,
            &mut self.ic,
            &mut self.emit,
            &mut self.transitions,
        )
    }

    /// Parameters by name, for serialization and inspection.
    pub fn named_tensors(&mut self) -> Vec<(String, Matrix)> {
        self.parameters_mut()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    fn clamp_id(&self, id: usize) -> usize {
        if id < self.source.num_words() {
            id
        } else {
            0
        }
    }

    fn run(&self, tokens: &[usize], opts: &EncodeOptions, rng: &mut Rng, dropout_rng: Option<&mut Rng>) -> Result<(Cache, NluOutput)> {
        if tokens.is_empty() {
            return Err(Error::param("empty utterance"));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| self.clamp_id(t)).collect();
        let mut xs = Vec::with_capacity(ids.len());
        let mut encodings = Vec::with_capacity(ids.len());
        for &id in &ids {
            let (x, enc) = self.source.lookup(id, opts, rng)?;
            xs.push(x);
            encodings.push(enc);
        }
        let (hf, steps_f) = self.fwd.forward(&xs);
        let xs_rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let (hb_rev, steps_b) = self.bwd.forward(&xs_rev);
        let l = xs.len();
        let h = self.hidden();
        let mut feats: Vec<Vec<f64>> = (0..l)
            .map(|t| {
                let mut f = Vec::with_capacity(2 * h);
                f.extend_from_slice(&hf[t]);
                f.extend_from_slice(&hb_rev[l - 1 - t]);
                f
            })
            .collect();
        let mut sentence = Vec::with_capacity(2 * h);
        sentence.extend_from_slice(&hf[l - 1]);
        sentence.extend_from_slice(&hb_rev[l - 1]);

        let (mut feat_masks, mut sentence_mask) = (None, None);
        if self.dropout > 0.0 {
            if let Some(drng) = dropout_rng {
                feat_masks = Some((0..l).map(|_| dropout_mask(2 * h, self.dropout, drng)).collect::<Vec<_>>());
                sentence_mask = Some(dropout_mask(2 * h, self.dropout, drng));
            }
        }
        if let Some(masks) = &feat_masks {
            for (f, m) in feats.iter_mut().zip(masks) {
                apply_mask(f, &Some(m.clone()));
            }
        }
        apply_mask(&mut sentence, &sentence_mask);

        let t = self.schema.num_tags();
        let mut emissions = Matrix::zeros(l, t);
        for (i, f) in feats.iter().enumerate() {
            emissions.row_mut(i).copy_from_slice(&self.emit.forward(f));
        }
        let out = NluOutput {
            domain_logits: self.dc.forward(&sentence),
            intent_logits: self.ic.forward(&sentence),
            emissions,
        };
        let cache = Cache {
            ids,
            xs,
            xs_rev,
            encodings,
            steps_f,
            steps_b,
            feats,
            feat_masks,
            sentence,
            sentence_mask,
        };
        Ok((cache, out))
    }

    /// Logits and emissions for one token sequence. Out-of-vocabulary ids
    /// read the `<unk>` row.
    pub fn forward(&self, tokens: &[usize], opts: &EncodeOptions, rng: &mut Rng) -> Result<NluOutput> {
        Ok(self.run(tokens, opts, rng, None)?.1)
    }

    /// Argmax domain and intent and the Viterbi slot path, with noise-free
    /// embeddings.
    pub fn predict(&self, tokens: &[usize]) -> Result<Prediction> {
        let out = self.forward(tokens, &EncodeOptions::deterministic(), &mut Rng::new(0))?;
        Ok(Prediction {
            domain: argmax(&out.domain_logits),
            intent: argmax(&out.intent_logits),
            slots: viterbi(&out.emissions, &self.transitions.value)?,
        })
    }

    pub fn predict_batch(&self, utterances: &[Utterance]) -> Result<Vec<Prediction>> {
        utterances.iter().map(|u| self.predict(&u.tokens)).collect()
    }

    fn backward(&mut self, cache: &Cache, grads: &OutputGrads, scale: f64, recon: Option<&[Vec<f64>]>, opts: &EncodeOptions) {
        let h = self.hidden();
        let l = cache.xs.len();
        let s = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * scale).collect() };

        let mut d_sentence = vec![0.0; 2 * h];
        self.dc.backward(&cache.sentence, &s(&grads.d_domain), &mut d_sentence);
        self.ic.backward(&cache.sentence, &s(&grads.d_intent), &mut d_sentence);
        apply_mask(&mut d_sentence, &cache.sentence_mask);

        let mut dh_f = vec![vec![0.0; h]; l];
        let mut dh_b_rev = vec![vec![0.0; h]; l];
        for t in 0..l {
            let mut d_feat = vec![0.0; 2 * h];
            self.emit.backward(&cache.feats[t], &s(grads.d_emissions.row(t)), &mut d_feat);
            if let Some(masks) = &cache.feat_masks {
                d_feat.iter_mut().zip(&masks[t]).for_each(|(d, k)| *d *= k);
            }
            dh_f[t].copy_from_slice(&d_feat[..h]);
            dh_b_rev[l - 1 - t].copy_from_slice(&d_feat[h..]);
        }
        for j in 0..h {
            dh_f[l - 1][j] += d_sentence[j];
            dh_b_rev[l - 1][j] += d_sentence[h + j];
        }
        self.transitions.grad.add_scaled(scale, &grads.d_transitions).expect("same shape");

        let dx_f = self.fwd.backward(&cache.xs, &cache.steps_f, &dh_f);
        let dx_b_rev = self.bwd.backward(&cache.xs_rev, &cache.steps_b, &dh_b_rev);
        for t in 0..l {
            let mut dx = dx_f[t].clone();
            for (a, b) in dx.iter_mut().zip(&dx_b_rev[l - 1 - t]) {
                *a += b;
            }
            if let Some(r) = recon {
                for (a, b) in dx.iter_mut().zip(&r[t]) {
                    *a += b;
                }
            }
            self.source.backward(cache.ids[t], cache.encodings[t].as_ref(), &dx, opts);
        }
    }

    /// Batch-mean NLU loss, optionally plus `weight *` the reconstruction
    /// loss over the batch's token occurrences (DCCL source only).
    ///
    /// With `with_grad` set, gradients of the total are accumulated into
    /// every parameter. `dropout_rng` enables dropout when the model has a
    /// positive rate.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &mut self,
        batch: &[&Utterance],
        opts: &EncodeOptions,
        rng: &mut Rng,
        mut dropout_rng: Option<&mut Rng>,
        reconstruction_weight: Option<f64>,
        with_grad: bool,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::param("empty batch"));
        }
        if reconstruction_weight.is_some() && !matches!(self.source, EmbeddingSource::Dccl { .. }) {
            return Err(Error::param("reconstruction loss needs a DCCL embedding source"));
        }
        let b = batch.len() as f64;
        let n_tokens: usize = batch.iter().map(|u| u.len()).sum();
        let (mut ld, mut li, mut ls, mut le) = (0.0, 0.0, 0.0, 0.0);
        for u in batch {
            self.schema.validate(u)?;
            let (cache, out) = self.run(&u.tokens, opts, rng, dropout_rng.as_deref_mut())?;
            ld += cross_entropy(&out.domain_logits, u.domain);
            li += cross_entropy(&out.intent_logits, u.intent);
            let mut recon_grads = None;
            if let (Some(weight), EmbeddingSource::Dccl { target, .. }) = (reconstruction_weight, &self.source) {
                let mut rg = Vec::with_capacity(u.len());
                for (x, &id) in cache.xs.iter().zip(&cache.ids) {
                    let w = target.row(id);
                    le += squared_distance(w, x);
                    rg.push(x.iter().zip(w).map(|(r, t)| weight * 2.0 * (r - t) / n_tokens as f64).collect::<Vec<_>>());
                }
                recon_grads = Some(rg);
            }
            if with_grad {
                let (nll, d_emissions, d_transitions) = crf_nll_with_grad(&out.emissions, &self.transitions.value, &u.slots)?;
                ls += nll;
                let grads = OutputGrads {
                    d_domain: cross_entropy_grad(&out.domain_logits, u.domain),
                    d_intent: cross_entropy_grad(&out.intent_logits, u.intent),
                    d_emissions,
                    d_transitions,
                };
                self.backward(&cache, &grads, 1.0 / b, recon_grads.as_deref(), opts);
            } else {
                ls += crf_nll(&out.emissions, &self.transitions.value, &u.slots)?;
            }
        }
        let reconstruction = reconstruction_weight.map(|_| le / n_tokens as f64);
        let (domain, intent, slots) = (ld / b, li / b, ls / b);
        let total = domain + intent + slots + reconstruction_weight.map_or(0.0, |w| w * le / n_tokens as f64);
        if !total.is_finite() {
            return Err(Error::Training(format!("non-finite loss {total}")));
        }
        Ok(LossParts {
            domain,
            intent,
            slots,
            reconstruction,
            total,
        })
    }

    /// Mean loss over a corpus with deterministic embeddings, in batches.
    pub fn corpus_loss(&mut self, utterances: &[Utterance], batch_size: usize) -> Result<f64> {
        if utterances.is_empty() {
            return Err(Error::param("empty corpus"));
        }
        let mut total = 0.0;
        let mut rng = Rng::new(0);
        for chunk in utterances.chunks(batch_size.max(1)) {
            let refs: Vec<&Utterance> = chunk.iter().collect();
            let parts = self.batch_loss(&refs, &EncodeOptions::deterministic(), &mut rng, None, None, false)?;
            total += parts.total * chunk.len() as f64;
        }
        Ok(total / utterances.len() as f64)
    }

    /// Rounds every stored tensor to `f32` precision, so a checkpoint
    /// round trip is exact.
    pub fn round_to_f32(&mut self) {
        for p in self.parameters_mut() {
            p.value.round_to_f32();
        }
        if let EmbeddingSource::Dccl { target, .. } = &mut self.source {
            target.round_to_f32();
        }
    }
}

/// Loss of `model` on `batch` without touching gradients.
pub fn nlu_loss(model: &NluModel, batch: &[Utterance], opts: &EncodeOptions, rng: &mut Rng) -> Result<LossParts> {
    let refs: Vec<&Utterance> = batch.iter().collect();
    model.clone().batch_loss(&refs, opts, rng, None, None, false)
}
