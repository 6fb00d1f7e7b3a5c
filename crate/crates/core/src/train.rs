//! Training regimes: the uncompressed NLU baseline, the task-agnostic DCCL
//! autoencoder, fine-tuning over frozen codes, task-aware DCCL and
//! task-aware SVD.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::dccl::{compress_all, CompressedEmbeddings, DcclEncoder, DcclModel, EncodeOptions};
use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nlu::{EmbeddingSource, NluModel, Utterance};
use crate::numerics::{HasParameters, Matrix, Optimizer, OptimizerKind, Parameter, Rng};
use crate::svdcomp::{make_factorized_layer, truncate_matrix, LowRankFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NluBaseline,
    DcclAutoencoder,
    DcclFinetuneNlu,
    TaskawareDccl,
    TaskawareDcclNoRecon,
    TaskawareDcclScratch,
    TaskawareSvd,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::NluBaseline,
        Regime::DcclAutoencoder,
        Regime::DcclFinetuneNlu,
        Regime::TaskawareDccl,
        Regime::TaskawareDcclNoRecon,
        Regime::TaskawareDcclScratch,
        Regime::TaskawareSvd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::NluBaseline => "nlu_baseline",
            Regime::DcclAutoencoder => "dccl_autoencoder",
            Regime::DcclFinetuneNlu => "dccl_finetune_nlu",
            Regime::TaskawareDccl => "taskaware_dccl",
            Regime::TaskawareDcclNoRecon => "taskaware_dccl_no_recon",
            Regime::TaskawareDcclScratch => "taskaware_dccl_scratch",
            Regime::TaskawareSvd => "taskaware_svd",
        }
    }

    fn default_epochs(self) -> usize {
        match self {
            Regime::NluBaseline | Regime::TaskawareDcclScratch => 25,
            Regime::DcclAutoencoder => 300,
            _ => 5,
        }
    }

    fn default_learning_rate(self) -> f64 {
        match self {
            Regime::TaskawareSvd => 1e-3,
            _ => 1e-4,
        }
    }

    fn default_optimizer(self) -> OptimizerKind {
        match self {
            Regime::TaskawareSvd => OptimizerKind::Sgd,
            _ => OptimizerKind::Adam,
        }
    }

    fn uses_dccl(self) -> bool {
        !matches!(self, Regime::NluBaseline | Regime::TaskawareSvd)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown regime `{s}`")))
    }
}

/// Settings of one training run. Unset `epochs`, `learning_rate`,
/// `optimizer` and `encoder_hidden` take regime defaults in
/// [`TrainConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub batch_size: usize,
    /// Rows per step when training the autoencoder.
    pub autoencoder_batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub tau: f64,
    pub m: usize,
    pub k: usize,
    /// NLU BiLSTM width per direction.
    pub hidden: usize,
    /// DCCL encoder width, `M*K/2` when unset.
    pub encoder_hidden: Option<usize>,
    /// Fraction of singular values kept.
    pub svd_fraction: f64,
    pub dropout: f64,
    /// Weight of the reconstruction term in `taskaware_dccl`.
    pub reconstruction_weight: f64,
    pub init_model: Option<String>,
    pub init_autoencoder: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::NluBaseline,
            epochs: None,
            learning_rate: None,
            optimizer: None,
            batch_size: 32,
            autoencoder_batch_size: 64,
            patience: 3,
            seed: 1,
            tau: 1.0,
            m: 8,
            k: 16,
            hidden: 64,
            encoder_hidden: None,
            svd_fraction: 0.1,
            dropout: 0.0,
            reconstruction_weight: 1.0,
            init_model: None,
            init_autoencoder: None,
        }
    }
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        TrainConfig { regime, ..TrainConfig::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    /// Copy with every regime default filled in, after validation.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.epochs.get_or_insert(self.regime.default_epochs());
        c.learning_rate.get_or_insert(self.regime.default_learning_rate());
        c.optimizer.get_or_insert(self.regime.default_optimizer());
        if self.regime.uses_dccl() {
            c.encoder_hidden.get_or_insert(DcclEncoder::default_hidden(self.m, self.k));
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        let lr = self.learning_rate.unwrap_or(1.0);
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {lr}"));
        }
        if self.batch_size == 0 || self.autoencoder_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.hidden == 0 || self.encoder_hidden == Some(0) {
            return bad("hidden sizes must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.regime.uses_dccl() && (self.m == 0 || self.k < 2) {
            return bad(format!("need M >= 1 and K >= 2, got M={} K={}", self.m, self.k));
        }
        if self.regime == Regime::TaskawareSvd && !(self.svd_fraction > 0.0 && self.svd_fraction <= 1.0) {
            return bad(format!("SVD fraction must be in (0, 1], got {}", self.svd_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.reconstruction_weight >= 0.0 && self.reconstruction_weight.is_finite()) {
            return bad("reconstruction weight must be non-negative".into());
        }
        Ok(())
    }

    fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.regime.default_epochs())
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(
            self.optimizer.unwrap_or(self.regime.default_optimizer()),
            self.learning_rate.unwrap_or(self.regime.default_learning_rate()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Epoch 0 is the state before any update.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_time_secs: f64,
    pub summary: BTreeMap<String, f64>,
}

impl TrainReport {
    /// One JSON object per line: the config, every epoch, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let line = |v: serde_json::Value, out: &mut String| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        line(serde_json::json!({ "config": self.config }), &mut out);
        for e in &self.epochs {
            line(serde_json::json!({ "epoch": e }), &mut out);
        }
        line(
            serde_json::json!({
                "best_epoch": self.best_epoch,
                "wall_time_secs": self.wall_time_secs,
                "summary": self.summary,
            }),
            &mut out,
        );
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "regime       {}", self.config.regime.name()).unwrap();
        writeln!(s, "seed         {}", self.config.seed).unwrap();
        writeln!(s, "best epoch   {} of {}", self.best_epoch, self.epochs.len().saturating_sub(1)).unwrap();
        writeln!(s, "wall time    {:.1} s", self.wall_time_secs).unwrap();
        writeln!(s, "epoch  train_loss    validation_loss").unwrap();
        for e in &self.epochs {
            let t = e.train_loss.map_or("-".to_string(), |x| format!("{x:.6}"));
            writeln!(s, "{:>5}  {:<12}  {:.6}", e.epoch, t, e.validation_loss).unwrap();
        }
        for (k, v) in &self.summary {
            writeln!(s, "{k:<24} {v:.6}").unwrap();
        }
        s
    }

    /// Equality ignoring wall time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.config == other.config
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.summary == other.summary
    }

    pub fn best_validation_loss(&self) -> f64 {
        self.epochs[self.best_epoch].validation_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trainable {
    All,
    TaskOnly,
}

struct Fit {
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
}

fn check_aligned(model: &NluModel, corpus: &Corpus) -> Result<()> {
    if model.vocab != corpus.vocab {
        return Err(Error::dim("model and corpus vocabularies differ"));
    }
    if model.schema != corpus.schema {
        return Err(Error::Label("model and corpus label schemas differ".into()));
    }
    Ok(())
}

const EVAL_BATCH: usize = 256;

/// Minibatch training with early stopping on the validation NLU loss; the
/// best epoch's parameters (epoch 0 included) are restored at the end.
fn fit_nlu(
    model: &mut NluModel,
    train: &Corpus,
    validation: &Corpus,
    cfg: &TrainConfig,
    trainable: Trainable,
    reconstruction_weight: Option<f64>,
) -> Result<Fit> {
    check_aligned(model, train)?;
    check_aligned(model, validation)?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::param("training and validation corpora must be non-empty"));
    }
    model.dropout = cfg.dropout;
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.substream(11);
    let mut gumbel_rng = root.substream(12);
    let mut dropout_rng = root.substream(13);
    let opts = EncodeOptions::training(cfg.tau);
    let mut opt = cfg.optimizer();
    model.zero_grads();

    let first = model.corpus_loss(&validation.utterances, EVAL_BATCH)?;
    let mut epochs = vec![EpochRecord { epoch: 0, train_loss: None, validation_loss: first }];
    let (mut best, mut best_epoch, mut best_model) = (first, 0, model.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs() {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train.utterances[i]).collect();
            let drop = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let parts = model.batch_loss(&batch, &opts, &mut gumbel_rng, drop, reconstruction_weight, true)?;
            total += parts.total * batch.len() as f64;
            match trainable {
                Trainable::All => opt.step(&mut model.parameters_mut())?,
                Trainable::TaskOnly => {
                    opt.step(&mut model.task_parameters_mut())?;
                    // embedding gradients are computed but never applied
                    model.zero_grads();
                }
            }
        }
        let validation_loss = model.corpus_loss(&validation.utterances, EVAL_BATCH)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(total / train.len() as f64),
            validation_loss,
        });
        if validation_loss < best {
            best = validation_loss;
            best_epoch = epoch;
            best_model = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    *model = best_model;
    model.zero_grads();
    Ok(Fit { epochs, best_epoch })
}

fn finish(cfg: TrainConfig, fit: Fit, start: Instant, summary: BTreeMap<String, f64>) -> TrainReport {
    TrainReport {
        config: cfg,
        epochs: fit.epochs,
        best_epoch: fit.best_epoch,
        wall_time_secs: start.elapsed().as_secs_f64(),
        summary,
    }
}

fn expect_regime(cfg: &TrainConfig, allowed: &[Regime]) -> Result<TrainConfig> {
    if !allowed.contains(&cfg.regime) {
        return Err(Error::Spec(format!("regime `{}` does not apply here", cfg.regime.name())));
    }
    cfg.resolved()
}

fn nlu_summary(model: &mut NluModel, train: &Corpus, fit: &Fit) -> Result<BTreeMap<String, f64>> {
    let mut s = BTreeMap::new();
    s.insert("train_loss".into(), model.corpus_loss(&train.utterances, EVAL_BATCH)?);
    s.insert("validation_loss".into(), fit.epochs[fit.best_epoch].validation_loss);
    Ok(s)
}

/// Trains the uncompressed model; the embedding table is fine-tuned along
/// with every task layer.
pub fn train_nlu_baseline(
    train: &Corpus,
    validation: &Corpus,
    embeddings: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<(NluModel, TrainReport)> {
    let start = Instant::now();
    let cfg = expect_regime(cfg, &[Regime::NluBaseline])?;
    let mut rng = Rng::new(cfg.seed).substream(10);
    let mut model = NluModel::new(train.schema.clone(), embeddings.clone(), cfg.hidden, &mut rng)?;
    let fit = fit_nlu(&mut model, train, validation, &cfg, Trainable::All, None)?;
    let summary = nlu_summary(&mut model, train, &fit)?;
    Ok((model, finish(cfg, fit, start, summary)))
}

/// Task-agnostic compression: minimizes the mean reconstruction error over
/// all rows of `weights`, with Gumbel sampling during training. Each
/// epoch's deterministic-mode loss is the selection criterion; the best
/// epoch is restored.
pub fn train_dccl_autoencoder(weights: &Matrix, cfg: &TrainConfig) -> Result<(DcclModel, TrainReport)> {
    let start = Instant::now();
    let cfg = expect_regime(cfg, &[Regime::DcclAutoencoder])?;
    if weights.rows() == 0 {
        return Err(Error::param("no embeddings to compress"));
    }
    let root = Rng::new(cfg.seed);
    let h = cfg.encoder_hidden.expect("resolved");
    let mut model = DcclModel::new(weights.cols(), cfg.m, cfg.k, h, &mut root.substream(20))?;
    let mut order_rng = root.substream(21);
    let mut gumbel_rng = root.substream(22);
    let opts = EncodeOptions::training(cfg.tau);
    let mut opt = cfg.optimizer();
    let all: Vec<usize> = (0..weights.rows()).collect();
    let eval = |m: &DcclModel| reconstruction_loss_all(weights, m);

    let first = eval(&model)?;
    let mut epochs = vec![EpochRecord { epoch: 0, train_loss: None, validation_loss: first }];
    let (mut best, mut best_epoch, mut best_model) = (first, 0, model.clone());
    let mut order = all.clone();
    for epoch in 1..=cfg.epochs() {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.autoencoder_batch_size) {
            let loss = model.reconstruction_loss_with_grad(weights, chunk, &opts, &mut gumbel_rng, 1.0, true)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite reconstruction loss {loss}")));
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut model.parameters_mut())?;
        }
        let validation_loss = eval(&model)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(total / all.len() as f64),
            validation_loss,
        });
        if validation_loss < best {
            best = validation_loss;
            best_epoch = epoch;
            best_model = model.clone();
        }
    }
    let mut summary = BTreeMap::new();
    summary.insert("initial_mse".into(), first);
    summary.insert("final_mse".into(), best);
    let fit = Fit { epochs, best_epoch };
    Ok((best_model, finish(cfg, fit, start, summary)))
}

/// Deterministic-mode mean squared reconstruction error over every row.
pub fn reconstruction_loss_all(weights: &Matrix, model: &DcclModel) -> Result<f64> {
    let ids: Vec<usize> = (0..weights.rows()).collect();
    crate::dccl::reconstruction_loss(weights, model, &ids, &EncodeOptions::deterministic(), &mut Rng::new(0))
}

/// Codes for every row of `weights` under the trained layers.
pub fn compress_embeddings(model: &DcclModel, embeddings: &EmbeddingMatrix) -> Result<CompressedEmbeddings> {
    let codes = compress_all(&model.encoder, &embeddings.weights)?;
    CompressedEmbeddings::new(codes, model.books.clone(), embeddings.vocab.clone())
}

/// Swaps in a frozen code lookup and updates only the BiLSTM, heads and
/// CRF.
pub fn finetune_nlu_frozen_codes(
    model: &NluModel,
    compressed: &CompressedEmbeddings,
    train: &Corpus,
    validation: &Corpus,
    cfg: &TrainConfig,
) -> Result<(NluModel, TrainReport)> {
    let start = Instant::now();
    let cfg = expect_regime(cfg, &[Regime::DcclFinetuneNlu])?;
    let mut model = model.clone().with_source(EmbeddingSource::codes(compressed.clone()))?;
    let fit = fit_nlu(&mut model, train, validation, &cfg, Trainable::TaskOnly, None)?;
    let summary = nlu_summary(&mut model, train, &fit)?;
    Ok((model, finish(cfg, fit, start, summary)))
}

/// Starting points for task-aware DCCL; both are required by the
/// pretrained regimes and must be absent for `taskaware_dccl_scratch`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskAwareInit<'a> {
    pub nlu: Option<&'a NluModel>,
    pub autoencoder: Option<&'a DcclModel>,
}

/// End-to-end training through the compression layers applied to the
/// fixed table `target`. The returned model keeps its DCCL source; see
/// [`deploy_codes`].
pub fn train_taskaware_dccl(
    train: &Corpus,
    validation: &Corpus,
    target: &EmbeddingMatrix,
    init: TaskAwareInit<'_>,
    cfg: &TrainConfig,
) -> Result<(NluModel, TrainReport)> {
    let start = Instant::now();
    let cfg = expect_regime(
        cfg,
        &[Regime::TaskawareDccl, Regime::TaskawareDcclNoRecon, Regime::TaskawareDcclScratch],
    )?;
    let scratch = cfg.regime == Regime::TaskawareDcclScratch;
    let mut rng = Rng::new(cfg.seed).substream(30);
    let (nlu, dccl) = match (init.nlu, init.autoencoder, scratch) {
        (Some(n), Some(d), false) => (n.clone(), d.clone()),
        (None, None, true) => {
            let n = NluModel::new(train.schema.clone(), target.clone(), cfg.hidden, &mut rng)?;
            let h = cfg.encoder_hidden.expect("resolved");
            let d = DcclModel::new(target.dim(), cfg.m, cfg.k, h, &mut rng)?;
            (n, d)
        }
        _ => {
            return Err(Error::Spec(format!(
                "regime `{}` needs {} initial NLU and autoencoder models",
                cfg.regime.name(),
                if scratch { "no" } else { "both" }
            )))
        }
    };
    if nlu.vocab != target.vocab {
        return Err(Error::dim("target embeddings and model vocabularies differ"));
    }
    let source = EmbeddingSource::Dccl { target: target.weights.clone(), model: dccl };
    let mut model = nlu.with_source(source)?;
    let weight = (cfg.regime == Regime::TaskawareDccl).then_some(cfg.reconstruction_weight);
    let fit = fit_nlu(&mut model, train, validation, &cfg, Trainable::All, weight)?;
    let mut summary = nlu_summary(&mut model, train, &fit)?;
    if let EmbeddingSource::Dccl { target, model: d } = &model.source {
        summary.insert("reconstruction_mse".into(), reconstruction_loss_all(target, d)?);
    }
    Ok((model, finish(cfg, fit, start, summary)))
}

/// Replaces a DCCL source by its deterministic codes and codebooks, the
/// form stored on device.
pub fn deploy_codes(model: &NluModel) -> Result<NluModel> {
    match &model.source {
        EmbeddingSource::Dccl { target, model: d } => {
            let codes = compress_all(&d.encoder, target)?;
            model.clone().with_source(EmbeddingSource::Codes { codes, books: d.books.clone() })
        }
        _ => Err(Error::param("model does not have a DCCL embedding source")),
    }
}

/// Rank-truncated factors of a model's current embedding table.
pub fn svd_factors(model: &NluModel, fraction: f64) -> Result<LowRankFactors> {
    truncate_matrix(&model.source.table()?, fraction)
}

/// Replaces the table by `small · projection` initialized from `factors`
/// and trains both factors with the task layers.
pub fn train_taskaware_svd(
    baseline: &NluModel,
    factors: &LowRankFactors,
    train: &Corpus,
    validation: &Corpus,
    cfg: &TrainConfig,
) -> Result<(NluModel, TrainReport)> {
    let start = Instant::now();
    let cfg = expect_regime(cfg, &[Regime::TaskawareSvd])?;
    let layer = make_factorized_layer(factors);
    let mut model = baseline.clone().with_source(EmbeddingSource::factorized(layer))?;
    let fit = fit_nlu(&mut model, train, validation, &cfg, Trainable::All, None)?;
    let mut summary = nlu_summary(&mut model, train, &fit)?;
    summary.insert("rank".into(), factors.rank as f64);
    Ok((model, finish(cfg, fit, start, summary)))
}

/// Mutable handles to the codebook table of a DCCL or code source.
pub fn codebook_parameter(model: &mut NluModel) -> Option<&mut Parameter> {
    match &mut model.source {
        EmbeddingSource::Dccl { model, .. } => Some(&mut model.books.table),
        EmbeddingSource::Codes { books, .. } => Some(&mut books.table),
        _ => None,
    }
}
