//! `wecomp`: data generation, training, compression, quantization,
//! evaluation and the reproduction sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use wecomp::binio::write_atomic;
use wecomp::datagen::{generate, read_corpus, synthetic_embeddings, write_corpus, Corpus, CorpusSpec};
use wecomp::dccl::{load_dccl_model, read_compressed, save_dccl_model, write_compressed, CompressedEmbeddings, DcclModel};
use wecomp::embio::{embeddings_from_bytes, parse_text_embeddings, save_binary, EmbeddingMatrix};
use wecomp::eval::{evaluate, format_change, relative_change, size_report_from_bytes, MetricsReport, METRIC_NAMES};
use wecomp::nlu::{checkpoint_layout, load_model, model_from_bytes, save_model, EmbeddingSource, NluModel};
use wecomp::quant8::{quantize_model, QuantizeTargets, DEFAULT_BINS};
use wecomp::svdcomp::{load_factors, make_factorized_layer, save_factors, svd_truncate, LowRankFactors};
use wecomp::sweep::{run_sweep, SweepConfig, Variant};
use wecomp::train::{
    compress_embeddings, deploy_codes, finetune_nlu_frozen_codes, train_dccl_autoencoder, train_nlu_baseline,
    train_taskaware_dccl, train_taskaware_svd, Regime, TaskAwareInit, TrainConfig, TrainReport,
};

#[derive(Parser, Debug)]
#[command(name = "wecomp", version, about = "Task-aware word embedding compression for multi-task NLU models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (train/validation/test) and pretrained embeddings.
    GenData(GenData),
    /// Train the uncompressed NLU baseline.
    TrainNlu(TrainNlu),
    /// Train a DCCL autoencoder on an embedding table.
    TrainAe(TrainAe),
    /// Encode an embedding table with a trained autoencoder.
    CompressDccl(CompressDccl),
    /// Truncated-SVD compression of an embedding table.
    CompressSvd(CompressSvd),
    /// Task-aware end-to-end training of compression layers with the NLU model.
    TrainTaskaware(TrainTaskaware),
    /// Fine-tune NLU layers over frozen compressed embeddings.
    Finetune(Finetune),
    /// 8-bit linear quantization of model weights.
    Quantize(Quantize),
    /// Score a model on a corpus.
    Evaluate(Evaluate),
    /// Describe a model, embedding, code or factor file.
    Inspect(Inspect),
    /// Run the full comparison over seeds and compression points.
    Sweep(Sweep),
}

/// Flags shared by every training command; explicit flags override `--config`.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Write the per-epoch report (JSON lines) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self, regime: Regime) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_toml(&read_text(p)?).with_context(|| format!("--config {}", p.display()))?,
            None => TrainConfig::new(regime),
        };
        c.regime = regime;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(seed, batch_size, hidden, patience, tau, m, k, dropout);
        if self.epochs.is_some() {
            c.epochs = self.epochs;
        }
        if self.learning_rate.is_some() {
            c.learning_rate = self.learning_rate;
        }
        let c = c.resolved()?;
        println!("# resolved config\n{}", c.to_toml());
        Ok(c)
    }

    fn finish(&self, report: &TrainReport) -> anyhow::Result<()> {
        print!("{}", report.summary_text());
        if let Some(p) = &self.report {
            write_atomic(p, report.to_jsonl().as_bytes()).with_context(|| format!("--report {}", p.display()))?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory for train.txt, validation.txt, test.txt and pretrained.emb.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with corpus settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    ood_fraction: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct CorpusFlags {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
}

#[derive(Args, Debug)]
struct TrainNlu {
    #[command(flatten)]
    data: CorpusFlags,
    /// Pretrained embeddings (EMB1 binary or text).
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct TrainAe {
    /// Embedding table: EMB1, text, or an NLU1 checkpoint whose table is used.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct CompressDccl {
    #[arg(long)]
    autoencoder: PathBuf,
    /// Embedding table: EMB1, text, or an NLU1 checkpoint.
    #[arg(long)]
    embeddings: PathBuf,
    /// Codes and codebooks (DCCL format).
    #[arg(long)]
    out: PathBuf,
    /// Also write this checkpoint with its table replaced by the codes.
    #[arg(long, requires = "model_out")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompressSvd {
    /// Embedding table: EMB1, text, or an NLU1 checkpoint.
    #[arg(long)]
    embeddings: PathBuf,
    /// Fraction of singular values kept.
    #[arg(long, default_value_t = 0.1)]
    n: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "model_out")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainTaskaware {
    #[command(flatten)]
    data: CorpusFlags,
    /// taskaware_dccl, taskaware_dccl_no_recon, taskaware_dccl_scratch or taskaware_svd.
    #[arg(long, default_value = "taskaware_dccl")]
    regime: String,
    /// Trained NLU baseline (all regimes but scratch).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trained autoencoder (DCCL regimes but scratch).
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    /// Pretrained embeddings to compress in the scratch regime.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// SVD factors (taskaware_svd).
    #[arg(long)]
    factors: Option<PathBuf>,
    /// Weight of the reconstruction term.
    #[arg(long)]
    recon_weight: Option<f64>,
    /// Keep the encoder in the checkpoint instead of deploying codes.
    #[arg(long)]
    keep_encoder: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    data: CorpusFlags,
    #[arg(long)]
    model: PathBuf,
    /// Codes and codebooks from `compress-dccl`.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Quantize {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Quantize the output heads as well as the LSTM weights.
    #[arg(long)]
    heads: bool,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Metrics JSON of a baseline run; adds a relative-change table.
    #[arg(long)]
    baseline_report: Option<PathBuf>,
    /// Baseline checkpoint; adds model and embedding compression rates.
    #[arg(long)]
    baseline_model: Option<PathBuf>,
    /// Write this run's metrics as JSON.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Inspect {
    file: PathBuf,
}

#[derive(Args, Debug)]
struct Sweep {
    /// TOML file with sweep settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated variants, e.g. tag-dccl,taw-dccl.
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,
    #[arg(long = "M", value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long = "K", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    hidden: Option<usize>,
    /// Directory for sweep.txt and sweep.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<wecomp::Error>() {
        Some(wecomp::Error::Training(_)) => 3,
        Some(wecomp::Error::Spec(_)) => 1,
        _ => 2,
    }
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn read_bytes(p: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(p).with_context(|| format!("cannot read {}", p.display()))
}

fn corpus(p: &Path) -> anyhow::Result<Corpus> {
    read_corpus(p).with_context(|| format!("corpus {}", p.display()))
}

fn model(p: &Path) -> anyhow::Result<NluModel> {
    load_model(p).with_context(|| format!("model {}", p.display()))
}

/// EMB1, NLU1 (its current table) or the text format.
fn table(p: &Path) -> anyhow::Result<EmbeddingMatrix> {
    let bytes = read_bytes(p)?;
    let ctx = || format!("embeddings {}", p.display());
    if bytes.starts_with(b"EMB1") {
        return embeddings_from_bytes(&bytes).with_context(ctx);
    }
    if bytes.starts_with(b"NLU1") {
        let m = model_from_bytes(&bytes).with_context(ctx)?;
        return Ok(EmbeddingMatrix::new(m.vocab.clone(), m.source.table()?)?);
    }
    let text = String::from_utf8(bytes).map_err(|_| anyhow!("{}: not EMB1, NLU1 or UTF-8 text", p.display()))?;
    parse_text_embeddings(&text).with_context(ctx)
}

fn check_vocab(model: &NluModel, other: &wecomp::embio::Vocabulary, what: &str) -> anyhow::Result<()> {
    if &model.vocab != other {
        return Err(wecomp::Error::Format(format!("{what} vocabulary differs from the model's")).into());
    }
    Ok(())
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let mut spec = match &a.config {
        Some(p) => CorpusSpec::from_toml(&read_text(p)?).with_context(|| format!("--config {}", p.display()))?,
        None => CorpusSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(seed, train_size, validation_size, test_size, vocab_size, ood_fraction, embedding_dim);
    let data = generate(&spec)?;
    let emb = synthetic_embeddings(&spec, &data.grammar, &data.train.vocab)?;
    println!("# resolved config\n{}", spec.to_toml());
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (name, c) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
        write_corpus(&a.out.join(format!("{name}.txt")), c)?;
        println!("{name:<10} {} utterances", c.utterances.len());
    }
    save_binary(&emb, &a.out.join("pretrained.emb"))?;
    write_atomic(&a.out.join("corpus.toml"), spec.to_toml().as_bytes())?;
    println!("vocab      {} words, dim {}", emb.len(), emb.dim());
    Ok(())
}

fn train_nlu(a: &TrainNlu) -> anyhow::Result<()> {
    let cfg = a.train.resolve(Regime::NluBaseline)?;
    let (train, validation) = (corpus(&a.data.train)?, corpus(&a.data.validation)?);
    let emb = table(&a.embeddings)?;
    let (m, report) = train_nlu_baseline(&train, &validation, &emb, &cfg)?;
    save_model(&a.out, &m)?;
    a.train.finish(&report)
}

fn train_ae(a: &TrainAe) -> anyhow::Result<()> {
    let cfg = a.train.resolve(Regime::DcclAutoencoder)?;
    let emb = table(&a.embeddings)?;
    let (ae, report) = train_dccl_autoencoder(&emb.weights, &cfg)?;
    save_dccl_model(&a.out, &ae)?;
    a.train.finish(&report)
}

fn compress_dccl(a: &CompressDccl) -> anyhow::Result<()> {
    let ae = load_dccl_model(&a.autoencoder).with_context(|| format!("autoencoder {}", a.autoencoder.display()))?;
    let emb = table(&a.embeddings)?;
    let c = compress_embeddings(&ae, &emb)?;
    write_compressed(&a.out, &c)?;
    let s = c.sizes();
    println!("codes      {} B\ncodebooks  {} B\ntotal      {} B", s.codes, s.codebooks, s.total());
    println!("rate       {:.2}x", emb.payload_bytes() as f64 / s.payload() as f64);
    if let (Some(src), Some(dst)) = (&a.model, &a.model_out) {
        let m = model(src)?;
        check_vocab(&m, &emb.vocab, "embedding")?;
        save_model(dst, &m.with_source(EmbeddingSource::codes(c))?)?;
    }
    Ok(())
}

fn compress_svd(a: &CompressSvd) -> anyhow::Result<()> {
    let emb = table(&a.embeddings)?;
    let f = svd_truncate(&emb, a.n)?;
    save_factors(&a.out, &emb.vocab, &f)?;
    println!("rank       {} of {}", f.rank, emb.dim().min(emb.len()));
    println!("storage    {} B\nrate       {:.2}x", f.storage_bytes(), emb.payload_bytes() as f64 / f.storage_bytes() as f64);
    if let (Some(src), Some(dst)) = (&a.model, &a.model_out) {
        let m = model(src)?;
        check_vocab(&m, &emb.vocab, "embedding")?;
        save_model(dst, &m.with_source(EmbeddingSource::factorized(make_factorized_layer(&f)))?)?;
    }
    Ok(())
}

fn train_taskaware(a: &TrainTaskaware) -> anyhow::Result<()> {
    let regime: Regime = a.regime.parse().map_err(|_| usage(format!("--regime: unknown regime `{}`", a.regime)))?;
    if !matches!(
        regime,
        Regime::TaskawareDccl | Regime::TaskawareDcclNoRecon | Regime::TaskawareDcclScratch | Regime::TaskawareSvd
    ) {
        return Err(usage(format!("--regime: `{}` is not a task-aware regime", a.regime)));
    }
    let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| usage(format!("--{flag} is required for {}", a.regime)));
    let mut flags_cfg = a.train.resolve(regime)?;
    if let Some(w) = a.recon_weight {
        flags_cfg.reconstruction_weight = w;
    }
    let (train, validation) = (corpus(&a.data.train)?, corpus(&a.data.validation)?);
    let (m, report) = match regime {
        Regime::TaskawareSvd => {
            let base = model(&need(&a.model, "model")?)?;
            let fp = need(&a.factors, "factors")?;
            let (vocab, f): (_, LowRankFactors) = load_factors(&fp).with_context(|| format!("factors {}", fp.display()))?;
            check_vocab(&base, &vocab, "factor")?;
            flags_cfg.svd_fraction = f.fraction;
            train_taskaware_svd(&base, &f, &train, &validation, &flags_cfg)?
        }
        Regime::TaskawareDcclScratch => {
            let emb = table(&need(&a.embeddings, "embeddings")?)?;
            train_taskaware_dccl(&train, &validation, &emb, TaskAwareInit::default(), &flags_cfg)?
        }
        _ => {
            let base = model(&need(&a.model, "model")?)?;
            let ap = need(&a.autoencoder, "autoencoder")?;
            let ae: DcclModel = load_dccl_model(&ap).with_context(|| format!("autoencoder {}", ap.display()))?;
            let target = EmbeddingMatrix::new(base.vocab.clone(), base.source.table()?)?;
            let init = TaskAwareInit { nlu: Some(&base), autoencoder: Some(&ae) };
            train_taskaware_dccl(&train, &validation, &target, init, &flags_cfg)?
        }
    };
    let out = if a.keep_encoder || regime == Regime::TaskawareSvd { m } else { deploy_codes(&m)? };
    save_model(&a.out, &out)?;
    a.train.finish(&report)
}

fn finetune(a: &Finetune) -> anyhow::Result<()> {
    let cfg = a.train.resolve(Regime::DcclFinetuneNlu)?;
    let base = model(&a.model)?;
    let c: CompressedEmbeddings = read_compressed(&a.codes).with_context(|| format!("codes {}", a.codes.display()))?;
    check_vocab(&base, &c.vocab, "code")?;
    let (train, validation) = (corpus(&a.data.train)?, corpus(&a.data.validation)?);
    let (m, report) = finetune_nlu_frozen_codes(&base, &c, &train, &validation, &cfg)?;
    save_model(&a.out, &m)?;
    a.train.finish(&report)
}

fn quantize(a: &Quantize) -> anyhow::Result<()> {
    let m = model(&a.model)?;
    let targets = QuantizeTargets { recurrent: true, heads: a.heads };
    println!("# resolved config\nbins = {}\nrecurrent = true\nheads = {}\n", a.bins, a.heads);
    let (q, r) = quantize_model(&m, a.bins, targets)?;
    save_model(&a.out, &q)?;
    println!("tensors    {}", r.tensors.join(" "));
    println!("entries    {}\nfloat32    {} B\nquantized  {} B", r.entries, r.float_payload_bytes, r.quantized_payload_bytes);
    Ok(())
}

fn evaluate_cmd(a: &Evaluate) -> anyhow::Result<()> {
    let m = model(&a.model)?;
    let c = corpus(&a.corpus)?;
    check_vocab(&m, &c.vocab, "corpus")?;
    let metrics = evaluate(&m, &c)?;
    print!("{}", metrics.to_table());
    if let Some(p) = &a.report_out {
        write_atomic(p, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    }
    if let Some(p) = &a.baseline_report {
        let base: MetricsReport = serde_json::from_str(&read_text(p)?)
            .map_err(|e| wecomp::Error::Format(format!("baseline report {}: {e}", p.display())))?;
        let rel = relative_change(&metrics, &base);
        println!("\nrelative change vs baseline (%)");
        for (name, v) in METRIC_NAMES.iter().zip(rel.changes) {
            println!("{name:<6} {}", format_change(v));
        }
        for n in &rel.notes {
            println!("note: {n}");
        }
    }
    if let Some(p) = &a.baseline_model {
        let s = size_report_from_bytes(&read_bytes(p)?, &read_bytes(&a.model)?)?;
        println!("\nmodel rate      {:.2}x ({} B vs {} B)", s.model_rate, s.model_bytes, s.baseline_model_bytes);
        println!("embedding rate  {:.2}x ({} B vs {} B)", s.embedding_rate, s.embedding_bytes, s.baseline_embedding_bytes);
    }
    Ok(())
}

fn inspect(a: &Inspect) -> anyhow::Result<()> {
    let bytes = read_bytes(&a.file)?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    match magic {
        b"NLU1" => {
            let l = checkpoint_layout(&bytes)?;
            println!("NLU1 checkpoint, {} B", l.total_bytes);
            println!("embedding source  {}", l.source.name());
            println!("embedding payload {} B", l.embedding_payload_bytes());
            println!("{:<20} {:<10} {:>10} {:>10}", "tensor", "encoding", "shape", "bytes");
            for t in &l.tensors {
                println!("{:<20} {:<10} {:>10} {:>10}", t.name, t.encoding.name(), format!("{}x{}", t.rows, t.cols), t.payload_bytes);
            }
        }
        b"EMB1" => {
            let e = embeddings_from_bytes(&bytes)?;
            println!("EMB1 embeddings, {} B\nwords {}  dim {}  payload {} B", bytes.len(), e.len(), e.dim(), e.payload_bytes());
        }
        b"DCCL" => {
            let c = CompressedEmbeddings::from_bytes(&bytes)?;
            let s = c.sizes();
            println!("DCCL codes, {} B", bytes.len());
            println!("words {}  M {}  K {}  dim {}", c.codes.num_words(), c.codes.num_books(), c.codes.num_codewords(), c.books.dim());
            println!("codes {} B  codebooks {} B", s.codes, s.codebooks);
        }
        b"DAE1" => {
            let m = wecomp::dccl::dccl_model_from_bytes(&bytes)?;
            println!("DCCL autoencoder, {} B", bytes.len());
            println!("dim {}  M {}  K {}  hidden {}", m.dim(), m.encoder.num_books(), m.encoder.num_codewords(), m.encoder.hidden());
        }
        b"SVDF" => {
            let (vocab, f) = wecomp::svdcomp::factors_from_bytes(&bytes)?;
            println!("SVD factors, {} B", bytes.len());
            println!("words {}  dim {}  rank {}  fraction {}  storage {} B", vocab.len(), f.dim(), f.rank, f.fraction, f.storage_bytes());
        }
        _ => return Err(wecomp::Error::Format(format!("{}: unknown file type", a.file.display())).into()),
    }
    Ok(())
}

fn sweep(a: &Sweep) -> anyhow::Result<()> {
    let mut c = match &a.config {
        Some(p) => SweepConfig::from_toml(&read_text(p)?).with_context(|| format!("--config {}", p.display()))?,
        None => SweepConfig::default(),
    };
    if let Some(rs) = &a.regimes {
        c.variants = rs
            .iter()
            .map(|r| r.parse::<Variant>().map_err(|_| usage(format!("--regimes: unknown variant `{r}`"))))
            .collect::<anyhow::Result<_>>()?;
    }
    if let Some(m) = &a.m {
        c.m = m.clone();
    }
    if let Some(k) = &a.k {
        c.k = k.clone();
    }
    if let Some(n) = a.seeds {
        if n == 0 {
            return Err(usage("--seeds must be at least 1"));
        }
        c.seeds = (a.seed..a.seed + n).collect();
    }
    if let Some(h) = a.hidden {
        c.hidden = h;
    }
    c.points().map_err(|e| usage(format!("--M/--K: {e}")))?;
    let echo = format!("# resolved config\n{}\n", c.to_toml());
    print!("{echo}");
    let result = run_sweep(&c, &mut |line| eprintln!("{line}"))?;
    let text = result.render();
    print!("{text}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_atomic(&dir.join("sweep.txt"), format!("{echo}{text}").as_bytes())?;
        write_atomic(&dir.join("sweep.jsonl"), result.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainNlu(a) => train_nlu(a),
        Command::TrainAe(a) => train_ae(a),
        Command::CompressDccl(a) => compress_dccl(a),
        Command::CompressSvd(a) => compress_svd(a),
        Command::TrainTaskaware(a) => train_taskaware(a),
        Command::Finetune(a) => finetune(a),
        Command::Quantize(a) => quantize(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
