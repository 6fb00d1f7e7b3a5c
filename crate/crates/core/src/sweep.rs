//! The reproduction driver: trains the baseline and every requested
//! compressed variant per seed, evaluates them on the test split and
//! aggregates medians into a relative-IRER grid and a summary table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, synthetic_embeddings, CorpusSpec, GeneratedData};
use crate::dccl::DcclModel;
use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluate, format_change, frequency_bucket_recon_report, relative_change, DecileReport, MetricsReport, RelativeChange, METRIC_NAMES};
use crate::nlu::{checkpoint_layout, model_to_bytes, EmbeddingSource, NluModel};
use crate::quant8::{quantize_model, QuantizeTargets, DEFAULT_BINS};
use crate::svdcomp::{make_factorized_layer, truncate_matrix};
use crate::train::{
    compress_embeddings, deploy_codes, finetune_nlu_frozen_codes, train_dccl_autoencoder, train_nlu_baseline,
    train_taskaware_dccl, train_taskaware_svd, Regime, TaskAwareInit, TrainConfig, TrainReport,
};

/// A compressed model family in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tag-svd")]
    TagSvd,
    #[serde(rename = "tag-dccl")]
    TagDccl,
    #[serde(rename = "tag-dccl-ft")]
    TagDcclFinetune,
    #[serde(rename = "taw-svd")]
    TawSvd,
    #[serde(rename = "taw-dccl")]
    TawDccl,
    #[serde(rename = "taw-dccl-norecon")]
    TawDcclNoRecon,
    #[serde(rename = "taw-dccl-scratch")]
    TawDcclScratch,
    #[serde(rename = "taw-dccl-q8")]
    TawDcclQuant,
    #[serde(rename = "q8")]
    Quant,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::TagSvd,
        Variant::TagDccl,
        Variant::TagDcclFinetune,
        Variant::TawSvd,
        Variant::TawDccl,
        Variant::TawDcclNoRecon,
        Variant::TawDcclScratch,
        Variant::TawDcclQuant,
        Variant::Quant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TagSvd => "tag-svd",
            Variant::TagDccl => "tag-dccl",
            Variant::TagDcclFinetune => "tag-dccl-ft",
            Variant::TawSvd => "taw-svd",
            Variant::TawDccl => "taw-dccl",
            Variant::TawDcclNoRecon => "taw-dccl-norecon",
            Variant::TawDcclScratch => "taw-dccl-scratch",
            Variant::TawDcclQuant => "taw-dccl-q8",
            Variant::Quant => "q8",
        }
    }

    /// Row label and compression type for the tables.
    pub fn label(self) -> (&'static str, &'static str) {
        match self {
            Variant::TagSvd => ("SVD", "TAg."),
            Variant::TagDccl => ("DCCL", "TAg."),
            Variant::TagDcclFinetune => ("DCCL + NLU fine-tuning", "TAg."),
            Variant::TawSvd => ("SVD", "TAw."),
            Variant::TawDccl => ("DCCL", "TAw."),
            Variant::TawDcclNoRecon => ("DCCL, no reconstruction loss", "TAw."),
            Variant::TawDcclScratch => ("DCCL, no pretraining", "TAw."),
            Variant::TawDcclQuant => ("DCCL + 8-bit LSTM", "TAw."),
            Variant::Quant => ("8-bit LSTM only", "NA"),
        }
    }

    /// Whether the variant has a compressed embedding table.
    pub fn compresses_embeddings(self) -> bool {
        self != Variant::Quant
    }

    fn needs_autoencoder(self) -> bool {
        matches!(
            self,
            Variant::TagDccl | Variant::TagDcclFinetune | Variant::TawDccl | Variant::TawDcclNoRecon | Variant::TawDcclQuant
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown variant `{s}`")))
    }
}

/// Epochs and learning rate of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Compression points; `m[i]` pairs with `k[i]`, a single entry is
    /// broadcast.
    pub m: Vec<usize>,
    pub k: Vec<usize>,
    pub hidden: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub reconstruction_weight: f64,
    pub quant_bins: usize,
    pub baseline: Stage,
    pub autoencoder: Stage,
    pub finetune: Stage,
    pub taskaware: Stage,
    pub scratch: Stage,
    pub svd: Stage,
    pub corpus: CorpusSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![1, 2, 3],
            variants: Variant::ALL.to_vec(),
            m: vec![8],
            k: vec![16],
            hidden: 64,
            batch_size: 32,
            tau: 1.0,
            reconstruction_weight: 1.0,
            quant_bins: DEFAULT_BINS,
            baseline: Stage { epochs: 25, learning_rate: 1e-4 },
            autoencoder: Stage { epochs: 300, learning_rate: 1e-4 },
            finetune: Stage { epochs: 5, learning_rate: 1e-4 },
            taskaware: Stage { epochs: 5, learning_rate: 1e-4 },
            scratch: Stage { epochs: 25, learning_rate: 1e-4 },
            svd: Stage { epochs: 5, learning_rate: 1e-3 },
            corpus: CorpusSpec::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn points(&self) -> Result<Vec<(usize, usize)>> {
        let n = self.m.len().max(self.k.len());
        let pick = |xs: &[usize], i: usize| if xs.len() == 1 { Some(xs[0]) } else { xs.get(i).copied() };
        if self.m.is_empty() || self.k.is_empty() || (self.m.len() != self.k.len() && self.m.len() != 1 && self.k.len() != 1) {
            return Err(Error::Spec("M and K lists must have equal length or one entry".into()));
        }
        let points: Vec<(usize, usize)> = (0..n).map(|i| (pick(&self.m, i).unwrap(), pick(&self.k, i).unwrap())).collect();
        if points.iter().any(|&(m, k)| m == 0 || k < 2) {
            return Err(Error::Spec("need M >= 1 and K >= 2".into()));
        }
        Ok(points)
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Spec("no seeds".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Spec("no variants".into()));
        }
        self.points()?;
        Ok(())
    }

    /// Training settings of one stage of the sweep.
    pub fn stage_config(&self, regime: Regime, stage: Stage, seed: u64, m: usize, k: usize) -> TrainConfig {
        TrainConfig {
            epochs: Some(stage.epochs),
            learning_rate: Some(stage.learning_rate),
            batch_size: self.batch_size,
            seed,
            tau: self.tau,
            m,
            k,
            hidden: self.hidden,
            reconstruction_weight: self.reconstruction_weight,
            ..TrainConfig::new(regime)
        }
    }
}

/// One evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub variant: Variant,
    /// `(M, K)`; absent for variants without compressed embeddings.
    pub point: Option<(usize, usize)>,
    pub svd_rank: Option<usize>,
    pub metrics: MetricsReport,
    pub relative: RelativeChange,
    pub model_bytes: usize,
    pub embedding_bytes: usize,
    pub model_rate: f64,
    pub embedding_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRecord {
    pub seed: u64,
    pub point: (usize, usize),
    /// `tag-dccl` after autoencoder training or a task-aware variant.
    pub variant: Variant,
    pub report: DecileReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub model_bytes: usize,
    pub embedding_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub baselines: Vec<BaselineResult>,
    pub runs: Vec<RunResult>,
    pub deciles: Vec<DecileRecord>,
    /// Training reports with wall time zeroed.
    #[serde(skip)]
    pub reports: Vec<(u64, String, TrainReport)>,
    /// Trained baseline of every seed, in seed order.
    #[serde(skip)]
    pub baseline_models: Vec<NluModel>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Rank whose factor storage is closest to `target_bytes`, at least 1.
pub fn matched_svd_rank(v: usize, d: usize, target_bytes: usize) -> usize {
    let per_rank = 4 * (v + 1 + d);
    ((target_bytes as f64 / per_rank as f64).round() as usize).clamp(1, v.min(d))
}

fn table_of(model: &NluModel) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(model.vocab.clone(), model.source.table()?)
}

/// Calls `progress` with a short line after every trained stage.
pub fn run_sweep(config: &SweepConfig, progress: &mut dyn FnMut(&str)) -> Result<SweepResult> {
    config.validate()?;
    let data = generate(&config.corpus)?;
    let pretrained = synthetic_embeddings(&config.corpus, &data.grammar, &data.train.vocab)?;
    run_sweep_on(config, &data, &pretrained, progress)
}

pub fn run_sweep_on(
    config: &SweepConfig,
    data: &GeneratedData,
    pretrained: &EmbeddingMatrix,
    progress: &mut dyn FnMut(&str),
) -> Result<SweepResult> {
    config.validate()?;
    let points = config.points()?;
    let wants = |v: Variant| config.variants.contains(&v);
    let (train, validation, test) = (&data.train, &data.validation, &data.test);
    let mut result = SweepResult {
        config: config.clone(),
        baselines: Vec::new(),
        runs: Vec::new(),
        deciles: Vec::new(),
        reports: Vec::new(),
        baseline_models: Vec::new(),
    };
    let keep = |result: &mut SweepResult, seed: u64, name: String, mut r: TrainReport| {
        r.wall_time_secs = 0.0;
        result.reports.push((seed, name, r));
    };

    for &seed in &config.seeds {
        let cfg = config.stage_config(Regime::NluBaseline, config.baseline, seed, 0, 2);
        let (baseline, report) = train_nlu_baseline(train, validation, pretrained, &cfg)?;
        progress(&format!("seed {seed}: baseline trained, best epoch {}", report.best_epoch));
        keep(&mut result, seed, "baseline".into(), report);
        let base_bytes = model_to_bytes(&baseline);
        let base_layout = checkpoint_layout(&base_bytes)?;
        let base_metrics = evaluate(&baseline, test)?;
        result.baselines.push(BaselineResult {
            seed,
            metrics: base_metrics,
            model_bytes: base_bytes.len(),
            embedding_bytes: base_layout.embedding_payload_bytes(),
        });
        let target = table_of(&baseline)?;
        result.baseline_models.push(baseline.clone());

        let record = |progress: &mut dyn FnMut(&str), result: &mut SweepResult, variant: Variant, point: Option<(usize, usize)>, rank: Option<usize>, model: &NluModel| -> Result<()> {
            let bytes = model_to_bytes(model);
            let layout = checkpoint_layout(&bytes)?;
            let metrics = evaluate(model, test)?;
            let run = RunResult {
                seed,
                variant,
                point,
                svd_rank: rank,
                relative: relative_change(&metrics, &base_metrics),
                metrics,
                model_bytes: bytes.len(),
                embedding_bytes: layout.embedding_payload_bytes(),
                model_rate: base_bytes.len() as f64 / bytes.len() as f64,
                embedding_rate: base_layout.embedding_payload_bytes() as f64 / layout.embedding_payload_bytes() as f64,
            };
            progress(&format!(
                "seed {seed}: {} {} IRER {} ({})",
                variant.name(),
                point.map_or(String::new(), |(m, k)| format!("M={m} K={k}")),
                metrics.irer.value().map_or("n/a".into(), |v| format!("{v:.4}")),
                format_change(run.relative.get("IRER"))
            ));
            result.runs.push(run);
            Ok(())
        };

        if wants(Variant::Quant) {
            let (q, _) = quantize_model(&baseline, config.quant_bins, QuantizeTargets::default())?;
            record(&mut *progress, &mut result, Variant::Quant, None, None, &q)?;
        }

        for &(m, k) in &points {
            let point = Some((m, k));
            let mut ae: Option<DcclModel> = None;
            if config.variants.iter().any(|v| v.needs_autoencoder()) {
                let cfg = config.stage_config(Regime::DcclAutoencoder, config.autoencoder, seed, m, k);
                let (model, report) = train_dccl_autoencoder(&target.weights, &cfg)?;
                progress(&format!("seed {seed}: autoencoder M={m} K={k} mse {:.5}", report.summary["final_mse"]));
                keep(&mut result, seed, format!("autoencoder-{m}x{k}"), report);
                result.deciles.push(DecileRecord {
                    seed,
                    point: (m, k),
                    variant: Variant::TagDccl,
                    report: frequency_bucket_recon_report(&target, &model, train)?,
                });
                ae = Some(model);
            }
            let compressed = ae.as_ref().map(|a| compress_embeddings(a, &target)).transpose()?;
            let dccl_bytes = compressed.as_ref().map(|c| c.sizes().payload()).unwrap_or_else(|| {
                crate::dccl::packed_len(target.len(), m, k) + m * k * target.dim() * 4
            });

            if wants(Variant::TagDccl) {
                let c = compressed.as_ref().expect("trained above");
                let model = baseline.clone().with_source(EmbeddingSource::codes(c.clone()))?;
                record(&mut *progress, &mut result, Variant::TagDccl, point, None, &model)?;
            }
            if wants(Variant::TagDcclFinetune) {
                let c = compressed.as_ref().expect("trained above");
                let cfg = config.stage_config(Regime::DcclFinetuneNlu, config.finetune, seed, m, k);
                let (model, report) = finetune_nlu_frozen_codes(&baseline, c, train, validation, &cfg)?;
                keep(&mut result, seed, format!("finetune-{m}x{k}"), report);
                record(&mut *progress, &mut result, Variant::TagDcclFinetune, point, None, &model)?;
            }
            let aware = [
                (Variant::TawDccl, Regime::TaskawareDccl),
                (Variant::TawDcclNoRecon, Regime::TaskawareDcclNoRecon),
                (Variant::TawDcclScratch, Regime::TaskawareDcclScratch),
            ];
            for (variant, regime) in aware {
                let quantized_too = variant == Variant::TawDccl && wants(Variant::TawDcclQuant);
                if !wants(variant) && !quantized_too {
                    continue;
                }
                let (stage, init, tgt) = if regime == Regime::TaskawareDcclScratch {
                    (config.scratch, TaskAwareInit::default(), pretrained)
                } else {
                    (config.taskaware, TaskAwareInit { nlu: Some(&baseline), autoencoder: ae.as_ref() }, &target)
                };
                let cfg = config.stage_config(regime, stage, seed, m, k);
                let (model, report) = train_taskaware_dccl(train, validation, tgt, init, &cfg)?;
                keep(&mut result, seed, format!("{}-{m}x{k}", variant.name()), report);
                if let EmbeddingSource::Dccl { model: d, .. } = &model.source {
                    result.deciles.push(DecileRecord {
                        seed,
                        point: (m, k),
                        variant,
                        report: frequency_bucket_recon_report(tgt, d, train)?,
                    });
                }
                let deployed = deploy_codes(&model)?;
                if wants(variant) {
                    record(&mut *progress, &mut result, variant, point, None, &deployed)?;
                }
                if quantized_too {
                    let (q, _) = quantize_model(&deployed, config.quant_bins, QuantizeTargets::default())?;
                    record(&mut *progress, &mut result, Variant::TawDcclQuant, point, None, &q)?;
                }
            }
            if wants(Variant::TagSvd) || wants(Variant::TawSvd) {
                let rank = matched_svd_rank(target.len(), target.dim(), dccl_bytes);
                let fraction = rank as f64 / target.len().min(target.dim()) as f64;
                let factors = truncate_matrix(&target.weights, fraction)?;
                if wants(Variant::TagSvd) {
                    let layer = make_factorized_layer(&factors);
                    let model = baseline.clone().with_source(EmbeddingSource::factorized(layer))?;
                    record(&mut *progress, &mut result, Variant::TagSvd, point, Some(factors.rank), &model)?;
                }
                if wants(Variant::TawSvd) {
                    let cfg = TrainConfig {
                        svd_fraction: fraction,
                        ..config.stage_config(Regime::TaskawareSvd, config.svd, seed, m, k)
                    };
                    let (model, report) = train_taskaware_svd(&baseline, &factors, train, validation, &cfg)?;
                    keep(&mut result, seed, format!("taw-svd-{m}x{k}"), report);
                    record(&mut *progress, &mut result, Variant::TawSvd, point, Some(factors.rank), &model)?;
                }
            }
        }
    }
    Ok(result)
}

impl SweepResult {
    fn runs_of(&self, variant: Variant, point: Option<(usize, usize)>) -> Vec<&RunResult> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant && (r.point == point || variant == Variant::Quant))
            .collect()
    }

    /// Median absolute IRER of a variant at a point over seeds.
    pub fn median_irer(&self, variant: Variant, point: Option<(usize, usize)>) -> Option<f64> {
        let xs: Vec<f64> = self.runs_of(variant, point).iter().filter_map(|r| r.metrics.irer.value()).collect();
        median(&xs)
    }

    pub fn median_baseline_irer(&self) -> Option<f64> {
        median(&self.baselines.iter().filter_map(|b| b.metrics.irer.value()).collect::<Vec<_>>())
    }

    /// Median relative change of one metric (index into [`METRIC_NAMES`]).
    pub fn median_change(&self, variant: Variant, point: Option<(usize, usize)>, metric: usize) -> Option<f64> {
        let xs: Vec<f64> = self.runs_of(variant, point).iter().filter_map(|r| r.relative.changes[metric]).collect();
        median(&xs)
    }

    pub fn median_ratio(&self, variant: Variant, point: (usize, usize)) -> Option<f64> {
        let xs: Vec<f64> = self
            .deciles
            .iter()
            .filter(|d| d.variant == variant && d.point == point)
            .map(|d| d.report.top_bottom_ratio())
            .collect();
        median(&xs)
    }

    fn ordered_variants(&self) -> Vec<Variant> {
        Variant::ALL.into_iter().filter(|v| self.config.variants.contains(v)).collect()
    }

    fn seeds_text(&self) -> String {
        self.config.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    }

    /// Median relative IRER change per variant (rows) and compression
    /// point (columns, labelled by embedding compression rate).
    pub fn grid_table(&self) -> String {
        let points = self.config.points().unwrap_or_default();
        let mut s = String::new();
        writeln!(s, "Relative IRER change (%) vs uncompressed, median over seeds {}", self.seeds_text()).unwrap();
        let mut header = format!("{:<30} {:<5}", "Method", "Type");
        for &(m, k) in &points {
            let rate = median(
                &self
                    .runs
                    .iter()
                    .filter(|r| r.point == Some((m, k)) && matches!(r.variant, Variant::TagDccl | Variant::TawDccl | Variant::TagDcclFinetune | Variant::TawDcclNoRecon | Variant::TawDcclScratch))
                    .map(|r| r.embedding_rate)
                    .collect::<Vec<_>>(),
            );
            let col = format!("M={m},K={k} ({})", rate.map_or("-".into(), |r| format!("{r:.1}x")));
            write!(header, " {col:>22}").unwrap();
        }
        writeln!(s, "{header}").unwrap();
        for v in self.ordered_variants().into_iter().filter(|v| v.compresses_embeddings()) {
            let (name, kind) = v.label();
            let mut line = format!("{name:<30} {kind:<5}");
            for &p in &points {
                write!(line, " {:>22}", format_change(self.median_change(v, Some(p), 0))).unwrap();
            }
            writeln!(s, "{line}").unwrap();
        }
        s
    }

    /// Sizes, rates and the five relative metrics per variant at one
    /// compression point.
    pub fn summary_table(&self, point: (usize, usize)) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "Summary at M={}, K={}; medians over seeds {}; baseline IRER {}",
            point.0,
            point.1,
            self.seeds_text(),
            self.median_baseline_irer().map_or("n/a".into(), |v| format!("{v:.4}"))
        )
        .unwrap();
        let mut header = format!("{:<30} {:<5} {:>10} {:>10}", "Method", "Type", "Model rate", "WE rate");
        for name in METRIC_NAMES {
            write!(header, " {:>10}", format!("{name} %")).unwrap();
        }
        writeln!(s, "{header}").unwrap();
        let mut line = format!("{:<30} {:<5} {:>10} {:>10}", "Uncompressed", "NA", "1.0x", "1.0x");
        for _ in METRIC_NAMES {
            write!(line, " {:>10}", "0").unwrap();
        }
        writeln!(s, "{line}").unwrap();
        for v in self.ordered_variants() {
            let runs = self.runs_of(v, Some(point));
            if runs.is_empty() {
                continue;
            }
            let (name, kind) = v.label();
            let mr = median(&runs.iter().map(|r| r.model_rate).collect::<Vec<_>>()).unwrap();
            let er = median(&runs.iter().map(|r| r.embedding_rate).collect::<Vec<_>>()).unwrap();
            let mut line = format!("{name:<30} {kind:<5} {:>10} {:>10}", format!("{mr:.1}x"), format!("{er:.1}x"));
            for i in 0..METRIC_NAMES.len() {
                write!(line, " {:>10}", format_change(self.median_change(v, Some(point), i))).unwrap();
            }
            writeln!(s, "{line}").unwrap();
        }
        s
    }

    /// Top-over-bottom decile reconstruction ratios, median over seeds.
    pub fn decile_table(&self) -> String {
        let mut s = String::from("Reconstruction MSE, top / bottom frequency decile (median over seeds)\n");
        let mut keys: Vec<((usize, usize), Variant)> = self.deciles.iter().map(|d| (d.point, d.variant)).collect();
        keys.sort();
        keys.dedup();
        for (p, v) in keys {
            let tops: Vec<f64> = self.deciles.iter().filter(|d| d.point == p && d.variant == v).map(|d| d.report.buckets[0].mean_mse).collect();
            let bottoms: Vec<f64> = self.deciles.iter().filter(|d| d.point == p && d.variant == v).map(|d| d.report.buckets[9].mean_mse).collect();
            writeln!(
                s,
                "M={},K={} {:<18} top {:.5}  bottom {:.5}  ratio {:.4}",
                p.0,
                p.1,
                v.name(),
                median(&tops).unwrap(),
                median(&bottoms).unwrap(),
                self.median_ratio(v, p).unwrap()
            )
            .unwrap();
        }
        s
    }

    /// Everything printed by the `sweep` command, deterministic given the
    /// config.
    pub fn render(&self) -> String {
        let mut s = self.grid_table();
        s.push('\n');
        for p in self.config.points().unwrap_or_default() {
            s.push_str(&self.summary_table(p));
            s.push('\n');
        }
        if !self.deciles.is_empty() {
            s.push_str(&self.decile_table());
        }
        s
    }

    /// One JSON record per baseline, run and decile report.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        s.push_str(&serde_json::json!({ "config": self.config }).to_string());
        s.push('\n');
        for b in &self.baselines {
            s.push_str(&serde_json::json!({ "baseline": b }).to_string());
            s.push('\n');
        }
        for r in &self.runs {
            s.push_str(&serde_json::json!({ "run": r }).to_string());
            s.push('\n');
        }
        for d in &self.deciles {
            s.push_str(&serde_json::json!({ "deciles": d }).to_string());
            s.push('\n');
        }
        s
    }
}
