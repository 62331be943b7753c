use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{corpus_cer, decode, DecodeConfig, EvalError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::model::{build_model, write_checkpoint, AsrModel, ModelError};
use crate::synth::{Corpus, DatasetPartition, Recipe, SynthError, Utterance};
use crate::trainer::{train, Method, TrainError, TrainOutcome, TrainerConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("expansion method {method} needs a baseline checkpoint: {reason}")]
    MissingBaseline { method: Method, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row label for a report line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowKind {
    #[serde(rename = "Baseline-1")]
    Baseline1,
    #[serde(rename = "Baseline-2")]
    Baseline2,
    #[serde(untagged)]
    Expansion(Method),
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Baseline1 => "Baseline-1",
            RowKind::Baseline2 => "Baseline-2",
            RowKind::Expansion(m) => m.tag(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: RowKind,
    pub data: Recipe,
    pub cer_source: f64,
    /// Mean of the per-domain accent CERs.
    pub cer_accent: f64,
    pub per_domain: Vec<(String, f64)>,
    /// `(reference - method) / reference` in percent; positive is better.
    pub delta_source_pct: f64,
    pub delta_accent_pct: f64,
    pub wall_s: Option<f64>,
    pub trainable_fraction: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    /// Row the deltas are measured against.
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, method: RowKind, data: Recipe) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.data == data)
    }

    /// A copy with timing cleared, for byte-stable output.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.wall_s = None);
        r
    }
}

/// Scores for one model on the fixed test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub cer_source: f64,
    pub cer_accent: f64,
    pub per_domain: Vec<(String, f64)>,
}

pub fn evaluate_set(model: &AsrModel, utts: &[Utterance], decode_cfg: &DecodeConfig) -> Result<f64, ExperimentError> {
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let lp = model.ctc_log_probs(&u.features)?;
        hyps.push(decode(&lp, decode_cfg));
    }
    Ok(corpus_cer(utts.iter().zip(&hyps).map(|(u, h)| (u.labels.as_slice(), h.as_slice())))?)
}

pub fn evaluate(model: &AsrModel, partition: &DatasetPartition, decode_cfg: &DecodeConfig) -> Result<Scores, ExperimentError> {
    let cer_source = evaluate_set(model, &partition.test_source, decode_cfg)?;
    let mut per_domain = Vec::with_capacity(partition.test_accent.len());
    for (domain, utts) in &partition.test_accent {
        per_domain.push((domain.clone(), evaluate_set(model, utts, decode_cfg)?));
    }
    let cer_accent = if per_domain.is_empty() {
        0.0
    } else {
        per_domain.iter().map(|(_, c)| c).sum::<f64>() / per_domain.len() as f64
    };
    Ok(Scores {
        cer_source,
        cer_accent,
        per_domain,
    })
}

/// Recipes each expansion method is trained on.
pub fn expansion_cells(methods: &[Method]) -> Vec<(Method, Recipe)> {
    let mut cells = Vec::new();
    for &m in &Method::ALL {
        if !methods.contains(&m) {
            continue;
        }
        cells.push((m, Recipe::Accent));
        if m.is_maml() {
            cells.push((m, Recipe::AccentPlus));
        }
    }
    cells
}

/// Per-cell timing, reported separately from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub data: String,
    pub steps: usize,
    pub total_s: f64,
    pub median_step_ms: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub timing: Vec<TimingRow>,
    pub baseline1: AsrModel,
    pub baseline2: AsrModel,
    pub outcomes: Vec<(Method, Recipe, TrainOutcome)>,
}

pub(crate) fn pct(reference: f64, value: f64) -> f64 {
    if reference == 0.0 {
        0.0
    } else {
        (reference - value) / reference * 100.0
    }
}

fn baseline_cfg(cfg: &ExperimentConfig, salt: u64) -> TrainerConfig {
    TrainerConfig {
        method: Method::FT,
        freeze_policy: None,
        rng_seed: cfg.seed ^ salt,
        ..cfg.baseline.clone()
    }
}

/// Trains one expansion method from `start` (normally Baseline-2). The
/// snapshot for the regularizers is taken from `start`.
pub fn run_expansion(
    cfg: &ExperimentConfig,
    start: &AsrModel,
    method: Method,
    train_data: &[Utterance],
) -> Result<(AsrModel, TrainOutcome), ExperimentError> {
    let mut model = start.clone();
    model.params.set_freeze_mask(std::iter::empty())?;
    model.params.take_snapshot();
    let tcfg = TrainerConfig {
        method,
        rng_seed: cfg.seed ^ 0xe4a1,
        ..cfg.expansion.clone()
    };
    let outcome = train(&tcfg, &mut model, &cfg.loss, train_data)?;
    Ok((model, outcome))
}

/// Trains both baselines and every requested expansion cell, evaluates them
/// on the shared test sets and assembles the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun, ExperimentError> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.data)?;
    let init = build_model(&cfg.model, cfg.seed)?;
    let total_params = init.params.parameter_count() as f64;

    let mut rows: Vec<(RowKind, Recipe, Scores, f64, usize, TrainOutcome)> = Vec::new();
    let mut trained = Vec::new();
    for (kind, recipe, salt) in [
        (RowKind::Baseline1, Recipe::Mandarin, 0xb1),
        (RowKind::Baseline2, Recipe::All, 0xb2),
    ] {
        let partition = corpus.partition(recipe, cfg.seed)?;
        let mut model = init.clone();
        let outcome = train(&baseline_cfg(cfg, salt), &mut model, &cfg.loss, &partition.train)?;
        let scores = evaluate(&model, &partition, &cfg.decode)?;
        let frac = model.params.trainable_count() as f64 / total_params;
        rows.push((kind, recipe, scores, frac, outcome.records.len(), outcome));
        trained.push(model);
    }
    let baseline2 = trained.pop().expect("two baselines");
    let baseline1 = trained.pop().expect("two baselines");

    let mut outcomes = Vec::new();
    for (method, recipe) in expansion_cells(&cfg.methods) {
        let partition = corpus.partition(recipe, cfg.seed)?;
        let (model, outcome) = run_expansion(cfg, &baseline2, method, &partition.train)?;
        let scores = evaluate(&model, &partition, &cfg.decode)?;
        let frac = model.params.trainable_count() as f64 / total_params;
        rows.push((RowKind::Expansion(method), recipe, scores, frac, outcome.records.len(), outcome.clone()));
        outcomes.push((method, recipe, outcome));
    }

    let reference = rows
        .iter()
        .find(|r| r.0 == RowKind::Baseline2)
        .map(|r| r.2.clone())
        .expect("baseline-2 row");
    let mut timing = Vec::new();
    let report_rows = rows
        .into_iter()
        .map(|(kind, recipe, s, frac, steps, outcome)| {
            timing.push(TimingRow {
                method: kind.label().to_string(),
                data: recipe.name().to_string(),
                steps,
                total_s: outcome.total_wall_s(),
                median_step_ms: outcome.median_step_ms().unwrap_or(0.0),
            });
            ReportRow {
                method: kind,
                data: recipe,
                delta_source_pct: pct(reference.cer_source, s.cer_source),
                delta_accent_pct: pct(reference.cer_accent, s.cer_accent),
                cer_source: s.cer_source,
                cer_accent: s.cer_accent,
                per_domain: s.per_domain,
                wall_s: Some(outcome.total_wall_s()),
                trainable_fraction: frac,
                steps,
            }
        })
        .collect();
    Ok(ExperimentRun {
        report: ExperimentReport {
            seed: cfg.seed,
            reference: RowKind::Baseline2.label().to_string(),
            rows: report_rows,
        },
        timing,
        baseline1,
        baseline2,
        outcomes,
    })
}

/// Writes `report.{txt,csv,json}`, `timing.csv`, the resolved config and the
/// baseline checkpoints into `dir`.
pub fn write_experiment(cfg: &ExperimentConfig, run: &ExperimentRun, dir: &Path) -> Result<(), ExperimentError> {
    use super::report::{render_report, ReportFormat};
    std::fs::create_dir_all(dir)?;
    let report = if cfg.report_timing {
        run.report.clone()
    } else {
        run.report.without_timing()
    };
    for (fmt, ext) in [
        (ReportFormat::Table, "txt"),
        (ReportFormat::Csv, "csv"),
        (ReportFormat::Json, "json"),
    ] {
        std::fs::write(dir.join(format!("report.{ext}")), render_report(&report, fmt))?;
    }
    let mut w = csv::Writer::from_path(dir.join("timing.csv")).map_err(std::io::Error::other)?;
    for t in &run.timing {
        w.serialize(t).map_err(std::io::Error::other)?;
    }
    w.flush()?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_checkpoint(&run.baseline1, &dir.join("baseline1.ckpt"))?;
    write_checkpoint(&run.baseline2, &dir.join("baseline2.ckpt"))?;
    Ok(())
}
