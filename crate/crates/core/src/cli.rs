//! Command implementations behind the `stocksignal` binary.
//!
//! Every command takes a resolved [`RunConfig`], reads its inputs from the
//! configured paths or from earlier commands' outputs under `out_dir`, and
//! writes plain CSV/JSON/text files plus a `config.toml` snapshot of the
//! configuration it ran with. Output directories:
//!
//! * `prices/` raw OHLC CSV per symbol (`fetch`)
//! * `data/{scheme}-{alignment}/` labelled dataset, class balance, cleaned
//!   corpus (`label`, `prep`)
//! * `runs/{scheme}-{alignment}-{vectorizer}-{model}/` model artifact,
//!   split, reports, cross-validation and signal (`train`, `eval`, `cv`,
//!   `signal`)
//! * `grid/{scheme}-{alignment}/` ranked grid table (`grid`)
//! * `report/` comparison table and class-balance CSVs (`report`)

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::anyhow;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    self, class_report, confusion, derive_seed, final_window, fit, fit_and_evaluate, grid_search, investment_signal,
    kfold, ClassReport, ConfusionMatrix, CvSpec, GridSpec, ModelSpec, Scoring, Signal, SplitSpec,
};
use crate::features::{vectorize, VocabConfig, Vocabulary, Weighting};
use crate::labelling::{
    class_balance, join_messages, read_labelled_csv, write_labelled_csv, AlignmentMode, LabelRule, LabelScheme,
    LabelledMessage, PrevDayReference, SchemeKind, DEFAULT_THRESHOLD,
};
use crate::market_data::{fetch_ohlc, fill_calendar, parse_ohlc_csv, DateFormat, FetchConfig};
use crate::models::{LrConfig, Model, ModelArtifact, ModelError, NbVariant};
use crate::textprep::{preprocess, read_messages_csv, write_clean_corpus, PipelineConfig, StageToggles};

// ---------------------------------------------------------------------------
// Errors

/// Exit code 1 for bad inputs or configuration, 2 for failures while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0:#}")]
    Validation(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Classify<T> {
    fn invalid(self, context: impl FnOnce() -> String) -> CliResult<T>;
    fn runtime(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Validation(e.into().context(context())))
    }
    fn runtime(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into().context(context())))
    }
}

fn invalid(msg: String) -> CliError {
    CliError::Validation(anyhow!(msg))
}

/// Divergence and non-monotone training are runtime failures; every other
/// model error comes from the data or configuration.
fn model_failure(e: eval::EvalError, context: &str) -> CliError {
    let err = anyhow::Error::new(e).context(context.to_string());
    match err.downcast_ref::<eval::EvalError>() {
        Some(eval::EvalError::Model(ModelError::Diverged { .. } | ModelError::NonMonotone { .. })) => {
            CliError::Runtime(err)
        }
        _ => CliError::Validation(err),
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Nb,
    Lr,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nb => "nb",
            ModelKind::Lr => "lr",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nb" => Ok(ModelKind::Nb),
            "lr" => Ok(ModelKind::Lr),
            other => Err(format!("unknown model `{other}` (expected nb or lr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchSection {
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub symbols: Vec<String>,
}

fn default_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// `Symbol,Message,Datetime,User,Message_Id` CSV.
    pub messages: Option<PathBuf>,
    /// OHLC CSV per symbol. Symbols missing here fall back to
    /// `{out_dir}/prices/{symbol}.csv` written by `fetch`.
    pub ohlc: BTreeMap<String, PathBuf>,
    pub date_format: DateFormat,
    pub fetch: Option<FetchSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub scheme: SchemeKind,
    pub alignment: AlignmentMode,
    pub threshold: f64,
    pub prev_reference: PrevDayReference,
    /// Hours added to UTC message timestamps before taking the date.
    pub tz_offset: i32,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            scheme: SchemeKind::Binary,
            alignment: AlignmentMode::SameDay,
            threshold: DEFAULT_THRESHOLD,
            prev_reference: PrevDayReference::Close,
            tz_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub repeat_limit: usize,
    pub stages: StageToggles,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { repeat_limit: 2, stages: StageToggles::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub vectorizer: Weighting,
    pub min_df: usize,
    pub max_features: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { vectorizer: Weighting::TfIdf, min_df: 1, max_features: None }
    }
}

impl FeatureConfig {
    pub fn vocab(&self) -> VocabConfig {
        VocabConfig { min_df: self.min_df, max_features: self.max_features, allow_empty: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub nb_alpha: f64,
    pub nb_variant: NbVariant,
    pub lr: LrConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::Nb, nb_alpha: 1.0, nb_variant: NbVariant::Multinomial, lr: LrConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_percent: u32,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_percent: 90, stratified: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GridScoring {
    #[default]
    Cv,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub vectorizers: Vec<Weighting>,
    pub models: Vec<ModelKind>,
    pub nb_alphas: Vec<f64>,
    pub nb_variants: Vec<NbVariant>,
    pub lr_lambdas: Vec<f64>,
    pub lr_step_sizes: Vec<f64>,
    pub scoring: GridScoring,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            vectorizers: vec![Weighting::Count, Weighting::TfIdf],
            models: vec![ModelKind::Nb, ModelKind::Lr],
            nb_alphas: vec![1.0],
            nb_variants: vec![NbVariant::Multinomial],
            lr_lambdas: vec![1.0],
            lr_step_sizes: vec![LrConfig::default().step_size],
            scoring: GridScoring::Cv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub tau: f64,
    pub window_days: i64,
    /// Keep each symbol's final window out of the training set. Off by
    /// default: the split stays purely random and the overlap is reported.
    pub exclude_window_from_training: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig { tau: eval::DEFAULT_TAU, window_days: eval::SIGNAL_WINDOW_DAYS, exclude_window_from_training: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReportConfig {
    /// Run directories to aggregate; empty means every run under `out_dir/runs`.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Free-form name of the data period (e.g. `1-year`), carried into reports.
    pub window: String,
    pub data: DataConfig,
    pub labels: LabelConfig,
    pub prep: PrepConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    pub cv: CvConfig,
    pub grid: GridConfig,
    pub signal: SignalConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            window: "all".into(),
            data: DataConfig::default(),
            labels: LabelConfig::default(),
            prep: PrepConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            split: SplitConfig::default(),
            cv: CvConfig::default(),
            grid: GridConfig::default(),
            signal: SignalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Command-line values that override the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scheme: Option<SchemeKind>,
    pub alignment: Option<AlignmentMode>,
    pub vectorizer: Option<Weighting>,
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub tz_offset: Option<i32>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<RunConfig> {
        toml::from_str(text).invalid(|| "invalid configuration".into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).invalid(|| format!("reading config {}", p.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.scheme {
            self.labels.scheme = v;
        }
        if let Some(v) = o.alignment {
            self.labels.alignment = v;
        }
        if let Some(v) = o.vectorizer {
            self.features.vectorizer = v;
        }
        if let Some(v) = o.model {
            self.model.kind = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.tau {
            self.signal.tau = v;
        }
        if let Some(v) = o.tz_offset {
            self.labels.tz_offset = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        LabelScheme::new(self.labels.scheme, self.labels.threshold).invalid(|| "labels.threshold".into())?;
        if !(1..=99).contains(&self.split.train_percent) {
            return Err(invalid(format!("split.train_percent must be in 1..=99, got {}", self.split.train_percent)));
        }
        if !(0.0..=1.0).contains(&self.signal.tau) {
            return Err(invalid(format!("signal.tau must be in [0, 1], got {}", self.signal.tau)));
        }
        if self.signal.window_days < 1 {
            return Err(invalid(format!("signal.window_days must be positive, got {}", self.signal.window_days)));
        }
        if !(-23..=23).contains(&self.labels.tz_offset) {
            return Err(invalid(format!("labels.tz_offset must be within ±23 hours, got {}", self.labels.tz_offset)));
        }
        Ok(())
    }

    fn rule(&self) -> LabelRule {
        let scheme = LabelScheme { kind: self.labels.scheme, threshold: self.labels.threshold };
        LabelRule { scheme, alignment: self.labels.alignment, prev_reference: self.labels.prev_reference }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data").join(format!("{}-{}", self.labels.scheme.as_str(), self.labels.alignment.as_str()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join("runs").join(format!(
            "{}-{}-{}-{}",
            self.labels.scheme.as_str(),
            self.labels.alignment.as_str(),
            self.features.vectorizer.as_str(),
            self.model.kind.as_str()
        ))
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.out_dir.join("grid").join(format!("{}-{}", self.labels.scheme.as_str(), self.labels.alignment.as_str()))
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_percent: self.split.train_percent,
            seed: derive_seed(self.seed, "split"),
            stratified: self.split.stratified,
        }
    }

    pub fn cv_spec(&self) -> CvSpec {
        CvSpec { k: self.cv.k, seed: derive_seed(self.seed, "cv") }
    }

    fn lr_config(&self, base: LrConfig) -> LrConfig {
        LrConfig { seed: derive_seed(self.seed, "lr"), ..base }
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model.kind {
            ModelKind::Nb => ModelSpec::Nb { alpha: self.model.nb_alpha, variant: self.model.nb_variant },
            ModelKind::Lr => ModelSpec::Lr(self.lr_config(self.model.lr)),
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        let mut models = Vec::new();
        for kind in &self.grid.models {
            match kind {
                ModelKind::Nb => {
                    for &alpha in &self.grid.nb_alphas {
                        for &variant in &self.grid.nb_variants {
                            models.push(ModelSpec::Nb { alpha, variant });
                        }
                    }
                }
                ModelKind::Lr => {
                    for &lambda in &self.grid.lr_lambdas {
                        for &step_size in &self.grid.lr_step_sizes {
                            models.push(ModelSpec::Lr(self.lr_config(LrConfig { lambda, step_size, ..self.model.lr })));
                        }
                    }
                }
            }
        }
        GridSpec { vectorizers: self.grid.vectorizers.clone(), vocab_options: vec![self.features.vocab()], models }
    }

    fn class_names(&self) -> Vec<String> {
        let kind = self.labels.scheme;
        kind.classes().iter().map(|l| l.code(kind).to_string()).collect()
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).invalid(|| format!("reading {}", path.display()))
}

/// Reads an output of an earlier command, naming the command on failure.
fn read_stage(path: &Path, producer: &str) -> CliResult<String> {
    fs::read_to_string(path).invalid(|| format!("reading {} (run `{producer}` first)", path.display()))
}

fn write(path: &Path, contents: &str) -> CliResult<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).runtime(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).runtime(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    write(path, &s)
}

fn snapshot(dir: &Path, config: &RunConfig) -> CliResult<PathBuf> {
    write(&dir.join("config.toml"), &config.to_toml())
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

/// What a command produced: written files and human-readable lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// fetch

pub fn cmd_fetch(config: &RunConfig) -> CliResult<CommandOutput> {
    let fetch = config.data.fetch.as_ref().ok_or_else(|| invalid("no [data.fetch] section in the configuration".into()))?;
    if fetch.start > fetch.end {
        return Err(invalid(format!("fetch start {} is after end {}", fetch.start, fetch.end)));
    }
    let client = FetchConfig { base_url: fetch.base_url.clone(), timeout_secs: fetch.timeout_secs };
    let dir = config.out_dir.join("prices");
    let mut out = CommandOutput::default();
    for symbol in &fetch.symbols {
        let body = fetch_ohlc(&client, symbol, fetch.start, fetch.end).runtime(|| format!("fetching {symbol}"))?;
        let series = parse_ohlc_csv(&body, symbol, config.data.date_format).invalid(|| format!("response for {symbol}"))?;
        out.files.push(write(&dir.join(format!("{symbol}.csv")), &body)?);
        out.lines.push(format!("{symbol}: {} bars", series.len()));
    }
    out.files.push(snapshot(&dir, config)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// label

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub label: String,
    pub name: String,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub scheme: SchemeKind,
    pub alignment: AlignmentMode,
    pub window: String,
    pub messages: usize,
    pub labelled: usize,
    /// Messages whose day fell in the excluded neutral band.
    pub excluded: usize,
    /// Binary labels decided by an exact price tie.
    pub ties: usize,
    pub classes: Vec<ClassShare>,
}

impl LabelSummary {
    /// `Positive 55.0% | Negative 45.0%` style line, positive class first.
    pub fn proportions_line(&self) -> String {
        self.classes
            .iter()
            .rev()
            .map(|c| format!("{} {:.1}%", c.name, c.share * 100.0))
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn to_csv(&self) -> String {
        let mut rows = vec![vec!["label".to_string(), "name".into(), "count".into(), "share".into()]];
        for c in &self.classes {
            rows.push(vec![c.label.clone(), c.name.clone(), c.count.to_string(), format!("{:.6}", c.share)]);
        }
        csv_string(rows)
    }
}

fn ohlc_path(config: &RunConfig, symbol: &str) -> PathBuf {
    config.data.ohlc.get(symbol).cloned().unwrap_or_else(|| config.out_dir.join("prices").join(format!("{symbol}.csv")))
}

pub fn cmd_label(config: &RunConfig) -> CliResult<CommandOutput> {
    let messages_path = config.data.messages.as_ref().ok_or_else(|| invalid("data.messages is not set".into()))?;
    let messages = read_messages_csv(&read(messages_path)?).invalid(|| messages_path.display().to_string())?;
    let kind = config.labels.scheme;
    let rule = config.rule();

    let mut by_symbol: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in messages.iter().enumerate() {
        by_symbol.entry(m.symbol.as_str()).or_default().push(i);
    }
    let mut labelled: Vec<Option<LabelledMessage>> = vec![None; messages.len()];
    let (mut excluded, mut ties) = (0, 0);
    let mut out_of_span = Vec::new();
    for (symbol, idx) in &by_symbol {
        let path = ohlc_path(config, symbol);
        let text = fs::read_to_string(&path)
            .invalid(|| format!("no readable price data for symbol {symbol} at {}", path.display()))?;
        let series = parse_ohlc_csv(&text, symbol, config.data.date_format).invalid(|| path.display().to_string())?;
        let filled = fill_calendar(&series).invalid(|| path.display().to_string())?;
        let subset: Vec<_> = idx.iter().map(|&i| messages[i].clone()).collect();
        match join_messages(&subset, &filled, &rule, config.labels.tz_offset) {
            Ok(joined) => {
                excluded += joined.excluded;
                ties += joined.ties;
                let pos: HashMap<&str, usize> = idx.iter().map(|&i| (messages[i].message_id.as_str(), i)).collect();
                for lm in joined.labelled {
                    let i = pos[lm.message.message_id.as_str()];
                    labelled[i] = Some(lm);
                }
            }
            Err(crate::labelling::LabelError::MessagesOutOfSpan { message_ids }) => out_of_span.extend(message_ids),
            Err(e) => return Err(e).invalid(|| messages_path.display().to_string()),
        }
    }
    if !out_of_span.is_empty() {
        return Err(invalid(format!(
            "{} message(s) dated outside their symbol's price data: {}",
            out_of_span.len(),
            out_of_span.join(", ")
        )));
    }
    let labelled: Vec<LabelledMessage> = labelled.into_iter().flatten().collect();

    let counts = class_balance(&labelled).ok();
    let classes = kind
        .classes()
        .iter()
        .map(|&l| ClassShare {
            label: l.code(kind).to_string(),
            name: l.as_str().to_string(),
            count: counts.as_ref().map_or(0, |b| b.counts.get(&l).copied().unwrap_or(0)),
            share: counts.as_ref().map_or(0.0, |b| b.share(l)),
        })
        .collect();
    let summary = LabelSummary {
        scheme: kind,
        alignment: config.labels.alignment,
        window: config.window.clone(),
        messages: messages.len(),
        labelled: labelled.len(),
        excluded,
        ties,
        classes,
    };

    let dir = config.data_dir();
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("labelled.csv"), &write_labelled_csv(&labelled, kind))?);
    out.files.push(write(&dir.join("class_balance.csv"), &summary.to_csv())?);
    out.files.push(write_json(&dir.join("label_summary.json"), &summary)?);
    out.files.push(snapshot(&dir, config)?);
    out.lines.push(format!("{} of {} messages labelled, {} excluded", summary.labelled, summary.messages, summary.excluded));
    out.lines.push(summary.proportions_line());
    Ok(out)
}

// ---------------------------------------------------------------------------
// prep

pub fn cmd_prep(config: &RunConfig) -> CliResult<CommandOutput> {
    let dir = config.data_dir();
    let labelled = load_labelled(config)?;
    let pipeline = PipelineConfig { repeat_limit: config.prep.repeat_limit, ..PipelineConfig::with_stages(config.prep.stages) };
    let cleaned: Vec<_> = labelled.iter().map(|m| preprocess(&m.message.message, &pipeline)).collect();
    let ids: Vec<&str> = labelled.iter().map(|m| m.message.message_id.as_str()).collect();
    let (corpus, sidecar) = write_clean_corpus(&ids, &cleaned);
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("clean_corpus.txt"), &corpus)?);
    out.files.push(write(&dir.join("clean_meta.csv"), &sidecar)?);
    out.files.push(snapshot(&dir, config)?);
    let dropped = cleaned.iter().filter(|c| c.dropped).count();
    out.lines.push(format!("{} messages cleaned, {} dropped", cleaned.len(), dropped));
    Ok(out)
}

fn load_labelled(config: &RunConfig) -> CliResult<Vec<LabelledMessage>> {
    let path = config.data_dir().join("labelled.csv");
    read_labelled_csv(&read_stage(&path, "label")?, config.labels.scheme).invalid(|| path.display().to_string())
}

/// Labelled messages that survived cleaning, with their tokens and class
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub messages: Vec<LabelledMessage>,
    pub docs: Vec<Vec<String>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn load(config: &RunConfig) -> CliResult<Dataset> {
        let dir = config.data_dir();
        let labelled = load_labelled(config)?;
        let corpus = read_stage(&dir.join("clean_corpus.txt"), "prep")?;
        let meta_path = dir.join("clean_meta.csv");
        let meta = read_stage(&meta_path, "prep")?;
        let lines: Vec<&str> = corpus.lines().collect();
        let mut reader = csv::Reader::from_reader(meta.as_bytes());
        let rows: Vec<(String, String)> =
            reader.deserialize().collect::<Result<_, _>>().invalid(|| meta_path.display().to_string())?;
        if rows.len() != labelled.len() || lines.len() != labelled.len() {
            return Err(invalid(format!(
                "cleaned corpus has {} lines and {} metadata rows for {} labelled messages (rerun `prep`)",
                lines.len(),
                rows.len(),
                labelled.len()
            )));
        }
        let kind = config.labels.scheme;
        let mut ds = Dataset { messages: Vec::new(), docs: Vec::new(), labels: Vec::new(), n_classes: kind.n_classes() };
        for ((m, line), (id, dropped)) in labelled.into_iter().zip(lines).zip(rows) {
            if id != m.message.message_id {
                return Err(invalid(format!("cleaned corpus is out of step with labelled.csv at message {id}")));
            }
            if dropped == "true" {
                continue;
            }
            ds.docs.push(line.split_whitespace().map(str::to_string).collect());
            ds.labels.push(m.outcome.class_index(kind).expect("label valid under its own scheme"));
            ds.messages.push(m);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn windows(&self, config: &RunConfig) -> BTreeMap<String, (NaiveDate, NaiveDate, Vec<usize>)> {
        final_window(&self.messages, config.signal.window_days, config.labels.tz_offset)
    }
}

// ---------------------------------------------------------------------------
// train / eval

fn load_artifact(config: &RunConfig) -> CliResult<(ModelArtifact, Vocabulary)> {
    let dir = config.run_dir();
    let model_path = dir.join("model.json");
    let artifact = ModelArtifact::from_json(&read_stage(&model_path, "train")?).invalid(|| model_path.display().to_string())?;
    let vocab_path = dir.join("vocab.csv");
    let vocab = Vocabulary::from_csv(&read_stage(&vocab_path, "train")?).invalid(|| vocab_path.display().to_string())?;
    if vocab.content_hash() != artifact.vocab_hash {
        return Err(invalid(format!("{} does not match the vocabulary the model was trained on", vocab_path.display())));
    }
    if artifact.scheme != config.labels.scheme.as_str() {
        return Err(invalid(format!("model was trained for scheme {}, config says {}", artifact.scheme, config.labels.scheme)));
    }
    Ok((artifact, vocab))
}

pub fn cmd_train(config: &RunConfig) -> CliResult<CommandOutput> {
    let ds = Dataset::load(config)?;
    let (mut train, test) = eval::split(&ds.labels, &config.split_spec()).invalid(|| "train/test split".into())?;
    let window: BTreeSet<usize> = ds.windows(config).into_values().flat_map(|(_, _, idx)| idx).collect();
    let mut held = 0;
    if config.signal.exclude_window_from_training {
        let before = train.len();
        train.retain(|i| !window.contains(i));
        held = before - train.len();
    }
    train.sort_unstable();
    if train.is_empty() {
        return Err(invalid("no training messages left after the split".into()));
    }
    let fitted = fit(&ds.docs, &ds.labels, ds.n_classes, &train, config.features.vectorizer, &config.features.vocab(), &config.model_spec())
        .map_err(|e| model_failure(e, "training"))?;

    let artifact = ModelArtifact::new(
        fitted.model.clone(),
        config.labels.scheme.as_str(),
        config.features.vectorizer.as_str(),
        fitted.vocab.content_hash(),
    );
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    let test_set: BTreeSet<usize> = test.iter().copied().collect();
    let mut rows = vec![vec!["message_id".to_string(), "part".into()]];
    for (i, m) in ds.messages.iter().enumerate() {
        let part = if train_set.contains(&i) {
            "train"
        } else if test_set.contains(&i) {
            "test"
        } else {
            "held"
        };
        rows.push(vec![m.message.message_id.clone(), part.into()]);
    }

    let dir = config.run_dir();
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("model.json"), &artifact.to_json())?);
    out.files.push(write(&dir.join("vocab.csv"), &fitted.vocab.to_csv())?);
    out.files.push(write(&dir.join("split.csv"), &csv_string(rows))?);
    out.files.push(snapshot(&dir, config)?);
    out.lines.push(format!(
        "trained {} on {} messages ({} test, {} held out for the signal window), vocabulary {}",
        config.model.kind.as_str(),
        train.len(),
        test.len(),
        held,
        fitted.vocab.len()
    ));
    out.lines.push(format!(
        "{} of {} signal-window messages are in the training set",
        window.iter().filter(|i| train_set.contains(i)).count(),
        window.len()
    ));
    if let Model::Lr(lr) = &fitted.model {
        out.lines.push(format!(
            "lr: {} iterations, final loss {:.6}, converged {}",
            lr.stats.iterations, lr.stats.final_loss, lr.stats.converged
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub scheme: SchemeKind,
    pub alignment: AlignmentMode,
    pub window: String,
    pub vectorizer: Weighting,
    pub model: ModelKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub run: RunInfo,
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub report: ClassReport,
}

fn run_info(config: &RunConfig) -> RunInfo {
    RunInfo {
        scheme: config.labels.scheme,
        alignment: config.labels.alignment,
        window: config.window.clone(),
        vectorizer: config.features.vectorizer,
        model: config.model.kind,
        seed: config.seed,
    }
}

fn predict(artifact: &ModelArtifact, vocab: &Vocabulary, docs: &[&Vec<String>]) -> CliResult<Vec<usize>> {
    let weighting: Weighting = artifact.weighting.parse().map_err(|e: String| invalid(e))?;
    let docs: Vec<Vec<&str>> = docs.iter().map(|d| d.iter().map(String::as_str).collect()).collect();
    Ok(artifact.model.predict_all(&vectorize(&docs, vocab, weighting)))
}

fn confusion_csv(m: &ConfusionMatrix, names: &[String]) -> String {
    let mut header = vec!["true\\pred".to_string()];
    header.extend(names.iter().cloned());
    let mut rows = vec![header];
    for (name, r) in names.iter().zip(&m.counts) {
        let mut row = vec![name.clone()];
        row.extend(r.iter().map(u64::to_string));
        rows.push(row);
    }
    csv_string(rows)
}

/// `(message_id, part)` rows written by `train`.
fn read_split(config: &RunConfig) -> CliResult<Vec<(String, String)>> {
    let path = config.run_dir().join("split.csv");
    let text = read_stage(&path, "train")?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.deserialize().collect::<Result<_, _>>().invalid(|| path.display().to_string())
}

fn training_ids(config: &RunConfig) -> CliResult<BTreeSet<String>> {
    Ok(read_split(config)?.into_iter().filter(|p| p.1 == "train").map(|p| p.0).collect())
}

pub fn cmd_eval(config: &RunConfig) -> CliResult<CommandOutput> {
    let ds = Dataset::load(config)?;
    let (artifact, vocab) = load_artifact(config)?;
    let dir = config.run_dir();
    let split_path = dir.join("split.csv");
    let parts = read_split(config)?;
    let test_ids: BTreeSet<&str> = parts.iter().filter(|p| p.1 == "test").map(|p| p.0.as_str()).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&i| test_ids.contains(ds.messages[i].message.message_id.as_str())).collect();
    if test.len() != test_ids.len() {
        return Err(invalid(format!("{} no longer matches the cleaned dataset (rerun `train`)", split_path.display())));
    }

    let docs: Vec<&Vec<String>> = test.iter().map(|&i| &ds.docs[i]).collect();
    let pred = predict(&artifact, &vocab, &docs)?;
    let truth: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
    let m = confusion(&truth, &pred, ds.n_classes).invalid(|| "confusion matrix".into())?;
    let report = class_report(&m).invalid(|| "empty test set".into())?;
    let names = config.class_names();

    let mut rows = vec![vec!["message_id".to_string(), "true".into(), "pred".into()]];
    for ((&i, &t), &p) in test.iter().zip(&truth).zip(&pred) {
        rows.push(vec![ds.messages[i].message.message_id.clone(), names[t].clone(), names[p].clone()]);
    }
    let doc = EvalDocument { run: run_info(config), classes: names.clone(), confusion: m.clone(), report: report.clone() };

    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("report.csv"), &report.to_csv(&names))?);
    out.files.push(write_json(&dir.join("report.json"), &doc)?);
    out.files.push(write(&dir.join("confusion.csv"), &confusion_csv(&m, &names))?);
    out.files.push(write(&dir.join("predictions.csv"), &csv_string(rows))?);
    out.files.push(snapshot(&dir, config)?);
    out.lines.push(format!(
        "macro-F1 {:.4}, accuracy {:.4} on {} test messages",
        report.macro_avg.f1, report.accuracy, report.total
    ));
    out.lines.extend(report.to_csv(&names).lines().map(str::to_string));
    if report.zero_division > 0 {
        out.warnings.push(format!("{} metric(s) had a zero denominator and were set to 0", report.zero_division));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// cv / grid

pub fn cmd_cv(config: &RunConfig) -> CliResult<CommandOutput> {
    let ds = Dataset::load(config)?;
    let folds = kfold(ds.len(), &config.cv_spec()).invalid(|| "cross-validation folds".into())?;
    let mut rows = vec![vec!["fold".to_string(), "n_train".into(), "n_test".into(), "macro_f1".into(), "accuracy".into()]];
    let (mut f1s, mut accs) = (Vec::new(), Vec::new());
    for (f, (train, test)) in folds.iter().enumerate() {
        let (_, m) = fit_and_evaluate(
            &ds.docs,
            &ds.labels,
            ds.n_classes,
            train,
            test,
            config.features.vectorizer,
            &config.features.vocab(),
            &config.model_spec(),
        )
        .map_err(|e| model_failure(e, &format!("fold {f}")))?;
        let r = class_report(&m).invalid(|| format!("fold {f}"))?;
        rows.push(vec![f.to_string(), train.len().to_string(), test.len().to_string(), format!("{:.6}", r.macro_avg.f1), format!("{:.6}", r.accuracy)]);
        f1s.push(r.macro_avg.f1);
        accs.push(r.accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    rows.push(vec!["mean".into(), String::new(), String::new(), format!("{:.6}", mean(&f1s)), format!("{:.6}", mean(&accs))]);

    let dir = config.run_dir();
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("cv.csv"), &csv_string(rows))?);
    out.files.push(snapshot(&dir, config)?);
    out.lines.push(format!("{}-fold macro-F1 {:.4}, accuracy {:.4}", folds.len(), mean(&f1s), mean(&accs)));
    Ok(out)
}

pub fn cmd_grid(config: &RunConfig) -> CliResult<CommandOutput> {
    let ds = Dataset::load(config)?;
    let scoring = match config.grid.scoring {
        GridScoring::Cv => Scoring::CrossValidation(config.cv_spec()),
        GridScoring::Holdout => Scoring::Holdout(config.split_spec()),
    };
    let result = grid_search(&config.grid_spec(), &ds.docs, &ds.labels, ds.n_classes, &scoring).invalid(|| "grid search".into())?;
    let dir = config.grid_dir();
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("grid.csv"), &result.to_csv())?);
    out.files.push(snapshot(&dir, config)?);
    for c in result.cells.iter().filter(|c| c.error.is_some()) {
        out.warnings.push(format!("cell {} ({}) failed: {}", c.index, c.cell.model.describe(), c.error.as_deref().unwrap_or("")));
    }
    match result.best {
        Some(b) => {
            let c = &result.cells[b];
            out.lines.push(format!(
                "best cell {b}: {} {} macro-F1 {:.4}",
                c.cell.vectorizer.as_str(),
                c.cell.model.describe(),
                c.score.unwrap_or(0.0)
            ));
        }
        None => return Err(CliError::Runtime(anyhow!("every grid cell failed"))),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// signal

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSignal {
    pub symbol: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub messages: usize,
    /// Window messages the model was trained on.
    pub in_training: usize,
    pub signal: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDocument {
    pub run: RunInfo,
    pub tau: f64,
    pub signals: Vec<SymbolSignal>,
    pub skipped: Vec<String>,
}

pub fn cmd_signal(config: &RunConfig) -> CliResult<CommandOutput> {
    let ds = Dataset::load(config)?;
    let (artifact, vocab) = load_artifact(config)?;
    let windows = ds.windows(config);
    let positive = config.labels.scheme.positive_index();
    let trained = training_ids(config)?;

    let mut symbols: BTreeSet<String> = windows.keys().cloned().collect();
    symbols.extend(config.data.ohlc.keys().cloned());
    if let Some(f) = &config.data.fetch {
        symbols.extend(f.symbols.iter().cloned());
    }

    let mut out = CommandOutput::default();
    let mut signals = Vec::new();
    let mut skipped = Vec::new();
    for symbol in symbols {
        let Some((start, end, idx)) = windows.get(&symbol).filter(|w| !w.2.is_empty()) else {
            out.warnings.push(format!("{symbol}: no messages in the final window, skipped"));
            skipped.push(symbol);
            continue;
        };
        let docs: Vec<&Vec<String>> = idx.iter().map(|&i| &ds.docs[i]).collect();
        let pred = predict(&artifact, &vocab, &docs)?;
        let truth: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let m = confusion(&truth, &pred, ds.n_classes).invalid(|| format!("{symbol} window"))?;
        let report = class_report(&m).invalid(|| format!("{symbol} window"))?;
        let window = format!("{start}..{end}");
        let signal = investment_signal(&report, positive, config.signal.tau, &window).invalid(|| symbol.clone())?;
        let in_training = idx.iter().filter(|&&i| trained.contains(ds.messages[i].message.message_id.as_str())).count();
        out.lines.push(format!("{symbol} {window} precision {:.3}: {}", signal.precision, signal.message));
        if in_training > 0 {
            out.warnings.push(format!("{symbol}: {in_training} of {} window messages were used for training", idx.len()));
        }
        signals.push(SymbolSignal { symbol, start: *start, end: *end, messages: idx.len(), in_training, signal });
    }

    let doc = SignalDocument { run: run_info(config), tau: config.signal.tau, signals, skipped };
    let dir = config.run_dir();
    out.files.push(write_json(&dir.join("signal.json"), &doc)?);
    let mut text = out.lines.join("\n");
    text.push('\n');
    out.files.push(write(&dir.join("signal.txt"), &text)?);
    out.files.push(snapshot(&dir, config)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(config: &RunConfig) -> CliResult<CommandOutput> {
    let run_dirs: Vec<PathBuf> = if config.report.runs.is_empty() {
        subdirs(&config.out_dir.join("runs"))
    } else {
        config.report.runs.clone()
    };
    let mut runs = Vec::new();
    for d in &run_dirs {
        let p = d.join("report.json");
        if let Ok(text) = fs::read_to_string(&p) {
            let doc: EvalDocument = serde_json::from_str(&text).invalid(|| p.display().to_string())?;
            runs.push(doc);
        }
    }
    if runs.is_empty() {
        return Err(invalid(format!("no eval runs found under {}", config.out_dir.join("runs").display())));
    }
    runs.sort_by(|a, b| {
        let key = |d: &EvalDocument| {
            (d.run.scheme, d.run.window.clone(), d.run.alignment.as_str(), d.run.vectorizer.as_str(), d.run.model.as_str())
        };
        key(a).cmp(&key(b))
    });

    let mut rows = vec![["scheme", "alignment", "window", "vectorizer", "model", "macro_f1", "accuracy", "support"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    let mut lines = Vec::new();
    for d in &runs {
        rows.push(vec![
            d.run.scheme.as_str().into(),
            d.run.alignment.as_str().into(),
            d.run.window.clone(),
            d.run.vectorizer.as_str().into(),
            d.run.model.as_str().into(),
            format!("{:.4}", d.report.macro_avg.f1),
            format!("{:.4}", d.report.accuracy),
            d.report.total.to_string(),
        ]);
        lines.push(format!(
            "{:<6} {:<9} {:<8} {:<6} {:<3} F1-macro {:.2}  accuracy {:.0}%",
            d.run.scheme.as_str(),
            d.run.alignment.as_str(),
            d.run.window,
            d.run.vectorizer.as_str(),
            d.run.model.as_str(),
            d.report.macro_avg.f1,
            d.report.accuracy * 100.0
        ));
    }

    let dir = config.out_dir.join("report");
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("comparison.csv"), &csv_string(rows))?);
    for d in subdirs(&config.out_dir.join("data")) {
        let p = d.join("label_summary.json");
        let Ok(text) = fs::read_to_string(&p) else { continue };
        let summary: LabelSummary = serde_json::from_str(&text).invalid(|| p.display().to_string())?;
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.files.push(write(&dir.join(format!("class_balance_{name}.csv")), &summary.to_csv())?);
        lines.push(format!("{name}: {}", summary.proportions_line()));
    }
    out.files.push(snapshot(&dir, config)?);
    out.lines = lines;
    Ok(out)
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    v.sort();
    v
}
