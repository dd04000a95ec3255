//! Splits, cross-validation, grid search, classification metrics and the
//! precision-thresholded invest/avoid signal.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{build_vocab, vectorize, VocabConfig, Vocabulary, Weighting};
use crate::labelling::LabelledMessage;
use crate::models::{train_lr, train_nb, LrConfig, Model, ModelError, NbVariant};

pub const DEFAULT_TAU: f64 = 0.75;
pub const SIGNAL_WINDOW_DAYS: i64 = 14;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("train percent must be in 1..=99, got {0}")]
    BadRatio(u32),
    #[error("cannot make {k} folds from {n} samples")]
    TooFewForFolds { n: usize, k: usize },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("length mismatch: {truth} true labels, {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} outside 0..{k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("report over an empty confusion matrix")]
    EmptyMatrix,
    #[error("report has no class {0} to use as the positive class")]
    NoPositiveClass(usize),
    #[error("grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Derives an independent per-stage seed from the global seed, so adding a
/// stage (or a grid cell) never perturbs another stage's randomness.
pub fn derive_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Percentage of samples in the training part.
    pub train_percent: u32,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_percent: 90, seed: 0, stratified: false }
    }
}

impl SplitSpec {
    /// `ceil(n * train_percent / 100)`, kept within `1..n` so neither side
    /// is empty.
    pub fn train_size(&self, n: usize) -> usize {
        let p = self.train_percent as usize;
        ((n * p).div_ceil(100)).clamp(1, n.saturating_sub(1).max(1))
    }

    fn check(&self, n: usize) -> Result<()> {
        if !(1..=99).contains(&self.train_percent) {
            return Err(EvalError::BadRatio(self.train_percent));
        }
        if n < 2 {
            return Err(EvalError::TooFewSamples(n));
        }
        Ok(())
    }
}

/// Seeded uniform shuffle; the first `train_size(n)` shuffled indices train.
pub fn train_test_split(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.check(n)?;
    let idx = shuffled(n, spec.seed);
    let cut = spec.train_size(n);
    Ok((idx[..cut].to_vec(), idx[cut..].to_vec()))
}

/// Per-class version of [`train_test_split`]: each class is shuffled and cut
/// at its own `ceil` share.
pub fn stratified_split(labels: &[usize], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.check(labels.len())?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let cut = (members.len() * spec.train_percent as usize).div_ceil(100).min(members.len());
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    Ok((train, test))
}

pub fn split(labels: &[usize], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.stratified {
        stratified_split(labels, spec)
    } else {
        train_test_split(labels.len(), spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSpec {
    pub k: usize,
    pub seed: u64,
}

impl Default for CvSpec {
    fn default() -> Self {
        CvSpec { k: 5, seed: 0 }
    }
}

/// Seeded shuffle cut into `k` contiguous test folds; the first `n % k`
/// folds get one extra sample. Index lists are returned sorted.
pub fn kfold(n: usize, spec: &CvSpec) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if spec.k < 2 {
        return Err(EvalError::BadFoldCount(spec.k));
    }
    if n < spec.k {
        return Err(EvalError::TooFewForFolds { n, k: spec.k });
    }
    let idx = shuffled(n, spec.seed);
    let (base, extra) = (n / spec.k, n % spec.k);
    let mut folds = Vec::with_capacity(spec.k);
    let mut start = 0;
    for f in 0..spec.k {
        let size = base + usize::from(f < extra);
        let mut test = idx[start..start + size].to_vec();
        let mut train: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Metrics

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch { truth: y_true.len(), pred: y_pred.len() });
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= k {
                return Err(EvalError::LabelOutOfRange { label, k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
    /// Metrics that hit a 0/0 and were set to 0.
    pub zero_division: usize,
}

fn ratio(num: u64, den: u64, zero_division: &mut usize) -> f64 {
    if den == 0 {
        *zero_division += 1;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 plus accuracy, macro and support-weighted
/// averages. Undefined ratios are reported as 0 and counted.
pub fn class_report(m: &ConfusionMatrix) -> Result<ClassReport> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut zero_division = 0;
    let classes: Vec<ClassMetrics> = (0..m.k())
        .map(|c| {
            let tp = m.counts[c][c];
            let precision = ratio(tp, m.predicted(c), &mut zero_division);
            let recall = ratio(tp, m.support(c), &mut zero_division);
            let f1 = if precision + recall == 0.0 {
                zero_division += 1;
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1, support: m.support(c) }
        })
        .collect();
    let k = classes.len() as f64;
    let macro_avg = Averages {
        precision: classes.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: classes.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: classes.iter().map(|c| c.f1).sum::<f64>() / k,
    };
    let t = total as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / t;
    let weighted_avg = Averages {
        precision: weighted(|c| c.precision),
        recall: weighted(|c| c.recall),
        f1: weighted(|c| c.f1),
    };
    Ok(ClassReport { accuracy: m.trace() as f64 / t, classes, macro_avg, weighted_avg, total, zero_division })
}

impl ClassReport {
    /// Table-shaped CSV: one row per class, then accuracy, macro avg and
    /// weighted avg. `names` labels the class rows.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("label,precision,recall,f1-score,support\n");
        for (c, m) in self.classes.iter().enumerate() {
            let name = names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(out, "accuracy,,,{:.6},{}", self.accuracy, self.total);
        for (name, a) in [("macro avg", self.macro_avg), ("weighted avg", self.weighted_avg)] {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", a.precision, a.recall, a.f1, self.total);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Signal

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Invest,
    Avoid,
}

impl Decision {
    pub fn message(self) -> &'static str {
        match self {
            Decision::Invest => "Invest!",
            Decision::Avoid => "Avoid investing!",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub decision: Decision,
    pub precision: f64,
    pub threshold: f64,
    pub window: String,
    pub message: String,
}

/// Invest iff the positive class's precision is at least `tau`.
pub fn investment_signal(report: &ClassReport, positive_class: usize, tau: f64, window: &str) -> Result<Signal> {
    let precision = report.classes.get(positive_class).ok_or(EvalError::NoPositiveClass(positive_class))?.precision;
    let decision = if precision >= tau { Decision::Invest } else { Decision::Avoid };
    Ok(Signal { decision, precision, threshold: tau, window: window.to_string(), message: decision.message().to_string() })
}

/// Indices of messages in the final `days` calendar days (inclusive) of each
/// symbol's own date range, keyed by symbol.
pub fn final_window(
    messages: &[LabelledMessage],
    days: i64,
    tz_offset_hours: i32,
) -> BTreeMap<String, (NaiveDate, NaiveDate, Vec<usize>)> {
    let mut last: BTreeMap<&str, NaiveDate> = BTreeMap::new();
    let dates: Vec<Option<NaiveDate>> = messages.iter().map(|m| m.date(tz_offset_hours)).collect();
    for (m, d) in messages.iter().zip(&dates) {
        if let Some(d) = d {
            let e = last.entry(m.message.symbol.as_str()).or_insert(*d);
            *e = (*e).max(*d);
        }
    }
    let mut out: BTreeMap<String, (NaiveDate, NaiveDate, Vec<usize>)> = BTreeMap::new();
    for (sym, end) in last {
        let start = end - Duration::days(days - 1);
        let idx = messages
            .iter()
            .zip(&dates)
            .enumerate()
            .filter(|(_, (m, d))| m.message.symbol == sym && d.is_some_and(|d| d >= start && d <= end))
            .map(|(i, _)| i)
            .collect();
        out.insert(sym.to_string(), (start, end, idx));
    }
    out
}

// ---------------------------------------------------------------------------
// Fitting and grid search

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Nb { alpha: f64, variant: NbVariant },
    Lr(LrConfig),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Nb { .. } => "nb",
            ModelSpec::Lr(_) => "lr",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelSpec::Nb { alpha, variant } => format!("nb(alpha={alpha},variant={variant:?})"),
            ModelSpec::Lr(c) => format!("lr(lambda={},step={},max_iter={},tol={})", c.lambda, c.step_size, c.max_iter, c.tol),
        }
    }
}

/// A fitted vectorizer + model pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub vocab: Vocabulary,
    pub weighting: Weighting,
    pub model: Model,
}

impl Fitted {
    pub fn predict<S: AsRef<str>>(&self, docs: &[Vec<S>]) -> Vec<usize> {
        self.model.predict_all(&vectorize(docs, &self.vocab, self.weighting))
    }
}

/// Builds the vocabulary on `train` only, vectorizes and trains.
pub fn fit<S: AsRef<str>>(
    docs: &[Vec<S>],
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    weighting: Weighting,
    vocab_config: &VocabConfig,
    spec: &ModelSpec,
) -> Result<Fitted> {
    let train_docs: Vec<Vec<&str>> = train.iter().map(|&i| docs[i].iter().map(AsRef::as_ref).collect()).collect();
    let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let vocab = build_vocab(&train_docs, vocab_config)?;
    let x = vectorize(&train_docs, &vocab, weighting);
    let model = match *spec {
        ModelSpec::Nb { alpha, variant } => Model::Nb(train_nb(&x, &train_y, n_classes, alpha, variant)?),
        ModelSpec::Lr(cfg) => Model::Lr(train_lr(&x, &train_y, n_classes, &cfg)?),
    };
    Ok(Fitted { vocab, weighting, model })
}

/// Fits on `train` and returns the confusion matrix on `test`.
pub fn fit_and_evaluate<S: AsRef<str>>(
    docs: &[Vec<S>],
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    weighting: Weighting,
    vocab_config: &VocabConfig,
    spec: &ModelSpec,
) -> Result<(Fitted, ConfusionMatrix)> {
    let fitted = fit(docs, labels, n_classes, train, weighting, vocab_config, spec)?;
    let test_docs: Vec<Vec<&str>> = test.iter().map(|&i| docs[i].iter().map(AsRef::as_ref).collect()).collect();
    let pred = fitted.predict(&test_docs);
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let m = confusion(&truth, &pred, n_classes)?;
    Ok((fitted, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub vectorizers: Vec<Weighting>,
    pub vocab_options: Vec<VocabConfig>,
    pub models: Vec<ModelSpec>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            vectorizers: vec![Weighting::Count, Weighting::TfIdf],
            vocab_options: vec![VocabConfig::default()],
            models: vec![
                ModelSpec::Nb { alpha: 1.0, variant: NbVariant::Multinomial },
                ModelSpec::Lr(LrConfig::default()),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub vectorizer: Weighting,
    pub vocab: VocabConfig,
    pub model: ModelSpec,
}

impl GridSpec {
    /// Cartesian product, vectorizer outermost, then vocabulary options,
    /// then models.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &vectorizer in &self.vectorizers {
            for &vocab in &self.vocab_options {
                for &model in &self.models {
                    out.push(GridCell { vectorizer, vocab, model });
                }
            }
        }
        out
    }

    /// Expands hyperparameter lists into model specs (NB alphas x variants,
    /// then LR lambdas x step sizes).
    pub fn model_grid(nb: &[(f64, NbVariant)], lr_lambdas: &[f64], lr_steps: &[f64], lr_base: LrConfig) -> Vec<ModelSpec> {
        let mut out: Vec<ModelSpec> = nb.iter().map(|&(alpha, variant)| ModelSpec::Nb { alpha, variant }).collect();
        for &lambda in lr_lambdas {
            for &step_size in lr_steps {
                out.push(ModelSpec::Lr(LrConfig { lambda, step_size, ..lr_base }));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scoring {
    Holdout(SplitSpec),
    CrossValidation(CvSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub cell: GridCell,
    /// Mean macro-F1; `None` when the cell failed.
    pub score: Option<f64>,
    pub fold_scores: Vec<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// In enumeration order.
    pub cells: Vec<CellResult>,
    /// Cell indices, best first; failed cells last.
    pub ranking: Vec<usize>,
    pub best: Option<usize>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,cell,vectorizer,min_df,max_features,model,params,macro_f1,accuracy,folds,error\n");
        for (rank, &i) in self.ranking.iter().enumerate() {
            let c = &self.cells[i];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},\"{}\",{},{},{},{}",
                rank + 1,
                i,
                c.cell.vectorizer.as_str(),
                c.cell.vocab.min_df,
                c.cell.vocab.max_features.map(|m| m.to_string()).unwrap_or_default(),
                c.cell.model.name(),
                c.cell.model.describe(),
                c.score.map(|s| format!("{s:.6}")).unwrap_or_default(),
                c.accuracy.map(|s| format!("{s:.6}")).unwrap_or_default(),
                c.fold_scores.len(),
                c.error.as_deref().unwrap_or("").replace(',', ";"),
            );
        }
        out
    }
}

/// Scores every grid cell by mean macro-F1 (over folds, or on one held-out
/// split). Cells run in parallel; results are merged in enumeration order and
/// the best cell is the highest score, earliest cell on ties. A cell whose
/// training fails is recorded with its error instead of aborting the search.
pub fn grid_search<S: AsRef<str> + Sync>(
    grid: &GridSpec,
    docs: &[Vec<S>],
    labels: &[usize],
    n_classes: usize,
    scoring: &Scoring,
) -> Result<GridResult> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = match scoring {
        Scoring::Holdout(spec) => vec![split(labels, spec)?],
        Scoring::CrossValidation(cv) => kfold(labels.len(), cv)?,
    };

    let results: Vec<CellResult> = cells
        .into_par_iter()
        .enumerate()
        .map(|(index, cell)| {
            let mut fold_scores = Vec::new();
            let mut accs = Vec::new();
            for (train, test) in &splits {
                let outcome = fit_and_evaluate(docs, labels, n_classes, train, test, cell.vectorizer, &cell.vocab, &cell.model)
                    .and_then(|(_, m)| class_report(&m));
                match outcome {
                    Ok(r) => {
                        fold_scores.push(r.macro_avg.f1);
                        accs.push(r.accuracy);
                    }
                    Err(e) => {
                        return CellResult { index, cell, score: None, fold_scores, accuracy: None, error: Some(e.to_string()) };
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            CellResult { index, cell, score: Some(mean(&fold_scores)), accuracy: Some(mean(&accs)), fold_scores, error: None }
        })
        .collect();

    let mut ranking: Vec<usize> = (0..results.len()).collect();
    ranking.sort_by(|&a, &b| match (results[a].score, results[b].score) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let best = ranking.first().copied().filter(|&i| results[i].score.is_some());
    Ok(GridResult { cells: results, ranking, best })
}
