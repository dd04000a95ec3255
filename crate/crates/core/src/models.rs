//! Naive Bayes and logistic regression over sparse document vectors.
//!
//! Labels are class indices `0..K` (see [`crate::labelling::SchemeKind::classes`]).
//! Both trainers visit the training rows in a canonical order (sorted by
//! label, then row content), so permuting the training set leaves every
//! parameter bit-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DocTermMatrix, SparseRow};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no training rows")]
    MissingClass(usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("smoothing alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("regularization strength must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("no training rows")]
    EmptyData,
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("loss increased at iteration {iteration} ({before} -> {after}) within the stable step range")]
    NonMonotone { iteration: usize, before: f64, after: f64 },
    #[error("model artifact: {0}")]
    Artifact(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn check_labels(x: &DocTermMatrix, y: &[usize], n_classes: usize) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(ModelError::ShapeMismatch(format!("{} rows but {} labels", x.n_rows(), y.len())));
    }
    if y.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let mut seen = vec![false; n_classes];
    for &label in y {
        if label >= n_classes {
            return Err(ModelError::LabelOutOfRange { label, n_classes });
        }
        seen[label] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(ModelError::MissingClass(c)),
        None => Ok(()),
    }
}

/// Row order used for every floating-point reduction over training data.
fn canonical_order(x: &DocTermMatrix, y: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (x.row(a), x.row(b));
        y[a].cmp(&y[b]).then_with(|| ra.indices.cmp(rb.indices)).then_with(|| {
            let va = ra.values.iter().map(|v| v.to_bits());
            let vb = rb.values.iter().map(|v| v.to_bits());
            va.cmp(vb)
        })
    });
    order
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Naive Bayes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NbVariant {
    #[default]
    Multinomial,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    pub variant: NbVariant,
    pub alpha: f64,
    pub n_classes: usize,
    pub n_features: usize,
    pub log_prior: Vec<f64>,
    /// `log_lik[c][t]`: ln P(t | c) for multinomial, ln P(t present | c) for Bernoulli.
    pub log_lik: Vec<Vec<f64>>,
    /// Bernoulli only: ln P(t absent | c).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log_absent: Vec<Vec<f64>>,
}

/// Fits naive Bayes with additive smoothing `alpha`.
///
/// Multinomial: `ln((count(c,t) + alpha) / (total(c) + alpha * V))`, where
/// counts are summed feature values (TF-IDF weights act as fractional counts).
/// Bernoulli: `(docs(c,t) + alpha) / (docs(c) + 2 * alpha)` for presence.
pub fn train_nb(
    x: &DocTermMatrix,
    y: &[usize],
    n_classes: usize,
    alpha: f64,
    variant: NbVariant,
) -> Result<NaiveBayesModel> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ModelError::BadAlpha(alpha));
    }
    check_labels(x, y, n_classes)?;
    let v = x.n_cols();
    let mut class_docs = vec![0usize; n_classes];
    let mut counts = vec![vec![0.0f64; v]; n_classes];
    for i in canonical_order(x, y) {
        let c = y[i];
        class_docs[c] += 1;
        for (t, w) in x.row(i).iter() {
            counts[c][t] += match variant {
                NbVariant::Multinomial => w,
                NbVariant::Bernoulli => 1.0,
            };
        }
    }
    let n = y.len() as f64;
    let log_prior = class_docs.iter().map(|&d| (d as f64 / n).ln()).collect();
    let (log_lik, log_absent) = match variant {
        NbVariant::Multinomial => {
            let lik = counts
                .iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    let denom = (total + alpha * v as f64).ln();
                    row.iter().map(|&cnt| (cnt + alpha).ln() - denom).collect()
                })
                .collect();
            (lik, Vec::new())
        }
        NbVariant::Bernoulli => {
            let mut present = Vec::with_capacity(n_classes);
            let mut absent = Vec::with_capacity(n_classes);
            for (row, &docs) in counts.iter().zip(&class_docs) {
                let denom = docs as f64 + 2.0 * alpha;
                present.push(row.iter().map(|&d| ((d + alpha) / denom).ln()).collect());
                absent.push(row.iter().map(|&d| ((docs as f64 - d + alpha) / denom).ln()).collect());
            }
            (present, absent)
        }
    };
    Ok(NaiveBayesModel { variant, alpha, n_classes, n_features: v, log_prior, log_lik, log_absent })
}

impl NaiveBayesModel {
    /// Unnormalized joint log-probability per class.
    pub fn joint_log_likelihood(&self, x: SparseRow<'_>) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let mut s = self.log_prior[c];
                match self.variant {
                    NbVariant::Multinomial => {
                        for (t, w) in x.iter() {
                            s += w * self.log_lik[c][t];
                        }
                    }
                    NbVariant::Bernoulli => {
                        s += self.log_absent[c].iter().sum::<f64>();
                        for (t, _) in x.iter() {
                            s += self.log_lik[c][t] - self.log_absent[c][t];
                        }
                    }
                }
                s
            })
            .collect()
    }
}

/// Predicted class and normalized per-class log-posterior.
pub fn predict_nb(model: &NaiveBayesModel, x: SparseRow<'_>) -> (usize, Vec<f64>) {
    let joint = model.joint_log_likelihood(x);
    let label = argmax(&joint);
    let z = log_sum_exp(&joint);
    (label, joint.iter().map(|j| j - z).collect())
}

// ---------------------------------------------------------------------------
// Logistic regression

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrConfig {
    /// L2 strength; the penalty is `lambda / (2n) * ||W||^2` over non-bias weights.
    pub lambda: f64,
    pub step_size: f64,
    pub max_iter: usize,
    /// Stop once the absolute loss change drops below this.
    pub tol: f64,
    /// Recorded for provenance; initialization is all zeros.
    pub seed: u64,
    /// Cap the step at the stability bound so the loss never increases.
    pub clamp_step: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig { lambda: 1.0, step_size: 0.1, max_iter: 1000, tol: 1e-6, seed: 0, clamp_step: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub effective_step: f64,
    /// `1 / L` for the smoothness constant `L` of the training loss; any step
    /// at or below it gives a non-increasing loss.
    pub stability_bound: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub n_classes: usize,
    pub n_features: usize,
    /// Row-major `K x (V + 1)`; the last column of each row is the bias.
    pub weights: Vec<f64>,
    pub config: LrConfig,
    pub stats: TrainStats,
}

impl LogisticModel {
    /// Untrained model with all-zero weights.
    pub fn zeros(n_classes: usize, n_features: usize, config: LrConfig) -> Self {
        LogisticModel {
            n_classes,
            n_features,
            weights: vec![0.0; n_classes * (n_features + 1)],
            config,
            stats: TrainStats {
                iterations: 0,
                final_loss: 0.0,
                converged: false,
                effective_step: config.step_size,
                stability_bound: 0.0,
                loss_history: Vec::new(),
            },
        }
    }

    pub fn stride(&self) -> usize {
        self.n_features + 1
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.stride() + feature]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.weights[class * self.stride() + self.n_features]
    }

    pub fn scores(&self, x: SparseRow<'_>) -> Vec<f64> {
        scores(&self.weights, self.n_classes, self.n_features, x)
    }
}

fn scores(w: &[f64], k: usize, v: usize, x: SparseRow<'_>) -> Vec<f64> {
    let stride = v + 1;
    (0..k)
        .map(|c| {
            let row = &w[c * stride..(c + 1) * stride];
            let mut s = row[v];
            for (t, xv) in x.iter() {
                s += row[t] * xv;
            }
            s
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|s| (s - lse).exp()).collect()
}

struct Problem<'a> {
    x: &'a DocTermMatrix,
    y: &'a [usize],
    order: Vec<usize>,
    k: usize,
    lambda: f64,
}

impl Problem<'_> {
    fn v(&self) -> usize {
        self.x.n_cols()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        self.eval(w, false).0
    }

    /// Mean cross-entropy plus `lambda / (2n) * ||W_nonbias||^2`, and its gradient.
    fn eval(&self, w: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let (k, v) = (self.k, self.v());
        let stride = v + 1;
        let n = self.y.len() as f64;
        let mut grad = if with_grad { vec![0.0; w.len()] } else { Vec::new() };
        let mut ce = 0.0;
        for &i in &self.order {
            let row = self.x.row(i);
            let z = scores(w, k, v, row);
            let lse = log_sum_exp(&z);
            ce += lse - z[self.y[i]];
            if with_grad {
                for c in 0..k {
                    let residual = (z[c] - lse).exp() - if c == self.y[i] { 1.0 } else { 0.0 };
                    let g = &mut grad[c * stride..(c + 1) * stride];
                    for (t, xv) in row.iter() {
                        g[t] += residual * xv;
                    }
                    g[v] += residual;
                }
            }
        }
        let mut penalty = 0.0;
        for c in 0..k {
            for t in 0..v {
                penalty += w[c * stride + t] * w[c * stride + t];
            }
        }
        let loss = ce / n + self.lambda / (2.0 * n) * penalty;
        if with_grad {
            for c in 0..k {
                for t in 0..stride {
                    let idx = c * stride + t;
                    grad[idx] /= n;
                    if t < v {
                        grad[idx] += self.lambda / n * w[idx];
                    }
                }
            }
        }
        (loss, grad)
    }

    /// `1 / L` with `L = 0.5 * mean ||[x, 1]||^2 + lambda / n`.
    fn stability_bound(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean_sq = self.order.iter().map(|&i| self.x.row(i).norm().powi(2) + 1.0).sum::<f64>() / n;
        1.0 / (0.5 * mean_sq + self.lambda / n)
    }
}

/// Regularized mean cross-entropy of `model` on `(x, y)` and its exact gradient
/// (same layout as `model.weights`).
pub fn loss_and_gradient(model: &LogisticModel, x: &DocTermMatrix, y: &[usize]) -> Result<(f64, Vec<f64>)> {
    if x.n_cols() != model.n_features {
        return Err(ModelError::ShapeMismatch(format!(
            "matrix has {} columns, model expects {}",
            x.n_cols(),
            model.n_features
        )));
    }
    if x.n_rows() != y.len() {
        return Err(ModelError::ShapeMismatch(format!("{} rows but {} labels", x.n_rows(), y.len())));
    }
    if y.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if let Some(&label) = y.iter().find(|&&l| l >= model.n_classes) {
        return Err(ModelError::LabelOutOfRange { label, n_classes: model.n_classes });
    }
    let p = Problem { x, y, order: canonical_order(x, y), k: model.n_classes, lambda: model.config.lambda };
    Ok(p.eval(&model.weights, true))
}

/// Full-batch gradient descent from zero weights on softmax cross-entropy.
pub fn train_lr(x: &DocTermMatrix, y: &[usize], n_classes: usize, config: &LrConfig) -> Result<LogisticModel> {
    if !(config.step_size > 0.0) {
        return Err(ModelError::BadStep(config.step_size));
    }
    if !(config.lambda >= 0.0) {
        return Err(ModelError::BadLambda(config.lambda));
    }
    check_labels(x, y, n_classes)?;
    let problem = Problem { x, y, order: canonical_order(x, y), k: n_classes, lambda: config.lambda };
    let bound = problem.stability_bound();
    let step = if config.clamp_step { config.step_size.min(bound) } else { config.step_size };
    let guaranteed = step <= bound;

    let mut model = LogisticModel::zeros(n_classes, x.n_cols(), *config);
    let mut loss = problem.loss(&model.weights);
    let mut history = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let (_, grad) = problem.eval(&model.weights, true);
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= step * g;
        }
        iterations += 1;
        let next = problem.loss(&model.weights);
        if !next.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Diverged { iteration: iterations, loss: next });
        }
        if guaranteed && next > loss + 1e-12 * loss.abs().max(1.0) {
            return Err(ModelError::NonMonotone { iteration: iterations, before: loss, after: next });
        }
        history.push(next);
        let delta = (loss - next).abs();
        loss = next;
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    model.stats = TrainStats {
        iterations,
        final_loss: loss,
        converged,
        effective_step: step,
        stability_bound: bound,
        loss_history: history,
    };
    Ok(model)
}

/// Predicted class and softmax probabilities.
pub fn predict_lr(model: &LogisticModel, x: SparseRow<'_>) -> (usize, Vec<f64>) {
    let probs = softmax(&model.scores(x));
    (argmax(&probs), probs)
}

// ---------------------------------------------------------------------------
// Common interface and artifact

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Nb(NaiveBayesModel),
    Lr(LogisticModel),
}

impl Model {
    pub fn n_classes(&self) -> usize {
        match self {
            Model::Nb(m) => m.n_classes,
            Model::Lr(m) => m.n_classes,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Nb(m) => m.n_features,
            Model::Lr(m) => m.n_features,
        }
    }

    /// Predicted class and per-class probabilities.
    pub fn predict(&self, x: SparseRow<'_>) -> (usize, Vec<f64>) {
        match self {
            Model::Nb(m) => {
                let (label, logp) = predict_nb(m, x);
                (label, logp.iter().map(|l| l.exp()).collect())
            }
            Model::Lr(m) => predict_lr(m, x),
        }
    }

    pub fn predict_all(&self, x: &DocTermMatrix) -> Vec<usize> {
        x.rows().map(|r| self.predict(r).0).collect()
    }
}

pub const ARTIFACT_FORMAT: &str = "stocksignal-model";
pub const ARTIFACT_VERSION: u32 = 1;

/// Self-describing model document. Serialized as JSON with round-trip exact
/// floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub scheme: String,
    pub weighting: String,
    /// SHA-256 of the vocabulary sidecar the model was trained against.
    pub vocab_hash: String,
    pub model: Model,
}

impl ModelArtifact {
    pub fn new(model: Model, scheme: &str, weighting: &str, vocab_hash: String) -> Self {
        ModelArtifact {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            scheme: scheme.into(),
            weighting: weighting.into(),
            vocab_hash,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_str(text).map_err(|e| ModelError::Artifact(e.to_string()))?;
        if a.format != ARTIFACT_FORMAT || a.version != ARTIFACT_VERSION {
            return Err(ModelError::Artifact(format!("unsupported format {} v{}", a.format, a.version)));
        }
        Ok(a)
    }
}
