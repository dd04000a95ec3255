//! Bag-of-words features: vocabulary, count and TF-IDF document vectors.
//!
//! TF-IDF uses the smoothed inverse document frequency
//! `idf(t) = ln((1 + N) / (1 + df(t))) + 1` and scales every row to unit
//! Euclidean norm. `N` and `df` always come from the fitting corpus, so test
//! documents are transformed with training statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_features = 0 leaves no vocabulary")]
    ZeroMaxFeatures,
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabLine { line: usize, reason: String },
    #[error("matrix file line {line}: {reason}")]
    BadMatrixLine { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Count,
    TfIdf,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Count => "count",
            Weighting::TfIdf => "tfidf",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "count" => Ok(Weighting::Count),
            "tfidf" => Ok(Weighting::TfIdf),
            other => Err(format!("unknown vectorizer `{other}` (expected count or tfidf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_df: usize,
    pub max_features: Option<usize>,
    /// When set, `max_features = 0` yields an empty vocabulary instead of an error.
    pub allow_empty: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_df: 1, max_features: None, allow_empty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    /// Document frequency by column.
    df: Vec<usize>,
    n_docs: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.df.len()
    }

    pub fn is_empty(&self) -> bool {
        self.df.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn df(&self, column: usize) -> usize {
        self.df[column]
    }

    /// Tokens in column order (which is lexicographic).
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn idf(&self, column: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df[column] as f64)).ln() + 1.0
    }

    /// `token,index,df,N` sidecar text.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "index", "df", "N"]).expect("in-memory csv write");
        for (token, &i) in &self.index {
            w.write_record([token.as_str(), &i.to_string(), &self.df[i].to_string(), &self.n_docs.to_string()])
                .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Vocabulary> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut index = BTreeMap::new();
        let mut df = Vec::new();
        let mut n_docs = None;
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let bad = |reason: String| FeatureError::BadVocabLine { line, reason };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", rec.len())));
            }
            let idx: usize = rec[1].parse().map_err(|_| bad(format!("bad index `{}`", &rec[1])))?;
            let d: usize = rec[2].parse().map_err(|_| bad(format!("bad df `{}`", &rec[2])))?;
            let n: usize = rec[3].parse().map_err(|_| bad(format!("bad N `{}`", &rec[3])))?;
            if idx != df.len() {
                return Err(bad(format!("index {idx} out of order")));
            }
            if *n_docs.get_or_insert(n) != n {
                return Err(bad("inconsistent N".into()));
            }
            if index.insert(rec[0].to_string(), idx).is_some() {
                return Err(bad(format!("duplicate token `{}`", &rec[0])));
            }
            df.push(d);
        }
        Ok(Vocabulary { index, df, n_docs: n_docs.unwrap_or(0) })
    }

    /// SHA-256 of the sidecar serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Counts document frequencies over `corpus` and keeps tokens with
/// `df >= min_df`, optionally only the `max_features` most frequent (ties
/// broken lexicographically). Columns are assigned in lexicographic order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], config: &VocabConfig) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    if config.max_features == Some(0) && !config.allow_empty {
        return Err(FeatureError::ZeroMaxFeatures);
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        let mut seen: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = df.into_iter().filter(|&(_, d)| d >= config.min_df).collect();
    if let Some(max) = config.max_features {
        if kept.len() > max {
            kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            kept.truncate(max);
            kept.sort_by(|a, b| a.0.cmp(b.0));
        }
    }
    let index = kept.iter().enumerate().map(|(i, &(t, _))| (t.to_string(), i)).collect();
    let df = kept.iter().map(|&(_, d)| d).collect();
    Ok(Vocabulary { index, df, n_docs: corpus.len() })
}

/// Row-compressed sparse matrix with sorted column indices and no stored
/// zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTermMatrix {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    n_cols: usize,
    pub weighting: Weighting,
}

/// One sparse row: parallel column and value slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseRow<'a> {
    pub indices: &'a [usize],
    pub values: &'a [f64],
}

impl<'a> SparseRow<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

impl DocTermMatrix {
    pub fn empty(n_cols: usize, weighting: Weighting) -> Self {
        DocTermMatrix { indptr: vec![0], indices: Vec::new(), values: Vec::new(), n_cols, weighting }
    }

    /// Appends a row from (column, value) pairs; zeros are skipped and
    /// duplicate columns summed.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        let mut row: Vec<(usize, f64)> = entries.into_iter().collect();
        row.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (c, v) in row {
            assert!(c < self.n_cols, "column {c} out of range {}", self.n_cols);
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        for (c, v) in merged {
            if v != 0.0 {
                self.indices.push(c);
                self.values.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        SparseRow { indices: &self.indices[a..b], values: &self.values[a..b] }
    }

    pub fn rows(&self) -> impl Iterator<Item = SparseRow<'_>> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DocTermMatrix {
        let mut out = DocTermMatrix::empty(self.n_cols, self.weighting);
        for &r in rows {
            out.push_row(self.row(r).iter());
        }
        out
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_cols];
        for (c, x) in self.row(i).iter() {
            v[c] = x;
        }
        v
    }

    /// `row,col,value` triplets preceded by a `# rows,cols,weighting` line.
    /// Values use the shortest round-tripping decimal form.
    pub fn to_triplets(&self) -> String {
        let mut out = format!("# {},{},{}\n", self.n_rows(), self.n_cols, self.weighting.as_str());
        for r in 0..self.n_rows() {
            for (c, v) in self.row(r).iter() {
                let _ = writeln!(out, "{r},{c},{v:?}");
            }
        }
        out
    }

    pub fn from_triplets(text: &str) -> Result<DocTermMatrix> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: String| FeatureError::BadMatrixLine { line: line + 1, reason };
        let (_, head) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
        let head = head.strip_prefix("# ").ok_or_else(|| bad(0, "missing `# ` header".into()))?;
        let parts: Vec<&str> = head.split(',').collect();
        if parts.len() != 3 {
            return Err(bad(0, "header must be rows,cols,weighting".into()));
        }
        let n_rows: usize = parts[0].parse().map_err(|_| bad(0, "bad row count".into()))?;
        let n_cols: usize = parts[1].parse().map_err(|_| bad(0, "bad column count".into()))?;
        let weighting: Weighting = parts[2].parse().map_err(|e| bad(0, e))?;

        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i, "expected row,col,value".into()));
            }
            let r: usize = f[0].parse().map_err(|_| bad(i, "bad row".into()))?;
            let c: usize = f[1].parse().map_err(|_| bad(i, "bad col".into()))?;
            let v: f64 = f[2].parse().map_err(|_| bad(i, "bad value".into()))?;
            if r >= n_rows || c >= n_cols {
                return Err(bad(i, format!("entry ({r},{c}) outside {n_rows}x{n_cols}")));
            }
            rows[r].push((c, v));
        }
        let mut m = DocTermMatrix::empty(n_cols, weighting);
        for row in rows {
            m.push_row(row);
        }
        Ok(m)
    }
}

fn term_counts<S: AsRef<str>>(doc: &[S], vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for t in doc {
        if let Some(c) = vocab.index_of(t.as_ref()) {
            *counts.entry(c).or_insert(0.0) += 1.0;
        }
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by_key(|e| e.0);
    v
}

/// Raw term counts; out-of-vocabulary tokens are ignored.
pub fn count_vectorize<S: AsRef<str>>(docs: &[Vec<S>], vocab: &Vocabulary) -> DocTermMatrix {
    let mut m = DocTermMatrix::empty(vocab.len(), Weighting::Count);
    for doc in docs {
        m.push_row(term_counts(doc, vocab));
    }
    m
}

/// Term count times smoothed idf, then L2-normalized per row.
pub fn tfidf_vectorize<S: AsRef<str>>(docs: &[Vec<S>], vocab: &Vocabulary) -> DocTermMatrix {
    let mut m = DocTermMatrix::empty(vocab.len(), Weighting::TfIdf);
    for doc in docs {
        let mut row = term_counts(doc, vocab);
        for e in &mut row {
            e.1 *= vocab.idf(e.0);
        }
        let norm = row.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut row {
                e.1 /= norm;
            }
        }
        m.push_row(row);
    }
    m
}

pub fn vectorize<S: AsRef<str>>(docs: &[Vec<S>], vocab: &Vocabulary, weighting: Weighting) -> DocTermMatrix {
    match weighting {
        Weighting::Count => count_vectorize(docs, vocab),
        Weighting::TfIdf => tfidf_vectorize(docs, vocab),
    }
}
