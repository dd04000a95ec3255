//! Message normalization.
//!
//! [`preprocess`] runs a fixed sequence of stages over the raw text:
//!
//! 1. retweet drop (`RT @` prefix)
//! 2. URL removal
//! 3. mention removal
//! 4. demojization (emoji -> lowercase name token, e.g. `rocket`)
//! 5. cashtag normalization (`$TSLA` -> `TSLA`)
//! 6. hashtag segmentation
//! 7. contraction expansion
//! 8. squeezing runs of a repeated letter
//! 9. punctuation to whitespace
//! 10. case folding
//! 11. whitespace tokenization
//! 12. stopword removal
//!
//! Every stage except the retweet drop can be switched off through
//! [`PipelineConfig`]. The stopword list, contraction table and hashtag
//! dictionary are embedded text resources under `resources/`.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STOPWORDS_EN: &str = include_str!("../resources/stopwords_en.txt");
pub const CONTRACTIONS_EN: &str = include_str!("../resources/contractions_en.txt");
pub const HASHTAG_DICT_EN: &str = include_str!("../resources/hashtag_dict_en.txt");
/// Bumped whenever an embedded table changes.
pub const RESOURCES_VERSION: u32 = 1;

const MAX_EMOJI_CHARS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawMessage {
    pub symbol: String,
    pub message: String,
    /// UTC timestamp as written in the source file.
    pub datetime: String,
    pub user: String,
    pub message_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleanMessage {
    pub tokens: Vec<String>,
    pub dropped: bool,
}

impl CleanMessage {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub drop_retweets: bool,
    pub remove_urls: bool,
    pub remove_mentions: bool,
    pub demojize: bool,
    pub normalize_cashtags: bool,
    pub segment_hashtags: bool,
    pub expand_contractions: bool,
    pub squeeze_repeats: bool,
    pub strip_punctuation: bool,
    pub fold_case: bool,
    pub remove_stopwords: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            drop_retweets: true,
            remove_urls: true,
            remove_mentions: true,
            demojize: true,
            normalize_cashtags: true,
            segment_hashtags: true,
            expand_contractions: true,
            squeeze_repeats: true,
            strip_punctuation: true,
            fold_case: true,
            remove_stopwords: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TextError {
    #[error("messages csv: bad header `{found}`, expected `Symbol,Message,Datetime,User,Message_Id`")]
    BadHeader { found: String },
    #[error("messages csv row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("messages csv row {row}: duplicate message id {id}")]
    DuplicateId { row: usize, id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub stopwords: HashSet<String>,
    /// Lowercase contraction (straight apostrophe) -> expansion.
    pub contractions: HashMap<String, String>,
    pub hashtag_dictionary: HashSet<String>,
    /// Longest run of one repeated letter kept by the squeeze stage.
    pub repeat_limit: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: StageToggles::default(),
            stopwords: word_list(STOPWORDS_EN),
            contractions: CONTRACTIONS_EN
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('\t'))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
            hashtag_dictionary: word_list(HASHTAG_DICT_EN),
            repeat_limit: 2,
        }
    }
}

impl PipelineConfig {
    pub fn with_stages(stages: StageToggles) -> Self {
        PipelineConfig { stages, ..Default::default() }
    }
}

fn word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

struct Patterns {
    url: Regex,
    mention: Regex,
    cashtag: Regex,
    hashtag: Regex,
    contraction: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        url: Regex::new(r"(?i)\b(?:[a-z][a-z0-9+.\-]*://|www\.)\S+").unwrap(),
        mention: Regex::new(r"@\w+").unwrap(),
        cashtag: Regex::new(r"\$([A-Za-z][A-Za-z0-9._]*)").unwrap(),
        hashtag: Regex::new(r"#(\w+)").unwrap(),
        contraction: Regex::new(r"\b\w+(?:['’]\w+)+").unwrap(),
    })
}

/// Normalizes one message into tokens.
pub fn preprocess(raw: &str, config: &PipelineConfig) -> CleanMessage {
    let st = &config.stages;
    if st.drop_retweets && raw.trim_start().starts_with("RT @") {
        return CleanMessage { tokens: Vec::new(), dropped: true };
    }
    let p = patterns();
    let mut text = raw.to_string();

    if st.remove_urls {
        text = p.url.replace_all(&text, " ").into_owned();
    }
    if st.remove_mentions {
        text = p.mention.replace_all(&text, " ").into_owned();
    }
    if st.demojize {
        text = demojize(&text);
    }
    if st.normalize_cashtags {
        text = p.cashtag.replace_all(&text, "$1").into_owned();
    }
    if st.segment_hashtags {
        text = p
            .hashtag
            .replace_all(&text, |caps: &regex::Captures| {
                format!(" {} ", segment_hashtag(&caps[1], &config.hashtag_dictionary).join(" "))
            })
            .into_owned();
    }
    if st.expand_contractions {
        text = p
            .contraction
            .replace_all(&text, |caps: &regex::Captures| {
                let key = fold(&caps[0].replace('’', "'"));
                match config.contractions.get(&key) {
                    Some(expansion) => expansion.clone(),
                    None => caps[0].to_string(),
                }
            })
            .into_owned();
    }
    if st.squeeze_repeats {
        text = squeeze_repeats(&text, config.repeat_limit);
    }
    if st.strip_punctuation {
        text = text.chars().map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' }).collect();
    }
    if st.fold_case {
        text = fold(&text);
    }
    let tokens = text
        .split_whitespace()
        .filter(|t| !(st.remove_stopwords && config.stopwords.contains(*t)))
        .map(str::to_string)
        .collect();
    CleanMessage { tokens, dropped: false }
}

/// Simple (one-to-one) lowercase mapping, independent of locale.
fn fold_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

fn fold(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

/// Replaces every emoji with ` name_token ` and drops stray variation
/// selectors and joiners.
pub fn demojize(text: &str) -> String {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut matched = None;
        // plain ASCII never starts an emoji we want to rename
        if !chars[i].1.is_ascii() {
            let max_len = MAX_EMOJI_CHARS.min(chars.len() - i);
            for len in (1..=max_len).rev() {
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(e) = emojis::get(&text[start..end]) {
                    matched = Some((len, e));
                    break;
                }
            }
        }
        match matched {
            Some((len, e)) => {
                out.push(' ');
                out.push_str(&emoji_token(e.name()));
                out.push(' ');
                i += len;
            }
            None => {
                let c = chars[i].1;
                if matches!(c, '\u{fe0e}' | '\u{fe0f}' | '\u{200d}') {
                    out.push(' ');
                } else {
                    out.push(c);
                }
                i += 1;
            }
        }
    }
    out
}

/// `"flag: United States"` -> `flag_united_states`.
fn emoji_token(name: &str) -> String {
    let mut token = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_alphanumeric() {
            token.push(fold_char(c));
        } else if !token.ends_with('_') {
            token.push('_');
        }
    }
    token.trim_matches('_').to_string()
}

/// Splits a hashtag body into lowercase words.
///
/// Case changes, underscores and letter/digit boundaries split first. Pieces
/// that are entirely lowercase are then cut by greedy longest-prefix matching
/// against `dictionary`; once no dictionary word matches, the rest of the
/// piece is kept as one token.
pub fn segment_hashtag(body: &str, dictionary: &HashSet<String>) -> Vec<String> {
    let mut out = Vec::new();
    for piece in split_boundaries(body) {
        if piece.chars().all(|c| c.is_lowercase()) {
            greedy_segment(&piece, dictionary, &mut out);
        } else {
            out.push(fold(&piece));
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum CharClass {
    Upper,
    Lower,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_uppercase() {
        CharClass::Upper
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        CharClass::Lower
    } else {
        CharClass::Other
    }
}

fn split_boundaries(body: &str) -> Vec<String> {
    let chars: Vec<char> = body.chars().collect();
    let mut pieces = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let cls = class_of(c);
        if cls == CharClass::Other {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if let Some(&prev) = cur.chars().last().as_ref() {
            let pc = class_of(prev);
            let next_lower = chars.get(i + 1).map(|&n| class_of(n) == CharClass::Lower).unwrap_or(false);
            let split = match (pc, cls) {
                (CharClass::Lower, CharClass::Upper) => true,
                (CharClass::Digit, CharClass::Upper | CharClass::Lower) => true,
                (CharClass::Upper | CharClass::Lower, CharClass::Digit) => true,
                // "AAPLEarnings": the last capital starts the next word
                (CharClass::Upper, CharClass::Upper) => next_lower,
                _ => false,
            };
            if split {
                pieces.push(std::mem::take(&mut cur));
            }
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
}

fn greedy_segment(run: &str, dictionary: &HashSet<String>, out: &mut Vec<String>) {
    let bounds: Vec<usize> = run.char_indices().map(|(i, _)| i).chain(std::iter::once(run.len())).collect();
    let mut pos = 0;
    while pos + 1 < bounds.len() {
        let start = bounds[pos];
        let hit = (pos + 1..bounds.len()).rev().find(|&end| dictionary.contains(&run[start..bounds[end]]));
        match hit {
            Some(end) => {
                out.push(run[start..bounds[end]].to_string());
                pos = end;
            }
            None => {
                out.push(run[start..].to_string());
                return;
            }
        }
    }
}

/// Shortens every run of one letter (compared case-insensitively) longer
/// than `limit` to its first `limit` characters. Digits and symbols are left
/// alone.
pub fn squeeze_repeats(text: &str, limit: usize) -> String {
    let limit = limit.max(1);
    let mut out = String::with_capacity(text.len());
    let mut run_char: Option<char> = None;
    let mut run_len = 0usize;
    for c in text.chars() {
        let key = fold_char(c);
        if c.is_alphabetic() && run_char == Some(key) {
            run_len += 1;
        } else {
            run_char = if c.is_alphabetic() { Some(key) } else { None };
            run_len = 1;
        }
        if run_char.is_none() || run_len <= limit {
            out.push(c);
        }
    }
    out
}

pub const MESSAGES_HEADER: [&str; 5] = ["Symbol", "Message", "Datetime", "User", "Message_Id"];

/// Reads the `Symbol,Message,Datetime,User,Message_Id` layout. Message ids
/// must be unique.
pub fn read_messages_csv(text: &str) -> Result<Vec<RawMessage>, TextError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| TextError::BadHeader { found: e.to_string() })?.clone();
    if header.len() != 5 || header.iter().zip(MESSAGES_HEADER).any(|(h, e)| h.trim() != e) {
        return Err(TextError::BadHeader { found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| TextError::BadRow { row, reason: e.to_string() })?;
        let msg = RawMessage {
            symbol: record[0].trim().to_string(),
            message: record[1].to_string(),
            datetime: record[2].trim().to_string(),
            user: record[3].trim().to_string(),
            message_id: record[4].trim().to_string(),
        };
        if !seen.insert(msg.message_id.clone()) {
            return Err(TextError::DuplicateId { row, id: msg.message_id });
        }
        out.push(msg);
    }
    Ok(out)
}

pub fn write_messages_csv(messages: &[RawMessage]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MESSAGES_HEADER).expect("in-memory csv write");
    for m in messages {
        w.write_record([&m.symbol, &m.message, &m.datetime, &m.user, &m.message_id]).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

/// Cleaned corpus: one line of space-separated tokens per message, and a
/// `message_id,dropped` sidecar.
pub fn write_clean_corpus(ids: &[&str], cleaned: &[CleanMessage]) -> (String, String) {
    let mut corpus = String::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["message_id", "dropped"]).expect("in-memory csv write");
    for (id, c) in ids.iter().zip(cleaned) {
        corpus.push_str(&c.text());
        corpus.push('\n');
        w.write_record([*id, if c.dropped { "true" } else { "false" }]).expect("in-memory csv write");
    }
    (corpus, String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv"))
}
