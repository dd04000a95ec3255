//! Price-movement labels.
//!
//! Each calendar date of a (filled) price series gets a label under one of
//! three schemes:
//!
//! * `Binary`: positive iff the compared close is strictly above the
//!   reference price, otherwise negative (ties count as negative).
//! * `PctThree`: percent change above `+threshold` is positive, below
//!   `-threshold` negative, anything in the closed band is neutral.
//! * `PctTwo`: as `PctThree`, but the neutral band is excluded rather than
//!   labelled.
//!
//! The reference price depends on the alignment: the same day's open, or the
//! previous calendar day's close. Messages pick up the label of the calendar
//! date they were posted on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::PriceSeries;
use crate::textprep::RawMessage;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("date {date} is outside the price series")]
    DateOutOfRange { date: NaiveDate },
    #[error("messages dated outside the price series: {}", message_ids.join(", "))]
    MessagesOutOfSpan { message_ids: Vec<String> },
    #[error("message {message_id}: unparseable datetime `{datetime}`")]
    BadDatetime { message_id: String, datetime: String },
    #[error("class balance of an empty dataset")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("label code {code} is not valid under {kind}")]
    BadCode { code: i64, kind: SchemeKind },
    #[error("labelled csv row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, LabelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[serde(alias = "binary")]
    Binary,
    #[serde(rename = "pct2")]
    PctTwo,
    #[serde(rename = "pct3")]
    PctThree,
}

impl SchemeKind {
    /// Classes in ascending codec order. Index in this slice is the class
    /// index used by models and confusion matrices.
    pub fn classes(self) -> &'static [Label] {
        match self {
            SchemeKind::Binary | SchemeKind::PctTwo => &[Label::Negative, Label::Positive],
            SchemeKind::PctThree => &[Label::Negative, Label::Neutral, Label::Positive],
        }
    }

    pub fn n_classes(self) -> usize {
        self.classes().len()
    }

    /// Class index of the positive label.
    pub fn positive_index(self) -> usize {
        self.n_classes() - 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Binary => "binary",
            SchemeKind::PctTwo => "pct2",
            SchemeKind::PctThree => "pct3",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "binary" => Ok(SchemeKind::Binary),
            "pct2" => Ok(SchemeKind::PctTwo),
            "pct3" => Ok(SchemeKind::PctThree),
            other => Err(format!("unknown scheme `{other}` (expected binary, pct2 or pct3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub kind: SchemeKind,
    /// Percent band half-width. Ignored by `Binary`.
    pub threshold: f64,
}

impl LabelScheme {
    pub fn binary() -> Self {
        LabelScheme { kind: SchemeKind::Binary, threshold: DEFAULT_THRESHOLD }
    }

    pub fn pct_two() -> Self {
        LabelScheme { kind: SchemeKind::PctTwo, threshold: DEFAULT_THRESHOLD }
    }

    pub fn pct_three() -> Self {
        LabelScheme { kind: SchemeKind::PctThree, threshold: DEFAULT_THRESHOLD }
    }

    pub fn new(kind: SchemeKind, threshold: f64) -> Result<Self> {
        if kind != SchemeKind::Binary && !(threshold > 0.0 && threshold.is_finite()) {
            return Err(LabelError::BadThreshold(threshold));
        }
        Ok(LabelScheme { kind, threshold })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMode {
    SameDay,
    PrevDay,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::SameDay => "same-day",
            AlignmentMode::PrevDay => "prev-day",
        }
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignmentMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "same-day" => Ok(AlignmentMode::SameDay),
            "prev-day" => Ok(AlignmentMode::PrevDay),
            other => Err(format!("unknown alignment `{other}` (expected same-day or prev-day)")),
        }
    }
}

/// Which previous-day price the percent change under `PrevDay` divides by.
/// `Close` is the default; `Open` is the literal open-based variant.
/// Binary labels always compare against the previous close.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrevDayReference {
    #[default]
    Close,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Neutral,
    Positive,
}

impl Label {
    /// Integer codec: Binary/PctTwo use 1/0, PctThree uses 1/0/-1.
    pub fn code(self, kind: SchemeKind) -> i64 {
        match (kind, self) {
            (_, Label::Positive) => 1,
            (SchemeKind::PctThree, Label::Neutral) => 0,
            (SchemeKind::PctThree, Label::Negative) => -1,
            (_, Label::Negative) => 0,
            (_, Label::Neutral) => unreachable!("neutral label under a two-class scheme"),
        }
    }

    pub fn from_code(code: i64, kind: SchemeKind) -> Result<Label> {
        match (kind, code) {
            (_, 1) => Ok(Label::Positive),
            (SchemeKind::PctThree, 0) => Ok(Label::Neutral),
            (SchemeKind::PctThree, -1) => Ok(Label::Negative),
            (SchemeKind::Binary | SchemeKind::PctTwo, 0) => Ok(Label::Negative),
            _ => Err(LabelError::BadCode { code, kind }),
        }
    }

    pub fn class_index(self, kind: SchemeKind) -> Option<usize> {
        kind.classes().iter().position(|&l| l == self)
    }

    pub fn from_class_index(index: usize, kind: SchemeKind) -> Option<Label> {
        kind.classes().get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Neutral => "neutral",
            Label::Positive => "positive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Label(Label),
    Excluded,
}

impl Outcome {
    pub fn label(self) -> Option<Label> {
        match self {
            Outcome::Label(l) => Some(l),
            Outcome::Excluded => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayLabel {
    pub date: NaiveDate,
    pub scheme: LabelScheme,
    pub alignment: AlignmentMode,
    /// Signed percent; `None` under `Binary`.
    pub pct_change: Option<f64>,
    pub outcome: Outcome,
}

/// A complete labelling rule: scheme, alignment, and the previous-day
/// reference for percent changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub scheme: LabelScheme,
    pub alignment: AlignmentMode,
    #[serde(default)]
    pub prev_reference: PrevDayReference,
}

impl LabelRule {
    pub fn new(scheme: LabelScheme, alignment: AlignmentMode) -> Self {
        LabelRule { scheme, alignment, prev_reference: PrevDayReference::Close }
    }

    /// (compared close, binary reference, percent reference)
    fn prices(&self, series: &PriceSeries, date: NaiveDate) -> Result<(f64, f64, f64)> {
        let today = series.get(date).ok_or(LabelError::DateOutOfRange { date })?;
        match self.alignment {
            AlignmentMode::SameDay => Ok((today.close, today.open, today.open)),
            AlignmentMode::PrevDay => {
                let prev_date = date.pred_opt().ok_or(LabelError::DateOutOfRange { date })?;
                let prev = series.get(prev_date).ok_or(LabelError::DateOutOfRange { date: prev_date })?;
                let pct_ref = match self.prev_reference {
                    PrevDayReference::Close => prev.close,
                    PrevDayReference::Open => prev.open,
                };
                Ok((today.close, prev.close, pct_ref))
            }
        }
    }

    pub fn pct_change(&self, series: &PriceSeries, date: NaiveDate) -> Result<f64> {
        let (close, _, reference) = self.prices(series, date)?;
        Ok(percent(close, reference))
    }

    pub fn label_day(&self, series: &PriceSeries, date: NaiveDate) -> Result<DayLabel> {
        let (close, binary_ref, pct_ref) = self.prices(series, date)?;
        let (pct_change, outcome) = match self.scheme.kind {
            SchemeKind::Binary => {
                let label = if close > binary_ref { Label::Positive } else { Label::Negative };
                (None, Outcome::Label(label))
            }
            kind => {
                let pct = percent(close, pct_ref);
                let t = self.scheme.threshold;
                let outcome = if pct > t {
                    Outcome::Label(Label::Positive)
                } else if pct < -t {
                    Outcome::Label(Label::Negative)
                } else if kind == SchemeKind::PctThree {
                    Outcome::Label(Label::Neutral)
                } else {
                    Outcome::Excluded
                };
                (Some(pct), outcome)
            }
        };
        Ok(DayLabel { date, scheme: self.scheme, alignment: self.alignment, pct_change, outcome })
    }

    /// Labels every date of the series that has the reference it needs.
    pub fn label_series(&self, series: &PriceSeries) -> Vec<DayLabel> {
        series.bars().iter().filter_map(|b| self.label_day(series, b.date).ok()).collect()
    }
}

fn percent(close: f64, reference: f64) -> f64 {
    assert!(reference > 0.0, "reference price must be positive");
    (close - reference) / reference * 100.0
}

/// Percent change on `date` with the default previous-close reference.
pub fn pct_change(series: &PriceSeries, date: NaiveDate, alignment: AlignmentMode) -> Result<f64> {
    LabelRule::new(LabelScheme::pct_three(), alignment).pct_change(series, date)
}

pub fn label_day(
    series: &PriceSeries,
    date: NaiveDate,
    scheme: LabelScheme,
    alignment: AlignmentMode,
) -> Result<DayLabel> {
    LabelRule::new(scheme, alignment).label_day(series, date)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledMessage {
    pub message: RawMessage,
    pub pct_change: Option<f64>,
    pub outcome: Label,
}

impl LabelledMessage {
    /// Calendar date of the message after shifting by `tz_offset_hours`.
    pub fn date(&self, tz_offset_hours: i32) -> Option<NaiveDate> {
        message_date(&self.message.datetime, tz_offset_hours)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JoinOutput {
    pub labelled: Vec<LabelledMessage>,
    /// Messages dropped because their date fell in the excluded band.
    pub excluded: usize,
    /// Binary labels decided by an exact close == reference tie.
    pub ties: usize,
}

/// Parses a message timestamp as UTC. Accepts RFC 3339 (`2020-07-16T23:08:47Z`)
/// and the zone-less `2020-07-16 23:08:47` / `2020-07-16T23:08:47` forms.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|naive| naive.and_utc())
}

pub fn message_date(datetime: &str, tz_offset_hours: i32) -> Option<NaiveDate> {
    let utc = parse_timestamp(datetime)?;
    Some((utc + Duration::hours(tz_offset_hours as i64)).date_naive())
}

/// Assigns each message the label of its (offset-shifted) calendar date.
/// Messages whose date is excluded are dropped and counted; input order is
/// kept. All out-of-span message ids are reported together.
pub fn join_messages(
    messages: &[RawMessage],
    series: &PriceSeries,
    rule: &LabelRule,
    tz_offset_hours: i32,
) -> Result<JoinOutput> {
    let mut cache: HashMap<NaiveDate, Option<DayLabel>> = HashMap::new();
    let mut out = JoinOutput::default();
    let mut out_of_span = Vec::new();

    for msg in messages {
        let date = message_date(&msg.datetime, tz_offset_hours).ok_or_else(|| LabelError::BadDatetime {
            message_id: msg.message_id.clone(),
            datetime: msg.datetime.clone(),
        })?;
        let day = *cache.entry(date).or_insert_with(|| rule.label_day(series, date).ok());
        let Some(day) = day else {
            out_of_span.push(msg.message_id.clone());
            continue;
        };
        match day.outcome {
            Outcome::Excluded => out.excluded += 1,
            Outcome::Label(label) => {
                if rule.scheme.kind == SchemeKind::Binary && is_tie(series, rule, date) {
                    out.ties += 1;
                }
                out.labelled.push(LabelledMessage { message: msg.clone(), pct_change: day.pct_change, outcome: label });
            }
        }
    }

    if !out_of_span.is_empty() {
        return Err(LabelError::MessagesOutOfSpan { message_ids: out_of_span });
    }
    Ok(out)
}

fn is_tie(series: &PriceSeries, rule: &LabelRule, date: NaiveDate) -> bool {
    rule.prices(series, date).map(|(close, reference, _)| close == reference).unwrap_or(false)
}

/// Label counts and shares over non-excluded messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub counts: BTreeMap<Label, usize>,
    pub total: usize,
}

impl ClassBalance {
    pub fn share(&self, label: Label) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        *self.counts.get(&label).unwrap_or(&0) as f64 / self.total as f64
    }

    /// Shares for every class of `kind`, zero-filled, in class order.
    pub fn proportions(&self, kind: SchemeKind) -> Vec<(Label, f64)> {
        kind.classes().iter().map(|&l| (l, self.share(l))).collect()
    }
}

pub fn class_balance(labelled: &[LabelledMessage]) -> Result<ClassBalance> {
    if labelled.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut counts = BTreeMap::new();
    for m in labelled {
        *counts.entry(m.outcome).or_insert(0) += 1;
    }
    Ok(ClassBalance { counts, total: labelled.len() })
}

pub const LABELLED_HEADER: [&str; 7] =
    ["symbol", "message", "datetime", "user", "message_id", "pct_change", "label_int"];

#[derive(Debug, Serialize, Deserialize)]
struct LabelledRow {
    symbol: String,
    message: String,
    datetime: String,
    user: String,
    message_id: String,
    pct_change: Option<f64>,
    label_int: i64,
}

/// Serializes the labelled dataset. `pct_change` is left empty for `Binary`.
pub fn write_labelled_csv(labelled: &[LabelledMessage], kind: SchemeKind) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for m in labelled {
        let row = LabelledRow {
            symbol: m.message.symbol.clone(),
            message: m.message.message.clone(),
            datetime: m.message.datetime.clone(),
            user: m.message.user.clone(),
            message_id: m.message.message_id.clone(),
            pct_change: if kind == SchemeKind::Binary { None } else { m.pct_change },
            label_int: m.outcome.code(kind),
        };
        w.serialize(row).expect("in-memory csv write");
    }
    if labelled.is_empty() {
        w.write_record(LABELLED_HEADER).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

pub fn read_labelled_csv(text: &str, kind: SchemeKind) -> Result<Vec<LabelledMessage>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<LabelledRow>().enumerate() {
        let row = row.map_err(|e| LabelError::BadRow { row: i + 1, reason: e.to_string() })?;
        let outcome = Label::from_code(row.label_int, kind)?;
        out.push(LabelledMessage {
            message: RawMessage {
                symbol: row.symbol,
                message: row.message,
                datetime: row.datetime,
                user: row.user,
                message_id: row.message_id,
            },
            pct_change: row.pct_change,
            outcome,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{fill_calendar, parse_ohlc_csv, DateFormat, OhlcBar, Provenance};

    const TSLA_WEEK: &str = "Date,Open,High,Low,Close,Adj Close,Volume
10/07/2020,279.2,309.784,275.202,308.93,308.93,117000000
13/07/2020,331.8,358.998,294.222,299.412,299.412,195000000
14/07/2020,311.2,318,286.2,303.36,303.36,117000000
15/07/2020,308.6,310,291.4,309.202,309.202,81839000
16/07/2020,295.432,306.342,293.2,300.128,300.128,71504000
";

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, m, day).unwrap()
    }

    fn tsla_week() -> PriceSeries {
        fill_calendar(&parse_ohlc_csv(TSLA_WEEK, "TSLA", DateFormat::DayMonthYear).unwrap()).unwrap()
    }

    fn msg(id: &str, datetime: &str) -> RawMessage {
        RawMessage {
            symbol: "TSLA".into(),
            message: "$TSLA trash".into(),
            datetime: datetime.into(),
            user: "3796654".into(),
            message_id: id.into(),
        }
    }

    fn flat_series(open: f64, close: f64) -> PriceSeries {
        let bar = |day, o: f64, c: f64| OhlcBar {
            date: d(8, day),
            open: o,
            high: o.max(c),
            low: o.min(c),
            close: c,
            adj_close: c,
            volume: 1,
            provenance: Provenance::Observed,
        };
        PriceSeries::new("X", vec![bar(1, 100.0, 100.0), bar(2, open, close)]).unwrap()
    }

    #[test]
    fn pct_change_same_day_and_prev_day() {
        let s = tsla_week();
        let same = pct_change(&s, d(7, 16), AlignmentMode::SameDay).unwrap();
        assert!((same - 1.5895).abs() < 5e-5, "{same}");
        assert_eq!(same, (300.128 - 295.432) / 295.432 * 100.0);
        let prev = pct_change(&s, d(7, 14), AlignmentMode::PrevDay).unwrap();
        assert!((prev - 1.3186).abs() < 5e-5, "{prev}");
        assert_eq!(pct_change(&flat_series(50.0, 50.0), d(8, 2), AlignmentMode::SameDay).unwrap(), 0.0);
    }

    #[test]
    fn prev_day_open_reference() {
        let s = tsla_week();
        let mut rule = LabelRule::new(LabelScheme::pct_three(), AlignmentMode::PrevDay);
        rule.prev_reference = PrevDayReference::Open;
        let p = rule.pct_change(&s, d(7, 14)).unwrap();
        assert_eq!(p, (303.36 - 331.8) / 331.8 * 100.0);
    }

    #[test]
    fn out_of_range_dates() {
        let s = tsla_week();
        assert_eq!(
            pct_change(&s, d(7, 9), AlignmentMode::SameDay),
            Err(LabelError::DateOutOfRange { date: d(7, 9) })
        );
        assert!(pct_change(&s, d(7, 10), AlignmentMode::PrevDay).is_err());
        assert!(pct_change(&s, d(7, 10), AlignmentMode::SameDay).is_ok());
    }

    #[test]
    fn labels_on_table_rows() {
        let s = tsla_week();
        let l = |date, scheme| label_day(&s, date, scheme, AlignmentMode::SameDay).unwrap();
        assert_eq!(l(d(7, 15), LabelScheme::binary()).outcome, Outcome::Label(Label::Positive));
        assert_eq!(l(d(7, 15), LabelScheme::binary()).pct_change, None);
        let p3 = l(d(7, 15), LabelScheme::pct_three());
        assert!((p3.pct_change.unwrap() - 0.1951).abs() < 5e-5);
        assert_eq!(p3.outcome, Outcome::Label(Label::Neutral));
        assert_eq!(l(d(7, 15), LabelScheme::pct_two()).outcome, Outcome::Excluded);

        assert_eq!(l(d(7, 13), LabelScheme::binary()).outcome, Outcome::Label(Label::Negative));
        let p = l(d(7, 13), LabelScheme::pct_three());
        assert!((p.pct_change.unwrap() + 9.761).abs() < 5e-4);
        assert_eq!(p.outcome, Outcome::Label(Label::Negative));
        assert_eq!(l(d(7, 13), LabelScheme::pct_two()).outcome, Outcome::Label(Label::Negative));
    }

    #[test]
    fn band_edges_are_neutral_and_ties_negative() {
        // 100 -> 100.5 is exactly +0.5% in binary floating point
        let s = flat_series(100.0, 100.5);
        let p = label_day(&s, d(8, 2), LabelScheme::pct_three(), AlignmentMode::SameDay).unwrap();
        assert_eq!(p.pct_change, Some(0.5));
        assert_eq!(p.outcome, Outcome::Label(Label::Neutral));
        let s = flat_series(100.0, 99.5);
        let p = label_day(&s, d(8, 2), LabelScheme::pct_two(), AlignmentMode::SameDay).unwrap();
        assert_eq!(p.pct_change, Some(-0.5));
        assert_eq!(p.outcome, Outcome::Excluded);
        let s = flat_series(42.0, 42.0);
        let b = label_day(&s, d(8, 2), LabelScheme::binary(), AlignmentMode::SameDay).unwrap();
        assert_eq!(b.outcome, Outcome::Label(Label::Negative));
    }

    #[test]
    fn codec_round_trips() {
        for kind in [SchemeKind::Binary, SchemeKind::PctTwo, SchemeKind::PctThree] {
            for (i, &label) in kind.classes().iter().enumerate() {
                assert_eq!(Label::from_code(label.code(kind), kind).unwrap(), label);
                assert_eq!(label.class_index(kind), Some(i));
            }
        }
        assert_eq!(Label::Negative.code(SchemeKind::PctThree), -1);
        assert_eq!(Label::Negative.code(SchemeKind::Binary), 0);
        assert!(Label::from_code(-1, SchemeKind::Binary).is_err());
        assert!(LabelScheme::new(SchemeKind::PctTwo, 0.0).is_err());
    }

    #[test]
    fn join_sample_message() {
        let s = tsla_week();
        let rule = LabelRule::new(LabelScheme::binary(), AlignmentMode::SameDay);
        let out = join_messages(&[msg("1", "2020-07-16T23:08:47Z")], &s, &rule, 0).unwrap();
        assert_eq!(out.labelled.len(), 1);
        assert_eq!(out.labelled[0].outcome, Label::Positive);
        assert_eq!(out.labelled[0].message.message, "$TSLA trash");

        let shifted = join_messages(&[msg("1", "2020-07-16T23:08:47Z")], &s, &rule, -4).unwrap();
        assert_eq!(shifted.labelled[0].date(-4), Some(d(7, 16)));
        // +4h crosses midnight, which is past the end of the series
        assert!(matches!(
            join_messages(&[msg("1", "2020-07-16T23:08:47Z")], &s, &rule, 4),
            Err(LabelError::MessagesOutOfSpan { .. })
        ));
    }

    #[test]
    fn join_empty_and_errors() {
        let s = tsla_week();
        let rule = LabelRule::new(LabelScheme::pct_two(), AlignmentMode::SameDay);
        let out = join_messages(&[], &s, &rule, 0).unwrap();
        assert!(out.labelled.is_empty());
        assert_eq!(out.excluded, 0);

        let err = join_messages(&[msg("a", "2020-07-01T00:00:00Z"), msg("b", "2020-07-15T10:00:00Z"), msg("c", "2021-01-01T00:00:00Z")], &s, &rule, 0)
            .unwrap_err();
        assert_eq!(err, LabelError::MessagesOutOfSpan { message_ids: vec!["a".into(), "c".into()] });

        assert!(matches!(join_messages(&[msg("z", "yesterday")], &s, &rule, 0), Err(LabelError::BadDatetime { .. })));
    }

    #[test]
    fn join_drops_excluded_and_keeps_order() {
        let s = tsla_week();
        let rule = LabelRule::new(LabelScheme::pct_two(), AlignmentMode::SameDay);
        let msgs = [
            msg("1", "2020-07-16T12:00:00Z"),
            msg("2", "2020-07-15T12:00:00Z"),
            msg("3", "2020-07-13T12:00:00Z"),
        ];
        let out = join_messages(&msgs, &s, &rule, 0).unwrap();
        assert_eq!(out.excluded, 1);
        let ids: Vec<_> = out.labelled.iter().map(|m| m.message.message_id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
    }

    #[test]
    fn timestamp_forms() {
        assert_eq!(message_date("2020-07-16 23:08:47", 0), Some(d(7, 16)));
        assert_eq!(message_date("2020-07-16T23:08:47+02:00", 0), Some(d(7, 16)));
        assert_eq!(message_date("2020-07-16T01:00:00Z", -2), Some(d(7, 15)));
    }

    #[test]
    fn balance_singleton_and_empty() {
        let m = LabelledMessage { message: msg("1", "2020-07-16T00:00:00Z"), pct_change: None, outcome: Label::Positive };
        let b = class_balance(&[m]).unwrap();
        assert_eq!(b.share(Label::Positive), 1.0);
        assert_eq!(b.proportions(SchemeKind::Binary), vec![(Label::Negative, 0.0), (Label::Positive, 1.0)]);
        assert_eq!(class_balance(&[]), Err(LabelError::Empty));
    }

    #[test]
    fn labelled_csv_round_trip() {
        let s = tsla_week();
        let rule = LabelRule::new(LabelScheme::pct_three(), AlignmentMode::SameDay);
        let mut m = msg("1", "2020-07-16T23:08:47Z");
        m.message = "quoted, \"text\" with comma".into();
        let out = join_messages(&[m, msg("2", "2020-07-15T01:00:00Z")], &s, &rule, 0).unwrap();
        let text = write_labelled_csv(&out.labelled, SchemeKind::PctThree);
        assert!(text.starts_with("symbol,message,datetime,user,message_id,pct_change,label_int\n"));
        assert_eq!(read_labelled_csv(&text, SchemeKind::PctThree).unwrap(), out.labelled);

        let empty = write_labelled_csv(&[], SchemeKind::Binary);
        assert_eq!(empty.trim_end(), LABELLED_HEADER.join(","));
        assert!(read_labelled_csv(&empty, SchemeKind::Binary).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use chrono::Days;
        use proptest::prelude::*;

        fn arb_series() -> impl Strategy<Value = PriceSeries> {
            prop::collection::vec((1u64..4, 10.0f64..200.0, -3.0f64..3.0), 2..15).prop_map(|rows| {
                let mut date = d(1, 1);
                let bars = rows
                    .into_iter()
                    .map(|(step, open, pct)| {
                        date = date + Days::new(step);
                        let close = open * (1.0 + pct / 100.0);
                        OhlcBar {
                            date,
                            open,
                            high: open.max(close),
                            low: open.min(close),
                            close,
                            adj_close: close,
                            volume: 0,
                            provenance: Provenance::Observed,
                        }
                    })
                    .collect();
                fill_calendar(&PriceSeries::new("P", bars).unwrap()).unwrap()
            })
        }

        fn scaled(s: &PriceSeries, c: f64) -> PriceSeries {
            let bars = s
                .bars()
                .iter()
                .map(|b| OhlcBar {
                    open: b.open * c,
                    high: b.high * c,
                    low: b.low * c,
                    close: b.close * c,
                    adj_close: b.adj_close * c,
                    ..*b
                })
                .collect();
            PriceSeries::new(s.symbol.clone(), bars).unwrap()
        }

        proptest! {
            #[test]
            fn pct_two_restricts_pct_three(s in arb_series(), prev in any::<bool>()) {
                let alignment = if prev { AlignmentMode::PrevDay } else { AlignmentMode::SameDay };
                for b in s.bars() {
                    let Ok(three) = label_day(&s, b.date, LabelScheme::pct_three(), alignment) else { continue };
                    let two = label_day(&s, b.date, LabelScheme::pct_two(), alignment).unwrap();
                    match three.outcome {
                        Outcome::Label(Label::Neutral) => prop_assert_eq!(two.outcome, Outcome::Excluded),
                        Outcome::Label(l) => prop_assert_eq!(two.outcome, Outcome::Label(l)),
                        Outcome::Excluded => prop_assert!(false, "pct3 never excludes"),
                    }
                    prop_assert_eq!(two.pct_change, three.pct_change);
                }
            }

            // Power-of-two factors keep the scaled prices exact.
            #[test]
            fn labels_invariant_under_scaling(s in arb_series(), exp in -8i32..8) {
                let c = 2f64.powi(exp);
                let t = scaled(&s, c);
                for scheme in [LabelScheme::binary(), LabelScheme::pct_two(), LabelScheme::pct_three()] {
                    for alignment in [AlignmentMode::SameDay, AlignmentMode::PrevDay] {
                        let rule = LabelRule::new(scheme, alignment);
                        let a: Vec<_> = rule.label_series(&s).into_iter().map(|x| x.outcome).collect();
                        let b: Vec<_> = rule.label_series(&t).into_iter().map(|x| x.outcome).collect();
                        prop_assert_eq!(a, b);
                    }
                }
            }
        }
    }
}
