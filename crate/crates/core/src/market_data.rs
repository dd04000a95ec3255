//! Daily OHLC price history: CSV ingestion, validation, optional HTTP fetch,
//! and calendar filling of non-trading days by midpoint imputation.
//!
//! A missing calendar day takes, field by field, the mean of the nearest
//! observed bar before the gap and the nearest observed bar after it. Every
//! day inside one gap therefore carries the same imputed values.

use std::fmt::Write as _;
use std::time::Duration;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OHLC_HEADER: [&str; 7] = ["Date", "Open", "High", "Low", "Close", "Adj Close", "Volume"];

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("bad header: expected `{}`, found `{found}`", OHLC_HEADER.join(","))]
    BadHeader { found: String },
    #[error("row {row}: duplicate date {date}")]
    DuplicateDate { row: usize, date: NaiveDate },
    #[error("row {row}: non-positive {field} ({value})")]
    NonPositivePrice { row: usize, field: &'static str, value: f64 },
    #[error("row {row}: negative volume ({value})")]
    NegativeVolume { row: usize, value: f64 },
    #[error("row {row}: low/high ordering violated (low {low}, open {open}, close {close}, high {high})")]
    OrderingViolation { row: usize, low: f64, open: f64, close: f64, high: f64 },
    #[error("calendar fill needs at least 2 bars, got {0}")]
    TooFewBars(usize),
    #[error("transport error fetching {url}: {source}")]
    Transport { url: String, #[source] source: reqwest::Error },
    #[error("{url} answered with status {status}")]
    HttpStatus { url: String, status: u16 },
    #[error("{url} returned an empty body")]
    EmptyBody { url: String },
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Imputed,
}

/// Explicit date layout of the `Date` column. There is no auto-detection:
/// `01/02/2020` means different days under the two layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DateFormat {
    /// `DD/MM/YYYY`
    DayMonthYear,
    /// `YYYY-MM-DD`
    #[default]
    Iso,
}

impl DateFormat {
    fn pattern(self) -> &'static str {
        match self {
            DateFormat::DayMonthYear => "%d/%m/%Y",
            DateFormat::Iso => "%Y-%m-%d",
        }
    }

    pub fn parse(self, s: &str) -> Option<NaiveDate> {
        NaiveDate::parse_from_str(s.trim(), self.pattern()).ok()
    }

    pub fn format(self, date: NaiveDate) -> String {
        date.format(self.pattern()).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: u64,
    pub provenance: Provenance,
}

impl OhlcBar {
    /// Checks the price invariants; `row` is only used to label the error.
    pub fn validate(&self, row: usize) -> Result<()> {
        for (field, value) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
            ("adj_close", self.adj_close),
        ] {
            // also rejects NaN
            if !(value > 0.0) || !value.is_finite() {
                return Err(MarketDataError::NonPositivePrice { row, field, value });
            }
        }
        let ordered = self.low <= self.open.min(self.close) && self.open.max(self.close) <= self.high;
        if !ordered {
            return Err(MarketDataError::OrderingViolation {
                row,
                low: self.low,
                open: self.open,
                close: self.close,
                high: self.high,
            });
        }
        Ok(())
    }

    fn midpoint(date: NaiveDate, prev: &OhlcBar, next: &OhlcBar) -> OhlcBar {
        let mid = |a: f64, b: f64| (a + b) / 2.0;
        OhlcBar {
            date,
            open: mid(prev.open, next.open),
            high: mid(prev.high, next.high),
            low: mid(prev.low, next.low),
            close: mid(prev.close, next.close),
            adj_close: mid(prev.adj_close, next.adj_close),
            volume: midpoint_volume(prev.volume, next.volume),
            provenance: Provenance::Imputed,
        }
    }
}

/// Midpoint of two volumes, rounded half-up.
fn midpoint_volume(a: u64, b: u64) -> u64 {
    let sum = a as u128 + b as u128;
    ((sum + 1) / 2) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub symbol: String,
    bars: Vec<OhlcBar>,
}

impl PriceSeries {
    /// Builds a series from bars in any order. Bars are sorted by date and
    /// validated; duplicate dates are rejected.
    pub fn new(symbol: impl Into<String>, mut bars: Vec<OhlcBar>) -> Result<Self> {
        for (i, bar) in bars.iter().enumerate() {
            bar.validate(i + 1)?;
        }
        bars.sort_by_key(|b| b.date);
        if let Some(w) = bars.windows(2).position(|w| w[0].date == w[1].date) {
            return Err(MarketDataError::DuplicateDate { row: w + 2, date: bars[w].date });
        }
        Ok(PriceSeries { symbol: symbol.into(), bars })
    }

    pub fn bars(&self) -> &[OhlcBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.bars.first().map(|b| b.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.bars.last().map(|b| b.date)
    }

    /// Bar for `date`, by binary search.
    pub fn get(&self, date: NaiveDate) -> Option<&OhlcBar> {
        self.bars
            .binary_search_by_key(&date, |b| b.date)
            .ok()
            .map(|i| &self.bars[i])
    }

    /// Writes the series in the seven-column CSV layout.
    pub fn to_csv(&self, format: DateFormat) -> String {
        let mut out = OHLC_HEADER.join(",");
        out.push('\n');
        for b in &self.bars {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                format.format(b.date),
                b.open,
                b.high,
                b.low,
                b.close,
                b.adj_close,
                b.volume
            );
        }
        out
    }
}

/// Parses the `Date,Open,High,Low,Close,Adj Close,Volume` layout. Row numbers
/// in errors count data rows from 1 (the header is row 0).
pub fn parse_ohlc_csv(text: &str, symbol: &str, format: DateFormat) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| MarketDataError::BadHeader { found: e.to_string() })?
        .clone();
    if header.len() != OHLC_HEADER.len() || header.iter().zip(OHLC_HEADER).any(|(h, e)| h != e) {
        return Err(MarketDataError::BadHeader { found: header.iter().collect::<Vec<_>>().join(",") });
    }

    let mut bars = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| MarketDataError::MalformedRow { row, reason: e.to_string() })?;
        if record.len() != 7 {
            return Err(MarketDataError::MalformedRow {
                row,
                reason: format!("expected 7 fields, found {}", record.len()),
            });
        }
        let date = format.parse(&record[0]).ok_or_else(|| MarketDataError::MalformedRow {
            row,
            reason: format!("unparseable date `{}`", &record[0]),
        })?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            record[idx].parse::<f64>().map_err(|_| MarketDataError::MalformedRow {
                row,
                reason: format!("unparseable {name} `{}`", &record[idx]),
            })
        };
        let volume = num(6, "volume")?;
        if volume < 0.0 {
            return Err(MarketDataError::NegativeVolume { row, value: volume });
        }
        if !volume.is_finite() || volume.fract() != 0.0 {
            return Err(MarketDataError::MalformedRow { row, reason: format!("volume `{}` is not a whole number", &record[6]) });
        }
        let bar = OhlcBar {
            date,
            open: num(1, "open")?,
            high: num(2, "high")?,
            low: num(3, "low")?,
            close: num(4, "close")?,
            adj_close: num(5, "adj close")?,
            volume: volume as u64,
            provenance: Provenance::Observed,
        };
        bar.validate(row)?;
        if let Some(prev) = bars.iter().position(|b: &OhlcBar| b.date == date) {
            let _ = prev;
            return Err(MarketDataError::DuplicateDate { row, date });
        }
        bars.push(bar);
    }
    bars.sort_by_key(|b| b.date);
    Ok(PriceSeries { symbol: symbol.to_string(), bars })
}

/// Fills every missing calendar day between consecutive bars with the
/// field-wise midpoint of the flanking observed bars.
///
/// Imputed bars already present in the input are discarded and recomputed,
/// which makes the operation idempotent. The result starts and ends on an
/// observed bar.
pub fn fill_calendar(series: &PriceSeries) -> Result<PriceSeries> {
    let observed: Vec<&OhlcBar> =
        series.bars.iter().filter(|b| b.provenance == Provenance::Observed).collect();
    if observed.len() < 2 {
        return Err(MarketDataError::TooFewBars(observed.len()));
    }

    let span = (observed[observed.len() - 1].date - observed[0].date).num_days() as usize + 1;
    let mut bars = Vec::with_capacity(span);
    for pair in observed.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        bars.push(*prev);
        let mut day = prev.date + Days::new(1);
        while day < next.date {
            bars.push(OhlcBar::midpoint(day, prev, next));
            day = day + Days::new(1);
        }
    }
    bars.push(*observed[observed.len() - 1]);

    debug_assert_eq!(bars.len(), span);
    debug_assert!(bars.first().map(|b| b.provenance) == Some(Provenance::Observed));
    Ok(PriceSeries { symbol: series.symbol.clone(), bars })
}

/// Where and how to fetch OHLC CSV over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchConfig {
    /// Base URL; the request goes to `{base}/{symbol}?start={date}&end={date}`.
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    30
}

pub fn fetch_url(base: &str, symbol: &str, start: NaiveDate, end: NaiveDate) -> String {
    format!(
        "{}/{}?start={}&end={}",
        base.trim_end_matches('/'),
        symbol,
        start.format("%Y-%m-%d"),
        end.format("%Y-%m-%d")
    )
}

/// Fetches the raw CSV body for `symbol` over `[start, end]`. The body is
/// returned untouched; parse it with [`parse_ohlc_csv`].
pub fn fetch_ohlc(config: &FetchConfig, symbol: &str, start: NaiveDate, end: NaiveDate) -> Result<String> {
    let url = fetch_url(&config.base_url, symbol, start, end);
    let transport = |source| MarketDataError::Transport { url: url.clone(), source };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.timeout_secs))
        .build()
        .map_err(transport)?;
    let response = client.get(&url).send().map_err(transport)?;
    let status = response.status();
    if !status.is_success() {
        return Err(MarketDataError::HttpStatus { url, status: status.as_u16() });
    }
    let body = response.text().map_err(transport)?;
    if body.trim().is_empty() {
        return Err(MarketDataError::EmptyBody { url });
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TSLA_WEEK: &str = "Date,Open,High,Low,Close,Adj Close,Volume
10/07/2020,279.2,309.784,275.202,308.93,308.93,117000000
13/07/2020,331.8,358.998,294.222,299.412,299.412,195000000
14/07/2020,311.2,318,286.2,303.36,303.36,117000000
15/07/2020,308.6,310,291.4,309.202,309.202,81839000
16/07/2020,295.432,306.342,293.2,300.128,300.128,71504000
";

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn bar(date: NaiveDate, open: f64, close: f64) -> OhlcBar {
        OhlcBar {
            date,
            open,
            high: open.max(close) + 1.0,
            low: open.min(close) * 0.5,
            close,
            adj_close: close,
            volume: 1000,
            provenance: Provenance::Observed,
        }
    }

    #[test]
    fn parses_sample_rows() {
        let s = parse_ohlc_csv(TSLA_WEEK, "AAPL", DateFormat::DayMonthYear).unwrap();
        assert_eq!(s.len(), 5);
        let b = s.get(d(2020, 7, 15)).unwrap();
        assert_eq!(b.open, 308.6);
        assert_eq!(b.close, 309.202);
        assert_eq!(b.volume, 81_839_000);
        assert!(s.bars().iter().all(|b| b.provenance == Provenance::Observed));
    }

    #[test]
    fn header_only_is_empty() {
        let s = parse_ohlc_csv("Date,Open,High,Low,Close,Adj Close,Volume\n", "TSLA", DateFormat::Iso).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.symbol, "TSLA");
    }

    #[test]
    fn zero_close_names_row() {
        let text = "Date,Open,High,Low,Close,Adj Close,Volume\n2020-07-10,1,2,0.5,1.5,1.5,10\n2020-07-11,1,2,0.5,0,1,10\n";
        match parse_ohlc_csv(text, "X", DateFormat::Iso) {
            Err(MarketDataError::NonPositivePrice { row: 2, field: "close", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_ordering_and_garbage() {
        let dup = "Date,Open,High,Low,Close,Adj Close,Volume\n2020-07-10,1,2,0.5,1.5,1.5,10\n2020-07-10,1,2,0.5,1.5,1.5,10\n";
        assert!(matches!(parse_ohlc_csv(dup, "X", DateFormat::Iso), Err(MarketDataError::DuplicateDate { row: 2, .. })));
        let bad = "Date,Open,High,Low,Close,Adj Close,Volume\n2020-07-10,1,1.2,0.5,1.5,1.5,10\n";
        assert!(matches!(parse_ohlc_csv(bad, "X", DateFormat::Iso), Err(MarketDataError::OrderingViolation { row: 1, .. })));
        let garbage = "Date,Open,High,Low,Close,Adj Close,Volume\n2020-07-10,abc,2,0.5,1.5,1.5,10\n";
        assert!(matches!(parse_ohlc_csv(garbage, "X", DateFormat::Iso), Err(MarketDataError::MalformedRow { row: 1, .. })));
        let wrong_fmt = "Date,Open,High,Low,Close,Adj Close,Volume\n10/07/2020,1,2,0.5,1.5,1.5,10\n";
        assert!(matches!(parse_ohlc_csv(wrong_fmt, "X", DateFormat::Iso), Err(MarketDataError::MalformedRow { row: 1, .. })));
        assert!(matches!(parse_ohlc_csv("Date,Open\n", "X", DateFormat::Iso), Err(MarketDataError::BadHeader { .. })));
    }

    #[test]
    fn weekend_gap_takes_midpoint() {
        let s = parse_ohlc_csv(TSLA_WEEK, "AAPL", DateFormat::DayMonthYear).unwrap();
        let f = fill_calendar(&s).unwrap();
        assert_eq!(f.len(), 7);
        let expected = (308.93 + 299.412) / 2.0;
        for day in [11, 12] {
            let b = f.get(d(2020, 7, day)).unwrap();
            assert_eq!(b.provenance, Provenance::Imputed);
            assert!((b.close - 304.171).abs() < 1e-9);
            assert_eq!(b.close, expected);
        }
        assert_eq!(f.get(d(2020, 7, 11)), f.get(d(2020, 7, 12)).map(|b| OhlcBar { date: d(2020, 7, 11), ..*b }).as_ref());
        // volume midpoint of 117e6 and 195e6
        assert_eq!(f.get(d(2020, 7, 11)).unwrap().volume, 156_000_000);
    }

    #[test]
    fn three_day_gap_shares_value() {
        let s = PriceSeries::new("X", vec![bar(d(2021, 1, 1), 100.0, 100.0), bar(d(2021, 1, 5), 104.0, 104.0)]).unwrap();
        let f = fill_calendar(&s).unwrap();
        let imputed: Vec<_> = f.bars().iter().filter(|b| b.provenance == Provenance::Imputed).collect();
        assert_eq!(imputed.len(), 3);
        assert!(imputed.iter().all(|b| b.open == 102.0));
    }

    #[test]
    fn contiguous_series_unchanged() {
        let s = PriceSeries::new("X", vec![bar(d(2021, 1, 1), 1.0, 2.0), bar(d(2021, 1, 2), 2.0, 3.0)]).unwrap();
        assert_eq!(fill_calendar(&s).unwrap(), s);
    }

    #[test]
    fn fill_needs_two_bars() {
        let s = PriceSeries::new("X", vec![bar(d(2021, 1, 1), 1.0, 2.0)]).unwrap();
        assert!(matches!(fill_calendar(&s), Err(MarketDataError::TooFewBars(1))));
    }

    #[test]
    fn volume_rounds_half_up() {
        assert_eq!(midpoint_volume(1, 2), 2);
        assert_eq!(midpoint_volume(2, 2), 2);
        assert_eq!(midpoint_volume(0, 0), 0);
        assert_eq!(midpoint_volume(u64::MAX, u64::MAX), u64::MAX);
    }

    #[test]
    fn fetch_url_template() {
        assert_eq!(
            fetch_url("http://host/api/", "AAPL", d(2020, 7, 10), d(2020, 7, 16)),
            "http://host/api/AAPL?start=2020-07-10&end=2020-07-16"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_series() -> impl Strategy<Value = PriceSeries> {
            prop::collection::vec((1u64..5, 1.0f64..500.0, 1.0f64..500.0, 0.0f64..20.0, 0.0f64..20.0, 0u64..1_000_000), 2..20)
                .prop_map(|rows| {
                    let mut date = d(2020, 1, 1);
                    let bars = rows
                        .into_iter()
                        .map(|(step, open, close, up, down, volume)| {
                            date = date + Days::new(step);
                            OhlcBar {
                                date,
                                open,
                                high: open.max(close) + up,
                                low: (open.min(close) - down).max(0.5 * open.min(close)),
                                close,
                                adj_close: close,
                                volume,
                                provenance: Provenance::Observed,
                            }
                        })
                        .collect();
                    PriceSeries::new("P", bars).unwrap()
                })
        }

        proptest! {
            #[test]
            fn fill_is_idempotent_and_contiguous(s in arb_series()) {
                let once = fill_calendar(&s).unwrap();
                let twice = fill_calendar(&once).unwrap();
                prop_assert_eq!(&once, &twice);
                for w in once.bars().windows(2) {
                    prop_assert_eq!((w[1].date - w[0].date).num_days(), 1);
                }
                prop_assert_eq!(once.bars().first().unwrap().provenance, Provenance::Observed);
                prop_assert_eq!(once.bars().last().unwrap().provenance, Provenance::Observed);
            }

            #[test]
            fn imputed_bars_are_midpoints_and_ordered(s in arb_series()) {
                let f = fill_calendar(&s).unwrap();
                let bars = f.bars();
                for (i, b) in bars.iter().enumerate() {
                    if b.provenance == Provenance::Observed {
                        prop_assert_eq!(Some(b), s.get(b.date));
                        continue;
                    }
                    let p = bars[..i].iter().rev().find(|x| x.provenance == Provenance::Observed).unwrap();
                    let n = bars[i..].iter().find(|x| x.provenance == Provenance::Observed).unwrap();
                    prop_assert_eq!(b.open, (p.open + n.open) / 2.0);
                    prop_assert_eq!(b.high, (p.high + n.high) / 2.0);
                    prop_assert_eq!(b.low, (p.low + n.low) / 2.0);
                    prop_assert_eq!(b.close, (p.close + n.close) / 2.0);
                    prop_assert_eq!(b.adj_close, (p.adj_close + n.adj_close) / 2.0);
                    prop_assert!(b.validate(0).is_ok());
                }
            }

            #[test]
            fn csv_round_trip(s in arb_series(), iso in any::<bool>()) {
                let fmt = if iso { DateFormat::Iso } else { DateFormat::DayMonthYear };
                let back = parse_ohlc_csv(&s.to_csv(fmt), "P", fmt).unwrap();
                prop_assert_eq!(back, s);
            }
        }
    }
}
