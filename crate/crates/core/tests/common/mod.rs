//! Synthetic inputs shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stocksignal::cli::RunConfig;
use stocksignal::textprep::{write_messages_csv, RawMessage};

pub const UP_WORDS: [&str; 6] = ["moon", "rocket", "bullish", "breakout", "rally", "soaring"];
pub const DOWN_WORDS: [&str; 6] = ["dump", "bearish", "crash", "selloff", "tanking", "plunge"];
pub const FILLER: [&str; 8] = ["chart", "volume", "market", "earnings", "watching", "shares", "trading", "week"];

/// Messages whose words encode each trading day's same-day direction, plus
/// the matching OHLC files.
pub struct Planted {
    pub messages: Vec<RawMessage>,
    /// (symbol, ISO-dated OHLC CSV)
    pub ohlc: Vec<(String, String)>,
    /// Same-day direction per (symbol, date): true when close > open.
    pub up_days: Vec<(String, NaiveDate, bool)>,
}

pub struct PlantedSpec {
    pub symbols: Vec<String>,
    pub trading_days: usize,
    pub per_day: usize,
    /// Probability that each signal word is swapped for an opposite one.
    pub noise: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// 2 symbols x 100 weekdays x 10 messages = 2,000 messages.
    pub fn standard(noise: f64, seed: u64) -> Self {
        PlantedSpec { symbols: vec!["AAPL".into(), "MSFT".into()], trading_days: 100, per_day: 10, noise, seed }
    }
}

pub fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

pub fn planted(spec: &PlantedSpec) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let days = weekdays(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), spec.trading_days);
    let mut messages = Vec::new();
    let mut ohlc = Vec::new();
    let mut up_days = Vec::new();
    for symbol in &spec.symbols {
        let mut csv = String::from("Date,Open,High,Low,Close,Adj Close,Volume\n");
        let mut price: f64 = rng.gen_range(50.0..500.0);
        for &date in &days {
            let up = rng.gen_bool(0.5);
            let open = (price * rng.gen_range(0.99..1.01) * 1000.0).round() / 1000.0;
            let moved = rng.gen_range(0.01..0.03);
            let close = ((if up { open * (1.0 + moved) } else { open * (1.0 - moved) }) * 1000.0).round() / 1000.0;
            let high = open.max(close) * 1.01;
            let low = open.min(close) * 0.99;
            let volume: u64 = rng.gen_range(1_000_000..50_000_000);
            let _ = writeln!(csv, "{date},{open},{high:.3},{low:.3},{close},{close},{volume}");
            price = close;
            up_days.push((symbol.clone(), date, up));

            let (same, other) = if up { (&UP_WORDS, &DOWN_WORDS) } else { (&DOWN_WORDS, &UP_WORDS) };
            for i in 0..spec.per_day {
                let mut words = vec![format!("${symbol}")];
                for _ in 0..3 {
                    let pool = if rng.gen_bool(spec.noise) { other } else { same };
                    words.push(pool.choose(&mut rng).unwrap().to_string());
                }
                for _ in 0..2 {
                    words.push(FILLER.choose(&mut rng).unwrap().to_string());
                }
                words[1..].shuffle(&mut rng);
                messages.push(RawMessage {
                    symbol: symbol.clone(),
                    message: words.join(" "),
                    datetime: format!("{date}T{:02}:{:02}:00Z", 14 + i / 60, i % 60),
                    user: format!("user{}", rng.gen_range(0..50)),
                    message_id: format!("{symbol}-{date}-{i}"),
                });
            }
        }
        ohlc.push((symbol.clone(), csv));
    }
    Planted { messages, ohlc, up_days }
}

/// Writes the inputs under `dir` and returns a config pointing at them with
/// outputs in `dir/out`.
pub fn write_inputs(dir: &Path, planted: &Planted) -> RunConfig {
    let messages = dir.join("messages.csv");
    fs::write(&messages, write_messages_csv(&planted.messages)).unwrap();
    let mut config = RunConfig { out_dir: dir.join("out"), ..Default::default() };
    config.data.messages = Some(messages);
    for (symbol, csv) in &planted.ohlc {
        let p: PathBuf = dir.join(format!("{symbol}.csv"));
        fs::write(&p, csv).unwrap();
        config.data.ohlc.insert(symbol.clone(), p);
    }
    config
}
