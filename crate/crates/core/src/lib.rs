//! Stock movement prediction from social-media messages.
//!
//! The pipeline fetches and gap-fills daily OHLC prices ([`market_data`]),
//! labels each message with the price move of its trading day
//! ([`labelling`]), normalizes message text ([`textprep`]), builds
//! bag-of-words features ([`features`]), trains naive Bayes or logistic
//! regression classifiers ([`models`]) and scores them, including a
//! precision-thresholded invest/avoid signal ([`eval`]). [`cli`] wires the
//! stages into commands that read and write files.

pub mod cli;
pub mod eval;
pub mod features;
pub mod labelling;
pub mod market_data;
pub mod models;
pub mod textprep;
